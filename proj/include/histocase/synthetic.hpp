#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "histocase/dataset.hpp"
#include "histocase/image.hpp"

namespace histocase::synthetic {

// Stripes: orientation encodes the class (coarse texture, meant for low magnifications).
// Dots: dot count encodes the class (cell density, meant for high magnifications).
enum class SignalKind { Stripes, Dots };

struct MagnificationSignal {
    int magnification = 40;
    SignalKind kind = SignalKind::Stripes;
    // Share of a patient's images in this cell that carry the class pattern; the rest
    // are class-independent background fields.
    double informative_fraction = 0.5;
    // Pattern contrast in [0, 1]; 0 makes every class render identically.
    double strength = 1.0;
};

std::vector<MagnificationSignal> default_signals();

struct SyntheticSpec {
    int n_patients = 8;
    int images_per_cell = 4;
    std::vector<std::string> labels{"benign", "malignant"};
    std::vector<MagnificationSignal> signals = default_signals();
    int image_size = 32;
    double noise = 0.05;
    std::uint64_t seed = 0;
    // 0: every patient shows its class at every magnification (per informative_fraction).
    // s > 0: patient i shows it only at s magnifications, rotating with i / |labels| so
    // each class spreads evenly over the magnifications; the others are all background.
    int scales_per_patient = 0;
};

struct SyntheticCorpus {
    dataset::Manifest manifest;  // pixel_source is "mem:<image_id>" until written
    std::map<std::string, Raster> pixels;
};

// Patient i (zero-based) gets label i mod |labels|; each patient has images_per_cell
// images at every magnification. Deterministic in `spec`.
SyntheticCorpus generate_synthetic_manifest(const SyntheticSpec& spec);

Raster render_image(SignalKind kind, std::size_t label_index, std::size_t n_labels, bool informative, double strength,
                    double noise, int size, std::uint64_t seed);

// Writes one PNG per image_id under `dir` and returns the manifest pointing at them.
dataset::Manifest write_pixel_store(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

SignalKind parse_signal_kind(const std::string& name);

}  // namespace histocase::synthetic
