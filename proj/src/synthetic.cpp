#include "histocase/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "histocase/error.hpp"
#include "histocase/random.hpp"

namespace histocase::synthetic {

namespace {

constexpr int kMinDots = 3;
constexpr int kDotRange = 10;

// H&E-like tint: pink background, purple pattern.
constexpr double kBackground[3] = {0.93, 0.76, 0.86};
constexpr double kForeground[3] = {0.42, 0.22, 0.58};

}  // namespace

std::vector<MagnificationSignal> default_signals() {
    return {
        {40, SignalKind::Stripes, 0.5, 1.0},
        {100, SignalKind::Stripes, 0.5, 1.0},
        {200, SignalKind::Dots, 0.5, 1.0},
        {400, SignalKind::Dots, 0.5, 1.0},
    };
}

SignalKind parse_signal_kind(const std::string& name) {
    if (name == "stripes") return SignalKind::Stripes;
    if (name == "dots") return SignalKind::Dots;
    fail(ErrorKind::InvalidArgument, "unknown signal kind '" + name + "'");
}

Raster render_image(SignalKind kind, std::size_t label_index, std::size_t n_labels, bool informative, double strength,
                    double noise, int size, std::uint64_t seed) {
    Rng rng(seed);
    const double frac = n_labels > 1 ? static_cast<double>(label_index) / static_cast<double>(n_labels - 1) : 0.0;

    // The same draws are consumed for every label so that strength 0 yields identical images.
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::vector<std::pair<double, double>> dots(kMinDots + kDotRange);
    for (auto& d : dots) d = {rng.uniform(0.0, size), rng.uniform(0.0, size)};

    std::vector<double> pattern(static_cast<std::size_t>(size) * size, 0.0);
    if (informative && strength > 0.0) {
        if (kind == SignalKind::Stripes) {
            const double theta = std::numbers::pi * 0.5 * frac;
            const double period = std::max(4.0, size / 4.0);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    pattern[y * size + x] =
                        0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * (x * std::cos(theta) + y * std::sin(theta)) /
                                                  period +
                                              phase));
        } else {
            const auto count = static_cast<std::size_t>(kMinDots + std::lround(kDotRange * frac));
            const double radius = std::max(1.0, size / 16.0);
            for (std::size_t i = 0; i < count; ++i) {
                const auto [cx, cy] = dots[i];
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
                        const double v = std::clamp(radius + 0.5 - d, 0.0, 1.0);
                        pattern[y * size + x] = std::max(pattern[y * size + x], v);
                    }
            }
        }
        for (double& v : pattern) v *= strength;
    }

    Raster r{size, size, 3, {}};
    r.pixels.resize(static_cast<std::size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c) {
                const double a = pattern[y * size + x];
                double v = kBackground[c] + a * (kForeground[c] - kBackground[c]) + noise * rng.normal();
                r.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
    return r;
}

SyntheticCorpus generate_synthetic_manifest(const SyntheticSpec& spec) {
    if (spec.n_patients < 2) fail(ErrorKind::InvalidArgument, "n_patients must be >= 2");
    if (spec.images_per_cell < 1) fail(ErrorKind::InvalidArgument, "images_per_cell must be >= 1");
    if (spec.labels.empty()) fail(ErrorKind::InvalidArgument, "at least one label is required");
    if (spec.signals.empty()) fail(ErrorKind::InvalidArgument, "at least one magnification is required");
    if (spec.image_size < 4) fail(ErrorKind::InvalidArgument, "image_size must be >= 4");
    if (spec.scales_per_patient < 0 || spec.scales_per_patient > static_cast<int>(spec.signals.size()))
        fail(ErrorKind::InvalidArgument, "scales_per_patient must lie in [0, number of magnifications]");
    for (const auto& s : spec.signals) {
        if (s.informative_fraction < 0.0 || s.informative_fraction > 1.0 || s.strength < 0.0 || s.strength > 1.0)
            fail(ErrorKind::InvalidArgument, "signal parameters must lie in [0, 1]");
    }

    SyntheticCorpus corpus;
    std::vector<dataset::ImageRecord> records;
    std::vector<int> mags;
    for (const auto& s : spec.signals) mags.push_back(s.magnification);

    for (int p = 0; p < spec.n_patients; ++p) {
        char pid[32];
        std::snprintf(pid, sizeof pid, "P%03d", p);
        const std::size_t label = static_cast<std::size_t>(p) % spec.labels.size();
        for (std::size_t m = 0; m < spec.signals.size(); ++m) {
            const auto& signal = spec.signals[m];
            const auto n_mags = spec.signals.size();
            const auto offset = (m + n_mags - (static_cast<std::size_t>(p) / spec.labels.size()) % n_mags) % n_mags;
            const bool patient_scale = spec.scales_per_patient == 0 ||
                                       offset < static_cast<std::size_t>(spec.scales_per_patient);
            // Exactly round(fraction * n) informative images per patient and cell.
            const auto n_informative =
                patient_scale ? static_cast<std::size_t>(std::lround(signal.informative_fraction * spec.images_per_cell))
                              : std::size_t{0};
            std::vector<char> informative(static_cast<std::size_t>(spec.images_per_cell), 0);
            std::fill_n(informative.begin(), n_informative, 1);
            Rng pick(derive_seed(spec.seed, std::string("synthetic/informative/") + pid + "/" +
                                                std::to_string(signal.magnification)));
            pick.shuffle(std::span<char>(informative));

            for (int j = 0; j < spec.images_per_cell; ++j) {
                char id[64];
                std::snprintf(id, sizeof id, "%s-%d-%03d", pid, signal.magnification, j);
                dataset::ImageRecord r;
                r.image_id = id;
                r.patient_id = pid;
                r.malignancy = spec.labels[label];
                r.magnification = signal.magnification;
                r.pixel_source = std::string("mem:") + id;
                r.native_width = spec.image_size;
                r.native_height = spec.image_size;
                // Background fields are one shared rendering per magnification, so a classifier
                // sees them all alike and cannot pick up patient or class from their noise.
                const bool shows_class = informative[j] != 0;
                const auto seed = shows_class ? derive_seed(spec.seed, std::string("synthetic/image/") + id)
                                              : derive_seed(spec.seed, "synthetic/background/" +
                                                                           std::to_string(signal.magnification));
                corpus.pixels.emplace(id, render_image(signal.kind, label, spec.labels.size(), shows_class,
                                                       signal.strength, spec.noise, spec.image_size, seed));
                records.push_back(std::move(r));
            }
        }
    }
    corpus.manifest = dataset::Manifest(std::move(records), {spec.labels, mags});
    return corpus;
}

dataset::Manifest write_pixel_store(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<dataset::ImageRecord> records = corpus.manifest.records();
    for (auto& r : records) {
        const auto path = dir / (r.image_id + ".png");
        write_png(path, corpus.pixels.at(r.image_id));
        r.pixel_source = path.string();
    }
    return dataset::Manifest(std::move(records), corpus.manifest.schema());
}

}  // namespace histocase::synthetic
