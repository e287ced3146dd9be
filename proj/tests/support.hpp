#pragma once

// Shared oracles and fixtures for the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "histocase/model.hpp"
#include "histocase/random.hpp"

namespace histocase::testkit {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::string worst_tensor;
    std::size_t checked = 0;
    std::vector<std::string> tensors;
};

// Central differences on every entry of every trainable tensor.
// Relative error |a - n| / max(|a|, |n|, floor); the floor keeps entries whose true
// gradient is zero (conv biases feeding a BatchNorm) from dividing noise by noise.
inline GradCheckResult gradient_check(const model::NetworkConfig& cfg, const model::Parameters& params,
                                      const model::Activation& batch, const std::vector<int>& labels,
                                      double h = 1e-4, double floor = 1e-7) {
    const auto analytic = model::loss_and_grad(cfg, params, batch, labels);
    model::Parameters probe = params;
    auto probe_refs = model::trainable_tensors(probe);
    auto grad_refs = model::trainable_tensors(analytic.grads);
    GradCheckResult out;
    for (std::size_t t = 0; t < probe_refs.size(); ++t) {
        auto& values = *probe_refs[t].data;
        const auto& g = *grad_refs[t].data;
        out.tensors.push_back(probe_refs[t].name);
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = model::loss(cfg, probe, batch, labels);
            values[i] = saved - h;
            const double down = model::loss(cfg, probe, batch, labels);
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double denom = std::max({std::abs(numeric), std::abs(g[i]), floor});
            const double rel = std::abs(numeric - g[i]) / denom;
            if (rel > out.max_relative_error) {
                out.max_relative_error = rel;
                out.worst_tensor = probe_refs[t].name + "[" + std::to_string(i) + "]";
            }
            ++out.checked;
        }
    }
    return out;
}

// Input 8x8x6 (two magnifications), stem width 2, one downsampling stage of width 4 with
// two units, so the first unit has a projection shortcut and the second an identity one.
inline model::NetworkConfig gradcheck_config() {
    model::NetworkConfig cfg;
    cfg.input_height = 8;
    cfg.input_width = 8;
    cfg.input_channels = 6;
    cfg.stem_width = 2;
    cfg.stages = {{4, 2, true}};
    cfg.num_classes = 2;
    return cfg;
}

inline model::Activation random_batch(int c, int n, int h, int w, std::uint64_t seed) {
    model::Activation a(c, n, h, w);
    Rng rng(seed);
    for (auto& v : a.values) v = rng.uniform01();
    return a;
}

// Nonzero BN affine parameters so their gradients are exercised away from the defaults.
inline void jitter_batchnorm(model::Parameters& p, std::uint64_t seed) {
    Rng rng(seed);
    auto jitter = [&](model::BatchNormParams& bn) {
        for (auto& g : bn.gamma) g = 1.0 + 0.3 * rng.normal();
        for (auto& b : bn.beta) b = 0.2 * rng.normal();
    };
    for (auto& u : p.units) {
        jitter(u.bn1);
        jitter(u.bn2);
    }
    jitter(p.final_bn);
    for (auto& b : p.fc.bias) b = 0.1 * rng.normal();
    for (auto& b : p.stem.bias) b = 0.1 * rng.normal();
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("histocase_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace histocase::testkit
