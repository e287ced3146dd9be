#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "histocase/casegen.hpp"
#include "histocase/image.hpp"

namespace histocase::model {

struct StageConfig {
    int width = 8;
    int units = 1;
    bool downsample = false;  // stride 2 in the first unit of the stage

    bool operator==(const StageConfig&) const = default;
};

// Pre-activation residual network. Each unit runs
// BatchNorm -> ReLU -> Conv3x3 -> BatchNorm -> ReLU -> Conv3x3 and adds the shortcut.
// The first unit of a stage uses a 1x1 projection shortcut when the channel count or
// resolution changes. After the last stage: BatchNorm -> ReLU -> global average pool -> FC.
struct NetworkConfig {
    int input_height = 16;
    int input_width = 16;
    int input_channels = 12;  // 3 per magnification
    int stem_width = 8;
    std::vector<StageConfig> stages{{8, 1, false}, {16, 1, true}};
    int num_classes = 2;
    double bn_epsilon = 1e-5;
    double bn_momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch

    bool operator==(const NetworkConfig&) const = default;
};

NetworkConfig tiny_config(int height, int width, int magnifications, int num_classes);
NetworkConfig resnet18_config(int height, int width, int magnifications, int num_classes);
NetworkConfig preset(const std::string& name, int height, int width, int magnifications, int num_classes);
void validate(const NetworkConfig& config);

void to_json(nlohmann::json& j, const NetworkConfig& config);
void from_json(const nlohmann::json& j, NetworkConfig& config);

struct ConvParams {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;
    std::vector<double> weight;  // [out][in][ky][kx]
    std::vector<double> bias;    // [out]
};

struct BatchNormParams {
    std::vector<double> gamma;
    std::vector<double> beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
};

struct UnitParams {
    BatchNormParams bn1;
    ConvParams conv1;
    BatchNormParams bn2;
    ConvParams conv2;
    std::optional<ConvParams> projection;
};

struct DenseParams {
    int in_features = 0;
    int out_features = 0;
    std::vector<double> weight;  // [out][in]
    std::vector<double> bias;
};

struct Parameters {
    ConvParams stem;
    std::vector<UnitParams> units;
    BatchNormParams final_bn;
    DenseParams fc;
};

struct TensorRef {
    std::string name;
    std::vector<double>* data;
};
struct ConstTensorRef {
    std::string name;
    const std::vector<double>* data;
};

// Learned tensors in a fixed canonical order.
std::vector<TensorRef> trainable_tensors(Parameters& params);
std::vector<ConstTensorRef> trainable_tensors(const Parameters& params);
// BatchNorm running statistics, canonical order.
std::vector<TensorRef> running_tensors(Parameters& params);
std::vector<ConstTensorRef> running_tensors(const Parameters& params);

// Structure (shapes, projections) from the config; He-normal conv/FC weights, zero
// biases, gamma 1, beta 0, running mean 0, running variance 1.
Parameters init_parameters(const NetworkConfig& config, std::uint64_t seed);
// Same shapes, every tensor zero (gradients, momentum buffers).
Parameters zeros_like(const Parameters& params);
void check_shapes(const NetworkConfig& config, const Parameters& params);

// Channel-major batch storage [C][N][H][W].
struct Activation {
    int channels = 0;
    int batch = 0;
    int height = 0;
    int width = 0;
    std::vector<double> values;

    Activation() = default;
    Activation(int c, int n, int h, int w)
        : channels(c), batch(n), height(h), width(w), values(static_cast<std::size_t>(c) * n * h * w, 0.0) {}

    std::size_t plane() const { return static_cast<std::size_t>(batch) * height * width; }
    double* channel(int c) { return values.data() + c * plane(); }
    const double* channel(int c) const { return values.data() + c * plane(); }
};

// Fused case tensor: the per-magnification images concatenated on the channel axis in
// ascending magnification order (channels [3i, 3i+3) hold magnification i).
ImageTensor assemble_case_tensor(const casegen::Case& c, const ImageStore& store);
Activation make_batch(const std::vector<const ImageTensor*>& tensors);

enum class Mode { Train, Eval };

struct Logits {
    int batch = 0;
    int classes = 0;
    std::vector<double> values;  // row-major [batch][classes]

    double at(int i, int k) const { return values[static_cast<std::size_t>(i) * classes + k]; }
};

// Everything the backward pass needs, plus the batch statistics a train-mode pass observed.
struct ForwardCache;

struct ForwardResult {
    Logits logits;
    std::shared_ptr<ForwardCache> cache;
};

// Pure in `params`. Train mode normalizes with batch statistics and records them in the
// cache; apply them with update_running_stats. Throws NonFiniteActivation on NaN/Inf logits.
ForwardResult forward(const NetworkConfig& config, const Parameters& params, const Activation& batch, Mode mode);

void update_running_stats(const NetworkConfig& config, Parameters& params, const ForwardCache& cache);

std::vector<double> softmax(std::span<const double> logits);
double cross_entropy(const Logits& logits, std::span<const int> labels);

struct LossAndGrad {
    double loss = 0.0;
    Parameters grads;
    ForwardResult forward;
};

// Mean softmax cross-entropy over the batch (train mode) and its exact gradient.
LossAndGrad loss_and_grad(const NetworkConfig& config, const Parameters& params, const Activation& batch,
                          std::span<const int> labels);

// Train-mode loss only, without touching running statistics.
double loss(const NetworkConfig& config, const Parameters& params, const Activation& batch, std::span<const int> labels);

struct Prediction {
    int label = 0;  // argmax, ties to the lower index
    std::vector<double> probabilities;
};

Prediction predict_from_logits(std::span<const double> logits);
Prediction predict(const NetworkConfig& config, const Parameters& params, const ImageTensor& case_tensor);
std::vector<Prediction> predict_batch(const NetworkConfig& config, const Parameters& params, const Activation& batch);

// Single residual unit in eval mode, exposed for the identity property.
Activation residual_unit_eval(const NetworkConfig& config, const UnitParams& unit, const Activation& input);

}  // namespace histocase::model
