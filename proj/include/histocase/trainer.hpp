#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "histocase/casegen.hpp"
#include "histocase/image.hpp"
#include "histocase/model.hpp"

namespace histocase::trainer {

struct TrainConfig {
    int batch_size = 100;
    double lr0 = 0.001;
    double decay = 1e-6;     // per update: lr_t = lr0 / (1 + decay * t)
    double momentum = 0.9;   // Nesterov
    int epochs = 100;
    std::uint64_t seed = 0;  // shuffle seed
    bool shuffle = true;
    double holdout_fraction = 0.0;  // share of cases kept out of training, scored every epoch
    int checkpoint_every = 0;       // epochs; 0 disables
    std::filesystem::path checkpoint_path;
};

void validate(const TrainConfig& config);
void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

struct OptimizerState {
    model::Parameters velocity;
    std::uint64_t t = 0;
};

OptimizerState init_optimizer(const model::Parameters& params);

double learning_rate(const TrainConfig& config, std::uint64_t t);

// Nesterov momentum step:
//   v <- mu * v - lr_t * g
//   theta <- theta + mu * v - lr_t * g
//   t <- t + 1
// Throws NonFiniteGradient without modifying anything if a gradient is NaN/Inf.
void sgd_step(model::Parameters& params, OptimizerState& state, const model::Parameters& grads,
              const TrainConfig& config);

struct EpochRecord {
    int epoch = 0;  // 1-based
    double mean_loss = 0.0;
    double train_case_accuracy = 0.0;
    double seconds = 0.0;
    std::optional<double> holdout_accuracy;
};

struct TrainingHistory {
    std::vector<EpochRecord> epochs;
    std::uint64_t steps = 0;
    nlohmann::json config_snapshot;
};

void write_history_csv(const TrainingHistory& history, const std::filesystem::path& path);

struct TrainResult {
    model::Parameters params;
    OptimizerState optimizer;
    TrainingHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

std::uint64_t steps_per_epoch(std::uint64_t cases, int batch_size);

// Mini-batch training over the case set: epochs * ceil(cases / batch_size) updates, the
// last partial batch kept. Per-epoch order comes from a sub-seed of config.seed and the
// epoch number, so a resumed run reproduces an uninterrupted one.
TrainResult train(const model::NetworkConfig& network, model::Parameters params, const casegen::CaseSet& cases,
                  const dataset::Manifest& manifest, const ImageStore& images, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

// Resumable checkpoint: parameters, velocity, step counter and history.
void save_training_checkpoint(const std::filesystem::path& path, const model::NetworkConfig& network,
                              const TrainResult& state, const TrainConfig& config);

// Continues from a checkpoint written by train() (config.checkpoint_path).
TrainResult resume(const std::filesystem::path& checkpoint, const casegen::CaseSet& cases,
                   const dataset::Manifest& manifest, const ImageStore& images, const TrainConfig& config,
                   const EpochCallback& on_epoch = {});

}  // namespace histocase::trainer
