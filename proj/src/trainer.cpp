#include "histocase/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "histocase/checkpoint.hpp"
#include "histocase/error.hpp"
#include "histocase/io.hpp"
#include "histocase/random.hpp"

namespace histocase::trainer {

void validate(const TrainConfig& c) {
    if (c.batch_size < 1) fail(ErrorKind::InvalidConfig, "batch_size must be >= 1");
    if (!(c.lr0 > 0.0)) fail(ErrorKind::InvalidConfig, "lr0 must be > 0");
    if (!(c.decay >= 0.0)) fail(ErrorKind::InvalidConfig, "decay must be >= 0");
    if (!(c.momentum >= 0.0 && c.momentum < 1.0)) fail(ErrorKind::InvalidConfig, "momentum must lie in [0, 1)");
    if (c.epochs < 1) fail(ErrorKind::InvalidConfig, "epochs must be >= 1");
    if (!(c.holdout_fraction >= 0.0 && c.holdout_fraction < 1.0))
        fail(ErrorKind::InvalidConfig, "holdout_fraction must lie in [0, 1)");
    if (c.checkpoint_every < 0) fail(ErrorKind::InvalidConfig, "checkpoint_every must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"batch_size", c.batch_size}, {"lr0", c.lr0},
         {"decay", c.decay},           {"momentum", c.momentum},
         {"epochs", c.epochs},         {"seed", c.seed},
         {"shuffle", c.shuffle},       {"holdout_fraction", c.holdout_fraction},
         {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr0 = j.value("lr0", c.lr0);
    c.decay = j.value("decay", c.decay);
    c.momentum = j.value("momentum", c.momentum);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.shuffle = j.value("shuffle", c.shuffle);
    c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
}

OptimizerState init_optimizer(const model::Parameters& params) { return {model::zeros_like(params), 0}; }

double learning_rate(const TrainConfig& config, std::uint64_t t) {
    return config.lr0 / (1.0 + config.decay * static_cast<double>(t));
}

void sgd_step(model::Parameters& params, OptimizerState& state, const model::Parameters& grads,
              const TrainConfig& config) {
    const auto g = model::trainable_tensors(grads);
    for (const auto& t : g)
        for (double v : *t.data)
            if (!std::isfinite(v)) fail(ErrorKind::NonFiniteGradient, t.name);

    auto p = model::trainable_tensors(params);
    auto v = model::trainable_tensors(state.velocity);
    if (p.size() != g.size() || p.size() != v.size()) fail(ErrorKind::ShapeMismatch, "optimizer tensor count mismatch");
    const double lr = learning_rate(config, state.t);
    const double mu = config.momentum;
    for (std::size_t i = 0; i < p.size(); ++i) {
        auto& theta = *p[i].data;
        auto& vel = *v[i].data;
        const auto& grad = *g[i].data;
        if (theta.size() != grad.size() || theta.size() != vel.size())
            fail(ErrorKind::ShapeMismatch, p[i].name + " shape mismatch in optimizer");
        for (std::size_t j = 0; j < theta.size(); ++j) {
            vel[j] = mu * vel[j] - lr * grad[j];
            theta[j] += mu * vel[j] - lr * grad[j];
        }
    }
    ++state.t;
}

std::uint64_t steps_per_epoch(std::uint64_t cases, int batch_size) {
    return (cases + static_cast<std::uint64_t>(batch_size) - 1) / static_cast<std::uint64_t>(batch_size);
}

namespace {

nlohmann::json history_json(const TrainingHistory& h) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : h.epochs) {
        nlohmann::json row = {{"epoch", e.epoch},
                              {"mean_loss", e.mean_loss},
                              {"train_case_accuracy", e.train_case_accuracy},
                              {"seconds", e.seconds}};
        if (e.holdout_accuracy) row["holdout_accuracy"] = *e.holdout_accuracy;
        epochs.push_back(row);
    }
    return {{"epochs", epochs}, {"steps", h.steps}, {"config", h.config_snapshot}};
}

TrainingHistory history_from_json(const nlohmann::json& j) {
    TrainingHistory h;
    h.steps = j.at("steps").get<std::uint64_t>();
    h.config_snapshot = j.value("config", nlohmann::json::object());
    for (const auto& row : j.at("epochs")) {
        EpochRecord e{row.at("epoch").get<int>(), row.at("mean_loss").get<double>(),
                      row.at("train_case_accuracy").get<double>(), row.at("seconds").get<double>(), std::nullopt};
        if (row.contains("holdout_accuracy")) e.holdout_accuracy = row.at("holdout_accuracy").get<double>();
        h.epochs.push_back(e);
    }
    return h;
}

struct PreparedCases {
    std::vector<int> labels;
    std::vector<std::size_t> train;
    std::vector<std::size_t> holdout;
};

PreparedCases prepare(const model::NetworkConfig& network, const casegen::CaseSet& cases,
                      const dataset::Manifest& manifest, const TrainConfig& config) {
    if (cases.cases.empty()) fail(ErrorKind::EmptyInput, "empty case set");
    PreparedCases p;
    for (const auto& c : cases.cases) {
        const auto idx = static_cast<int>(manifest.label_index(c.label));
        if (idx >= network.num_classes) fail(ErrorKind::InvalidArgument, "label " + c.label + " exceeds the model's classes");
        p.labels.push_back(idx);
    }
    std::vector<std::size_t> order(cases.cases.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t n_hold = 0;
    if (config.holdout_fraction > 0.0) {
        n_hold = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(config.holdout_fraction * order.size())));
        if (n_hold >= order.size()) fail(ErrorKind::InvalidConfig, "holdout leaves no training cases");
        Rng rng(derive_seed(config.seed, "trainer/holdout"));
        rng.shuffle(std::span<std::size_t>(order));
    }
    p.holdout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
    p.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
    std::sort(p.holdout.begin(), p.holdout.end());
    std::sort(p.train.begin(), p.train.end());
    return p;
}

model::Activation case_batch(const casegen::CaseSet& cases, std::span<const std::size_t> idx, const ImageStore& images) {
    std::vector<ImageTensor> tensors;
    tensors.reserve(idx.size());
    for (std::size_t i : idx) tensors.push_back(model::assemble_case_tensor(cases.cases[i], images));
    std::vector<const ImageTensor*> ptrs;
    for (const auto& t : tensors) ptrs.push_back(&t);
    return model::make_batch(ptrs);
}

double holdout_accuracy(const model::NetworkConfig& network, const model::Parameters& params,
                        const casegen::CaseSet& cases, const PreparedCases& prepared, const ImageStore& images,
                        int batch_size) {
    std::size_t correct = 0;
    for (std::size_t b = 0; b < prepared.holdout.size(); b += batch_size) {
        const auto n = std::min<std::size_t>(batch_size, prepared.holdout.size() - b);
        std::span<const std::size_t> idx(prepared.holdout.data() + b, n);
        const auto preds = model::predict_batch(network, params, case_batch(cases, idx, images));
        for (std::size_t i = 0; i < n; ++i) correct += preds[i].label == prepared.labels[idx[i]] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(prepared.holdout.size());
}

TrainResult run_epochs(const model::NetworkConfig& network, TrainResult state, const casegen::CaseSet& cases,
                       const dataset::Manifest& manifest, const ImageStore& images, const TrainConfig& config,
                       const EpochCallback& on_epoch) {
    validate(config);
    model::check_shapes(network, state.params);
    const PreparedCases prepared = prepare(network, cases, manifest, config);
    const auto first_epoch = static_cast<int>(state.history.epochs.size()) + 1;

    for (int epoch = first_epoch; epoch <= config.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::vector<std::size_t> order = prepared.train;
        if (config.shuffle) {
            Rng rng(derive_seed(config.seed, "trainer/epoch/" + std::to_string(epoch)));
            rng.shuffle(std::span<std::size_t>(order));
        }
        double loss_sum = 0.0;
        std::size_t correct = 0;
        std::uint64_t step = 0;
        for (std::size_t b = 0; b < order.size(); b += config.batch_size, ++step) {
            const auto n = std::min<std::size_t>(config.batch_size, order.size() - b);
            std::span<const std::size_t> idx(order.data() + b, n);
            std::vector<int> labels;
            for (std::size_t i : idx) labels.push_back(prepared.labels[i]);
            try {
                const auto batch = case_batch(cases, idx, images);
                auto lg = model::loss_and_grad(network, state.params, batch, labels);
                sgd_step(state.params, state.optimizer, lg.grads, config);
                model::update_running_stats(network, state.params, *lg.forward.cache);
                loss_sum += lg.loss * static_cast<double>(n);
                const auto& logits = lg.forward.logits;
                for (std::size_t i = 0; i < n; ++i) {
                    const auto p = model::predict_from_logits(std::span<const double>(
                        logits.values.data() + i * logits.classes, static_cast<std::size_t>(logits.classes)));
                    correct += p.label == labels[i] ? 1 : 0;
                }
            } catch (const Error& e) {
                throw e.with_context("epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
            }
            ++state.history.steps;
        }
        EpochRecord record{epoch, loss_sum / static_cast<double>(order.size()),
                           static_cast<double>(correct) / static_cast<double>(order.size()), 0.0, std::nullopt};
        if (!prepared.holdout.empty())
            record.holdout_accuracy =
                holdout_accuracy(network, state.params, cases, prepared, images, config.batch_size);
        record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        state.history.epochs.push_back(record);
        if (on_epoch) on_epoch(record);
        if (config.checkpoint_every > 0 && !config.checkpoint_path.empty() &&
            (epoch % config.checkpoint_every == 0 || epoch == config.epochs))
            save_training_checkpoint(config.checkpoint_path, network, state, config);
    }
    return state;
}

std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

void save_training_checkpoint(const std::filesystem::path& path, const model::NetworkConfig& network,
                              const TrainResult& state, const TrainConfig& config) {
    model::Checkpoint ck{network, state.params, state.optimizer.velocity, {}};
    ck.metadata = {{"kind", "training"},
                   {"t", state.optimizer.t},
                   {"epochs_completed", state.history.epochs.size()},
                   {"train_config", config},
                   {"history", history_json(state.history)}};
    model::save_checkpoint(path, ck);
}

TrainResult train(const model::NetworkConfig& network, model::Parameters params, const casegen::CaseSet& cases,
                  const dataset::Manifest& manifest, const ImageStore& images, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
    TrainResult state{std::move(params), {}, {}};
    state.optimizer = init_optimizer(state.params);
    state.history.config_snapshot = {{"train", config}, {"network", network}};
    return run_epochs(network, std::move(state), cases, manifest, images, config, on_epoch);
}

TrainResult resume(const std::filesystem::path& checkpoint, const casegen::CaseSet& cases,
                   const dataset::Manifest& manifest, const ImageStore& images, const TrainConfig& config,
                   const EpochCallback& on_epoch) {
    auto ck = model::load_checkpoint(checkpoint);
    if (!ck.velocity || ck.metadata.value("kind", "") != "training")
        fail(ErrorKind::CheckpointFormat, checkpoint.string() + " is not a training checkpoint");
    TrainResult state{std::move(ck.params), {std::move(*ck.velocity), ck.metadata.at("t").get<std::uint64_t>()},
                      history_from_json(ck.metadata.at("history"))};
    return run_epochs(ck.config, std::move(state), cases, manifest, images, config, on_epoch);
}

void write_history_csv(const TrainingHistory& history, const std::filesystem::path& path) {
    const bool holdout = !history.epochs.empty() && history.epochs.front().holdout_accuracy.has_value();
    std::ostringstream ss;
    ss << "epoch,mean_loss,train_case_accuracy,seconds" << (holdout ? ",holdout_accuracy" : "") << '\n';
    for (const auto& e : history.epochs) {
        ss << e.epoch << ',' << format_number(e.mean_loss) << ',' << format_number(e.train_case_accuracy) << ','
           << format_number(e.seconds);
        if (holdout) ss << ',' << format_number(e.holdout_accuracy.value_or(0.0));
        ss << '\n';
    }
    io::write_text(path, ss.str());
}

}  // namespace histocase::trainer
