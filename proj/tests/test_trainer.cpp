#include <gtest/gtest.h>

#include <cmath>

#include "histocase/error.hpp"
#include "histocase/io.hpp"
#include "histocase/synthetic.hpp"
#include "histocase/trainer.hpp"
#include "support.hpp"

using namespace histocase;
using namespace histocase::trainer;

namespace {

model::Parameters scalar_params(double value) {
    model::Parameters p;
    p.fc.in_features = 1;
    p.fc.out_features = 1;
    p.fc.weight = {value};
    return p;
}

struct SmallProblem {
    synthetic::SyntheticCorpus corpus;
    ImageStore store;
    casegen::CaseSet cases;
    model::NetworkConfig network;
};

SmallProblem small_problem(double informative_fraction, std::uint64_t k, std::uint64_t seed) {
    synthetic::SyntheticSpec spec;
    spec.n_patients = 4;
    spec.images_per_cell = 6;
    spec.image_size = 16;
    spec.seed = seed;
    for (auto& s : spec.signals) s.informative_fraction = informative_fraction;
    SmallProblem p;
    p.corpus = synthetic::generate_synthetic_manifest(spec);
    p.store = load_image_store(p.corpus.pixels, {8, 8});
    p.cases = casegen::build_case_set(p.corpus.manifest, k, seed + 1);
    p.network = model::tiny_config(8, 8, 4, 2);
    return p;
}

void expect_same_params(const model::Parameters& a, const model::Parameters& b) {
    const auto ta = model::trainable_tensors(a);
    const auto tb = model::trainable_tensors(b);
    ASSERT_EQ(ta.size(), tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i].data, *tb[i].data) << ta[i].name;
    const auto ra = model::running_tensors(a);
    const auto rb = model::running_tensors(b);
    for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(*ra[i].data, *rb[i].data) << ra[i].name;
}

}  // namespace

TEST(Sgd, PlainStepWithoutMomentum) {
    auto p = scalar_params(1.0);
    auto state = init_optimizer(p);
    TrainConfig cfg;
    cfg.lr0 = 0.1;
    cfg.momentum = 0.0;
    cfg.decay = 0.0;
    sgd_step(p, state, scalar_params(1.0), cfg);
    EXPECT_DOUBLE_EQ(p.fc.weight[0], 0.9);
    EXPECT_EQ(state.t, 1u);
}

TEST(Sgd, NesterovHandEvaluated) {
    auto p = scalar_params(0.0);
    auto state = init_optimizer(p);
    TrainConfig cfg;
    cfg.lr0 = 0.1;
    cfg.momentum = 0.9;
    cfg.decay = 0.0;
    sgd_step(p, state, scalar_params(1.0), cfg);
    EXPECT_DOUBLE_EQ(state.velocity.fc.weight[0], -0.1);
    EXPECT_DOUBLE_EQ(p.fc.weight[0], -0.19);
}

TEST(Sgd, ReducesToGradientDescentOnRandomTensors) {
    const auto cfg_net = testkit::gradcheck_config();
    auto p = model::init_parameters(cfg_net, 1);
    const auto g = model::init_parameters(cfg_net, 2);
    const auto before = p;
    auto state = init_optimizer(p);
    TrainConfig cfg;
    cfg.lr0 = 0.05;
    cfg.momentum = 0.0;
    cfg.decay = 0.0;
    sgd_step(p, state, g, cfg);
    const auto tp = model::trainable_tensors(p);
    const auto tb = model::trainable_tensors(before);
    const auto tg = model::trainable_tensors(g);
    for (std::size_t i = 0; i < tp.size(); ++i)
        for (std::size_t j = 0; j < tp[i].data->size(); ++j)
            EXPECT_NEAR((*tp[i].data)[j], (*tb[i].data)[j] - 0.05 * (*tg[i].data)[j], 1e-15);
}

TEST(Sgd, LearningRateDecay) {
    TrainConfig cfg;
    cfg.lr0 = 0.001;
    cfg.decay = 1e-6;
    EXPECT_EQ(learning_rate(cfg, 0), 0.001);
    EXPECT_DOUBLE_EQ(learning_rate(cfg, 1'000'000), 0.0005);
    for (std::uint64_t t = 0; t < 1000; ++t) EXPECT_LT(learning_rate(cfg, t + 1), learning_rate(cfg, t));
}

TEST(Sgd, NonFiniteGradientLeavesStateUntouched) {
    auto p = scalar_params(2.0);
    auto state = init_optimizer(p);
    auto g = scalar_params(std::nan(""));
    try {
        sgd_step(p, state, g, TrainConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NonFiniteGradient);
    }
    EXPECT_EQ(p.fc.weight[0], 2.0);
    EXPECT_EQ(state.t, 0u);
    EXPECT_EQ(state.velocity.fc.weight[0], 0.0);
}

TEST(Config, EpochsZeroIsRejected) {
    TrainConfig cfg;
    cfg.epochs = 0;
    try {
        validate(cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
    }
    cfg.epochs = 1;
    cfg.momentum = 1.0;
    EXPECT_THROW(validate(cfg), Error);
}

TEST(Config, StepCountArithmetic) {
    EXPECT_EQ(steps_per_epoch(10'000, 100) * 100, 10'000u);
    EXPECT_EQ(steps_per_epoch(101, 100), 2u);
    EXPECT_EQ(steps_per_epoch(100, 100), 1u);
    EXPECT_EQ(steps_per_epoch(1, 100), 1u);
}

TEST(Train, LossDecreasesOverTenFullBatchSteps) {
    const auto cfg = testkit::gradcheck_config();
    auto params = model::init_parameters(cfg, 3);
    const auto batch = testkit::random_batch(6, 8, 8, 8, 4);
    const std::vector<int> labels{0, 1, 0, 1, 1, 0, 0, 1};
    auto state = init_optimizer(params);
    TrainConfig tc;
    tc.lr0 = 0.01;
    const double initial = model::loss(cfg, params, batch, labels);
    double previous = initial;
    for (int step = 0; step < 10; ++step) {
        const auto lg = model::loss_and_grad(cfg, params, batch, labels);
        sgd_step(params, state, lg.grads, tc);
        model::update_running_stats(cfg, params, *lg.forward.cache);
        const double now = model::loss(cfg, params, batch, labels);
        EXPECT_LT(now, previous) << "step " << step;
        previous = now;
    }
    EXPECT_LT(previous, initial);
}

TEST(Train, StepCountAndHistory) {
    auto p = small_problem(1.0, 46, 5);
    TrainConfig tc;
    tc.batch_size = 10;
    tc.epochs = 3;
    tc.seed = 1;
    int callbacks = 0;
    const auto r = train(p.network, model::init_parameters(p.network, 2), p.cases, p.corpus.manifest, p.store, tc,
                         [&](const EpochRecord&) { ++callbacks; });
    EXPECT_EQ(r.history.steps, 3u * 5u);
    EXPECT_EQ(r.optimizer.t, 15u);
    EXPECT_EQ(r.history.epochs.size(), 3u);
    EXPECT_EQ(callbacks, 3);
    const auto path = testkit::temp_dir("history") / "history.csv";
    write_history_csv(r.history, path);
    const auto text = io::read_text(path);
    EXPECT_EQ(text.substr(0, text.find('\n')), "epoch,mean_loss,train_case_accuracy,seconds");
}

TEST(Train, SeparableCorpusIsLearned) {
    auto p = small_problem(1.0, 400, 6);
    TrainConfig tc;
    tc.batch_size = 20;
    tc.epochs = 20;
    tc.seed = 3;
    const auto r = train(p.network, model::init_parameters(p.network, 4), p.cases, p.corpus.manifest, p.store, tc);
    double best = 0.0;
    for (const auto& e : r.history.epochs) best = std::max(best, e.train_case_accuracy);
    EXPECT_GE(best, 0.99);
}

TEST(Train, IdenticalSeedsGiveIdenticalParameters) {
    auto p = small_problem(0.5, 60, 7);
    TrainConfig tc;
    tc.batch_size = 16;
    tc.epochs = 2;
    tc.seed = 8;
    const auto a = train(p.network, model::init_parameters(p.network, 9), p.cases, p.corpus.manifest, p.store, tc);
    const auto b = train(p.network, model::init_parameters(p.network, 9), p.cases, p.corpus.manifest, p.store, tc);
    expect_same_params(a.params, b.params);
    EXPECT_EQ(a.history.epochs[1].mean_loss, b.history.epochs[1].mean_loss);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
    auto p = small_problem(0.5, 60, 10);
    const auto dir = testkit::temp_dir("resume");
    TrainConfig tc;
    tc.batch_size = 16;
    tc.epochs = 4;
    tc.seed = 11;
    const auto init = model::init_parameters(p.network, 12);
    const auto full = train(p.network, init, p.cases, p.corpus.manifest, p.store, tc);

    TrainConfig first = tc;
    first.epochs = 2;
    first.checkpoint_every = 1;
    first.checkpoint_path = dir / "train.ck";
    train(p.network, init, p.cases, p.corpus.manifest, p.store, first);
    const auto resumed = resume(first.checkpoint_path, p.cases, p.corpus.manifest, p.store, tc);
    expect_same_params(full.params, resumed.params);
    EXPECT_EQ(resumed.optimizer.t, full.optimizer.t);
    ASSERT_EQ(resumed.history.epochs.size(), 4u);
    EXPECT_EQ(resumed.history.epochs[3].mean_loss, full.history.epochs[3].mean_loss);
}

TEST(Train, HoldoutIsScoredEveryEpoch) {
    auto p = small_problem(1.0, 40, 13);
    TrainConfig tc;
    tc.batch_size = 8;
    tc.epochs = 2;
    tc.holdout_fraction = 0.25;
    const auto r = train(p.network, model::init_parameters(p.network, 1), p.cases, p.corpus.manifest, p.store, tc);
    EXPECT_EQ(r.history.steps, 2u * steps_per_epoch(30, 8));
    for (const auto& e : r.history.epochs) ASSERT_TRUE(e.holdout_accuracy.has_value());
}
