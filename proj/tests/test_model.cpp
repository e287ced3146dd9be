#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "histocase/checkpoint.hpp"
#include "histocase/error.hpp"
#include "histocase/model.hpp"
#include "support.hpp"

using namespace histocase;
using namespace histocase::model;

namespace {

ImageTensor constant_image(int h, int w, double v) {
    ImageTensor t{h, w, 3, std::vector<double>(static_cast<std::size_t>(h) * w * 3, v)};
    return t;
}

std::vector<int> alternating_labels(int n) {
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) y[i] = i % 2;
    return y;
}

}  // namespace

TEST(Assemble, ConcatenatesChannelsInMagnificationOrder) {
    ImageStore store;
    for (int i = 0; i < 4; ++i) store.insert("img" + std::to_string(i), constant_image(100, 100, 0.1 * (i + 1)));
    casegen::Case c{{"img0", "img1", "img2", "img3"}, "benign", std::nullopt};
    const auto t = assemble_case_tensor(c, store);
    EXPECT_EQ(t.height, 100);
    EXPECT_EQ(t.width, 100);
    EXPECT_EQ(t.channels, 12);
    for (int m = 0; m < 4; ++m)
        for (int ch = 0; ch < 3; ++ch) EXPECT_DOUBLE_EQ(t.at(7, 9, 3 * m + ch), 0.1 * (m + 1));
}

TEST(Assemble, TwoMagnifications) {
    ImageStore store;
    store.insert("a", constant_image(8, 8, 0.2));
    store.insert("b", constant_image(8, 8, 0.4));
    const auto t = assemble_case_tensor({{"a", "b"}, "malignant", std::nullopt}, store);
    EXPECT_EQ(t.channels, 6);
    EXPECT_EQ(t.values.size(), 8u * 8u * 6u);
}

TEST(Assemble, DifferingHeightIsShapeMismatch) {
    ImageStore store;
    store.insert("a", constant_image(8, 8, 0.2));
    store.insert("b", constant_image(9, 8, 0.4));
    try {
        assemble_case_tensor({{"a", "b"}, "benign", std::nullopt}, store);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
    }
}

TEST(Forward, LogitShapeForAnyBatch) {
    const auto cfg = tiny_config(16, 16, 4, 2);
    const auto params = init_parameters(cfg, 3);
    for (int n : {1, 2, 5}) {
        const auto batch = testkit::random_batch(12, n, 16, 16, 10 + n);
        const auto out = forward(cfg, params, batch, Mode::Eval);
        EXPECT_EQ(out.logits.batch, n);
        EXPECT_EQ(out.logits.classes, 2);
        EXPECT_EQ(out.logits.values.size(), static_cast<std::size_t>(2 * n));
    }
}

TEST(Forward, ShapeAlgebraAcrossConfigs) {
    for (int classes : {2, 3, 8}) {
        NetworkConfig cfg = testkit::gradcheck_config();
        cfg.num_classes = classes;
        cfg.stages = {{3, 1, false}, {5, 2, true}, {5, 1, true}};
        const auto params = init_parameters(cfg, 1);
        EXPECT_NO_THROW(check_shapes(cfg, params));
        ASSERT_EQ(params.units.size(), 4u);
        EXPECT_TRUE(params.units[0].projection.has_value());   // 2 -> 3 channels
        EXPECT_TRUE(params.units[1].projection.has_value());   // 3 -> 5, downsample
        EXPECT_FALSE(params.units[2].projection.has_value());
        EXPECT_TRUE(params.units[3].projection.has_value());   // downsample only
        const auto out = forward(cfg, params, testkit::random_batch(6, 3, 8, 8, 2), Mode::Train);
        EXPECT_EQ(out.logits.batch, 3);
        EXPECT_EQ(out.logits.classes, classes);
    }
}

TEST(Forward, WrongInputShapeIsRejected) {
    const auto cfg = tiny_config(16, 16, 4, 2);
    const auto params = init_parameters(cfg, 3);
    try {
        forward(cfg, params, testkit::random_batch(12, 2, 8, 16, 1), Mode::Eval);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
    }
}

TEST(Forward, NonFiniteInputIsDetected) {
    const auto cfg = testkit::gradcheck_config();
    const auto params = init_parameters(cfg, 3);
    auto batch = testkit::random_batch(6, 2, 8, 8, 1);
    batch.values[5] = std::nan("");
    try {
        forward(cfg, params, batch, Mode::Eval);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NonFiniteActivation);
    }
}

TEST(Forward, EvalModeIsDeterministic) {
    const auto cfg = tiny_config(16, 16, 4, 2);
    const auto params = init_parameters(cfg, 5);
    const auto batch = testkit::random_batch(12, 3, 16, 16, 9);
    EXPECT_EQ(forward(cfg, params, batch, Mode::Eval).logits.values,
              forward(cfg, params, batch, Mode::Eval).logits.values);
}

TEST(Forward, TrainModeLeavesParametersUntouchedUntilCommit) {
    const auto cfg = testkit::gradcheck_config();
    auto params = init_parameters(cfg, 5);
    const auto before = params.final_bn.running_mean;
    const auto out = forward(cfg, params, testkit::random_batch(6, 4, 8, 8, 9), Mode::Train);
    EXPECT_EQ(params.final_bn.running_mean, before);
    update_running_stats(cfg, params, *out.cache);
    EXPECT_NE(params.final_bn.running_mean, before);
    for (const auto& t : running_tensors(params))
        if (t.name.ends_with("running_var"))
            for (double v : *t.data) EXPECT_GE(v, 0.0);
}

TEST(ResidualUnit, ZeroBranchIsIdentity) {
    NetworkConfig cfg = testkit::gradcheck_config();
    cfg.stem_width = 4;
    cfg.stages = {{4, 2, false}};
    auto params = init_parameters(cfg, 11);
    auto unit = params.units[1];
    ASSERT_FALSE(unit.projection.has_value());
    std::fill(unit.conv1.weight.begin(), unit.conv1.weight.end(), 0.0);
    std::fill(unit.conv1.bias.begin(), unit.conv1.bias.end(), 0.0);
    std::fill(unit.conv2.weight.begin(), unit.conv2.weight.end(), 0.0);
    std::fill(unit.conv2.bias.begin(), unit.conv2.bias.end(), 0.0);
    const auto x = testkit::random_batch(4, 3, 8, 8, 4);
    const auto y = residual_unit_eval(cfg, unit, x);
    EXPECT_EQ(y.channels, x.channels);
    EXPECT_EQ(y.batch, x.batch);
    EXPECT_EQ(y.height, x.height);
    EXPECT_EQ(y.width, x.width);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.values.size(); ++i) worst = std::max(worst, std::abs(y.values[i] - x.values[i]));
    EXPECT_LE(worst, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> z(2 + trial % 5);
        for (auto& v : z) v = 30.0 * rng.normal();
        const auto p = softmax(z);
        const double s = std::accumulate(p.begin(), p.end(), 0.0);
        EXPECT_NEAR(s, 1.0, 1e-6);
        for (double v : p) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Softmax, TwoClassExample) {
    const auto pred = predict_from_logits(std::vector<double>{2.0, -1.0});
    EXPECT_EQ(pred.label, 0);
    EXPECT_NEAR(pred.probabilities[0], 0.9526, 5e-5);
    EXPECT_NEAR(pred.probabilities[1], 0.0474, 5e-5);
}

TEST(Softmax, TieGoesToLowerIndex) {
    EXPECT_EQ(predict_from_logits(std::vector<double>{0.5, 0.5}).label, 0);
    EXPECT_EQ(predict_from_logits(std::vector<double>{-1.0, 3.0, 3.0}).label, 1);
}

TEST(Loss, UniformLogitsGiveLn2) {
    Logits z{3, 2, {0.0, 0.0, 1.5, 1.5, -2.0, -2.0}};
    const std::vector<int> y{0, 1, 1};
    EXPECT_NEAR(cross_entropy(z, y), std::log(2.0), 1e-12);
}

TEST(Loss, DuplicatedBatchKeepsLoss) {
    const auto cfg = testkit::gradcheck_config();
    auto params = init_parameters(cfg, 21);
    testkit::jitter_batchnorm(params, 22);
    const auto batch = testkit::random_batch(6, 3, 8, 8, 23);
    Activation doubled(6, 6, 8, 8);
    const std::size_t per = 8 * 8;
    for (int c = 0; c < 6; ++c)
        for (int n = 0; n < 6; ++n)
            std::copy_n(batch.channel(c) + (n % 3) * per, per, doubled.channel(c) + n * per);
    const std::vector<int> y{0, 1, 1};
    const std::vector<int> yy{0, 1, 1, 0, 1, 1};
    EXPECT_NEAR(loss(cfg, params, batch, y), loss(cfg, params, doubled, yy), 1e-12);
}

TEST(Gradient, MatchesCentralDifferencesForEveryTensorKind) {
    const auto cfg = testkit::gradcheck_config();
    auto params = init_parameters(cfg, 31);
    testkit::jitter_batchnorm(params, 32);
    const auto batch = testkit::random_batch(6, 4, 8, 8, 33);
    const auto result = testkit::gradient_check(cfg, params, batch, alternating_labels(4));
    bool has_projection = false;
    bool has_gamma = false;
    for (const auto& n : result.tensors) {
        has_projection = has_projection || n.find("projection") != std::string::npos;
        has_gamma = has_gamma || n.find("gamma") != std::string::npos;
    }
    EXPECT_TRUE(has_projection);
    EXPECT_TRUE(has_gamma);
    EXPECT_LT(result.max_relative_error, 1e-4) << "worst: " << result.worst_tensor;
}

TEST(Gradient, ThreeClassesWithTwoStages) {
    NetworkConfig cfg = testkit::gradcheck_config();
    cfg.num_classes = 3;
    cfg.stages = {{3, 1, false}, {4, 1, true}};
    auto params = init_parameters(cfg, 41);
    testkit::jitter_batchnorm(params, 42);
    const auto batch = testkit::random_batch(6, 3, 8, 8, 43);
    const auto result = testkit::gradient_check(cfg, params, batch, {0, 2, 1});
    EXPECT_LT(result.max_relative_error, 1e-4) << "worst: " << result.worst_tensor;
}

TEST(Checkpoint, RoundTripsBitExactly) {
    const auto cfg = testkit::gradcheck_config();
    auto params = init_parameters(cfg, 51);
    testkit::jitter_batchnorm(params, 52);
    const auto fwd = forward(cfg, params, testkit::random_batch(6, 4, 8, 8, 53), Mode::Train);
    update_running_stats(cfg, params, *fwd.cache);
    Checkpoint ck{cfg, params, zeros_like(params), {{"seed", 51}}};
    (*ck.velocity).fc.weight[0] = 0.125;
    const auto path = testkit::temp_dir("checkpoint") / "net.bin";
    save_checkpoint(path, ck);
    const auto back = load_checkpoint(path);
    EXPECT_EQ(back.config, cfg);
    EXPECT_EQ(back.metadata.at("seed"), 51);
    const auto a = trainable_tensors(params);
    const auto b = trainable_tensors(back.params);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].data, *b[i].data) << a[i].name;
    const auto ra = running_tensors(params);
    const auto rb = running_tensors(back.params);
    for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(*ra[i].data, *rb[i].data) << ra[i].name;
    ASSERT_TRUE(back.velocity.has_value());
    EXPECT_EQ(back.velocity->fc.weight[0], 0.125);
}

TEST(Checkpoint, RejectsGarbage) {
    const auto path = testkit::temp_dir("checkpoint_bad") / "bad.bin";
    std::ofstream(path) << "not a checkpoint";
    try {
        load_checkpoint(path);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::CheckpointFormat);
    }
}

TEST(Config, JsonRoundTrip) {
    const auto cfg = resnet18_config(100, 100, 4, 2);
    nlohmann::json j = cfg;
    EXPECT_EQ(j.get<NetworkConfig>(), cfg);
    EXPECT_EQ(cfg.input_channels, 12);
    EXPECT_EQ(cfg.stages.size(), 4u);
}
