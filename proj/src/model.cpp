#include "histocase/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Core>

#include "histocase/error.hpp"
#include "histocase/random.hpp"

namespace histocase::model {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstMatrixMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

NetworkConfig tiny_config(int height, int width, int magnifications, int num_classes) {
    NetworkConfig c;
    c.input_height = height;
    c.input_width = width;
    c.input_channels = 3 * magnifications;
    c.stem_width = 8;
    c.stages = {{8, 1, false}, {16, 1, true}};
    c.num_classes = num_classes;
    return c;
}

NetworkConfig resnet18_config(int height, int width, int magnifications, int num_classes) {
    NetworkConfig c;
    c.input_height = height;
    c.input_width = width;
    c.input_channels = 3 * magnifications;
    c.stem_width = 64;
    c.stages = {{64, 2, false}, {128, 2, true}, {256, 2, true}, {512, 2, true}};
    c.num_classes = num_classes;
    return c;
}

NetworkConfig preset(const std::string& name, int height, int width, int magnifications, int num_classes) {
    if (name == "tiny") return tiny_config(height, width, magnifications, num_classes);
    if (name == "resnet18") return resnet18_config(height, width, magnifications, num_classes);
    fail(ErrorKind::InvalidConfig, "unknown network preset '" + name + "'");
}

void validate(const NetworkConfig& c) {
    if (c.input_height <= 0 || c.input_width <= 0 || c.input_channels <= 0)
        fail(ErrorKind::InvalidConfig, "input shape must be positive");
    if (c.stem_width <= 0) fail(ErrorKind::InvalidConfig, "stem width must be positive");
    if (c.stages.empty()) fail(ErrorKind::InvalidConfig, "at least one stage is required");
    for (const auto& s : c.stages)
        if (s.width <= 0 || s.units <= 0) fail(ErrorKind::InvalidConfig, "stage width and units must be positive");
    if (c.num_classes < 1) fail(ErrorKind::InvalidConfig, "num_classes must be positive");
    if (!(c.bn_epsilon > 0.0)) fail(ErrorKind::InvalidConfig, "bn_epsilon must be positive");
    if (!(c.bn_momentum >= 0.0 && c.bn_momentum < 1.0)) fail(ErrorKind::InvalidConfig, "bn_momentum must lie in [0,1)");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : c.stages) stages.push_back({{"width", s.width}, {"units", s.units}, {"downsample", s.downsample}});
    j = {{"input_shape", {c.input_height, c.input_width, c.input_channels}},
         {"stem_width", c.stem_width},
         {"stages", stages},
         {"num_classes", c.num_classes},
         {"bn_epsilon", c.bn_epsilon},
         {"bn_momentum", c.bn_momentum}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
    const auto shape = j.at("input_shape").get<std::vector<int>>();
    if (shape.size() != 3) fail(ErrorKind::InvalidConfig, "input_shape needs 3 entries");
    c.input_height = shape[0];
    c.input_width = shape[1];
    c.input_channels = shape[2];
    c.stem_width = j.at("stem_width").get<int>();
    c.stages.clear();
    for (const auto& s : j.at("stages"))
        c.stages.push_back({s.at("width").get<int>(), s.at("units").get<int>(), s.at("downsample").get<bool>()});
    c.num_classes = j.at("num_classes").get<int>();
    c.bn_epsilon = j.value("bn_epsilon", 1e-5);
    c.bn_momentum = j.value("bn_momentum", 0.9);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace {

struct UnitShape {
    int in_channels;
    int out_channels;
    int stride;
    bool projection;
};

std::vector<UnitShape> unit_shapes(const NetworkConfig& c) {
    std::vector<UnitShape> shapes;
    int channels = c.stem_width;
    for (const auto& stage : c.stages) {
        for (int u = 0; u < stage.units; ++u) {
            const int stride = (u == 0 && stage.downsample) ? 2 : 1;
            shapes.push_back({channels, stage.width, stride, channels != stage.width || stride != 1});
            channels = stage.width;
        }
    }
    return shapes;
}

int output_extent(int extent, int kernel, int stride) { return (extent + 2 * (kernel / 2) - kernel) / stride + 1; }

ConvParams make_conv(int in, int out, int kernel, int stride) {
    ConvParams p{in, out, kernel, stride, {}, {}};
    p.weight.assign(static_cast<std::size_t>(out) * in * kernel * kernel, 0.0);
    p.bias.assign(static_cast<std::size_t>(out), 0.0);
    return p;
}

BatchNormParams make_bn(int channels) {
    return {std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0),
            std::vector<double>(channels, 1.0)};
}

void he_normal(std::vector<double>& w, int fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / fan_in);
    for (double& v : w) v = stddev * rng.normal();
}

template <typename P, typename Ref>
std::vector<Ref> collect_trainable(P& p) {
    std::vector<Ref> out;
    auto conv = [&](const std::string& name, auto& c) {
        out.push_back({name + ".weight", &c.weight});
        out.push_back({name + ".bias", &c.bias});
    };
    auto bn = [&](const std::string& name, auto& b) {
        out.push_back({name + ".gamma", &b.gamma});
        out.push_back({name + ".beta", &b.beta});
    };
    conv("stem", p.stem);
    for (std::size_t i = 0; i < p.units.size(); ++i) {
        auto& u = p.units[i];
        const std::string prefix = "unit" + std::to_string(i);
        bn(prefix + ".bn1", u.bn1);
        conv(prefix + ".conv1", u.conv1);
        bn(prefix + ".bn2", u.bn2);
        conv(prefix + ".conv2", u.conv2);
        if (u.projection) conv(prefix + ".projection", *u.projection);
    }
    bn("final_bn", p.final_bn);
    out.push_back({"fc.weight", &p.fc.weight});
    out.push_back({"fc.bias", &p.fc.bias});
    return out;
}

template <typename P, typename Ref>
std::vector<Ref> collect_running(P& p) {
    std::vector<Ref> out;
    auto bn = [&](const std::string& name, auto& b) {
        out.push_back({name + ".running_mean", &b.running_mean});
        out.push_back({name + ".running_var", &b.running_var});
    };
    for (std::size_t i = 0; i < p.units.size(); ++i) {
        const std::string prefix = "unit" + std::to_string(i);
        bn(prefix + ".bn1", p.units[i].bn1);
        bn(prefix + ".bn2", p.units[i].bn2);
    }
    bn("final_bn", p.final_bn);
    return out;
}

}  // namespace

std::vector<TensorRef> trainable_tensors(Parameters& p) { return collect_trainable<Parameters, TensorRef>(p); }
std::vector<ConstTensorRef> trainable_tensors(const Parameters& p) {
    return collect_trainable<const Parameters, ConstTensorRef>(p);
}
std::vector<TensorRef> running_tensors(Parameters& p) { return collect_running<Parameters, TensorRef>(p); }
std::vector<ConstTensorRef> running_tensors(const Parameters& p) {
    return collect_running<const Parameters, ConstTensorRef>(p);
}

Parameters init_parameters(const NetworkConfig& config, std::uint64_t seed) {
    validate(config);
    Rng rng(derive_seed(seed, "model/init"));
    Parameters p;
    p.stem = make_conv(config.input_channels, config.stem_width, 3, 1);
    he_normal(p.stem.weight, config.input_channels * 9, rng);
    for (const auto& s : unit_shapes(config)) {
        UnitParams u;
        u.bn1 = make_bn(s.in_channels);
        u.conv1 = make_conv(s.in_channels, s.out_channels, 3, s.stride);
        he_normal(u.conv1.weight, s.in_channels * 9, rng);
        u.bn2 = make_bn(s.out_channels);
        u.conv2 = make_conv(s.out_channels, s.out_channels, 3, 1);
        he_normal(u.conv2.weight, s.out_channels * 9, rng);
        if (s.projection) {
            u.projection = make_conv(s.in_channels, s.out_channels, 1, s.stride);
            he_normal(u.projection->weight, s.in_channels, rng);
        }
        p.units.push_back(std::move(u));
    }
    const int last = config.stages.back().width;
    p.final_bn = make_bn(last);
    p.fc = {last, config.num_classes, std::vector<double>(static_cast<std::size_t>(last) * config.num_classes),
            std::vector<double>(config.num_classes, 0.0)};
    he_normal(p.fc.weight, last, rng);
    return p;
}

Parameters zeros_like(const Parameters& params) {
    Parameters z = params;
    for (auto& t : trainable_tensors(z)) std::fill(t.data->begin(), t.data->end(), 0.0);
    for (auto& t : running_tensors(z)) std::fill(t.data->begin(), t.data->end(), 0.0);
    return z;
}

void check_shapes(const NetworkConfig& config, const Parameters& params) {
    validate(config);
    const Parameters expected = zeros_like(init_parameters(config, 0));
    const auto shapes = unit_shapes(config);
    if (params.units.size() != shapes.size()) fail(ErrorKind::ShapeMismatch, "unit count differs from config");
    for (std::size_t i = 0; i < shapes.size(); ++i)
        if (params.units[i].projection.has_value() != shapes[i].projection)
            fail(ErrorKind::ShapeMismatch, "unit " + std::to_string(i) + " projection presence differs from config");
    auto a = trainable_tensors(params);
    auto b = trainable_tensors(expected);
    auto ra = running_tensors(params);
    auto rb = running_tensors(expected);
    a.insert(a.end(), ra.begin(), ra.end());
    b.insert(b.end(), rb.begin(), rb.end());
    if (a.size() != b.size()) fail(ErrorKind::ShapeMismatch, "tensor count differs from config");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].data->size() != b[i].data->size()) fail(ErrorKind::ShapeMismatch, a[i].name + " has the wrong size");
    for (const auto& bn : ra)
        if (bn.name.ends_with("running_var"))
            for (double v : *bn.data)
                if (v < 0.0) fail(ErrorKind::ShapeMismatch, bn.name + " is negative");
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

ImageTensor assemble_case_tensor(const casegen::Case& c, const ImageStore& store) {
    if (c.images.empty()) fail(ErrorKind::ShapeMismatch, "case has no images");
    const ImageTensor& first = store.get(c.images.front());
    const int m = static_cast<int>(c.images.size());
    ImageTensor out{first.height, first.width, 3 * m, {}};
    out.values.resize(static_cast<std::size_t>(out.height) * out.width * out.channels);
    for (int i = 0; i < m; ++i) {
        const ImageTensor& img = store.get(c.images[i]);
        if (img.height != first.height || img.width != first.width || img.channels != 3)
            fail(ErrorKind::ShapeMismatch, "image " + c.images[i] + " does not match " + c.images.front());
        const std::size_t pixels = static_cast<std::size_t>(img.height) * img.width;
        for (std::size_t px = 0; px < pixels; ++px)
            for (int ch = 0; ch < 3; ++ch) out.values[px * out.channels + 3 * i + ch] = img.values[px * 3 + ch];
    }
    return out;
}

Activation make_batch(const std::vector<const ImageTensor*>& tensors) {
    if (tensors.empty()) fail(ErrorKind::EmptyInput, "empty batch");
    const ImageTensor& f = *tensors.front();
    Activation a(f.channels, static_cast<int>(tensors.size()), f.height, f.width);
    const std::size_t hw = static_cast<std::size_t>(f.height) * f.width;
    for (std::size_t n = 0; n < tensors.size(); ++n) {
        const ImageTensor& t = *tensors[n];
        if (t.height != f.height || t.width != f.width || t.channels != f.channels)
            fail(ErrorKind::ShapeMismatch, "batch tensors differ in shape");
        for (int c = 0; c < f.channels; ++c) {
            double* dst = a.channel(c) + n * hw;
            for (std::size_t px = 0; px < hw; ++px) dst[px] = t.values[px * f.channels + c];
        }
    }
    return a;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kColumnBudget = std::size_t{1} << 22;  // doubles per im2col chunk

int samples_per_chunk(const ConvParams& p, int out_hw) {
    const std::size_t rows = static_cast<std::size_t>(p.in_channels) * p.kernel * p.kernel;
    const std::size_t per_sample = rows * static_cast<std::size_t>(out_hw);
    return static_cast<int>(std::max<std::size_t>(1, kColumnBudget / std::max<std::size_t>(1, per_sample)));
}

// col[(ci*k + ky)*k + kx][(n - n0)*Ho*Wo + oy*Wo + ox]
void im2col(const ConvParams& p, const Activation& x, int n0, int n1, int ho, int wo, std::vector<double>& col) {
    const int k = p.kernel;
    const int pad = k / 2;
    const std::size_t cols = static_cast<std::size_t>(n1 - n0) * ho * wo;
    col.assign(static_cast<std::size_t>(p.in_channels) * k * k * cols, 0.0);
    const std::size_t hw = static_cast<std::size_t>(x.height) * x.width;
    for (int ci = 0; ci < p.in_channels; ++ci) {
        const double* src = x.channel(ci);
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * cols;
                for (int n = n0; n < n1; ++n) {
                    const double* img = src + n * hw;
                    double* dst = row + static_cast<std::size_t>(n - n0) * ho * wo;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * p.stride + ky - pad;
                        if (iy < 0 || iy >= x.height) continue;
                        const double* line = img + static_cast<std::size_t>(iy) * x.width;
                        double* out = dst + static_cast<std::size_t>(oy) * wo;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * p.stride + kx - pad;
                            if (ix >= 0 && ix < x.width) out[ox] = line[ix];
                        }
                    }
                }
            }
        }
    }
}

void col2im_add(const ConvParams& p, const std::vector<double>& col, int n0, int n1, int ho, int wo, Activation& dx) {
    const int k = p.kernel;
    const int pad = k / 2;
    const std::size_t cols = static_cast<std::size_t>(n1 - n0) * ho * wo;
    const std::size_t hw = static_cast<std::size_t>(dx.height) * dx.width;
    for (int ci = 0; ci < p.in_channels; ++ci) {
        double* dst_channel = dx.channel(ci);
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * cols;
                for (int n = n0; n < n1; ++n) {
                    double* img = dst_channel + n * hw;
                    const double* src = row + static_cast<std::size_t>(n - n0) * ho * wo;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * p.stride + ky - pad;
                        if (iy < 0 || iy >= dx.height) continue;
                        double* line = img + static_cast<std::size_t>(iy) * dx.width;
                        const double* in = src + static_cast<std::size_t>(oy) * wo;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * p.stride + kx - pad;
                            if (ix >= 0 && ix < dx.width) line[ix] += in[ox];
                        }
                    }
                }
            }
        }
    }
}

Activation conv_forward(const ConvParams& p, const Activation& x) {
    if (x.channels != p.in_channels) fail(ErrorKind::ShapeMismatch, "convolution input channel mismatch");
    const int ho = output_extent(x.height, p.kernel, p.stride);
    const int wo = output_extent(x.width, p.kernel, p.stride);
    Activation y(p.out_channels, x.batch, ho, wo);
    const int kdim = p.in_channels * p.kernel * p.kernel;
    const std::size_t hw = static_cast<std::size_t>(ho) * wo;
    const auto stride = static_cast<Eigen::Index>(y.plane());
    ConstMatrixMap w(p.weight.data(), p.out_channels, kdim, Eigen::OuterStride<>(kdim));
    std::vector<double> col;
    const int chunk = samples_per_chunk(p, static_cast<int>(hw));
    for (int n0 = 0; n0 < x.batch; n0 += chunk) {
        const int n1 = std::min(x.batch, n0 + chunk);
        const auto cols = static_cast<Eigen::Index>((n1 - n0) * hw);
        im2col(p, x, n0, n1, ho, wo, col);
        ConstMatrixMap c(col.data(), kdim, cols, Eigen::OuterStride<>(cols));
        MatrixMap out(y.values.data() + n0 * hw, p.out_channels, cols, Eigen::OuterStride<>(stride));
        out.noalias() = w * c;
    }
    for (int co = 0; co < p.out_channels; ++co) {
        double* row = y.channel(co);
        const double b = p.bias[co];
        for (std::size_t i = 0; i < y.plane(); ++i) row[i] += b;
    }
    return y;
}

// Accumulates weight/bias gradients into `grad`; writes the input gradient into `dx` when given.
void conv_backward(const ConvParams& p, const Activation& x, const Activation& dy, ConvParams& grad, Activation* dx) {
    const int ho = dy.height;
    const int wo = dy.width;
    const int kdim = p.in_channels * p.kernel * p.kernel;
    const std::size_t hw = static_cast<std::size_t>(ho) * wo;
    const auto stride = static_cast<Eigen::Index>(dy.plane());
    ConstMatrixMap w(p.weight.data(), p.out_channels, kdim, Eigen::OuterStride<>(kdim));
    MatrixMap dw(grad.weight.data(), p.out_channels, kdim, Eigen::OuterStride<>(kdim));
    if (dx) *dx = Activation(x.channels, x.batch, x.height, x.width);

    std::vector<double> col;
    std::vector<double> dcol;
    const int chunk = samples_per_chunk(p, static_cast<int>(hw));
    for (int n0 = 0; n0 < x.batch; n0 += chunk) {
        const int n1 = std::min(x.batch, n0 + chunk);
        const auto cols = static_cast<Eigen::Index>((n1 - n0) * hw);
        im2col(p, x, n0, n1, ho, wo, col);
        ConstMatrixMap c(col.data(), kdim, cols, Eigen::OuterStride<>(cols));
        ConstMatrixMap g(dy.values.data() + n0 * hw, p.out_channels, cols, Eigen::OuterStride<>(stride));
        dw.noalias() += g * c.transpose();
        if (dx) {
            dcol.resize(static_cast<std::size_t>(kdim) * cols);
            MatrixMap dc(dcol.data(), kdim, cols, Eigen::OuterStride<>(cols));
            dc.noalias() = w.transpose() * g;
            col2im_add(p, dcol, n0, n1, ho, wo, *dx);
        }
    }
    for (int co = 0; co < p.out_channels; ++co) {
        const double* row = dy.channel(co);
        grad.bias[co] += std::accumulate(row, row + dy.plane(), 0.0);
    }
}

struct BatchNormCache {
    Activation xhat;
    std::vector<double> inv_std;
    std::vector<double> batch_mean;
    std::vector<double> batch_var;
};

// Normalization followed by ReLU. Train mode uses (biased) batch statistics.
Activation bn_relu_forward(const BatchNormParams& p, const Activation& x, Mode mode, double eps, BatchNormCache* cache) {
    Activation y(x.channels, x.batch, x.height, x.width);
    const std::size_t m = x.plane();
    if (cache) {
        cache->xhat = Activation(x.channels, x.batch, x.height, x.width);
        cache->inv_std.assign(x.channels, 0.0);
        cache->batch_mean.assign(x.channels, 0.0);
        cache->batch_var.assign(x.channels, 0.0);
    }
    for (int c = 0; c < x.channels; ++c) {
        const double* in = x.channel(c);
        double mean;
        double var;
        if (mode == Mode::Train) {
            mean = std::accumulate(in, in + m, 0.0) / static_cast<double>(m);
            var = 0.0;
            for (std::size_t i = 0; i < m; ++i) var += (in[i] - mean) * (in[i] - mean);
            var /= static_cast<double>(m);
        } else {
            mean = p.running_mean[c];
            var = p.running_var[c];
        }
        const double inv_std = 1.0 / std::sqrt(var + eps);
        double* out = y.channel(c);
        double* xh = cache ? cache->xhat.channel(c) : nullptr;
        for (std::size_t i = 0; i < m; ++i) {
            const double h = (in[i] - mean) * inv_std;
            if (xh) xh[i] = h;
            out[i] = std::max(p.gamma[c] * h + p.beta[c], 0.0);  // NaN passes through
        }
        if (cache) {
            cache->inv_std[c] = inv_std;
            cache->batch_mean[c] = mean;
            cache->batch_var[c] = var;
        }
    }
    return y;
}

// `dy` is the gradient w.r.t. the ReLU output `y`; returns the gradient w.r.t. the BN input.
Activation bn_relu_backward(const BatchNormParams& p, const BatchNormCache& cache, const Activation& y,
                            const Activation& dy, BatchNormParams& grad) {
    Activation dx(dy.channels, dy.batch, dy.height, dy.width);
    const std::size_t m = dy.plane();
    const double inv_m = 1.0 / static_cast<double>(m);
    std::vector<double> dz(m);
    for (int c = 0; c < dy.channels; ++c) {
        const double* g = dy.channel(c);
        const double* out = y.channel(c);
        const double* xh = cache.xhat.channel(c);
        double sum_dz = 0.0;
        double sum_dz_xhat = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            dz[i] = out[i] > 0.0 ? g[i] : 0.0;
            sum_dz += dz[i];
            sum_dz_xhat += dz[i] * xh[i];
        }
        grad.gamma[c] += sum_dz_xhat;
        grad.beta[c] += sum_dz;
        const double scale = p.gamma[c] * cache.inv_std[c] * inv_m;
        double* d = dx.channel(c);
        for (std::size_t i = 0; i < m; ++i)
            d[i] = scale * (static_cast<double>(m) * dz[i] - sum_dz - xh[i] * sum_dz_xhat);
    }
    return dx;
}

void add_inplace(Activation& a, const Activation& b) {
    for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] += b.values[i];
}

}  // namespace

struct UnitCache {
    Activation input;
    BatchNormCache bn1;
    Activation a1;
    BatchNormCache bn2;
    Activation a2;
};

struct ForwardCache {
    Mode mode = Mode::Eval;
    Activation input;
    std::vector<UnitCache> units;
    Activation trunk;  // output of the last unit
    BatchNormCache final_bn;
    Activation final_act;
    std::vector<double> pooled;  // [batch][channels]
};

namespace {

Activation unit_forward(const NetworkConfig& config, const UnitParams& u, const Activation& x, Mode mode,
                        UnitCache* cache) {
    const double eps = config.bn_epsilon;
    Activation a1 = bn_relu_forward(u.bn1, x, mode, eps, cache ? &cache->bn1 : nullptr);
    Activation z1 = conv_forward(u.conv1, a1);
    Activation a2 = bn_relu_forward(u.bn2, z1, mode, eps, cache ? &cache->bn2 : nullptr);
    Activation out = conv_forward(u.conv2, a2);
    if (u.projection) {
        add_inplace(out, conv_forward(*u.projection, x));
    } else {
        if (x.values.size() != out.values.size()) fail(ErrorKind::ShapeMismatch, "identity shortcut shape mismatch");
        add_inplace(out, x);
    }
    if (cache) {
        cache->input = x;
        cache->a1 = std::move(a1);
        cache->a2 = std::move(a2);
    }
    return out;
}

Activation unit_backward(const UnitParams& u, const UnitCache& cache, const Activation& dout, UnitParams& grad) {
    Activation da2;
    conv_backward(u.conv2, cache.a2, dout, grad.conv2, &da2);
    Activation dz1 = bn_relu_backward(u.bn2, cache.bn2, cache.a2, da2, grad.bn2);
    Activation da1;
    conv_backward(u.conv1, cache.a1, dz1, grad.conv1, &da1);
    Activation dx = bn_relu_backward(u.bn1, cache.bn1, cache.a1, da1, grad.bn1);
    if (u.projection) {
        Activation dshort;
        conv_backward(*u.projection, cache.input, dout, *grad.projection, &dshort);
        add_inplace(dx, dshort);
    } else {
        add_inplace(dx, dout);
    }
    return dx;
}

}  // namespace

Activation residual_unit_eval(const NetworkConfig& config, const UnitParams& unit, const Activation& input) {
    return unit_forward(config, unit, input, Mode::Eval, nullptr);
}

ForwardResult forward(const NetworkConfig& config, const Parameters& params, const Activation& batch, Mode mode) {
    if (batch.channels != config.input_channels || batch.height != config.input_height ||
        batch.width != config.input_width)
        fail(ErrorKind::ShapeMismatch, "batch shape " + std::to_string(batch.height) + "x" + std::to_string(batch.width) +
                                           "x" + std::to_string(batch.channels) + " does not match the network input");
    if (batch.batch < 1) fail(ErrorKind::EmptyInput, "empty batch");

    auto cache = std::make_shared<ForwardCache>();
    cache->mode = mode;
    cache->input = batch;
    cache->units.resize(params.units.size());

    Activation h = conv_forward(params.stem, batch);
    for (std::size_t i = 0; i < params.units.size(); ++i)
        h = unit_forward(config, params.units[i], h, mode, &cache->units[i]);
    cache->final_act = bn_relu_forward(params.final_bn, h, mode, config.bn_epsilon, &cache->final_bn);
    cache->trunk = std::move(h);

    const Activation& f = cache->final_act;
    const int n = f.batch;
    const int channels = f.channels;
    const std::size_t hw = static_cast<std::size_t>(f.height) * f.width;
    cache->pooled.assign(static_cast<std::size_t>(n) * channels, 0.0);
    for (int c = 0; c < channels; ++c)
        for (int i = 0; i < n; ++i) {
            const double* src = f.channel(c) + i * hw;
            cache->pooled[static_cast<std::size_t>(i) * channels + c] =
                std::accumulate(src, src + hw, 0.0) / static_cast<double>(hw);
        }

    Logits logits{n, params.fc.out_features, {}};
    logits.values.resize(static_cast<std::size_t>(n) * logits.classes);
    ConstMatrixMap pooled(cache->pooled.data(), n, channels, Eigen::OuterStride<>(channels));
    ConstMatrixMap w(params.fc.weight.data(), logits.classes, channels, Eigen::OuterStride<>(channels));
    MatrixMap out(logits.values.data(), n, logits.classes, Eigen::OuterStride<>(logits.classes));
    out.noalias() = pooled * w.transpose();
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < logits.classes; ++k) {
            double& v = logits.values[static_cast<std::size_t>(i) * logits.classes + k];
            v += params.fc.bias[k];
            if (!std::isfinite(v)) fail(ErrorKind::NonFiniteActivation, "non-finite logit for sample " + std::to_string(i));
        }
    return {std::move(logits), std::move(cache)};
}

void update_running_stats(const NetworkConfig& config, Parameters& params, const ForwardCache& cache) {
    if (cache.mode != Mode::Train) return;
    const double mu = config.bn_momentum;
    auto update = [mu](BatchNormParams& bn, const BatchNormCache& c) {
        for (std::size_t i = 0; i < bn.running_mean.size(); ++i) {
            bn.running_mean[i] = mu * bn.running_mean[i] + (1.0 - mu) * c.batch_mean[i];
            bn.running_var[i] = mu * bn.running_var[i] + (1.0 - mu) * c.batch_var[i];
        }
    };
    for (std::size_t i = 0; i < params.units.size(); ++i) {
        update(params.units[i].bn1, cache.units[i].bn1);
        update(params.units[i].bn2, cache.units[i].bn2);
    }
    update(params.final_bn, cache.final_bn);
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.begin(), logits.end());
    if (p.empty()) return p;
    const double top = *std::max_element(p.begin(), p.end());
    double sum = 0.0;
    for (double& v : p) {
        v = std::exp(v - top);
        sum += v;
    }
    for (double& v : p) v /= sum;
    return p;
}

namespace {

double log_sum_exp(std::span<const double> row) {
    const double top = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - top);
    return top + std::log(sum);
}

void check_labels(const Logits& logits, std::span<const int> labels) {
    if (labels.size() != static_cast<std::size_t>(logits.batch))
        fail(ErrorKind::ShapeMismatch, "label count differs from batch size");
    for (int y : labels)
        if (y < 0 || y >= logits.classes) fail(ErrorKind::InvalidArgument, "label index out of range");
}

}  // namespace

double cross_entropy(const Logits& logits, std::span<const int> labels) {
    check_labels(logits, labels);
    double total = 0.0;
    for (int i = 0; i < logits.batch; ++i) {
        std::span<const double> row(logits.values.data() + static_cast<std::size_t>(i) * logits.classes,
                                    static_cast<std::size_t>(logits.classes));
        total += log_sum_exp(row) - row[labels[i]];
    }
    return total / logits.batch;
}

double loss(const NetworkConfig& config, const Parameters& params, const Activation& batch,
            std::span<const int> labels) {
    return cross_entropy(forward(config, params, batch, Mode::Train).logits, labels);
}

LossAndGrad loss_and_grad(const NetworkConfig& config, const Parameters& params, const Activation& batch,
                          std::span<const int> labels) {
    LossAndGrad result{0.0, zeros_like(params), forward(config, params, batch, Mode::Train)};
    const Logits& logits = result.forward.logits;
    result.loss = cross_entropy(logits, labels);
    const ForwardCache& cache = *result.forward.cache;
    Parameters& g = result.grads;

    const int n = logits.batch;
    const int classes = logits.classes;
    std::vector<double> dlogits(static_cast<std::size_t>(n) * classes);
    for (int i = 0; i < n; ++i) {
        const auto p = softmax(std::span<const double>(logits.values.data() + static_cast<std::size_t>(i) * classes,
                                                       static_cast<std::size_t>(classes)));
        for (int k = 0; k < classes; ++k)
            dlogits[static_cast<std::size_t>(i) * classes + k] = (p[k] - (k == labels[i] ? 1.0 : 0.0)) / n;
    }

    const int channels = params.fc.in_features;
    ConstMatrixMap dl(dlogits.data(), n, classes, Eigen::OuterStride<>(classes));
    ConstMatrixMap pooled(cache.pooled.data(), n, channels, Eigen::OuterStride<>(channels));
    ConstMatrixMap w(params.fc.weight.data(), classes, channels, Eigen::OuterStride<>(channels));
    MatrixMap dw(g.fc.weight.data(), classes, channels, Eigen::OuterStride<>(channels));
    dw.noalias() = dl.transpose() * pooled;
    for (int k = 0; k < classes; ++k)
        for (int i = 0; i < n; ++i) g.fc.bias[k] += dlogits[static_cast<std::size_t>(i) * classes + k];
    RowMatrix dpooled = dl * w;

    const Activation& f = cache.final_act;
    Activation df(f.channels, f.batch, f.height, f.width);
    const std::size_t hw = static_cast<std::size_t>(f.height) * f.width;
    for (int c = 0; c < f.channels; ++c)
        for (int i = 0; i < n; ++i) {
            const double v = dpooled(i, c) / static_cast<double>(hw);
            std::fill_n(df.channel(c) + i * hw, hw, v);
        }
    Activation dh = bn_relu_backward(params.final_bn, cache.final_bn, f, df, g.final_bn);
    for (std::size_t i = params.units.size(); i-- > 0;)
        dh = unit_backward(params.units[i], cache.units[i], dh, g.units[i]);
    conv_backward(params.stem, cache.input, dh, g.stem, nullptr);
    return result;
}

Prediction predict_from_logits(std::span<const double> logits) {
    Prediction p;
    p.probabilities = softmax(logits);
    p.label = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    return p;
}

std::vector<Prediction> predict_batch(const NetworkConfig& config, const Parameters& params, const Activation& batch) {
    const Logits logits = forward(config, params, batch, Mode::Eval).logits;
    std::vector<Prediction> out;
    out.reserve(logits.batch);
    for (int i = 0; i < logits.batch; ++i)
        out.push_back(predict_from_logits(std::span<const double>(
            logits.values.data() + static_cast<std::size_t>(i) * logits.classes, static_cast<std::size_t>(logits.classes))));
    return out;
}

Prediction predict(const NetworkConfig& config, const Parameters& params, const ImageTensor& case_tensor) {
    return predict_batch(config, params, make_batch({&case_tensor})).front();
}

}  // namespace histocase::model
