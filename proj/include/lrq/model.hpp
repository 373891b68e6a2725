#pragma once

#include <memory>
#include <optional>
#include <string>

#include "lrq/ops.hpp"
#include "lrq/quantize.hpp"
#include "lrq/tensor.hpp"

namespace lrq {

// ---------------------------------------------------------------------------
// layer / graph structure

enum class LayerKind {
    Conv,
    BatchNorm,
    Act,
    Linear,
    GlobalAvgPool,
    Flatten,
    ResidualAdd,
    Upsample,
    Reshape,
    LabelConcat,
    LongRangeAttention,
    ActQuant,
};

enum class ActKind { ReLU, LeakyReLU, Tanh };

/// One node of a sequential-with-skips graph. `input` (and `input2` for
/// ResidualAdd) name the producing layer: -2 = previous layer, -1 = network
/// input, >= 0 = explicit layer index.
template <typename T>
struct LayerT {
    LayerKind kind = LayerKind::Act;
    std::string name;
    int input = -2;
    int input2 = -2;

    // conv / linear / label-embedding parameters
    TensorT<T> weight, bias;
    Conv2dOpts conv;

    // batch norm
    TensorT<T> gamma, beta;
    std::vector<T> running_mean, running_var;
    double bn_eps = 1e-5;
    double bn_momentum = 0.9;  // fraction of the old running value kept
    bool bn_always_batch_stats = false;  // generator BNs never use running stats

    // activation
    ActKind act = ActKind::ReLU;
    T leaky_slope = T(0.2);

    // upsample / reshape
    int factor = 2;
    Shape target_shape;  // per-sample shape for Reshape

    // long-range attention (three-stage decomposition)
    TensorT<T> lra_local_w, lra_local_b;      // (2d-1)^2 depthwise
    TensorT<T> lra_long_w, lra_long_b;        // ceil(K/d)^2 depthwise, dilated
    TensorT<T> lra_channel_w, lra_channel_b;  // 1x1 dense channel mix
    int lra_kernel = 21;
    int lra_dilation = 3;
    bool lra_sigmoid_gate = false;

    // quantization state
    bool fq_weight = false;
    int weight_bits = 8;
    std::shared_ptr<RangeTracker<T>> tracker;  // ActQuant only
    int act_bits = 8;
};

using Layer = LayerT<float>;

template <typename T>
struct BNStatsT {
    std::vector<T> mean;
    std::vector<T> sigma;  // sqrt(var + eps)
};

template <typename T>
struct ModelGraphT {
    std::string arch;
    int num_classes = 0;
    Shape input_shape;  // per-sample
    std::vector<LayerT<T>> layers;

    // frozen statistics from pretraining, one entry per BatchNorm layer in
    // layer order; immutable once frozen
    std::vector<BNStatsT<T>> bn_store;
    bool bn_store_frozen = false;
    bool bn_running_trained = false;  // set once a forward updates running stats

    // quantization wrapper state
    bool quantized = false;
    int weight_bits = 0;
    int act_bits = 0;
    bool per_channel_weights = false;
    bool scale_only_dequant = false;

    void set_bn_store(std::vector<BNStatsT<T>> store) {
        if (bn_store_frozen)
            throw ConfigError("bn statistics are frozen; mutation rejected");
        bn_store = std::move(store);
    }

    /// All trainable parameter tensors, in deterministic layer order.
    std::vector<TensorT<T>> params() {
        std::vector<TensorT<T>> out;
        for (auto& l : layers)
            for (auto* t : {&l.weight, &l.bias, &l.gamma, &l.beta, &l.lra_local_w,
                            &l.lra_local_b, &l.lra_long_w, &l.lra_long_b, &l.lra_channel_w,
                            &l.lra_channel_b})
                if (t->defined()) out.push_back(*t);
        return out;
    }

    std::vector<std::pair<std::string, TensorT<T>>> named_params() {
        static const char* suffix[] = {"weight",    "bias",      "gamma",     "beta",
                                       "lra_local_w", "lra_local_b", "lra_long_w", "lra_long_b",
                                       "lra_channel_w", "lra_channel_b"};
        std::vector<std::pair<std::string, TensorT<T>>> out;
        for (auto& l : layers) {
            TensorT<T>* fields[] = {&l.weight,      &l.bias,       &l.gamma,       &l.beta,
                                    &l.lra_local_w, &l.lra_local_b, &l.lra_long_w,  &l.lra_long_b,
                                    &l.lra_channel_w, &l.lra_channel_b};
            for (int i = 0; i < 10; ++i)
                if (fields[i]->defined()) out.emplace_back(l.name + "." + suffix[i], *fields[i]);
        }
        return out;
    }

    int64_t param_count() {
        int64_t n = 0;
        for (auto& t : params()) n += t.numel();
        return n;
    }
};

using ModelGraph = ModelGraphT<float>;

// ---------------------------------------------------------------------------
// long-range attention block
//
// A large K x K spatial kernel is approximated by three stacked convolutions:
// a (2d-1)^2 depthwise conv, a ceil(K/d)^2 depthwise conv with dilation d,
// and a dense 1x1 channel conv. Their composition has receptive field
// (2d-1) + (ceil(K/d)-1)*d >= K at a fraction of the parameters. The stack's
// output gates the input elementwise.

struct LRAShape {
    int local_k;
    int long_k;
    int dilation;

    int receptive_field() const { return local_k + (long_k - 1) * dilation; }
};

inline LRAShape lra_shape(int kernel, int dilation) {
    if (kernel < 1 || dilation < 1)
        throw ConfigError("attention kernel and dilation must be positive");
    return {2 * dilation - 1, (kernel + dilation - 1) / dilation, dilation};
}

/// Parameter count of the decomposition vs. a dense K x K conv at C channels.
inline int64_t lra_param_count(int channels, int kernel, int dilation) {
    const auto s = lra_shape(kernel, dilation);
    const int64_t c = channels;
    return c * s.local_k * s.local_k + c * s.long_k * s.long_k + c * c + 3 * c;
}

namespace detail {

/// Extent-preserving conv for odd or even kernels: even effective extents pad
/// one extra cell on the bottom/right.
template <typename T>
TensorT<T> conv_same(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int dilation,
                     int groups) {
    const int kh = static_cast<int>(w.dim(2)), kw = static_cast<int>(w.dim(3));
    const int th = dilation * (kh - 1), tw = dilation * (kw - 1);
    Conv2dOpts opts;
    opts.dilation = dilation;
    opts.groups = groups;
    if (th % 2 == 0 && tw % 2 == 0) {
        opts.padding = th / 2;
        if (tw / 2 != th / 2) {
            auto padded = pad2d(x, th / 2, th / 2, tw / 2, tw / 2);
            opts.padding = 0;
            return conv2d(padded, w, b, opts);
        }
        return conv2d(x, w, b, opts);
    }
    auto padded = pad2d(x, th / 2, th - th / 2, tw / 2, tw - tw / 2);
    opts.padding = 0;
    return conv2d(padded, w, b, opts);
}

}  // namespace detail

template <typename T>
TensorT<T> lra_forward(const TensorT<T>& v, const LayerT<T>& l) {
    const int c = static_cast<int>(v.dim(1));
    auto la = detail::conv_same(v, l.lra_local_w, l.lra_local_b, 1, c);
    la = detail::conv_same(la, l.lra_long_w, l.lra_long_b, l.lra_dilation, c);
    Conv2dOpts pointwise;
    la = conv2d(la, l.lra_channel_w, l.lra_channel_b, pointwise);
    if (l.lra_sigmoid_gate) la = sigmoid(la);
    return mul(la, v);
}

// ---------------------------------------------------------------------------
// forward execution

template <typename T>
struct ForwardCaptureT {
    std::vector<TensorT<T>> bn_mean;   // per BN layer, [C], differentiable
    std::vector<TensorT<T>> bn_sigma;  // sqrt(var + eps), differentiable
    TensorT<T> features;               // penultimate (post-pool) vector [B, D]
    TensorT<T> logits;
};

using ForwardCapture = ForwardCaptureT<float>;

struct ForwardOptions {
    BNMode mode = BNMode::Eval;
    bool capture = false;
    bool update_running = false;  // pretraining / fine-tuning BN refresh
};

template <typename T>
struct ForwardResultT {
    TensorT<T> output;    // final layer output (logits for classifiers)
    TensorT<T> features;  // post-pool vector when the graph has a pool layer
    std::optional<ForwardCaptureT<T>> capture;
};

template <typename T>
ForwardResultT<T> forward(ModelGraphT<T>& model, const TensorT<T>& batch,
                          const ForwardOptions& opts, const std::vector<int>& labels = {}) {
    if (opts.capture && opts.mode == BNMode::Eval)
        throw ConfigError("batch-statistics capture requires train-mode normalization");
    if (opts.update_running && opts.mode == BNMode::Eval)
        throw ConfigError("running-statistics update requires train mode");
    if (batch.ndim() != static_cast<int>(model.input_shape.size()) + 1)
        throw ShapeError("input rank mismatch: got " + shape_str(batch.shape()));
    for (size_t i = 0; i < model.input_shape.size(); ++i)
        if (batch.dim(static_cast<int>(i) + 1) != model.input_shape[i])
            throw ShapeError("input shape " + shape_str(batch.shape()) +
                             " does not match model input " + shape_str(model.input_shape));

    ForwardResultT<T> result;
    if (opts.capture) result.capture.emplace();

    std::vector<TensorT<T>> outs(model.layers.size());
    auto resolve = [&](int ref, int here) -> const TensorT<T>& {
        if (ref == -1) return batch;
        const int idx = (ref == -2) ? here - 1 : ref;
        if (idx < 0 || idx >= here || !outs[idx].defined())
            throw ConfigError("layer '" + model.layers[here].name + "' references invalid input");
        return outs[idx];
    };

    for (size_t i = 0; i < model.layers.size(); ++i) {
        auto& l = model.layers[i];
        const auto& x = resolve(l.input, static_cast<int>(i));
        switch (l.kind) {
            case LayerKind::Conv: {
                auto w = l.weight;
                if (l.fq_weight) {
                    if (model.per_channel_weights)
                        w = fake_quantize_per_channel(
                            w, weight_quant_params_per_channel(w, l.weight_bits,
                                                               model.scale_only_dequant));
                    else
                        w = fake_quantize(
                            w, weight_quant_params(w, l.weight_bits, model.scale_only_dequant));
                }
                outs[i] = conv2d(x, w, l.bias, l.conv);
                break;
            }
            case LayerKind::Linear: {
                auto w = l.weight;
                if (l.fq_weight) {
                    if (model.per_channel_weights)
                        w = fake_quantize_per_channel(
                            w, weight_quant_params_per_channel(w, l.weight_bits,
                                                               model.scale_only_dequant));
                    else
                        w = fake_quantize(
                            w, weight_quant_params(w, l.weight_bits, model.scale_only_dequant));
                }
                outs[i] = linear(x, w, l.bias);
                break;
            }
            case LayerKind::BatchNorm: {
                const BNMode mode = l.bn_always_batch_stats ? BNMode::Train : opts.mode;
                const bool update = opts.update_running && !l.bn_always_batch_stats;
                auto r = batch_norm(x, l.gamma, l.beta, l.running_mean, l.running_var, mode,
                                    l.bn_momentum, l.bn_eps, update);
                outs[i] = r.out;
                if (result.capture && !l.bn_always_batch_stats) {
                    result.capture->bn_mean.push_back(r.batch_mean);
                    result.capture->bn_sigma.push_back(
                        sqrt_op(add_scalar(r.batch_var, static_cast<T>(l.bn_eps))));
                }
                break;
            }
            case LayerKind::Act:
                switch (l.act) {
                    case ActKind::ReLU: outs[i] = relu(x); break;
                    case ActKind::LeakyReLU: outs[i] = leaky_relu(x, l.leaky_slope); break;
                    case ActKind::Tanh: outs[i] = tanh_op(x); break;
                }
                break;
            case LayerKind::GlobalAvgPool:
                outs[i] = global_avg_pool(x);
                result.features = outs[i];
                break;
            case LayerKind::Flatten:
                outs[i] = reshape(x, {x.dim(0), x.numel() / x.dim(0)});
                break;
            case LayerKind::ResidualAdd:
                outs[i] = add(x, resolve(l.input2, static_cast<int>(i)));
                break;
            case LayerKind::Upsample:
                outs[i] = upsample_nearest(x, l.factor);
                break;
            case LayerKind::Reshape: {
                Shape full = {x.dim(0)};
                full.insert(full.end(), l.target_shape.begin(), l.target_shape.end());
                outs[i] = reshape(x, full);
                break;
            }
            case LayerKind::LabelConcat: {
                if (labels.empty())
                    throw ConfigError("label-conditioned layer '" + l.name +
                                      "' requires labels");
                if (static_cast<int64_t>(labels.size()) != x.dim(0))
                    throw ShapeError("label count does not match batch size");
                outs[i] = concat_cols(x, gather_rows(l.weight, labels));
                break;
            }
            case LayerKind::LongRangeAttention:
                outs[i] = lra_forward(x, l);
                break;
            case LayerKind::ActQuant: {
                auto& tracker = *l.tracker;
                if (opts.mode == BNMode::Train) tracker.observe(x.values());
                if (!tracker.calibrated())
                    throw ConfigError("activation quantizer '" + l.name +
                                      "' used before range calibration");
                outs[i] = fake_quantize(x, tracker.params(l.act_bits,
                                                          model.scale_only_dequant));
                break;
            }
        }
    }

    result.output = outs.back();
    if (result.capture) {
        result.capture->features = result.features;
        result.capture->logits = result.output;
    }
    return result;
}

// ---------------------------------------------------------------------------
// builders

namespace detail {

template <typename T>
TensorT<T> he_init(const Shape& shape, int64_t fan_in, RandomEngine& rng) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    auto t = TensorT<T>::randn(shape, rng, std_dev);
    t.set_requires_grad(true);
    return t;
}

template <typename T>
TensorT<T> const_init(const Shape& shape, T value) {
    auto t = TensorT<T>::full(shape, value);
    t.set_requires_grad(true);
    return t;
}

template <typename T>
LayerT<T> make_conv(const std::string& name, int cin, int cout, int k, int stride, int pad,
                    RandomEngine& rng, bool with_bias = false) {
    LayerT<T> l;
    l.kind = LayerKind::Conv;
    l.name = name;
    l.weight = he_init<T>({cout, cin, k, k}, static_cast<int64_t>(cin) * k * k, rng);
    if (with_bias) l.bias = const_init<T>({cout}, T(0));
    l.conv.stride = stride;
    l.conv.padding = pad;
    return l;
}

template <typename T>
LayerT<T> make_bn(const std::string& name, int channels, bool always_batch_stats = false) {
    LayerT<T> l;
    l.kind = LayerKind::BatchNorm;
    l.name = name;
    l.gamma = const_init<T>({channels}, T(1));
    l.beta = const_init<T>({channels}, T(0));
    l.running_mean.assign(channels, T(0));
    l.running_var.assign(channels, T(1));
    l.bn_always_batch_stats = always_batch_stats;
    return l;
}

template <typename T>
LayerT<T> make_act(const std::string& name, ActKind kind, T slope = T(0.2)) {
    LayerT<T> l;
    l.kind = LayerKind::Act;
    l.name = name;
    l.act = kind;
    l.leaky_slope = slope;
    return l;
}

}  // namespace detail

/// Attention block parameters for `channels` feature maps. The channel-conv
/// bias starts at 1 so the gate opens as identity-plus-noise.
template <typename T>
LayerT<T> make_lra_layer(const std::string& name, int channels, int kernel, int dilation,
                         bool sigmoid_gate, RandomEngine& rng) {
    const auto s = lra_shape(kernel, dilation);
    LayerT<T> l;
    l.kind = LayerKind::LongRangeAttention;
    l.name = name;
    l.lra_kernel = kernel;
    l.lra_dilation = dilation;
    l.lra_sigmoid_gate = sigmoid_gate;
    l.lra_local_w = detail::he_init<T>({channels, 1, s.local_k, s.local_k},
                                       static_cast<int64_t>(s.local_k) * s.local_k, rng);
    l.lra_local_b = detail::const_init<T>({channels}, T(0));
    l.lra_long_w = detail::he_init<T>({channels, 1, s.long_k, s.long_k},
                                      static_cast<int64_t>(s.long_k) * s.long_k, rng);
    l.lra_long_b = detail::const_init<T>({channels}, T(0));
    l.lra_channel_w = detail::he_init<T>({channels, channels, 1, 1}, channels, rng);
    l.lra_channel_b = detail::const_init<T>({channels}, T(1));
    return l;
}

enum class ResNetDepth { ResNet8, ResNet20 };

/// CIFAR-style residual stack: conv-bn-relu stem, three stages of basic
/// blocks (1 per stage for depth 8, 3 for depth 20), strided 1x1-conv
/// projection shortcuts, global average pool, linear head. The post-pool
/// vector is the feature tap.
template <typename T>
ModelGraphT<T> build_resnet_tiny(ResNetDepth depth, int num_classes, double width_mult,
                                 uint64_t seed) {
    if (num_classes < 2) throw ConfigError("classifier needs at least 2 classes");
    if (width_mult <= 0) throw ConfigError("width multiplier must be positive");
    const int blocks_per_stage = depth == ResNetDepth::ResNet8 ? 1 : 3;
    auto scaled = [&](int base) {
        return std::max(2, static_cast<int>(std::lround(base * width_mult)));
    };
    const int widths[3] = {scaled(16), scaled(32), scaled(64)};

    RandomEngine rng(seed);
    ModelGraphT<T> m;
    m.arch = depth == ResNetDepth::ResNet8 ? "resnet8" : "resnet20";
    m.num_classes = num_classes;
    m.input_shape = {3, 32, 32};

    auto& L = m.layers;
    L.push_back(detail::make_conv<T>("stem.conv", 3, widths[0], 3, 1, 1, rng));
    L.back().input = -1;  // network input
    L.push_back(detail::make_bn<T>("stem.bn", widths[0]));
    L.push_back(detail::make_act<T>("stem.relu", ActKind::ReLU));

    int cin = widths[0];
    for (int stage = 0; stage < 3; ++stage) {
        const int cout = widths[stage];
        for (int block = 0; block < blocks_per_stage; ++block) {
            const std::string p =
                "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block) + ".";
            const int stride = (stage > 0 && block == 0) ? 2 : 1;
            const int trunk_in = static_cast<int>(L.size()) - 1;

            L.push_back(detail::make_conv<T>(p + "conv1", cin, cout, 3, stride, 1, rng));
            L.push_back(detail::make_bn<T>(p + "bn1", cout));
            L.push_back(detail::make_act<T>(p + "relu1", ActKind::ReLU));
            L.push_back(detail::make_conv<T>(p + "conv2", cout, cout, 3, 1, 1, rng));
            L.push_back(detail::make_bn<T>(p + "bn2", cout));
            const int trunk_out = static_cast<int>(L.size()) - 1;

            int skip_out = trunk_in;
            if (stride != 1 || cin != cout) {
                auto proj = detail::make_conv<T>(p + "proj", cin, cout, 1, stride, 0, rng);
                proj.input = trunk_in;
                L.push_back(std::move(proj));
                auto proj_bn = detail::make_bn<T>(p + "proj_bn", cout);
                proj_bn.input = static_cast<int>(L.size()) - 1;
                L.push_back(std::move(proj_bn));
                skip_out = static_cast<int>(L.size()) - 1;
            }

            LayerT<T> addl;
            addl.kind = LayerKind::ResidualAdd;
            addl.name = p + "add";
            addl.input = trunk_out;
            addl.input2 = skip_out;
            L.push_back(std::move(addl));
            L.push_back(detail::make_act<T>(p + "relu2", ActKind::ReLU));
            cin = cout;
        }
    }

    LayerT<T> pool;
    pool.kind = LayerKind::GlobalAvgPool;
    pool.name = "pool";
    L.push_back(std::move(pool));

    LayerT<T> head;
    head.kind = LayerKind::Linear;
    head.name = "head";
    head.weight = detail::he_init<T>({num_classes, widths[2]}, widths[2], rng);
    head.bias = detail::const_init<T>({num_classes}, T(0));
    L.push_back(std::move(head));
    return m;
}

// ---------------------------------------------------------------------------
// pretraining statistics snapshot

template <typename T>
int bn_layer_count(const ModelGraphT<T>& model) {
    int n = 0;
    for (const auto& l : model.layers)
        if (l.kind == LayerKind::BatchNorm && !l.bn_always_batch_stats) ++n;
    return n;
}

/// Copy running BN statistics into the frozen store used as the generation
/// target. sigma = sqrt(running_var + eps).
template <typename T>
void pretrain_snapshot(ModelGraphT<T>& model) {
    if (!model.bn_running_trained)
        throw ConfigError("statistics snapshot requested before any training forward");
    std::vector<BNStatsT<T>> store;
    for (const auto& l : model.layers) {
        if (l.kind != LayerKind::BatchNorm || l.bn_always_batch_stats) continue;
        BNStatsT<T> s;
        s.mean = l.running_mean;
        s.sigma.resize(l.running_var.size());
        for (size_t i = 0; i < l.running_var.size(); ++i)
            s.sigma[i] = std::sqrt(l.running_var[i] + static_cast<T>(l.bn_eps));
        store.push_back(std::move(s));
    }
    if (model.bn_store_frozen) {
        // idempotent re-snapshot of an unchanged model is fine; a change is not
        if (store.size() != model.bn_store.size())
            throw ConfigError("bn statistics are frozen; mutation rejected");
        for (size_t i = 0; i < store.size(); ++i)
            if (store[i].mean != model.bn_store[i].mean ||
                store[i].sigma != model.bn_store[i].sigma)
                throw ConfigError("bn statistics are frozen; mutation rejected");
        return;
    }
    model.bn_store = std::move(store);
    model.bn_store_frozen = true;
}

// ---------------------------------------------------------------------------
// cloning and quantization wrapping

namespace detail {

template <typename T>
TensorT<T> clone_param(const TensorT<T>& t) {
    if (!t.defined()) return {};
    auto c = TensorT<T>::from_data(t.shape(), t.values());
    c.set_requires_grad(t.requires_grad());
    return c;
}

}  // namespace detail

/// Deep copy: independent parameters and buffers, equal values.
template <typename T>
ModelGraphT<T> clone_model(const ModelGraphT<T>& model) {
    ModelGraphT<T> out = model;  // copies plain fields, buffers, bn_store
    for (auto& l : out.layers) {
        for (auto* t : {&l.weight, &l.bias, &l.gamma, &l.beta, &l.lra_local_w, &l.lra_local_b,
                        &l.lra_long_w, &l.lra_long_b, &l.lra_channel_w, &l.lra_channel_b})
            *t = detail::clone_param(*t);
        if (l.tracker) l.tracker = std::make_shared<RangeTracker<T>>(*l.tracker);
    }
    return out;
}

template <typename T>
ModelGraphT<T> clone_for_quantization(const ModelGraphT<T>& model) {
    return clone_model(model);
}

struct WrapOptions {
    bool per_channel_weights = false;
    bool scale_only_dequant = false;
    float tracker_momentum = 0.9f;
    int tracker_warmup_batches = 20;
};

/// Quantization wrapper: deep-copies the model, fake-quantizes every conv and
/// linear weight (first and last layers included), and inserts an activation
/// quantizer after every activation function.
template <typename T>
ModelGraphT<T> wrap_model(const ModelGraphT<T>& model, int weight_bits, int act_bits,
                          const WrapOptions& wopts = {}) {
    check_bits(weight_bits);
    check_bits(act_bits);
    auto out = clone_model(model);
    out.quantized = true;
    out.weight_bits = weight_bits;
    out.act_bits = act_bits;
    out.per_channel_weights = wopts.per_channel_weights;
    out.scale_only_dequant = wopts.scale_only_dequant;

    for (auto& l : out.layers)
        if (l.kind == LayerKind::Conv || l.kind == LayerKind::Linear) {
            l.fq_weight = true;
            l.weight_bits = weight_bits;
        }

    // insert ActQuant after each Act layer; later explicit indices shift by 1
    for (size_t i = 0; i < out.layers.size(); ++i) {
        if (out.layers[i].kind != LayerKind::Act) continue;
        LayerT<T> q;
        q.kind = LayerKind::ActQuant;
        q.name = out.layers[i].name + ".q";
        q.act_bits = act_bits;
        q.tracker = std::make_shared<RangeTracker<T>>(static_cast<T>(wopts.tracker_momentum),
                                                      wopts.tracker_warmup_batches);
        const int pos = static_cast<int>(i) + 1;
        for (auto& other : out.layers) {
            if (other.input >= pos) ++other.input;
            if (other.kind == LayerKind::ResidualAdd && other.input2 >= pos) ++other.input2;
        }
        out.layers.insert(out.layers.begin() + pos, std::move(q));
        ++i;  // skip the quantizer we just inserted
    }
    return out;
}

/// Strip quantization: removes activation quantizers and weight fake-quant
/// flags, restoring full-precision behavior exactly.
template <typename T>
ModelGraphT<T> unwrap_model(const ModelGraphT<T>& model) {
    auto out = clone_model(model);
    for (int i = static_cast<int>(out.layers.size()) - 1; i >= 0; --i) {
        if (out.layers[i].kind != LayerKind::ActQuant) continue;
        for (auto& other : out.layers) {
            if (other.input == i)
                other.input = (out.layers[i].input == -2) ? i - 1 : out.layers[i].input;
            if (other.input > i) --other.input;
            if (other.kind == LayerKind::ResidualAdd) {
                if (other.input2 == i)
                    other.input2 = (out.layers[i].input == -2) ? i - 1 : out.layers[i].input;
                if (other.input2 > i) --other.input2;
            }
        }
        out.layers.erase(out.layers.begin() + i);
    }
    for (auto& l : out.layers) l.fq_weight = false;
    out.quantized = false;
    out.weight_bits = 0;
    out.act_bits = 0;
    return out;
}

/// Run calibration batches through the wrapped model (no gradients, train-mode
/// trackers) and freeze every activation range afterwards.
template <typename T>
void calibrate_activations(ModelGraphT<T>& model, const std::vector<TensorT<T>>& batches,
                           const std::vector<std::vector<int>>& labels = {}) {
    NoGradGuard guard;
    ForwardOptions opts;
    opts.mode = BNMode::Train;
    for (size_t i = 0; i < batches.size(); ++i)
        forward(model, batches[i], opts, labels.empty() ? std::vector<int>{} : labels[i]);
    for (auto& l : model.layers)
        if (l.kind == LayerKind::ActQuant) l.tracker->freeze();
}

/// Current per-tensor weight quantization parameters, layer name -> params.
template <typename T>
std::vector<std::pair<std::string, QuantParams<T>>> calibrate_weights(ModelGraphT<T>& model) {
    std::vector<std::pair<std::string, QuantParams<T>>> out;
    for (auto& l : model.layers)
        if ((l.kind == LayerKind::Conv || l.kind == LayerKind::Linear) && l.fq_weight)
            out.emplace_back(l.name, weight_quant_params(l.weight, l.weight_bits,
                                                         model.scale_only_dequant));
    return out;
}

}  // namespace lrq
