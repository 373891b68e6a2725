#pragma once

#include <algorithm>
#include <numeric>

#include "lrq/model.hpp"

namespace lrq {

// ---------------------------------------------------------------------------
// conditional generator: (noise, label) -> image in [-1, 1]
//
// Backbone: label embedding concatenated to the noise vector, a linear layer
// to a (size/4)^2 seed map, then two upsample-conv-BN-leaky blocks up to full
// resolution, a 3x3 conv to image channels, and tanh. Long-range attention
// blocks slot in after any of the two upsample blocks. Generator BN layers
// always normalize with batch statistics; their running buffers are unused.

struct GeneratorSpec {
    int noise_dim = 100;
    int num_classes = 10;
    int base_channels = 64;
    int image_size = 32;
    int image_channels = 3;
    std::vector<int> lra_positions = {0, 1};  // which upsample blocks get attention
    int lra_kernel = 21;
    int lra_dilation = 3;
    bool lra_sigmoid_gate = false;
    double leaky_slope = 0.2;

    int blocks() const { return 2; }

    void validate() const {
        if (noise_dim < 1) throw ConfigError("generator noise_dim must be >= 1");
        if (num_classes < 2) throw ConfigError("generator needs at least 2 classes");
        if (base_channels < 2 || base_channels % 2 != 0)
            throw ConfigError("generator base_channels must be even and >= 2");
        if (image_size < 4 || image_size % 4 != 0)
            throw ConfigError("generator image_size must be a positive multiple of 4");
        if (image_channels < 1) throw ConfigError("generator image_channels must be >= 1");
        for (int p : lra_positions)
            if (p < 0 || p >= blocks())
                throw ConfigError("attention position " + std::to_string(p) +
                                  " outside [0," + std::to_string(blocks()) + ")");
        lra_shape(lra_kernel, lra_dilation);  // validates K, d
    }
};

template <typename T>
ModelGraphT<T> build_generator(const GeneratorSpec& spec, uint64_t seed) {
    spec.validate();
    RandomEngine rng(seed);

    ModelGraphT<T> m;
    m.arch = "generator";
    m.num_classes = spec.num_classes;
    m.input_shape = {spec.noise_dim};

    const int s0 = spec.image_size / 4;
    const int c0 = spec.base_channels;
    const int c1 = spec.base_channels / 2;
    auto& L = m.layers;

    {
        LayerT<T> embed;
        embed.kind = LayerKind::LabelConcat;
        embed.name = "embed";
        embed.input = -1;
        embed.weight = TensorT<T>::randn({spec.num_classes, spec.noise_dim}, rng);
        embed.weight.set_requires_grad(true);
        L.push_back(std::move(embed));
    }
    {
        LayerT<T> seed_fc;
        seed_fc.kind = LayerKind::Linear;
        seed_fc.name = "seed_fc";
        const int64_t in_dim = 2 * spec.noise_dim;
        const int64_t out_dim = static_cast<int64_t>(c0) * s0 * s0;
        seed_fc.weight = detail::he_init<T>({out_dim, in_dim}, in_dim, rng);
        seed_fc.bias = detail::const_init<T>({out_dim}, T(0));
        L.push_back(std::move(seed_fc));
    }
    {
        LayerT<T> rs;
        rs.kind = LayerKind::Reshape;
        rs.name = "seed_map";
        rs.target_shape = {c0, s0, s0};
        L.push_back(std::move(rs));
    }
    L.push_back(detail::make_bn<T>("bn0", c0, /*always_batch_stats=*/true));

    const int block_cin[2] = {c0, c0};
    const int block_cout[2] = {c0, c1};
    for (int b = 0; b < spec.blocks(); ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        LayerT<T> up;
        up.kind = LayerKind::Upsample;
        up.name = p + "up";
        up.factor = 2;
        L.push_back(std::move(up));
        L.push_back(detail::make_conv<T>(p + "conv", block_cin[b], block_cout[b], 3, 1, 1, rng));
        L.push_back(detail::make_bn<T>(p + "bn", block_cout[b], /*always_batch_stats=*/true));
        L.push_back(detail::make_act<T>(p + "lrelu", ActKind::LeakyReLU,
                                        static_cast<T>(spec.leaky_slope)));
        if (std::find(spec.lra_positions.begin(), spec.lra_positions.end(), b) !=
            spec.lra_positions.end())
            L.push_back(make_lra_layer<T>(p + "attn", block_cout[b], spec.lra_kernel,
                                          spec.lra_dilation, spec.lra_sigmoid_gate, rng));
    }

    L.push_back(detail::make_conv<T>("to_img", c1, spec.image_channels, 3, 1, 1, rng,
                                     /*with_bias=*/true));
    L.push_back(detail::make_act<T>("tanh", ActKind::Tanh));
    return m;
}

// ---------------------------------------------------------------------------
// sampling

enum class LabelPolicy { Uniform, Balanced };

template <typename T>
struct SyntheticBatchT {
    TensorT<T> images;
    std::vector<int> labels;
    TensorT<T> noise;
};

using SyntheticBatch = SyntheticBatchT<float>;

inline std::vector<int> draw_labels(int batch, int num_classes, LabelPolicy policy,
                                    RandomEngine& rng) {
    std::vector<int> labels(batch);
    if (policy == LabelPolicy::Uniform) {
        for (auto& y : labels) y = static_cast<int>(rng.uniform_int(0, num_classes - 1));
        return labels;
    }
    if (batch < num_classes)
        throw ConfigError("balanced labels need batch >= num_classes, got batch " +
                          std::to_string(batch) + " for " + std::to_string(num_classes) +
                          " classes");
    const int per = batch / num_classes, extra = batch % num_classes;
    int k = 0;
    for (int c = 0; c < num_classes; ++c)
        for (int r = 0; r < per + (c < extra ? 1 : 0); ++r) labels[k++] = c;
    // Fisher-Yates so classes are interleaved within the batch
    for (int i = batch - 1; i > 0; --i)
        std::swap(labels[i], labels[rng.uniform_int(0, i)]);
    return labels;
}

/// Draw standard-normal noise and labels, run the generator. Deterministic
/// given (generator params, rng state).
template <typename T>
SyntheticBatchT<T> generate_batch(ModelGraphT<T>& gen, int batch, LabelPolicy policy,
                                  RandomEngine& rng) {
    if (batch < 1) throw ConfigError("generate_batch: batch must be >= 1");
    SyntheticBatchT<T> out;
    out.labels = draw_labels(batch, gen.num_classes, policy, rng);
    out.noise = TensorT<T>::randn({batch, gen.input_shape[0]}, rng);
    ForwardOptions opts;
    opts.mode = BNMode::Train;  // generator BN always uses batch statistics
    out.images = forward(gen, out.noise, opts, out.labels).output;
    return out;
}

}  // namespace lrq
