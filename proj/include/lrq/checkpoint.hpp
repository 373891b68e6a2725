#pragma once

#include <array>
#include <bit>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "lrq/data.hpp"
#include "lrq/generator.hpp"
#include "lrq/model.hpp"

namespace lrq {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// checkpoint file: [u64 LE header length][JSON header][raw LE float32 payload]
//
// The header carries the full architecture (layer list), quantization state,
// frozen statistics bookkeeping, and a tensor manifest (name, shape, byte
// offset into the payload). Round trips are bit-exact.

namespace detail {

inline void put_u64_le(std::ostream& out, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t get_u64_le(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw DataError("checkpoint truncated in header length");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_f32_le(std::vector<unsigned char>& out, const float* data, size_t n) {
    const size_t base = out.size();
    out.resize(base + n * 4);
    for (size_t i = 0; i < n; ++i) {
        const uint32_t u = std::bit_cast<uint32_t>(data[i]);
        out[base + 4 * i + 0] = static_cast<unsigned char>(u);
        out[base + 4 * i + 1] = static_cast<unsigned char>(u >> 8);
        out[base + 4 * i + 2] = static_cast<unsigned char>(u >> 16);
        out[base + 4 * i + 3] = static_cast<unsigned char>(u >> 24);
    }
}

inline void get_f32_le(const unsigned char* in, float* data, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        const uint32_t u = static_cast<uint32_t>(in[4 * i]) |
                           static_cast<uint32_t>(in[4 * i + 1]) << 8 |
                           static_cast<uint32_t>(in[4 * i + 2]) << 16 |
                           static_cast<uint32_t>(in[4 * i + 3]) << 24;
        data[i] = std::bit_cast<float>(u);
    }
}

inline const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::BatchNorm: return "batch_norm";
        case LayerKind::Act: return "act";
        case LayerKind::Linear: return "linear";
        case LayerKind::GlobalAvgPool: return "global_avg_pool";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::ResidualAdd: return "residual_add";
        case LayerKind::Upsample: return "upsample";
        case LayerKind::Reshape: return "reshape";
        case LayerKind::LabelConcat: return "label_concat";
        case LayerKind::LongRangeAttention: return "long_range_attention";
        case LayerKind::ActQuant: return "act_quant";
    }
    throw ConfigError("unknown layer kind");
}

inline LayerKind kind_from_name(const std::string& s) {
    static const std::pair<const char*, LayerKind> table[] = {
        {"conv", LayerKind::Conv},
        {"batch_norm", LayerKind::BatchNorm},
        {"act", LayerKind::Act},
        {"linear", LayerKind::Linear},
        {"global_avg_pool", LayerKind::GlobalAvgPool},
        {"flatten", LayerKind::Flatten},
        {"residual_add", LayerKind::ResidualAdd},
        {"upsample", LayerKind::Upsample},
        {"reshape", LayerKind::Reshape},
        {"label_concat", LayerKind::LabelConcat},
        {"long_range_attention", LayerKind::LongRangeAttention},
        {"act_quant", LayerKind::ActQuant},
    };
    for (const auto& [name, kind] : table)
        if (s == name) return kind;
    throw DataError("checkpoint names unknown layer kind '" + s + "'");
}

inline const char* act_name(ActKind a) {
    switch (a) {
        case ActKind::ReLU: return "relu";
        case ActKind::LeakyReLU: return "leaky_relu";
        case ActKind::Tanh: return "tanh";
    }
    throw ConfigError("unknown activation kind");
}

inline ActKind act_from_name(const std::string& s) {
    if (s == "relu") return ActKind::ReLU;
    if (s == "leaky_relu") return ActKind::LeakyReLU;
    if (s == "tanh") return ActKind::Tanh;
    throw DataError("checkpoint names unknown activation '" + s + "'");
}

constexpr const char* kParamSuffixes[] = {"weight",        "bias",          "gamma",
                                          "beta",          "lra_local_w",   "lra_local_b",
                                          "lra_long_w",    "lra_long_b",    "lra_channel_w",
                                          "lra_channel_b"};

template <typename T>
std::array<TensorT<T>*, 10> param_fields(LayerT<T>& l) {
    return {&l.weight,        &l.bias,        &l.gamma,      &l.beta,
            &l.lra_local_w,   &l.lra_local_b, &l.lra_long_w, &l.lra_long_b,
            &l.lra_channel_w, &l.lra_channel_b};
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, ModelGraph& model) {
    json h;
    h["format"] = "lrq-checkpoint";
    h["version"] = 1;
    h["arch"] = model.arch;
    h["num_classes"] = model.num_classes;
    h["input_shape"] = model.input_shape;
    h["quantized"] = model.quantized;
    h["weight_bits"] = model.weight_bits;
    h["act_bits"] = model.act_bits;
    h["per_channel_weights"] = model.per_channel_weights;
    h["scale_only_dequant"] = model.scale_only_dequant;
    h["bn_store_frozen"] = model.bn_store_frozen;
    h["bn_running_trained"] = model.bn_running_trained;

    std::vector<unsigned char> payload;
    json tensors = json::array();
    auto add_tensor = [&](const std::string& name, const Shape& shape, const float* data,
                          size_t n) {
        json t;
        t["name"] = name;
        t["shape"] = shape;
        t["dtype"] = "float32";
        t["offset"] = payload.size();
        t["count"] = n;
        tensors.push_back(std::move(t));
        detail::put_f32_le(payload, data, n);
    };

    json layers = json::array();
    for (auto& l : model.layers) {
        json j;
        j["kind"] = detail::kind_name(l.kind);
        j["name"] = l.name;
        j["input"] = l.input;
        j["input2"] = l.input2;
        j["conv"] = {{"stride", l.conv.stride},
                     {"padding", l.conv.padding},
                     {"dilation", l.conv.dilation},
                     {"groups", l.conv.groups}};
        j["act"] = detail::act_name(l.act);
        j["leaky_slope"] = l.leaky_slope;
        j["factor"] = l.factor;
        j["target_shape"] = l.target_shape;
        j["bn_eps"] = l.bn_eps;
        j["bn_momentum"] = l.bn_momentum;
        j["bn_always_batch_stats"] = l.bn_always_batch_stats;
        j["lra_kernel"] = l.lra_kernel;
        j["lra_dilation"] = l.lra_dilation;
        j["lra_sigmoid_gate"] = l.lra_sigmoid_gate;
        j["fq_weight"] = l.fq_weight;
        j["weight_bits"] = l.weight_bits;
        j["act_bits"] = l.act_bits;
        if (l.tracker) {
            j["tracker"] = {{"min", l.tracker->min()},
                            {"max", l.tracker->max()},
                            {"batches_seen", l.tracker->batches_seen()},
                            {"frozen", l.tracker->frozen()},
                            {"momentum", l.tracker->momentum()},
                            {"warmup_batches", l.tracker->warmup_batches()}};
        }
        layers.push_back(std::move(j));

        auto fields = detail::param_fields(l);
        for (int i = 0; i < 10; ++i)
            if (fields[i]->defined())
                add_tensor(l.name + "." + detail::kParamSuffixes[i], fields[i]->shape(),
                           fields[i]->values().data(), fields[i]->values().size());
        if (l.kind == LayerKind::BatchNorm) {
            add_tensor(l.name + ".running_mean", {static_cast<int64_t>(l.running_mean.size())},
                       l.running_mean.data(), l.running_mean.size());
            add_tensor(l.name + ".running_var", {static_cast<int64_t>(l.running_var.size())},
                       l.running_var.data(), l.running_var.size());
        }
    }
    h["layers"] = std::move(layers);

    h["bn_store_layers"] = model.bn_store.size();
    for (size_t k = 0; k < model.bn_store.size(); ++k) {
        add_tensor("bn_store." + std::to_string(k) + ".mean",
                   {static_cast<int64_t>(model.bn_store[k].mean.size())},
                   model.bn_store[k].mean.data(), model.bn_store[k].mean.size());
        add_tensor("bn_store." + std::to_string(k) + ".sigma",
                   {static_cast<int64_t>(model.bn_store[k].sigma.size())},
                   model.bn_store[k].sigma.data(), model.bn_store[k].sigma.size());
    }
    h["tensors"] = std::move(tensors);

    const std::string header = h.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    detail::put_u64_le(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw DataError("short write on checkpoint: " + path);
}

inline ModelGraph load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    const uint64_t hlen = detail::get_u64_le(in);
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw DataError("checkpoint truncated in header: " + path);

    json h;
    try {
        h = json::parse(header);
    } catch (const json::exception& e) {
        throw DataError("checkpoint header is not valid JSON: " + std::string(e.what()));
    }
    if (h.value("format", "") != "lrq-checkpoint")
        throw DataError("not a checkpoint file: " + path);
    if (h.value("version", 0) != 1)
        throw DataError("unsupported checkpoint version in " + path);

    std::vector<unsigned char> payload((std::istreambuf_iterator<char>(in)),
                                       std::istreambuf_iterator<char>());

    struct Entry {
        Shape shape;
        size_t offset, count;
    };
    std::map<std::string, Entry> manifest;
    for (const auto& t : h.at("tensors")) {
        Entry e;
        e.shape = t.at("shape").get<Shape>();
        e.offset = t.at("offset").get<size_t>();
        e.count = t.at("count").get<size_t>();
        if (e.offset + e.count * 4 > payload.size())
            throw DataError("checkpoint payload truncated at tensor '" +
                            t.at("name").get<std::string>() + "'");
        manifest[t.at("name").get<std::string>()] = std::move(e);
    }
    auto read_vec = [&](const std::string& name) {
        const auto it = manifest.find(name);
        if (it == manifest.end()) throw DataError("checkpoint missing tensor '" + name + "'");
        std::vector<float> v(it->second.count);
        detail::get_f32_le(payload.data() + it->second.offset, v.data(), v.size());
        return v;
    };
    auto read_tensor = [&](const std::string& name) {
        const auto it = manifest.find(name);
        Tensor t = Tensor::from_data(it->second.shape, read_vec(name));
        t.set_requires_grad(true);
        return t;
    };

    ModelGraph m;
    m.arch = h.at("arch").get<std::string>();
    m.num_classes = h.at("num_classes").get<int>();
    m.input_shape = h.at("input_shape").get<Shape>();
    m.quantized = h.value("quantized", false);
    m.weight_bits = h.value("weight_bits", 0);
    m.act_bits = h.value("act_bits", 0);
    m.per_channel_weights = h.value("per_channel_weights", false);
    m.scale_only_dequant = h.value("scale_only_dequant", false);
    m.bn_running_trained = h.value("bn_running_trained", false);

    for (const auto& j : h.at("layers")) {
        Layer l;
        l.kind = detail::kind_from_name(j.at("kind").get<std::string>());
        l.name = j.at("name").get<std::string>();
        l.input = j.at("input").get<int>();
        l.input2 = j.at("input2").get<int>();
        l.conv.stride = j.at("conv").at("stride").get<int>();
        l.conv.padding = j.at("conv").at("padding").get<int>();
        l.conv.dilation = j.at("conv").at("dilation").get<int>();
        l.conv.groups = j.at("conv").at("groups").get<int>();
        l.act = detail::act_from_name(j.at("act").get<std::string>());
        l.leaky_slope = j.at("leaky_slope").get<float>();
        l.factor = j.at("factor").get<int>();
        l.target_shape = j.at("target_shape").get<Shape>();
        l.bn_eps = j.at("bn_eps").get<double>();
        l.bn_momentum = j.at("bn_momentum").get<double>();
        l.bn_always_batch_stats = j.at("bn_always_batch_stats").get<bool>();
        l.lra_kernel = j.at("lra_kernel").get<int>();
        l.lra_dilation = j.at("lra_dilation").get<int>();
        l.lra_sigmoid_gate = j.at("lra_sigmoid_gate").get<bool>();
        l.fq_weight = j.at("fq_weight").get<bool>();
        l.weight_bits = j.at("weight_bits").get<int>();
        l.act_bits = j.at("act_bits").get<int>();
        if (j.contains("tracker")) {
            const auto& t = j.at("tracker");
            l.tracker = std::make_shared<RangeTracker<float>>(t.at("momentum").get<float>(),
                                                              t.at("warmup_batches").get<int>());
            l.tracker->restore(t.at("min").get<float>(), t.at("max").get<float>(),
                               t.at("batches_seen").get<int64_t>(), t.at("frozen").get<bool>());
        }

        auto fields = detail::param_fields(l);
        for (int i = 0; i < 10; ++i) {
            const std::string name = l.name + "." + detail::kParamSuffixes[i];
            if (manifest.count(name)) *fields[i] = read_tensor(name);
        }
        if (l.kind == LayerKind::BatchNorm) {
            l.running_mean = read_vec(l.name + ".running_mean");
            l.running_var = read_vec(l.name + ".running_var");
        }
        m.layers.push_back(std::move(l));
    }

    const size_t bn_layers = h.value("bn_store_layers", size_t{0});
    for (size_t k = 0; k < bn_layers; ++k) {
        BNStatsT<float> s;
        s.mean = read_vec("bn_store." + std::to_string(k) + ".mean");
        s.sigma = read_vec("bn_store." + std::to_string(k) + ".sigma");
        m.bn_store.push_back(std::move(s));
    }
    m.bn_store_frozen = h.value("bn_store_frozen", false);
    return m;
}

// ---------------------------------------------------------------------------
// quantization report: layer -> {N, alpha, beta, S, Z, granularity}

inline json quant_report(ModelGraph& model) {
    json report;
    report["weight_bits"] = model.weight_bits;
    report["act_bits"] = model.act_bits;
    json layers = json::object();
    auto param_entry = [&](const QuantParams<float>& p) {
        return json{{"bits", p.bits},          {"alpha", p.alpha},
                    {"beta", p.beta},          {"scale", p.scale},
                    {"zero_point", p.zero_point}, {"granularity", to_string(p.granularity)}};
    };
    for (auto& l : model.layers) {
        if ((l.kind == LayerKind::Conv || l.kind == LayerKind::Linear) && l.fq_weight) {
            if (model.per_channel_weights) {
                json per = json::array();
                for (const auto& p : weight_quant_params_per_channel(
                         l.weight, l.weight_bits, model.scale_only_dequant))
                    per.push_back(param_entry(p));
                layers[l.name] = {{"kind", "weight"}, {"channels", std::move(per)}};
            } else {
                auto e = param_entry(
                    weight_quant_params(l.weight, l.weight_bits, model.scale_only_dequant));
                e["kind"] = "weight";
                layers[l.name] = std::move(e);
            }
        } else if (l.kind == LayerKind::ActQuant) {
            if (l.tracker->calibrated()) {
                auto e = param_entry(l.tracker->params(l.act_bits, model.scale_only_dequant));
                e["kind"] = "activation";
                e["calibrated"] = true;
                layers[l.name] = std::move(e);
            } else {
                layers[l.name] = {{"kind", "activation"}, {"calibrated", false}};
            }
        }
    }
    report["layers"] = std::move(layers);
    return report;
}

// ---------------------------------------------------------------------------
// synthetic batch dump: JSON manifest + raw float32 payload + PPM preview

inline void dump_synthetic(const std::string& dir, const SyntheticBatch& batch) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto& shape = batch.images.shape();
    if (shape.size() != 4) throw ShapeError("synthetic dump expects NCHW images");

    std::vector<unsigned char> payload;
    detail::put_f32_le(payload, batch.images.values().data(), batch.images.values().size());
    {
        std::ofstream out(fs::path(dir) / "images.f32", std::ios::binary);
        if (!out) throw DataError("cannot write synthetic payload in " + dir);
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size()));
    }
    write_ppm_grid((fs::path(dir) / "preview.ppm").string(), batch.images.values(), shape[0],
                   shape[1], shape[2], shape[3]);

    json manifest;
    manifest["count"] = shape[0];
    manifest["channels"] = shape[1];
    manifest["height"] = shape[2];
    manifest["width"] = shape[3];
    manifest["dtype"] = "float32";
    manifest["payload"] = "images.f32";
    manifest["preview"] = "preview.ppm";
    manifest["labels"] = batch.labels;
    std::ofstream mout(fs::path(dir) / "manifest.json");
    if (!mout) throw DataError("cannot write synthetic manifest in " + dir);
    mout << manifest.dump(2) << "\n";
}

}  // namespace lrq
