#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "lrq/common.hpp"

namespace lrq {

// ---------------------------------------------------------------------------
// training configuration
//
// Defaults are the reference recipe (full-scale step counts). `scale`
// multiplies every step/epoch count AND the matching decay periods, so a
// scaled-down run keeps the same number of decay events.

struct TrainConfig {
    uint64_t seed = 1;
    std::string arch = "resnet8";  // resnet8 | resnet20
    int num_classes = 3;
    double width_mult = 1.0;
    double scale = 1.0;

    struct Data {
        std::string source = "toy";  // toy | cifar10
        std::string cifar_dir;
        int64_t toy_per_class = 256;
        int64_t toy_eval_per_class = 128;
        uint64_t toy_seed = 77;
    } data;

    struct Pretrain {
        int epochs = 10;
        int batch = 64;
        double lr = 0.05;
        double momentum = 0.9;
        double weight_decay = 5e-4;
        double lr_decay_factor = 0.1;
        int lr_decay_epochs = 8;
    } pretrain;

    struct Generator {
        int noise_dim = 64;
        int base_channels = 48;
        int image_size = 32;
        std::vector<int> lra_positions = {0, 1};
        int lra_kernel = 21;
        int lra_dilation = 3;
        bool lra_sigmoid_gate = false;
    } generator;

    struct Generation {
        int steps = 4000;
        int batch = 32;
        double lr = 0.5;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double lr_decay_factor = 0.1;
        int lr_decay_steps = 1000;
        std::string label_policy = "balanced";  // balanced | uniform
    } generation;

    struct Ama {
        double margin = 0.6;
        double lambda_lower = 0.75;
        double lambda_upper = 0.95;
    } ama;

    struct Dkd {
        double alpha = 1.0;
        double beta = 8.0;
        double temperature = 1.0;
    } dkd;

    struct Finetune {
        int epochs = 150;
        int batches_per_epoch = 8;
        int batch = 32;
        double lr = 1e-4;
        double momentum = 0.9;
        double weight_decay = 1e-4;
        double lr_decay_factor = 0.1;
        int lr_decay_epochs = 100;
        double lambda = 0.9;  // distillation weight
        bool update_bn = true;
    } finetune;

    struct Quant {
        int weight_bits = 4;
        int act_bits = 4;
        bool per_channel = false;
        bool scale_only_dequant = false;
        int calib_batches = 20;
    } quant;

    struct Toggles {
        bool lra = true;
        bool ama = true;
        bool dkd = true;
    } toggles;

    /// Multiply step/epoch counts and decay periods by `scale` (min 1 each).
    void apply_scale() {
        if (scale == 1.0) return;
        if (scale <= 0) throw ConfigError("scale must be positive");
        auto s = [this](int v) {
            return std::max(1, static_cast<int>(std::lround(v * scale)));
        };
        pretrain.epochs = s(pretrain.epochs);
        pretrain.lr_decay_epochs = s(pretrain.lr_decay_epochs);
        generation.steps = s(generation.steps);
        generation.lr_decay_steps = s(generation.lr_decay_steps);
        finetune.epochs = s(finetune.epochs);
        finetune.lr_decay_epochs = s(finetune.lr_decay_epochs);
        scale = 1.0;  // applied; hash reflects effective counts
    }

    void validate() const {
        if (arch != "resnet8" && arch != "resnet20")
            throw ConfigError("arch must be resnet8 or resnet20, got '" + arch + "'");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (width_mult <= 0) throw ConfigError("width_mult must be positive");
        if (data.source != "toy" && data.source != "cifar10")
            throw ConfigError("data.source must be toy or cifar10");
        if (generation.label_policy != "balanced" && generation.label_policy != "uniform")
            throw ConfigError("generation.label_policy must be balanced or uniform");
        for (int batch : {pretrain.batch, generation.batch, finetune.batch})
            if (batch < 1) throw ConfigError("batch sizes must be >= 1");
        for (int v : {pretrain.epochs, generation.steps, finetune.epochs,
                      finetune.batches_per_epoch})
            if (v < 1) throw ConfigError("step/epoch counts must be >= 1");
        if (quant.weight_bits < 2 || quant.weight_bits > 8 || quant.act_bits < 2 ||
            quant.act_bits > 8)
            throw ConfigError("bit-widths must be in [2,8]");
        if (quant.calib_batches < 1) throw ConfigError("calib_batches must be >= 1");
        if (!(ama.lambda_lower < ama.lambda_upper) || ama.lambda_lower < -1 ||
            ama.lambda_upper > 1)
            throw ConfigError("ama bounds must satisfy -1 <= lower < upper <= 1");
        if (ama.margin < 0) throw ConfigError("ama margin must be >= 0");
        if (dkd.alpha < 0 || dkd.beta < 0) throw ConfigError("dkd weights must be >= 0");
        if (dkd.temperature <= 0) throw ConfigError("dkd temperature must be > 0");
        if (finetune.lambda < 0) throw ConfigError("finetune lambda must be >= 0");
        if (scale <= 0) throw ConfigError("scale must be positive");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{
        {"seed", c.seed},
        {"arch", c.arch},
        {"num_classes", c.num_classes},
        {"width_mult", c.width_mult},
        {"scale", c.scale},
        {"data",
         {{"source", c.data.source},
          {"cifar_dir", c.data.cifar_dir},
          {"toy_per_class", c.data.toy_per_class},
          {"toy_eval_per_class", c.data.toy_eval_per_class},
          {"toy_seed", c.data.toy_seed}}},
        {"pretrain",
         {{"epochs", c.pretrain.epochs},
          {"batch", c.pretrain.batch},
          {"lr", c.pretrain.lr},
          {"momentum", c.pretrain.momentum},
          {"weight_decay", c.pretrain.weight_decay},
          {"lr_decay_factor", c.pretrain.lr_decay_factor},
          {"lr_decay_epochs", c.pretrain.lr_decay_epochs}}},
        {"generator",
         {{"noise_dim", c.generator.noise_dim},
          {"base_channels", c.generator.base_channels},
          {"image_size", c.generator.image_size},
          {"lra_positions", c.generator.lra_positions},
          {"lra_kernel", c.generator.lra_kernel},
          {"lra_dilation", c.generator.lra_dilation},
          {"lra_sigmoid_gate", c.generator.lra_sigmoid_gate}}},
        {"generation",
         {{"steps", c.generation.steps},
          {"batch", c.generation.batch},
          {"lr", c.generation.lr},
          {"beta1", c.generation.beta1},
          {"beta2", c.generation.beta2},
          {"eps", c.generation.eps},
          {"lr_decay_factor", c.generation.lr_decay_factor},
          {"lr_decay_steps", c.generation.lr_decay_steps},
          {"label_policy", c.generation.label_policy}}},
        {"ama",
         {{"margin", c.ama.margin},
          {"lambda_lower", c.ama.lambda_lower},
          {"lambda_upper", c.ama.lambda_upper}}},
        {"dkd",
         {{"alpha", c.dkd.alpha},
          {"beta", c.dkd.beta},
          {"temperature", c.dkd.temperature}}},
        {"finetune",
         {{"epochs", c.finetune.epochs},
          {"batches_per_epoch", c.finetune.batches_per_epoch},
          {"batch", c.finetune.batch},
          {"lr", c.finetune.lr},
          {"momentum", c.finetune.momentum},
          {"weight_decay", c.finetune.weight_decay},
          {"lr_decay_factor", c.finetune.lr_decay_factor},
          {"lr_decay_epochs", c.finetune.lr_decay_epochs},
          {"lambda", c.finetune.lambda},
          {"update_bn", c.finetune.update_bn}}},
        {"quant",
         {{"weight_bits", c.quant.weight_bits},
          {"act_bits", c.quant.act_bits},
          {"per_channel", c.quant.per_channel},
          {"scale_only_dequant", c.quant.scale_only_dequant},
          {"calib_batches", c.quant.calib_batches}}},
        {"toggles",
         {{"lra", c.toggles.lra}, {"ama", c.toggles.ama}, {"dkd", c.toggles.dkd}}},
    };
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;  // defaults for missing keys
    c.seed = j.value("seed", d.seed);
    c.arch = j.value("arch", d.arch);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.width_mult = j.value("width_mult", d.width_mult);
    c.scale = j.value("scale", d.scale);
    if (j.contains("data")) {
        const auto& s = j.at("data");
        c.data.source = s.value("source", d.data.source);
        c.data.cifar_dir = s.value("cifar_dir", d.data.cifar_dir);
        c.data.toy_per_class = s.value("toy_per_class", d.data.toy_per_class);
        c.data.toy_eval_per_class = s.value("toy_eval_per_class", d.data.toy_eval_per_class);
        c.data.toy_seed = s.value("toy_seed", d.data.toy_seed);
    }
    if (j.contains("pretrain")) {
        const auto& s = j.at("pretrain");
        c.pretrain.epochs = s.value("epochs", d.pretrain.epochs);
        c.pretrain.batch = s.value("batch", d.pretrain.batch);
        c.pretrain.lr = s.value("lr", d.pretrain.lr);
        c.pretrain.momentum = s.value("momentum", d.pretrain.momentum);
        c.pretrain.weight_decay = s.value("weight_decay", d.pretrain.weight_decay);
        c.pretrain.lr_decay_factor = s.value("lr_decay_factor", d.pretrain.lr_decay_factor);
        c.pretrain.lr_decay_epochs = s.value("lr_decay_epochs", d.pretrain.lr_decay_epochs);
    }
    if (j.contains("generator")) {
        const auto& s = j.at("generator");
        c.generator.noise_dim = s.value("noise_dim", d.generator.noise_dim);
        c.generator.base_channels = s.value("base_channels", d.generator.base_channels);
        c.generator.image_size = s.value("image_size", d.generator.image_size);
        c.generator.lra_positions = s.value("lra_positions", d.generator.lra_positions);
        c.generator.lra_kernel = s.value("lra_kernel", d.generator.lra_kernel);
        c.generator.lra_dilation = s.value("lra_dilation", d.generator.lra_dilation);
        c.generator.lra_sigmoid_gate = s.value("lra_sigmoid_gate", d.generator.lra_sigmoid_gate);
    }
    if (j.contains("generation")) {
        const auto& s = j.at("generation");
        c.generation.steps = s.value("steps", d.generation.steps);
        c.generation.batch = s.value("batch", d.generation.batch);
        c.generation.lr = s.value("lr", d.generation.lr);
        c.generation.beta1 = s.value("beta1", d.generation.beta1);
        c.generation.beta2 = s.value("beta2", d.generation.beta2);
        c.generation.eps = s.value("eps", d.generation.eps);
        c.generation.lr_decay_factor = s.value("lr_decay_factor", d.generation.lr_decay_factor);
        c.generation.lr_decay_steps = s.value("lr_decay_steps", d.generation.lr_decay_steps);
        c.generation.label_policy = s.value("label_policy", d.generation.label_policy);
    }
    if (j.contains("ama")) {
        const auto& s = j.at("ama");
        c.ama.margin = s.value("margin", d.ama.margin);
        c.ama.lambda_lower = s.value("lambda_lower", d.ama.lambda_lower);
        c.ama.lambda_upper = s.value("lambda_upper", d.ama.lambda_upper);
    }
    if (j.contains("dkd")) {
        const auto& s = j.at("dkd");
        c.dkd.alpha = s.value("alpha", d.dkd.alpha);
        c.dkd.beta = s.value("beta", d.dkd.beta);
        c.dkd.temperature = s.value("temperature", d.dkd.temperature);
    }
    if (j.contains("finetune")) {
        const auto& s = j.at("finetune");
        c.finetune.epochs = s.value("epochs", d.finetune.epochs);
        c.finetune.batches_per_epoch = s.value("batches_per_epoch", d.finetune.batches_per_epoch);
        c.finetune.batch = s.value("batch", d.finetune.batch);
        c.finetune.lr = s.value("lr", d.finetune.lr);
        c.finetune.momentum = s.value("momentum", d.finetune.momentum);
        c.finetune.weight_decay = s.value("weight_decay", d.finetune.weight_decay);
        c.finetune.lr_decay_factor = s.value("lr_decay_factor", d.finetune.lr_decay_factor);
        c.finetune.lr_decay_epochs = s.value("lr_decay_epochs", d.finetune.lr_decay_epochs);
        c.finetune.lambda = s.value("lambda", d.finetune.lambda);
        c.finetune.update_bn = s.value("update_bn", d.finetune.update_bn);
    }
    if (j.contains("quant")) {
        const auto& s = j.at("quant");
        c.quant.weight_bits = s.value("weight_bits", d.quant.weight_bits);
        c.quant.act_bits = s.value("act_bits", d.quant.act_bits);
        c.quant.per_channel = s.value("per_channel", d.quant.per_channel);
        c.quant.scale_only_dequant = s.value("scale_only_dequant", d.quant.scale_only_dequant);
        c.quant.calib_batches = s.value("calib_batches", d.quant.calib_batches);
    }
    if (j.contains("toggles")) {
        const auto& s = j.at("toggles");
        c.toggles.lra = s.value("lra", d.toggles.lra);
        c.toggles.ama = s.value("ama", d.toggles.ama);
        c.toggles.dkd = s.value("dkd", d.toggles.dkd);
    }
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    TrainConfig c = j.get<TrainConfig>();
    return c;
}

/// Set one dotted-path key (e.g. "finetune.lr=0.001"). Values parse as JSON
/// literals where possible, else as strings.
inline void apply_override(TrainConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like key.path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;  // plain string
    }

    nlohmann::json j;
    to_json(j, cfg);
    nlohmann::json* cursor = &j;
    size_t begin = 0;
    while (true) {
        const auto dot = path.find('.', begin);
        const std::string key = path.substr(begin, dot - begin);
        if (key.empty()) throw ConfigError("bad override path '" + path + "'");
        if (dot == std::string::npos) {
            if (!cursor->contains(key))
                throw ConfigError("unknown config key '" + path + "'");
            (*cursor)[key] = value;
            break;
        }
        if (!cursor->contains(key)) throw ConfigError("unknown config key '" + path + "'");
        cursor = &(*cursor)[key];
        begin = dot + 1;
    }
    from_json(j, cfg);
}

// ---------------------------------------------------------------------------
// canonical hash of the effective configuration

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

/// FNV-1a over the sorted-key JSON dump of the post-override, post-scale
/// configuration. Stable across runs and platforms.
inline std::string config_hash(const TrainConfig& cfg) {
    nlohmann::json j;
    to_json(j, cfg);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

}  // namespace lrq
