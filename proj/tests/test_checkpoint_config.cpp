#include <gtest/gtest.h>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <lrq/lrq.hpp>

using namespace lrq;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    return (fs::path(::testing::TempDir()) / name).string();
}

ModelGraph make_pretrained(uint64_t seed) {
    auto m = build_resnet_tiny<float>(ResNetDepth::ResNet8, 3, 1.0, seed);
    RandomEngine rng(seed + 100);
    ForwardOptions opts;
    opts.mode = BNMode::Train;
    opts.update_running = true;
    for (int i = 0; i < 3; ++i) {
        NoGradGuard guard;
        forward(m, Tensor::randn({8, 3, 32, 32}, rng), opts);
    }
    m.bn_running_trained = true;
    pretrain_snapshot(m);
    return m;
}

ModelGraph make_calibrated_student(uint64_t seed) {
    auto teacher = make_pretrained(seed);
    auto q = wrap_model(teacher, 4, 4);
    RandomEngine rng(seed + 200);
    std::vector<Tensor> batches;
    for (int i = 0; i < 2; ++i) batches.push_back(Tensor::randn({4, 3, 32, 32}, rng));
    calibrate_activations(q, batches);
    return q;
}

void expect_models_identical(ModelGraph& a, ModelGraph& b) {
    EXPECT_EQ(a.arch, b.arch);
    EXPECT_EQ(a.num_classes, b.num_classes);
    EXPECT_EQ(a.input_shape, b.input_shape);
    EXPECT_EQ(a.quantized, b.quantized);
    EXPECT_EQ(a.weight_bits, b.weight_bits);
    EXPECT_EQ(a.act_bits, b.act_bits);
    EXPECT_EQ(a.per_channel_weights, b.per_channel_weights);
    EXPECT_EQ(a.scale_only_dequant, b.scale_only_dequant);
    EXPECT_EQ(a.bn_store_frozen, b.bn_store_frozen);
    EXPECT_EQ(a.bn_running_trained, b.bn_running_trained);

    auto an = a.named_params(), bn = b.named_params();
    ASSERT_EQ(an.size(), bn.size());
    for (size_t i = 0; i < an.size(); ++i) {
        EXPECT_EQ(an[i].first, bn[i].first);
        EXPECT_EQ(an[i].second.shape(), bn[i].second.shape()) << an[i].first;
        EXPECT_EQ(an[i].second.values(), bn[i].second.values()) << an[i].first;
    }

    ASSERT_EQ(a.layers.size(), b.layers.size());
    for (size_t i = 0; i < a.layers.size(); ++i) {
        const auto& la = a.layers[i];
        const auto& lb = b.layers[i];
        EXPECT_EQ(static_cast<int>(la.kind), static_cast<int>(lb.kind));
        EXPECT_EQ(la.name, lb.name);
        EXPECT_EQ(la.input, lb.input);
        EXPECT_EQ(la.input2, lb.input2);
        EXPECT_EQ(la.running_mean, lb.running_mean);
        EXPECT_EQ(la.running_var, lb.running_var);
        EXPECT_EQ(la.fq_weight, lb.fq_weight);
        EXPECT_EQ(la.tracker != nullptr, lb.tracker != nullptr) << la.name;
        if (la.tracker) {
            EXPECT_EQ(la.tracker->min(), lb.tracker->min());
            EXPECT_EQ(la.tracker->max(), lb.tracker->max());
            EXPECT_EQ(la.tracker->batches_seen(), lb.tracker->batches_seen());
            EXPECT_EQ(la.tracker->frozen(), lb.tracker->frozen());
            EXPECT_EQ(la.tracker->momentum(), lb.tracker->momentum());
            EXPECT_EQ(la.tracker->warmup_batches(), lb.tracker->warmup_batches());
        }
    }

    ASSERT_EQ(a.bn_store.size(), b.bn_store.size());
    for (size_t k = 0; k < a.bn_store.size(); ++k) {
        EXPECT_EQ(a.bn_store[k].mean, b.bn_store[k].mean);
        EXPECT_EQ(a.bn_store[k].sigma, b.bn_store[k].sigma);
    }
}

}  // namespace

TEST(Checkpoint, QuantizedModelRoundTripsBitExact) {
    auto q = make_calibrated_student(31);
    const auto path = tmp_path("student.ckpt");
    save_checkpoint(path, q);
    auto r = load_checkpoint(path);
    expect_models_identical(q, r);

    RandomEngine rng(9);
    auto batch = Tensor::randn({4, 3, 32, 32}, rng);
    NoGradGuard guard;
    auto a = forward(q, batch, ForwardOptions{}).output;
    auto b = forward(r, batch, ForwardOptions{}).output;
    EXPECT_EQ(a.values(), b.values());
}

TEST(Checkpoint, PlainModelRoundTrips) {
    auto m = make_pretrained(32);
    const auto path = tmp_path("teacher.ckpt");
    save_checkpoint(path, m);
    auto r = load_checkpoint(path);
    expect_models_identical(m, r);
    EXPECT_TRUE(r.bn_store_frozen);
    EXPECT_EQ(static_cast<int>(r.bn_store.size()), bn_layer_count(r));
}

TEST(Checkpoint, GeneratorRoundTrips) {
    GeneratorSpec spec;
    spec.noise_dim = 8;
    spec.num_classes = 3;
    spec.base_channels = 8;
    spec.image_size = 16;
    spec.lra_kernel = 9;
    auto g = build_generator<float>(spec, 4);
    const auto path = tmp_path("generator.ckpt");
    save_checkpoint(path, g);
    auto r = load_checkpoint(path);
    expect_models_identical(g, r);

    RandomEngine rng_a(11), rng_b(11);
    NoGradGuard guard;
    auto sa = generate_batch(g, 6, LabelPolicy::Balanced, rng_a);
    auto sb = generate_batch(r, 6, LabelPolicy::Balanced, rng_b);
    EXPECT_EQ(sa.images.values(), sb.images.values());
    EXPECT_EQ(sa.labels, sb.labels);
}

TEST(Checkpoint, CorruptFilesRejected) {
    auto m = make_pretrained(33);
    const auto path = tmp_path("base.ckpt");
    save_checkpoint(path, m);
    const auto size = fs::file_size(path);

    auto truncate_to = [&](const std::string& dst, uint64_t n) {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> buf(n);
        in.read(buf.data(), static_cast<std::streamsize>(n));
        std::ofstream out(dst, std::ios::binary);
        out.write(buf.data(), static_cast<std::streamsize>(n));
    };

    const auto tiny = tmp_path("tiny.ckpt");
    truncate_to(tiny, 4);
    EXPECT_THROW(load_checkpoint(tiny), DataError);

    const auto mid_header = tmp_path("mid_header.ckpt");
    truncate_to(mid_header, 64);
    EXPECT_THROW(load_checkpoint(mid_header), DataError);

    const auto mid_payload = tmp_path("mid_payload.ckpt");
    truncate_to(mid_payload, size - 512);
    EXPECT_THROW(load_checkpoint(mid_payload), DataError);

    EXPECT_THROW(load_checkpoint(tmp_path("missing.ckpt")), DataError);

    auto write_header_file = [&](const std::string& dst, const std::string& header) {
        std::ofstream out(dst, std::ios::binary);
        uint64_t len = header.size();
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(len >> (8 * i));
        out.write(reinterpret_cast<const char*>(b), 8);
        out.write(header.data(), static_cast<std::streamsize>(header.size()));
    };

    const auto bad_magic = tmp_path("bad_magic.ckpt");
    write_header_file(bad_magic, R"({"format":"something-else","version":1})");
    EXPECT_THROW(load_checkpoint(bad_magic), DataError);

    const auto bad_version = tmp_path("bad_version.ckpt");
    write_header_file(bad_version, R"({"format":"lrq-checkpoint","version":99})");
    EXPECT_THROW(load_checkpoint(bad_version), DataError);

    const auto not_json = tmp_path("not_json.ckpt");
    write_header_file(not_json, "this is not json at all");
    EXPECT_THROW(load_checkpoint(not_json), DataError);
}

TEST(QuantReport, CoversWeightsAndActivations) {
    auto q = make_calibrated_student(34);
    auto report = quant_report(q);
    EXPECT_EQ(report.at("weight_bits").get<int>(), 4);
    EXPECT_EQ(report.at("act_bits").get<int>(), 4);

    int weights = 0, acts = 0;
    for (auto& [name, entry] : report.at("layers").items()) {
        const std::string kind = entry.at("kind").get<std::string>();
        if (kind == "weight") {
            ++weights;
            EXPECT_EQ(entry.at("bits").get<int>(), 4);
            EXPECT_LT(entry.at("alpha").get<double>(), entry.at("beta").get<double>());
            EXPECT_GT(entry.at("scale").get<double>(), 0.0);
            EXPECT_TRUE(entry.contains("zero_point"));
            EXPECT_EQ(entry.at("granularity").get<std::string>(), "per-tensor");
        } else {
            ASSERT_EQ(kind, "activation");
            ++acts;
            EXPECT_TRUE(entry.at("calibrated").get<bool>()) << name;
        }
    }
    int fq = 0, aq = 0;
    for (auto& l : q.layers) {
        fq += (l.kind == LayerKind::Conv || l.kind == LayerKind::Linear) && l.fq_weight;
        aq += l.kind == LayerKind::ActQuant;
    }
    EXPECT_EQ(weights, fq);
    EXPECT_EQ(acts, aq);
}

TEST(QuantReport, UncalibratedActivationsFlagged) {
    auto teacher = make_pretrained(35);
    auto q = wrap_model(teacher, 4, 4);
    auto report = quant_report(q);
    bool saw_uncalibrated = false;
    for (auto& [name, entry] : report.at("layers").items())
        if (entry.at("kind").get<std::string>() == "activation") {
            EXPECT_FALSE(entry.at("calibrated").get<bool>()) << name;
            EXPECT_FALSE(entry.contains("scale"));
            saw_uncalibrated = true;
        }
    EXPECT_TRUE(saw_uncalibrated);
}

TEST(QuantReport, PerChannelGranularity) {
    auto teacher = make_pretrained(36);
    WrapOptions w;
    w.per_channel_weights = true;
    auto q = wrap_model(teacher, 4, 4, w);
    auto report = quant_report(q);
    bool saw_weight = false;
    for (auto& [name, entry] : report.at("layers").items())
        if (entry.at("kind").get<std::string>() == "weight") {
            ASSERT_TRUE(entry.contains("channels")) << name;
            for (const auto& ch : entry.at("channels"))
                EXPECT_EQ(ch.at("granularity").get<std::string>(), "per-channel");
            saw_weight = true;
        }
    EXPECT_TRUE(saw_weight);
}

TEST(Config, JsonRoundTripPreservesEverything) {
    TrainConfig c;
    c.seed = 42;
    c.arch = "resnet20";
    c.num_classes = 7;
    c.pretrain.lr = 0.123;
    c.generator.lra_positions = {1};
    c.quant.weight_bits = 5;
    c.toggles.ama = false;

    json j;
    to_json(j, c);
    TrainConfig r;
    from_json(j, r);
    json j2;
    to_json(j2, r);
    EXPECT_EQ(j.dump(), j2.dump());
    EXPECT_EQ(r.arch, "resnet20");
    EXPECT_EQ(r.quant.weight_bits, 5);
    EXPECT_FALSE(r.toggles.ama);
}

TEST(Config, LoadFromFile) {
    const auto path = tmp_path("cfg.json");
    {
        std::ofstream out(path);
        out << R"({"arch": "resnet20", "pretrain": {"epochs": 3}, "quant": {"act_bits": 6}})";
    }
    auto cfg = load_config(path);
    EXPECT_EQ(cfg.arch, "resnet20");
    EXPECT_EQ(cfg.pretrain.epochs, 3);
    EXPECT_EQ(cfg.quant.act_bits, 6);
    EXPECT_EQ(cfg.quant.weight_bits, 4);  // untouched default

    EXPECT_THROW(load_config(tmp_path("no_such_config.json")), ConfigError);
    const auto bad = tmp_path("bad_cfg.json");
    {
        std::ofstream out(bad);
        out << "{oops";
    }
    EXPECT_THROW(load_config(bad), ConfigError);
}

TEST(Config, Overrides) {
    TrainConfig cfg;
    apply_override(cfg, "finetune.lr=0.001");
    EXPECT_DOUBLE_EQ(cfg.finetune.lr, 0.001);
    apply_override(cfg, "quant.weight_bits=8");
    EXPECT_EQ(cfg.quant.weight_bits, 8);
    apply_override(cfg, "arch=resnet20");
    EXPECT_EQ(cfg.arch, "resnet20");
    apply_override(cfg, "toggles.lra=false");
    EXPECT_FALSE(cfg.toggles.lra);
    apply_override(cfg, "data.source=cifar10");
    EXPECT_EQ(cfg.data.source, "cifar10");

    EXPECT_THROW(apply_override(cfg, "nosuchkey=1"), ConfigError);
    EXPECT_THROW(apply_override(cfg, "pretrain.nope=1"), ConfigError);
    EXPECT_THROW(apply_override(cfg, "noequals"), ConfigError);
    EXPECT_THROW(apply_override(cfg, "=5"), ConfigError);
}

TEST(Config, HashStableAndSensitive) {
    TrainConfig a, b;
    EXPECT_EQ(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
    for (char c : config_hash(a)) EXPECT_TRUE(std::isxdigit(static_cast<unsigned char>(c)));

    apply_override(b, "quant.weight_bits=8");
    EXPECT_NE(config_hash(a), config_hash(b));

    TrainConfig c;
    c.seed = 2;
    EXPECT_NE(config_hash(a), config_hash(c));
}

TEST(Config, ScaleShrinksSchedules) {
    TrainConfig cfg;
    cfg.pretrain.epochs = 10;
    cfg.pretrain.lr_decay_epochs = 8;
    cfg.generation.steps = 4000;
    cfg.generation.lr_decay_steps = 1000;
    cfg.finetune.epochs = 150;
    cfg.finetune.lr_decay_epochs = 100;
    cfg.scale = 0.5;
    cfg.apply_scale();
    EXPECT_EQ(cfg.pretrain.epochs, 5);
    EXPECT_EQ(cfg.pretrain.lr_decay_epochs, 4);
    EXPECT_EQ(cfg.generation.steps, 2000);
    EXPECT_EQ(cfg.generation.lr_decay_steps, 500);
    EXPECT_EQ(cfg.finetune.epochs, 75);
    EXPECT_EQ(cfg.finetune.lr_decay_epochs, 50);
    EXPECT_DOUBLE_EQ(cfg.scale, 1.0);

    cfg.apply_scale();  // idempotent once applied
    EXPECT_EQ(cfg.pretrain.epochs, 5);

    TrainConfig tiny;
    tiny.pretrain.epochs = 1;
    tiny.scale = 0.01;
    tiny.apply_scale();
    EXPECT_EQ(tiny.pretrain.epochs, 1);  // clamped at 1

    TrainConfig bad;
    bad.scale = -1.0;
    EXPECT_THROW(bad.apply_scale(), ConfigError);
}

TEST(Config, ValidationCatchesBadValues) {
    auto bad = [](auto mutate) {
        TrainConfig c;
        mutate(c);
        EXPECT_THROW(c.validate(), ConfigError);
    };
    bad([](TrainConfig& c) { c.arch = "vgg16"; });
    bad([](TrainConfig& c) { c.num_classes = 1; });
    bad([](TrainConfig& c) { c.width_mult = 0.0; });
    bad([](TrainConfig& c) { c.data.source = "imagenet"; });
    bad([](TrainConfig& c) { c.generation.label_policy = "whatever"; });
    bad([](TrainConfig& c) { c.pretrain.batch = 0; });
    bad([](TrainConfig& c) { c.generation.steps = 0; });
    bad([](TrainConfig& c) { c.quant.weight_bits = 1; });
    bad([](TrainConfig& c) { c.quant.act_bits = 9; });
    bad([](TrainConfig& c) { c.quant.calib_batches = 0; });
    bad([](TrainConfig& c) { c.ama.lambda_lower = 0.95; c.ama.lambda_upper = 0.75; });
    bad([](TrainConfig& c) { c.ama.margin = -0.5; });
    bad([](TrainConfig& c) { c.dkd.alpha = -1.0; });
    bad([](TrainConfig& c) { c.dkd.temperature = 0.0; });
    bad([](TrainConfig& c) { c.finetune.lambda = -0.1; });
    bad([](TrainConfig& c) { c.scale = 0.0; });
    EXPECT_NO_THROW(TrainConfig{}.validate());
}
