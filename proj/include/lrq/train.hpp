#pragma once

#include <filesystem>

#include "lrq/checkpoint.hpp"
#include "lrq/config.hpp"
#include "lrq/data.hpp"
#include "lrq/generator.hpp"
#include "lrq/losses.hpp"
#include "lrq/model.hpp"
#include "lrq/optim.hpp"

namespace lrq {

// ---------------------------------------------------------------------------
// JSON-lines training log. Every line carries the full loss-term schema;
// terms that do not apply to a stage are logged as 0. No timestamps: logs of
// identical runs are byte-identical.

class JsonlLogger {
public:
    JsonlLogger() = default;
    explicit JsonlLogger(const std::string& path) {
        if (!path.empty()) {
            out_.open(path);
            if (!out_) throw DataError("cannot open log file: " + path);
        }
    }

    void log_step(int64_t step, double bns, double ama, double ce, double tckd, double nckd,
                  double total) {
        if (!out_.is_open()) return;
        json j{{"step", step},   {"L_BNS", bns},   {"L_AMA", ama}, {"L_CE", ce},
               {"L_TCKD", tckd}, {"L_NCKD", nckd}, {"total", total}};
        out_ << j.dump() << "\n";
    }

    void flush() {
        if (out_.is_open()) out_.flush();
    }

private:
    std::ofstream out_;
};

namespace detail {

inline double tensor_scalar(const Tensor& t) {
    return t.defined() ? static_cast<double>(t.item()) : 0.0;
}

inline void check_finite_loss(const Tensor& loss, const std::string& stage, int64_t step) {
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw NumericError(stage + " loss is not finite at step " + std::to_string(step));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// evaluation

inline double evaluate(ModelGraph& model, const Dataset& ds, int64_t batch = 128) {
    if (ds.count < 1) throw DataError("evaluation dataset is empty");
    NoGradGuard guard;
    ForwardOptions opts;  // eval mode
    int64_t correct = 0;
    for (int64_t start = 0; start < ds.count; start += batch) {
        const int64_t n = std::min(batch, ds.count - start);
        auto logits = forward(model, ds.batch(start, n), opts).output;
        const auto& v = logits.values();
        const int64_t k = logits.dim(1);
        for (int64_t i = 0; i < n; ++i) {
            int64_t best = 0;
            for (int64_t j = 1; j < k; ++j)
                if (v[i * k + j] > v[i * k + best]) best = j;
            if (static_cast<int>(best) == ds.labels[start + i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.count);
}

// ---------------------------------------------------------------------------
// stage 0: full-precision pretraining (produces the frozen teacher)

inline void pretrain_fp(ModelGraph& model, Dataset train, const TrainConfig& cfg,
                        JsonlLogger* logger = nullptr) {
    const auto& pc = cfg.pretrain;
    if (train.count < pc.batch)
        throw DataError("pretraining dataset smaller than one batch");
    RandomEngine rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    SGDNesterov opt(model.params(), static_cast<float>(pc.lr),
                    static_cast<float>(pc.momentum), static_cast<float>(pc.weight_decay));

    ForwardOptions opts;
    opts.mode = BNMode::Train;
    opts.update_running = true;
    int64_t step = 0;
    for (int epoch = 0; epoch < pc.epochs; ++epoch) {
        train.shuffle(rng);
        opt.set_lr(step_decay_lr(static_cast<float>(pc.lr), pc.lr_decay_factor, epoch,
                                 pc.lr_decay_epochs));
        for (int64_t start = 0; start + pc.batch <= train.count; start += pc.batch, ++step) {
            auto images = train.batch(start, pc.batch);
            auto labels = train.batch_labels(start, pc.batch);
            auto logits = forward(model, images, opts).output;
            auto loss = ce_loss(logits, labels);
            detail::check_finite_loss(loss, "pretraining", step);
            opt.zero_grad();
            backward(loss);
            opt.step();
            if (logger)
                logger->log_step(step, 0, 0, detail::tensor_scalar(loss), 0, 0,
                                 detail::tensor_scalar(loss));
        }
    }
    model.bn_running_trained = true;
    pretrain_snapshot(model);
}

// ---------------------------------------------------------------------------
// stage 1: data generation (teacher frozen, generator trained by Adam)

inline void run_data_generation(ModelGraph& teacher, ModelGraph& generator,
                                const TrainConfig& cfg, JsonlLogger* logger = nullptr) {
    if (!teacher.bn_store_frozen)
        throw ConfigError("data generation requires a teacher with frozen statistics");
    const auto& gc = cfg.generation;
    const LabelPolicy policy =
        gc.label_policy == "balanced" ? LabelPolicy::Balanced : LabelPolicy::Uniform;

    AMAConfigT<float> ama_cfg{static_cast<float>(cfg.ama.margin),
                              static_cast<float>(cfg.ama.lambda_lower),
                              static_cast<float>(cfg.ama.lambda_upper)};
    RandomEngine rng(cfg.seed ^ 0xc2b2ae3d27d4eb4fULL);
    AdamT<float> opt(generator.params(), static_cast<float>(gc.lr),
                     static_cast<float>(gc.beta1), static_cast<float>(gc.beta2),
                     static_cast<float>(gc.eps));

    ForwardOptions teacher_opts;
    teacher_opts.mode = BNMode::Train;  // batch statistics, buffers untouched
    teacher_opts.capture = true;

    for (int step = 0; step < gc.steps; ++step) {
        opt.set_lr(step_decay_lr(static_cast<float>(gc.lr), gc.lr_decay_factor, step,
                                 gc.lr_decay_steps));
        auto batch = generate_batch(generator, gc.batch, policy, rng);
        auto result = forward(teacher, batch.images, teacher_opts, batch.labels);
        auto& capture = *result.capture;

        auto centers = class_centers(capture.features, batch.labels, teacher.num_classes);
        auto terms = generation_loss(capture, teacher.bn_store, capture.features, centers,
                                     batch.labels, ama_cfg, /*use_bns=*/true,
                                     /*use_ama=*/cfg.toggles.ama);
        detail::check_finite_loss(terms.total, "generation", step);
        opt.zero_grad();
        backward(terms.total);
        opt.step();
        if (logger)
            logger->log_step(step, detail::tensor_scalar(terms.bns),
                             detail::tensor_scalar(terms.ama), 0, 0, 0,
                             detail::tensor_scalar(terms.total));
    }
}

// ---------------------------------------------------------------------------
// calibration batches for a freshly wrapped student

inline void calibrate_with_generator(ModelGraph& student, ModelGraph& generator,
                                     const TrainConfig& cfg) {
    RandomEngine rng(cfg.seed ^ 0x165667b19e3779f9ULL);
    std::vector<Tensor> batches;
    for (int i = 0; i < cfg.quant.calib_batches; ++i) {
        NoGradGuard guard;
        auto b = generate_batch(generator, cfg.generation.batch, LabelPolicy::Balanced, rng);
        batches.push_back(b.images.detach());
    }
    calibrate_activations(student, batches);
}

// ---------------------------------------------------------------------------
// stage 2: fine-tuning the quantized student on synthetic data

inline void run_finetune(ModelGraph& student, ModelGraph& teacher, ModelGraph& generator,
                         const TrainConfig& cfg, JsonlLogger* logger = nullptr) {
    if (!teacher.bn_store_frozen)
        throw ConfigError("fine-tuning requires a teacher with frozen statistics");
    const auto& fc = cfg.finetune;
    DKDConfigT<float> dkd_cfg{static_cast<float>(cfg.dkd.alpha),
                              static_cast<float>(cfg.dkd.beta),
                              static_cast<float>(cfg.dkd.temperature)};
    RandomEngine rng(cfg.seed ^ 0x27d4eb2f165667c5ULL);
    SGDNesterov opt(student.params(), static_cast<float>(fc.lr),
                    static_cast<float>(fc.momentum), static_cast<float>(fc.weight_decay));

    ForwardOptions student_opts;
    student_opts.mode = BNMode::Train;
    student_opts.update_running = fc.update_bn;
    ForwardOptions teacher_opts;  // eval: frozen running statistics

    int64_t step = 0;
    for (int epoch = 0; epoch < fc.epochs; ++epoch) {
        opt.set_lr(step_decay_lr(static_cast<float>(fc.lr), fc.lr_decay_factor, epoch,
                                 fc.lr_decay_epochs));
        for (int b = 0; b < fc.batches_per_epoch; ++b, ++step) {
            Tensor images;
            std::vector<int> labels;
            Tensor fp_logits;
            {
                NoGradGuard guard;  // generator frozen; teacher targets constant
                auto batch = generate_batch(generator, fc.batch, LabelPolicy::Balanced, rng);
                images = batch.images.detach();
                labels = std::move(batch.labels);
                fp_logits = forward(teacher, images, teacher_opts).output.detach();
            }
            auto q_logits = forward(student, images, student_opts).output;
            auto terms = finetune_loss(q_logits, fp_logits, labels,
                                       static_cast<float>(fc.lambda), dkd_cfg,
                                       cfg.toggles.dkd);
            detail::check_finite_loss(terms.total, "fine-tuning", step);
            opt.zero_grad();
            backward(terms.total);
            opt.step();
            if (logger)
                logger->log_step(step, 0, 0, detail::tensor_scalar(terms.ce),
                                 detail::tensor_scalar(terms.tckd),
                                 detail::tensor_scalar(terms.nckd),
                                 detail::tensor_scalar(terms.total));
        }
    }
}

// ---------------------------------------------------------------------------
// dataset plumbing

inline Dataset load_train_dataset(const TrainConfig& cfg) {
    if (cfg.data.source == "toy") {
        ToyBlobsSpec spec;
        spec.num_classes = cfg.num_classes;
        spec.per_class = cfg.data.toy_per_class;
        return make_toy_blobs(spec, cfg.data.toy_seed);
    }
    namespace fs = std::filesystem;
    std::vector<std::string> paths;
    for (int i = 1; i <= 5; ++i) {
        auto p = fs::path(cfg.data.cifar_dir) / ("data_batch_" + std::to_string(i) + ".bin");
        if (fs::exists(p)) paths.push_back(p.string());
    }
    if (paths.empty())
        throw DataError("no data_batch_*.bin files under '" + cfg.data.cifar_dir + "'");
    return load_cifar10_bins(paths);
}

inline Dataset load_eval_dataset(const TrainConfig& cfg) {
    if (cfg.data.source == "toy") {
        ToyBlobsSpec spec;
        spec.num_classes = cfg.num_classes;
        spec.per_class = cfg.data.toy_eval_per_class;
        return make_toy_blobs(spec, cfg.data.toy_seed + 1);
    }
    namespace fs = std::filesystem;
    auto p = fs::path(cfg.data.cifar_dir) / "test_batch.bin";
    if (!fs::exists(p))
        throw DataError("missing test_batch.bin under '" + cfg.data.cifar_dir + "'");
    return load_cifar10_bin(p.string());
}

inline ModelGraph build_classifier(const TrainConfig& cfg) {
    return build_resnet_tiny<float>(
        cfg.arch == "resnet20" ? ResNetDepth::ResNet20 : ResNetDepth::ResNet8, cfg.num_classes,
        cfg.width_mult, cfg.seed);
}

inline GeneratorSpec generator_spec(const TrainConfig& cfg) {
    GeneratorSpec spec;
    spec.noise_dim = cfg.generator.noise_dim;
    spec.num_classes = cfg.num_classes;
    spec.base_channels = cfg.generator.base_channels;
    spec.image_size = cfg.generator.image_size;
    spec.lra_positions = cfg.toggles.lra ? cfg.generator.lra_positions : std::vector<int>{};
    spec.lra_kernel = cfg.generator.lra_kernel;
    spec.lra_dilation = cfg.generator.lra_dilation;
    spec.lra_sigmoid_gate = cfg.generator.lra_sigmoid_gate;
    return spec;
}

// ---------------------------------------------------------------------------
// compression stage (generation + wrap + calibrate + fine-tune) and the
// end-to-end pipeline

struct CompressionResult {
    double fp_top1 = 0;
    double q_top1_prefinetune = 0;
    double q_top1_postfinetune = 0;
    ModelGraph student;
    ModelGraph generator;
};

inline CompressionResult run_compression(ModelGraph& teacher, const Dataset& eval_ds,
                                         const TrainConfig& cfg,
                                         JsonlLogger* gen_log = nullptr,
                                         JsonlLogger* ft_log = nullptr) {
    CompressionResult r;
    r.fp_top1 = evaluate(teacher, eval_ds);

    r.generator = build_generator<float>(generator_spec(cfg), cfg.seed + 1);
    run_data_generation(teacher, r.generator, cfg, gen_log);

    WrapOptions wopts;
    wopts.per_channel_weights = cfg.quant.per_channel;
    wopts.scale_only_dequant = cfg.quant.scale_only_dequant;
    r.student = wrap_model(teacher, cfg.quant.weight_bits, cfg.quant.act_bits, wopts);
    calibrate_with_generator(r.student, r.generator, cfg);
    r.q_top1_prefinetune = evaluate(r.student, eval_ds);

    run_finetune(r.student, teacher, r.generator, cfg, ft_log);
    r.q_top1_postfinetune = evaluate(r.student, eval_ds);
    return r;
}

struct PipelineResult {
    double fp_top1 = 0;
    double q_top1_prefinetune = 0;
    double q_top1_postfinetune = 0;
    json metrics;
};

/// Full pipeline: pretrain (or load) the teacher, train the generator, wrap,
/// calibrate, fine-tune, evaluate. Writes checkpoints, logs, a quantization
/// report, a synthetic-sample dump, and metrics.json under out_dir.
inline PipelineResult run_pipeline(TrainConfig cfg, const std::string& out_dir,
                                   const std::string& teacher_checkpoint = "") {
    namespace fs = std::filesystem;
    cfg.apply_scale();
    cfg.validate();
    if (!out_dir.empty()) fs::create_directories(out_dir);
    auto path = [&](const char* name) { return (fs::path(out_dir) / name).string(); };

    Dataset eval_ds = load_eval_dataset(cfg);

    ModelGraph teacher;
    if (!teacher_checkpoint.empty()) {
        teacher = load_checkpoint(teacher_checkpoint);
        if (!teacher.bn_store_frozen)
            throw ConfigError("teacher checkpoint lacks frozen statistics; pretrain first");
    } else {
        teacher = build_classifier(cfg);
        Dataset train_ds = load_train_dataset(cfg);
        JsonlLogger pre_log(out_dir.empty() ? "" : path("pretrain_log.jsonl"));
        pretrain_fp(teacher, std::move(train_ds), cfg, &pre_log);
        if (!out_dir.empty()) save_checkpoint(path("teacher.ckpt"), teacher);
    }

    JsonlLogger gen_log(out_dir.empty() ? "" : path("generation_log.jsonl"));
    JsonlLogger ft_log(out_dir.empty() ? "" : path("finetune_log.jsonl"));
    auto r = run_compression(teacher, eval_ds, cfg, &gen_log, &ft_log);
    gen_log.flush();
    ft_log.flush();

    PipelineResult out;
    out.fp_top1 = r.fp_top1;
    out.q_top1_prefinetune = r.q_top1_prefinetune;
    out.q_top1_postfinetune = r.q_top1_postfinetune;
    out.metrics = json{{"fp_top1", r.fp_top1},
                       {"q_top1_prefinetune", r.q_top1_prefinetune},
                       {"q_top1_postfinetune", r.q_top1_postfinetune},
                       {"weight_bits", cfg.quant.weight_bits},
                       {"act_bits", cfg.quant.act_bits},
                       {"seed", cfg.seed},
                       {"arch", cfg.arch},
                       {"num_classes", cfg.num_classes},
                       {"config_hash", config_hash(cfg)}};

    if (!out_dir.empty()) {
        save_checkpoint(path("student.ckpt"), r.student);
        save_checkpoint(path("generator.ckpt"), r.generator);
        {
            std::ofstream qr(path("quant_report.json"));
            qr << quant_report(r.student).dump(2) << "\n";
        }
        {
            RandomEngine rng(cfg.seed ^ 0x85ebca77c2b2ae63ULL);
            NoGradGuard guard;
            auto sample = generate_batch(r.generator, std::min(64, cfg.generation.batch * 2),
                                         LabelPolicy::Balanced, rng);
            dump_synthetic(path("synthetic"), sample);
        }
        std::ofstream mf(path("metrics.json"));
        mf << out.metrics.dump(2) << "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// ablation harness

struct AblationArm {
    std::string name;
    bool lra = false;
    bool ama = false;
    bool dkd = false;
};

/// Full toggle grid: 8 arms, all_off first and all_on last.
inline std::vector<AblationArm> default_ablation_arms() {
    std::vector<AblationArm> arms;
    for (int mask = 0; mask < 8; ++mask) {
        AblationArm arm;
        arm.lra = mask & 1;
        arm.ama = mask & 2;
        arm.dkd = mask & 4;
        if (mask == 0)
            arm.name = "all_off";
        else if (mask == 7)
            arm.name = "all_on";
        else
            arm.name = std::string("lra") + (arm.lra ? "1" : "0") + "_ama" +
                       (arm.ama ? "1" : "0") + "_dkd" + (arm.dkd ? "1" : "0");
        arms.push_back(std::move(arm));
    }
    return arms;
}

/// Run every arm x seed with a shared pretrained teacher per seed; report
/// per-arm accuracies and the median over seeds.
inline json run_ablation(TrainConfig base, const std::vector<AblationArm>& arms,
                         const std::vector<uint64_t>& seeds, const std::string& out_dir = "") {
    namespace fs = std::filesystem;
    base.apply_scale();
    base.validate();
    if (!out_dir.empty()) fs::create_directories(out_dir);

    Dataset eval_ds = load_eval_dataset(base);
    json arms_out = json::array();
    std::vector<std::vector<double>> post(arms.size());

    for (uint64_t seed : seeds) {
        TrainConfig cfg = base;
        cfg.seed = seed;
        ModelGraph teacher = build_classifier(cfg);
        Dataset train_ds = load_train_dataset(cfg);
        pretrain_fp(teacher, std::move(train_ds), cfg);

        for (size_t a = 0; a < arms.size(); ++a) {
            TrainConfig arm_cfg = cfg;
            arm_cfg.toggles.lra = arms[a].lra;
            arm_cfg.toggles.ama = arms[a].ama;
            arm_cfg.toggles.dkd = arms[a].dkd;
            auto r = run_compression(teacher, eval_ds, arm_cfg);
            post[a].push_back(r.q_top1_postfinetune);
        }
    }

    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    for (size_t a = 0; a < arms.size(); ++a) {
        arms_out.push_back(json{{"name", arms[a].name},
                                {"lra", arms[a].lra},
                                {"ama", arms[a].ama},
                                {"dkd", arms[a].dkd},
                                {"q_top1_postfinetune", post[a]},
                                {"median", median(post[a])}});
    }
    json out{{"seeds", seeds}, {"arms", std::move(arms_out)}};
    if (!out_dir.empty()) {
        std::ofstream f((fs::path(out_dir) / "ablation.json").string());
        f << out.dump(2) << "\n";
    }
    return out;
}

}  // namespace lrq
