#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <lrq/lrq.hpp>

namespace fs = std::filesystem;
using namespace lrq;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_root;
    std::string run_name;
    int64_t seed = -1;
    int wbits = 0;
    int abits = 0;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_bits) {
    cmd->add_option("--config", a.config_path, "JSON config file");
    cmd->add_option("--set", a.overrides, "config override key.path=value (repeatable)");
    cmd->add_option("--out", a.out_root, "output root (default: $LRQ_OUTPUT_ROOT or ./runs)");
    cmd->add_option("--run", a.run_name, "run directory name under the output root");
    cmd->add_option("--seed", a.seed, "override the config seed");
    if (with_bits) {
        cmd->add_option("--wbits", a.wbits, "weight bit-width (2-8)");
        cmd->add_option("--abits", a.abits, "activation bit-width (2-8)");
    }
}

// Flag/override-adjusted config; the hash of this is what outputs record.
TrainConfig make_config(const CommonArgs& a) {
    TrainConfig cfg = a.config_path.empty() ? TrainConfig{} : load_config(a.config_path);
    for (const auto& ov : a.overrides) apply_override(cfg, ov);
    if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
    if (a.wbits > 0) cfg.quant.weight_bits = a.wbits;
    if (a.abits > 0) cfg.quant.act_bits = a.abits;
    cfg.apply_scale();
    cfg.validate();
    return cfg;
}

std::string resolve_out_root(const CommonArgs& a) {
    if (!a.out_root.empty()) return a.out_root;
    if (const char* env = std::getenv("LRQ_OUTPUT_ROOT"); env && *env) return env;
    return "runs";
}

std::string run_dir(const CommonArgs& a, const char* fallback) {
    auto dir = fs::path(resolve_out_root(a)) / (a.run_name.empty() ? fallback : a.run_name);
    fs::create_directories(dir);
    return dir.string();
}

ModelGraph load_ckpt(const std::string& path, const char* producer) {
    if (path.empty() || !fs::exists(path))
        throw DataError("checkpoint not found: '" + path + "'; produce it with the `" +
                        producer + "` command");
    return load_checkpoint(path);
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << j.dump(2) << "\n";
}

std::string ablation_table(const json& out) {
    char line[160];
    std::string t;
    std::snprintf(line, sizeof line, "%-18s %-4s %-4s %-4s %12s\n", "arm", "lra", "ama", "dkd",
                  "median_top1");
    t += line;
    for (const auto& arm : out.at("arms")) {
        std::snprintf(line, sizeof line, "%-18s %-4s %-4s %-4s %12.4f\n",
                      arm.at("name").get<std::string>().c_str(),
                      arm.at("lra").get<bool>() ? "on" : "off",
                      arm.at("ama").get<bool>() ? "on" : "off",
                      arm.at("dkd").get<bool>() ? "on" : "off",
                      arm.at("median").get<double>());
        t += line;
    }
    return t;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Zero-shot quantization toolkit: synthetic-data generation, "
                 "quantization, and fine-tuning for small CNN classifiers"};
    app.require_subcommand(1);

    CommonArgs pre_args, gen_args, quant_args, ft_args, eval_args, pipe_args, abl_args;
    std::string gen_teacher, quant_teacher, quant_generator;
    std::string ft_teacher, ft_generator, ft_student;
    std::string eval_ckpt, pipe_teacher;
    std::vector<uint64_t> abl_seeds;
    bool abl_endpoints = false;

    auto* pre = app.add_subcommand("pretrain", "train the full-precision teacher");
    add_common(pre, pre_args, false);
    pre->callback([&] {
        TrainConfig cfg = make_config(pre_args);
        auto dir = run_dir(pre_args, "pretrain");
        auto teacher = build_classifier(cfg);
        Dataset train_ds = load_train_dataset(cfg);
        JsonlLogger log(dir + "/pretrain_log.jsonl");
        pretrain_fp(teacher, std::move(train_ds), cfg, &log);
        save_checkpoint(dir + "/teacher.ckpt", teacher);
        const double fp = evaluate(teacher, load_eval_dataset(cfg));
        write_json_file(dir + "/metrics.json", json{{"fp_top1", fp},
                                                    {"seed", cfg.seed},
                                                    {"arch", cfg.arch},
                                                    {"config_hash", config_hash(cfg)}});
        std::printf("fp_top1 %.4f\n", fp);
        std::printf("artifacts %s\n", dir.c_str());
    });

    auto* gen = app.add_subcommand("generate", "train the conditional generator against a "
                                               "frozen teacher and dump synthetic samples");
    add_common(gen, gen_args, false);
    gen->add_option("--teacher", gen_teacher, "teacher checkpoint")->required();
    gen->callback([&] {
        TrainConfig cfg = make_config(gen_args);
        auto dir = run_dir(gen_args, "generate");
        auto teacher = load_ckpt(gen_teacher, "pretrain");
        auto generator = build_generator<float>(generator_spec(cfg), cfg.seed + 1);
        JsonlLogger log(dir + "/generation_log.jsonl");
        run_data_generation(teacher, generator, cfg, &log);
        save_checkpoint(dir + "/generator.ckpt", generator);
        {
            RandomEngine rng(cfg.seed ^ 0x85ebca77c2b2ae63ULL);
            NoGradGuard guard;
            auto sample = generate_batch(generator, std::min(64, cfg.generation.batch * 2),
                                         LabelPolicy::Balanced, rng);
            dump_synthetic(dir + "/synthetic", sample);
        }
        write_json_file(dir + "/metrics.json",
                        json{{"seed", cfg.seed}, {"config_hash", config_hash(cfg)}});
        std::printf("artifacts %s\n", dir.c_str());
    });

    auto* quant = app.add_subcommand("quantize", "wrap a teacher with fake-quantization and "
                                                 "calibrate activation ranges");
    add_common(quant, quant_args, true);
    quant->add_option("--teacher", quant_teacher, "teacher checkpoint")->required();
    quant->add_option("--generator", quant_generator, "generator checkpoint")->required();
    quant->callback([&] {
        TrainConfig cfg = make_config(quant_args);
        auto dir = run_dir(quant_args, "quantize");
        auto teacher = load_ckpt(quant_teacher, "pretrain");
        auto generator = load_ckpt(quant_generator, "generate");
        WrapOptions wopts;
        wopts.per_channel_weights = cfg.quant.per_channel;
        wopts.scale_only_dequant = cfg.quant.scale_only_dequant;
        auto student = wrap_model(teacher, cfg.quant.weight_bits, cfg.quant.act_bits, wopts);
        calibrate_with_generator(student, generator, cfg);
        const double q_pre = evaluate(student, load_eval_dataset(cfg));
        save_checkpoint(dir + "/student_init.ckpt", student);
        write_json_file(dir + "/quant_report.json", quant_report(student));
        write_json_file(dir + "/metrics.json", json{{"q_top1_prefinetune", q_pre},
                                                    {"weight_bits", cfg.quant.weight_bits},
                                                    {"act_bits", cfg.quant.act_bits},
                                                    {"seed", cfg.seed},
                                                    {"config_hash", config_hash(cfg)}});
        std::printf("q_top1_prefinetune %.4f\n", q_pre);
        std::printf("artifacts %s\n", dir.c_str());
    });

    auto* ft = app.add_subcommand("finetune", "fine-tune a calibrated student on synthetic "
                                              "data with distillation");
    add_common(ft, ft_args, true);
    ft->add_option("--student", ft_student, "calibrated student checkpoint")->required();
    ft->add_option("--teacher", ft_teacher, "teacher checkpoint")->required();
    ft->add_option("--generator", ft_generator, "generator checkpoint")->required();
    ft->callback([&] {
        TrainConfig cfg = make_config(ft_args);
        auto dir = run_dir(ft_args, "finetune");
        auto student = load_ckpt(ft_student, "quantize");
        auto teacher = load_ckpt(ft_teacher, "pretrain");
        auto generator = load_ckpt(ft_generator, "generate");
        JsonlLogger log(dir + "/finetune_log.jsonl");
        run_finetune(student, teacher, generator, cfg, &log);
        const double q_post = evaluate(student, load_eval_dataset(cfg));
        save_checkpoint(dir + "/student.ckpt", student);
        write_json_file(dir + "/metrics.json", json{{"q_top1_postfinetune", q_post},
                                                    {"weight_bits", student.weight_bits},
                                                    {"act_bits", student.act_bits},
                                                    {"seed", cfg.seed},
                                                    {"config_hash", config_hash(cfg)}});
        std::printf("q_top1_postfinetune %.4f\n", q_post);
        std::printf("artifacts %s\n", dir.c_str());
    });

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
    add_common(ev, eval_args, false);
    ev->add_option("--ckpt", eval_ckpt, "model checkpoint")->required();
    ev->callback([&] {
        TrainConfig cfg = make_config(eval_args);
        auto dir = run_dir(eval_args, "eval");
        auto model = load_ckpt(eval_ckpt, "pretrain`, `quantize`, or `finetune");
        const double top1 = evaluate(model, load_eval_dataset(cfg));
        write_json_file(dir + "/eval.json", json{{"top1", top1},
                                                 {"ckpt", eval_ckpt},
                                                 {"quantized", model.quantized},
                                                 {"config_hash", config_hash(cfg)}});
        std::printf("top1 %.4f\n", top1);
    });

    auto* pipe = app.add_subcommand("pipeline", "run pretrain -> generate -> quantize -> "
                                                "finetune -> eval end to end");
    add_common(pipe, pipe_args, true);
    pipe->add_option("--teacher", pipe_teacher, "reuse an existing teacher checkpoint");
    pipe->callback([&] {
        TrainConfig cfg = make_config(pipe_args);
        auto dir = run_dir(pipe_args, "pipeline");
        if (!pipe_teacher.empty() && !fs::exists(pipe_teacher))
            throw DataError("checkpoint not found: '" + pipe_teacher +
                            "'; produce it with the `pretrain` command");
        auto r = run_pipeline(cfg, dir, pipe_teacher);
        std::printf("fp_top1 %.4f\n", r.fp_top1);
        std::printf("q_top1_prefinetune %.4f\n", r.q_top1_prefinetune);
        std::printf("q_top1_postfinetune %.4f\n", r.q_top1_postfinetune);
        std::printf("artifacts %s\n", dir.c_str());
    });

    auto* abl = app.add_subcommand("ablate", "run the component-toggle grid and report "
                                             "per-arm accuracy");
    add_common(abl, abl_args, true);
    abl->add_option("--seeds", abl_seeds, "seeds to run per arm (default: config seed)");
    abl->add_flag("--endpoints", abl_endpoints,
                  "run only the all-off and all-on arms instead of the full 8-arm grid");
    abl->callback([&] {
        TrainConfig cfg = make_config(abl_args);
        auto dir = run_dir(abl_args, "ablate");
        std::vector<uint64_t> seeds = abl_seeds.empty() ? std::vector<uint64_t>{cfg.seed}
                                                        : abl_seeds;
        auto arms = default_ablation_arms();
        if (abl_endpoints) arms = {arms.front(), arms.back()};
        auto out = run_ablation(cfg, arms, seeds, dir);
        auto table = ablation_table(out);
        std::ofstream tf(dir + "/ablation.txt");
        tf << table;
        std::fputs(table.c_str(), stdout);
        std::printf("artifacts %s\n", dir.c_str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
