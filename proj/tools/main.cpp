// disendiff command-line driver: pretrain | personalize | sample |
// inspect-attn | gradcheck | eval | ablate.  Every command that writes
// outputs also writes a manifest.txt next to them.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "disendiff/checkpoint.hpp"
#include "disendiff/config.hpp"
#include "disendiff/image_io.hpp"
#include "disendiff/personalization.hpp"
#include "disendiff/scene.hpp"

namespace fs = std::filesystem;
using namespace disendiff;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const size_t a = item.find_first_not_of(" \t");
        const size_t b = item.find_last_not_of(" \t");
        if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
    }
    return out;
}

void apply_precision_env() {
    if (const char* p = std::getenv("DISENDIFF_PRECISION")) {
        if (std::string(p) == "f64") set_precision(Precision::f64);
        else if (std::string(p) == "f32") set_precision(Precision::f32);
    }
}

KeyValueFile config_snapshot(const TrainConfig& cfg) {
    KeyValueFile kv;
    kv.set("personalize_steps", cfg.personalize_steps);
    kv.set("batch_size", cfg.batch_size);
    kv.set("lr", cfg.lr);
    kv.set("reg_set_size", cfg.reg_set_size);
    kv.set("pretrain_steps", cfg.pretrain_steps);
    kv.set("pretrain_lr", cfg.pretrain_lr);
    kv.set("seed", static_cast<int>(cfg.seed));
    kv.set("timesteps", cfg.timesteps);
    kv.set("cond_dropout", cfg.cond_dropout);
    kv.set("optimizer", cfg.optimizer);
    kv.set("lambda_bind", cfg.calibration.lambda_bind);
    kv.set("lambda_ss", cfg.calibration.lambda_ss);
    kv.set("gaussian_kernel", cfg.calibration.gaussian_kernel);
    kv.set("gaussian_sigma", cfg.calibration.gaussian_sigma);
    kv.set("suppression_count", cfg.calibration.suppression_count);
    kv.set("bind_enabled", cfg.calibration.bind_enabled);
    kv.set("ss_enabled", cfg.calibration.ss_enabled);
    kv.set("separate_only", cfg.calibration.separate_only);
    kv.set("gaussian_enabled", cfg.calibration.gaussian_enabled);
    kv.set("all_scales", cfg.calibration.all_scales);
    kv.set("resolution", cfg.calibration.resolution);
    return kv;
}

struct AblationFlags {
    bool no_bind = false, no_ss = false, separate_only = false;
    bool no_suppress = false, double_suppress = false, no_gaussian = false;
    bool all_scales = false, train_wq = false, no_calibration = false;

    void add_to(CLI::App& app) {
        app.add_flag("--no-bind", no_bind, "drop the bind loss");
        app.add_flag("--no-ss", no_ss, "drop the separate-and-strengthen loss");
        app.add_flag("--separate-only", separate_only,
                     "replace s&s by the plain overlap loss");
        app.add_flag("--no-suppress", no_suppress, "disable suppression");
        app.add_flag("--double-suppress", double_suppress, "apply suppression twice");
        app.add_flag("--no-gaussian", no_gaussian, "disable the Gaussian filter");
        app.add_flag("--all-scales", all_scales, "average maps over every resolution");
        app.add_flag("--train-wq", train_wq, "also train the query projections");
        app.add_flag("--no-calibration", no_calibration,
                     "baseline: drop both calibration losses");
    }

    void apply(CalibrationConfig& c) const {
        if (no_bind || no_calibration) c.bind_enabled = false;
        if (no_ss || no_calibration) c.ss_enabled = false;
        if (separate_only) c.separate_only = true;
        if (no_suppress) c.suppression_count = 0;
        if (double_suppress) c.suppression_count = 2;
        if (no_gaussian) c.gaussian_enabled = false;
        if (all_scales) c.all_scales = true;
    }
};

PersonalizationTask load_task(const Model& model, const std::string& target_path,
                              const std::string& classes_csv,
                              const std::string& modifiers_csv) {
    PersonalizationTask task;
    task.target_image = read_ppm(target_path);
    task.classes = split_csv(classes_csv);
    task.modifiers = split_csv(modifiers_csv);
    task.validate(model.vocab);
    return task;
}

EvalTask to_eval_task(const PersonalizationTask& task) {
    EvalTask et;
    et.classes = task.classes;
    et.modifiers = task.modifiers;
    // target colors from the oracle detector on the target image
    const auto dets = detect_concepts(task.target_image);
    for (const auto& cls : task.classes) {
        std::array<double, 3> color = {0.5, 0.5, 0.5};
        for (const auto& d : dets)
            if (d.shape == shape_from_name(cls)) color = d.mean_color;
        et.target_colors.push_back(color);
    }
    return et;
}

MetricsReport run_eval(const Model& model, const PersonalizationTask& task,
                       int n_samples, unsigned seed, int sample_steps,
                       double guidance) {
    SampleFn sample = [&](const std::string& prompt, unsigned s) {
        return sample_image(model, prompt, sample_steps, guidance, s);
    };
    ClassMapFn class_map = [&](const Tensor& image, const std::string& prompt,
                               int concept_index) {
        return class_token_map(model, image, prompt, concept_index);
    };
    return eval_disentanglement(sample, class_map, to_eval_task(task), n_samples, seed);
}

int cmd_pretrain(const std::string& out_dir, TrainConfig cfg) {
    fs::create_directories(out_dir);
    cfg.log_path = out_dir + "/pretrain_log.csv";
    Model model(DenoiserConfig{}, cfg.seed);
    const double val = pretrain(model, cfg);
    const std::string ckpt = out_dir + "/model.dsdf";
    save_checkpoint(ckpt, model);
    KeyValueFile kv = config_snapshot(cfg);
    kv.set("command", "pretrain");
    kv.set("validation_mse", val);
    write_manifest(out_dir, kv, {});
    std::cout << "pretrained " << cfg.pretrain_steps << " steps, validation mse "
              << val << "\n"
              << "checkpoint: " << ckpt << "\n";
    return 0;
}

int cmd_personalize(const std::string& ckpt, const std::string& target,
                    const std::string& classes, const std::string& modifiers,
                    const std::string& out_dir, TrainConfig cfg,
                    const AblationFlags& flags) {
    flags.apply(cfg.calibration);
    fs::create_directories(out_dir);
    cfg.log_path = out_dir + "/personalize_log.csv";
    Model model;
    load_checkpoint(ckpt, model);
    PersonalizationTask task = load_task(model, target, classes, modifiers);
    personalize(model, task, cfg, flags.train_wq);
    const std::string out_ckpt = out_dir + "/personalized.dsdf";
    save_checkpoint(out_ckpt, model);
    KeyValueFile kv = config_snapshot(cfg);
    kv.set("command", "personalize");
    kv.set("classes", classes);
    kv.set("modifiers", modifiers);
    kv.set("train_wq", flags.train_wq);
    write_manifest(out_dir, kv, {{"checkpoint", ckpt}, {"target", target}});
    std::cout << "personalized " << cfg.personalize_steps << " steps\n"
              << "checkpoint: " << out_ckpt << "\n";
    return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& prompt, unsigned seed,
               int steps, double guidance, int count, const std::string& out) {
    Model model;
    load_checkpoint(ckpt, model);
    const fs::path out_path(out);
    fs::create_directories(out_path.parent_path().empty() ? "."
                                                          : out_path.parent_path().string());
    for (int i = 0; i < count; ++i) {
        Tensor img = sample_image(model, prompt, steps, guidance, seed + static_cast<unsigned>(i));
        std::string path = out;
        if (count > 1) {
            const fs::path p(out);
            path = (p.parent_path() / (p.stem().string() + "_" + std::to_string(i) +
                                       p.extension().string()))
                       .string();
        }
        write_ppm(path, img);
        std::cout << path << "\n";
    }
    KeyValueFile kv;
    kv.set("command", "sample");
    kv.set("prompt", prompt);
    kv.set("seed", static_cast<int>(seed));
    kv.set("steps", steps);
    kv.set("guidance", guidance);
    kv.set("count", count);
    const std::string dir =
        out_path.parent_path().empty() ? "." : out_path.parent_path().string();
    write_manifest(dir, kv, {{"checkpoint", ckpt}});
    return 0;
}

int cmd_inspect_attn(const std::string& ckpt, const std::string& image_path,
                     const std::string& prompt, int concept_index,
                     const std::string& out) {
    Model model;
    load_checkpoint(ckpt, model);
    Tensor image = read_ppm(image_path);
    Tensor map = class_token_map(model, image, prompt, concept_index);
    write_pgm_scaled(out, map);
    std::cout << out << "\n";
    KeyValueFile kv;
    kv.set("command", "inspect-attn");
    kv.set("prompt", prompt);
    kv.set("concept_index", concept_index);
    const fs::path p(out);
    write_manifest(p.parent_path().empty() ? "." : p.parent_path().string(), kv,
                   {{"checkpoint", ckpt}, {"image", image_path}});
    return 0;
}

// Central-difference checks of every differentiable loss in the calibration
// stack; mirrors the acceptance contract (max relative error < 1e-4 in f64).
int cmd_gradcheck(int seeds) {
    if (!std::getenv("DISENDIFF_PRECISION")) set_precision(Precision::f64);
    std::mt19937 rng(42);
    auto rand_map = [&](int h, int w) {
        Tensor m = gaussian_like({h, w}, rng);
        return relu(add_scalar(m, 1.0));
    };
    struct Case {
        std::string name;
        std::function<double(std::mt19937&)> run;
    };
    auto pairwise = [&](const std::function<Tensor(const Tensor&, const Tensor&)>& f) {
        return [&, f](std::mt19937& r) {
            Tensor a = gaussian_like({8, 8}, r);
            Tensor b = relu(add_scalar(gaussian_like({8, 8}, r), 1.0));
            return gradcheck([&](const Tensor& x) { return f(x, b); }, a.clone());
        };
    };
    std::vector<Case> cases = {
        {"l_bind", pairwise([](const Tensor& a, const Tensor& b) {
             return l_bind(relu(a), b);
         })},
        {"l_separate", pairwise([](const Tensor& a, const Tensor& b) {
             return l_separate(relu(a), b);
         })},
        {"l_ss", pairwise([](const Tensor& a, const Tensor& b) {
             return l_ss(relu(a), b);
         })},
        {"soft_iou", pairwise([](const Tensor& a, const Tensor& b) {
             return soft_iou(relu(a), b);
         })},
        {"gaussian_smooth",
         [&](std::mt19937& r) {
             Tensor m = rand_map(8, 8);
             return gradcheck(
                 [](const Tensor& x) { return sum(gaussian_smooth(x, 3, 1.0)); },
                 m.clone());
         }},
        {"suppress",
         [&](std::mt19937& r) {
             Tensor m = gaussian_like({8, 8}, r);
             return gradcheck([](const Tensor& x) { return sum(suppress(x)); },
                              m.clone());
         }},
        {"base_loss",
         [&](std::mt19937& r) {
             Tensor eps = gaussian_like({3, 4, 4}, r);
             Tensor pred = gaussian_like({3, 4, 4}, r);
             return gradcheck(
                 [&](const Tensor& x) { return base_loss(eps, x); }, pred.clone());
         }},
        {"cross_attention",
         [&](std::mt19937& r) {
             Tensor phi = gaussian_like({4, 4, 4}, r);
             Tensor tau = gaussian_like({8, 6}, r);
             Tensor wq = gaussian_like({4, 4}, r);
             Tensor wk = gaussian_like({6, 4}, r);
             Tensor wv = gaussian_like({6, 4}, r);
             return gradcheck(
                 [&](const Tensor& x) {
                     auto o = cross_attention(phi, tau, wq, x, wv, 2);
                     return sum(mul(o.out, o.out));
                 },
                 wk.clone());
         }},
    };
    bool ok = true;
    for (const auto& c : cases) {
        double worst = 0;
        std::mt19937 r(7);
        for (int s = 0; s < seeds; ++s) worst = std::max(worst, c.run(r));
        const bool pass = worst < 1e-4;
        ok = ok && pass;
        std::cout << c.name << ": max relative error " << worst << (pass ? "" : "  FAIL")
                  << "\n";
    }
    return ok ? 0 : 1;
}

int cmd_eval(const std::string& ckpt, const std::string& target,
             const std::string& classes, const std::string& modifiers,
             const std::string& out_dir, int n_samples, unsigned seed,
             int sample_steps, double guidance) {
    Model model;
    load_checkpoint(ckpt, model);
    PersonalizationTask task = load_task(model, target, classes, modifiers);
    MetricsReport report = run_eval(model, task, n_samples, seed, sample_steps, guidance);
    fs::create_directories(out_dir);
    report.save_csv(out_dir + "/metrics.csv");
    std::ofstream(out_dir + "/summary.txt") << report.summary();
    std::cout << report.summary();
    KeyValueFile kv;
    kv.set("command", "eval");
    kv.set("classes", classes);
    kv.set("modifiers", modifiers);
    kv.set("samples", n_samples);
    kv.set("seed", static_cast<int>(seed));
    write_manifest(out_dir, kv, {{"checkpoint", ckpt}, {"target", target}});
    return 0;
}

int cmd_ablate(const std::string& ckpt, const std::string& target,
               const std::string& classes, const std::string& modifiers,
               const std::string& out_dir, TrainConfig base_cfg, int n_samples,
               bool with_all_scales, bool with_train_wq) {
    struct Variant {
        std::string name;
        AblationFlags flags;
    };
    std::vector<Variant> variants(7);
    variants[0].name = "full";
    variants[1].name = "no-bind";
    variants[1].flags.no_bind = true;
    variants[2].name = "no-ss";
    variants[2].flags.no_ss = true;
    variants[3].name = "separate-only";
    variants[3].flags.separate_only = true;
    variants[4].name = "no-suppress";
    variants[4].flags.no_suppress = true;
    variants[5].name = "double-suppress";
    variants[5].flags.double_suppress = true;
    variants[6].name = "no-gaussian";
    variants[6].flags.no_gaussian = true;
    if (with_all_scales) {
        Variant v;
        v.name = "all-scales";
        v.flags.all_scales = true;
        variants.push_back(v);
    }
    if (with_train_wq) {
        Variant v;
        v.name = "train-wq";
        v.flags.train_wq = true;
        variants.push_back(v);
    }

    fs::create_directories(out_dir);
    std::ofstream csv(out_dir + "/ablation.csv");
    csv << "variant,family,prompt,presence,leakage,color_error,attn_iou,samples\n";
    for (const auto& v : variants) {
        Model model;
        load_checkpoint(ckpt, model);
        PersonalizationTask task = load_task(model, target, classes, modifiers);
        TrainConfig cfg = base_cfg;
        v.flags.apply(cfg.calibration);
        personalize(model, task, cfg, v.flags.train_wq);
        MetricsReport report =
            run_eval(model, task, n_samples, base_cfg.seed, 50, 6.0);
        for (const auto& row : report.rows)
            csv << v.name << "," << row.family << ",\"" << row.prompt << "\","
                << row.presence << "," << row.leakage << "," << row.color_error << ","
                << row.attn_iou << "," << row.samples << "\n";
        std::cerr << "ablate: " << v.name << " done\n";
    }
    KeyValueFile kv = config_snapshot(base_cfg);
    kv.set("command", "ablate");
    kv.set("classes", classes);
    kv.set("modifiers", modifiers);
    kv.set("samples", n_samples);
    write_manifest(out_dir, kv, {{"checkpoint", ckpt}, {"target", target}});
    std::cout << out_dir << "/ablation.csv\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    apply_precision_env();
    CLI::App app{"attention-calibrated multi-concept personalization for a toy "
                 "text-to-image diffusion model"};
    app.require_subcommand(1);

    TrainConfig cfg;
    std::string ckpt, target, classes, modifiers, out, prompt, image_path;
    unsigned seed = 0;
    int steps = 50, count = 1, n_samples = 16, concept_index = 1, gc_seeds = 10;
    double guidance = 6.0;
    AblationFlags flags;

    auto add_train_opts = [&](CLI::App* c) {
        c->add_option("--lr", cfg.lr, "personalization learning rate");
        c->add_option("--batch", cfg.batch_size, "batch size");
        c->add_option("--optimizer", cfg.optimizer, "adam or sgd");
        c->add_option("--seed", cfg.seed, "rng seed");
        c->add_option("--timesteps", cfg.timesteps, "noise schedule length");
    };

    auto* p_pre = app.add_subcommand("pretrain", "pretrain on synthetic scenes");
    p_pre->add_option("--out", out, "output directory")->required();
    p_pre->add_option("--steps", cfg.pretrain_steps, "pretraining steps");
    p_pre->add_option("--pretrain-lr", cfg.pretrain_lr, "pretraining learning rate");
    add_train_opts(p_pre);

    auto* p_per = app.add_subcommand("personalize", "single-image personalization");
    p_per->add_option("--checkpoint", ckpt, "pretrained checkpoint")->required();
    p_per->add_option("--target", target, "target PPM image")->required();
    p_per->add_option("--classes", classes, "comma-separated class nouns")->required();
    p_per->add_option("--modifiers", modifiers, "comma-separated modifier tokens")
        ->required();
    p_per->add_option("--out", out, "output directory")->required();
    p_per->add_option("--steps", cfg.personalize_steps, "personalization steps");
    p_per->add_option("--reg-size", cfg.reg_set_size, "regularization set size");
    add_train_opts(p_per);
    flags.add_to(*p_per);

    auto* p_sam = app.add_subcommand("sample", "DDIM sampling to PPM");
    p_sam->add_option("--checkpoint", ckpt, "checkpoint")->required();
    p_sam->add_option("--prompt", prompt, "text prompt")->required();
    p_sam->add_option("--out", out, "output PPM path")->required();
    p_sam->add_option("--seed", seed, "rng seed");
    p_sam->add_option("--steps", steps, "DDIM steps");
    p_sam->add_option("--guidance", guidance, "classifier-free guidance scale");
    p_sam->add_option("--count", count, "number of samples (seed increments)");

    auto* p_ins = app.add_subcommand("inspect-attn", "dump a class-token map as PGM");
    p_ins->add_option("--checkpoint", ckpt, "checkpoint")->required();
    p_ins->add_option("--image", image_path, "input PPM image")->required();
    p_ins->add_option("--prompt", prompt, "text prompt")->required();
    p_ins->add_option("--concept", concept_index, "1-based concept index");
    p_ins->add_option("--out", out, "output PGM path")->required();

    auto* p_gc = app.add_subcommand("gradcheck", "finite-difference loss gradients");
    p_gc->add_option("--seeds", gc_seeds, "random draws per loss");

    auto* p_ev = app.add_subcommand("eval", "disentanglement metrics");
    p_ev->add_option("--checkpoint", ckpt, "personalized checkpoint")->required();
    p_ev->add_option("--target", target, "target PPM image")->required();
    p_ev->add_option("--classes", classes, "comma-separated class nouns")->required();
    p_ev->add_option("--modifiers", modifiers, "comma-separated modifier tokens")
        ->required();
    p_ev->add_option("--out", out, "output directory")->required();
    p_ev->add_option("--samples", n_samples, "samples per prompt family");
    p_ev->add_option("--seed", seed, "rng seed");
    p_ev->add_option("--steps", steps, "DDIM steps");
    p_ev->add_option("--guidance", guidance, "guidance scale");

    bool abl_all_scales = false, abl_train_wq = false;
    auto* p_ab = app.add_subcommand("ablate", "run the 7-variant ablation matrix");
    p_ab->add_option("--checkpoint", ckpt, "pretrained checkpoint")->required();
    p_ab->add_option("--target", target, "target PPM image")->required();
    p_ab->add_option("--classes", classes, "comma-separated class nouns")->required();
    p_ab->add_option("--modifiers", modifiers, "comma-separated modifier tokens")
        ->required();
    p_ab->add_option("--out", out, "output directory")->required();
    p_ab->add_option("--steps", cfg.personalize_steps, "personalization steps");
    p_ab->add_option("--reg-size", cfg.reg_set_size, "regularization set size");
    p_ab->add_option("--samples", n_samples, "samples per prompt family");
    p_ab->add_flag("--all-scales", abl_all_scales, "add the all-scales variant");
    p_ab->add_flag("--train-wq", abl_train_wq, "add the train-wq variant");
    add_train_opts(p_ab);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) ? 2 : 0;
    }

    try {
        if (p_pre->parsed()) return cmd_pretrain(out, cfg);
        if (p_per->parsed())
            return cmd_personalize(ckpt, target, classes, modifiers, out, cfg, flags);
        if (p_sam->parsed())
            return cmd_sample(ckpt, prompt, seed, steps, guidance, count, out);
        if (p_ins->parsed())
            return cmd_inspect_attn(ckpt, image_path, prompt, concept_index, out);
        if (p_gc->parsed()) return cmd_gradcheck(gc_seeds);
        if (p_ev->parsed())
            return cmd_eval(ckpt, target, classes, modifiers, out, n_samples, seed,
                            steps, guidance);
        if (p_ab->parsed())
            return cmd_ablate(ckpt, target, classes, modifiers, out, cfg, n_samples,
                              abl_all_scales, abl_train_wq);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
