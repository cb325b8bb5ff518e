// Acceptance suite: one test case per acceptance criterion, each printing a
// single PASS/FAIL line.  The experimental criteria (6-9) share a pretrained
// model and a set of personalization runs cached under ./acceptance_cache so
// reruns are cheap; all artifacts are deterministic, so caching is safe.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "disendiff/calibration.hpp"
#include "disendiff/checkpoint.hpp"
#include "disendiff/config.hpp"
#include "disendiff/image_io.hpp"
#include "disendiff/personalization.hpp"
#include "disendiff/scene.hpp"

using namespace disendiff;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

// ---- pinned tolerances and experiment parameters ----------------------------------

constexpr double kGradTol = 1e-4;        // criterion 1
constexpr int kGradSeeds = 100;          // criterion 1
constexpr double kGradBudgetSec = 120;   // criterion 1
constexpr double kUlps = 4;              // criterion 2: |err| <= kUlps * eps
constexpr double kRowSumTol = 1e-5;      // criterion 4
constexpr double kMassTol = 1e-5;        // criterion 4
constexpr double kAlignMargin = 0.1;     // criterion 7
constexpr int kLeakSeedsNeeded = 4;      // criterion 8: full < baseline on >= 4 of 5
constexpr double kDetectorAcc = 0.98;    // criterion 10
constexpr int kNumSeeds = 5;             // criteria 7-9
constexpr int kEvalSamples = 16;         // criterion 8 (16 samples per prompt)

// Pretraining configuration for the cached backbone.  Spec'd personalization
// hyperparameters (250 steps, batch 8, lr 8e-5, 200 regularization images)
// are the TrainConfig defaults and are not overridden here.
constexpr int kPretrainSteps = 2000;
constexpr unsigned kPretrainSeed = 1;
// Sample-quality contract for the pretrained backbone, fixed after the first
// calibration run: oracle detects disc+square in >= 60% of 32 samples.
constexpr double kPretrainQuality = 0.60;

void report(int n, const std::string& name, bool pass) {
    std::printf("ACCEPTANCE %2d %-34s %s\n", n, name.c_str(), pass ? "PASS" : "FAIL");
    std::fflush(stdout);
    CHECK_MESSAGE(pass, "criterion ", n, " (", name, ") failed");
}

struct F64Scope {
    F64Scope() { set_precision(Precision::f64); }
    ~F64Scope() { set_precision(Precision::f32); }
};

double frand(std::mt19937& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Tensor positive_map(std::mt19937& rng, int h, int w) {
    std::vector<double> v(static_cast<size_t>(h) * w);
    for (auto& x : v) x = frand(rng, 0.05, 1.0);
    return Tensor::from_data({h, w}, std::move(v));
}

// ---- criterion 1: gradient fidelity ------------------------------------------------

TEST_CASE("criterion 1: gradient fidelity") {
    F64Scope f64;
    const auto t0 = clk::now();
    const Vocabulary vocab;
    const TokenSeq roles = tokenize(template_prompt({"disc", "square"}, {"V1*", "V2*"}, vocab),
                                    vocab);
    double worst_all = 0;
    auto run = [&](const char* name,
                   const std::function<double(std::mt19937&)>& one) {
        double worst = 0;
        std::mt19937 rng(std::hash<std::string>{}(name) & 0xffff);
        for (int s = 0; s < kGradSeeds; ++s) worst = std::max(worst, one(rng));
        std::fprintf(stderr, "  gradcheck %-16s max rel err %.3g\n", name, worst);
        worst_all = std::max(worst_all, worst);
    };

    // b is kept >= 1e-3 away from a*a elementwise: the min/max in soft_iou is
    // piecewise linear and finite differences break down at exact ties
    auto rand_pair = [&](std::mt19937& rng, Tensor& a, Tensor& b) {
        a = positive_map(rng, 8, 8);
        std::vector<double> vb(static_cast<size_t>(a.numel()));
        for (size_t i = 0; i < vb.size(); ++i) {
            const double ai = a.at(static_cast<std::int64_t>(i));
            const double off = frand(rng, 1e-3, 0.5) * (rng() % 2 ? 1.0 : -1.0);
            vb[i] = std::max(1e-3, ai * ai + off);
            if (std::abs(vb[i] - ai * ai) < 1e-3) vb[i] = ai * ai + 1e-3;
        }
        b = Tensor::from_data({8, 8}, std::move(vb));
    };
    run("l_bind", [&](std::mt19937& rng) {
        Tensor a, b;
        rand_pair(rng, a, b);
        return gradcheck([&](const Tensor& x) { return l_bind(mul(x, x), b); }, a);
    });
    run("l_separate", [&](std::mt19937& rng) {
        Tensor a, b;
        rand_pair(rng, a, b);
        return gradcheck([&](const Tensor& x) { return l_separate(mul(x, x), b); }, a);
    });
    run("l_ss", [&](std::mt19937& rng) {
        Tensor a, b;
        rand_pair(rng, a, b);
        return gradcheck([&](const Tensor& x) { return l_ss(mul(x, x), b); }, a);
    });
    // The full calibration objective is checked with the smooth product IoU
    // (the piecewise-linear minmax branch is covered by the direct loss
    // checks above).  Two gradient paths are exercised separately: the bind
    // path, where the leaf feeds only modifier-token columns so the detached
    // class branch stays constant under perturbation, and the class path
    // through gaussian smoothing and suppression via the S&S term.
    auto record_of = [&](const Tensor& values) {
        AttentionRecord rec;
        rec.roles = roles;
        AttentionMap m;
        m.values = values;
        m.resolution = 8;
        m.layer = "down8.attn";
        rec.maps.push_back(m);
        return rec;
    };
    run("calib_bind_path", [&](std::mt19937& rng) {
        Tensor base = positive_map(rng, 64, kSeqLen);
        std::vector<double> vm(static_cast<size_t>(64 * kSeqLen), 0.0);
        for (int p = 0; p < 64; ++p)
            for (int tkn = 0; tkn < kSeqLen; ++tkn)
                if (roles.roles[static_cast<size_t>(tkn)].role == Role::modifier)
                    vm[static_cast<size_t>(p * kSeqLen + tkn)] = 1.0;
        Tensor mask = Tensor::from_data({64, kSeqLen}, std::move(vm));
        Tensor x = positive_map(rng, 64, kSeqLen);
        CalibrationConfig cfg;
        cfg.resolution = 8;
        cfg.iou_kind = IouKind::product;
        return gradcheck(
            [&](const Tensor& xc) {
                return calibration_loss(record_of(add(base, mul(xc, mask))), cfg).loss;
            },
            x);
    });
    run("calib_class_path", [&](std::mt19937& rng) {
        Tensor x = positive_map(rng, 64, kSeqLen);
        CalibrationConfig cfg;
        cfg.resolution = 8;
        cfg.iou_kind = IouKind::product;
        cfg.bind_enabled = false;  // the bind term's class branch is detached
        return gradcheck(
            [&](const Tensor& xc) { return calibration_loss(record_of(xc), cfg).loss; },
            x);
    });
    run("gaussian_smooth", [&](std::mt19937& rng) {
        Tensor m = positive_map(rng, 8, 8);
        return gradcheck(
            [](const Tensor& x) {
                Tensor g = gaussian_smooth(x, 3, 1.0);
                return sum(mul(g, g));
            },
            m);
    });
    run("suppress", [&](std::mt19937& rng) {
        Tensor m = positive_map(rng, 8, 8);  // bounded away from the relu kink
        return gradcheck(
            [](const Tensor& x) {
                Tensor s = suppress(x);
                return sum(mul(s, s));
            },
            m);
    });
    run("cross_attention", [&](std::mt19937& rng) {
        Tensor phi = gaussian_like({4, 4, 4}, rng);
        Tensor tau = gaussian_like({8, 6}, rng);
        Tensor wq = gaussian_like({4, 4}, rng);
        Tensor wk = gaussian_like({6, 4}, rng);
        Tensor wv = gaussian_like({6, 4}, rng);
        return gradcheck(
            [&](const Tensor& x) {
                auto o = cross_attention(phi, tau, wq, x, wv, 2);
                return sum(mul(o.out, o.out));
            },
            wk);
    });
    run("base_loss", [&](std::mt19937& rng) {
        Tensor eps = gaussian_like({3, 4, 4}, rng);
        Tensor pred = gaussian_like({3, 4, 4}, rng);
        return gradcheck([&](const Tensor& x) { return base_loss(eps, x); }, pred);
    });

    const double secs = std::chrono::duration<double>(clk::now() - t0).count();
    std::fprintf(stderr, "  gradcheck wall time %.1f s\n", secs);
    report(1, "gradient fidelity", worst_all < kGradTol && secs < kGradBudgetSec);
}

// ---- criterion 2: loss algebra ------------------------------------------------------

TEST_CASE("criterion 2: loss algebra") {
    const double eps32 = static_cast<double>(std::numeric_limits<float>::epsilon());
    std::mt19937 rng(2);
    bool ok = true;

    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = positive_map(rng, 6, 6);
        ok = ok && std::abs(l_bind(a, a).item()) <= kUlps * eps32;
        ok = ok && std::abs(l_ss(a, a).item() - 1.0) <= kUlps * eps32;
        // disjoint supports
        std::vector<double> va(36, 0.0), vb(36, 0.0);
        for (int i = 0; i < 18; ++i) va[static_cast<size_t>(i)] = frand(rng, 0.1, 1.0);
        for (int i = 18; i < 36; ++i) vb[static_cast<size_t>(i)] = frand(rng, 0.1, 1.0);
        Tensor da = Tensor::from_data({6, 6}, va);
        Tensor db = Tensor::from_data({6, 6}, vb);
        ok = ok && std::abs(l_bind(da, db).item() - 1.0) <= kUlps * eps32;
        ok = ok && std::abs(l_ss(da, db).item()) <= kUlps * eps32;
    }

    // soft_iou == exact set IoU on every pair of 3x3 binary masks
    {
        F64Scope f64;
        for (int ma = 0; ma < 512 && ok; ++ma) {
            std::vector<double> va(9), vb(9);
            for (int i = 0; i < 9; ++i) va[static_cast<size_t>(i)] = (ma >> i) & 1;
            Tensor ta = Tensor::from_data({3, 3}, va);
            const int pa = __builtin_popcount(ma);
            for (int mb = 0; mb < 512; ++mb) {
                for (int i = 0; i < 9; ++i) vb[static_cast<size_t>(i)] = (mb >> i) & 1;
                Tensor tb = Tensor::from_data({3, 3}, vb);
                const int inter = __builtin_popcount(ma & mb);
                const int uni = __builtin_popcount(ma | mb);
                const double want = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
                if (std::abs(soft_iou(ta, tb).item() - want) > 1e-12) {
                    ok = false;
                    break;
                }
            }
        }
    }
    report(2, "loss algebra", ok);
}

// ---- criterion 3: detach contract (Eq. 3) ------------------------------------------

TEST_CASE("criterion 3: detach contract") {
    const Vocabulary vocab;
    const TokenSeq roles = tokenize(template_prompt({"disc", "square"}, {"V1*", "V2*"}, vocab),
                                    vocab);
    std::mt19937 rng(3);
    // the leaf IS the recorded map, so token columns are independent and the
    // class-token path is exactly the class columns of the leaf
    Tensor x = positive_map(rng, 64, kSeqLen);
    x.set_requires_grad(true);

    CalibrationConfig cfg;
    cfg.resolution = 8;
    cfg.ss_enabled = false;  // isolate the bind term
    cfg.iou_kind = IouKind::product;
    auto loss_of = [&](const Tensor& leaf) {
        AttentionRecord rec;
        rec.roles = roles;
        AttentionMap m;
        m.values = leaf;
        m.resolution = 8;
        m.layer = "down8.attn";
        rec.maps.push_back(m);
        return calibration_loss(rec, cfg).loss;
    };

    Tensor loss = loss_of(x);
    backward(loss);
    REQUIRE(x.has_grad());

    // graph-level: gradient on every class-token column is exactly zero, and
    // some modifier-column gradient is nonzero
    bool class_zero = true, modifier_nonzero = false;
    for (int p = 0; p < 64; ++p)
        for (int tkn = 0; tkn < kSeqLen; ++tkn) {
            const double g = x.grad()[static_cast<size_t>(p * kSeqLen + tkn)];
            if (roles.roles[static_cast<size_t>(tkn)].role == Role::cls && g != 0.0)
                class_zero = false;
            if (roles.roles[static_cast<size_t>(tkn)].role == Role::modifier && g != 0.0)
                modifier_nonzero = true;
        }

    // numeric: the loss *does* depend on the class column (the detach is a
    // gradient-stop, not an algebraic independence), and the analytic gradient
    // on modifier entries matches central differences
    bool ok_numeric = true;
    {
        F64Scope f64;
        Tensor y = positive_map(rng, 64, kSeqLen);
        const int cls_pos = roles.position_of(Role::cls, 1);
        const int mod_pos = roles.position_of(Role::modifier, 1);
        REQUIRE(cls_pos >= 0);
        REQUIRE(mod_pos >= 0);
        const double h = 1e-5;
        auto fd = [&](int idx) {
            Tensor yp = y.clone();
            yp.data()[static_cast<size_t>(idx)] += h;
            const double up = loss_of(yp).item();
            Tensor ym = y.clone();
            ym.data()[static_cast<size_t>(idx)] -= h;
            return (up - loss_of(ym).item()) / (2 * h);
        };
        Tensor yg = y.clone();
        yg.set_requires_grad(true);
        backward(loss_of(yg));
        double dep = 0;
        bool grad_match = true;
        for (int p = 0; p < 64; p += 13) {
            dep = std::max(dep, std::abs(fd(p * kSeqLen + cls_pos)));
            const double num = fd(p * kSeqLen + mod_pos);
            const double ana = yg.grad()[static_cast<size_t>(p * kSeqLen + mod_pos)];
            if (std::abs(ana - num) > 1e-6 * std::max(1.0, std::abs(num)))
                grad_match = false;
        }
        // numeric dependence exists on the class path, analytic grad is zero
        ok_numeric = dep > 1e-6 && grad_match;
    }
    report(3, "detach contract", class_zero && modifier_nonzero && ok_numeric);
}

// ---- shared experiment fixture (criteria 4, 6-9, pretrain quality) -----------------

const char* kCacheDir = "acceptance_cache";

std::string pretrain_path() {
    return std::string(kCacheDir) + "/pretrain_s" + std::to_string(kPretrainSeed) + "_n" +
           std::to_string(kPretrainSteps) + ".dsdf";
}

TrainConfig experiment_config() {
    TrainConfig cfg;
    cfg.pretrain_steps = kPretrainSteps;
    cfg.seed = kPretrainSeed;
    return cfg;
}

// Pretrains once and caches the checkpoint (determinism makes this safe).
void load_pretrained(Model& model) {
    fs::create_directories(kCacheDir);
    const std::string path = pretrain_path();
    if (!fs::exists(path)) {
        std::fprintf(stderr, "  pretraining backbone (%d steps, cached)...\n",
                     kPretrainSteps);
        Model fresh(DenoiserConfig{}, kPretrainSeed);
        TrainConfig cfg = experiment_config();
        const double val = pretrain(fresh, cfg);
        std::fprintf(stderr, "  pretrain validation mse %.4f\n", val);
        save_checkpoint(path, fresh);
    }
    load_checkpoint(path, model);
}

// One personalization target per experiment seed: a disc and a square with
// randomized colors and placement, rendered with ground truth.
PersonalizationTask make_task(const Model& model, int seed) {
    std::mt19937 rng(9000u + static_cast<unsigned>(seed));
    const std::vector<ShapeKind> allowed = {ShapeKind::disc, ShapeKind::square};
    SceneSpec spec = random_scene(rng, 2, &allowed, /*allow_stripes=*/false);
    PersonalizationTask task;
    task.target_image = render_scene(spec);
    for (const auto& inst : spec.instances) task.classes.push_back(shape_name(inst.shape));
    task.modifiers = {"V1*", "V2*"};
    task.scene_truth = spec;
    task.validate(model.vocab);
    return task;
}

struct VariantMetrics {
    double align = 0;      // mean attention_mask_iou of class tokens vs truth
    double leak_c1 = 0;    // leakage on the concept-1-only prompt family
    double leak_c2 = 0;
    double presence = 0;   // combined-prompt presence rate
};

CalibrationConfig variant_config(const std::string& variant) {
    CalibrationConfig c;
    if (variant == "nocal") {
        c.bind_enabled = false;
        c.ss_enabled = false;
    } else if (variant == "nosupp") {
        c.suppression_count = 0;
    } else if (variant == "nogauss") {
        c.gaussian_enabled = false;
    }
    return c;
}

VariantMetrics run_variant(const std::string& variant, int seed) {
    const std::string mpath =
        std::string(kCacheDir) + "/m_" + variant + "_" + std::to_string(seed) + ".txt";
    if (fs::exists(mpath)) {
        KeyValueFile kv = KeyValueFile::load(mpath);
        return {kv.get_double("align", 0), kv.get_double("leak_c1", 0),
                kv.get_double("leak_c2", 0), kv.get_double("presence", 0)};
    }

    Model model;
    load_pretrained(model);
    PersonalizationTask task = make_task(model, seed);
    TrainConfig cfg = experiment_config();
    cfg.seed = 1000u + static_cast<unsigned>(seed);
    cfg.calibration = variant_config(variant);

    const std::string ppath =
        std::string(kCacheDir) + "/p_" + variant + "_" + std::to_string(seed) + ".dsdf";
    if (fs::exists(ppath)) {
        load_checkpoint(ppath, model);
    } else {
        const auto t0 = clk::now();
        personalize(model, task, cfg);
        std::fprintf(stderr, "  personalize %s seed %d: %.0f s\n", variant.c_str(), seed,
                     std::chrono::duration<double>(clk::now() - t0).count());
        save_checkpoint(ppath, model);
    }

    VariantMetrics vm;
    vm.align = attention_alignment(model, task);

    EvalTask et;
    et.classes = task.classes;
    et.modifiers = task.modifiers;
    for (const auto& inst : task.scene_truth->instances) {
        std::array<double, 3> c{};
        for (int k = 0; k < 3; ++k) c[static_cast<size_t>(k)] = inst.color[static_cast<size_t>(k)];
        et.target_colors.push_back(c);
    }
    SampleFn sample = [&](const std::string& prompt, unsigned s) {
        return sample_image(model, prompt, 50, 6.0, s);
    };
    ClassMapFn class_map = [&](const Tensor& image, const std::string& prompt,
                               int concept_index) {
        return class_token_map(model, image, prompt, concept_index);
    };
    MetricsReport rep = eval_disentanglement(sample, class_map, et, kEvalSamples,
                                             500u + static_cast<unsigned>(seed));
    for (const auto& row : rep.rows) {
        if (row.family == "concept1") vm.leak_c1 = row.leakage;
        if (row.family == "concept2") vm.leak_c2 = row.leakage;
        if (row.family == "combined") vm.presence = row.presence;
    }

    KeyValueFile kv;
    kv.set("align", vm.align);
    kv.set("leak_c1", vm.leak_c1);
    kv.set("leak_c2", vm.leak_c2);
    kv.set("presence", vm.presence);
    kv.save(mpath);
    std::fprintf(stderr, "  %s seed %d: align %.3f leak %.3f/%.3f presence %.3f\n",
                 variant.c_str(), seed, vm.align, vm.leak_c1, vm.leak_c2, vm.presence);
    return vm;
}

// ---- criterion 4: softmax/attention invariants --------------------------------------

TEST_CASE("criterion 4: attention invariants") {
    Model model;
    load_pretrained(model);
    NoiseSchedule sched(400);
    std::mt19937 rng(4);
    std::uniform_int_distribution<int> t_dist(0, 399);

    // one epoch of training-style forwards with recording: every map row is a
    // probability distribution over tokens
    bool rows_ok = true;
    double worst_row = 0;
    for (int step = 0; step < 16; ++step) {
        SceneSpec spec = random_scene(rng, 1 + static_cast<int>(rng() % 2));
        Tensor x0 = render_scene(spec);
        Tensor eps = gaussian_like(x0.shape(), rng);
        const int t = t_dist(rng);
        Tensor z = forward_noise(sched, x0, t, eps);
        Tensor tau = embed(tokenize(spec.caption, model.vocab), model.embed_table);
        AttentionRecord rec;
        model.net.forward(z, t, sched.T, tau, &rec);
        for (const auto& m : rec.maps) {
            const int pixels = m.resolution * m.resolution;
            for (int p = 0; p < pixels; ++p) {
                double s = 0;
                for (int tk = 0; tk < kSeqLen; ++tk)
                    s += m.values.at(p * kSeqLen + tk);
                worst_row = std::max(worst_row, std::abs(s - 1.0));
                if (std::abs(s - 1.0) > kRowSumTol) rows_ok = false;
            }
        }
    }
    std::fprintf(stderr, "  worst attention row-sum deviation %.2g\n", worst_row);

    // Gaussian kernel mass preservation
    bool mass_ok = true;
    for (int trial = 0; trial < 20; ++trial)
        for (int k : {3, 5}) {
            Tensor m = positive_map(rng, 16, 16);
            const double before = sum(m).item();
            const double after = sum(gaussian_smooth(m, k, frand(rng, 0.5, 2.0))).item();
            if (std::abs(after - before) > kMassTol * before) mass_ok = false;
        }
    report(4, "attention invariants", rows_ok && mass_ok);
}

// ---- criterion 5: suppression semantics ----------------------------------------------

TEST_CASE("criterion 5: suppression semantics") {
    std::mt19937 rng(5);
    bool ok = true;
    for (int trial = 0; trial < 200; ++trial) {
        double a = frand(rng, 1e-3, 1.0), b = frand(rng, 1e-3, 1.0);
        if (a == b) continue;
        if (a > b) std::swap(a, b);
        Tensor t = Tensor::from_data({2}, {a, b});
        Tensor s = suppress(t);
        // order preservation and attenuation of the weaker response
        if (!(s.at(0) < s.at(1))) ok = false;
        if (!(s.at(0) / s.at(1) < a / b)) ok = false;
    }
    // twice-suppression is exactly the fourth power (same op sequence bitwise)
    Tensor x = positive_map(rng, 8, 8);
    Tensor twice = suppress(suppress(x));
    Tensor p2 = mul(relu(x), relu(x));
    Tensor p4 = mul(relu(p2), relu(p2));
    for (std::int64_t i = 0; i < x.numel(); ++i)
        if (twice.at(i) != p4.at(i)) ok = false;
    report(5, "suppression semantics", ok);
}

// ---- criterion 6: parameter-freezing contract ---------------------------------------

TEST_CASE("criterion 6: parameter freezing") {
    // compare the cached pretrained checkpoint against a full personalization
    run_variant("full", 0);  // ensures p_full_0.dsdf exists
    auto before = read_checkpoint_tensors(pretrain_path());
    auto after =
        read_checkpoint_tensors(std::string(kCacheDir) + "/p_full_0.dsdf");
    REQUIRE(before.size() == after.size());

    const Vocabulary vocab;
    std::set<int> modifier_rows;
    for (int i = 1; i <= 3; ++i) modifier_rows.insert(vocab.modifier_id(i));

    bool ok = true;
    bool wk_moved = false, wv_moved = false, embed_moved = false;
    for (const auto& [name, t0] : before) {
        const Tensor& t1 = after.at(name);
        const bool is_wk = name.find(".W_K") != std::string::npos;
        const bool is_wv = name.find(".W_V") != std::string::npos;
        if (name == "embed.table") {
            const int dim = t0.dim(1);
            for (int r = 0; r < t0.dim(0); ++r) {
                bool row_same = true;
                for (int c = 0; c < dim; ++c)
                    if (t0.at(r * dim + c) != t1.at(r * dim + c)) row_same = false;
                if (modifier_rows.count(r)) {
                    if (!row_same) embed_moved = true;
                } else if (!row_same) {
                    ok = false;  // non-modifier embedding row changed
                }
            }
            continue;
        }
        bool same = true;
        for (std::int64_t i = 0; i < t0.numel(); ++i)
            if (t0.at(i) != t1.at(i)) same = false;
        if (is_wk || is_wv) {
            wk_moved = wk_moved || (is_wk && !same);
            wv_moved = wv_moved || (is_wv && !same);
        } else if (!same) {
            ok = false;  // a frozen tensor changed
        }
    }
    report(6, "parameter freezing", ok && wk_moved && wv_moved && embed_moved);
}

// ---- pretrained-backbone sample quality (module contract) ---------------------------

TEST_CASE("pretrained backbone sample quality") {
    Model model;
    load_pretrained(model);
    int hits = 0;
    const int n = 32;
    for (unsigned s = 0; s < n; ++s) {
        Tensor img = sample_image(model, "a disc and a square", 50, 6.0, 4000 + s);
        bool disc = false, square = false;
        for (const auto& d : detect_concepts(img)) {
            disc = disc || d.shape == ShapeKind::disc;
            square = square || d.shape == ShapeKind::square;
        }
        hits += disc && square;
    }
    const double rate = static_cast<double>(hits) / n;
    std::fprintf(stderr, "  disc+square rate %.2f (contract >= %.2f)\n", rate,
                 kPretrainQuality);
    CHECK_MESSAGE(rate >= kPretrainQuality, "pretrained sample quality ", rate);
}

// ---- criteria 7-9: the 5-seed experiment suite ---------------------------------------

struct SuiteResults {
    std::map<std::string, std::vector<VariantMetrics>> by_variant;
    double mean(const std::string& variant, double VariantMetrics::* field) const {
        const auto& v = by_variant.at(variant);
        double s = 0;
        for (const auto& m : v) s += m.*field;
        return s / static_cast<double>(v.size());
    }
    double mean_leak(const std::string& variant, int seed) const {
        const auto& m = by_variant.at(variant)[static_cast<size_t>(seed)];
        return 0.5 * (m.leak_c1 + m.leak_c2);
    }
};

const SuiteResults& suite() {
    static SuiteResults r = [] {
        SuiteResults s;
        for (const std::string v : {"full", "nocal", "nosupp", "nogauss"})
            for (int seed = 0; seed < kNumSeeds; ++seed)
                s.by_variant[v].push_back(run_variant(v, seed));
        return s;
    }();
    return r;
}

TEST_CASE("criterion 7: attention alignment") {
    const auto& s = suite();
    const double full = s.mean("full", &VariantMetrics::align);
    const double base = s.mean("nocal", &VariantMetrics::align);
    std::fprintf(stderr, "  alignment: full %.3f vs no-calibration %.3f (margin %.2f)\n",
                 full, base, kAlignMargin);
    report(7, "attention alignment", full - base > kAlignMargin);
}

TEST_CASE("criterion 8: disentanglement") {
    const auto& s = suite();
    int wins = 0;
    for (int seed = 0; seed < kNumSeeds; ++seed) {
        const double lf = s.mean_leak("full", seed);
        const double lb = s.mean_leak("nocal", seed);
        std::fprintf(stderr, "  seed %d leakage: full %.3f vs no-calibration %.3f\n",
                     seed, lf, lb);
        if (lf < lb) ++wins;
    }
    report(8, "disentanglement", wins >= kLeakSeedsNeeded);
}

TEST_CASE("criterion 9: ablation ordering") {
    const auto& s = suite();
    const double align_full = s.mean("full", &VariantMetrics::align);
    double leak_full = 0;
    for (int seed = 0; seed < kNumSeeds; ++seed) leak_full += s.mean_leak("full", seed);
    leak_full /= kNumSeeds;

    bool ok = true;
    for (const std::string v : {"nosupp", "nogauss"}) {
        const double align_v = s.mean(v, &VariantMetrics::align);
        double leak_v = 0;
        for (int seed = 0; seed < kNumSeeds; ++seed) leak_v += s.mean_leak(v, seed);
        leak_v /= kNumSeeds;
        std::fprintf(stderr, "  %s: align %.3f (full %.3f), leak %.3f (full %.3f)\n",
                     v.c_str(), align_v, align_full, leak_v, leak_full);
        if (align_v > align_full && leak_v < leak_full) ok = false;
    }
    report(9, "ablation ordering", ok);
}

// ---- criterion 10: determinism and formats -------------------------------------------

TEST_CASE("criterion 10: determinism and formats") {
    fs::create_directories(kCacheDir);
    bool ok = true;

    // identical seed/config -> byte-identical checkpoints
    {
        TrainConfig cfg;
        cfg.pretrain_steps = 2;
        cfg.seed = 77;
        Model a(DenoiserConfig{}, cfg.seed), b(DenoiserConfig{}, cfg.seed);
        pretrain(a, cfg);
        pretrain(b, cfg);
        const std::string pa = std::string(kCacheDir) + "/det_a.dsdf";
        const std::string pb = std::string(kCacheDir) + "/det_b.dsdf";
        save_checkpoint(pa, a);
        save_checkpoint(pb, b);
        if (sha256_file(pa) != sha256_file(pb)) ok = false;

        // DSDF round trip is lossless
        auto tensors = read_checkpoint_tensors(pa);
        for (const auto* pg : a.all_params()) {
            const Tensor& orig = pg->tensor;
            const Tensor& back = tensors.at(pg->name);
            for (std::int64_t i = 0; i < orig.numel(); ++i)
                if (orig.at(i) != back.at(i)) ok = false;
        }

        // identical seed -> byte-identical PPM samples
        const std::string s1 = std::string(kCacheDir) + "/det_s1.ppm";
        const std::string s2 = std::string(kCacheDir) + "/det_s2.ppm";
        write_ppm(s1, sample_image(a, "a disc", 10, 6.0, 7));
        write_ppm(s2, sample_image(a, "a disc", 10, 6.0, 7));
        if (sha256_file(s1) != sha256_file(s2)) ok = false;
    }

    // oracle detector self-consistency over 500 random scenes
    {
        std::mt19937 rng(1010);
        int correct = 0;
        const int n = 500;
        for (int trial = 0; trial < n; ++trial) {
            SceneSpec spec = random_scene(rng, 1 + static_cast<int>(rng() % 2));
            Tensor img = render_scene(spec);
            auto dets = detect_concepts(img);
            if (dets.size() != spec.instances.size()) continue;
            bool all = true;
            for (size_t i = 0; i < spec.instances.size(); ++i) {
                double best = -1;
                size_t bj = 0;
                for (size_t j = 0; j < dets.size(); ++j) {
                    int inter = 0, uni = 0;
                    for (size_t p = 0; p < dets[j].mask.size(); ++p) {
                        inter += dets[j].mask[p] & spec.masks[i][p];
                        uni += dets[j].mask[p] | spec.masks[i][p];
                    }
                    const double iou = uni ? static_cast<double>(inter) / uni : 0;
                    if (iou > best) {
                        best = iou;
                        bj = j;
                    }
                }
                if (dets[bj].shape != spec.instances[i].shape || best < 0.9) all = false;
            }
            correct += all;
        }
        const double acc = static_cast<double>(correct) / n;
        std::fprintf(stderr, "  detector self-consistency %.3f\n", acc);
        if (acc < kDetectorAcc) ok = false;
    }
    report(10, "determinism and formats", ok);
}

}  // namespace
