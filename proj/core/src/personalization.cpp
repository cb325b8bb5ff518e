#include "disendiff/personalization.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>

namespace disendiff {

void PersonalizationTask::validate(const Vocabulary& vocab) const {
    if (classes.empty() || classes.size() > 3 || classes.size() != modifiers.size())
        throw std::invalid_argument("task: need 1..3 matching class/modifier pairs");
    std::set<std::string> distinct(classes.begin(), classes.end());
    if (distinct.size() != classes.size())
        throw std::invalid_argument("task: classes must be distinct");
    for (const auto& c : classes)
        if (!vocab.is_class_noun(c))
            throw std::invalid_argument("task: class noun '" + c + "' absent from vocabulary");
    for (const auto& m : modifiers)
        if (!vocab.is_modifier(m))
            throw std::invalid_argument("task: unknown modifier '" + m + "'");
    const Shape& s = target_image.shape();
    if (s.size() != 3 || s[0] != 3 || s[1] != kImageSize || s[2] != kImageSize)
        throw std::invalid_argument("task: target image must be (3,32,32)");
}

// ---- augmentation --------------------------------------------------------------

namespace {

double bilinear_at(const Tensor& img, int c, double y, double x) {
    const int h = img.dim(1), w = img.dim(2);
    const double yc = std::clamp(y, 0.0, h - 1.0);
    const double xc = std::clamp(x, 0.0, w - 1.0);
    const int y0 = static_cast<int>(yc), x0 = static_cast<int>(xc);
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = yc - y0, fx = xc - x0;
    auto px = [&](int yy, int xx) { return img.at((c * h + yy) * w + xx); };
    return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) +
           fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
}

}  // namespace

Tensor rescale_paste(const Tensor& image, double scale, double background) {
    const int n = image.dim(1);
    if (scale == 1.0) return image.clone();
    const int sz = static_cast<int>(std::lround(n * scale));
    std::vector<double> out(static_cast<size_t>(3) * n * n, background);
    const int off = (n - sz) / 2;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < sz; ++i) {
            const int oi = i + off;
            if (oi < 0 || oi >= n) continue;
            for (int j = 0; j < sz; ++j) {
                const int oj = j + off;
                if (oj < 0 || oj >= n) continue;
                const double sy = (i + 0.5) * n / sz - 0.5;
                const double sx = (j + 0.5) * n / sz - 0.5;
                out[static_cast<size_t>((c * n + oi) * n + oj)] = bilinear_at(image, c, sy, sx);
            }
        }
    return Tensor::from_data(image.shape(), std::move(out));
}

Tensor hflip(const Tensor& image) {
    const int h = image.dim(1), w = image.dim(2);
    std::vector<double> out(image.data().size());
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                out[static_cast<size_t>((c * h + i) * w + j)] =
                    image.at((c * h + i) * w + (w - 1 - j));
    return Tensor::from_data(image.shape(), std::move(out));
}

AugmentResult augment(const Tensor& image, std::mt19937& rng) {
    std::uniform_real_distribution<double> scale_dist(0.6, 1.2);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AugmentResult res;
    res.scale = scale_dist(rng);
    res.flipped = unit(rng) < 0.5;
    res.image = rescale_paste(image, res.scale, 0.0);
    if (res.flipped) res.image = hflip(res.image);
    return res;
}

// ---- regularization set ---------------------------------------------------------

std::vector<RegularizationItem> build_regularization_set(
    const std::vector<std::string>& classes, int size, unsigned seed) {
    if (size < 0) throw std::invalid_argument("regularization: size must be >= 0");
    Vocabulary vocab;
    std::vector<ShapeKind> shapes;
    for (const auto& c : classes) shapes.push_back(shape_from_name(c));
    const std::string caption = regularization_caption(classes, vocab);

    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<RegularizationItem> out;
    out.reserve(static_cast<size_t>(size));
    static const std::array<std::array<double, 3>, 8> palette = {{{1, 0, 0},
                                                                  {0, 1, 0},
                                                                  {0, 0, 1},
                                                                  {1, 1, 0},
                                                                  {0, 1, 1},
                                                                  {1, 0, 1},
                                                                  {1, 0.5, 0},
                                                                  {1, 1, 1}}};
    for (int k = 0; k < size; ++k) {
        // fixed shape order matching the caption, randomized attributes
        for (int attempt = 0;; ++attempt) {
            try {
                SceneSpec spec;
                spec.background = -0.1 + 0.2 * unit(rng);
                std::vector<int> colors;
                for (size_t i = 0; i < shapes.size(); ++i) {
                    ConceptInstance inst;
                    inst.shape = shapes[i];
                    int ci;
                    do {
                        ci = static_cast<int>(unit(rng) * 8) % 8;
                    } while (std::find(colors.begin(), colors.end(), ci) != colors.end());
                    colors.push_back(ci);
                    inst.color = palette[static_cast<size_t>(ci)];
                    inst.radius = 4.5 + 1.5 * unit(rng);
                    const double reach = inst.radius * 1.5 + 1.2;
                    for (int place = 0; place < 100; ++place) {
                        inst.cx = reach + (kImageSize - 2 * reach) * unit(rng);
                        inst.cy = reach + (kImageSize - 2 * reach) * unit(rng);
                        bool ok = true;
                        for (const auto& other : spec.instances) {
                            const double dx = inst.cx - other.cx, dy = inst.cy - other.cy;
                            const double sep = 1.5 * (inst.radius + other.radius) + 1.0;
                            if (dx * dx + dy * dy < sep * sep) ok = false;
                        }
                        if (ok) break;
                    }
                    spec.instances.push_back(inst);
                }
                spec.caption = caption;
                RegularizationItem item;
                item.image = render_scene(spec);
                item.caption = caption;
                item.spec = spec;
                out.push_back(std::move(item));
                break;
            } catch (const std::exception&) {
                if (attempt > 50)
                    throw std::runtime_error("regularization: placement kept failing");
            }
        }
    }
    return out;
}

// ---- optimizer -------------------------------------------------------------------

namespace {

struct Optimizer {
    std::string kind;
    double lr;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int t = 0;
    std::vector<std::vector<double>> m, v;

    Optimizer(std::string k, double lr_, size_t n_params)
        : kind(std::move(k)), lr(lr_), m(n_params), v(n_params) {}

    // mask: when non-empty, only these rows of a 2-D tensor are updated
    void step(std::vector<ParameterGroup*>& params) {
        ++t;
        for (size_t pi = 0; pi < params.size(); ++pi) {
            ParameterGroup& p = *params[pi];
            Tensor& w = p.tensor;
            if (!w.requires_grad() || !w.has_grad()) continue;
            std::vector<uint8_t> allowed;
            if (!p.trainable_rows.empty()) {
                const int cols = w.shape()[1];
                allowed.assign(w.data().size(), 0);
                for (int row : p.trainable_rows)
                    for (int j = 0; j < cols; ++j)
                        allowed[static_cast<size_t>(row * cols + j)] = 1;
            }
            auto& mm = m[pi];
            auto& vv = v[pi];
            if (kind == "adam" && mm.empty()) {
                mm.assign(w.data().size(), 0.0);
                vv.assign(w.data().size(), 0.0);
            }
            const auto& g = w.grad();
            for (size_t i = 0; i < w.data().size(); ++i) {
                if (!allowed.empty() && !allowed[i]) continue;
                if (kind == "adam") {
                    mm[i] = beta1 * mm[i] + (1 - beta1) * g[i];
                    vv[i] = beta2 * vv[i] + (1 - beta2) * g[i] * g[i];
                    const double mhat = mm[i] / (1 - std::pow(beta1, t));
                    const double vhat = vv[i] / (1 - std::pow(beta2, t));
                    w.data()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
                } else {
                    w.data()[i] -= lr * g[i];
                }
            }
            if (precision() == Precision::f32)
                for (size_t i = 0; i < w.data().size(); ++i)
                    w.data()[i] = static_cast<double>(static_cast<float>(w.data()[i]));
        }
    }

    static void zero_grads(std::vector<ParameterGroup*>& params) {
        for (auto* p : params) p->tensor.zero_grad();
    }
};

Tensor embed_prompt(const Model& model, const std::string& prompt) {
    return embed(tokenize(prompt, model.vocab), model.embed_table);
}

}  // namespace

// ---- pretraining ------------------------------------------------------------------

double pretrain(Model& model, const TrainConfig& config) {
    unfreeze_all(model);
    NoiseSchedule sched(config.timesteps);
    std::mt19937 rng(config.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> t_dist(0, sched.T - 1);

    auto params = model.all_params();
    Optimizer opt(config.optimizer, config.pretrain_lr, params.size());

    std::ofstream log;
    if (!config.log_path.empty()) {
        log.open(config.log_path);
        log << "step,t_drawn,l_base,l_bind,l_ss,total,degenerate_map_count\n";
    }

    // EMA of the weights: the raw Adam iterate oscillates and samples poorly
    std::vector<std::vector<double>> ema;
    if (config.ema_decay > 0)
        for (const auto* p : params) ema.push_back(p->tensor.data());

    const TokenSeq null_seq = tokenize("", model.vocab);
    for (int step = 0; step < config.pretrain_steps; ++step) {
        // cosine decay to 5% of the base rate; constant-lr Adam oscillates
        // late in training and degrades sample quality
        opt.lr = config.pretrain_lr *
                 (0.05 + 0.95 * 0.5 *
                             (1.0 + std::cos(M_PI * step /
                                             std::max(1, config.pretrain_steps))));
        Tensor loss;
        int first_t = 0;
        for (int b = 0; b < config.batch_size; ++b) {
            const int n_inst = unit(rng) < 0.45 ? 1 : 2;
            SceneSpec spec = random_scene(rng, n_inst);
            Tensor x0 = render_scene(spec);
            TokenSeq seq = unit(rng) < config.cond_dropout ? null_seq
                                                           : tokenize(spec.caption, model.vocab);
            const int t = t_dist(rng);
            if (b == 0) first_t = t;
            Tensor eps = gaussian_like(x0.shape(), rng);
            Tensor z = forward_noise(sched, x0, t, eps);
            Tensor tau = embed(seq, model.embed_table);
            const bool ground =
                config.grounding_weight > 0 && seq.position_of(Role::cls, 1) >= 0;
            AttentionRecord record;
            record.roles = seq;
            Tensor eps_hat =
                model.net.forward(z, t, sched.T, tau, ground ? &record : nullptr);
            Tensor item = base_loss(eps, eps_hat);
            if (ground) {
                // keep each class token's attention mass inside its object
                for (size_t ci = 0; ci < spec.instances.size(); ++ci) {
                    if (seq.position_of(Role::cls, static_cast<int>(ci) + 1) < 0)
                        continue;
                    std::vector<double> m16(256);
                    for (int i = 0; i < 16; ++i)
                        for (int j = 0; j < 16; ++j) {
                            int cover = 0;
                            for (int di = 0; di < 2; ++di)
                                for (int dj = 0; dj < 2; ++dj)
                                    cover += spec.masks[ci][static_cast<size_t>(
                                        (2 * i + di) * kImageSize + 2 * j + dj)];
                            m16[static_cast<size_t>(i * 16 + j)] = cover / 4.0;
                        }
                    Tensor mask16 = Tensor::from_data({16, 16}, std::move(m16));
                    Tensor map =
                        select_maps(record, Role::cls, static_cast<int>(ci) + 1, 16);
                    Tensor inside = sum(mul(map, mask16));
                    Tensor frac = div(inside, add_scalar(sum(map), 1e-12));
                    item = add(item,
                               mul_scalar(add_scalar(mul_scalar(frac, -1.0), 1.0),
                                          config.grounding_weight));
                }
            }
            loss = loss.defined() ? add(loss, item) : item;
        }
        loss = mul_scalar(loss, 1.0 / config.batch_size);
        const double lv = loss.item();
        if (!std::isfinite(lv))
            throw std::runtime_error("pretrain: loss diverged (non-finite) at step " +
                                     std::to_string(step));
        backward(loss);
        opt.step(params);
        Optimizer::zero_grads(params);
        if (config.ema_decay > 0) {
            const double d = config.ema_decay;
            for (size_t pi = 0; pi < params.size(); ++pi) {
                const auto& w = params[pi]->tensor.data();
                auto& e = ema[pi];
                for (size_t i = 0; i < e.size(); ++i)
                    e[i] = d * e[i] + (1.0 - d) * w[i];
            }
        }
        if (log.is_open())
            log << step << "," << first_t << "," << lv << ",0,0," << lv << ",0\n";
        if (step % 200 == 0)
            std::cerr << "pretrain step " << step << " loss " << lv << "\n";
    }

    if (config.ema_decay > 0)
        for (size_t pi = 0; pi < params.size(); ++pi) {
            auto& w = params[pi]->tensor.data();
            for (size_t i = 0; i < w.size(); ++i)
                w[i] = precision() == Precision::f32
                           ? static_cast<double>(static_cast<float>(ema[pi][i]))
                           : ema[pi][i];
        }

    // validation epsilon-MSE on a fixed held-out batch
    NoGradGuard ng;
    std::mt19937 vrng(config.seed + 7777);
    std::uniform_real_distribution<double> vunit(0.0, 1.0);
    std::uniform_int_distribution<int> vt(0, sched.T - 1);
    double val = 0;
    const int n_val = 32;
    for (int i = 0; i < n_val; ++i) {
        SceneSpec spec = random_scene(vrng, vunit(vrng) < 0.45 ? 1 : 2);
        Tensor x0 = render_scene(spec);
        const int t = vt(vrng);
        Tensor eps = gaussian_like(x0.shape(), vrng);
        Tensor z = forward_noise(sched, x0, t, eps);
        Tensor tau = embed(tokenize(spec.caption, model.vocab), model.embed_table);
        val += base_loss(eps, model.net.forward(z, t, sched.T, tau)).item();
    }
    return val / n_val;
}

// ---- personalization ----------------------------------------------------------------

void personalize(Model& model, const PersonalizationTask& task,
                 const TrainConfig& config, bool train_wq) {
    task.validate(model.vocab);
    config.calibration.validate();
    freeze_for_personalization(model, train_wq);

    NoiseSchedule sched(config.timesteps);
    std::mt19937 rng(config.seed);
    std::uniform_int_distribution<int> t_dist(0, sched.T - 1);

    const std::string prompt = template_prompt(task.classes, task.modifiers, model.vocab);
    const TokenSeq prompt_seq = tokenize(prompt, model.vocab);
    const auto reg_set = build_regularization_set(task.classes, config.reg_set_size,
                                                  config.seed + 1);
    std::uniform_int_distribution<size_t> reg_pick(0, reg_set.empty() ? 0 : reg_set.size() - 1);

    auto params = model.all_params();
    Optimizer opt(config.optimizer, config.lr, params.size());

    std::ofstream log;
    if (!config.log_path.empty()) {
        log.open(config.log_path);
        log << "step,t_drawn,l_base,l_bind,l_ss,total,degenerate_map_count\n";
    }

    const bool calibration_on =
        (config.calibration.bind_enabled && config.calibration.lambda_bind > 0) ||
        (config.calibration.ss_enabled && config.calibration.lambda_ss > 0);

    for (int step = 0; step < config.personalize_steps; ++step) {
        Tensor base_sum;
        Tensor calib_sum;
        double bind_log = 0, ss_log = 0;
        int degenerate = 0, n_target = 0, first_t = -1;
        for (int b = 0; b < config.batch_size; ++b) {
            const bool is_target = reg_set.empty() || b % 2 == 0;
            const int t = t_dist(rng);
            Tensor x0;
            TokenSeq seq;
            if (is_target) {
                AugmentResult aug = augment(task.target_image, rng);
                x0 = aug.image;
                seq = prompt_seq;
                if (first_t < 0) first_t = t;
                ++n_target;
            } else {
                const auto& item = reg_set[reg_pick(rng)];
                x0 = item.image;
                seq = tokenize(item.caption, model.vocab);
            }
            Tensor eps = gaussian_like(x0.shape(), rng);
            Tensor z = forward_noise(sched, x0, t, eps);
            Tensor tau = embed(seq, model.embed_table);
            AttentionRecord record;
            record.roles = seq;
            Tensor eps_hat = model.net.forward(z, t, sched.T, tau,
                                               is_target && calibration_on ? &record : nullptr);
            Tensor item_loss = base_loss(eps, eps_hat);
            base_sum = base_sum.defined() ? add(base_sum, item_loss) : item_loss;
            if (is_target && calibration_on) {
                CalibrationResult cr = calibration_loss(record, config.calibration);
                calib_sum = calib_sum.defined() ? add(calib_sum, cr.loss) : cr.loss;
                bind_log += cr.bind_term;
                ss_log += cr.ss_term;
                degenerate += cr.degenerate_maps;
            }
        }
        Tensor loss = mul_scalar(base_sum, 1.0 / config.batch_size);
        const double base_log = loss.item();
        if (calib_sum.defined()) {
            calib_sum = mul_scalar(calib_sum, 1.0 / n_target);
            loss = add(loss, calib_sum);
        }
        if (n_target > 0) {
            bind_log /= n_target;
            ss_log /= n_target;
        }
        const double total = loss.item();
        if (!std::isfinite(total))
            throw std::runtime_error("personalize: loss diverged (non-finite) at step " +
                                     std::to_string(step));
        backward(loss);
        opt.step(params);
        Optimizer::zero_grads(params);
        if (log.is_open())
            log << step << "," << first_t << "," << base_log << "," << bind_log << ","
                << ss_log << "," << total << "," << degenerate << "\n";
    }
}

// ---- evaluation glue ------------------------------------------------------------------

EpsFn make_eps_fn(const Model& model, const std::string& prompt, int T,
                  AttentionRecord* record) {
    const TokenSeq cond_seq = tokenize(prompt, model.vocab);
    const TokenSeq null_seq = tokenize("", model.vocab);
    const Model* m = &model;
    return [m, cond_seq, null_seq, T, record](const Tensor& z, int t, bool conditional) {
        NoGradGuard ng;
        const TokenSeq& seq = conditional ? cond_seq : null_seq;
        Tensor tau = embed(seq, m->embed_table);
        AttentionRecord* rec = conditional ? record : nullptr;
        if (rec) rec->roles = seq;
        return m->net.forward(z, t, T, tau, rec);
    };
}

Tensor sample_image(const Model& model, const std::string& prompt, int steps,
                    double guidance, unsigned seed, int T) {
    NoiseSchedule sched(T);
    return ddim_sample(make_eps_fn(model, prompt, T), sched, {3, kImageSize, kImageSize},
                       steps, guidance, seed);
}

Tensor class_token_map(const Model& model, const Tensor& image, const std::string& prompt,
                       int concept_index, unsigned seed, int T) {
    NoGradGuard ng;
    NoiseSchedule sched(T);
    const TokenSeq seq = tokenize(prompt, model.vocab);
    Tensor tau = embed(seq, model.embed_table);
    std::mt19937 rng(seed);
    Tensor acc;
    for (int t : {100, 200, 300}) {
        Tensor eps = gaussian_like(image.shape(), rng);
        Tensor z = forward_noise(sched, image, t, eps);
        AttentionRecord record;
        record.roles = seq;
        model.net.forward(z, t, T, tau, &record);
        Tensor m = select_maps(record, Role::cls, concept_index, 16);
        acc = acc.defined() ? add(acc, m) : m;
    }
    return mul_scalar(acc, 1.0 / 3.0);
}

double attention_alignment(const Model& model, const PersonalizationTask& task,
                           int draws, unsigned seed, int T) {
    if (!task.scene_truth || task.scene_truth->masks.size() != task.classes.size())
        throw std::invalid_argument("attention_alignment: task needs scene ground truth");
    NoGradGuard ng;
    NoiseSchedule sched(T);
    const std::string prompt = template_prompt(task.classes, task.modifiers, model.vocab);
    const TokenSeq seq = tokenize(prompt, model.vocab);
    Tensor tau = embed(seq, model.embed_table);
    std::mt19937 rng(seed);
    double acc = 0;
    int n = 0;
    for (int d = 0; d < draws; ++d) {
        for (int t : {100, 200, 300}) {
            Tensor eps = gaussian_like(task.target_image.shape(), rng);
            Tensor z = forward_noise(sched, task.target_image, t, eps);
            AttentionRecord record;
            record.roles = seq;
            model.net.forward(z, t, T, tau, &record);
            for (size_t i = 0; i < task.classes.size(); ++i) {
                Tensor m = select_maps(record, Role::cls, static_cast<int>(i) + 1, 16);
                acc += attention_mask_iou(m, task.scene_truth->masks[i]);
                ++n;
            }
        }
    }
    return acc / n;
}

}  // namespace disendiff
