#include "disendiff/calibration.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace disendiff {

void CalibrationConfig::validate() const {
    if (gaussian_kernel < 1 || gaussian_kernel % 2 == 0)
        throw std::invalid_argument("calibration: gaussian kernel must be odd and >= 1, got " +
                                    std::to_string(gaussian_kernel));
    if (gaussian_sigma <= 0)
        throw std::invalid_argument("calibration: gaussian sigma must be > 0");
    if (lambda_bind < 0 || lambda_ss < 0)
        throw std::invalid_argument("calibration: lambdas must be >= 0");
    if (suppression_count < 0 || suppression_count > 2)
        throw std::invalid_argument("calibration: suppression count must be 0, 1 or 2");
}

std::vector<double> gaussian_kernel_weights(int kernel, double sigma) {
    if (kernel < 1 || kernel % 2 == 0)
        throw std::invalid_argument("gaussian kernel size must be odd, got " +
                                    std::to_string(kernel));
    const int r = kernel / 2;
    std::vector<double> w(static_cast<size_t>(kernel) * kernel);
    double total = 0;
    for (int i = -r; i <= r; ++i)
        for (int j = -r; j <= r; ++j) {
            const double v = std::exp(-(i * i + j * j) / (2.0 * sigma * sigma));
            w[static_cast<size_t>((i + r) * kernel + (j + r))] = v;
            total += v;
        }
    for (auto& v : w) v /= total;
    return w;
}

Tensor gaussian_smooth(const Tensor& map, int kernel, double sigma) {
    if (kernel == 1) return mul_scalar(map, 1.0);  // identity, keeps the graph edge
    return conv2d_reflect_fixed(map, gaussian_kernel_weights(kernel, sigma), kernel);
}

Tensor suppress(const Tensor& map) {
    Tensor clamped = relu(map);
    return mul(clamped, clamped);
}

namespace {
double total_mass(const Tensor& t) {
    double s = 0;
    for (double v : t.data()) s += v;
    return s;
}
}  // namespace

Tensor soft_iou(const Tensor& a, const Tensor& b, IouKind kind) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("soft_iou: shape mismatch");
    if (total_mass(a) <= 0 && total_mass(b) <= 0) {
        std::cerr << "soft_iou: degenerate all-zero inputs, defining IoU = 1\n";
        return Tensor::scalar(1.0);
    }
    if (kind == IouKind::minmax)
        return div(sum(emin(a, b)), sum(emax(a, b)));
    // soft Jaccard: <a,b> / (sum a + sum b - <a,b>)
    Tensor inter = sum(mul(a, b));
    Tensor uni = sub(add(sum(a), sum(b)), inter);
    return div(inter, uni);
}

Tensor l_bind(const Tensor& a_modifier, const Tensor& a_class_detached, IouKind kind) {
    return add_scalar(mul_scalar(soft_iou(a_modifier, a_class_detached, kind), -1.0), 1.0);
}

Tensor l_separate(const Tensor& a_ci, const Tensor& a_cj) {
    return sum(emin(a_ci, a_cj));
}

Tensor l_ss(const Tensor& a_ci, const Tensor& a_cj, IouKind kind) {
    return soft_iou(a_ci, a_cj, kind);
}

CalibrationResult calibration_loss(const AttentionRecord& record,
                                   const CalibrationConfig& config) {
    config.validate();
    auto select = [&](Role role, int i) {
        return config.all_scales
                   ? select_maps_all_scales(record, role, i, config.resolution)
                   : select_maps(record, role, i, config.resolution);
    };

    // number of concepts present, by contiguous class roles
    int s = 0;
    while (s < 3 && record.roles.position_of(Role::cls, s + 1) >= 0) ++s;
    if (s == 0)
        throw std::invalid_argument("calibration_loss: no class roles in prompt");

    auto pipeline = [&](Tensor m) {
        if (config.gaussian_enabled)
            m = gaussian_smooth(m, config.gaussian_kernel, config.gaussian_sigma);
        return m;
    };
    auto class_pipeline = [&](Tensor m) {
        m = pipeline(m);
        for (int k = 0; k < config.suppression_count; ++k) m = suppress(m);
        return m;
    };

    CalibrationResult res;
    res.loss = Tensor::scalar(0.0);

    std::vector<Tensor> class_maps;   // f_m(G(A^ci)), grad-carrying
    std::vector<bool> degenerate(static_cast<size_t>(s), false);
    for (int i = 1; i <= s; ++i) {
        Tensor cm = class_pipeline(select(Role::cls, i));
        if (total_mass(cm) < 1e-6) {
            degenerate[static_cast<size_t>(i - 1)] = true;
            ++res.degenerate_maps;
        }
        class_maps.push_back(cm);
    }

    if (config.bind_enabled && config.lambda_bind > 0) {
        Tensor bind_sum;
        for (int i = 1; i <= s; ++i) {
            if (record.roles.position_of(Role::modifier, i) < 0)
                throw std::invalid_argument("calibration_loss: modifier role " +
                                            std::to_string(i) + " absent from prompt");
            if (degenerate[static_cast<size_t>(i - 1)]) continue;
            Tensor mm = pipeline(select(Role::modifier, i));
            Tensor term = l_bind(mm, class_maps[static_cast<size_t>(i - 1)].detach(),
                                 config.iou_kind);
            bind_sum = bind_sum.defined() ? add(bind_sum, term) : term;
        }
        if (bind_sum.defined()) {
            res.bind_term = bind_sum.item();
            res.loss = add(res.loss, mul_scalar(bind_sum, config.lambda_bind));
        }
    }

    if (config.ss_enabled && config.lambda_ss > 0 && s >= 2) {
        Tensor ss_sum;
        for (int i = 1; i <= s; ++i)
            for (int j = i + 1; j <= s; ++j) {
                if (degenerate[static_cast<size_t>(i - 1)] ||
                    degenerate[static_cast<size_t>(j - 1)])
                    continue;
                Tensor term =
                    config.separate_only
                        ? l_separate(class_maps[static_cast<size_t>(i - 1)],
                                     class_maps[static_cast<size_t>(j - 1)])
                        : l_ss(class_maps[static_cast<size_t>(i - 1)],
                               class_maps[static_cast<size_t>(j - 1)], config.iou_kind);
                ss_sum = ss_sum.defined() ? add(ss_sum, term) : term;
            }
        if (ss_sum.defined()) {
            res.ss_term = ss_sum.item();
            res.loss = add(res.loss, mul_scalar(ss_sum, config.lambda_ss));
        }
    }
    return res;
}

}  // namespace disendiff
