// Attention calibration: Gaussian smoothing, suppression, and the soft-IoU
// losses that bind modifier maps to class maps and separate class maps from
// each other.
#pragma once

#include "disendiff/attention.hpp"
#include "disendiff/tensor.hpp"

namespace disendiff {

enum class IouKind { minmax, product };  // product = soft Jaccard, experimental

struct CalibrationConfig {
    double lambda_bind = 0.01;
    double lambda_ss = 0.01;
    int gaussian_kernel = 3;   // odd, >= 1
    double gaussian_sigma = 1.0;
    int suppression_count = 1; // 0, 1 or 2 elementwise squarings
    bool bind_enabled = true;
    bool ss_enabled = true;
    bool separate_only = false;  // replace s&s by the plain overlap loss
    bool gaussian_enabled = true;
    bool all_scales = false;     // average maps over every resolution
    int resolution = 16;
    IouKind iou_kind = IouKind::minmax;

    void validate() const;  // throws on out-of-range fields
};

// Normalized Gaussian blur (kernel sums to 1), reflect padding; mass
// preserving. Kernel must be odd.
Tensor gaussian_smooth(const Tensor& map, int kernel, double sigma);
std::vector<double> gaussian_kernel_weights(int kernel, double sigma);

// f_m(A) = A .* A after clamping float-noise negatives to zero.
Tensor suppress(const Tensor& map);

// sum(min(A,B)) / sum(max(A,B)); both-all-zero is defined as 1 and counts
// as a degenerate input.
Tensor soft_iou(const Tensor& a, const Tensor& b, IouKind kind = IouKind::minmax);

Tensor l_bind(const Tensor& a_modifier, const Tensor& a_class_detached,
              IouKind kind = IouKind::minmax);
Tensor l_separate(const Tensor& a_ci, const Tensor& a_cj);
Tensor l_ss(const Tensor& a_ci, const Tensor& a_cj, IouKind kind = IouKind::minmax);

struct CalibrationResult {
    Tensor loss;        // scalar; lambda-weighted sum of both terms
    double bind_term = 0;  // unweighted sums, for logging
    double ss_term = 0;
    int degenerate_maps = 0;  // class maps skipped for near-zero mass
};

// The two attention-loss terms of the total objective:
//   lambda_bind * sum_i bind(G(A^mi), fm(G(A^ci)).detach)
// + lambda_ss   * sum_{i<j} ss(fm(G(A^ci)), fm(G(A^cj)))
// over the concepts present in the record's roles.
CalibrationResult calibration_loss(const AttentionRecord& record,
                                   const CalibrationConfig& config);

}  // namespace disendiff
