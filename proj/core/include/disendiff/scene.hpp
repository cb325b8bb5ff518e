// Procedural multi-object scenes with ground-truth masks, plus the classical
// detector used as the evaluation oracle.
#pragma once

#include <array>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "disendiff/tensor.hpp"
#include "disendiff/tokens.hpp"

namespace disendiff {

inline constexpr int kImageSize = 32;

enum class ShapeKind { disc, square, triangle, ring };
std::string shape_name(ShapeKind k);
ShapeKind shape_from_name(const std::string& name);

struct ConceptInstance {
    ShapeKind shape = ShapeKind::disc;
    std::array<double, 3> color{1, 0, 0};  // [0,1]
    double cx = 16, cy = 16;               // pixels
    double radius = 6;                     // radius / half-extent
    bool stripe_texture = false;
};

struct SceneSpec {
    std::vector<ConceptInstance> instances;  // 1..3
    double background = 0.0;                 // gray level in [-1,1]
    std::string caption;
    std::vector<std::vector<uint8_t>> masks; // filled by render_scene

    void validate() const;  // margin and pairwise-overlap invariants
};

// Anti-aliased rasterization (4x supersampling per axis); also fills
// spec.masks with >50%-coverage binary masks.
Tensor render_scene(SceneSpec& spec);

// Random single/multi instance scene with palette colors and a caption the
// vocabulary can tokenize. Colors are drawn per instance without repeats.
SceneSpec random_scene(std::mt19937& rng, int n_instances,
                       const std::vector<ShapeKind>* allowed = nullptr,
                       bool allow_stripes = false, bool color_words = true);

struct Detection {
    ShapeKind shape;
    std::array<double, 3> mean_color;  // [0,1]
    std::vector<uint8_t> mask;         // 32x32
    int area = 0;
};

// Background subtraction against the median gray, 8-connected components,
// then circularity / hole-count / corner-count classification.
std::vector<Detection> detect_concepts(const Tensor& image);

// map: (16,16) nonnegative; mask: 32x32 binary. Mask is area-downsampled to
// 16x16 (>0.5), map binarized at half its max; returns set IoU.
double attention_mask_iou(const Tensor& map, const std::vector<uint8_t>& mask);

// ---- disentanglement evaluation --------------------------------------------

struct FamilyMetrics {
    std::string family;      // "combined", "concept1", "concept2"
    std::string prompt;
    double presence = 0;     // prompted shapes all detected
    double leakage = 0;      // an un-prompted task shape detected (area >= 8)
    double color_error = 0;  // mean per-channel max deviation vs target colors
    double attn_iou = 0;     // mean class-token attention IoU vs detected mask
    int samples = 0;
};

struct MetricsReport {
    std::vector<FamilyMetrics> rows;
    void save_csv(const std::string& path) const;
    std::string summary() const;
};

// Produces a (3,32,32) image for a prompt and seed.
using SampleFn = std::function<Tensor(const std::string& prompt, unsigned seed)>;
// 16x16 class-token attention map for a given image/prompt/concept.
using ClassMapFn = std::function<Tensor(const Tensor& image, const std::string& prompt,
                                        int concept_index)>;

struct EvalTask {
    std::vector<std::string> classes;    // 1..3 distinct class nouns
    std::vector<std::string> modifiers;  // matching modifier tokens
    std::vector<std::array<double, 3>> target_colors;  // per concept, [0,1]
};

MetricsReport eval_disentanglement(const SampleFn& sample, const ClassMapFn& class_map,
                                   const EvalTask& task, int n_samples = 16,
                                   unsigned seed = 0);

}  // namespace disendiff
