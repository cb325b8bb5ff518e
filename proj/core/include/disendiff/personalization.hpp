// The two training loops: pretraining the toy text-to-image model on
// synthetic scenes and personalizing it from a single image with the
// attention-calibration losses.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "disendiff/calibration.hpp"
#include "disendiff/denoiser.hpp"
#include "disendiff/diffusion.hpp"
#include "disendiff/scene.hpp"
#include "disendiff/tensor.hpp"

namespace disendiff {

struct TrainConfig {
    int personalize_steps = 250;
    int batch_size = 8;
    double lr = 8e-5;
    int reg_set_size = 200;
    CalibrationConfig calibration;
    int pretrain_steps = 2000;
    double pretrain_lr = 1e-3;  // pretraining only; `lr` drives personalization
    double ema_decay = 0.999;   // pretraining weight EMA; 0 disables
    // pretraining-only attention grounding: fraction of each class token's
    // 16x16 attention mass kept inside its ground-truth mask.  Emulates the
    // production backbone's property that class-token maps localize on the
    // object, which the calibration method presumes.  0 disables.
    double grounding_weight = 0.1;
    unsigned seed = 0;
    int timesteps = 400;          // noise-schedule length
    double cond_dropout = 0.1;    // null-conditioning probability in pretraining
    std::string optimizer = "adam";  // "adam" or "sgd"
    std::string log_path;         // optional CSV training log
};

struct PersonalizationTask {
    Tensor target_image;                  // (3,32,32) in [-1,1]
    std::vector<std::string> classes;     // 1..3 distinct class nouns
    std::vector<std::string> modifiers;   // matching modifier tokens
    std::optional<SceneSpec> scene_truth; // ground truth when synthetic

    void validate(const Vocabulary& vocab) const;
};

struct RegularizationItem {
    Tensor image;
    std::string caption;
    SceneSpec spec;
};

// `size` rendered scenes matching the caption "a c1 and a c2" with
// randomized instance attributes.
std::vector<RegularizationItem> build_regularization_set(
    const std::vector<std::string>& classes, int size, unsigned seed);

// Random rescale in [0.6,1.2] pasted centered on a neutral background plus
// horizontal flip with p = 0.5. Caption is unchanged; the draw is logged by
// the trainer.
struct AugmentResult {
    Tensor image;
    double scale = 1.0;
    bool flipped = false;
};
AugmentResult augment(const Tensor& image, std::mt19937& rng);
Tensor rescale_paste(const Tensor& image, double scale, double background);
Tensor hflip(const Tensor& image);

// ---- training loops ----------------------------------------------------------

// Pretrains on freshly sampled synthetic scenes; writes no files itself.
// Returns the final validation epsilon-MSE.
double pretrain(Model& model, const TrainConfig& config);

// 250-step single-image personalization per the total objective; only
// parameters flagged by freeze_for_personalization change.
void personalize(Model& model, const PersonalizationTask& task,
                 const TrainConfig& config, bool train_wq = false);

// ---- evaluation glue -----------------------------------------------------------

// Conditional / null-conditioned noise prediction bound to a model+prompt.
EpsFn make_eps_fn(const Model& model, const std::string& prompt, int T,
                  AttentionRecord* record = nullptr);

Tensor sample_image(const Model& model, const std::string& prompt, int steps,
                    double guidance, unsigned seed, int T = 400);

// Head/layer-averaged 16x16 class-token map of `image` noised at fixed
// timesteps (100, 200, 300 averaged), deterministic per seed.
Tensor class_token_map(const Model& model, const Tensor& image,
                       const std::string& prompt, int concept_index,
                       unsigned seed = 1234, int T = 400);

// Mean attention_mask_iou of every class token against its ground-truth
// mask, averaged over `draws` noising draws at t in {100,200,300}.
double attention_alignment(const Model& model, const PersonalizationTask& task,
                           int draws = 20, unsigned seed = 99, int T = 400);

}  // namespace disendiff
