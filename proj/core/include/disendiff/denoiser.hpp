// Toy conditional U-Net noise predictor with cross-attention at the 16x16
// and 8x8 feature levels and named, freezable parameter groups.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "disendiff/attention.hpp"
#include "disendiff/tensor.hpp"
#include "disendiff/tokens.hpp"

namespace disendiff {

struct DenoiserConfig {
    int image_size = 32;
    int base_channels = 32;
    std::vector<int> resolutions = {32, 16, 8};
    std::vector<int> attention_resolutions = {16, 8};
    int heads = 2;
    int time_embed_dim = 64;
    int groups = 8;  // group-norm groups
};

struct ParameterGroup {
    std::string name;
    Tensor tensor;
    bool trainable_in_personalization = false;
    std::vector<int> trainable_rows;  // row subset when non-empty (embedding table)
};

class Denoiser {
  public:
    explicit Denoiser(const DenoiserConfig& cfg, unsigned seed);

    // z: (3,32,32), t in [0,T), tau: (N,embed_dim). Returns predicted noise
    // and, when record != nullptr, the per-layer attention maps.
    Tensor forward(const Tensor& z, int t, int T, const Tensor& tau,
                   AttentionRecord* record = nullptr) const;

    const DenoiserConfig& config() const { return cfg_; }
    std::vector<ParameterGroup>& params() { return params_; }
    const std::vector<ParameterGroup>& params() const { return params_; }
    Tensor param(const std::string& name) const;

  private:
    Tensor& register_param(const std::string& name, Tensor t);
    Tensor res_block(const std::string& name, const Tensor& x, const Tensor& temb) const;
    Tensor attn_block(const std::string& name, const Tensor& x, const Tensor& tau,
                      int t, AttentionRecord* record) const;

    DenoiserConfig cfg_;
    std::vector<ParameterGroup> params_;
    std::map<std::string, size_t> index_;
};

// Full trainable state: the denoiser plus the text-embedding table.
struct Model {
    DenoiserConfig cfg;
    Vocabulary vocab;
    Denoiser net;
    Tensor embed_table;  // (|V|, embed_dim)

    explicit Model(const DenoiserConfig& c = DenoiserConfig{}, unsigned seed = 0);

    // All named parameters including "embed.table".
    std::vector<ParameterGroup*> all_params();
    std::vector<const ParameterGroup*> all_params() const;

    ParameterGroup embed_group;  // wraps embed_table with row-level flags
};

// Flags exactly the cross-attention W_K / W_V matrices (plus W_Q with
// train_wq) and the modifier rows of the embedding table as trainable;
// everything else is frozen out of the tape.
void freeze_for_personalization(Model& model, bool train_wq = false);
// Re-enables gradients everywhere (pretraining).
void unfreeze_all(Model& model);

}  // namespace disendiff
