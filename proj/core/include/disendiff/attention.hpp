// Cross-attention between spatial features and token embeddings, with
// per-layer recording of the spatial attention maps.
#pragma once

#include <string>
#include <vector>

#include "disendiff/tensor.hpp"
#include "disendiff/tokens.hpp"

namespace disendiff {

struct AttentionMap {
    Tensor values;      // (r*r, N), rows are pixels, softmaxed over tokens
    int resolution = 0; // r
    int head_index = 0;
    int timestep = 0;
    std::string layer;  // e.g. "down16.attn"
};

struct AttentionRecord {
    std::vector<AttentionMap> maps;
    TokenSeq roles;

    bool has_resolution(int r) const;
};

// phi: (C,r,r); tau: (N,embed_dim); W_Q: (C,d); W_K: (embed_dim,d);
// W_V: (embed_dim,C). d and C must be divisible by heads; softmax scale is
// 1/sqrt(d_head) with d_head the per-head query/key dimension.
struct CrossAttentionOut {
    Tensor out;                      // (C,r,r), phi + A.V
    std::vector<AttentionMap> maps;  // one per head
};
CrossAttentionOut cross_attention(const Tensor& phi, const Tensor& tau,
                                  const Tensor& w_q, const Tensor& w_k,
                                  const Tensor& w_v, int heads,
                                  const std::string& layer_name = "",
                                  int timestep = 0);

// Head- and layer-averaged map slice for one token role at a resolution;
// returned as (r,r).
Tensor select_maps(const AttentionRecord& record, Role role, int concept_index,
                   int resolution);
// Average over every recorded resolution (all-scales ablation); maps are
// bilinearly resized to `resolution` before averaging.
Tensor select_maps_all_scales(const AttentionRecord& record, Role role,
                              int concept_index, int resolution);

}  // namespace disendiff
