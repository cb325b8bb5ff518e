#include "disendiff/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace disendiff {

bool AttentionRecord::has_resolution(int r) const {
    for (const auto& m : maps)
        if (m.resolution == r) return true;
    return false;
}

CrossAttentionOut cross_attention(const Tensor& phi, const Tensor& tau,
                                  const Tensor& w_q, const Tensor& w_k,
                                  const Tensor& w_v, int heads,
                                  const std::string& layer_name, int timestep) {
    const Shape& ps = phi.shape();
    if (ps.size() != 3 || ps[1] != ps[2])
        throw std::invalid_argument("cross_attention: phi must be (C,r,r)");
    const int c = ps[0], r = ps[1];
    const int n = tau.shape()[0];
    const int d = w_q.shape()[1];
    if (w_q.shape()[0] != c || w_k.shape()[1] != d ||
        w_k.shape()[0] != tau.shape()[1] || w_v.shape()[0] != tau.shape()[1] ||
        w_v.shape()[1] != c)
        throw std::invalid_argument("cross_attention: projection shapes inconsistent");
    if (d % heads != 0 || c % heads != 0)
        throw std::invalid_argument("cross_attention: d and C must divide by heads");
    const int dh = d / heads;
    const int ch = c / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor x = transpose2d(reshape(phi, {c, r * r}));  // (r*r, C)
    Tensor q = matmul(x, w_q);                         // (r*r, d)
    Tensor k = matmul(tau, w_k);                       // (N, d)
    Tensor v = matmul(tau, w_v);                       // (N, C)

    CrossAttentionOut res;
    Tensor attended;  // (r*r, C) built head by head
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor logits = mul_scalar(matmul(qh, transpose2d(kh)), scale);  // (r*r,N)
        Tensor a = softmax_lastdim(logits);
        res.maps.push_back(AttentionMap{a, r, h, timestep, layer_name});
        Tensor vh = slice_cols(v, h * ch, (h + 1) * ch);
        Tensor oh = matmul(a, vh);  // (r*r, ch)
        attended = h == 0 ? oh : concat_cols(attended, oh);
    }
    res.out = add(phi, reshape(transpose2d(attended), {c, r, r}));
    return res;
}

namespace {

Tensor upsample_to(Tensor m, int target) {
    while (m.shape()[1] < target)
        m = upsample_nearest2x(m);
    if (m.shape()[1] != target)
        throw std::invalid_argument("select_maps: cannot resize map to resolution " +
                                    std::to_string(target));
    return m;
}

Tensor average_role_maps(const AttentionRecord& record, Role role, int concept_index,
                         int resolution, bool all_scales) {
    const int pos = record.roles.position_of(role, concept_index);
    if (pos < 0)
        throw std::invalid_argument("select_maps: role concept " +
                                    std::to_string(concept_index) +
                                    " absent from prompt");
    Tensor acc;
    int count = 0;
    for (const auto& m : record.maps) {
        if (!all_scales && m.resolution != resolution) continue;
        const int r = m.resolution;
        Tensor slice = reshape(slice_lastdim(m.values, pos), {1, r, r});
        if (all_scales && r != resolution) slice = upsample_to(slice, resolution);
        acc = count == 0 ? slice : add(acc, slice);
        ++count;
    }
    if (count == 0)
        throw std::invalid_argument("select_maps: no maps recorded at resolution " +
                                    std::to_string(resolution));
    return reshape(mul_scalar(acc, 1.0 / count), {resolution, resolution});
}

}  // namespace

Tensor select_maps(const AttentionRecord& record, Role role, int concept_index,
                   int resolution) {
    return average_role_maps(record, role, concept_index, resolution, false);
}

Tensor select_maps_all_scales(const AttentionRecord& record, Role role,
                              int concept_index, int resolution) {
    return average_role_maps(record, role, concept_index, resolution, true);
}

}  // namespace disendiff
