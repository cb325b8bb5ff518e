#include "disendiff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace disendiff {

namespace {

constexpr int kSinusoidDim = 32;

Tensor sinusoidal_embedding(int t, int T) {
    (void)T;
    std::vector<double> e(kSinusoidDim);
    const int half = kSinusoidDim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        e[static_cast<size_t>(i)] = std::cos(t * freq);
        e[static_cast<size_t>(half + i)] = std::sin(t * freq);
    }
    return Tensor::from_data({1, kSinusoidDim}, std::move(e));
}

struct Init {
    std::mt19937 rng;
    explicit Init(unsigned seed) : rng(seed) {}

    Tensor conv(int cout, int cin, int k) {
        std::normal_distribution<double> g(0.0, std::sqrt(2.0 / (cin * k * k)));
        std::vector<double> d(static_cast<size_t>(cout) * cin * k * k);
        for (auto& v : d) v = g(rng);
        return Tensor::from_data({cout, cin, k, k}, std::move(d), true);
    }
    Tensor linear(int in, int out) {
        std::normal_distribution<double> g(0.0, std::sqrt(1.0 / in));
        std::vector<double> d(static_cast<size_t>(in) * out);
        for (auto& v : d) v = g(rng);
        return Tensor::from_data({in, out}, std::move(d), true);
    }
    Tensor zeros(const Shape& s) { return Tensor::zeros(s, true); }
    Tensor ones(const Shape& s) { return Tensor::full(s, 1.0, true); }
};

}  // namespace

Tensor& Denoiser::register_param(const std::string& name, Tensor t) {
    index_[name] = params_.size();
    params_.push_back(ParameterGroup{name, std::move(t), false, {}});
    return params_.back().tensor;
}

Tensor Denoiser::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
        throw std::out_of_range("denoiser: unknown parameter '" + name + "'");
    return params_[it->second].tensor;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, unsigned seed) : cfg_(cfg) {
    if (std::find(cfg.attention_resolutions.begin(), cfg.attention_resolutions.end(), 16) ==
        cfg.attention_resolutions.end())
        throw std::invalid_argument("denoiser: 16 must be an attention resolution");
    Init init(seed);
    const int c32 = cfg.base_channels / 2;     // 16
    const int c16 = cfg.base_channels;         // 32
    const int c8 = cfg.base_channels * 3 / 2;  // 48
    const int te = cfg.time_embed_dim;
    const int d = 32;  // attention key/query width

    register_param("time.fc1.w", init.linear(kSinusoidDim, te));
    register_param("time.fc1.b", init.zeros({te}));
    register_param("time.fc2.w", init.linear(te, te));
    register_param("time.fc2.b", init.zeros({te}));

    register_param("stem.w", init.conv(c32, 3, 3));
    register_param("stem.b", init.zeros({c32}));

    auto res_params = [&](const std::string& name, int cin, int cout) {
        register_param(name + ".gn1.g", init.ones({cin}));
        register_param(name + ".gn1.b", init.zeros({cin}));
        register_param(name + ".conv1.w", init.conv(cout, cin, 3));
        register_param(name + ".conv1.b", init.zeros({cout}));
        register_param(name + ".temb.w", init.linear(te, cout));
        register_param(name + ".temb.b", init.zeros({cout}));
        register_param(name + ".gn2.g", init.ones({cout}));
        register_param(name + ".gn2.b", init.zeros({cout}));
        register_param(name + ".conv2.w", init.conv(cout, cout, 3));
        register_param(name + ".conv2.b", init.zeros({cout}));
        if (cin != cout) {
            register_param(name + ".skip.w", init.conv(cout, cin, 1));
            register_param(name + ".skip.b", init.zeros({cout}));
        }
    };
    auto attn_params = [&](const std::string& name, int c) {
        register_param(name + ".W_Q", init.linear(c, d));
        register_param(name + ".W_K", init.linear(kEmbedDim, d));
        register_param(name + ".W_V", init.linear(kEmbedDim, c));
    };

    res_params("down32.res", c32, c32);
    register_param("down16.down.w", init.conv(c16, c32, 3));
    register_param("down16.down.b", init.zeros({c16}));
    res_params("down16.res", c16, c16);
    attn_params("down16.attn", c16);
    register_param("down8.down.w", init.conv(c8, c16, 3));
    register_param("down8.down.b", init.zeros({c8}));
    res_params("down8.res", c8, c8);
    attn_params("down8.attn", c8);
    res_params("mid.res", c8, c8);
    register_param("up16.up.w", init.conv(c16, c8, 3));
    register_param("up16.up.b", init.zeros({c16}));
    res_params("up16.res", 2 * c16, c16);
    attn_params("up16.attn", c16);
    register_param("up32.up.w", init.conv(c32, c16, 3));
    register_param("up32.up.b", init.zeros({c32}));
    res_params("up32.res", 2 * c32, c32);
    register_param("out.gn.g", init.ones({c32}));
    register_param("out.gn.b", init.zeros({c32}));
    // near-zero output conv so the model starts close to eps_hat = 0
    Tensor outw = init.conv(3, c32, 3);
    for (auto& v : outw.data()) {
        v *= 0.01;
        if (precision() == Precision::f32) v = static_cast<double>(static_cast<float>(v));
    }
    register_param("out.w", outw);
    register_param("out.b", init.zeros({3}));
}

Tensor Denoiser::res_block(const std::string& name, const Tensor& x,
                           const Tensor& temb) const {
    Tensor h = group_norm(x, param(name + ".gn1.g"), param(name + ".gn1.b"), cfg_.groups);
    h = conv2d(silu(h), param(name + ".conv1.w"), param(name + ".conv1.b"));
    Tensor tp = add_rowvec(matmul(temb, param(name + ".temb.w")), param(name + ".temb.b"));
    h = add_channel_bias(h, reshape(tp, {tp.dim(1)}));
    h = group_norm(h, param(name + ".gn2.g"), param(name + ".gn2.b"), cfg_.groups);
    h = conv2d(silu(h), param(name + ".conv2.w"), param(name + ".conv2.b"));
    Tensor skip = x;
    if (x.shape()[0] != h.shape()[0])
        skip = conv2d(x, param(name + ".skip.w"), param(name + ".skip.b"), 1, 0);
    return add(h, skip);
}

Tensor Denoiser::attn_block(const std::string& name, const Tensor& x, const Tensor& tau,
                            int t, AttentionRecord* record) const {
    auto res = cross_attention(x, tau, param(name + ".W_Q"), param(name + ".W_K"),
                               param(name + ".W_V"), cfg_.heads, name, t);
    if (record)
        for (auto& m : res.maps) record->maps.push_back(std::move(m));
    return res.out;
}

Tensor Denoiser::forward(const Tensor& z, int t, int T, const Tensor& tau,
                         AttentionRecord* record) const {
    if (t < 0 || t >= T)
        throw std::out_of_range("denoiser: t=" + std::to_string(t) + " outside [0," +
                                std::to_string(T) + ")");
    const Shape& s = z.shape();
    if (s.size() != 3 || s[0] != 3 || s[1] != cfg_.image_size || s[2] != cfg_.image_size)
        throw std::invalid_argument("denoiser: bad input shape");

    Tensor temb = add_rowvec(matmul(sinusoidal_embedding(t, T), param("time.fc1.w")),
                             param("time.fc1.b"));
    temb = add_rowvec(matmul(silu(temb), param("time.fc2.w")), param("time.fc2.b"));

    Tensor h32 = conv2d(z, param("stem.w"), param("stem.b"));
    h32 = res_block("down32.res", h32, temb);

    Tensor h16 = conv2d(h32, param("down16.down.w"), param("down16.down.b"), 2, 1);
    h16 = res_block("down16.res", h16, temb);
    h16 = attn_block("down16.attn", h16, tau, t, record);

    Tensor h8 = conv2d(h16, param("down8.down.w"), param("down8.down.b"), 2, 1);
    h8 = res_block("down8.res", h8, temb);
    h8 = attn_block("down8.attn", h8, tau, t, record);

    h8 = res_block("mid.res", h8, temb);

    Tensor u16 = conv2d(upsample_nearest2x(h8), param("up16.up.w"), param("up16.up.b"));
    u16 = res_block("up16.res", concat_channels(u16, h16), temb);
    u16 = attn_block("up16.attn", u16, tau, t, record);

    Tensor u32 = conv2d(upsample_nearest2x(u16), param("up32.up.w"), param("up32.up.b"));
    u32 = res_block("up32.res", concat_channels(u32, h32), temb);

    Tensor out = group_norm(u32, param("out.gn.g"), param("out.gn.b"), cfg_.groups);
    return conv2d(silu(out), param("out.w"), param("out.b"));
}

// ---- model bundle --------------------------------------------------------------

Model::Model(const DenoiserConfig& c, unsigned seed)
    : cfg(c), vocab(), net(c, seed), embed_table(init_embedding_table(vocab, seed + 1)) {
    embed_group = ParameterGroup{"embed.table", embed_table, false, {}};
}

std::vector<ParameterGroup*> Model::all_params() {
    std::vector<ParameterGroup*> out;
    for (auto& p : net.params()) out.push_back(&p);
    embed_group.tensor = embed_table;
    out.push_back(&embed_group);
    return out;
}

std::vector<const ParameterGroup*> Model::all_params() const {
    std::vector<const ParameterGroup*> out;
    for (const auto& p : net.params()) out.push_back(&p);
    out.push_back(&embed_group);
    return out;
}

void freeze_for_personalization(Model& model, bool train_wq) {
    for (auto& p : model.net.params()) {
        const bool is_kv = p.name.size() > 4 &&
                           (p.name.ends_with(".W_K") || p.name.ends_with(".W_V"));
        const bool is_q = p.name.ends_with(".W_Q");
        p.trainable_in_personalization = is_kv || (train_wq && is_q);
        p.tensor.set_requires_grad(p.trainable_in_personalization);
    }
    model.embed_group.trainable_in_personalization = true;
    model.embed_group.trainable_rows.clear();
    for (int m = 1; m <= 3; ++m)
        model.embed_group.trainable_rows.push_back(model.vocab.modifier_id(m));
    model.embed_table.set_requires_grad(true);
}

void unfreeze_all(Model& model) {
    for (auto& p : model.net.params()) {
        p.trainable_in_personalization = false;
        p.tensor.set_requires_grad(true);
    }
    model.embed_group.trainable_in_personalization = false;
    model.embed_group.trainable_rows.clear();
    model.embed_table.set_requires_grad(true);
}

}  // namespace disendiff
