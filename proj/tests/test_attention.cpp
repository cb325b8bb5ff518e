#include <doctest.h>

#include <cmath>
#include <random>

#include "disendiff/attention.hpp"

using namespace disendiff;

namespace {

Tensor randn(const Shape& shape, unsigned seed, double scale = 1.0,
             bool requires_grad = false) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> g(0.0, scale);
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = g(rng);
    return Tensor::from_data(shape, std::move(v), requires_grad);
}

struct F64Scope {
    F64Scope() { set_precision(Precision::f64); }
    ~F64Scope() { set_precision(Precision::f32); }
};

// Straight-line single-head attention oracle over plain doubles.
std::vector<double> oracle_single_head(const std::vector<double>& phi,  // (P,C)
                                       const std::vector<double>& tau,  // (N,E)
                                       const std::vector<double>& wq,   // (C,d)
                                       const std::vector<double>& wk,   // (E,d)
                                       int P, int C, int N, int E, int d,
                                       std::vector<double>* attn_out) {
    std::vector<double> Q(static_cast<size_t>(P) * d, 0.0);
    std::vector<double> K(static_cast<size_t>(N) * d, 0.0);
    for (int p = 0; p < P; ++p)
        for (int j = 0; j < d; ++j)
            for (int c = 0; c < C; ++c)
                Q[static_cast<size_t>(p * d + j)] += phi[static_cast<size_t>(p * C + c)] *
                                                     wq[static_cast<size_t>(c * d + j)];
    for (int n = 0; n < N; ++n)
        for (int j = 0; j < d; ++j)
            for (int e = 0; e < E; ++e)
                K[static_cast<size_t>(n * d + j)] += tau[static_cast<size_t>(n * E + e)] *
                                                     wk[static_cast<size_t>(e * d + j)];
    std::vector<double> A(static_cast<size_t>(P) * N, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (int p = 0; p < P; ++p) {
        double mx = -1e300;
        for (int n = 0; n < N; ++n) {
            double s = 0;
            for (int j = 0; j < d; ++j)
                s += Q[static_cast<size_t>(p * d + j)] * K[static_cast<size_t>(n * d + j)];
            A[static_cast<size_t>(p * N + n)] = s * scale;
            mx = std::max(mx, s * scale);
        }
        double z = 0;
        for (int n = 0; n < N; ++n) {
            A[static_cast<size_t>(p * N + n)] = std::exp(A[static_cast<size_t>(p * N + n)] - mx);
            z += A[static_cast<size_t>(p * N + n)];
        }
        for (int n = 0; n < N; ++n) A[static_cast<size_t>(p * N + n)] /= z;
    }
    if (attn_out) *attn_out = A;
    return A;
}

}  // namespace

TEST_CASE("attention rows are probability distributions") {
    const int C = 8, r = 4, heads = 2, d = 8;
    Tensor phi = randn({C, r, r}, 1);
    Tensor tau = randn({kSeqLen, kEmbedDim}, 2);
    Tensor wq = randn({C, d}, 3, 0.3);
    Tensor wk = randn({kEmbedDim, d}, 4, 0.3);
    Tensor wv = randn({kEmbedDim, C}, 5, 0.3);
    auto out = cross_attention(phi, tau, wq, wk, wv, heads, "test", 0);
    REQUIRE(out.maps.size() == static_cast<size_t>(heads));
    for (const auto& m : out.maps) {
        REQUIRE(m.values.shape() == Shape{r * r, kSeqLen});
        CHECK(m.resolution == r);
        for (int p = 0; p < r * r; ++p) {
            double s = 0;
            for (int n = 0; n < kSeqLen; ++n) {
                const double a = m.values.at(p * kSeqLen + n);
                CHECK(a >= 0.0);
                s += a;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
    CHECK(out.out.shape() == Shape{C, r, r});
}

TEST_CASE("single-head attention matches a straight-line oracle") {
    F64Scope f64;
    const int C = 6, r = 3, d = 4, N = kSeqLen, E = kEmbedDim, P = r * r;
    Tensor phi = randn({C, r, r}, 11);
    Tensor tau = randn({N, E}, 12);
    Tensor wq = randn({C, d}, 13, 0.4);
    Tensor wk = randn({E, d}, 14, 0.4);
    Tensor wv = randn({E, C}, 15, 0.4);
    auto out = cross_attention(phi, tau, wq, wk, wv, 1, "oracle", 0);
    // phi is stored channels-first; the oracle wants pixel-major rows
    std::vector<double> phi_pm(static_cast<size_t>(P) * C);
    for (int p = 0; p < P; ++p)
        for (int c = 0; c < C; ++c)
            phi_pm[static_cast<size_t>(p * C + c)] = phi.at(c * P + p);
    std::vector<double> A;
    oracle_single_head(phi_pm, tau.data(), wq.data(), wk.data(), P, C, N, E, d, &A);
    REQUIRE(out.maps.size() == 1);
    for (int i = 0; i < P * N; ++i)
        CHECK(out.maps[0].values.at(i) == doctest::Approx(A[static_cast<size_t>(i)]).epsilon(1e-9));
    // residual: out - phi equals A.(tau Wv)
    std::vector<double> V(static_cast<size_t>(N) * C, 0.0);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int e = 0; e < E; ++e)
                V[static_cast<size_t>(n * C + c)] += tau.at(n * E + e) * wv.at(e * C + c);
    for (int p = 0; p < P; ++p)
        for (int c = 0; c < C; ++c) {
            double av = 0;
            for (int n = 0; n < N; ++n)
                av += A[static_cast<size_t>(p * N + n)] * V[static_cast<size_t>(n * C + c)];
            const double got = out.out.at(c * P + p) - phi.at(c * P + p);
            CHECK(got == doctest::Approx(av).epsilon(1e-8));
        }
}

TEST_CASE("two heads with identical per-head weights agree with one head") {
    F64Scope f64;
    const int C = 8, r = 2, d = 8;
    Tensor phi = randn({C, r, r}, 21);
    Tensor tau = randn({kSeqLen, kEmbedDim}, 22);
    // both heads see the same Q/K columns when the two column blocks repeat
    std::vector<double> wq(static_cast<size_t>(C) * d), wk(static_cast<size_t>(kEmbedDim) * d);
    std::mt19937 rng(23);
    std::normal_distribution<double> g(0.0, 0.4);
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < d / 2; ++j) {
            const double v = g(rng);
            wq[static_cast<size_t>(i * d + j)] = v;
            wq[static_cast<size_t>(i * d + d / 2 + j)] = v;
        }
    for (int i = 0; i < kEmbedDim; ++i)
        for (int j = 0; j < d / 2; ++j) {
            const double v = g(rng);
            wk[static_cast<size_t>(i * d + j)] = v;
            wk[static_cast<size_t>(i * d + d / 2 + j)] = v;
        }
    Tensor wv = randn({kEmbedDim, C}, 24, 0.4);
    auto two = cross_attention(phi, tau, Tensor::from_data({C, d}, wq),
                               Tensor::from_data({kEmbedDim, d}, wk), wv, 2, "h2", 0);
    REQUIRE(two.maps.size() == 2);
    for (std::int64_t i = 0; i < two.maps[0].values.numel(); ++i)
        CHECK(two.maps[0].values.at(i) ==
              doctest::Approx(two.maps[1].values.at(i)).epsilon(1e-9));
}

TEST_CASE("gradients flow to all three projections and the inputs") {
    F64Scope f64;
    const int C = 4, r = 2, d = 4;
    Tensor phi = randn({C, r, r}, 31, 1.0, true);
    Tensor tau = randn({kSeqLen, kEmbedDim}, 32, 1.0, true);
    Tensor wq = randn({C, d}, 33, 0.4, true);
    Tensor wk = randn({kEmbedDim, d}, 34, 0.4, true);
    Tensor wv = randn({kEmbedDim, C}, 35, 0.4, true);
    auto out = cross_attention(phi, tau, wq, wk, wv, 2, "g", 0);
    backward(sum(out.out));
    for (const Tensor* t : {&phi, &tau, &wq, &wk, &wv}) {
        REQUIRE(t->has_grad());
        double nrm = 0;
        for (double g : t->grad()) nrm += g * g;
        CHECK(nrm > 0.0);
    }
}

TEST_CASE("cross_attention gradcheck on W_K") {
    F64Scope f64;
    const int C = 4, r = 2, d = 4;
    Tensor phi = randn({C, r, r}, 41);
    Tensor tau = randn({kSeqLen, kEmbedDim}, 42);
    Tensor wq = randn({C, d}, 43, 0.4);
    Tensor wv = randn({kEmbedDim, C}, 45, 0.4);
    Tensor wk = randn({kEmbedDim, d}, 44, 0.4, true);
    const double err = gradcheck(
        [&](const Tensor& w) {
            auto o = cross_attention(phi, tau, wq, w, wv, 2, "gc", 0);
            return sum(mul(o.out, o.out));
        },
        wk);
    CHECK(err < 1e-4);
}

TEST_CASE("select_maps averages heads and layers at one resolution") {
    Vocabulary v;
    AttentionRecord rec;
    rec.roles = tokenize("V1* disc and V2* square", v);
    const int r = 2, P = r * r;
    auto uniform_on = [&](int tok, double w) {
        std::vector<double> m(static_cast<size_t>(P) * kSeqLen, 0.0);
        for (int p = 0; p < P; ++p) m[static_cast<size_t>(p * kSeqLen + tok)] = w;
        return Tensor::from_data({P, kSeqLen}, std::move(m));
    };
    const int cls1 = rec.roles.position_of(Role::cls, 1);
    AttentionMap a{uniform_on(cls1, 0.2), r, 0, 0, "down"};
    AttentionMap b{uniform_on(cls1, 0.6), r, 1, 0, "down"};
    AttentionMap c{uniform_on(cls1, 1.0), r, 0, 0, "up"};
    AttentionMap d{uniform_on(cls1, 0.0), r, 1, 0, "up"};
    rec.maps = {a, b, c, d};
    Tensor m = select_maps(rec, Role::cls, 1, r);
    REQUIRE(m.shape() == Shape{r, r});
    for (int p = 0; p < P; ++p)
        CHECK(m.at(p) == doctest::Approx(0.45).epsilon(1e-6));  // mean of .2 .6 1 0
    CHECK_THROWS_AS(select_maps(rec, Role::modifier, 3, r), std::invalid_argument);
    CHECK_THROWS_AS(select_maps(rec, Role::cls, 1, 16), std::invalid_argument);
}

TEST_CASE("select_maps_all_scales upsamples coarse maps before averaging") {
    Vocabulary v;
    AttentionRecord rec;
    rec.roles = tokenize("V1* disc", v);
    const int cls1 = rec.roles.position_of(Role::cls, 1);
    auto fill = [&](int r, double w) {
        const int P = r * r;
        std::vector<double> m(static_cast<size_t>(P) * kSeqLen, 0.0);
        for (int p = 0; p < P; ++p) m[static_cast<size_t>(p * kSeqLen + cls1)] = w;
        return AttentionMap{Tensor::from_data({P, kSeqLen}, std::move(m)), r, 0, 0, "l"};
    };
    rec.maps = {fill(4, 1.0), fill(2, 0.5)};
    Tensor m = select_maps_all_scales(rec, Role::cls, 1, 4);
    REQUIRE(m.shape() == Shape{4, 4});
    for (int p = 0; p < 16; ++p) CHECK(m.at(p) == doctest::Approx(0.75).epsilon(1e-9));
}

TEST_CASE("cross_attention validates shapes") {
    Tensor phi = randn({8, 4, 4}, 51);
    Tensor tau = randn({kSeqLen, kEmbedDim}, 52);
    Tensor wq = randn({8, 8}, 53);
    Tensor wk = randn({kEmbedDim, 8}, 54);
    Tensor wv = randn({kEmbedDim, 8}, 55);
    CHECK_THROWS(cross_attention(phi, tau, wq, wk, wv, 3, "bad", 0));  // 8 % 3 != 0
    Tensor wk_bad = randn({kEmbedDim, 6}, 56);
    CHECK_THROWS(cross_attention(phi, tau, wq, wk_bad, wv, 2, "bad", 0));
}
