#include "disendiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace disendiff {

NoiseSchedule::NoiseSchedule(int steps) : T(steps) {
    if (steps < 2) throw std::invalid_argument("schedule: T must be >= 2");
    betas.resize(static_cast<size_t>(T));
    alphas.resize(static_cast<size_t>(T));
    alpha_bars.resize(static_cast<size_t>(T));
    double abar = 1.0;
    for (int t = 0; t < T; ++t) {
        betas[static_cast<size_t>(t)] =
            1e-4 + (0.02 - 1e-4) * static_cast<double>(t) / (T - 1);
        alphas[static_cast<size_t>(t)] = 1.0 - betas[static_cast<size_t>(t)];
        abar *= alphas[static_cast<size_t>(t)];
        alpha_bars[static_cast<size_t>(t)] = abar;
    }
}

Tensor forward_noise(const NoiseSchedule& sched, const Tensor& x0, int t,
                     const Tensor& eps) {
    if (t < 0 || t >= sched.T)
        throw std::out_of_range("forward_noise: t=" + std::to_string(t) +
                                " outside [0," + std::to_string(sched.T) + ")");
    if (x0.shape() != eps.shape())
        throw std::invalid_argument("forward_noise: x0/eps shape mismatch");
    const double a = std::sqrt(sched.alpha_bars[static_cast<size_t>(t)]);
    const double b = std::sqrt(1.0 - sched.alpha_bars[static_cast<size_t>(t)]);
    return add(mul_scalar(x0, a), mul_scalar(eps, b));
}

Tensor base_loss(const Tensor& eps, const Tensor& eps_hat) {
    Tensor d = sub(eps, eps_hat);
    return mean(mul(d, d));
}

Tensor gaussian_like(const Shape& shape, std::mt19937& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> data(static_cast<size_t>(n));
    for (auto& v : data) v = gauss(rng);
    return Tensor::from_data(shape, std::move(data));
}

std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T)
        throw std::out_of_range("ddim: steps must be in [1," + std::to_string(T) + "]");
    // uniform stride, descending, final step lands on t = 0
    std::vector<int> ts(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i)
        ts[static_cast<size_t>(i)] = static_cast<int>(
            std::llround(static_cast<double>(T - 1) * (steps - 1 - i) / std::max(1, steps - 1)));
    ts.back() = 0;
    return ts;
}

Tensor ddim_sample(const EpsFn& eps_fn, const NoiseSchedule& sched,
                   const Shape& shape, int steps, double guidance, unsigned seed) {
    NoGradGuard ng;
    std::mt19937 rng(seed);
    Tensor z = gaussian_like(shape, rng);
    const auto ts = ddim_timesteps(sched.T, steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        Tensor eps_c = eps_fn(z, t, true);
        Tensor eps_tilde = eps_c;
        if (guidance != 1.0) {
            Tensor eps_u = eps_fn(z, t, false);
            eps_tilde = add(eps_u, mul_scalar(sub(eps_c, eps_u), guidance));
        }
        const double abar = sched.alpha_bars[static_cast<size_t>(t)];
        const double sa = std::sqrt(abar), sb = std::sqrt(1.0 - abar);
        Tensor x0 = mul_scalar(sub(z, mul_scalar(eps_tilde, sb)), 1.0 / sa);
        // clip-denoised: keep the x0 estimate in the image range so guidance
        // overshoot cannot compound across steps
        for (auto& v : x0.data()) v = std::clamp(v, -1.0, 1.0);
        if (i + 1 == ts.size()) {
            z = x0;
            break;
        }
        const double abar_prev = sched.alpha_bars[static_cast<size_t>(ts[i + 1])];
        z = add(mul_scalar(x0, std::sqrt(abar_prev)),
                mul_scalar(eps_tilde, std::sqrt(1.0 - abar_prev)));
    }
    // clamp to the image range
    for (auto& v : z.data()) v = std::clamp(v, -1.0, 1.0);
    return z;
}

}  // namespace disendiff
