// Forward noising, the epsilon-prediction objective, and deterministic DDIM
// sampling with classifier-free guidance.
#pragma once

#include <random>
#include <vector>

#include "disendiff/tensor.hpp"

namespace disendiff {

struct NoiseSchedule {
    int T = 400;
    std::vector<double> betas;       // linear 1e-4 -> 0.02
    std::vector<double> alphas;
    std::vector<double> alpha_bars;  // strictly decreasing

    explicit NoiseSchedule(int steps = 400);
};

// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor forward_noise(const NoiseSchedule& sched, const Tensor& x0, int t,
                     const Tensor& eps);

// mean squared error over all elements
Tensor base_loss(const Tensor& eps, const Tensor& eps_hat);

Tensor gaussian_like(const Shape& shape, std::mt19937& rng);

// Conditional/unconditional noise prediction at timestep t.
using EpsFn = std::function<Tensor(const Tensor& z, int t, bool conditional)>;

// Deterministic DDIM (eta = 0), uniform-stride substep schedule ending at
// t = 0, guided by eps_u + guidance * (eps_c - eps_u); output in [-1,1].
Tensor ddim_sample(const EpsFn& eps_fn, const NoiseSchedule& sched,
                   const Shape& shape, int steps, double guidance, unsigned seed);

std::vector<int> ddim_timesteps(int T, int steps);  // descending, last is 0

}  // namespace disendiff
