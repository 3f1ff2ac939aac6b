#pragma once

#include <functional>
#include <vector>

#include "bevdiff/tensor.hpp"

namespace bevdiff {

enum class SigmaKind { kBeta, kBetaTilde };

// Per-timestep noise tables. Kept in 64-bit so the cumulative products stay
// exact enough for the 1e-12 consistency checks; samplers convert on use.
// Index convention: beta[t-1] is beta_t for t in [1, T]; alpha_bar(0) = 1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sigma;
    SigmaKind sigma_kind = SigmaKind::kBeta;

    double alpha_bar_at(int t) const;  // t in [0, T]
    double beta_at(int t) const;       // t in [1, T]
    double alpha_at(int t) const;
    double sigma_at(int t) const;

    // Direct construction from explicit betas (used by tests that need
    // degenerate schedules, e.g. beta = 0 prefixes). Betas in [0, 1).
    static NoiseSchedule from_betas(const std::vector<double>& betas,
                                    SigmaKind kind = SigmaKind::kBeta);
};

// Linear beta ramp from beta_start to beta_end over T steps; with
// linear=false the schedule is constant at beta_start.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end, bool linear = true,
                            SigmaKind kind = SigmaKind::kBeta);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

// x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-abar_t) eps_pred)/sqrt(alpha_t) + sigma_t z
Tensor ddpm_step(const Tensor& x_t, int t, const Tensor& eps_pred, const Tensor& z,
                 const NoiseSchedule& sched);

// Deterministic at eta=0; t_prev may be 0 (abar_0 = 1) for the final hop.
Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& eps_pred, double eta,
                 const NoiseSchedule& sched, const Tensor& z);

enum class SamplerKind { kDdpm, kDdim };

struct SamplerConfig {
    SamplerKind kind = SamplerKind::kDdim;
    int num_inference_steps = 10;
    double eta = 0.0;
};

// Noise prediction callback: (x_t, t) -> eps_pred. Conditioning is bound by
// the caller.
using NoisePredictor = std::function<Tensor(const Tensor&, int)>;

// Uniformly spaced descending timestep subsequence over [1, T]; size `steps`.
std::vector<int> uniform_timesteps(int T, int steps);

// Runs the configured sampler from x_T ~ N(0, I) down to the x0 estimate.
Tensor sample_loop(const NoisePredictor& eps_fn, const Shape& shape, const SamplerConfig& cfg,
                   const NoiseSchedule& sched, Rng& rng);

// Noise-regression MSE; differentiable in both arguments.
Tensor l_simple(const Tensor& eps_pred, const Tensor& eps);

}  // namespace bevdiff
