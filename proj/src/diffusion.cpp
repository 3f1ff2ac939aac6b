#include "bevdiff/diffusion.hpp"

#include <cmath>

namespace bevdiff {

namespace {

void fill_sigma(NoiseSchedule& s) {
    s.sigma.resize(static_cast<size_t>(s.T));
    for (int t = 1; t <= s.T; ++t) {
        const double beta = s.beta_at(t);
        double var;
        if (s.sigma_kind == SigmaKind::kBeta) {
            var = beta;
        } else {
            const double num = 1.0 - s.alpha_bar_at(t - 1);
            const double den = 1.0 - s.alpha_bar_at(t);
            var = den > 0.0 ? num / den * beta : 0.0;
        }
        s.sigma[static_cast<size_t>(t - 1)] = std::sqrt(var);
    }
}

}  // namespace

double NoiseSchedule::alpha_bar_at(int t) const {
    if (t < 0 || t > T) throw DomainError("alpha_bar index out of [0,T]");
    return t == 0 ? 1.0 : alpha_bar[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::beta_at(int t) const {
    if (t < 1 || t > T) throw DomainError("beta index out of [1,T]");
    return beta[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::alpha_at(int t) const {
    if (t < 1 || t > T) throw DomainError("alpha index out of [1,T]");
    return alpha[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::sigma_at(int t) const {
    if (t < 1 || t > T) throw DomainError("sigma index out of [1,T]");
    return sigma[static_cast<size_t>(t - 1)];
}

NoiseSchedule NoiseSchedule::from_betas(const std::vector<double>& betas, SigmaKind kind) {
    if (betas.empty()) throw ConfigError("schedule needs at least one step");
    NoiseSchedule s;
    s.T = static_cast<int>(betas.size());
    s.beta = betas;
    s.sigma_kind = kind;
    s.alpha.resize(betas.size());
    s.alpha_bar.resize(betas.size());
    double prod = 1.0;
    for (size_t i = 0; i < betas.size(); ++i) {
        if (betas[i] < 0.0 || betas[i] >= 1.0) throw ConfigError("beta out of [0,1)");
        s.alpha[i] = 1.0 - betas[i];
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
    }
    fill_sigma(s);
    return s;
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, bool linear,
                            SigmaKind kind) {
    if (T < 1) throw ConfigError("schedule: T must be positive");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t)
        betas[static_cast<size_t>(t)] =
            (linear && T > 1) ? beta_start + (beta_end - beta_start) * t / (T - 1) : beta_start;
    return NoiseSchedule::from_betas(betas, kind);
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (x0.shape() != eps.shape())
        throw DimensionError("q_sample: x0 and eps shapes differ");
    if (t < 1 || t > sched.T) throw DomainError("q_sample: t out of [1,T]");
    const double abar = sched.alpha_bar_at(t);
    const double a = std::sqrt(abar), b = std::sqrt(1.0 - abar);
    std::vector<float> out(x0.data().size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(a * x0.data()[i] + b * eps.data()[i]);
    return Tensor::from_data(x0.shape(), std::move(out));
}

Tensor ddpm_step(const Tensor& x_t, int t, const Tensor& eps_pred, const Tensor& z,
                 const NoiseSchedule& sched) {
    if (x_t.shape() != eps_pred.shape() || x_t.shape() != z.shape())
        throw DimensionError("ddpm_step: shape mismatch");
    if (t < 1 || t > sched.T) throw DomainError("ddpm_step: t out of [1,T]");
    const double alpha = sched.alpha_at(t);
    const double abar = sched.alpha_bar_at(t);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    const double coef = 1.0 - abar > 0.0 ? (1.0 - alpha) / std::sqrt(1.0 - abar) : 0.0;
    const double sig = sched.sigma_at(t);
    std::vector<float> out(x_t.data().size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(
            inv_sqrt_alpha * (x_t.data()[i] - coef * eps_pred.data()[i]) + sig * z.data()[i]);
    return Tensor::from_data(x_t.shape(), std::move(out));
}

Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& eps_pred, double eta,
                 const NoiseSchedule& sched, const Tensor& z) {
    if (x_t.shape() != eps_pred.shape() || x_t.shape() != z.shape())
        throw DimensionError("ddim_step: shape mismatch");
    if (t < 1 || t > sched.T) throw DomainError("ddim_step: t out of [1,T]");
    if (t_prev >= t || t_prev < 0) throw DomainError("ddim_step: need 0 <= t_prev < t");
    if (eta < 0.0 || eta > 1.0) throw DomainError("ddim_step: eta out of [0,1]");
    const double abar_t = sched.alpha_bar_at(t);
    const double abar_p = sched.alpha_bar_at(t_prev);
    const double sqrt_abar_t = std::sqrt(abar_t);
    const double sqrt_one_minus_t = std::sqrt(1.0 - abar_t);
    double sig = 0.0;
    if (eta > 0.0 && abar_t < 1.0 && abar_p < 1.0) {
        sig = eta * std::sqrt((1.0 - abar_p) / (1.0 - abar_t)) *
              std::sqrt(1.0 - abar_t / abar_p);
    }
    double dir = 1.0 - abar_p - sig * sig;
    if (dir < 0.0) dir = 0.0;  // numerical guard; analytically >= 0 for eta <= 1
    const double dir_coef = std::sqrt(dir);
    const double sqrt_abar_p = std::sqrt(abar_p);
    std::vector<float> out(x_t.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = x_t.data()[i];
        const double e = eps_pred.data()[i];
        const double x0_hat = (x - sqrt_one_minus_t * e) / sqrt_abar_t;
        out[i] = static_cast<float>(sqrt_abar_p * x0_hat + dir_coef * e + sig * z.data()[i]);
    }
    return Tensor::from_data(x_t.shape(), std::move(out));
}

std::vector<int> uniform_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw ConfigError("num_inference_steps must lie in [1,T]");
    std::vector<int> ts;
    ts.reserve(static_cast<size_t>(steps));
    if (steps == 1) {
        ts.push_back(T);
        return ts;
    }
    for (int i = 0; i < steps; ++i) {
        const double pos = static_cast<double>(T) -
                           static_cast<double>(T - 1) * i / static_cast<double>(steps - 1);
        int t = static_cast<int>(std::lround(pos));
        if (!ts.empty() && t >= ts.back()) t = ts.back() - 1;
        if (t < 1) t = 1;
        ts.push_back(t);
    }
    return ts;
}

Tensor sample_loop(const NoisePredictor& eps_fn, const Shape& shape, const SamplerConfig& cfg,
                   const NoiseSchedule& sched, Rng& rng) {
    if (cfg.num_inference_steps > sched.T || cfg.num_inference_steps < 1)
        throw ConfigError("sample_loop: num_inference_steps out of [1,T]");
    if (cfg.kind == SamplerKind::kDdpm && cfg.num_inference_steps != sched.T)
        throw ConfigError("sample_loop: the DDPM stepper runs the full chain only");

    Tensor x = Tensor::randn(shape, rng);
    if (cfg.kind == SamplerKind::kDdpm) {
        for (int t = sched.T; t >= 1; --t) {
            Tensor eps_pred = eps_fn(x, t);
            Tensor z = t > 1 ? Tensor::randn(shape, rng) : Tensor::zeros(shape);
            x = ddpm_step(x, t, eps_pred, z, sched);
        }
        return x;
    }
    const std::vector<int> ts = uniform_timesteps(sched.T, cfg.num_inference_steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        Tensor eps_pred = eps_fn(x, t);
        Tensor z = cfg.eta > 0.0 && t_prev > 0 ? Tensor::randn(shape, rng) : Tensor::zeros(shape);
        x = ddim_step(x, t, t_prev, eps_pred, cfg.eta, sched, z);
    }
    return x;
}

Tensor l_simple(const Tensor& eps_pred, const Tensor& eps) { return mse(eps_pred, eps); }

}  // namespace bevdiff
