#ifndef JOINTDIFF_SAMPLER_HPP
#define JOINTDIFF_SAMPLER_HPP

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "jointdiff/conditioning.hpp"
#include "jointdiff/diffusion.hpp"
#include "jointdiff/error.hpp"
#include "jointdiff/rng.hpp"
#include "jointdiff/schedule.hpp"
#include "jointdiff/unet.hpp"

namespace jointdiff {

struct SamplerConfig {
    int steps = 300;
    double eta = 0.2;
    PredictionTarget target = PredictionTarget::X0;

    void validate(int T) const {
        if (steps < 1 || steps > T)
            throw config_error("SamplerConfig: steps must be in [1, T]; steps=" +
                               std::to_string(steps) + " T=" + std::to_string(T));
        if (!(eta >= 0.0 && eta <= 1.0))
            throw config_error("SamplerConfig: eta must be in [0, 1]");
    }
};

// strictly decreasing uniform-stride timesteps starting at T; the terminal
// boundary alpha_bar[0] = 1 is appended by the sampling loop, not listed here
inline std::vector<int> timestep_subsequence(int T, int steps) {
    if (steps < 1) throw config_error("timestep_subsequence: steps must be >= 1");
    if (steps > T) throw config_error("timestep_subsequence: steps must not exceed T");
    std::vector<int> taus(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k)
        taus[std::size_t(k)] = T - int((std::int64_t(k) * T) / steps);
    return taus;
}

// DDIM noise scale for the jump alpha_bar_t -> alpha_bar_prev
inline double ddim_sigma(double alpha_bar_t, double alpha_bar_prev, double eta) {
    if (!(alpha_bar_t > 0.0 && alpha_bar_t < alpha_bar_prev && alpha_bar_prev <= 1.0))
        throw range_error("ddim_sigma: need 0 < alpha_bar_t < alpha_bar_prev <= 1");
    return eta * std::sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)) *
           std::sqrt(1.0 - alpha_bar_t / alpha_bar_prev);
}

// one reverse jump x_t -> x_{t_prev}; t_prev = 0 is the terminal boundary.
// x0_hat is clamped to [-1, 1]; the stochastic term is drawn independently
// per channel.
inline Tensor ddim_step(const Tensor& x_t, const Tensor& model_out, int t, int t_prev,
                        const SamplerConfig& cfg, const NoiseSchedule& sched, Rng& rng) {
    sched.check_t(t);
    if (t_prev < 0 || t_prev >= t)
        throw range_error("ddim_step: need 0 <= t_prev < t");

    Tensor x0_hat = predict_x0(model_out, x_t, t, sched, cfg.target);
    Tensor eps_hat = predict_eps(model_out, x_t, t, sched, cfg.target);
    for (std::size_t i = 0; i < x0_hat.size(); ++i)
        x0_hat[i] = std::clamp(x0_hat[i], -1.0, 1.0);

    const double ab_t = sched.alpha_bar[t];
    const double ab_prev = sched.alpha_bar[t_prev];
    const double sigma = cfg.eta > 0.0 ? ddim_sigma(ab_t, ab_prev, cfg.eta) : 0.0;

    double eps_coef_sq = 1.0 - ab_prev - sigma * sigma;
    if (eps_coef_sq < -1e-12)
        throw numeric_error("ddim_step: 1 - alpha_bar_prev - sigma^2 is negative");
    if (eps_coef_sq < 0.0) eps_coef_sq = 0.0;
    const double c_x0 = std::sqrt(ab_prev);
    const double c_eps = std::sqrt(eps_coef_sq);

    Tensor x_prev(x_t.c(), x_t.h(), x_t.w());
    for (std::size_t i = 0; i < x_prev.size(); ++i)
        x_prev[i] = c_x0 * x0_hat[i] + c_eps * eps_hat[i];
    if (sigma > 0.0)
        for (std::size_t i = 0; i < x_prev.size(); ++i) x_prev[i] += sigma * rng.normal();
    return x_prev;
}

// model output as a function of state and timestep; conditioning is bound by
// the caller
using Denoiser = std::function<Tensor(const Tensor& x_t, int t)>;

struct SampleOutput {
    JointSample sample; // mask binarized to {-1,+1}, image clamped to [-1,1]
    Tensor raw;         // trajectory endpoint before binarize/clamp
};

inline double binarize_mask_value(double v) { return v > 0.0 ? 1.0 : -1.0; }

// full reverse trajectory from x_T ~ N(0, I) with independent channels
inline SampleOutput sample_trajectory(const Denoiser& denoiser, const SamplerConfig& cfg,
                                      const NoiseSchedule& sched, int h, int w, Rng& rng) {
    cfg.validate(sched.T);
    Tensor x(2, h, w);
    rng.fill_normal(x.data(), x.size());

    const auto taus = timestep_subsequence(sched.T, cfg.steps);
    for (std::size_t k = 0; k < taus.size(); ++k) {
        const int t = taus[k];
        const int t_prev = k + 1 < taus.size() ? taus[k + 1] : 0;
        Tensor model_out = denoiser(x, t);
        require_same_shape(model_out, x, "sample_trajectory");
        x = ddim_step(x, model_out, t, t_prev, cfg, sched, rng);
        if (!x.all_finite())
            throw numeric_error("sample_trajectory: non-finite state at t=" + std::to_string(t));
    }

    SampleOutput out;
    out.raw = x;
    out.sample.image = Tensor::plane(h, w);
    out.sample.mask = Tensor::plane(h, w);
    for (std::size_t i = 0; i < out.sample.image.size(); ++i)
        out.sample.image[i] = std::clamp(x.channel(0)[i], -1.0, 1.0);
    for (std::size_t i = 0; i < out.sample.mask.size(); ++i)
        out.sample.mask[i] = binarize_mask_value(x.channel(1)[i]);
    return out;
}

// conditional sampling surface: a condition token is mandatory, sampling is
// always fully conditioned
inline SampleOutput sample(const DenoiserModel& model_ema,
                           const std::optional<ConditionToken>& token, const SamplerConfig& cfg,
                           const NoiseSchedule& sched, Rng& rng) {
    if (!token)
        throw usage_error("sample: a condition token is required; unconditional sampling is "
                          "not supported");
    const int hw = model_ema.config().image_size;
    Denoiser denoiser = [&](const Tensor& x_t, int t) {
        DenoiserModel::Cache cache;
        return model_ema.forward(x_t, t, sched.T, *token, cache);
    };
    return sample_trajectory(denoiser, cfg, sched, hw, hw, rng);
}

} // namespace jointdiff

#endif // JOINTDIFF_SAMPLER_HPP
