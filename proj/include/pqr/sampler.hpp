#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "pqr/model.hpp"

namespace pqr {

struct SamplerConfig {
    int num_inference_steps = 20;
    uint64_t seed = 0;
    double guidance_scale = 1.0;

    void validate() const {
        require(num_inference_steps >= 1, "sampler: num_inference_steps must be >= 1");
        require(guidance_scale >= 0.0 && std::isfinite(guidance_scale), "sampler: guidance_scale must be nonnegative");
    }
};

/// Evenly spaced training timesteps used by an S-step sampler, ascending.
/// The last entry is always the schedule's final index.
inline std::vector<int> inference_timesteps(const NoiseSchedule& schedule, int steps) {
    require(steps >= 1 && steps <= schedule.num_train_steps(), "sampler: steps must lie in [1, num_train_steps]");
    std::vector<int> ts(static_cast<size_t>(steps));
    const long total = schedule.num_train_steps();
    for (int k = 0; k < steps; ++k) ts[static_cast<size_t>(k)] = static_cast<int>(((k + 1) * total) / steps - 1);
    return ts;
}

inline Latent seed_noise(const ModelConfig& cfg, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Latent z(cfg.latent_h(), cfg.latent_w(), cfg.latent_channels(), Space::latent);
    for (Eigen::Index i = 0; i < z.data.size(); ++i) z.data.data()[i] = nd(rng);
    return z;
}

namespace detail {

inline Mat guided_eps(const Backbone& model, const Latent& z, int t, const Prompt& prompt,
                      const AdapterParams* adapters, double guidance) {
    Mat eps = model.predict_noise(z, t, prompt, adapters, false).eps_pred.data;
    if (guidance == 1.0) return eps;
    Prompt null_prompt{{Vocabulary::standard().null_id()}, std::nullopt};
    Mat uncond = model.predict_noise(z, t, null_prompt, adapters, false).eps_pred.data;
    return uncond + guidance * (eps - uncond);
}

/// Deterministic (eta = 0) update from noise level ab_t to ab_prev.
inline Mat ddim_update(const Mat& z, const Mat& eps, double ab_t, double ab_prev) {
    Mat x0 = (z - std::sqrt(1.0 - ab_t) * eps) / std::sqrt(ab_t);
    return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
}

} // namespace detail

/// Runs the deterministic sampler from z_T. Returns [z_0, z_1, ..., z_S]
/// where z_k (k >= 1) is the latent at timestep inference_timesteps()[k-1].
inline std::vector<Latent> denoise_trajectory(const Backbone& model, const Latent& z_T, const Prompt& prompt,
                                              const SamplerConfig& config, const AdapterParams* adapters) {
    config.validate();
    model.check_latent(z_T);
    const auto ts = inference_timesteps(model.schedule(), config.num_inference_steps);
    const int steps = config.num_inference_steps;
    std::vector<Latent> traj(static_cast<size_t>(steps) + 1);
    traj[static_cast<size_t>(steps)] = z_T;
    Latent z = z_T;
    for (int k = steps - 1; k >= 0; --k) {
        const int t = ts[static_cast<size_t>(k)];
        const double ab_t = model.schedule().alpha_bar(t);
        const double ab_prev = k > 0 ? model.schedule().alpha_bar(ts[static_cast<size_t>(k - 1)]) : 1.0;
        Mat eps = detail::guided_eps(model, z, t, prompt, adapters, config.guidance_scale);
        z.data = detail::ddim_update(z.data, eps, ab_t, ab_prev);
        if (!z.all_finite()) throw NumericalFailure("sampler: non-finite latent at step " + std::to_string(k));
        traj[static_cast<size_t>(k)] = z;
    }
    return traj;
}

inline Latent denoise_from(const Backbone& model, const Latent& z_T, const Prompt& prompt, const SamplerConfig& config,
                           const AdapterParams* adapters) {
    return denoise_trajectory(model, z_T, prompt, config, adapters).front();
}

/// z_0^gen for a (prompt, seed) query.
inline Latent sample(const Backbone& model, const Prompt& prompt, const SamplerConfig& config,
                     const AdapterParams* adapters) {
    config.validate();
    return denoise_from(model, seed_noise(model.config(), config.seed), prompt, config, adapters);
}

inline std::vector<Latent> sample_trajectory(const Backbone& model, const Prompt& prompt, const SamplerConfig& config,
                                             const AdapterParams* adapters) {
    config.validate();
    return denoise_trajectory(model, seed_noise(model.config(), config.seed), prompt, config, adapters);
}

struct InversionConfig {
    int num_steps = 20;
    int fixed_point_iterations = 4;
    double guidance_scale = 1.0;
};

/// Deterministic inversion z_0 -> z_T on the same timestep grid the sampler
/// uses. Each step solves for the noisier latent whose DDIM update lands on
/// the current one, refining the noise estimate by fixed-point iteration.
/// Returns [z_0, ..., z_T].
inline std::vector<Latent> invert(const Backbone& model, const Latent& z0, const Prompt& prompt,
                                  const AdapterParams* adapters, const InversionConfig& config) {
    require(config.num_steps >= 1, "invert: num_steps must be >= 1");
    require(config.fixed_point_iterations >= 0, "invert: fixed_point_iterations must be >= 0");
    model.check_latent(z0);
    const auto ts = inference_timesteps(model.schedule(), config.num_steps);
    std::vector<Latent> traj;
    traj.reserve(static_cast<size_t>(config.num_steps) + 1);
    traj.push_back(z0);
    for (int k = 0; k < config.num_steps; ++k) {
        const Latent& cur = traj.back();
        const int t = ts[static_cast<size_t>(k)];
        const double ab_t = model.schedule().alpha_bar(t);
        const double ab_prev = k > 0 ? model.schedule().alpha_bar(ts[static_cast<size_t>(k - 1)]) : 1.0;
        Mat eps = detail::guided_eps(model, cur, t, prompt, adapters, config.guidance_scale);
        Latent next = cur;
        next.data = detail::ddim_update(cur.data, eps, ab_prev, ab_t);
        for (int it = 0; it < config.fixed_point_iterations; ++it) {
            eps = detail::guided_eps(model, next, t, prompt, adapters, config.guidance_scale);
            next.data = detail::ddim_update(cur.data, eps, ab_prev, ab_t);
            if (!next.all_finite()) break;
        }
        if (!next.all_finite()) throw NumericalFailure("invert: non-finite latent at step " + std::to_string(k));
        traj.push_back(std::move(next));
    }
    return traj;
}

inline std::vector<Latent> invert(const Backbone& model, const Latent& z0, const Prompt& prompt,
                                  const AdapterParams* adapters, int num_steps) {
    InversionConfig c;
    c.num_steps = num_steps;
    return invert(model, z0, prompt, adapters, c);
}

} // namespace pqr
