#pragma once

#include <cmath>
#include <vector>

#include "pqr/tensor.hpp"

namespace pqr {

/// Discrete variance schedule. alpha_bars[t] = prod_{s<=t} (1 - betas[s]).
class NoiseSchedule {
public:
    NoiseSchedule() : NoiseSchedule(linear(1000, 8.5e-4, 1.2e-2)) {}

    explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
        require(!betas_.empty(), "NoiseSchedule: betas must be nonempty");
        alpha_bars_.resize(betas_.size());
        double prod = 1.0;
        for (size_t t = 0; t < betas_.size(); ++t) {
            require(betas_[t] > 0.0 && betas_[t] < 1.0, "NoiseSchedule: betas must lie in (0,1)");
            prod *= 1.0 - betas_[t];
            alpha_bars_[t] = prod;
        }
        require(alpha_bars_.back() > 0.0, "NoiseSchedule: alpha_bar underflowed to zero");
    }

    static NoiseSchedule linear(int num_train_steps, double beta_start, double beta_end) {
        require(num_train_steps >= 1, "NoiseSchedule: num_train_steps must be >= 1");
        std::vector<double> betas(static_cast<size_t>(num_train_steps));
        for (int i = 0; i < num_train_steps; ++i) {
            const double f = num_train_steps == 1 ? 0.0 : double(i) / double(num_train_steps - 1);
            betas[static_cast<size_t>(i)] = beta_start + f * (beta_end - beta_start);
        }
        return NoiseSchedule(std::move(betas));
    }

    int num_train_steps() const { return static_cast<int>(betas_.size()); }
    const std::vector<double>& betas() const { return betas_; }
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }
    double alpha_bar(int t) const {
        check_t(t);
        return alpha_bars_[static_cast<size_t>(t)];
    }

    void check_t(int t) const {
        require(t >= 0 && t < num_train_steps(), "timestep out of range");
    }

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
inline Latent forward_diffuse(const Latent& x0, int t, const Latent& eps, const NoiseSchedule& schedule) {
    require(x0.same_shape(eps), "forward_diffuse: x0 and eps shapes differ");
    schedule.check_t(t);
    const double ab = schedule.alpha_bar(t);
    Latent out = x0;
    out.data = std::sqrt(ab) * x0.data + std::sqrt(1.0 - ab) * eps.data;
    return out;
}

} // namespace pqr
