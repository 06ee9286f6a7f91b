#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ul/tensor.hpp"

namespace ul {

// log-SNR noise schedules on t in [0, 1], strictly decreasing from
// lambda_max at t=0 to lambda_min at t=1.
enum class ScheduleShape {
    Linear,  // lambda(t) = lambda_max + t * (lambda_min - lambda_max)
    Warped,  // time remapped by s(t) = (1 - warp) t + warp t^2, warp in (-1, 1)
};

struct NoiseSchedule {
    double lambda_max = 5.0;
    double lambda_min = -15.0;
    ScheduleShape shape = ScheduleShape::Linear;
    double warp = 0.0;

    NoiseSchedule() = default;
    NoiseSchedule(double lmax, double lmin, ScheduleShape sh = ScheduleShape::Linear,
                  double warp_amount = 0.0);

    double logsnr(double t) const;
    double dlogsnr_dt(double t) const;

    bool operator==(const NoiseSchedule&) const = default;
};

struct AlphaSigma {
    double alpha = 0.0;  // signal scale, sqrt(sigmoid(lambda))
    double sigma = 0.0;  // noise scale, sqrt(sigmoid(-lambda))
};

// Decoder ELBO weighting: w_eps(lambda) = loss_factor * sigmoid(bias - lambda)
// applied to eps-MSE. bias may be +inf (weight saturates at loss_factor).
struct WeightingConfig {
    double bias = 0.0;
    double loss_factor = 1.5;

    void validate() const;
    bool operator==(const WeightingConfig&) const = default;
};

double sigmoid(double x);

AlphaSigma alpha_sigma(double lambda);

// alpha * clean + sigma * noise at the given log-SNR
Tensor forward_diffuse(const Tensor& clean, double lambda, const Tensor& noise);

// -dlambda/dt * exp(lambda(t)) / 2, the weight on x-prediction MSE in the
// unweighted (w=1) diffusion ELBO term at time t.
double elbo_weight_x(const NoiseSchedule& schedule, double t);

double decoder_weight_eps(double lambda, const WeightingConfig& cfg);

// Monte-Carlo check that the sigmoid-weighted loss is invariant to the
// schedule used to integrate it, given shared endpoints. Each draw reuses
// the same (t, noise, sample) triple under both schedules.
struct ScheduleAgreement {
    double estimate_a = 0.0;
    double estimate_b = 0.0;
    double se_a = 0.0;
    double se_b = 0.0;
    double tolerance = 0.0;  // 2 * sqrt(se_a^2 + se_b^2)
    bool agree = false;
};

using DenoiseFn = std::function<Tensor(const Tensor& noised, double lambda)>;

ScheduleAgreement weighted_loss_schedule_invariance_check(
    const WeightingConfig& cfg, const NoiseSchedule& schedule_a, const NoiseSchedule& schedule_b,
    int64_t n_mc, const std::vector<Tensor>& batch, const DenoiseFn& denoise, uint64_t seed);

}  // namespace ul
