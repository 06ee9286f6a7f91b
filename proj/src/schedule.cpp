#include "ul/schedule.hpp"

#include <cmath>
#include <stdexcept>

#include "ul/rng.hpp"

namespace ul {

std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

NoiseSchedule::NoiseSchedule(double lmax, double lmin, ScheduleShape sh, double warp_amount)
    : lambda_max(lmax), lambda_min(lmin), shape(sh), warp(warp_amount) {
    if (!std::isfinite(lmax) || !std::isfinite(lmin)) {
        throw std::invalid_argument("NoiseSchedule: endpoints must be finite");
    }
    if (!(lmax > lmin)) {
        throw std::invalid_argument("NoiseSchedule: lambda_max must exceed lambda_min");
    }
    if (sh == ScheduleShape::Warped && !(warp > -1.0 && warp < 1.0)) {
        throw std::invalid_argument("NoiseSchedule: warp must lie in (-1, 1)");
    }
}

namespace {

void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw std::invalid_argument("schedule: t must lie in [0, 1]");
    }
}

}  // namespace

double NoiseSchedule::logsnr(double t) const {
    check_time(t);
    double s = t;
    if (shape == ScheduleShape::Warped) s = (1.0 - warp) * t + warp * t * t;
    return lambda_max + s * (lambda_min - lambda_max);
}

double NoiseSchedule::dlogsnr_dt(double t) const {
    check_time(t);
    double ds = 1.0;
    if (shape == ScheduleShape::Warped) ds = (1.0 - warp) + 2.0 * warp * t;
    return ds * (lambda_min - lambda_max);
}

void WeightingConfig::validate() const {
    if (!(loss_factor > 0.0)) {
        throw std::invalid_argument("WeightingConfig: loss_factor must be positive");
    }
    if (std::isnan(bias)) {
        throw std::invalid_argument("WeightingConfig: bias must not be NaN");
    }
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

AlphaSigma alpha_sigma(double lambda) {
    if (!std::isfinite(lambda)) {
        throw std::invalid_argument("alpha_sigma: lambda must be finite");
    }
    return {std::sqrt(sigmoid(lambda)), std::sqrt(sigmoid(-lambda))};
}

Tensor forward_diffuse(const Tensor& clean, double lambda, const Tensor& noise) {
    require_same_shape(clean, noise, "forward_diffuse");
    AlphaSigma as = alpha_sigma(lambda);
    Tensor out = clean;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out.data[static_cast<size_t>(i)] =
            as.alpha * clean.data[static_cast<size_t>(i)] + as.sigma * noise.data[static_cast<size_t>(i)];
    }
    return out;
}

double elbo_weight_x(const NoiseSchedule& schedule, double t) {
    return -schedule.dlogsnr_dt(t) * std::exp(schedule.logsnr(t)) * 0.5;
}

double decoder_weight_eps(double lambda, const WeightingConfig& cfg) {
    cfg.validate();
    return cfg.loss_factor * sigmoid(cfg.bias - lambda);
}

ScheduleAgreement weighted_loss_schedule_invariance_check(
    const WeightingConfig& cfg, const NoiseSchedule& schedule_a, const NoiseSchedule& schedule_b,
    int64_t n_mc, const std::vector<Tensor>& batch, const DenoiseFn& denoise, uint64_t seed) {
    cfg.validate();
    if (schedule_a.lambda_max != schedule_b.lambda_max ||
        schedule_a.lambda_min != schedule_b.lambda_min) {
        throw std::invalid_argument("schedule invariance check: endpoints must match");
    }
    if (n_mc <= 0) throw std::invalid_argument("schedule invariance check: n_mc must be positive");
    if (batch.empty()) throw std::invalid_argument("schedule invariance check: empty batch");

    // One draw = one (sample, t, noise) triple, evaluated under both schedules.
    // Each per-draw value -dlambda/dt * e^lambda / 2 * w(lambda) * ||x - x_hat||^2
    // estimates the same lambda-integral, so the two means must agree.
    auto integrand = [&](const NoiseSchedule& sched, const Tensor& clean, double t,
                         const Tensor& noise) {
        double lambda = sched.logsnr(t);
        Tensor pred = denoise(forward_diffuse(clean, lambda, noise), lambda);
        require_same_shape(pred, clean, "schedule invariance check: denoiser output");
        double mse = 0.0;
        for (int64_t i = 0; i < clean.numel(); ++i) {
            double d = clean.data[static_cast<size_t>(i)] - pred.data[static_cast<size_t>(i)];
            mse += d * d;
        }
        double w = -sched.dlogsnr_dt(t) * 0.5 * std::exp(lambda) * sigmoid(cfg.bias - lambda) *
                   cfg.loss_factor;
        return w * mse;
    };

    Rng rng(derive_seed(seed, "schedule_invariance"));
    double sum_a = 0.0, sum_b = 0.0, sumsq_a = 0.0, sumsq_b = 0.0;
    for (int64_t i = 0; i < n_mc; ++i) {
        const Tensor& clean = batch[static_cast<size_t>(i % static_cast<int64_t>(batch.size()))];
        double t = rng.uniform();
        Tensor noise = rng.normal_tensor(clean.shape);
        double va = integrand(schedule_a, clean, t, noise);
        double vb = integrand(schedule_b, clean, t, noise);
        sum_a += va;
        sum_b += vb;
        sumsq_a += va * va;
        sumsq_b += vb * vb;
    }
    double n = static_cast<double>(n_mc);
    ScheduleAgreement rep;
    rep.estimate_a = sum_a / n;
    rep.estimate_b = sum_b / n;
    double var_a = std::max(0.0, sumsq_a / n - rep.estimate_a * rep.estimate_a);
    double var_b = std::max(0.0, sumsq_b / n - rep.estimate_b * rep.estimate_b);
    rep.se_a = std::sqrt(var_a / n);
    rep.se_b = std::sqrt(var_b / n);
    rep.tolerance = 2.0 * std::sqrt(rep.se_a * rep.se_a + rep.se_b * rep.se_b);
    rep.agree = std::abs(rep.estimate_a - rep.estimate_b) <= rep.tolerance;
    return rep;
}

}  // namespace ul
