#include "ul/objective.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ul {
namespace {

int64_t batch_of(const Tensor& t, const char* who) {
    if (t.shape.empty() || t.shape[0] < 1) {
        throw std::invalid_argument(std::string(who) + ": expected a batched tensor, got " +
                                    shape_str(t.shape));
    }
    return t.shape[0];
}

// KL[N(alpha z, sigma^2 I) || N(0, I)] per sample, summed over non-batch dims:
// alpha^2/2 sum z^2 + D/2 (sigma^2 - 1 - ln sigma^2).
Tensor gaussian_prior_kl_plain(const Tensor& z, double alpha, double sigma, const char* who) {
    const int64_t n = batch_of(z, who);
    const int64_t dims = static_cast<int64_t>(z.data.size()) / n;
    const double a2 = alpha * alpha;
    const double s2 = sigma * sigma;
    const double offset = 0.5 * static_cast<double>(dims) * (s2 - 1.0 - std::log(s2));
    Tensor out = Tensor::zeros({static_cast<int>(n)});
    for (int64_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (int64_t j = 0; j < dims; ++j) {
            const double v = z.data[static_cast<size_t>(i * dims + j)];
            sq += v * v;
        }
        out.data[static_cast<size_t>(i)] = 0.5 * a2 * sq + offset;
    }
    return out;
}

Ref gaussian_prior_kl_g(Graph& g, Ref z, double alpha, double sigma) {
    const Tensor& zv = g.val(z);
    const int64_t n = zv.shape[0];
    const int64_t dims = static_cast<int64_t>(zv.data.size()) / n;
    const double a2 = alpha * alpha;
    const double s2 = sigma * sigma;
    Ref quad = g.scale(g.sum_per_sample(g.mul(z, z)), 0.5 * a2);
    return g.add_scalar(quad, 0.5 * static_cast<double>(dims) * (s2 - 1.0 - std::log(s2)));
}

Ref sq_err_per_sample(Graph& g, Ref a, Ref b) {
    Ref d = g.sub(a, b);
    return g.sum_per_sample(g.mul(d, d));
}

Tensor mean_sq_err_per_sample(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "squared error");
    const int64_t n = a.shape[0];
    const int64_t dims = static_cast<int64_t>(a.data.size()) / n;
    Tensor out = Tensor::zeros({static_cast<int>(n)});
    for (int64_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (int64_t j = 0; j < dims; ++j) {
            const double d =
                a.data[static_cast<size_t>(i * dims + j)] - b.data[static_cast<size_t>(i * dims + j)];
            sq += d * d;
        }
        out.data[static_cast<size_t>(i)] = sq;
    }
    return out;
}

double batch_mean(const Tensor& per_sample) {
    double acc = 0.0;
    for (double v : per_sample.data) acc += v;
    return acc / static_cast<double>(per_sample.data.size());
}

}  // namespace

Tensor noise_latent(const Tensor& z_clean, double lambda_z0, const Tensor& noise) {
    require_same_shape(z_clean, noise, "noise_latent");
    if (!std::isfinite(lambda_z0)) {
        throw std::invalid_argument("noise_latent: lambda_z0 must be finite");
    }
    const AlphaSigma as = alpha_sigma(lambda_z0);
    Tensor out = z_clean;
    for (size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = as.alpha * z_clean.data[i] + as.sigma * noise.data[i];
    }
    return out;
}

Tensor endpoint_kl_prior(const Tensor& z_clean, const NoiseSchedule& schedule) {
    const double lambda1 = schedule.logsnr(1.0);
    const AlphaSigma as = alpha_sigma(lambda1);
    return gaussian_prior_kl_plain(z_clean, as.alpha, as.sigma, "endpoint_kl_prior");
}

Tensor normal_prior_kl(const Tensor& z_clean, double lambda_z0) {
    if (!std::isfinite(lambda_z0)) {
        throw std::invalid_argument("normal_prior_kl: lambda_z0 must be finite");
    }
    const AlphaSigma as = alpha_sigma(lambda_z0);
    return gaussian_prior_kl_plain(z_clean, as.alpha, as.sigma, "normal_prior_kl");
}

double prior_loss(const ModelBundle& bundle, const Tensor& z_clean, double t, const Tensor& noise) {
    require_same_shape(z_clean, noise, "prior_loss");
    const double lambda = bundle.prior_schedule.logsnr(t);
    const AlphaSigma as = alpha_sigma(lambda);
    Tensor z_t = z_clean;
    for (size_t i = 0; i < z_t.data.size(); ++i) {
        z_t.data[i] = as.alpha * z_clean.data[i] + as.sigma * noise.data[i];
    }
    const Tensor z_hat = denoise_prior(bundle, z_t, lambda);
    const double w = elbo_weight_x(bundle.prior_schedule, t);
    const Tensor mse = mean_sq_err_per_sample(z_clean, z_hat);
    const Tensor kl = endpoint_kl_prior(z_clean, bundle.prior_schedule);
    return w * batch_mean(mse) + batch_mean(kl);
}

double decoder_loss(const ModelBundle& bundle, const Tensor& x, const Tensor& z0, double t,
                    const Tensor& noise, const WeightingConfig& cfg) {
    require_same_shape(x, noise, "decoder_loss");
    cfg.validate();
    const double lambda = bundle.decoder_schedule.logsnr(t);
    const AlphaSigma as = alpha_sigma(lambda);
    Tensor x_t = x;
    for (size_t i = 0; i < x_t.data.size(); ++i) {
        x_t.data[i] = as.alpha * x.data[i] + as.sigma * noise.data[i];
    }
    const Tensor x_hat = denoise_decoder(bundle, x_t, z0, lambda);
    const double w = elbo_weight_x(bundle.decoder_schedule, t) * decoder_weight_eps(lambda, cfg);
    return w * batch_mean(mean_sq_err_per_sample(x, x_hat));
}

double decoder_loss_eps_form(const ModelBundle& bundle, const Tensor& x, const Tensor& z0,
                             double t, const Tensor& noise, const WeightingConfig& cfg) {
    require_same_shape(x, noise, "decoder_loss_eps_form");
    cfg.validate();
    const double lambda = bundle.decoder_schedule.logsnr(t);
    const AlphaSigma as = alpha_sigma(lambda);
    Tensor x_t = x;
    for (size_t i = 0; i < x_t.data.size(); ++i) {
        x_t.data[i] = as.alpha * x.data[i] + as.sigma * noise.data[i];
    }
    const Tensor x_hat = denoise_decoder(bundle, x_t, z0, lambda);
    // eps_hat recovered from the clean prediction through the forward map.
    Tensor eps_hat = x_hat;
    for (size_t i = 0; i < eps_hat.data.size(); ++i) {
        eps_hat.data[i] = (x_t.data[i] - as.alpha * x_hat.data[i]) / as.sigma;
    }
    const double w = 0.5 * (-bundle.decoder_schedule.dlogsnr_dt(t)) * decoder_weight_eps(lambda, cfg);
    return w * batch_mean(mean_sq_err_per_sample(noise, eps_hat));
}

Tensor learned_variance_entropy(const Tensor& sigma_z, double lambda_z0) {
    if (!std::isfinite(lambda_z0)) {
        throw std::invalid_argument("learned_variance_entropy: lambda_z0 must be finite");
    }
    for (double v : sigma_z.data) {
        if (!(v >= 0.0)) {
            throw std::invalid_argument("learned_variance_entropy: sigma_z must be non-negative");
        }
    }
    const int64_t n = batch_of(sigma_z, "learned_variance_entropy");
    const int64_t dims = static_cast<int64_t>(sigma_z.data.size()) / n;
    const double snr0 = std::exp(lambda_z0);
    Tensor out = Tensor::zeros({static_cast<int>(n)});
    for (int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < dims; ++j) {
            const double s = sigma_z.data[static_cast<size_t>(i * dims + j)];
            acc += -0.5 * std::log1p(s * s * snr0);
        }
        out.data[static_cast<size_t>(i)] = acc;
    }
    return out;
}

double mse_reconstruction_loss(const ModelBundle& bundle, const Tensor& x, const Tensor& z0) {
    const Tensor x_zero = Tensor::zeros(x.shape);
    const double lambda = bundle.decoder_schedule.lambda_max;
    const Tensor recon = denoise_decoder(bundle, x_zero, z0, lambda);
    double sq = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        const double d = x.data[i] - recon.data[i];
        sq += d * d;
    }
    return bundle.weighting.loss_factor * sq / static_cast<double>(x.data.size());
}

Stage1Outputs build_stage1_loss(Graph& g, Bindings& enc_b, Bindings& prior_b, Bindings& dec_b,
                                const ModelBundle& bundle, const Tensor& x,
                                const StepRandomness& rnd, const StepFlags& flags) {
    if (flags.stop_gradient_prior && flags.normal_prior) {
        throw std::invalid_argument(
            "build_stage1_loss: stop_gradient_prior and normal_prior are mutually exclusive");
    }
    if (flags.learned_variance != bundle.enc_cfg.learned_variance) {
        throw std::invalid_argument(
            "build_stage1_loss: learned_variance flag must match the encoder head");
    }
    if (!(flags.discounted_kl_weight >= 0.0)) {
        throw std::invalid_argument("build_stage1_loss: discounted_kl_weight must be >= 0");
    }
    const LatentSpec& latent = bundle.enc_cfg.latent;
    const std::vector<int> latent_shape = {x.shape.empty() ? 0 : x.shape[0], latent.h, latent.w,
                                           latent.c};
    const int64_t n = batch_of(x, "build_stage1_loss");
    auto require_shaped = [&](const Tensor& t, const std::vector<int>& shape, const char* who) {
        if (t.shape != shape) {
            throw std::invalid_argument(std::string("build_stage1_loss: ") + who + " must have shape " +
                                        shape_str(shape) + ", got " + shape_str(t.shape));
        }
    };
    require_shaped(rnd.eps_prior, latent_shape, "eps_prior");
    require_shaped(rnd.eps_latent, latent_shape, "eps_latent");
    if (!flags.mse_reconstruction) require_shaped(rnd.eps_dec, x.shape, "eps_dec");
    if (flags.learned_variance) require_shaped(rnd.eps_enc, latent_shape, "eps_enc");

    const std::vector<double> ones(static_cast<size_t>(n), 1.0);

    Ref x_ref = g.input(x);
    EncodeOut enc = encode_g(g, enc_b, bundle.enc_cfg, x_ref);

    Stage1Outputs out;
    Ref z_clean = enc.mean;
    Ref entropy_per = -1;
    if (flags.learned_variance) {
        Ref sigma = g.exp(enc.log_sigma);
        z_clean = g.add(enc.mean, g.mul(sigma, g.input(rnd.eps_enc)));
        // per-dim entropy correction -1/2 ln(sigma^2 e^{lambda_z0} + 1)
        Ref s2snr = g.scale(g.mul(sigma, sigma), std::exp(latent.lambda_z0));
        entropy_per = g.scale(g.sum_per_sample(g.log(g.add_scalar(s2snr, 1.0))), -0.5);
        out.sigma = sigma;
        out.has_sigma = true;
    }
    out.z_clean = z_clean;

    // ---- prior branch ----
    Ref prior_mse = -1;   // scalar
    Ref kl_per = -1;      // [N]
    Ref prior_per = -1;   // [N], weighted
    if (flags.normal_prior) {
        kl_per = gaussian_prior_kl_g(g, z_clean, alpha_sigma(latent.lambda_z0).alpha,
                                     alpha_sigma(latent.lambda_z0).sigma);
        prior_mse = g.input(Tensor::scalar(0.0));
        prior_per = g.scale(kl_per, 0.0);
    } else {
        Ref z_for_prior = flags.stop_gradient_prior ? g.stop_grad(z_clean) : z_clean;
        const double lambda_p = bundle.prior_schedule.logsnr(rnd.t_prior);
        const AlphaSigma asp = alpha_sigma(lambda_p);
        Ref z_t = g.add(g.scale(z_for_prior, asp.alpha), g.scale(g.input(rnd.eps_prior), asp.sigma));
        Ref z_hat = denoise_tokens_g(g, prior_b, bundle.prior_cfg, latent, z_t, lambda_p, rnd.dropout);
        const double w_prior = elbo_weight_x(bundle.prior_schedule, rnd.t_prior);
        Ref mse_per = sq_err_per_sample(g, z_for_prior, z_hat);
        prior_per = g.scale(mse_per, w_prior);
        prior_mse = g.weighted_mean(mse_per, std::vector<double>(static_cast<size_t>(n), w_prior));

        const double lambda1 = bundle.prior_schedule.logsnr(1.0);
        const AlphaSigma as1 = alpha_sigma(lambda1);
        kl_per = gaussian_prior_kl_g(g, z_for_prior, as1.alpha, as1.sigma);
        if (flags.stop_gradient_prior) {
            // Keep the encoder output bounded: a strongly discounted KL to the
            // standard normal is the only prior-side term that reaches it.
            const AlphaSigma as0 = alpha_sigma(latent.lambda_z0);
            Ref bound_per =
                g.scale(gaussian_prior_kl_g(g, z_clean, as0.alpha, as0.sigma), flags.discounted_kl_weight);
            kl_per = g.add(kl_per, bound_per);
        }
    }
    Ref endpoint_kl = g.weighted_mean(kl_per, ones);

    // ---- decoder branch ----
    Ref eps_lat = g.input(rnd.eps_latent);
    const AlphaSigma as0 = alpha_sigma(latent.lambda_z0);
    Ref z0 = g.add(g.scale(z_clean, as0.alpha), g.scale(eps_lat, as0.sigma));

    Ref dec_per = -1;
    Ref decoder_term = -1;
    if (flags.mse_reconstruction) {
        Ref x_zero = g.input(Tensor::zeros(x.shape));
        Ref recon = denoise_decoder_g(g, dec_b, bundle.dec_cfg, bundle.enc_cfg, x_zero, z0,
                                      bundle.decoder_schedule.lambda_max, rnd.dropout);
        const int64_t pix = static_cast<int64_t>(x.data.size()) / n;
        const double w = bundle.weighting.loss_factor / static_cast<double>(pix);
        Ref sq_per = sq_err_per_sample(g, x_ref, recon);
        dec_per = g.scale(sq_per, w);
        decoder_term = g.weighted_mean(sq_per, std::vector<double>(static_cast<size_t>(n), w));
    } else {
        const double lambda_d = bundle.decoder_schedule.logsnr(rnd.t_dec);
        const AlphaSigma asd = alpha_sigma(lambda_d);
        Ref x_t = g.add(g.scale(x_ref, asd.alpha), g.scale(g.input(rnd.eps_dec), asd.sigma));
        Ref x_hat =
            denoise_decoder_g(g, dec_b, bundle.dec_cfg, bundle.enc_cfg, x_t, z0, lambda_d, rnd.dropout);
        const double w = elbo_weight_x(bundle.decoder_schedule, rnd.t_dec) *
                         decoder_weight_eps(lambda_d, bundle.weighting);
        Ref sq_per = sq_err_per_sample(g, x_ref, x_hat);
        dec_per = g.scale(sq_per, w);
        decoder_term = g.weighted_mean(sq_per, std::vector<double>(static_cast<size_t>(n), w));
    }

    // ---- assembly ----
    Ref per_sample = g.add(g.add(prior_per, kl_per), dec_per);
    Ref entropy = entropy_per >= 0 ? g.weighted_mean(entropy_per, ones) : g.input(Tensor::scalar(0.0));
    if (entropy_per >= 0) per_sample = g.add(per_sample, entropy_per);

    out.total = g.add(g.add(g.add(prior_mse, endpoint_kl), decoder_term), entropy);
    out.prior_mse = prior_mse;
    out.endpoint_kl = endpoint_kl;
    out.decoder_term = decoder_term;
    out.entropy = entropy;
    out.per_sample = per_sample;
    return out;
}

Ref build_stage2_loss(Graph& g, Bindings& base_b, const DenoiserConfig& base_cfg,
                      const ModelBundle& bundle, const Tensor& z_clean, double t,
                      const Tensor& noise, const WeightingConfig& cfg, Rng* dropout) {
    require_same_shape(z_clean, noise, "build_stage2_loss");
    cfg.validate();
    const int64_t n = batch_of(z_clean, "build_stage2_loss");
    const double lambda = bundle.prior_schedule.logsnr(t);
    const AlphaSigma as = alpha_sigma(lambda);
    Ref z = g.input(z_clean);
    Ref z_t = g.add(g.scale(z, as.alpha), g.scale(g.input(noise), as.sigma));
    Ref z_hat =
        denoise_tokens_g(g, base_b, base_cfg, bundle.enc_cfg.latent, z_t, lambda, dropout);
    const double w = elbo_weight_x(bundle.prior_schedule, t) * decoder_weight_eps(lambda, cfg);
    Ref sq_per = sq_err_per_sample(g, z, z_hat);
    return g.weighted_mean(sq_per, std::vector<double>(static_cast<size_t>(n), w));
}

LossBreakdown read_breakdown(const Graph& g, const Stage1Outputs& out) {
    LossBreakdown b;
    b.prior_mse_term = g.val(out.prior_mse).data[0];
    b.endpoint_kl = g.val(out.endpoint_kl).data[0];
    b.decoder_term = g.val(out.decoder_term).data[0];
    b.entropy_term = g.val(out.entropy).data[0];
    b.total = g.val(out.total).data[0];
    b.per_sample = g.val(out.per_sample).data;
    return b;
}

}  // namespace ul
