#include "ul/sampler.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "ul/objective.hpp"

namespace ul {

namespace {

Tensor with_batch_dim(const Tensor& t) {
    Tensor out = t;
    out.shape.insert(out.shape.begin(), 1);
    return out;
}

Tensor drop_batch_dim(const Tensor& t) {
    Tensor out = t;
    out.shape.erase(out.shape.begin());
    return out;
}

void require_usable(const ModelBundle& bundle, const ParamSet& params, const char* who) {
    if (bundle.steps_trained <= 0) {
        throw std::invalid_argument(std::string(who) + ": bundle was never trained");
    }
    if (!params.all_finite()) {
        throw std::invalid_argument(std::string(who) + ": parameters contain non-finite values");
    }
}

// Latent chains run on the base model when the bundle carries one, on the
// prior otherwise; both live on the prior schedule.
DenoiseFn latent_denoiser(const ModelBundle& bundle) {
    if (bundle.base_cfg && !bundle.base.empty()) {
        return [&bundle](const Tensor& z_t, double lambda) {
            return denoise_base(bundle, z_t, lambda);
        };
    }
    return [&bundle](const Tensor& z_t, double lambda) {
        return denoise_prior(bundle, z_t, lambda);
    };
}

}  // namespace

void SamplerConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
    if (!(churn >= 0.0) || !std::isfinite(churn)) {
        throw std::invalid_argument("sampler: churn must be finite and >= 0");
    }
    if (kind != Kind::Ancestral && kind != Kind::Deterministic) {
        throw std::invalid_argument("sampler: unknown kind");
    }
}

ChainResult reverse_chain(const DenoiseFn& model, const NoiseSchedule& schedule,
                          const std::vector<int>& shape, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    const double lo = schedule.lambda_min, hi = schedule.lambda_max;
    Tensor z = rng.normal_tensor(shape);
    Tensor eps = Tensor::zeros(shape);
    const int64_t n = z.numel();
    for (int i = 0; i < cfg.steps; ++i) {
        const double lam_t = lo + (hi - lo) * static_cast<double>(i) / cfg.steps;
        const double lam_s = lo + (hi - lo) * static_cast<double>(i + 1) / cfg.steps;
        const Tensor pred = model(z, lam_t);
        require_same_shape(pred, z, "sampler: model prediction");
        const auto [a_t, s_t] = alpha_sigma(lam_t);
        const auto [a_s, s_s] = alpha_sigma(lam_s);
        if (cfg.kind == SamplerConfig::Kind::Deterministic) {
            // Noise-preserving update: carry the rescaled residual forward.
            const double keep = s_s / s_t;
            for (int64_t k = 0; k < n; ++k) {
                z.data[k] = a_s * pred.data[k] + keep * (z.data[k] - a_t * pred.data[k]);
            }
        } else {
            // Forward transition t|s has squared scale a_t^2/a_s^2 and
            // variance var_ts = s_t^2 - (a_t/a_s)^2 s_s^2 = s_t^2 * r with
            // r = 1 - exp(lam_t - lam_s); conditioning on the prediction gives
            // mean coefficients below and posterior variance r * s_s^2.
            const double r = -std::expm1(lam_t - lam_s);
            const double c_z = (a_t / a_s) * (s_s * s_s) / (s_t * s_t);
            const double c_p = a_s * r;
            const double std_s = cfg.churn * std::sqrt(r) * s_s;
            rng.fill_normal(eps);
            for (int64_t k = 0; k < n; ++k) {
                z.data[k] = c_z * z.data[k] + c_p * pred.data[k] + std_s * eps.data[k];
            }
        }
    }
    ChainResult out;
    if (cfg.return_clean_prediction) out.clean = model(z, hi);
    out.state = std::move(z);
    return out;
}

Tensor sample_latents(const ModelBundle& bundle, int64_t n, const SamplerConfig& cfg) {
    cfg.validate();
    if (n < 0) throw std::invalid_argument("sampler: negative sample count");
    const bool use_base = bundle.base_cfg && !bundle.base.empty();
    require_usable(bundle,
                   use_base ? bundle.eval_params(bundle.base, bundle.base_ema)
                            : bundle.eval_params(bundle.prior, bundle.prior_ema),
                   "sample_latents");
    const LatentSpec& ls = bundle.enc_cfg.latent;
    Tensor out = Tensor::zeros({static_cast<int>(n), ls.h, ls.w, ls.c});
    const DenoiseFn fn = latent_denoiser(bundle);
    const int64_t per = ls.dims();
    for (int64_t k = 0; k < n; ++k) {
        Rng rng(derive_seed(cfg.seed, "latent", k));
        ChainResult one = reverse_chain(fn, bundle.prior_schedule, {1, ls.h, ls.w, ls.c}, cfg, rng);
        const Tensor& src = cfg.return_clean_prediction ? one.clean : one.state;
        std::copy(src.data.begin(), src.data.end(), out.data.begin() + k * per);
    }
    return out;
}

Tensor sample_latent(const ModelBundle& bundle, const SamplerConfig& cfg) {
    return drop_batch_dim(sample_latents(bundle, 1, cfg));
}

Tensor decode(const ModelBundle& bundle, const Tensor& z0, const SamplerConfig& cfg) {
    cfg.validate();
    require_usable(bundle, bundle.eval_params(bundle.dec, bundle.dec_ema), "decode");
    const LatentSpec& ls = bundle.enc_cfg.latent;
    const bool batched = z0.shape.size() == 4;
    const Tensor z = batched ? z0 : with_batch_dim(z0);
    if (z.shape.size() != 4 || z.shape[1] != ls.h || z.shape[2] != ls.w || z.shape[3] != ls.c) {
        throw std::invalid_argument("decode: latent shape " + shape_str(z0.shape) +
                                    " does not match " + shape_str({ls.h, ls.w, ls.c}));
    }
    const int n = z.shape[0];
    const DenoiseFn fn = [&bundle, &z](const Tensor& x_t, double lambda) {
        return denoise_decoder(bundle, x_t, z, lambda);
    };
    SamplerConfig chain_cfg = cfg;
    chain_cfg.return_clean_prediction = false;
    Rng rng(derive_seed(cfg.seed, "image"));
    const EncoderConfig& ec = bundle.enc_cfg;
    ChainResult out = reverse_chain(fn, bundle.decoder_schedule,
                                    {n, ec.image_h, ec.image_w, ec.image_c}, chain_cfg, rng);
    for (double& v : out.state.data) v = std::min(1.0, std::max(-1.0, v));
    return batched ? out.state : drop_batch_dim(out.state);
}

Tensor reconstruct(const ModelBundle& bundle, const Tensor& x, const SamplerConfig& cfg) {
    cfg.validate();
    const bool batched = x.shape.size() == 4;
    const Tensor xb = batched ? x : with_batch_dim(x);
    Tensor z_clean = encode(bundle, xb);
    Rng rng(derive_seed(cfg.seed, "enc"));
    Tensor z0 = noise_latent(z_clean, bundle.enc_cfg.latent.lambda_z0, rng.normal_tensor(z_clean.shape));
    Tensor out = decode(bundle, z0, cfg);
    return batched ? out : drop_batch_dim(out);
}

std::vector<Tensor> generate(const ModelBundle& latent_bundle, const ModelBundle& decoder_bundle,
                             int64_t n, const SamplerConfig& cfg) {
    cfg.validate();
    if (n < 0) throw std::invalid_argument("generate: negative sample count");
    if (!(latent_bundle.enc_cfg.latent == decoder_bundle.enc_cfg.latent)) {
        throw std::invalid_argument("generate: latent geometries of the two bundles differ");
    }
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t k = 0; k < n; ++k) {
        SamplerConfig latent_cfg = cfg;
        latent_cfg.seed = derive_seed(cfg.seed, "gen.z", k);
        Tensor z0 = sample_latents(latent_bundle, 1, latent_cfg);
        SamplerConfig image_cfg = cfg;
        image_cfg.seed = derive_seed(cfg.seed, "gen.x", k);
        out.push_back(drop_batch_dim(decode(decoder_bundle, z0, image_cfg)));
    }
    return out;
}

}  // namespace ul
