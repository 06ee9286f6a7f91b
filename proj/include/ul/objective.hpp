#pragma once

#include <vector>

#include "ul/graph.hpp"
#include "ul/nets.hpp"
#include "ul/schedule.hpp"
#include "ul/tensor.hpp"

namespace ul {

// One training step's loss, split into its named terms (all in nats except
// decoder_term, which carries the sigmoid weighting and loss factor).
// total = prior_mse_term + endpoint_kl + decoder_term + entropy_term;
// entropy_term is zero unless the encoder variance is learned.
struct LossBreakdown {
    double prior_mse_term = 0.0;
    double endpoint_kl = 0.0;
    double decoder_term = 0.0;
    double entropy_term = 0.0;
    double total = 0.0;
    std::vector<double> per_sample;
};

// z0 = alpha(lambda_z0) * z_clean + sigma(lambda_z0) * noise — the fixed
// Gaussian encoding noise applied to the encoder output.
Tensor noise_latent(const Tensor& z_clean, double lambda_z0, const Tensor& noise);

// Closed-form KL[N(alpha1 z, sigma1^2 I) || N(0, I)] at the schedule's noisy
// endpoint, per sample in nats (summed over latent dims).
Tensor endpoint_kl_prior(const Tensor& z_clean, const NoiseSchedule& schedule);

// Unweighted diffusion ELBO term of the prior at time t plus the endpoint KL,
// mean over the batch in nats per sample.
double prior_loss(const ModelBundle& bundle, const Tensor& z_clean, double t, const Tensor& noise);

// Weighted decoder loss at time t. The x-MSE form weights ||x - x_hat||^2 by
// -dlambda/dt / 2 * e^lambda * sigmoid(b - lambda) * c_lf; the eps form weights
// ||eps - eps_hat||^2 (eps_hat derived algebraically from x_hat) by the same
// expression without e^lambda. The two agree by the identity
// ||eps - eps_hat||^2 = e^lambda ||x - x_hat||^2.
double decoder_loss(const ModelBundle& bundle, const Tensor& x, const Tensor& z0, double t,
                    const Tensor& noise, const WeightingConfig& cfg);
double decoder_loss_eps_form(const ModelBundle& bundle, const Tensor& x, const Tensor& z0,
                             double t, const Tensor& noise, const WeightingConfig& cfg);

// Entropy correction for a learned encoder std: per-dim -1/2 ln(sigma^2
// e^{lambda_z0} + 1), per sample in nats. Always <= 0.
Tensor learned_variance_entropy(const Tensor& sigma_z, double lambda_z0);

// Baseline decoder: deterministic reconstruction from z0 alone (the decoder
// evaluated at its cleanest log-SNR with zeroed image input), per-pixel MSE
// scaled by the loss factor.
double mse_reconstruction_loss(const ModelBundle& bundle, const Tensor& x, const Tensor& z0);

// Baseline prior: closed-form KL[N(alpha0 z, sigma0^2 I) || N(0, I)] at the
// encoding log-SNR, per sample in nats.
Tensor normal_prior_kl(const Tensor& z_clean, double lambda_z0);

// ---- in-graph builders used by the trainer and gradient tests ----

// Ablation switches; defaults reproduce plain two-stage training.
struct StepFlags {
    bool stop_gradient_prior = false;   // prior branch sees stop-grad latents
    double discounted_kl_weight = 1e-5; // weight of the standard-normal KL added with stop_gradient_prior
    bool learned_variance = false;      // encoder predicts (mu, sigma); adds entropy term
    bool mse_reconstruction = false;    // decoder trained as deterministic MSE head
    bool normal_prior = false;          // diffusion prior replaced by standard-normal KL
};

// The randomness one stage-1 step consumes, drawn by the caller in a fixed
// stream order. Dropout draws masks lazily inside the builders.
struct StepRandomness {
    double t_prior = 0.5;
    Tensor eps_prior;   // latent-shaped, for z_t
    Tensor eps_latent;  // latent-shaped, for z0
    double t_dec = 0.5;
    Tensor eps_dec;     // image-shaped, for x_t
    Tensor eps_enc;     // latent-shaped, only with learned_variance
    Rng* dropout = nullptr;
};

struct Stage1Outputs {
    Ref total;
    Ref prior_mse;
    Ref endpoint_kl;
    Ref decoder_term;
    Ref entropy;
    Ref per_sample;  // [N]
    Ref z_clean;
    Ref sigma = -1;  // learned per-dim std, when present
    bool has_sigma = false;
};

Stage1Outputs build_stage1_loss(Graph& g, Bindings& enc_b, Bindings& prior_b, Bindings& dec_b,
                                const ModelBundle& bundle, const Tensor& x,
                                const StepRandomness& rnd, const StepFlags& flags);

// Stage-2 base loss: sigmoid-weighted denoising MSE on fixed clean latents
// over the prior schedule (whose max equals lambda_z0).
Ref build_stage2_loss(Graph& g, Bindings& base_b, const DenoiserConfig& base_cfg,
                      const ModelBundle& bundle, const Tensor& z_clean, double t,
                      const Tensor& noise, const WeightingConfig& cfg, Rng* dropout);

LossBreakdown read_breakdown(const Graph& g, const Stage1Outputs& out);

}  // namespace ul
