#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ul/nets.hpp"
#include "ul/rng.hpp"
#include "ul/schedule.hpp"
#include "ul/tensor.hpp"

namespace ul {

// Reverse-diffusion sampling. Latents are drawn by running the token denoiser
// (base model when present, prior otherwise) from pure noise down to the
// latent noise floor; images by running the decoder conditioned on that latent
// across its full schedule. Both directions share one chain routine over a
// uniform-in-lambda grid.
struct SamplerConfig {
    enum class Kind { Ancestral, Deterministic };

    int steps = 128;
    Kind kind = Kind::Ancestral;
    // Scales the ancestral transition noise; 1 is the standard posterior std,
    // 0 collapses to the posterior-mean chain. Ignored by Deterministic.
    double churn = 1.0;
    uint64_t seed = 0;
    // Hand back the model's last clean prediction instead of the stochastic
    // endpoint state. Off by default: downstream consumers are trained on the
    // noisy endpoint distribution.
    bool return_clean_prediction = false;

    void validate() const;
};

// Clean-signal predictor: maps (noisy batch, lambda) to a same-shape estimate.
using DenoiseFn = std::function<Tensor(const Tensor&, double)>;

struct ChainResult {
    Tensor state;  // stochastic sample at schedule.lambda_max
    Tensor clean;  // final clean prediction (filled only when requested)
};

// Core reverse pass: start at N(0, I) at schedule.lambda_min, take cfg.steps
// transitions up a uniform lambda grid, never evaluating the model outside
// [lambda_min, lambda_max]. Noise comes from `rng` (initial state first, then
// one draw per ancestral step).
ChainResult reverse_chain(const DenoiseFn& model, const NoiseSchedule& schedule,
                          const std::vector<int>& shape, const SamplerConfig& cfg, Rng& rng);

// Draw latents at the latent noise floor lambda_z0. Rejects bundles that were
// never trained or carry non-finite parameters. Batched form returns
// [n, h, w, c]; the single form squeezes the batch dim.
Tensor sample_latents(const ModelBundle& bundle, int64_t n, const SamplerConfig& cfg);
Tensor sample_latent(const ModelBundle& bundle, const SamplerConfig& cfg);

// Run the decoder chain conditioned on z0 (shape [h,w,c] or [n,h,w,c]) and
// clamp to [-1, 1] at emission only; intermediate states are left free.
Tensor decode(const ModelBundle& bundle, const Tensor& z0, const SamplerConfig& cfg);

// encode -> redraw the fixed encoding noise at lambda_z0 -> decode.
Tensor reconstruct(const ModelBundle& bundle, const Tensor& x, const SamplerConfig& cfg);

// n independent end-to-end samples; sample k depends only on (cfg.seed, k), so
// growing n extends the set without disturbing earlier entries. The two
// bundles may be one and the same; their latent geometries must agree.
std::vector<Tensor> generate(const ModelBundle& latent_bundle, const ModelBundle& decoder_bundle,
                             int64_t n, const SamplerConfig& cfg);

}  // namespace ul
