#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ul/graph.hpp"
#include "ul/rng.hpp"
#include "ul/schedule.hpp"
#include "ul/tensor.hpp"

namespace ul {

// Latent grid handed between encoder, prior and decoder. lambda_z0 is the
// fixed log-SNR of the encoding noise; the prior chain terminates here.
struct LatentSpec {
    int h = 4;
    int w = 4;
    int c = 2;
    double lambda_z0 = 5.0;

    void validate() const;
    int64_t dims() const { return static_cast<int64_t>(h) * w * c; }
    bool operator==(const LatentSpec&) const = default;
};

// Conv/residual encoder with an initial patching step. Spatial flow:
// image -> space_to_depth(patch) -> stage 0 -> down x2 -> stage 1 -> ... -> head,
// so image dims must equal latent dims * patch * 2^(stages-1).
struct EncoderConfig {
    int image_h = 16;
    int image_w = 16;
    int image_c = 1;
    LatentSpec latent;
    std::vector<int> widths = {16, 32};  // channels per stage
    int blocks = 1;                      // residual blocks per stage
    int patch = 2;
    bool learned_variance = false;  // adds a per-dim log-sigma head

    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

enum class DenoiserRole { Prior, Decoder, Base };
enum class Conditioning { None, Latent };

// Prior/base: MLP-mixer over per-position latent tokens, widths[0] = model dim.
// Decoder: U-shaped conv net over images, widths = channels per resolution
// level, with the latent concatenated at the bottleneck.
struct DenoiserConfig {
    DenoiserRole role = DenoiserRole::Prior;
    std::vector<int> widths = {32};
    int blocks = 2;
    double dropout_rate = 0.1;
    Conditioning conditioning = Conditioning::None;
    int lambda_embed_dim = 8;

    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

// Ordered name -> tensor storage for one network's parameters.
struct ParamSet {
    std::vector<std::pair<std::string, Tensor>> items;

    Tensor& add(std::string name, Tensor t);
    Tensor* find(std::string_view name);
    const Tensor* find(std::string_view name) const;
    int64_t param_count() const;
    bool all_finite() const;
    bool empty() const { return items.empty(); }
};

// Lazily binds parameters into a graph. Builders request parameters by name;
// asking for a name the ParamSet lacks throws, which keeps builders and
// initializers honest about each other.
class Bindings {
public:
    Bindings(Graph& g, const ParamSet& params, bool needs_grad)
        : g_(&g), params_(&params), needs_grad_(needs_grad) {}

    Ref operator()(const std::string& name);

    const std::vector<std::pair<std::string, Ref>>& bound() const { return bound_; }

private:
    Graph* g_;
    const ParamSet* params_;
    bool needs_grad_;
    std::vector<std::pair<std::string, Ref>> bound_;
};

// Everything needed to run the system: configs, schedules, parameters and
// their EMA shadows. Parameter arrays must stay finite at all times.
struct ModelBundle {
    EncoderConfig enc_cfg;
    DenoiserConfig prior_cfg;
    DenoiserConfig dec_cfg;
    std::optional<DenoiserConfig> base_cfg;
    NoiseSchedule prior_schedule{5.0, -15.0};
    NoiseSchedule decoder_schedule{15.0, -15.0};
    WeightingConfig weighting;
    uint64_t seed = 0;
    int64_t steps_trained = 0;
    bool use_ema_for_eval = false;

    ParamSet enc, prior, dec, base;
    ParamSet enc_ema, prior_ema, dec_ema, base_ema;

    void validate() const;
    const ParamSet& eval_params(const ParamSet& raw, const ParamSet& ema) const {
        return (use_ema_for_eval && !ema.empty()) ? ema : raw;
    }
};

// Builds and deterministically initializes a full bundle. The prior schedule
// runs from latent.lambda_z0 down to prior_lambda_min; the decoder schedule
// covers the wider image-space range.
ModelBundle make_bundle(const EncoderConfig& enc, const DenoiserConfig& prior,
                        const DenoiserConfig& dec, const std::optional<DenoiserConfig>& base,
                        const WeightingConfig& weighting, uint64_t seed,
                        double prior_lambda_min = -15.0, double decoder_lambda_max = 15.0,
                        double decoder_lambda_min = -15.0);

// Initialize one network's parameters (variance-scaled weights, zero biases,
// zero-initialized denoiser output layers).
ParamSet init_encoder(const EncoderConfig& cfg, uint64_t seed);
ParamSet init_token_denoiser(const DenoiserConfig& cfg, const LatentSpec& latent, uint64_t seed);
ParamSet init_decoder(const DenoiserConfig& cfg, const EncoderConfig& enc, uint64_t seed);

// Sinusoidal features of a log-SNR value, shape [1, dim].
Tensor lambda_embedding(double lambda, int dim);

// Graph builders. `dropout` non-null enables inverted dropout with that
// stream; null (evaluation) is deterministic.
struct EncodeOut {
    Ref mean;
    Ref log_sigma = -1;  // valid only when has_sigma
    bool has_sigma = false;
};
EncodeOut encode_g(Graph& g, Bindings& p, const EncoderConfig& cfg, Ref x);
Ref denoise_tokens_g(Graph& g, Bindings& p, const DenoiserConfig& cfg, const LatentSpec& latent,
                     Ref z_t, double lambda, Rng* dropout = nullptr);
Ref denoise_decoder_g(Graph& g, Bindings& p, const DenoiserConfig& cfg, const EncoderConfig& enc,
                      Ref x_t, Ref z0, double lambda, Rng* dropout = nullptr);

// Plain evaluation wrappers over the bundle (EMA-aware, no gradients).
Tensor encode(const ModelBundle& bundle, const Tensor& x);
Tensor encode_sigma(const ModelBundle& bundle, const Tensor& x);  // learned per-dim std
Tensor denoise_prior(const ModelBundle& bundle, const Tensor& z_t, double lambda);
Tensor denoise_base(const ModelBundle& bundle, const Tensor& z_t, double lambda);
Tensor denoise_decoder(const ModelBundle& bundle, const Tensor& x_t, const Tensor& z0,
                       double lambda);

// Static structure description: every linear map with its token count, for
// FLOP accounting without running the network.
struct LinearDesc {
    std::string name;
    int64_t tokens = 0;
    int64_t in = 0;
    int64_t out = 0;
};
struct NetDescription {
    std::vector<LinearDesc> linears;
    int64_t param_count = 0;
};
NetDescription describe_encoder(const EncoderConfig& cfg);
NetDescription describe_token_denoiser(const DenoiserConfig& cfg, const LatentSpec& latent);
NetDescription describe_decoder(const DenoiserConfig& cfg, const EncoderConfig& enc);

}  // namespace ul
