#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ul/config.hpp"
#include "ul/datagen.hpp"
#include "ul/metrics.hpp"
#include "ul/nets.hpp"
#include "ul/objective.hpp"
#include "ul/schedule.hpp"

namespace ul {

enum class Stage { One, Two, Single };

// Adaptive-moment descent with a linear warmup into a constant learning rate.
// ema_decay > 0 maintains shadow parameters used for evaluation.
struct OptimConfig {
    double lr = 3e-3;
    int64_t warmup_steps = 50;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double ema_decay = 0.999;  // 0 disables the shadow copy

    void validate() const;
    bool operator==(const OptimConfig&) const = default;
};

// Learning rate applied at 0-based step k: lr * (k+1)/warmup during warmup,
// lr afterwards.
double lr_at(const OptimConfig& cfg, int64_t step);

// Periodic and final evaluation. recon_n counts images reconstructed through
// the decoder chain for PSNR / set-distance summaries; n_mc is the draw count
// for the bitrate estimate.
struct EvalConfig {
    int64_t every = 0;  // 0: evaluate only at the end of the run
    int64_t n_mc = 256;
    int64_t recon_n = 8;
    int64_t sampler_steps = 16;

    void validate() const;
    bool operator==(const EvalConfig&) const = default;
};

// Complete description of one training run. Everything that affects the
// result lives here; two runs with equal configs produce identical records.
struct TrainConfig {
    Stage stage = Stage::One;
    int64_t steps = 0;
    int64_t batch_size = 8;
    uint64_t seed = 0;

    EncoderConfig encoder;  // carries image dims and the latent spec
    DenoiserConfig prior{DenoiserRole::Prior};
    DenoiserConfig decoder{DenoiserRole::Decoder, {16, 32}, 1, 0.1, Conditioning::Latent};
    DenoiserConfig base{DenoiserRole::Base};  // built only for stage 2 / single
    WeightingConfig weighting;
    double prior_lambda_min = -15.0;
    double decoder_lambda_max = 15.0;
    double decoder_lambda_min = -15.0;

    OptimConfig optim;

    // Ablation switches. high_precision_latents raises the encoding log-SNR
    // to 10 and changes nothing else; the rest mirror the objective's flags.
    bool stop_gradient_prior = false;
    double discounted_kl_weight = 1e-5;
    bool high_precision_latents = false;
    bool learned_variance = false;
    bool mse_reconstruction = false;
    bool normal_prior = false;

    // Stage "single" only: the decoder weighting bias is lowered by this much,
    // shifting decoder capacity towards noisier levels.
    double single_stage_shift = 0.0;

    int64_t checkpoint_every = 0;  // 0: checkpoint only at the end
    EvalConfig eval;

    void validate() const;
    // The configured latent with the high-precision override applied.
    LatentSpec effective_latent() const;
    // Fresh deterministically-initialized bundle for this config (stage 1 /
    // single; stage 2 starts from a loaded bundle instead).
    ModelBundle initial_bundle() const;

    bool operator==(const TrainConfig&) const = default;
};

// Flat-config (de)serialization. Reading uses defaults for absent keys, so a
// minimal file works; write-then-read is the identity.
TrainConfig train_config_from(const ConfigMap& m);
void train_config_to(const TrainConfig& c, ConfigMap& m);

// Seed for one named randomness stream at one step. Every draw the trainer
// makes comes from such a stream, so any single draw can be reproduced in
// isolation and no stream ever influences another.
uint64_t stream_seed(uint64_t seed, std::string_view role, int64_t step);

// The stage-1 randomness for step k at batch size n, drawn in the order the
// training loop consumes it: prior time, prior noise, decoder time, decoder
// noise, latent encoding noise (and encoder posterior noise when the variance
// is learned). The dropout stream is attached by the loop itself.
StepRandomness draw_stage1_randomness(const TrainConfig& cfg, int64_t step, int64_t n);

// Base-model randomness for step k: one time draw and one latent-shaped noise.
struct BaseStepDraw {
    double t = 0.5;
    Tensor eps;
};
BaseStepDraw draw_base_randomness(const TrainConfig& cfg, int64_t step, int64_t n);

// One line of the training trace. For stage 2 the breakdown carries the
// weighted base loss in total (other terms zero); for single-stage runs the
// breakdown covers the joint objective's stage-1 part and base_term the
// concurrent base loss.
struct StepLog {
    int64_t step = 0;
    LossBreakdown loss;
    double base_term = 0.0;
    double lr = 0.0;
};

// Everything a run produced: config snapshot, loss trace, checkpoints written
// (when a run directory was given), periodic and final bitrate estimates, and
// the final parameters. diverged marks a run aborted on a non-finite loss or
// parameter, with the offending step recorded.
struct RunRecord {
    ConfigMap config;
    std::vector<StepLog> trace;
    std::vector<std::string> checkpoint_paths;
    std::vector<std::pair<int64_t, BitrateReport>> eval_reports;
    BitrateReport final_bitrate;
    ModelBundle bundle;
    bool diverged = false;
    int64_t divergence_step = -1;
};

// Joint encoder + prior + decoder training. An empty run_dir keeps the record
// in memory only; otherwise checkpoints, a JSON-lines log and a CSV summary
// land in that directory.
RunRecord train_stage1(const TrainConfig& cfg, const Dataset& data, const std::string& run_dir = "");

// Base-model training on clean latents from the frozen stage-1 encoder. The
// encoder and decoder are checksummed before and after; any change aborts.
// The config's latent spec must match the checkpoint's exactly — in
// particular the encoding log-SNR, which is the base schedule's upper end.
RunRecord train_stage2(const ModelBundle& stage1, const TrainConfig& cfg, const Dataset& data,
                       const std::string& run_dir = "");

// One-loop variant: stage-1 objective with the decoder bias lowered by the
// configured shift, plus a concurrent base model trained with the unweighted
// ELBO on detached clean latents. shift = 0 reproduces stage-1 training
// exactly, with the base learned on the side.
RunRecord train_single_stage(const TrainConfig& cfg, const Dataset& data,
                             const std::string& run_dir = "");

// One row of a sweep: the axis values, the trained model's bitrate and
// reconstruction metrics, or the error that stopped this row.
struct SweepRow {
    double loss_factor = 0.0;
    double bias = 0.0;
    bool ok = false;
    std::string error;
    BitrateReport bitrate;
    double psnr = 0.0;
    double rfid = 0.0;
    std::string checkpoint;

    bool operator==(const SweepRow&) const = default;
};

// Trains every config (stage 1 or single; they may differ only in weighting
// loss factor and bias) and evaluates each. Failures are recorded per row and
// the sweep continues. Rows come back sorted by (loss_factor, bias); with a
// run_dir each row trains under row_<k>/ and a sweep.csv is written.
std::vector<SweepRow> sweep(const std::vector<TrainConfig>& configs, const Dataset& data,
                            const std::string& run_dir = "");

// CSV for a sweep result, one sorted row per config.
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace ul
