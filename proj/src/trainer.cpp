#include "ul/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ul/checkpoint.hpp"
#include "ul/rng.hpp"
#include "ul/sampler.hpp"

namespace ul {

// ---- configs ----

void OptimConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw std::invalid_argument("optim: lr must be positive and finite");
    }
    if (warmup_steps < 0) {
        throw std::invalid_argument("optim: warmup_steps must be >= 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("optim: moment decays must lie in [0, 1)");
    }
    if (!(eps > 0.0)) {
        throw std::invalid_argument("optim: eps must be positive");
    }
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) {
        throw std::invalid_argument("optim: ema_decay must lie in [0, 1)");
    }
}

double lr_at(const OptimConfig& cfg, int64_t step) {
    if (step < 0) {
        throw std::invalid_argument("lr_at: step must be >= 0");
    }
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
        return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    }
    return cfg.lr;
}

void EvalConfig::validate() const {
    if (every < 0) {
        throw std::invalid_argument("eval: cadence must be >= 0");
    }
    if (n_mc < 1) {
        throw std::invalid_argument("eval: n_mc must be >= 1");
    }
    if (recon_n < 0) {
        throw std::invalid_argument("eval: recon_n must be >= 0");
    }
    if (sampler_steps < 1) {
        throw std::invalid_argument("eval: sampler_steps must be >= 1");
    }
}

LatentSpec TrainConfig::effective_latent() const {
    LatentSpec l = encoder.latent;
    if (high_precision_latents) {
        l.lambda_z0 = 10.0;
    }
    return l;
}

void TrainConfig::validate() const {
    if (steps < 0) {
        throw std::invalid_argument("train config: steps must be >= 0");
    }
    if (batch_size < 1) {
        throw std::invalid_argument("train config: batch_size must be >= 1");
    }
    if (checkpoint_every < 0) {
        throw std::invalid_argument("train config: checkpoint_every must be >= 0");
    }
    optim.validate();
    eval.validate();
    weighting.validate();

    EncoderConfig e = encoder;
    e.latent = effective_latent();
    e.learned_variance = learned_variance;
    e.validate();
    if (prior.role != DenoiserRole::Prior || prior.conditioning != Conditioning::None) {
        throw std::invalid_argument("train config: prior must be an unconditional token denoiser");
    }
    prior.validate();
    if (decoder.role != DenoiserRole::Decoder || decoder.conditioning != Conditioning::Latent) {
        throw std::invalid_argument(
            "train config: decoder must be a latent-conditioned image denoiser");
    }
    decoder.validate();
    (void)describe_decoder(decoder, e);  // checks decoder/encoder geometry
    if (stage != Stage::One) {
        if (base.role != DenoiserRole::Base || base.conditioning != Conditioning::None) {
            throw std::invalid_argument(
                "train config: base must be an unconditional token denoiser");
        }
        base.validate();
    }

    if (!std::isfinite(prior_lambda_min) || !(prior_lambda_min < effective_latent().lambda_z0)) {
        throw std::invalid_argument(
            "train config: prior_lambda_min must lie below the encoding log-SNR");
    }
    if (!std::isfinite(decoder_lambda_max) || !std::isfinite(decoder_lambda_min) ||
        !(decoder_lambda_min < decoder_lambda_max)) {
        throw std::invalid_argument("train config: decoder schedule range is empty");
    }
    if (!std::isfinite(discounted_kl_weight) || discounted_kl_weight < 0.0) {
        throw std::invalid_argument("train config: discounted_kl_weight must be finite and >= 0");
    }
    if (!std::isfinite(single_stage_shift)) {
        throw std::invalid_argument("train config: single_stage_shift must be finite");
    }
    if (single_stage_shift != 0.0 && stage != Stage::Single) {
        throw std::invalid_argument(
            "train config: single_stage_shift applies only to single-stage runs");
    }

    if (stop_gradient_prior && normal_prior) {
        throw std::invalid_argument(
            "train config: stop_gradient_prior and normal_prior are mutually exclusive");
    }
    if (mse_reconstruction && learned_variance) {
        throw std::invalid_argument(
            "train config: mse_reconstruction leaves no decoder likelihood for the entropy term");
    }
    if (mse_reconstruction && eval.recon_n > 0) {
        throw std::invalid_argument(
            "train config: mse_reconstruction trains a deterministic decoder, so sampler-based "
            "reconstruction eval is unavailable; set eval.recon_n = 0");
    }
    if (stage == Stage::Two &&
        (stop_gradient_prior || learned_variance || mse_reconstruction || normal_prior)) {
        throw std::invalid_argument(
            "train config: stage 2 trains only the base model; stage-1 ablation flags must be off");
    }
}

ModelBundle TrainConfig::initial_bundle() const {
    validate();
    if (stage == Stage::Two) {
        throw std::logic_error("initial_bundle: stage-2 runs start from a stage-1 checkpoint");
    }
    EncoderConfig e = encoder;
    e.latent = effective_latent();
    e.learned_variance = learned_variance;
    std::optional<DenoiserConfig> b;
    if (stage == Stage::Single) {
        b = base;
    }
    WeightingConfig w = weighting;
    if (stage == Stage::Single) {
        w.bias -= single_stage_shift;
    }
    ModelBundle out = make_bundle(e, prior, decoder, b, w, seed, prior_lambda_min,
                                  decoder_lambda_max, decoder_lambda_min);
    out.use_ema_for_eval = optim.ema_decay > 0.0;
    return out;
}

// ---- flat-config io ----

namespace {

void read_denoiser(const ConfigMap& m, const std::string& prefix, DenoiserConfig& d) {
    d.widths = m.get_int_list(prefix + ".widths", d.widths);
    d.blocks = static_cast<int>(m.get_int(prefix + ".blocks", d.blocks));
    d.dropout_rate = m.get_double(prefix + ".dropout", d.dropout_rate);
    d.lambda_embed_dim = static_cast<int>(m.get_int(prefix + ".lambda_embed", d.lambda_embed_dim));
}

void write_denoiser(ConfigMap& m, const std::string& prefix, const DenoiserConfig& d) {
    m.set_int_list(prefix + ".widths", d.widths);
    m.set_int(prefix + ".blocks", d.blocks);
    m.set_double(prefix + ".dropout", d.dropout_rate);
    m.set_int(prefix + ".lambda_embed", d.lambda_embed_dim);
}

}  // namespace

TrainConfig train_config_from(const ConfigMap& m) {
    TrainConfig c;
    const std::string stage = m.get_string("train.stage", "1");
    if (stage == "1") {
        c.stage = Stage::One;
    } else if (stage == "2") {
        c.stage = Stage::Two;
    } else if (stage == "single") {
        c.stage = Stage::Single;
    } else {
        throw std::invalid_argument("train.stage must be 1, 2 or single; got '" + stage + "'");
    }
    c.steps = m.get_int("train.steps", c.steps);
    c.batch_size = m.get_int("train.batch_size", c.batch_size);
    c.seed = m.get_seed("train.seed", c.seed);
    c.checkpoint_every = m.get_int("train.checkpoint_every", c.checkpoint_every);

    c.optim.lr = m.get_double("optim.lr", c.optim.lr);
    c.optim.warmup_steps = m.get_int("optim.warmup_steps", c.optim.warmup_steps);
    c.optim.beta1 = m.get_double("optim.beta1", c.optim.beta1);
    c.optim.beta2 = m.get_double("optim.beta2", c.optim.beta2);
    c.optim.eps = m.get_double("optim.eps", c.optim.eps);
    c.optim.ema_decay = m.get_double("optim.ema_decay", c.optim.ema_decay);

    c.weighting.bias = m.get_double("weighting.bias", c.weighting.bias);
    c.weighting.loss_factor = m.get_double("weighting.loss_factor", c.weighting.loss_factor);

    c.encoder.image_h = static_cast<int>(m.get_int("encoder.image_h", c.encoder.image_h));
    c.encoder.image_w = static_cast<int>(m.get_int("encoder.image_w", c.encoder.image_w));
    c.encoder.image_c = static_cast<int>(m.get_int("encoder.image_c", c.encoder.image_c));
    c.encoder.widths = m.get_int_list("encoder.widths", c.encoder.widths);
    c.encoder.blocks = static_cast<int>(m.get_int("encoder.blocks", c.encoder.blocks));
    c.encoder.patch = static_cast<int>(m.get_int("encoder.patch", c.encoder.patch));
    c.encoder.latent.h = static_cast<int>(m.get_int("latent.h", c.encoder.latent.h));
    c.encoder.latent.w = static_cast<int>(m.get_int("latent.w", c.encoder.latent.w));
    c.encoder.latent.c = static_cast<int>(m.get_int("latent.c", c.encoder.latent.c));
    c.encoder.latent.lambda_z0 = m.get_double("latent.lambda_z0", c.encoder.latent.lambda_z0);

    read_denoiser(m, "prior", c.prior);
    read_denoiser(m, "decoder", c.decoder);
    read_denoiser(m, "base", c.base);

    c.prior_lambda_min = m.get_double("schedule.prior_lambda_min", c.prior_lambda_min);
    c.decoder_lambda_max = m.get_double("schedule.decoder_lambda_max", c.decoder_lambda_max);
    c.decoder_lambda_min = m.get_double("schedule.decoder_lambda_min", c.decoder_lambda_min);

    c.stop_gradient_prior = m.get_bool("ablation.stop_gradient_prior", c.stop_gradient_prior);
    c.discounted_kl_weight = m.get_double("ablation.discounted_kl", c.discounted_kl_weight);
    c.high_precision_latents =
        m.get_bool("ablation.high_precision_latents", c.high_precision_latents);
    c.learned_variance = m.get_bool("ablation.learned_variance", c.learned_variance);
    c.mse_reconstruction = m.get_bool("ablation.mse_reconstruction", c.mse_reconstruction);
    c.normal_prior = m.get_bool("ablation.normal_prior", c.normal_prior);
    c.encoder.learned_variance = c.learned_variance;

    c.single_stage_shift = m.get_double("single.shift", c.single_stage_shift);

    c.eval.every = m.get_int("eval.every", c.eval.every);
    c.eval.n_mc = m.get_int("eval.n_mc", c.eval.n_mc);
    c.eval.recon_n = m.get_int("eval.recon_n", c.eval.recon_n);
    c.eval.sampler_steps = m.get_int("eval.sampler_steps", c.eval.sampler_steps);

    c.validate();
    return c;
}

void train_config_to(const TrainConfig& c, ConfigMap& m) {
    switch (c.stage) {
        case Stage::One: m.set("train.stage", "1"); break;
        case Stage::Two: m.set("train.stage", "2"); break;
        case Stage::Single: m.set("train.stage", "single"); break;
    }
    m.set_int("train.steps", c.steps);
    m.set_int("train.batch_size", c.batch_size);
    m.set_seed("train.seed", c.seed);
    m.set_int("train.checkpoint_every", c.checkpoint_every);

    m.set_double("optim.lr", c.optim.lr);
    m.set_int("optim.warmup_steps", c.optim.warmup_steps);
    m.set_double("optim.beta1", c.optim.beta1);
    m.set_double("optim.beta2", c.optim.beta2);
    m.set_double("optim.eps", c.optim.eps);
    m.set_double("optim.ema_decay", c.optim.ema_decay);

    m.set_double("weighting.bias", c.weighting.bias);
    m.set_double("weighting.loss_factor", c.weighting.loss_factor);

    m.set_int("encoder.image_h", c.encoder.image_h);
    m.set_int("encoder.image_w", c.encoder.image_w);
    m.set_int("encoder.image_c", c.encoder.image_c);
    m.set_int_list("encoder.widths", c.encoder.widths);
    m.set_int("encoder.blocks", c.encoder.blocks);
    m.set_int("encoder.patch", c.encoder.patch);
    m.set_int("latent.h", c.encoder.latent.h);
    m.set_int("latent.w", c.encoder.latent.w);
    m.set_int("latent.c", c.encoder.latent.c);
    m.set_double("latent.lambda_z0", c.encoder.latent.lambda_z0);

    write_denoiser(m, "prior", c.prior);
    write_denoiser(m, "decoder", c.decoder);
    write_denoiser(m, "base", c.base);

    m.set_double("schedule.prior_lambda_min", c.prior_lambda_min);
    m.set_double("schedule.decoder_lambda_max", c.decoder_lambda_max);
    m.set_double("schedule.decoder_lambda_min", c.decoder_lambda_min);

    m.set_bool("ablation.stop_gradient_prior", c.stop_gradient_prior);
    m.set_double("ablation.discounted_kl", c.discounted_kl_weight);
    m.set_bool("ablation.high_precision_latents", c.high_precision_latents);
    m.set_bool("ablation.learned_variance", c.learned_variance);
    m.set_bool("ablation.mse_reconstruction", c.mse_reconstruction);
    m.set_bool("ablation.normal_prior", c.normal_prior);

    m.set_double("single.shift", c.single_stage_shift);

    m.set_int("eval.every", c.eval.every);
    m.set_int("eval.n_mc", c.eval.n_mc);
    m.set_int("eval.recon_n", c.eval.recon_n);
    m.set_int("eval.sampler_steps", c.eval.sampler_steps);
}

// ---- randomness streams ----

uint64_t stream_seed(uint64_t seed, std::string_view role, int64_t step) {
    if (step < 0) {
        throw std::invalid_argument("stream_seed: step must be >= 0");
    }
    return derive_seed(seed, role, static_cast<uint64_t>(step));
}

StepRandomness draw_stage1_randomness(const TrainConfig& cfg, int64_t step, int64_t n) {
    if (n < 1) {
        throw std::invalid_argument("draw_stage1_randomness: batch size must be >= 1");
    }
    const LatentSpec lat = cfg.effective_latent();
    const std::vector<int> zshape{static_cast<int>(n), lat.h, lat.w, lat.c};
    const std::vector<int> xshape{static_cast<int>(n), cfg.encoder.image_h, cfg.encoder.image_w,
                                  cfg.encoder.image_c};
    StepRandomness r;
    r.t_prior = Rng(stream_seed(cfg.seed, "prior.t", step)).uniform();
    {
        Rng rng(stream_seed(cfg.seed, "prior.eps", step));
        r.eps_prior = rng.normal_tensor(zshape);
    }
    r.t_dec = Rng(stream_seed(cfg.seed, "dec.t", step)).uniform();
    {
        Rng rng(stream_seed(cfg.seed, "dec.eps", step));
        r.eps_dec = rng.normal_tensor(xshape);
    }
    {
        Rng rng(stream_seed(cfg.seed, "latent.eps", step));
        r.eps_latent = rng.normal_tensor(zshape);
    }
    if (cfg.learned_variance) {
        Rng rng(stream_seed(cfg.seed, "enc.eps", step));
        r.eps_enc = rng.normal_tensor(zshape);
    }
    return r;
}

BaseStepDraw draw_base_randomness(const TrainConfig& cfg, int64_t step, int64_t n) {
    if (n < 1) {
        throw std::invalid_argument("draw_base_randomness: batch size must be >= 1");
    }
    const LatentSpec lat = cfg.effective_latent();
    BaseStepDraw d;
    d.t = Rng(stream_seed(cfg.seed, "base.t", step)).uniform();
    Rng rng(stream_seed(cfg.seed, "base.eps", step));
    d.eps = rng.normal_tensor({static_cast<int>(n), lat.h, lat.w, lat.c});
    return d;
}

// ---- optimizer ----

namespace {

struct AdamState {
    std::vector<Tensor> m, v;  // parallel to the ParamSet's items
};

// One trained network: its parameters, EMA shadow and moment estimates.
struct TrainedNet {
    ParamSet* raw;
    ParamSet* ema;
    AdamState state;
    std::map<std::string, size_t> index;

    TrainedNet(ParamSet* r, ParamSet* e) : raw(r), ema(e) {
        state.m.resize(raw->items.size());
        state.v.resize(raw->items.size());
        for (size_t i = 0; i < raw->items.size(); ++i) {
            index[raw->items[i].first] = i;
        }
    }
};

void adam_step(TrainedNet& net, const Graph& g, const Bindings& bind, const OptimConfig& o,
               int64_t step) {
    const double lr = lr_at(o, step);
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(step + 1));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(step + 1));
    for (const auto& [name, ref] : bind.bound()) {
        if (!g.grad_ready(ref)) {
            continue;  // parameter not reached by this step's objective
        }
        const Tensor& gr = g.grad(ref);
        const size_t i = net.index.at(name);
        Tensor& w = net.raw->items[i].second;
        Tensor& m = net.state.m[i];
        Tensor& v = net.state.v[i];
        if (m.data.empty()) {
            m = Tensor(w.shape, std::vector<double>(w.data.size(), 0.0));
            v = m;
        }
        for (size_t j = 0; j < w.data.size(); ++j) {
            m.data[j] = o.beta1 * m.data[j] + (1.0 - o.beta1) * gr.data[j];
            v.data[j] = o.beta2 * v.data[j] + (1.0 - o.beta2) * gr.data[j] * gr.data[j];
            w.data[j] -= lr * (m.data[j] / c1) / (std::sqrt(v.data[j] / c2) + o.eps);
        }
    }
}

void ema_step(TrainedNet& net, double decay) {
    if (decay <= 0.0 || net.ema == nullptr || net.ema->empty()) {
        return;
    }
    for (size_t i = 0; i < net.raw->items.size(); ++i) {
        auto& e = net.ema->items[i].second.data;
        const auto& w = net.raw->items[i].second.data;
        for (size_t j = 0; j < e.size(); ++j) {
            e[j] = decay * e[j] + (1.0 - decay) * w[j];
        }
    }
}

void ensure_shadow(const ParamSet& raw, ParamSet& ema, double decay) {
    if (decay > 0.0 && ema.empty()) {
        ema = raw;
    }
}

// ---- run plumbing ----

void require_dataset_match(const EncoderConfig& e, const Dataset& data) {
    if (data.size() < 1) {
        throw std::invalid_argument("training: dataset is empty");
    }
    const DatasetSpec& s = data.spec();
    if (s.resolution != e.image_h || s.resolution != e.image_w || s.channels != e.image_c) {
        throw std::invalid_argument("training: dataset serves " + std::to_string(s.resolution) +
                                    "x" + std::to_string(s.resolution) + "x" +
                                    std::to_string(s.channels) + " but the config expects " +
                                    std::to_string(e.image_h) + "x" + std::to_string(e.image_w) +
                                    "x" + std::to_string(e.image_c));
    }
}

WhichModel report_model(const ModelBundle& b) {
    return b.base.empty() ? WhichModel::Prior : WhichModel::Base;
}

// Writes the on-disk form of a run: config snapshot, JSON-lines step log,
// checkpoints and a final CSV summary. A default-constructed writer (empty
// directory) swallows everything.
class RunWriter {
  public:
    RunWriter(const std::string& dir, const ConfigMap& snapshot) : dir_(dir) {
        if (dir_.empty()) {
            return;
        }
        std::filesystem::create_directories(dir_);
        save_config_file(snapshot, dir_ + "/config.cfg");
        log_.open(dir_ + "/log.jsonl", std::ios::trunc);
        if (!log_) {
            throw std::runtime_error("run dir: cannot open " + dir_ + "/log.jsonl for writing");
        }
    }

    bool enabled() const { return !dir_.empty(); }

    std::string save_checkpoint(const ModelBundle& b, int64_t step) {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt_%06lld.bin", static_cast<long long>(step));
        const std::string path = dir_ + "/" + name;
        save_bundle(b, path);
        return path;
    }

    void write_step(const StepLog& s, uint64_t seed) {
        if (!enabled()) {
            return;
        }
        nlohmann::json j;
        j["step"] = s.step;
        j["total"] = s.loss.total;
        j["prior_mse"] = s.loss.prior_mse_term;
        j["endpoint_kl"] = s.loss.endpoint_kl;
        j["decoder"] = s.loss.decoder_term;
        j["entropy"] = s.loss.entropy_term;
        j["base"] = s.base_term;
        j["lr"] = s.lr;
        j["seed"] = seed;
        log_ << j.dump() << '\n';
    }

    void write_eval(int64_t step, const BitrateReport& r) {
        if (!enabled()) {
            return;
        }
        nlohmann::json j;
        j["eval_step"] = step;
        j["nats_total"] = r.nats_total;
        j["bits_per_dim"] = r.bits_per_dim;
        j["bits_per_pixel"] = r.bits_per_pixel;
        j["std_error"] = r.std_error;
        log_ << j.dump() << '\n';
    }

    void write_divergence(int64_t step) {
        if (!enabled()) {
            return;
        }
        nlohmann::json j;
        j["diverged"] = true;
        j["step"] = step;
        log_ << j.dump() << '\n';
    }

    void write_summary(const BitrateReport& b, uint64_t seed, const std::string& ckpt_id) {
        if (!enabled()) {
            return;
        }
        std::ofstream out(dir_ + "/summary.csv", std::ios::trunc);
        out << metric_csv_header();
        out << metric_csv_line({"nats_total", b.nats_total, b.std_error, b.n_mc, seed, ckpt_id});
        out << metric_csv_line({"bits_per_dim", b.bits_per_dim, 0.0, b.n_mc, seed, ckpt_id});
        out << metric_csv_line({"bits_per_pixel", b.bits_per_pixel, 0.0, b.n_mc, seed, ckpt_id});
    }

  private:
    std::string dir_;
    std::ofstream log_;
};

void mark_divergence(RunRecord& rec, RunWriter& rw, int64_t step) {
    rec.diverged = true;
    rec.divergence_step = step;
    rec.final_bitrate = BitrateReport{};
    rec.final_bitrate.trained = false;  // no estimate exists for an aborted run
    rw.write_divergence(step);
}

StepFlags flags_of(const TrainConfig& cfg) {
    StepFlags f;
    f.stop_gradient_prior = cfg.stop_gradient_prior;
    f.discounted_kl_weight = cfg.discounted_kl_weight;
    f.learned_variance = cfg.learned_variance;
    f.mse_reconstruction = cfg.mse_reconstruction;
    f.normal_prior = cfg.normal_prior;
    return f;
}

void finish_run(RunRecord& rec, RunWriter& rw, ModelBundle& bundle, const TrainConfig& cfg,
                const Dataset& data, int64_t completed) {
    if (!rec.diverged) {
        if (rw.enabled()) {
            rec.checkpoint_paths.push_back(rw.save_checkpoint(bundle, completed));
        }
        rec.final_bitrate = estimate_bitrate(bundle, data, cfg.eval.n_mc, report_model(bundle),
                                             derive_seed(cfg.seed, "eval.bitrate"));
        rw.write_summary(rec.final_bitrate, cfg.seed, checkpoint_id(bundle));
    }
    rec.bundle = std::move(bundle);
}

void cadence_actions(RunRecord& rec, RunWriter& rw, const ModelBundle& bundle,
                     const TrainConfig& cfg, const Dataset& data, int64_t completed) {
    if (cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0 &&
        completed < cfg.steps && rw.enabled()) {
        rec.checkpoint_paths.push_back(rw.save_checkpoint(bundle, completed));
    }
    if (cfg.eval.every > 0 && completed % cfg.eval.every == 0) {
        const BitrateReport r =
            estimate_bitrate(bundle, data, cfg.eval.n_mc, report_model(bundle),
                             derive_seed(cfg.seed, "eval.bitrate", static_cast<uint64_t>(completed)));
        rec.eval_reports.emplace_back(completed, r);
        rw.write_eval(completed, r);
    }
}

}  // namespace

// ---- stage 1 ----

RunRecord train_stage1(const TrainConfig& cfg, const Dataset& data, const std::string& run_dir) {
    cfg.validate();
    if (cfg.stage != Stage::One) {
        throw std::invalid_argument("train_stage1: config stage must be 1");
    }
    ModelBundle bundle = cfg.initial_bundle();
    require_dataset_match(bundle.enc_cfg, data);
    ensure_shadow(bundle.enc, bundle.enc_ema, cfg.optim.ema_decay);
    ensure_shadow(bundle.prior, bundle.prior_ema, cfg.optim.ema_decay);
    ensure_shadow(bundle.dec, bundle.dec_ema, cfg.optim.ema_decay);

    RunRecord rec;
    train_config_to(cfg, rec.config);
    RunWriter rw(run_dir, rec.config);

    TrainedNet enc_net(&bundle.enc, &bundle.enc_ema);
    TrainedNet prior_net(&bundle.prior, &bundle.prior_ema);
    TrainedNet dec_net(&bundle.dec, &bundle.dec_ema);
    const StepFlags flags = flags_of(cfg);
    const uint64_t data_seed = derive_seed(cfg.seed, "data");

    int64_t completed = 0;
    for (int64_t k = 0; k < cfg.steps; ++k) {
        const Tensor x = data.batch(batch_indices(k, cfg.batch_size, data.size(), data_seed));
        StepRandomness rnd = draw_stage1_randomness(cfg, k, cfg.batch_size);
        Rng drop(stream_seed(cfg.seed, "dropout", k));
        rnd.dropout = &drop;

        Graph g;
        Bindings enc_b(g, bundle.enc, true);
        Bindings prior_b(g, bundle.prior, true);
        Bindings dec_b(g, bundle.dec, true);
        const Stage1Outputs out = build_stage1_loss(g, enc_b, prior_b, dec_b, bundle, x, rnd, flags);
        g.backward(out.total);
        StepLog sl{k, read_breakdown(g, out), 0.0, lr_at(cfg.optim, k)};
        if (!std::isfinite(sl.loss.total)) {
            mark_divergence(rec, rw, k);
            break;
        }

        adam_step(enc_net, g, enc_b, cfg.optim, k);
        adam_step(prior_net, g, prior_b, cfg.optim, k);
        adam_step(dec_net, g, dec_b, cfg.optim, k);
        if (!bundle.enc.all_finite() || !bundle.prior.all_finite() || !bundle.dec.all_finite()) {
            mark_divergence(rec, rw, k);
            break;
        }
        ema_step(enc_net, cfg.optim.ema_decay);
        ema_step(prior_net, cfg.optim.ema_decay);
        ema_step(dec_net, cfg.optim.ema_decay);

        completed = k + 1;
        bundle.steps_trained = completed;
        rec.trace.push_back(sl);
        rw.write_step(sl, cfg.seed);
        cadence_actions(rec, rw, bundle, cfg, data, completed);
    }

    finish_run(rec, rw, bundle, cfg, data, completed);
    return rec;
}

// ---- stage 2 ----

RunRecord train_stage2(const ModelBundle& stage1, const TrainConfig& cfg, const Dataset& data,
                       const std::string& run_dir) {
    cfg.validate();
    if (cfg.stage != Stage::Two) {
        throw std::invalid_argument("train_stage2: config stage must be 2");
    }
    stage1.validate();
    if (stage1.steps_trained <= 0) {
        throw std::invalid_argument("train_stage2: the stage-1 bundle is untrained");
    }
    if (cfg.effective_latent() != stage1.enc_cfg.latent) {
        throw std::invalid_argument(
            "train_stage2: config latent spec does not match the checkpoint; the base schedule's "
            "upper end must equal the encoding log-SNR exactly");
    }
    if (stage1.prior_schedule.lambda_max != stage1.enc_cfg.latent.lambda_z0) {
        throw std::logic_error(
            "train_stage2: checkpoint schedule does not end at the encoding log-SNR");
    }
    require_dataset_match(stage1.enc_cfg, data);

    ModelBundle bundle = stage1;
    bundle.base_cfg = cfg.base;
    bundle.base = init_token_denoiser(cfg.base, bundle.enc_cfg.latent,
                                      derive_seed(cfg.seed, "init.base"));
    bundle.base_ema.items.clear();
    bundle.use_ema_for_eval = stage1.use_ema_for_eval || cfg.optim.ema_decay > 0.0;
    ensure_shadow(bundle.base, bundle.base_ema, cfg.optim.ema_decay);

    const uint64_t frozen_before[] = {
        param_checksum(bundle.enc),     param_checksum(bundle.dec),
        param_checksum(bundle.prior),   param_checksum(bundle.enc_ema),
        param_checksum(bundle.dec_ema), param_checksum(bundle.prior_ema)};

    RunRecord rec;
    train_config_to(cfg, rec.config);
    RunWriter rw(run_dir, rec.config);
    TrainedNet base_net(&bundle.base, &bundle.base_ema);
    const uint64_t data_seed = derive_seed(cfg.seed, "data");

    int64_t completed = 0;
    for (int64_t k = 0; k < cfg.steps; ++k) {
        const Tensor x = data.batch(batch_indices(k, cfg.batch_size, data.size(), data_seed));
        const Tensor z_clean = encode(bundle, x);  // frozen evaluation-grade targets
        const BaseStepDraw bd = draw_base_randomness(cfg, k, cfg.batch_size);
        Rng drop(stream_seed(cfg.seed, "base.dropout", k));

        Graph g;
        Bindings base_b(g, bundle.base, true);
        const Ref loss = build_stage2_loss(g, base_b, *bundle.base_cfg, bundle, z_clean, bd.t,
                                           bd.eps, cfg.weighting, &drop);
        g.backward(loss);
        StepLog sl{k, {}, 0.0, lr_at(cfg.optim, k)};
        sl.loss.total = g.val(loss).data[0];
        if (!std::isfinite(sl.loss.total)) {
            mark_divergence(rec, rw, k);
            break;
        }

        adam_step(base_net, g, base_b, cfg.optim, k);
        if (!bundle.base.all_finite()) {
            mark_divergence(rec, rw, k);
            break;
        }
        ema_step(base_net, cfg.optim.ema_decay);

        completed = k + 1;
        bundle.steps_trained = stage1.steps_trained + completed;
        rec.trace.push_back(sl);
        rw.write_step(sl, cfg.seed);
        cadence_actions(rec, rw, bundle, cfg, data, completed);
    }

    const uint64_t frozen_after[] = {
        param_checksum(bundle.enc),     param_checksum(bundle.dec),
        param_checksum(bundle.prior),   param_checksum(bundle.enc_ema),
        param_checksum(bundle.dec_ema), param_checksum(bundle.prior_ema)};
    for (size_t i = 0; i < 6; ++i) {
        if (frozen_before[i] != frozen_after[i]) {
            throw std::logic_error("train_stage2: frozen parameters changed during training");
        }
    }

    finish_run(rec, rw, bundle, cfg, data, completed);
    return rec;
}

// ---- single stage ----

RunRecord train_single_stage(const TrainConfig& cfg, const Dataset& data,
                             const std::string& run_dir) {
    cfg.validate();
    if (cfg.stage != Stage::Single) {
        throw std::invalid_argument("train_single_stage: config stage must be single");
    }
    ModelBundle bundle = cfg.initial_bundle();
    require_dataset_match(bundle.enc_cfg, data);
    ensure_shadow(bundle.enc, bundle.enc_ema, cfg.optim.ema_decay);
    ensure_shadow(bundle.prior, bundle.prior_ema, cfg.optim.ema_decay);
    ensure_shadow(bundle.dec, bundle.dec_ema, cfg.optim.ema_decay);
    ensure_shadow(bundle.base, bundle.base_ema, cfg.optim.ema_decay);

    RunRecord rec;
    train_config_to(cfg, rec.config);
    RunWriter rw(run_dir, rec.config);

    TrainedNet enc_net(&bundle.enc, &bundle.enc_ema);
    TrainedNet prior_net(&bundle.prior, &bundle.prior_ema);
    TrainedNet dec_net(&bundle.dec, &bundle.dec_ema);
    TrainedNet base_net(&bundle.base, &bundle.base_ema);
    const StepFlags flags = flags_of(cfg);
    const uint64_t data_seed = derive_seed(cfg.seed, "data");
    // The concurrent base model trains with the plain ELBO: sigmoid factor 1
    // everywhere, no loss factor.
    const WeightingConfig unweighted{std::numeric_limits<double>::infinity(), 1.0};

    int64_t completed = 0;
    for (int64_t k = 0; k < cfg.steps; ++k) {
        const Tensor x = data.batch(batch_indices(k, cfg.batch_size, data.size(), data_seed));
        StepRandomness rnd = draw_stage1_randomness(cfg, k, cfg.batch_size);
        Rng drop(stream_seed(cfg.seed, "dropout", k));
        rnd.dropout = &drop;

        Graph g;
        Bindings enc_b(g, bundle.enc, true);
        Bindings prior_b(g, bundle.prior, true);
        Bindings dec_b(g, bundle.dec, true);
        const Stage1Outputs out = build_stage1_loss(g, enc_b, prior_b, dec_b, bundle, x, rnd, flags);
        g.backward(out.total);
        StepLog sl{k, read_breakdown(g, out), 0.0, lr_at(cfg.optim, k)};
        const Tensor z_clean = g.val(out.z_clean);  // detached targets for the base
        if (!std::isfinite(sl.loss.total)) {
            mark_divergence(rec, rw, k);
            break;
        }

        adam_step(enc_net, g, enc_b, cfg.optim, k);
        adam_step(prior_net, g, prior_b, cfg.optim, k);
        adam_step(dec_net, g, dec_b, cfg.optim, k);
        if (!bundle.enc.all_finite() || !bundle.prior.all_finite() || !bundle.dec.all_finite()) {
            mark_divergence(rec, rw, k);
            break;
        }
        ema_step(enc_net, cfg.optim.ema_decay);
        ema_step(prior_net, cfg.optim.ema_decay);
        ema_step(dec_net, cfg.optim.ema_decay);

        const BaseStepDraw bd = draw_base_randomness(cfg, k, cfg.batch_size);
        Rng bdrop(stream_seed(cfg.seed, "base.dropout", k));
        Graph g2;
        Bindings base_b(g2, bundle.base, true);
        const Ref bloss = build_stage2_loss(g2, base_b, *bundle.base_cfg, bundle, z_clean, bd.t,
                                            bd.eps, unweighted, &bdrop);
        g2.backward(bloss);
        sl.base_term = g2.val(bloss).data[0];
        if (!std::isfinite(sl.base_term)) {
            mark_divergence(rec, rw, k);
            break;
        }
        adam_step(base_net, g2, base_b, cfg.optim, k);
        if (!bundle.base.all_finite()) {
            mark_divergence(rec, rw, k);
            break;
        }
        ema_step(base_net, cfg.optim.ema_decay);

        completed = k + 1;
        bundle.steps_trained = completed;
        rec.trace.push_back(sl);
        rw.write_step(sl, cfg.seed);
        cadence_actions(rec, rw, bundle, cfg, data, completed);
    }

    finish_run(rec, rw, bundle, cfg, data, completed);
    return rec;
}

// ---- sweeps ----

namespace {

// Serialization of a config with the sweep axes blanked, for the
// everything-else-equal precondition.
std::string off_axis_desc(const TrainConfig& c) {
    ConfigMap m;
    train_config_to(c, m);
    std::string s;
    for (const auto& [k, v] : m.entries) {
        if (k != "weighting.loss_factor" && k != "weighting.bias") {
            s += k + "=" + v + "\n";
        }
    }
    return s;
}

}  // namespace

std::vector<SweepRow> sweep(const std::vector<TrainConfig>& configs, const Dataset& data,
                            const std::string& run_dir) {
    if (configs.empty()) {
        throw std::invalid_argument("sweep: needs at least one config");
    }
    const std::string base_desc = off_axis_desc(configs.front());
    for (const TrainConfig& c : configs) {
        if (c.stage == Stage::Two) {
            throw std::invalid_argument(
                "sweep: rows train from scratch; stage must be 1 or single");
        }
        if (off_axis_desc(c) != base_desc) {
            throw std::invalid_argument(
                "sweep: configs may differ only in weighting.loss_factor and weighting.bias");
        }
    }
    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir);
    }

    std::vector<SweepRow> rows;
    for (size_t i = 0; i < configs.size(); ++i) {
        const TrainConfig& c = configs[i];
        SweepRow row;
        row.loss_factor = c.weighting.loss_factor;
        row.bias = c.weighting.bias;
        try {
            const std::string row_dir =
                run_dir.empty() ? std::string() : run_dir + "/row_" + std::to_string(i);
            RunRecord rec = c.stage == Stage::One ? train_stage1(c, data, row_dir)
                                                 : train_single_stage(c, data, row_dir);
            if (rec.diverged) {
                throw std::runtime_error("diverged at step " +
                                         std::to_string(rec.divergence_step));
            }
            row.bitrate = rec.final_bitrate;
            row.checkpoint = checkpoint_id(rec.bundle);
            const int64_t n_rec = std::min<int64_t>(c.eval.recon_n, data.size());
            if (n_rec >= 1) {
                // Deterministic round trips: psnr should track what the latent
                // carries, not ancestral churn.
                SamplerConfig sc;
                sc.steps = static_cast<int>(c.eval.sampler_steps);
                sc.kind = SamplerConfig::Kind::Deterministic;
                double acc = 0.0;
                for (int64_t j = 0; j < n_rec; ++j) {
                    sc.seed = derive_seed(c.seed, "eval.recon", static_cast<uint64_t>(j));
                    const Tensor x = data.sample(j);
                    acc += psnr(x, reconstruct(rec.bundle, x, sc));
                }
                row.psnr = acc / static_cast<double>(n_rec);
            }
            if (n_rec >= 2) {
                SamplerConfig sc;
                sc.steps = static_cast<int>(c.eval.sampler_steps);
                sc.seed = derive_seed(c.seed, "eval.rfid");
                row.rfid = rfid(rec.bundle, data, n_rec, sc);
            }
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }

    std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
        if (a.loss_factor != b.loss_factor) {
            return a.loss_factor < b.loss_factor;
        }
        return a.bias < b.bias;
    });

    const std::string csv = sweep_csv(rows);
    if (!run_dir.empty()) {
        std::ofstream out(run_dir + "/sweep.csv", std::ios::trunc);
        out << csv;
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "loss_factor,bias,ok,nats_total,bits_per_dim,bits_per_pixel,psnr,rfid,checkpoint,error\n";
    char buf[256];
    for (const SweepRow& r : rows) {
        std::string err = r.error;
        for (char& ch : err) {
            if (ch == ',' || ch == '\n') {
                ch = ';';
            }
        }
        std::snprintf(buf, sizeof buf, "%.10g,%.10g,%d,%.10g,%.10g,%.10g,%.10g,%.10g,",
                      r.loss_factor, r.bias, r.ok ? 1 : 0, r.bitrate.nats_total,
                      r.bitrate.bits_per_dim, r.bitrate.bits_per_pixel, r.psnr, r.rfid);
        out += buf;
        out += r.checkpoint;
        out += ',';
        out += err;
        out += '\n';
    }
    return out;
}

}  // namespace ul
