// Operator front end: training, sampling, evaluation, sweeps and FLOP
// reporting over one flat config format and self-sufficient run directories.
//
// Conventions shared by every subcommand:
//   - errors go to stderr as "error: ..." and exit nonzero;
//   - a run directory that already holds the requested artifact is left
//     untouched unless --overwrite is given;
//   - every line of numeric output is deterministic for a fixed config+seed.
#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ul/checkpoint.hpp"
#include "ul/config.hpp"
#include "ul/datagen.hpp"
#include "ul/image_io.hpp"
#include "ul/metrics.hpp"
#include "ul/nets.hpp"
#include "ul/rng.hpp"
#include "ul/sampler.hpp"
#include "ul/trainer.hpp"

namespace fs = std::filesystem;
using namespace ul;

namespace {

// ---- config plumbing ----

ConfigMap load_config_or_die(const std::string& path) {
    if (!fs::exists(path)) {
        throw std::runtime_error("config file not found: '" + path + "'");
    }
    return load_config_file(path);
}

// Misspelled keys are silent time bombs; reject anything neither the train
// reader nor the data reader consumed.
void reject_unknown_keys(const ConfigMap& m, const std::string& path) {
    const std::vector<std::string> stale = m.unread_keys();
    if (stale.empty()) {
        return;
    }
    std::string msg = path + ": unknown config key(s):";
    for (const std::string& k : stale) {
        msg += " '" + k + "'";
    }
    throw std::invalid_argument(msg);
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::One: return "1";
        case Stage::Two: return "2";
        case Stage::Single: return "single";
    }
    return "?";
}

// A subcommand implies its stage. A config may omit train.stage (the command
// fills it in) or state it explicitly, but a conflicting statement is an
// error, not a silent override.
TrainConfig read_train_config(ConfigMap& m, const std::string& path, Stage want) {
    const bool stated = m.has("train.stage");
    TrainConfig c = train_config_from(m);
    if (!stated) {
        c.stage = want;
        c.validate();
    } else if (c.stage != want) {
        throw std::invalid_argument(path + ": train.stage is '" + stage_name(c.stage) +
                                    "' but this command trains stage '" + stage_name(want) + "'");
    }
    return c;
}

Dataset dataset_from_config(const ConfigMap& m, const std::string& origin) {
    const DatasetSpec spec = dataset_spec_from(m);
    if (spec.family != DatasetSpec::Family::Folder && spec.size < 1) {
        throw std::invalid_argument(origin + ": data.size must be >= 1 for generated datasets");
    }
    return generate(spec);
}

// ---- run-directory plumbing ----

bool run_completed(const std::string& dir) { return fs::exists(fs::path(dir) / "summary.csv"); }

// true: go ahead and (re)create; false: artifact already present, skip.
bool prepare_run_dir(const std::string& dir, bool overwrite) {
    if (dir.empty()) {
        throw std::invalid_argument("--run-dir must not be empty");
    }
    if (!fs::exists(dir)) {
        return true;
    }
    if (overwrite) {
        fs::remove_all(dir);
        return true;
    }
    if (run_completed(dir)) {
        std::printf("run directory '%s' already holds a completed run; --overwrite redoes it\n",
                    dir.c_str());
        return false;
    }
    if (fs::is_directory(dir) && fs::directory_iterator(dir) == fs::directory_iterator()) {
        return true;  // an empty directory is fine to claim
    }
    throw std::runtime_error("run directory '" + dir +
                             "' holds a partial or foreign run; pass --overwrite to replace it");
}

// The trainer snapshots only train.* keys; fold the dataset spec back in so
// the directory can be re-evaluated without the original config file.
void store_dataset_spec(const std::string& run_dir, const DatasetSpec& spec) {
    const std::string path = (fs::path(run_dir) / "config.cfg").string();
    ConfigMap m = load_config_file(path);
    dataset_spec_to(spec, m);
    save_config_file(m, path);
}

ConfigMap run_dir_config(const std::string& run_dir) {
    const fs::path p = fs::path(run_dir) / "config.cfg";
    if (!fs::exists(p)) {
        throw std::runtime_error("'" + run_dir + "' is not a run directory (no config.cfg)");
    }
    return load_config_file(p.string());
}

// Highest-step checkpoint in a run directory — the final one for a finished
// run, the newest partial state otherwise.
std::string latest_checkpoint(const std::string& run_dir) {
    std::string best;
    int64_t best_step = -1;
    if (fs::is_directory(run_dir)) {
        for (const auto& entry : fs::directory_iterator(run_dir)) {
            const std::string name = entry.path().filename().string();
            long long step = 0;
            if (std::sscanf(name.c_str(), "ckpt_%lld.bin", &step) == 1 && step > best_step) {
                best_step = step;
                best = entry.path().string();
            }
        }
    }
    if (best.empty()) {
        throw std::runtime_error("no checkpoint (ckpt_*.bin) found in '" + run_dir + "'");
    }
    return best;
}

// ---- shared output ----

std::string g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void print_outcome(const RunRecord& rec, const std::string& run_dir) {
    if (!rec.trace.empty()) {
        const StepLog& last = rec.trace.back();
        std::printf("final step=%" PRId64 " total=%s prior_mse=%s endpoint_kl=%s decoder=%s", last.step,
                    g(last.loss.total).c_str(), g(last.loss.prior_mse_term).c_str(),
                    g(last.loss.endpoint_kl).c_str(), g(last.loss.decoder_term).c_str());
        if (last.loss.entropy_term != 0.0) {
            std::printf(" entropy=%s", g(last.loss.entropy_term).c_str());
        }
        if (last.base_term != 0.0) {
            std::printf(" base=%s", g(last.base_term).c_str());
        }
        std::printf("\n");
    }
    const BitrateReport& b = rec.final_bitrate;
    std::printf("bitrate nats_total=%s bits_per_dim=%s bits_per_pixel=%s se=%s n_mc=%" PRId64 "\n",
                g(b.nats_total).c_str(), g(b.bits_per_dim).c_str(), g(b.bits_per_pixel).c_str(),
                g(b.std_error).c_str(), b.n_mc);
    std::printf("checkpoint %s in %s\n", checkpoint_id(rec.bundle).c_str(), run_dir.c_str());
}

int finish_training(const RunRecord& rec, const std::string& run_dir, const DatasetSpec& dspec) {
    if (rec.diverged) {
        std::fprintf(stderr, "error: training diverged at step %" PRId64 " (see %s/log.jsonl)\n",
                     rec.divergence_step, run_dir.c_str());
        return 1;
    }
    store_dataset_spec(run_dir, dspec);
    print_outcome(rec, run_dir);
    return 0;
}

// ---- option bundles ----

struct TrainArgs {
    std::string config_path;
    std::string run_dir;
    uint64_t seed = 0;
    int64_t steps = 0;
    bool overwrite = false;

    bool stop_gradient_prior = false;
    std::optional<double> discounted_kl;
    bool high_precision_latents = false;
    bool learned_variance = false;
    bool mse_reconstruction = false;
    bool normal_prior = false;

    CLI::App* cmd = nullptr;

    void attach(CLI::App* c, bool with_ablations) {
        cmd = c;
        c->add_option("--config", config_path, "flat key=value config file")->required();
        c->add_option("--run-dir", run_dir, "directory for checkpoints, logs and metrics")
            ->required();
        c->add_option("--seed", seed, "override train.seed");
        c->add_option("--steps", steps, "override train.steps");
        c->add_flag("--overwrite", overwrite, "replace an existing run directory");
        if (with_ablations) {
            c->add_flag("--stop-gradient-prior", stop_gradient_prior,
                        "detach the prior loss from the encoder, add discounted latent KL");
            c->add_option("--discounted-kl", discounted_kl,
                          "weight of the discounted latent KL (with --stop-gradient-prior)");
            c->add_flag("--high-precision-latents", high_precision_latents,
                        "raise the encoding log-SNR from 5 to 10");
            c->add_flag("--learned-variance", learned_variance,
                        "learn the encoder noise level instead of fixing it");
            c->add_flag("--mse-reconstruction", mse_reconstruction,
                        "replace the diffusion decoder loss with plain MSE");
            c->add_flag("--normal-prior", normal_prior,
                        "score latents against N(0, I) instead of the learned prior");
        }
    }

    // Command line wins over file, but only where a flag was actually given.
    void apply(TrainConfig& c) const {
        if (cmd->count("--seed")) c.seed = seed;
        if (cmd->count("--steps")) c.steps = steps;
        if (stop_gradient_prior) c.stop_gradient_prior = true;
        if (discounted_kl) c.discounted_kl_weight = *discounted_kl;
        if (high_precision_latents) c.high_precision_latents = true;
        if (learned_variance) {
            c.learned_variance = true;
            c.encoder.learned_variance = true;
        }
        if (mse_reconstruction) c.mse_reconstruction = true;
        if (normal_prior) c.normal_prior = true;
        c.validate();
    }
};

struct SampleArgs {
    std::string run_dir;
    int64_t n = 16;
    int steps = 32;
    uint64_t seed = 0;
    bool deterministic = false;
    double churn = 1.0;
    std::string out;
    bool overwrite = false;

    void attach(CLI::App* c, const char* default_out, const char* n_help) {
        out = default_out;
        c->add_option("--run-dir", run_dir, "run directory holding the checkpoint")->required();
        c->add_option("--n", n, n_help);
        c->add_option("--steps", steps, "sampler steps per chain");
        c->add_option("--seed", seed, "sampler seed");
        c->add_flag("--deterministic", deterministic, "probability-flow chain instead of ancestral");
        c->add_option("--churn", churn, "ancestral transition-noise scale");
        c->add_option("--out", out, "output subdirectory inside the run directory");
        c->add_flag("--overwrite", overwrite, "replace existing outputs");
    }

    SamplerConfig sampler() const {
        SamplerConfig sc;
        sc.steps = steps;
        sc.kind = deterministic ? SamplerConfig::Kind::Deterministic : SamplerConfig::Kind::Ancestral;
        sc.churn = churn;
        sc.seed = seed;
        sc.validate();
        return sc;
    }

    // Claims run_dir/out; returns empty string when it already exists and
    // --overwrite was not given.
    std::string claim_output_dir() const {
        const fs::path dir = fs::path(run_dir) / out;
        if (fs::exists(dir)) {
            if (!overwrite) {
                std::printf("'%s' already exists; --overwrite redoes it\n", dir.string().c_str());
                return "";
            }
            fs::remove_all(dir);
        }
        fs::create_directories(dir);
        return dir.string();
    }
};

nlohmann::json sampler_json(const SamplerConfig& sc) {
    return {{"steps", sc.steps},
            {"kind", sc.kind == SamplerConfig::Kind::Ancestral ? "ancestral" : "deterministic"},
            {"churn", sc.churn},
            {"seed", sc.seed}};
}

void write_manifest(const std::string& dir, const nlohmann::json& j) {
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << j.dump(2) << "\n";
    if (!out) {
        throw std::runtime_error("failed writing manifest in '" + dir + "'");
    }
}

// ---- subcommand bodies ----

int run_train(const TrainArgs& a, Stage stage) {
    ConfigMap m = load_config_or_die(a.config_path);
    TrainConfig cfg = read_train_config(m, a.config_path, stage);
    const DatasetSpec dspec = dataset_spec_from(m);
    reject_unknown_keys(m, a.config_path);
    a.apply(cfg);
    if (!prepare_run_dir(a.run_dir, a.overwrite)) {
        return 0;
    }
    const Dataset data = dataset_from_config(m, a.config_path);
    const RunRecord rec = train_stage1(cfg, data, a.run_dir);
    return finish_training(rec, a.run_dir, dspec);
}

int run_train_base(const TrainArgs& a, const std::string& from_dir) {
    const std::string ckpt = latest_checkpoint(from_dir);
    const ModelBundle stage1 = load_bundle(ckpt);

    ConfigMap m = load_config_or_die(a.config_path);
    TrainConfig cfg = read_train_config(m, a.config_path, Stage::Two);
    // The base denoises whatever latents the first stage produced, so its
    // config inherits the frozen geometry from the checkpoint; only the base
    // net and the training hyperparameters are this config's business.
    cfg.encoder = stage1.enc_cfg;
    cfg.prior = stage1.prior_cfg;
    cfg.decoder = stage1.dec_cfg;
    cfg.validate();

    // The dataset may be restated; by default it comes from the source run.
    DatasetSpec dspec;
    if (m.has("data.family")) {
        dspec = dataset_spec_from(m);
        reject_unknown_keys(m, a.config_path);
    } else {
        reject_unknown_keys(m, a.config_path);
        dspec = dataset_spec_from(run_dir_config(from_dir));
    }
    a.apply(cfg);
    if (!prepare_run_dir(a.run_dir, a.overwrite)) {
        return 0;
    }
    std::printf("base training from %s (checkpoint %s)\n", ckpt.c_str(),
                checkpoint_id(stage1).c_str());
    const Dataset data = generate(dspec);
    const RunRecord rec = train_stage2(stage1, cfg, data, a.run_dir);
    return finish_training(rec, a.run_dir, dspec);
}

int run_sample(const SampleArgs& a) {
    const ModelBundle bundle = load_bundle(latest_checkpoint(a.run_dir));
    const SamplerConfig sc = a.sampler();
    const std::string out_dir = a.claim_output_dir();
    if (out_dir.empty()) {
        return 0;
    }

    const std::vector<Tensor> samples = generate(bundle, bundle, a.n, sc);
    nlohmann::json manifest;
    manifest["checkpoint"] = checkpoint_id(bundle);
    manifest["latent_model"] = bundle.base.empty() ? "prior" : "base";
    manifest["sampler"] = sampler_json(sc);
    manifest["n"] = a.n;
    std::vector<std::string> files;
    for (size_t k = 0; k < samples.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%04zu.pnm", k);
        write_pnm((fs::path(out_dir) / name).string(), samples[k]);
        files.emplace_back(name);
    }
    manifest["files"] = files;
    write_manifest(out_dir, manifest);
    std::printf("%zu samples in %s (checkpoint %s)\n", samples.size(), out_dir.c_str(),
                checkpoint_id(bundle).c_str());
    return 0;
}

int run_reconstruct(const SampleArgs& a) {
    const ModelBundle bundle = load_bundle(latest_checkpoint(a.run_dir));
    const Dataset data = dataset_from_config(run_dir_config(a.run_dir), a.run_dir);
    const SamplerConfig base_sc = a.sampler();
    const std::string out_dir = a.claim_output_dir();
    if (out_dir.empty()) {
        return 0;
    }

    const int64_t n = std::min<int64_t>(a.n, data.size());
    if (n == 0) {
        throw std::runtime_error("dataset in '" + a.run_dir + "' is empty");
    }
    nlohmann::json manifest;
    manifest["checkpoint"] = checkpoint_id(bundle);
    manifest["sampler"] = sampler_json(base_sc);
    nlohmann::json per_image = nlohmann::json::array();
    double acc = 0.0;
    for (int64_t k = 0; k < n; ++k) {
        SamplerConfig sc = base_sc;
        sc.seed = derive_seed(base_sc.seed, "eval.recon", static_cast<uint64_t>(k));
        const Tensor x = data.sample(k);
        const Tensor r = reconstruct(bundle, x, sc);
        const double p = psnr(x, r);
        acc += p;
        char orig[32], recon[32];
        std::snprintf(orig, sizeof orig, "orig_%04" PRId64 ".pnm", k);
        std::snprintf(recon, sizeof recon, "recon_%04" PRId64 ".pnm", k);
        write_pnm((fs::path(out_dir) / orig).string(), x);
        write_pnm((fs::path(out_dir) / recon).string(), r);
        per_image.push_back({{"index", k}, {"orig", orig}, {"recon", recon}, {"psnr", p}});
    }
    const double mean = acc / static_cast<double>(n);
    manifest["images"] = per_image;
    manifest["mean_psnr"] = mean;
    write_manifest(out_dir, manifest);
    std::printf("reconstructed %" PRId64 " images, mean psnr=%s dB, outputs in %s\n", n,
                g(mean).c_str(), out_dir.c_str());
    return 0;
}

int run_eval(const std::string& run_dir, const std::string& ckpt_path, int64_t n_mc,
             int64_t recon_n, int64_t rfid_n, int steps, uint64_t seed, bool overwrite) {
    const std::string out_path = (fs::path(run_dir) / "eval.csv").string();
    if (fs::exists(out_path) && !overwrite) {
        std::printf("'%s' already exists; --overwrite redoes it\n", out_path.c_str());
        return 0;
    }
    const ModelBundle bundle =
        load_bundle(ckpt_path.empty() ? latest_checkpoint(run_dir) : ckpt_path);
    const Dataset data = dataset_from_config(run_dir_config(run_dir), run_dir);
    const std::string id = checkpoint_id(bundle);

    std::string csv = metric_csv_header();
    const WhichModel which = bundle.base.empty() ? WhichModel::Prior : WhichModel::Base;
    const BitrateReport b =
        estimate_bitrate(bundle, data, n_mc, which, derive_seed(seed, "eval.bitrate"));
    csv += metric_csv_line({"nats_total", b.nats_total, b.std_error, b.n_mc, seed, id});
    csv += metric_csv_line({"bits_per_dim", b.bits_per_dim, 0.0, b.n_mc, seed, id});
    csv += metric_csv_line({"bits_per_pixel", b.bits_per_pixel, 0.0, b.n_mc, seed, id});

    const int64_t n_rec = std::min<int64_t>(recon_n, data.size());
    if (n_rec >= 1) {
        SamplerConfig sc;
        sc.steps = steps;
        std::vector<double> vals;
        for (int64_t j = 0; j < n_rec; ++j) {
            sc.seed = derive_seed(seed, "eval.recon", static_cast<uint64_t>(j));
            const Tensor x = data.sample(j);
            vals.push_back(psnr(x, reconstruct(bundle, x, sc)));
        }
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(n_rec);
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        const double se =
            n_rec > 1 ? std::sqrt(var / static_cast<double>(n_rec - 1) / static_cast<double>(n_rec))
                      : 0.0;
        csv += metric_csv_line({"psnr", mean, se, n_rec, seed, id});
    }
    const int64_t n_fid = std::min<int64_t>(rfid_n, data.size());
    if (n_fid >= 2) {
        SamplerConfig sc;
        sc.steps = steps;
        sc.seed = derive_seed(seed, "eval.rfid");
        csv += metric_csv_line({"rfid", rfid(bundle, data, n_fid, sc), 0.0, n_fid, seed, id});
    }

    std::ofstream out(out_path, std::ios::trunc);
    out << csv;
    if (!out) {
        throw std::runtime_error("failed writing '" + out_path + "'");
    }
    std::fputs(csv.c_str(), stdout);
    return 0;
}

int run_sweep(const TrainArgs& a, const std::vector<double>& loss_factors,
              const std::vector<double>& biases) {
    ConfigMap m = load_config_or_die(a.config_path);
    const bool stated = m.has("train.stage");
    TrainConfig base = train_config_from(m);
    if (!stated) {
        base.stage = Stage::One;
    } else if (base.stage == Stage::Two) {
        throw std::invalid_argument(a.config_path +
                                    ": sweeps train from scratch; train.stage must be 1 or single");
    }
    const DatasetSpec dspec = dataset_spec_from(m);
    reject_unknown_keys(m, a.config_path);
    a.apply(base);

    const fs::path marker = fs::path(a.run_dir) / "sweep.csv";
    if (fs::exists(marker) && !a.overwrite) {
        std::printf("'%s' already exists; --overwrite redoes it\n", marker.string().c_str());
        return 0;
    }
    if (fs::exists(a.run_dir) && a.overwrite) {
        fs::remove_all(a.run_dir);
    }

    std::vector<TrainConfig> grid;
    const std::vector<double> bias_axis = biases.empty() ? std::vector<double>{base.weighting.bias}
                                                         : biases;
    for (double lf : loss_factors) {
        for (double bias : bias_axis) {
            TrainConfig c = base;
            c.weighting.loss_factor = lf;
            c.weighting.bias = bias;
            grid.push_back(c);
        }
    }
    const Dataset data = dataset_from_config(m, a.config_path);
    const std::vector<SweepRow> rows = sweep(grid, data, a.run_dir);
    for (size_t i = 0; i < grid.size(); ++i) {
        const fs::path row_cfg = fs::path(a.run_dir) / ("row_" + std::to_string(i)) / "config.cfg";
        if (fs::exists(row_cfg)) {
            store_dataset_spec(row_cfg.parent_path().string(), dspec);
        }
    }
    std::fputs(sweep_csv(rows).c_str(), stdout);
    std::printf("sweep table in %s\n", marker.string().c_str());
    for (const SweepRow& r : rows) {
        if (!r.ok) {
            return 1;  // partial failure: table stands, exit reflects it
        }
    }
    return 0;
}

int run_flops(const std::string& config_path) {
    ConfigMap m = load_config_or_die(config_path);
    const TrainConfig cfg = train_config_from(m);
    (void)dataset_spec_from(m);  // a training config's data block is fine here
    reject_unknown_keys(m, config_path);

    const EncoderConfig enc = [&] {
        EncoderConfig e = cfg.encoder;
        e.latent = cfg.effective_latent();
        return e;
    }();
    struct Line {
        const char* name;
        NetDescription desc;
    };
    const std::vector<Line> nets = {
        {"encoder", describe_encoder(enc)},
        {"prior", describe_token_denoiser(cfg.prior, enc.latent)},
        {"decoder", describe_decoder(cfg.decoder, enc)},
        {"base", describe_token_denoiser(cfg.base, enc.latent)},
    };
    std::printf("%-8s %12s %16s %16s\n", "net", "params", "inference_flops", "training_flops");
    int64_t inf_total = 0, train_total = 0;
    for (const Line& l : nets) {
        const int64_t fi = flop_count(l.desc, FlopMode::Inference);
        const int64_t ft = flop_count(l.desc, FlopMode::Training);
        inf_total += fi;
        train_total += ft;
        std::printf("%-8s %12" PRId64 " %16" PRId64 " %16" PRId64 "\n", l.name, l.desc.param_count,
                    fi, ft);
    }
    std::printf("%-8s %12s %16" PRId64 " %16" PRId64 "\n", "total", "", inf_total, train_total);
    std::printf("training counts three forward-equivalent passes per step\n");
    return 0;
}

int run_export_data(const std::string& config_path, const std::string& out_dir, int64_t n,
                    bool overwrite) {
    ConfigMap m = load_config_or_die(config_path);
    const Dataset data = dataset_from_config(m, config_path);
    if (fs::exists(out_dir)) {
        if (!overwrite) {
            std::printf("'%s' already exists; --overwrite redoes it\n", out_dir.c_str());
            return 0;
        }
        fs::remove_all(out_dir);
    }
    fs::create_directories(out_dir);
    const int64_t count = std::min<int64_t>(n, data.size());
    for (int64_t k = 0; k < count; ++k) {
        char name[32];
        std::snprintf(name, sizeof name, "img_%06" PRId64 ".pnm", k);
        write_pnm((fs::path(out_dir) / name).string(), data.sample(k));
    }
    std::printf("wrote %" PRId64 " images to %s\n", count, out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified-latents workbench: train, sample, evaluate"};
    app.require_subcommand(1);

    TrainArgs ae, single, base2, sweep_args;
    std::string from_dir;
    double shift = 0.0;
    ae.attach(app.add_subcommand("train-ae", "stage 1: encoder, latent prior and decoder"), true);
    {
        CLI::App* c = app.add_subcommand("train-base",
                                         "stage 2: base model on frozen stage-1 latents");
        base2.attach(c, false);
        c->add_option("--from", from_dir, "stage-1 run directory to build on")->required();
    }
    {
        CLI::App* c = app.add_subcommand("train-single",
                                         "one-loop training with a concurrent base model");
        single.attach(c, true);
        c->add_option("--shift", shift, "decoder weighting bias shift (overrides single.shift)");
    }

    SampleArgs sample_args, recon_args;
    sample_args.attach(app.add_subcommand("sample", "draw fresh images from a trained run"),
                       "samples", "number of samples");
    recon_args.attach(app.add_subcommand("reconstruct", "round-trip dataset images through the model"),
                      "recon", "number of dataset images");

    std::string eval_run_dir, eval_ckpt;
    int64_t eval_n_mc = 4096, eval_recon_n = 16, eval_rfid_n = 64;
    int eval_steps = 32;
    uint64_t eval_seed = 0;
    bool eval_overwrite = false;
    {
        CLI::App* c = app.add_subcommand("eval", "bitrate, psnr and rfid rows for a run");
        c->add_option("--run-dir", eval_run_dir, "run directory to evaluate")->required();
        c->add_option("--checkpoint", eval_ckpt, "evaluate this checkpoint instead of the latest");
        c->add_option("--n-mc", eval_n_mc, "Monte-Carlo draws for the bitrate bound");
        c->add_option("--recon-n", eval_recon_n, "images for the psnr row (0 disables)");
        c->add_option("--rfid-n", eval_rfid_n, "images for the rfid row (<2 disables)");
        c->add_option("--steps", eval_steps, "sampler steps for reconstruction metrics");
        c->add_option("--seed", eval_seed, "evaluation seed");
        c->add_flag("--overwrite", eval_overwrite, "replace an existing eval.csv");
    }

    std::vector<double> sweep_lf, sweep_bias;
    {
        CLI::App* c = app.add_subcommand("sweep", "train a grid over the decoder weighting");
        sweep_args.attach(c, true);
        c->add_option("--loss-factors", sweep_lf, "loss-factor axis values")
            ->required()
            ->delimiter(',');
        c->add_option("--biases", sweep_bias, "bias axis values (default: the config's bias)")
            ->delimiter(',');
    }

    std::string flops_config;
    app.add_subcommand("flops", "parameter and FLOP accounting for a config")
        ->add_option("--config", flops_config, "flat key=value config file")
        ->required();

    std::string export_config, export_out;
    int64_t export_n = 64;
    bool export_overwrite = false;
    {
        CLI::App* c = app.add_subcommand("export-data", "write a dataset's images to files");
        c->add_option("--config", export_config, "config file with a data block")->required();
        c->add_option("--out", export_out, "output directory")->required();
        c->add_option("--n", export_n, "number of images");
        c->add_flag("--overwrite", export_overwrite, "replace the output directory");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        if (ae.cmd->parsed()) {
            return run_train(ae, Stage::One);
        }
        if (base2.cmd->parsed()) {
            return run_train_base(base2, from_dir);
        }
        if (single.cmd->parsed()) {
            ConfigMap m = load_config_or_die(single.config_path);
            TrainConfig cfg = read_train_config(m, single.config_path, Stage::Single);
            const DatasetSpec dspec = dataset_spec_from(m);
            reject_unknown_keys(m, single.config_path);
            single.apply(cfg);
            if (single.cmd->count("--shift")) {
                cfg.single_stage_shift = shift;
                cfg.validate();
            }
            if (!prepare_run_dir(single.run_dir, single.overwrite)) {
                return 0;
            }
            const Dataset data = dataset_from_config(m, single.config_path);
            const RunRecord rec = train_single_stage(cfg, data, single.run_dir);
            return finish_training(rec, single.run_dir, dspec);
        }
        if (app.get_subcommand("sample")->parsed()) {
            return run_sample(sample_args);
        }
        if (app.get_subcommand("reconstruct")->parsed()) {
            return run_reconstruct(recon_args);
        }
        if (app.get_subcommand("eval")->parsed()) {
            return run_eval(eval_run_dir, eval_ckpt, eval_n_mc, eval_recon_n, eval_rfid_n,
                            eval_steps, eval_seed, eval_overwrite);
        }
        if (sweep_args.cmd->parsed()) {
            return run_sweep(sweep_args, sweep_lf, sweep_bias);
        }
        if (app.get_subcommand("flops")->parsed()) {
            return run_flops(flops_config);
        }
        if (app.get_subcommand("export-data")->parsed()) {
            return run_export_data(export_config, export_out, export_n, export_overwrite);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
