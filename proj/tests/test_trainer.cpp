#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "ul/checkpoint.hpp"
#include "ul/datagen.hpp"
#include "ul/rng.hpp"
#include "ul/trainer.hpp"

using namespace ul;

namespace {

Dataset blob_data(int64_t size, uint64_t seed) {
    DatasetSpec s;
    s.family = DatasetSpec::Family::Blobs;
    s.resolution = 8;
    s.channels = 1;
    s.size = size;
    s.seed = seed;
    return generate(s);
}

// Desk-sized setup: 8x8 grayscale images, a 2x2x2 latent grid, and networks
// small enough that a few hundred steps run in seconds.
TrainConfig tiny_cfg(Stage stage, int64_t steps, uint64_t seed) {
    TrainConfig c;
    c.stage = stage;
    c.steps = steps;
    c.batch_size = 4;
    c.seed = seed;
    c.encoder.image_h = 8;
    c.encoder.image_w = 8;
    c.encoder.image_c = 1;
    c.encoder.latent = LatentSpec{2, 2, 2, 5.0};
    c.encoder.widths = {6, 8};
    c.encoder.blocks = 1;
    c.encoder.patch = 2;
    c.prior.widths = {8};
    c.prior.blocks = 1;
    c.decoder.widths = {4, 6};
    c.decoder.blocks = 1;
    c.base.widths = {8};
    c.base.blocks = 1;
    c.optim.warmup_steps = 10;
    c.eval.n_mc = 16;
    c.eval.recon_n = 0;
    c.eval.sampler_steps = 4;
    return c;
}

double window_mean(const std::vector<StepLog>& trace, size_t begin, size_t count) {
    double acc = 0.0;
    for (size_t i = begin; i < begin + count; ++i) {
        acc += trace[i].loss.total;
    }
    return acc / static_cast<double>(count);
}

std::string fresh_dir(const std::string& name) {
    const std::string dir = (std::filesystem::temp_directory_path() / name).string();
    std::filesystem::remove_all(dir);
    return dir;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        out.push_back(line);
    }
    return out;
}

}  // namespace

TEST_CASE("config validation rejects inconsistent setups") {
    CHECK_NOTHROW(tiny_cfg(Stage::One, 10, 0).validate());

    TrainConfig c = tiny_cfg(Stage::One, 10, 0);
    c.steps = -1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_cfg(Stage::One, 10, 0);
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_cfg(Stage::One, 10, 0);
    c.stop_gradient_prior = true;
    c.normal_prior = true;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_cfg(Stage::One, 10, 0);
    c.mse_reconstruction = true;
    c.learned_variance = true;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    // An MSE decoder cannot serve sampler-based reconstruction eval.
    c = tiny_cfg(Stage::One, 10, 0);
    c.mse_reconstruction = true;
    c.eval.recon_n = 2;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.eval.recon_n = 0;
    CHECK_NOTHROW(c.validate());

    c = tiny_cfg(Stage::Two, 10, 0);
    c.learned_variance = true;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_cfg(Stage::One, 10, 0);
    c.single_stage_shift = 0.5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.stage = Stage::Single;
    CHECK_NOTHROW(c.validate());

    c = tiny_cfg(Stage::One, 10, 0);
    c.optim.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_cfg(Stage::One, 10, 0);
    c.optim.ema_decay = 1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_cfg(Stage::One, 10, 0);
    c.eval.n_mc = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_cfg(Stage::One, 10, 0);
    c.prior.role = DenoiserRole::Base;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_cfg(Stage::One, 10, 0);
    c.prior_lambda_min = 6.0;  // above the encoding log-SNR
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("learning rate warms up linearly into a constant") {
    OptimConfig o;
    o.lr = 1e-2;
    o.warmup_steps = 4;
    CHECK(lr_at(o, 0) == doctest::Approx(2.5e-3).epsilon(1e-12));
    CHECK(lr_at(o, 1) == doctest::Approx(5.0e-3).epsilon(1e-12));
    CHECK(lr_at(o, 3) == doctest::Approx(1e-2).epsilon(1e-12));
    CHECK(lr_at(o, 4) == 1e-2);
    CHECK(lr_at(o, 1000) == 1e-2);
    o.warmup_steps = 0;
    CHECK(lr_at(o, 0) == 1e-2);
    CHECK_THROWS_AS(lr_at(o, -1), std::invalid_argument);
}

TEST_CASE("flat-config round trip preserves every field") {
    TrainConfig c = tiny_cfg(Stage::Single, 123, 987654321987ull);
    c.batch_size = 6;
    c.single_stage_shift = 0.25;
    c.stop_gradient_prior = true;
    c.discounted_kl_weight = 2e-5;
    c.high_precision_latents = true;
    c.learned_variance = true;
    c.encoder.learned_variance = true;
    c.weighting.bias = -0.5;
    c.weighting.loss_factor = 1.9;
    c.optim.lr = 7e-4;
    c.optim.ema_decay = 0.95;
    c.prior.dropout_rate = 0.0;
    c.checkpoint_every = 40;
    c.eval.every = 60;
    c.eval.n_mc = 33;
    c.validate();

    ConfigMap m;
    train_config_to(c, m);
    const TrainConfig back = train_config_from(m);
    CHECK(back == c);
    CHECK(m.unread_keys().empty());  // the reader consumes exactly what the writer emits

    // A second serialization is byte-identical.
    ConfigMap m2;
    train_config_to(back, m2);
    CHECK(m2.serialize() == m.serialize());

    // Absent keys mean defaults.
    CHECK(train_config_from(ConfigMap{}) == TrainConfig{});

    ConfigMap bad;
    bad.set("train.stage", "3");
    CHECK_THROWS_AS(train_config_from(bad), std::invalid_argument);
    ConfigMap bad_seed;
    bad_seed.set("train.seed", "-4");
    CHECK_THROWS_AS(train_config_from(bad_seed), std::invalid_argument);
}

TEST_CASE("per-step randomness comes from isolated reproducible streams") {
    TrainConfig c = tiny_cfg(Stage::One, 10, 42);
    const int64_t n = 3;
    const StepRandomness a = draw_stage1_randomness(c, 7, n);
    const StepRandomness b = draw_stage1_randomness(c, 7, n);
    CHECK(a.t_prior == b.t_prior);
    CHECK(a.eps_prior.data == b.eps_prior.data);
    CHECK(a.eps_latent.data == b.eps_latent.data);
    CHECK(a.t_dec == b.t_dec);
    CHECK(a.eps_dec.data == b.eps_dec.data);

    // Each draw is recoverable from its own named stream alone, so no draw
    // consumes another's randomness.
    CHECK(a.t_prior == Rng(stream_seed(42, "prior.t", 7)).uniform());
    CHECK(a.t_dec == Rng(stream_seed(42, "dec.t", 7)).uniform());
    {
        Rng r(stream_seed(42, "prior.eps", 7));
        CHECK(a.eps_prior.data == r.normal_tensor({3, 2, 2, 2}).data);
    }
    {
        Rng r(stream_seed(42, "latent.eps", 7));
        CHECK(a.eps_latent.data == r.normal_tensor({3, 2, 2, 2}).data);
    }
    {
        Rng r(stream_seed(42, "dec.eps", 7));
        CHECK(a.eps_dec.data == r.normal_tensor({3, 8, 8, 1}).data);
    }

    // Distinct streams and distinct steps give distinct draws.
    CHECK(a.t_prior != a.t_dec);
    CHECK(a.eps_prior.data[0] != a.eps_latent.data[0]);
    const StepRandomness next = draw_stage1_randomness(c, 8, n);
    CHECK(a.t_prior != next.t_prior);
    CHECK(a.eps_prior.data[0] != next.eps_prior.data[0]);

    // The posterior noise stream only exists for a learned encoder variance.
    CHECK(a.eps_enc.data.empty());
    c.learned_variance = true;
    const StepRandomness lv = draw_stage1_randomness(c, 7, n);
    CHECK(lv.eps_enc.shape == std::vector<int>{3, 2, 2, 2});
    CHECK(lv.eps_prior.data == a.eps_prior.data);  // other streams untouched

    const BaseStepDraw bd = draw_base_randomness(c, 7, n);
    CHECK(bd.t == Rng(stream_seed(42, "base.t", 7)).uniform());
    CHECK(bd.t != a.t_prior);
    CHECK(bd.eps.shape == std::vector<int>{3, 2, 2, 2});
}

TEST_CASE("zero-step run emits only the initialization checkpoint") {
    const Dataset data = blob_data(16, 5);
    const TrainConfig c = tiny_cfg(Stage::One, 0, 11);
    const std::string dir = fresh_dir("ul_trainer_zero");
    const RunRecord rec = train_stage1(c, data, dir);

    CHECK(rec.trace.empty());
    CHECK(!rec.diverged);
    CHECK(rec.bundle.steps_trained == 0);
    REQUIRE(rec.checkpoint_paths.size() == 1);
    CHECK(!rec.final_bitrate.trained);
    CHECK(std::isfinite(rec.final_bitrate.nats_total));

    // The checkpoint reloads to the bit-identical bundle.
    const ModelBundle loaded = load_bundle(rec.checkpoint_paths[0]);
    CHECK(bundle_checksum(loaded) == bundle_checksum(rec.bundle));
    std::filesystem::remove_all(dir);
}

TEST_CASE("stage-1 smoke run descends") {
    const Dataset data = blob_data(64, 9);
    TrainConfig c = tiny_cfg(Stage::One, 400, 3);
    const RunRecord rec = train_stage1(c, data);

    REQUIRE(rec.trace.size() == 400);
    CHECK(!rec.diverged);
    CHECK(rec.bundle.steps_trained == 400);
    for (const StepLog& s : rec.trace) {
        CHECK(std::isfinite(s.loss.total));
    }
    const double head = window_mean(rec.trace, 0, 50);
    const double tail = window_mean(rec.trace, 350, 50);
    CHECK(tail < head);
    CHECK(rec.trace.back().loss.total < rec.trace.front().loss.total);

    CHECK(rec.final_bitrate.trained);
    CHECK(std::isfinite(rec.final_bitrate.bits_per_dim));
    CHECK(rec.trace[0].lr == lr_at(c.optim, 0));
    CHECK(rec.trace[399].lr == c.optim.lr);
}

TEST_CASE("identical config and seed reproduce the run bitwise") {
    const Dataset data = blob_data(32, 2);
    const TrainConfig c = tiny_cfg(Stage::One, 25, 17);
    const RunRecord a = train_stage1(c, data);
    const RunRecord b = train_stage1(c, data);

    REQUIRE(a.trace.size() == b.trace.size());
    for (size_t i = 0; i < a.trace.size(); ++i) {
        CHECK(a.trace[i].loss.total == b.trace[i].loss.total);
        CHECK(a.trace[i].loss.prior_mse_term == b.trace[i].loss.prior_mse_term);
        CHECK(a.trace[i].loss.endpoint_kl == b.trace[i].loss.endpoint_kl);
        CHECK(a.trace[i].loss.decoder_term == b.trace[i].loss.decoder_term);
        CHECK(a.trace[i].loss.per_sample == b.trace[i].loss.per_sample);
    }
    CHECK(bundle_checksum(a.bundle) == bundle_checksum(b.bundle));
    CHECK(a.final_bitrate.nats_total == b.final_bitrate.nats_total);

    // A different seed changes the trace.
    TrainConfig c2 = c;
    c2.seed = 18;
    const RunRecord d = train_stage1(c2, data);
    CHECK(d.trace[0].loss.total != a.trace[0].loss.total);
}

TEST_CASE("divergence aborts the run with the offending step recorded") {
    const Dataset data = blob_data(16, 5);
    TrainConfig c = tiny_cfg(Stage::One, 10, 1);
    // A discounted-KL weight at the double-overflow edge makes the very first
    // loss non-finite without touching any parameter.
    c.stop_gradient_prior = true;
    c.discounted_kl_weight = 1e307;
    const std::string dir = fresh_dir("ul_trainer_diverge");
    const RunRecord rec = train_stage1(c, data, dir);

    CHECK(rec.diverged);
    CHECK(rec.divergence_step == 0);
    CHECK(rec.trace.empty());
    CHECK(rec.checkpoint_paths.empty());
    CHECK(!rec.final_bitrate.trained);

    bool noted = false;
    for (const std::string& line : read_lines(dir + "/log.jsonl")) {
        if (line.find("diverged") != std::string::npos) {
            noted = true;
        }
    }
    CHECK(noted);
    std::filesystem::remove_all(dir);
}

TEST_CASE("stage-2 trains the base model against frozen networks") {
    const Dataset data = blob_data(64, 9);
    const TrainConfig c1 = tiny_cfg(Stage::One, 40, 3);
    const RunRecord s1 = train_stage1(c1, data);

    TrainConfig c2 = tiny_cfg(Stage::Two, 150, 77);
    c2.batch_size = 12;  // the base may train with a larger batch
    const RunRecord s2 = train_stage2(s1.bundle, c2, data);

    // Frozen contract, verified from outside the trainer as well.
    CHECK(param_checksum(s2.bundle.enc) == param_checksum(s1.bundle.enc));
    CHECK(param_checksum(s2.bundle.dec) == param_checksum(s1.bundle.dec));
    CHECK(param_checksum(s2.bundle.prior) == param_checksum(s1.bundle.prior));
    CHECK(param_checksum(s2.bundle.enc_ema) == param_checksum(s1.bundle.enc_ema));
    CHECK(param_checksum(s2.bundle.dec_ema) == param_checksum(s1.bundle.dec_ema));

    REQUIRE(s2.bundle.base_cfg.has_value());
    CHECK(!s2.bundle.base.empty());
    CHECK(s2.bundle.steps_trained == 40 + 150);
    REQUIRE(s2.trace.size() == 150);

    // Weighted denoising loss decreases from the zero-prediction start.
    const double head = window_mean(s2.trace, 0, 10);
    const double tail = window_mean(s2.trace, 140, 10);
    CHECK(tail < head);

    // The final report measures the freshly trained base model.
    CHECK(s2.final_bitrate.trained);
    const BitrateReport direct = estimate_bitrate(s2.bundle, data, c2.eval.n_mc, WhichModel::Base,
                                                  derive_seed(c2.seed, "eval.bitrate"));
    CHECK(s2.final_bitrate.nats_total == direct.nats_total);

    // Reproducible end to end.
    const RunRecord again = train_stage2(s1.bundle, c2, data);
    CHECK(bundle_checksum(again.bundle) == bundle_checksum(s2.bundle));
}

TEST_CASE("stage-2 rejects mismatched encoding log-SNR and untrained inputs") {
    const Dataset data = blob_data(16, 5);
    const TrainConfig c1 = tiny_cfg(Stage::One, 4, 3);
    const RunRecord s1 = train_stage1(c1, data);

    TrainConfig c2 = tiny_cfg(Stage::Two, 4, 7);
    CHECK_NOTHROW(train_stage2(s1.bundle, c2, data));

    TrainConfig off = c2;
    off.encoder.latent.lambda_z0 = 4.0;
    CHECK_THROWS_AS(train_stage2(s1.bundle, off, data), std::invalid_argument);

    TrainConfig high = c2;
    high.high_precision_latents = true;  // asks for 10 against a 5 checkpoint
    CHECK_THROWS_AS(train_stage2(s1.bundle, high, data), std::invalid_argument);

    CHECK_THROWS_AS(train_stage2(c1.initial_bundle(), c2, data), std::invalid_argument);

    TrainConfig one = c2;
    one.stage = Stage::One;
    CHECK_THROWS_AS(train_stage2(s1.bundle, one, data), std::invalid_argument);
}

TEST_CASE("single-stage with zero shift reproduces stage-1 training exactly") {
    const Dataset data = blob_data(32, 2);
    const TrainConfig ca = tiny_cfg(Stage::One, 25, 5);
    TrainConfig cs = tiny_cfg(Stage::Single, 25, 5);
    cs.single_stage_shift = 0.0;

    const RunRecord ra = train_stage1(ca, data);
    const RunRecord rs = train_single_stage(cs, data);

    REQUIRE(rs.trace.size() == ra.trace.size());
    for (size_t i = 0; i < ra.trace.size(); ++i) {
        CHECK(rs.trace[i].loss.total == ra.trace[i].loss.total);
        CHECK(rs.trace[i].loss.decoder_term == ra.trace[i].loss.decoder_term);
        CHECK(rs.trace[i].loss.prior_mse_term == ra.trace[i].loss.prior_mse_term);
        CHECK(std::isfinite(rs.trace[i].base_term));
        CHECK(rs.trace[i].base_term > 0.0);
        CHECK(ra.trace[i].base_term == 0.0);
    }
    CHECK(param_checksum(rs.bundle.enc) == param_checksum(ra.bundle.enc));
    CHECK(param_checksum(rs.bundle.prior) == param_checksum(ra.bundle.prior));
    CHECK(param_checksum(rs.bundle.dec) == param_checksum(ra.bundle.dec));
    CHECK(!rs.bundle.base.empty());
    CHECK(ra.bundle.base.empty());

    // The concurrent base actually learns.
    CHECK(rs.trace.back().base_term < rs.trace.front().base_term);
}

TEST_CASE("nonzero shift moves the decoder weighting") {
    const Dataset data = blob_data(32, 2);
    TrainConfig cs = tiny_cfg(Stage::Single, 3, 5);
    cs.single_stage_shift = 0.8;
    const RunRecord shifted = train_single_stage(cs, data);
    const RunRecord plain = train_stage1(tiny_cfg(Stage::One, 3, 5), data);

    CHECK(shifted.bundle.weighting.bias ==
          doctest::Approx(plain.bundle.weighting.bias - 0.8).epsilon(1e-15));
    CHECK(shifted.trace[0].loss.decoder_term != plain.trace[0].loss.decoder_term);
    // The prior side of the objective is untouched by the shift.
    CHECK(shifted.trace[0].loss.prior_mse_term == plain.trace[0].loss.prior_mse_term);
    CHECK(shifted.trace[0].loss.endpoint_kl == plain.trace[0].loss.endpoint_kl);
}

TEST_CASE("EMA shadows lag raw parameters and can be disabled") {
    const Dataset data = blob_data(16, 5);
    TrainConfig c = tiny_cfg(Stage::One, 5, 4);
    c.optim.ema_decay = 0.5;
    const RunRecord rec = train_stage1(c, data);
    CHECK(rec.bundle.use_ema_for_eval);
    CHECK(!rec.bundle.enc_ema.empty());
    CHECK(param_checksum(rec.bundle.enc_ema) != param_checksum(rec.bundle.enc));
    CHECK(rec.bundle.enc_ema.all_finite());

    TrainConfig off = c;
    off.optim.ema_decay = 0.0;
    const RunRecord raw = train_stage1(off, data);
    CHECK(!raw.bundle.use_ema_for_eval);
    CHECK(raw.bundle.enc_ema.empty());
}

TEST_CASE("high-precision flag raises the encoding log-SNR and nothing else") {
    TrainConfig c = tiny_cfg(Stage::One, 1, 6);
    TrainConfig hp = c;
    hp.high_precision_latents = true;

    CHECK(c.effective_latent().lambda_z0 == 5.0);
    CHECK(hp.effective_latent().lambda_z0 == 10.0);

    const ModelBundle a = c.initial_bundle();
    const ModelBundle b = hp.initial_bundle();
    CHECK(b.enc_cfg.latent.lambda_z0 == 10.0);
    CHECK(b.prior_schedule.lambda_max == 10.0);
    CHECK(b.prior_schedule.lambda_min == a.prior_schedule.lambda_min);
    CHECK(b.decoder_schedule.lambda_max == a.decoder_schedule.lambda_max);
    CHECK(b.decoder_schedule.lambda_min == a.decoder_schedule.lambda_min);
    CHECK(b.weighting == a.weighting);
    CHECK(b.enc_cfg.latent.h == a.enc_cfg.latent.h);
    CHECK(b.enc_cfg.latent.w == a.enc_cfg.latent.w);
    CHECK(b.enc_cfg.latent.c == a.enc_cfg.latent.c);
    CHECK(b.enc.param_count() == a.enc.param_count());
    CHECK(b.prior.param_count() == a.prior.param_count());
    CHECK(b.dec.param_count() == a.dec.param_count());
}

TEST_CASE("run directory holds config, log, checkpoints and summary") {
    const Dataset data = blob_data(32, 2);
    TrainConfig c = tiny_cfg(Stage::One, 25, 13);
    c.checkpoint_every = 10;
    c.eval.every = 10;
    const std::string dir = fresh_dir("ul_trainer_rundir");
    const RunRecord rec = train_stage1(c, data, dir);

    CHECK(std::filesystem::exists(dir + "/config.cfg"));
    CHECK(std::filesystem::exists(dir + "/summary.csv"));
    REQUIRE(rec.checkpoint_paths.size() == 3);  // steps 10, 20 and the final 25
    CHECK(std::filesystem::exists(dir + "/ckpt_000010.bin"));
    CHECK(std::filesystem::exists(dir + "/ckpt_000020.bin"));
    CHECK(std::filesystem::exists(dir + "/ckpt_000025.bin"));

    // The stored config reproduces the run's config exactly.
    CHECK(train_config_from(load_config_file(dir + "/config.cfg")) == c);

    // 25 step lines plus two periodic eval lines.
    const std::vector<std::string> lines = read_lines(dir + "/log.jsonl");
    REQUIRE(lines.size() == 27);
    const nlohmann::json first = nlohmann::json::parse(lines[0]);
    CHECK(first["step"] == 0);
    CHECK(first["total"] == rec.trace[0].loss.total);
    CHECK(first["lr"] == lr_at(c.optim, 0));
    CHECK(first["seed"] == 13);

    REQUIRE(rec.eval_reports.size() == 2);
    CHECK(rec.eval_reports[0].first == 10);
    CHECK(rec.eval_reports[1].first == 20);
    CHECK(std::isfinite(rec.eval_reports[0].second.nats_total));

    // Mid-run and final checkpoints reload to bit-identical evaluation.
    const ModelBundle loaded = load_bundle(dir + "/ckpt_000025.bin");
    CHECK(bundle_checksum(loaded) == bundle_checksum(rec.bundle));
    const Tensor probe = data.batch({0, 1});
    CHECK(encode(loaded, probe).data == encode(rec.bundle, probe).data);

    const std::vector<std::string> summary = read_lines(dir + "/summary.csv");
    REQUIRE(summary.size() == 4);
    CHECK(summary[0] == "metric,value,std_error,n,seed,checkpoint");
    CHECK(summary[1].find("nats_total") == 0);
    std::filesystem::remove_all(dir);
}

TEST_CASE("sweep trains every row, evaluates and sorts by the axis") {
    const Dataset data = blob_data(32, 2);
    std::vector<TrainConfig> configs;
    for (double lf : {2.0, 1.3, -1.0}) {  // deliberately unsorted, one invalid
        TrainConfig c = tiny_cfg(Stage::One, 10, 21);
        c.eval.recon_n = 2;
        c.eval.n_mc = 8;
        c.weighting.loss_factor = lf;
        configs.push_back(c);
    }
    const std::string dir = fresh_dir("ul_trainer_sweep");
    const std::vector<SweepRow> rows = sweep(configs, data, dir);

    REQUIRE(rows.size() == 3);
    CHECK(rows[0].loss_factor == -1.0);
    CHECK(rows[1].loss_factor == 1.3);
    CHECK(rows[2].loss_factor == 2.0);

    CHECK(!rows[0].ok);  // loss factor must be positive; the row fails, the sweep continues
    CHECK(!rows[0].error.empty());
    for (size_t i = 1; i < 3; ++i) {
        CHECK(rows[i].ok);
        CHECK(rows[i].error.empty());
        CHECK(std::isfinite(rows[i].bitrate.bits_per_pixel));
        CHECK(std::isfinite(rows[i].psnr));
        CHECK(rows[i].rfid >= 0.0);
        CHECK(rows[i].checkpoint.size() == 16);
    }

    const std::string csv = sweep_csv(rows);
    std::istringstream is(csv);
    std::string header;
    std::getline(is, header);
    CHECK(header == "loss_factor,bias,ok,nats_total,bits_per_dim,bits_per_pixel,psnr,rfid,checkpoint,error");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

    CHECK(std::filesystem::exists(dir + "/sweep.csv"));
    CHECK(std::filesystem::exists(dir + "/row_0/config.cfg"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("sweep preconditions and single-element equivalence") {
    const Dataset data = blob_data(32, 2);
    TrainConfig c = tiny_cfg(Stage::One, 6, 31);
    c.eval.n_mc = 8;

    // A single-element sweep is a plain training run.
    const std::vector<SweepRow> rows = sweep({c}, data);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].ok);
    const RunRecord plain = train_stage1(c, data);
    CHECK(rows[0].checkpoint == checkpoint_id(plain.bundle));
    CHECK(rows[0].bitrate.nats_total == plain.final_bitrate.nats_total);

    // Rows may differ only in the sweep axes.
    TrainConfig other = c;
    other.steps = 7;
    CHECK_THROWS_AS(sweep({c, other}, data), std::invalid_argument);

    TrainConfig two = tiny_cfg(Stage::Two, 6, 31);
    CHECK_THROWS_AS(sweep({two}, data), std::invalid_argument);

    CHECK_THROWS_AS(sweep({}, data), std::invalid_argument);
}
