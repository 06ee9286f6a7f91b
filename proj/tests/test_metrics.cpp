#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "ul/metrics.hpp"
#include "ul/objective.hpp"
#include "ul/rng.hpp"

using namespace ul;

namespace {

EncoderConfig small_encoder() {
    EncoderConfig e;
    e.image_h = 8;
    e.image_w = 8;
    e.image_c = 1;
    e.latent = LatentSpec{2, 2, 2, 5.0};
    e.widths = {3, 3};
    e.blocks = 1;
    e.patch = 2;
    return e;
}

DenoiserConfig small_prior() {
    DenoiserConfig d;
    d.role = DenoiserRole::Prior;
    d.widths = {8};
    d.blocks = 1;
    d.dropout_rate = 0.0;
    d.conditioning = Conditioning::None;
    return d;
}

DenoiserConfig small_decoder() {
    DenoiserConfig d;
    d.role = DenoiserRole::Decoder;
    d.widths = {3, 3};
    d.blocks = 1;
    d.dropout_rate = 0.0;
    d.conditioning = Conditioning::Latent;
    return d;
}

ModelBundle trained_stub(uint64_t seed = 42, bool with_base = true) {
    DenoiserConfig base = small_prior();
    base.role = DenoiserRole::Base;
    ModelBundle b = make_bundle(small_encoder(), small_prior(), small_decoder(),
                                with_base ? std::optional<DenoiserConfig>{base}
                                          : std::optional<DenoiserConfig>{},
                                WeightingConfig{}, seed);
    b.steps_trained = 1;
    return b;
}

Dataset blob_data(int64_t size, uint64_t seed) {
    DatasetSpec s;
    s.family = DatasetSpec::Family::Blobs;
    s.resolution = 8;
    s.channels = 1;
    s.size = size;
    s.seed = seed;
    return generate(s);
}

std::vector<std::vector<double>> gaussian_set(int64_t n, double mu, double sd, uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out.push_back({mu + sd * rng.normal()});
    return out;
}

}  // namespace

TEST_CASE("psnr matches the closed form and honors the zero-MSE cap") {
    Tensor a = Tensor::full({2, 2, 1}, 0.5);
    Tensor b = Tensor::full({2, 2, 1}, 0.75);
    CHECK(psnr(a, b, 1.0) == doctest::Approx(12.0412).epsilon(1e-5));
    CHECK(psnr(a, b, 1.0) == psnr(b, a, 1.0));
    CHECK(psnr(a, a, 1.0) == 99.0);

    CHECK_THROWS_AS(psnr(a, Tensor::zeros({2, 2, 3}), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(psnr(a, b, 0.0), std::invalid_argument);
    Tensor bad = a;
    bad.data[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(psnr(a, bad, 1.0), std::invalid_argument);
}

TEST_CASE("frechet distance vanishes exactly when fitted moments agree") {
    std::vector<std::vector<double>> a = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    CHECK(frechet_distance(a, a) <= 1e-8);

    // Different point sets, identical mean and covariance.
    const double r = 1.0 / std::sqrt(2.0);
    std::vector<std::vector<double>> b = {{r, r}, {-r, -r}, {r, -r}, {-r, r}};
    CHECK(frechet_distance(a, b) <= 1e-8);

    std::vector<std::vector<double>> c = {{2, 0}, {-2, 0}, {0, 2}, {0, -2}};
    const double d_ac = frechet_distance(a, c);
    CHECK(d_ac > 1e-3);
    CHECK(d_ac == doctest::Approx(frechet_distance(c, a)).epsilon(1e-9));

    CHECK_THROWS_AS(frechet_distance({{1.0}}, {{0.0}, {1.0}}), std::invalid_argument);
    CHECK_THROWS_AS(frechet_distance(a, {{1.0}, {2.0}}), std::invalid_argument);
}

TEST_CASE("frechet distance recovers the unit-mean-shift oracle") {
    // N(0,1) vs N(1,1): closed-form distance 1. The estimate's noise is
    // dominated by the squared mean gap; sd(mean diff) = sqrt(2/n), so
    // sd(estimate) is about 2 sqrt(2/n).
    const int64_t n = 100000;
    const double d = frechet_distance(gaussian_set(n, 0.0, 1.0, 101),
                                      gaussian_set(n, 1.0, 1.0, 202));
    CHECK(d >= 0.0);
    CHECK(std::abs(d - 1.0) <= 3.0 * 2.0 * std::sqrt(2.0 / static_cast<double>(n)));
}

TEST_CASE("random-projection features are deterministic and discriminating") {
    const FeatureExtractor fx = make_feature_extractor(1, 8, 9);
    Dataset d = blob_data(4, 55);
    std::vector<double> f0 = features(fx, d.sample(0));
    CHECK(f0.size() == 8u);
    CHECK(f0 == features(fx, d.sample(0)));
    CHECK(f0 != features(fx, d.sample(1)));
    CHECK(f0 != features(make_feature_extractor(1, 8, 10), d.sample(0)));

    CHECK_THROWS_AS(features(fx, Tensor::zeros({4, 4, 3})), std::invalid_argument);
    CHECK_THROWS_AS(make_feature_extractor(2, 8, 9), std::invalid_argument);
}

TEST_CASE("bitrate estimate matches the analytic Gaussian oracle") {
    // Scalar toy: the clean latent is exactly 1, the token model is the ideal
    // denoiser for a standard-normal clean distribution (zhat = alpha * z_t),
    // whose marginal stays N(0,1) at every noise level. The measured rate is
    // then the Gaussian KL between N(alpha0, sigma0^2) and N(0,1), plus the
    // tiny endpoint mismatch.
    const NoiseSchedule sched{5.0, -15.0};
    Tensor one = Tensor::full({1, 1, 1}, 1.0);
    Dataset data = Dataset::from_tensors({one});

    const CleanLatentFn enc = [](const Tensor& x) { return x; };
    const DenoiseFn model = [](const Tensor& z_t, double lambda) {
        const AlphaSigma as = alpha_sigma(lambda);
        Tensor out = z_t;
        for (double& v : out.data) v *= as.alpha;
        return out;
    };

    BitrateReport r = estimate_bitrate_core(enc, model, sched, data, 100000, 31, 1, 1, true);
    const AlphaSigma a0 = alpha_sigma(5.0);
    const double s2 = a0.sigma * a0.sigma;
    const double kl = 0.5 * (a0.alpha * a0.alpha + s2 - 1.0 - std::log(s2));
    Tensor z = Tensor::full({1, 1, 1, 1}, 1.0);
    const double expected = kl + endpoint_kl_prior(z, sched).data[0];

    CHECK(r.std_error > 0.0);
    CHECK(r.std_error < 0.05);
    CHECK(std::abs(r.nats_total - expected) <= 3.0 * r.std_error);
    CHECK(r.n_mc == 100000);
    CHECK(r.bits_per_dim == doctest::Approx(r.nats_total / std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("zero-information latents cost only the endpoint KL") {
    ModelBundle b = trained_stub(7);
    for (double& v : b.enc.find("head.w")->data) v = 0.0;
    for (double& v : b.enc.find("head.b")->data) v = 0.0;
    Dataset data = blob_data(4, 77);

    BitrateReport prior_r = estimate_bitrate(b, data, 200, WhichModel::Prior, 5);
    CHECK(prior_r.trained);
    CHECK(prior_r.bits_per_dim <= 1e-6);
    CHECK(prior_r.bits_per_dim >= 0.0);

    BitrateReport base_r = estimate_bitrate(b, data, 200, WhichModel::Base, 5);
    CHECK(base_r.bits_per_dim <= 1e-6);

    ModelBundle fresh = trained_stub(7);
    fresh.steps_trained = 0;
    BitrateReport flagged = estimate_bitrate(fresh, data, 50, WhichModel::Prior, 5);
    CHECK_FALSE(flagged.trained);
    CHECK(std::isfinite(flagged.nats_total));
}

TEST_CASE("bitrate reports keep the pixel/dim ratio identity and reject bad input") {
    ModelBundle b = trained_stub(11);
    Dataset data = blob_data(6, 88);
    BitrateReport r = estimate_bitrate(b, data, 300, WhichModel::Prior, 9);
    CHECK(r.nats_total >= 0.0);
    CHECK(r.std_error >= 0.0);
    // latent dims 8 over 64 image pixels
    CHECK(std::abs(r.bits_per_pixel - r.bits_per_dim * 8.0 / 64.0) <= 1e-12);

    CHECK_THROWS_AS(estimate_bitrate(b, data, 0, WhichModel::Prior, 9), std::invalid_argument);
    CHECK_THROWS_AS(estimate_bitrate(b, blob_data(0, 1), 10, WhichModel::Prior, 9),
                    std::invalid_argument);
    ModelBundle no_base = trained_stub(11, false);
    CHECK_THROWS_AS(estimate_bitrate(no_base, data, 10, WhichModel::Base, 9),
                    std::invalid_argument);
    CHECK(std::isfinite(estimate_bitrate(no_base, data, 10, WhichModel::Prior, 9).nats_total));
}

TEST_CASE("rfid is zero for an identity reconstructor and validates n") {
    Dataset data = blob_data(8, 99);
    const FeatureExtractor fx = make_feature_extractor(1, 8, 3);
    const ReconstructFn identity = [](const Tensor& batch) { return batch; };
    CHECK(rfid_core(identity, fx, data, 8) <= 1e-8);

    CHECK_THROWS_AS(rfid_core(identity, fx, data, 1), std::invalid_argument);
    CHECK_THROWS_AS(rfid_core(identity, fx, data, 9), std::invalid_argument);

    // Network route: finite and nonnegative on a stub checkpoint.
    ModelBundle b = trained_stub(13);
    SamplerConfig cfg;
    cfg.steps = 2;
    cfg.seed = 17;
    const double d = rfid(b, data, 4, cfg);
    CHECK(std::isfinite(d));
    CHECK(d >= 0.0);
}

TEST_CASE("flop counting follows the two-per-multiply-add rule") {
    CHECK(flop_count(NetDescription{}, FlopMode::Inference) == 0);

    NetDescription single;
    single.linears.push_back({"lin", 4, 8, 16});
    CHECK(flop_count(single, FlopMode::Inference) == 1024);
    CHECK(flop_count(single, FlopMode::Training) == 3072);

    const EncoderConfig e = small_encoder();
    for (const NetDescription& d :
         {describe_encoder(e), describe_token_denoiser(small_prior(), e.latent),
          describe_decoder(small_decoder(), e)}) {
        CHECK(flop_count(d, FlopMode::Inference) > 0);
        CHECK(flop_count(d, FlopMode::Training) == 3 * flop_count(d, FlopMode::Inference));
    }
}

TEST_CASE("metric rows serialize as stable CSV") {
    CHECK(metric_csv_header() == "metric,value,std_error,n,seed,checkpoint\n");
    MetricRow row;
    row.metric = "psnr";
    row.value = 32.5;
    row.std_error = 0.1;
    row.n = 64;
    row.seed = 7;
    row.checkpoint_id = "abcd1234";
    CHECK(metric_csv_line(row) == "psnr,32.5,0.1,64,7,abcd1234\n");
}
