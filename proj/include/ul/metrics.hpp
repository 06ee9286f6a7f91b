#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ul/datagen.hpp"
#include "ul/nets.hpp"
#include "ul/sampler.hpp"

namespace ul {

// Latent information content, in nats and bits, measured as a Monte-Carlo
// bound on the per-sample KL between the latent posterior and the token
// model's marginal: diffusion reconstruction term plus endpoint KL.
struct BitrateReport {
    double nats_total = 0.0;     // mean per-sample KL bound, summed over latent dims
    double bits_per_dim = 0.0;   // nats_total / (latent dims * ln 2)
    double bits_per_pixel = 0.0; // nats_total / (image pixels * ln 2)
    double std_error = 0.0;      // standard error of nats_total
    int64_t n_mc = 0;
    bool trained = true;         // false: checkpoint had zero training steps
};

enum class WhichModel { Prior, Base };

// Maps an image batch [N,H,W,C] to clean latents [N,h,w,c].
using CleanLatentFn = std::function<Tensor(const Tensor&)>;

// Estimator core with injectable encoder and denoiser, so analytic models can
// stand in for networks. Draws (sample, t, eps) with t stratified over equal
// bins; each draw contributes w_x(t) * |z - zhat|^2 + endpoint KL.
BitrateReport estimate_bitrate_core(const CleanLatentFn& encoder, const DenoiseFn& model,
                                    const NoiseSchedule& schedule, const Dataset& data,
                                    int64_t n_mc, uint64_t seed, int64_t latent_dims,
                                    int64_t image_pixels, bool trained);

BitrateReport estimate_bitrate(const ModelBundle& bundle, const Dataset& data, int64_t n_mc,
                               WhichModel which_model, uint64_t seed = 0);

// 10 log10(peak^2 / MSE); exact-zero MSE reports the 99 dB sentinel.
double psnr(const Tensor& x, const Tensor& y, double peak = 2.0);

// Frechet distance between Gaussian moment fits of two feature sets:
// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with a 1e-6 ridge on both
// covariances before the matrix square root.
double frechet_distance(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b);

// Fixed seeded random-projection feature net for Frechet comparisons: two
// strided tanh convolutions, channel mean/second-moment pooling, then a random
// linear readout. Never trained; any fixed nontrivial map gives a valid
// Frechet trend signal at this scale.
struct FeatureExtractor {
    int in_channels = 1;
    int hidden = 8;
    int dim = 8;
    uint64_t seed = 2718;
    std::vector<double> conv1, conv2, readout;  // filled by make_feature_extractor
};
FeatureExtractor make_feature_extractor(int in_channels, int dim = 8, uint64_t seed = 2718);
std::vector<double> features(const FeatureExtractor& fx, const Tensor& image);  // [H,W,C]

// Reconstruction Frechet distance: the first n dataset images are encoded,
// re-noised, and decoded; features of the reconstructions are compared against
// features of those same originals.
using ReconstructFn = std::function<Tensor(const Tensor&)>;  // [N,H,W,C] -> [N,H,W,C]
double rfid_core(const ReconstructFn& reconstruct, const FeatureExtractor& fx,
                 const Dataset& data, int64_t n);
double rfid(const ModelBundle& bundle, const Dataset& data, int64_t n, const SamplerConfig& cfg);

// FLOPs as 2 * tokens * in * out summed over every linear map; training costs
// three forward-equivalents.
enum class FlopMode { Inference, Training };
int64_t flop_count(const NetDescription& net, FlopMode mode);

// One CSV row per metric; std_error/n are zero when not applicable.
struct MetricRow {
    std::string metric;
    double value = 0.0;
    double std_error = 0.0;
    int64_t n = 0;
    uint64_t seed = 0;
    std::string checkpoint_id;
};
std::string metric_csv_header();
std::string metric_csv_line(const MetricRow& row);

}  // namespace ul
