#include "ul/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

#include "ul/objective.hpp"
#include "ul/rng.hpp"

namespace ul {

namespace {

constexpr double kLn2 = 0.69314718055994531;
constexpr double kCovarianceRidge = 1e-6;
constexpr int64_t kReconstructChunk = 8;

Tensor slice_sample(const Tensor& batch, int64_t k) {
    const int64_t per = batch.numel() / batch.shape[0];
    Tensor out = Tensor::zeros({batch.shape[1], batch.shape[2], batch.shape[3]});
    std::copy(batch.data.begin() + k * per, batch.data.begin() + (k + 1) * per, out.data.begin());
    return out;
}

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows, const char* who) {
    if (rows.size() < 2) {
        throw std::invalid_argument(std::string(who) + ": need at least 2 feature vectors");
    }
    const size_t d = rows[0].size();
    if (d == 0) throw std::invalid_argument(std::string(who) + ": empty feature vectors");
    Eigen::MatrixXd m(rows.size(), d);
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != d) {
            throw std::invalid_argument(std::string(who) + ": feature dimensions differ");
        }
        for (size_t j = 0; j < d; ++j) {
            if (!std::isfinite(rows[i][j])) {
                throw std::invalid_argument(std::string(who) + ": non-finite feature value");
            }
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
        }
    }
    return m;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& m) {
    const Eigen::RowVectorXd mu = m.colwise().mean();
    Eigen::MatrixXd centered = m.rowwise() - mu;
    Eigen::MatrixXd cov =
        centered.transpose() * centered / static_cast<double>(m.rows() - 1);
    cov += kCovarianceRidge * Eigen::MatrixXd::Identity(m.cols(), m.cols());
    return cov;
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (s + s.transpose()));
    Eigen::VectorXd roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

// Strided 3x3 tanh convolution with zero padding; channel-last layout.
std::vector<double> conv3x3_s2_tanh(const std::vector<double>& in, int h, int w, int cin,
                                    int cout, const std::vector<double>& weights) {
    const int ho = (h + 1) / 2, wo = (w + 1) / 2;
    std::vector<double> out(static_cast<size_t>(ho) * wo * cout, 0.0);
    for (int y = 0; y < ho; ++y) {
        for (int x = 0; x < wo; ++x) {
            for (int co = 0; co < cout; ++co) {
                double acc = 0.0;
                for (int dy = 0; dy < 3; ++dy) {
                    const int sy = 2 * y + dy - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int dx = 0; dx < 3; ++dx) {
                        const int sx = 2 * x + dx - 1;
                        if (sx < 0 || sx >= w) continue;
                        for (int ci = 0; ci < cin; ++ci) {
                            const size_t wi = ((static_cast<size_t>(co) * cin + ci) * 3 + dy) * 3 + dx;
                            acc += weights[wi] * in[(static_cast<size_t>(sy) * w + sx) * cin + ci];
                        }
                    }
                }
                out[(static_cast<size_t>(y) * wo + x) * cout + co] = std::tanh(acc);
            }
        }
    }
    return out;
}

}  // namespace

BitrateReport estimate_bitrate_core(const CleanLatentFn& encoder, const DenoiseFn& model,
                                    const NoiseSchedule& schedule, const Dataset& data,
                                    int64_t n_mc, uint64_t seed, int64_t latent_dims,
                                    int64_t image_pixels, bool trained) {
    if (n_mc < 1) throw std::invalid_argument("bitrate: n_mc must be >= 1");
    if (data.size() < 1) throw std::invalid_argument("bitrate: empty dataset");
    if (latent_dims < 1 || image_pixels < 1) {
        throw std::invalid_argument("bitrate: bad dimension counts");
    }

    const int64_t bins = std::min<int64_t>(16, n_mc);
    std::vector<int64_t> count(static_cast<size_t>(bins), 0);
    std::vector<double> mean(static_cast<size_t>(bins), 0.0);
    std::vector<double> m2(static_cast<size_t>(bins), 0.0);

    std::vector<Tensor> cache(static_cast<size_t>(data.size()));
    std::vector<char> have(static_cast<size_t>(data.size()), 0);
    Rng rng(derive_seed(seed, "bitrate"));

    for (int64_t i = 0; i < n_mc; ++i) {
        const int64_t b = i % bins;
        const int64_t k = rng.uniform_int(static_cast<int>(data.size()));
        if (!have[static_cast<size_t>(k)]) {
            Tensor img = data.sample(k);
            img.shape.insert(img.shape.begin(), 1);
            cache[static_cast<size_t>(k)] = encoder(img);
            have[static_cast<size_t>(k)] = 1;
        }
        const Tensor& z = cache[static_cast<size_t>(k)];

        const double t = (static_cast<double>(b) + rng.uniform()) / static_cast<double>(bins);
        const double lambda = schedule.logsnr(t);
        const AlphaSigma as = alpha_sigma(lambda);
        Tensor z_t = Tensor::zeros(z.shape);
        for (size_t j = 0; j < z.data.size(); ++j) {
            z_t.data[j] = as.alpha * z.data[j] + as.sigma * rng.normal();
        }
        const Tensor zhat = model(z_t, lambda);
        require_same_shape(zhat, z, "bitrate: model prediction");
        double sq = 0.0;
        for (size_t j = 0; j < z.data.size(); ++j) {
            const double d = z.data[j] - zhat.data[j];
            sq += d * d;
        }
        const double f =
            elbo_weight_x(schedule, t) * sq + endpoint_kl_prior(z, schedule).data[0];

        // Welford per stratum
        const size_t bi = static_cast<size_t>(b);
        count[bi] += 1;
        const double delta = f - mean[bi];
        mean[bi] += delta / static_cast<double>(count[bi]);
        m2[bi] += delta * (f - mean[bi]);
    }

    double total = 0.0, var = 0.0;
    for (int64_t b = 0; b < bins; ++b) {
        const size_t bi = static_cast<size_t>(b);
        total += mean[bi] / static_cast<double>(bins);
        if (count[bi] >= 2) {
            const double vb = m2[bi] / static_cast<double>(count[bi] - 1);
            var += vb / static_cast<double>(count[bi]) /
                   static_cast<double>(bins * bins);
        }
    }

    BitrateReport r;
    r.nats_total = total;
    r.bits_per_dim = total / (static_cast<double>(latent_dims) * kLn2);
    r.bits_per_pixel = total / (static_cast<double>(image_pixels) * kLn2);
    r.std_error = std::sqrt(var);
    r.n_mc = n_mc;
    r.trained = trained;
    return r;
}

BitrateReport estimate_bitrate(const ModelBundle& bundle, const Dataset& data, int64_t n_mc,
                               WhichModel which_model, uint64_t seed) {
    if (which_model == WhichModel::Base && (!bundle.base_cfg || bundle.base.empty())) {
        throw std::invalid_argument("bitrate: bundle has no base model");
    }
    const CleanLatentFn enc = [&bundle](const Tensor& x) { return encode(bundle, x); };
    const DenoiseFn model = [&bundle, which_model](const Tensor& z_t, double lambda) {
        return which_model == WhichModel::Base ? denoise_base(bundle, z_t, lambda)
                                               : denoise_prior(bundle, z_t, lambda);
    };
    const EncoderConfig& ec = bundle.enc_cfg;
    return estimate_bitrate_core(enc, model, bundle.prior_schedule, data, n_mc, seed,
                                 ec.latent.dims(),
                                 static_cast<int64_t>(ec.image_h) * ec.image_w,
                                 bundle.steps_trained > 0);
}

double psnr(const Tensor& x, const Tensor& y, double peak) {
    if (x.shape != y.shape) throw std::invalid_argument("psnr: image shapes differ");
    if (x.data.empty()) throw std::invalid_argument("psnr: empty images");
    if (!(peak > 0.0) || !std::isfinite(peak)) {
        throw std::invalid_argument("psnr: peak must be finite and > 0");
    }
    double mse = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        if (!std::isfinite(x.data[i]) || !std::isfinite(y.data[i])) {
            throw std::invalid_argument("psnr: non-finite pixel value");
        }
        const double d = x.data[i] - y.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(x.data.size());
    if (mse == 0.0) return 99.0;
    return 10.0 * std::log10(peak * peak / mse);
}

double frechet_distance(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b) {
    Eigen::MatrixXd ma = to_matrix(a, "frechet");
    Eigen::MatrixXd mb = to_matrix(b, "frechet");
    if (ma.cols() != mb.cols()) {
        throw std::invalid_argument("frechet: feature dimensions differ between sets");
    }
    const Eigen::RowVectorXd mua = ma.colwise().mean();
    const Eigen::RowVectorXd mub = mb.colwise().mean();
    const Eigen::MatrixXd sa = covariance(ma);
    const Eigen::MatrixXd sb = covariance(mb);

    const Eigen::MatrixXd ra = symmetric_sqrt(sa);
    const Eigen::MatrixXd cross = symmetric_sqrt(ra * sb * ra);

    const double d = (mua - mub).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    return std::max(0.0, d);
}

FeatureExtractor make_feature_extractor(int in_channels, int dim, uint64_t seed) {
    if (in_channels != 1 && in_channels != 3) {
        throw std::invalid_argument("features: in_channels must be 1 or 3");
    }
    if (dim < 1) throw std::invalid_argument("features: dim must be >= 1");
    FeatureExtractor fx;
    fx.in_channels = in_channels;
    fx.dim = dim;
    fx.seed = seed;
    Rng rng(derive_seed(seed, "features"));
    auto fill = [&rng](std::vector<double>& w, size_t n, double scale) {
        w.resize(n);
        for (double& v : w) v = scale * rng.normal();
    };
    const int h = fx.hidden;
    fill(fx.conv1, static_cast<size_t>(h) * in_channels * 9,
         1.0 / std::sqrt(9.0 * in_channels));
    fill(fx.conv2, static_cast<size_t>(h) * h * 9, 1.0 / std::sqrt(9.0 * h));
    fill(fx.readout, static_cast<size_t>(dim) * 2 * h, 1.0 / std::sqrt(2.0 * h));
    return fx;
}

std::vector<double> features(const FeatureExtractor& fx, const Tensor& image) {
    if (image.shape.size() != 3) {
        throw std::invalid_argument("features: expected one [H,W,C] image");
    }
    const int h = image.shape[0], w = image.shape[1], c = image.shape[2];
    if (c != fx.in_channels) throw std::invalid_argument("features: channel mismatch");
    if (h < 2 || w < 2) throw std::invalid_argument("features: image too small");

    std::vector<double> a =
        conv3x3_s2_tanh(image.data, h, w, c, fx.hidden, fx.conv1);
    const int h1 = (h + 1) / 2, w1 = (w + 1) / 2;
    std::vector<double> b = conv3x3_s2_tanh(a, h1, w1, fx.hidden, fx.hidden, fx.conv2);
    const int h2 = (h1 + 1) / 2, w2 = (w1 + 1) / 2;

    // channel-wise first and second moments over positions
    std::vector<double> pooled(static_cast<size_t>(2 * fx.hidden), 0.0);
    const double inv = 1.0 / (static_cast<double>(h2) * w2);
    for (int y = 0; y < h2; ++y) {
        for (int x = 0; x < w2; ++x) {
            for (int ch = 0; ch < fx.hidden; ++ch) {
                const double v = b[(static_cast<size_t>(y) * w2 + x) * fx.hidden + ch];
                pooled[static_cast<size_t>(ch)] += inv * v;
                pooled[static_cast<size_t>(fx.hidden + ch)] += inv * v * v;
            }
        }
    }
    std::vector<double> out(static_cast<size_t>(fx.dim), 0.0);
    for (int j = 0; j < fx.dim; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 2 * fx.hidden; ++k) {
            acc += fx.readout[static_cast<size_t>(j) * 2 * fx.hidden + k] *
                   pooled[static_cast<size_t>(k)];
        }
        out[static_cast<size_t>(j)] = acc;
    }
    return out;
}

double rfid_core(const ReconstructFn& reconstruct, const FeatureExtractor& fx,
                 const Dataset& data, int64_t n) {
    if (n < 2) throw std::invalid_argument("rfid: need n >= 2 for covariance fits");
    if (n > data.size()) throw std::invalid_argument("rfid: n exceeds dataset size");
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    Tensor originals = data.batch(idx);
    Tensor recon = reconstruct(originals);
    require_same_shape(recon, originals, "rfid: reconstruction batch");

    std::vector<std::vector<double>> fa, fb;
    for (int64_t k = 0; k < n; ++k) {
        fa.push_back(features(fx, slice_sample(recon, k)));
        fb.push_back(features(fx, slice_sample(originals, k)));
    }
    return frechet_distance(fa, fb);
}

double rfid(const ModelBundle& bundle, const Dataset& data, int64_t n, const SamplerConfig& cfg) {
    const FeatureExtractor fx = make_feature_extractor(bundle.enc_cfg.image_c);
    const ReconstructFn fn = [&bundle, &cfg](const Tensor& batch) {
        Tensor out = Tensor::zeros(batch.shape);
        const int64_t total = batch.shape[0];
        const int64_t per = batch.numel() / total;
        for (int64_t at = 0, chunk = 0; at < total; at += kReconstructChunk, ++chunk) {
            const int64_t m = std::min(kReconstructChunk, total - at);
            Tensor part = Tensor::zeros({static_cast<int>(m), batch.shape[1], batch.shape[2],
                                         batch.shape[3]});
            std::copy(batch.data.begin() + at * per, batch.data.begin() + (at + m) * per,
                      part.data.begin());
            SamplerConfig part_cfg = cfg;
            part_cfg.seed = derive_seed(cfg.seed, "rfid", chunk);
            Tensor rec = ul::reconstruct(bundle, part, part_cfg);
            std::copy(rec.data.begin(), rec.data.end(), out.data.begin() + at * per);
        }
        return out;
    };
    return rfid_core(fn, fx, data, n);
}

int64_t flop_count(const NetDescription& net, FlopMode mode) {
    int64_t total = 0;
    for (const LinearDesc& l : net.linears) total += 2 * l.tokens * l.in * l.out;
    return mode == FlopMode::Training ? 3 * total : total;
}

std::string metric_csv_header() { return "metric,value,std_error,n,seed,checkpoint\n"; }

std::string metric_csv_line(const MetricRow& row) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%.10g,%.6g,%lld,%llu,%s\n", row.metric.c_str(),
                  row.value, row.std_error, static_cast<long long>(row.n),
                  static_cast<unsigned long long>(row.seed), row.checkpoint_id.c_str());
    return buf;
}

}  // namespace ul
