#include "ul/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "ul/image_io.hpp"
#include "ul/rng.hpp"

namespace ul {
namespace {

constexpr double kPi = 3.14159265358979323846;

void blob_center(const DatasetSpec& spec, int mode, double& cx, double& cy) {
    const double angle = 2.0 * kPi * mode / spec.mode_count;
    cx = spec.blob_radius * std::cos(angle);
    cy = spec.blob_radius * std::sin(angle);
}

Tensor render_blob(const DatasetSpec& spec, Rng& rng) {
    const int res = spec.resolution;
    const int mode = rng.uniform_int(spec.mode_count);
    double cx, cy;
    blob_center(spec, mode, cx, cy);
    cx += spec.blob_jitter * rng.normal();
    cy += spec.blob_jitter * rng.normal();
    Tensor img = Tensor::zeros({res, res, spec.channels});
    const double s2 = spec.blob_width * spec.blob_width;
    for (int y = 0; y < res; ++y) {
        const double v = (2.0 * y + 1.0) / res - 1.0;
        for (int x = 0; x < res; ++x) {
            const double u = (2.0 * x + 1.0) / res - 1.0;
            const double d2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
            const double val = -1.0 + 2.0 * std::exp(-0.5 * d2 / s2);
            for (int c = 0; c < spec.channels; ++c) {
                img.data[(static_cast<size_t>(y) * res + x) * spec.channels + c] = val;
            }
        }
    }
    return img;
}

Tensor render_checkerboard(const DatasetSpec& spec, Rng& rng) {
    const int res = spec.resolution;
    const int freq = spec.freq_min + rng.uniform_int(spec.freq_max - spec.freq_min + 1);
    const double phase_x = 2.0 * kPi * rng.uniform();
    const double phase_y = 2.0 * kPi * rng.uniform();
    Tensor img = Tensor::zeros({res, res, spec.channels});
    for (int y = 0; y < res; ++y) {
        const double v = (2.0 * y + 1.0) / res - 1.0;
        for (int x = 0; x < res; ++x) {
            const double u = (2.0 * x + 1.0) / res - 1.0;
            const double val =
                std::tanh(3.0 * std::sin(freq * kPi * u + phase_x) * std::sin(freq * kPi * v + phase_y));
            for (int c = 0; c < spec.channels; ++c) {
                img.data[(static_cast<size_t>(y) * res + x) * spec.channels + c] = val;
            }
        }
    }
    return img;
}

// Fixed per-dataset glyph alphabet: the bit pattern of each glyph is derived
// from (seed, glyph index) alone, so the alphabet is shared by all samples.
// Row-major pixel (py, px) reads bit py*cell+px; glyph_cell <= 8 keeps the
// pattern inside one 64-bit draw.
uint64_t glyph_pattern(const DatasetSpec& spec, int glyph) {
    Rng rng(derive_seed(spec.seed, "glyph", static_cast<uint64_t>(glyph)));
    return rng.bits();
}

Tensor render_sprites(const DatasetSpec& spec, Rng& rng) {
    const int res = spec.resolution;
    const int cell = spec.glyph_cell;
    const int cells = res / cell;
    Tensor img = Tensor::zeros({res, res, spec.channels});
    for (int gy = 0; gy < cells; ++gy) {
        for (int gx = 0; gx < cells; ++gx) {
            const int glyph = rng.uniform_int(spec.glyph_alphabet);
            const uint64_t pattern = glyph_pattern(spec, glyph);
            const double fg = 0.75 + 0.2 * rng.uniform();
            const double bg = -0.75 - 0.2 * rng.uniform();
            for (int py = 0; py < cell; ++py) {
                for (int px = 0; px < cell; ++px) {
                    const double val = ((pattern >> (py * cell + px)) & 1ull) ? fg : bg;
                    const int y = gy * cell + py, x = gx * cell + px;
                    for (int c = 0; c < spec.channels; ++c) {
                        img.data[(static_cast<size_t>(y) * res + x) * spec.channels + c] = val;
                    }
                }
            }
        }
    }
    return img;
}

}  // namespace

void DatasetSpec::validate() const {
    if (resolution < 4) throw std::invalid_argument("dataset: resolution must be >= 4");
    if (channels != 1 && channels != 3) throw std::invalid_argument("dataset: channels must be 1 or 3");
    if (size < 0) throw std::invalid_argument("dataset: size must be >= 0");
    switch (family) {
        case Family::Blobs:
            if (mode_count < 1) throw std::invalid_argument("dataset: mode_count must be >= 1");
            if (!(blob_width > 0.0)) throw std::invalid_argument("dataset: blob_width must be > 0");
            break;
        case Family::Checkerboards:
            if (freq_min < 1 || freq_max < freq_min) {
                throw std::invalid_argument("dataset: need 1 <= freq_min <= freq_max");
            }
            break;
        case Family::Sprites:
            if (glyph_cell < 2 || glyph_cell > 8 || resolution % glyph_cell != 0) {
                throw std::invalid_argument(
                    "dataset: glyph_cell must be in [2,8] and divide the resolution");
            }
            if (glyph_alphabet < 2) throw std::invalid_argument("dataset: glyph_alphabet must be >= 2");
            break;
        case Family::Folder:
            if (folder.empty()) throw std::invalid_argument("dataset: folder path required");
            break;
    }
}

int64_t Dataset::size() const { return lazy_ ? spec_.size : static_cast<int64_t>(materialized_.size()); }

Tensor Dataset::sample(int64_t k) const {
    if (k < 0 || k >= size()) {
        throw std::out_of_range("dataset: index " + std::to_string(k) + " out of range [0, " +
                                std::to_string(size()) + ")");
    }
    if (!lazy_) return materialized_[static_cast<size_t>(k)];
    Rng rng(derive_seed(spec_.seed, "sample", static_cast<uint64_t>(k)));
    switch (spec_.family) {
        case DatasetSpec::Family::Blobs:
            return render_blob(spec_, rng);
        case DatasetSpec::Family::Checkerboards:
            return render_checkerboard(spec_, rng);
        case DatasetSpec::Family::Sprites:
            return render_sprites(spec_, rng);
        default:
            throw std::logic_error("dataset: lazy sample on materialized family");
    }
}

Tensor Dataset::batch(const std::vector<int64_t>& indices) const {
    const int n = static_cast<int>(indices.size());
    if (n == 0) throw std::invalid_argument("dataset: empty batch");
    const Tensor first = sample(indices[0]);
    Tensor out = Tensor::zeros({n, first.shape[0], first.shape[1], first.shape[2]});
    const size_t stride = first.data.size();
    std::copy(first.data.begin(), first.data.end(), out.data.begin());
    for (int i = 1; i < n; ++i) {
        const Tensor s = sample(indices[static_cast<size_t>(i)]);
        std::copy(s.data.begin(), s.data.end(), out.data.begin() + static_cast<int64_t>(i * stride));
    }
    return out;
}

int Dataset::blob_mode_of(int64_t k) const {
    if (spec_.family != DatasetSpec::Family::Blobs) {
        throw std::logic_error("dataset: blob_mode_of on non-blobs family");
    }
    Rng rng(derive_seed(spec_.seed, "sample", static_cast<uint64_t>(k)));
    return rng.uniform_int(spec_.mode_count);  // first draw of render_blob
}

int Dataset::nearest_blob_mode(const Tensor& image) const {
    if (spec_.family != DatasetSpec::Family::Blobs) {
        throw std::logic_error("dataset: nearest_blob_mode on non-blobs family");
    }
    // Intensity centroid of (pixel + 1), then nearest mode center.
    const int res = image.shape[0];
    const int ch = image.shape[2];
    double mx = 0.0, my = 0.0, mass = 0.0;
    for (int y = 0; y < res; ++y) {
        const double v = (2.0 * y + 1.0) / res - 1.0;
        for (int x = 0; x < res; ++x) {
            const double u = (2.0 * x + 1.0) / res - 1.0;
            const double wgt = image.data[(static_cast<size_t>(y) * res + x) * ch] + 1.0;
            mx += wgt * u;
            my += wgt * v;
            mass += wgt;
        }
    }
    if (mass <= 0.0) return -1;
    mx /= mass;
    my /= mass;
    int best = -1;
    double best_d = 0.0;
    for (int m = 0; m < spec_.mode_count; ++m) {
        double cx, cy;
        blob_center(spec_, m, cx, cy);
        const double d = (mx - cx) * (mx - cx) + (my - cy) * (my - cy);
        if (best < 0 || d < best_d) {
            best = m;
            best_d = d;
        }
    }
    return best;
}

Dataset Dataset::from_tensors(std::vector<Tensor> samples) {
    Dataset d;
    d.lazy_ = false;
    for (const Tensor& t : samples) {
        if (t.shape.size() != 3) {
            throw std::invalid_argument("dataset: from_tensors expects [H,W,C] samples");
        }
        if (!samples.empty() && t.shape != samples[0].shape) {
            throw std::invalid_argument("dataset: from_tensors samples must share a shape");
        }
    }
    if (!samples.empty()) {
        d.spec_.resolution = samples[0].shape[0];
        d.spec_.channels = samples[0].shape[2];
    }
    d.materialized_ = std::move(samples);
    return d;
}

Dataset generate(const DatasetSpec& spec) {
    spec.validate();
    if (spec.family == DatasetSpec::Family::Folder) {
        Dataset d = ingest_folder(spec.folder, spec.resolution, spec.channels);
        d.spec_.family = DatasetSpec::Family::Folder;
        d.spec_.folder = spec.folder;
        d.spec_.seed = spec.seed;
        return d;
    }
    Dataset d;
    d.spec_ = spec;
    d.lazy_ = true;
    return d;
}

Dataset ingest_folder(const std::string& path, int resolution, int channels) {
    namespace fs = std::filesystem;
    Dataset d;
    d.spec_.family = DatasetSpec::Family::Folder;
    d.spec_.resolution = resolution;
    d.spec_.channels = channels;
    d.spec_.folder = path;
    if (!fs::is_directory(path)) {
        throw std::runtime_error("dataset: '" + path + "' is not a directory");
    }
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(path)) {
        if (entry.is_regular_file()) files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    for (const std::string& f : files) {
        try {
            d.materialized_.push_back(fit_image(read_pnm(f), resolution, channels));
        } catch (const std::exception& e) {
            d.skipped_.push_back({f, e.what()});
        }
    }
    d.spec_.size = static_cast<int64_t>(d.materialized_.size());
    return d;
}

DatasetSpec dataset_spec_from(const ConfigMap& m) {
    DatasetSpec s;
    const std::string fam = m.get_string("data.family", "blobs");
    if (fam == "blobs") {
        s.family = DatasetSpec::Family::Blobs;
    } else if (fam == "checkerboards") {
        s.family = DatasetSpec::Family::Checkerboards;
    } else if (fam == "sprites") {
        s.family = DatasetSpec::Family::Sprites;
    } else if (fam == "folder") {
        s.family = DatasetSpec::Family::Folder;
    } else {
        throw std::invalid_argument(
            "data.family must be blobs, checkerboards, sprites or folder; got '" + fam + "'");
    }
    s.resolution = static_cast<int>(m.get_int("data.resolution", s.resolution));
    s.channels = static_cast<int>(m.get_int("data.channels", s.channels));
    s.size = m.get_int("data.size", s.size);
    s.seed = m.get_seed("data.seed", s.seed);
    s.mode_count = static_cast<int>(m.get_int("data.mode_count", s.mode_count));
    s.blob_radius = m.get_double("data.blob_radius", s.blob_radius);
    s.blob_jitter = m.get_double("data.blob_jitter", s.blob_jitter);
    s.blob_width = m.get_double("data.blob_width", s.blob_width);
    s.freq_min = static_cast<int>(m.get_int("data.freq_min", s.freq_min));
    s.freq_max = static_cast<int>(m.get_int("data.freq_max", s.freq_max));
    s.glyph_cell = static_cast<int>(m.get_int("data.glyph_cell", s.glyph_cell));
    s.glyph_alphabet = static_cast<int>(m.get_int("data.glyph_alphabet", s.glyph_alphabet));
    s.folder = m.get_string("data.folder", s.folder);
    s.validate();
    return s;
}

void dataset_spec_to(const DatasetSpec& s, ConfigMap& m) {
    switch (s.family) {
        case DatasetSpec::Family::Blobs: m.set("data.family", "blobs"); break;
        case DatasetSpec::Family::Checkerboards: m.set("data.family", "checkerboards"); break;
        case DatasetSpec::Family::Sprites: m.set("data.family", "sprites"); break;
        case DatasetSpec::Family::Folder: m.set("data.family", "folder"); break;
    }
    m.set_int("data.resolution", s.resolution);
    m.set_int("data.channels", s.channels);
    m.set_int("data.size", s.size);
    m.set_seed("data.seed", s.seed);
    m.set_int("data.mode_count", s.mode_count);
    m.set_double("data.blob_radius", s.blob_radius);
    m.set_double("data.blob_jitter", s.blob_jitter);
    m.set_double("data.blob_width", s.blob_width);
    m.set_int("data.freq_min", s.freq_min);
    m.set_int("data.freq_max", s.freq_max);
    m.set_int("data.glyph_cell", s.glyph_cell);
    m.set_int("data.glyph_alphabet", s.glyph_alphabet);
    if (!s.folder.empty()) m.set("data.folder", s.folder);
}

SplitIndices split_indices(int64_t n, double eval_frac, uint64_t seed) {
    if (n < 0 || !(eval_frac >= 0.0 && eval_frac <= 1.0)) {
        throw std::invalid_argument("dataset: bad split arguments");
    }
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(derive_seed(seed, "split"));
    for (int64_t i = n - 1; i > 0; --i) {  // Fisher-Yates
        const int64_t j = rng.uniform_int(static_cast<int>(i + 1));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    const int64_t n_eval = static_cast<int64_t>(eval_frac * static_cast<double>(n));
    SplitIndices s;
    s.eval.assign(order.begin(), order.begin() + n_eval);
    s.train.assign(order.begin() + n_eval, order.end());
    return s;
}

std::vector<int64_t> batch_indices(int64_t step, int64_t batch, int64_t dataset_size,
                                   uint64_t seed) {
    if (step < 0 || batch < 1 || dataset_size < 1) {
        throw std::invalid_argument("dataset: bad batch_indices arguments");
    }
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(batch));
    int64_t cached_epoch = -1;
    std::vector<int64_t> perm;
    for (int64_t i = 0; i < batch; ++i) {
        const int64_t global = step * batch + i;
        const int64_t epoch = global / dataset_size;
        if (epoch != cached_epoch) {
            perm.resize(static_cast<size_t>(dataset_size));
            for (int64_t k = 0; k < dataset_size; ++k) perm[static_cast<size_t>(k)] = k;
            Rng rng(derive_seed(seed, "epoch", static_cast<uint64_t>(epoch)));
            for (int64_t k = dataset_size - 1; k > 0; --k) {
                const int64_t j = rng.uniform_int(static_cast<int>(k + 1));
                std::swap(perm[static_cast<size_t>(k)], perm[static_cast<size_t>(j)]);
            }
            cached_epoch = epoch;
        }
        out.push_back(perm[static_cast<size_t>(global % dataset_size)]);
    }
    return out;
}

}  // namespace ul
