#include "ul/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ul {
namespace {

constexpr char kMagic[8] = {'U', 'L', 'C', 'K', 'P', 'T', '1', '\n'};

void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_i64(std::ostream& out, int64_t v) {
    unsigned char b[8];
    const uint64_t u = static_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t read_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw std::runtime_error("checkpoint: truncated file '" + path + "'");
    }
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

int64_t read_i64(std::istream& in, const std::string& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) {
        throw std::runtime_error("checkpoint: truncated file '" + path + "'");
    }
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return static_cast<int64_t>(v);
}

void write_string(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, const std::string& path) {
    const uint32_t n = read_u32(in, path);
    if (n > (1u << 26)) throw std::runtime_error("checkpoint: corrupt string length in '" + path + "'");
    std::string s(n, '\0');
    if (n && !in.read(s.data(), n)) {
        throw std::runtime_error("checkpoint: truncated file '" + path + "'");
    }
    return s;
}

void write_param_set(std::ostream& out, const std::string& set_name, const ParamSet& ps) {
    write_string(out, set_name);
    write_u32(out, static_cast<uint32_t>(ps.items.size()));
    for (const auto& [name, t] : ps.items) {
        write_string(out, name);
        write_u32(out, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) write_i64(out, d);
        // Raw IEEE doubles; the build targets little-endian hosts only.
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
}

ParamSet read_param_set(std::istream& in, const std::string& path) {
    ParamSet ps;
    const uint32_t n_arrays = read_u32(in, path);
    for (uint32_t i = 0; i < n_arrays; ++i) {
        const std::string name = read_string(in, path);
        const uint32_t rank = read_u32(in, path);
        if (rank > 8) throw std::runtime_error("checkpoint: corrupt array rank in '" + path + "'");
        std::vector<int> shape;
        int64_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            const int64_t dim = read_i64(in, path);
            if (dim < 0 || dim > (1 << 24)) {
                throw std::runtime_error("checkpoint: corrupt array shape in '" + path + "'");
            }
            shape.push_back(static_cast<int>(dim));
            numel *= dim;
        }
        Tensor t = Tensor::zeros(shape);
        if (numel != static_cast<int64_t>(t.data.size())) {
            throw std::runtime_error("checkpoint: corrupt array size in '" + path + "'");
        }
        if (!in.read(reinterpret_cast<char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(double)))) {
            throw std::runtime_error("checkpoint: truncated file '" + path + "'");
        }
        ps.add(name, std::move(t));
    }
    return ps;
}

void schedule_to_header(ConfigMap& h, const std::string& prefix, const NoiseSchedule& s) {
    h.set_double(prefix + ".lambda_max", s.lambda_max);
    h.set_double(prefix + ".lambda_min", s.lambda_min);
    h.set(prefix + ".shape", s.shape == ScheduleShape::Linear ? "linear" : "warped");
    h.set_double(prefix + ".warp", s.warp);
}

NoiseSchedule schedule_from_header(const ConfigMap& h, const std::string& prefix) {
    const std::string shape = h.get_string(prefix + ".shape", "linear");
    ScheduleShape sh;
    if (shape == "linear") {
        sh = ScheduleShape::Linear;
    } else if (shape == "warped") {
        sh = ScheduleShape::Warped;
    } else {
        throw std::invalid_argument("config: key '" + prefix + ".shape' holds '" + shape +
                                    "', expected linear or warped");
    }
    return NoiseSchedule(h.get_double(prefix + ".lambda_max"), h.get_double(prefix + ".lambda_min"),
                         sh, h.get_double(prefix + ".warp", 0.0));
}

void denoiser_to_header(ConfigMap& h, const std::string& prefix, const DenoiserConfig& d) {
    h.set_int_list(prefix + ".widths", d.widths);
    h.set_int(prefix + ".blocks", d.blocks);
    h.set_double(prefix + ".dropout_rate", d.dropout_rate);
    h.set_int(prefix + ".lambda_embed_dim", d.lambda_embed_dim);
}

DenoiserConfig denoiser_from_header(const ConfigMap& h, const std::string& prefix,
                                    DenoiserRole role) {
    DenoiserConfig d;
    d.role = role;
    d.conditioning = role == DenoiserRole::Decoder ? Conditioning::Latent : Conditioning::None;
    d.widths = h.get_int_list(prefix + ".widths");
    d.blocks = static_cast<int>(h.get_int(prefix + ".blocks"));
    d.dropout_rate = h.get_double(prefix + ".dropout_rate");
    d.lambda_embed_dim = static_cast<int>(h.get_int(prefix + ".lambda_embed_dim"));
    return d;
}

}  // namespace

ConfigMap bundle_header(const ModelBundle& b) {
    ConfigMap h;
    h.set_int("seed", static_cast<int64_t>(b.seed));
    h.set_int("steps_trained", b.steps_trained);
    h.set_bool("use_ema_for_eval", b.use_ema_for_eval);
    h.set_double("weighting.bias", b.weighting.bias);
    h.set_double("weighting.loss_factor", b.weighting.loss_factor);
    h.set_int("encoder.image_h", b.enc_cfg.image_h);
    h.set_int("encoder.image_w", b.enc_cfg.image_w);
    h.set_int("encoder.image_c", b.enc_cfg.image_c);
    h.set_int_list("encoder.widths", b.enc_cfg.widths);
    h.set_int("encoder.blocks", b.enc_cfg.blocks);
    h.set_int("encoder.patch", b.enc_cfg.patch);
    h.set_bool("encoder.learned_variance", b.enc_cfg.learned_variance);
    h.set_int("latent.h", b.enc_cfg.latent.h);
    h.set_int("latent.w", b.enc_cfg.latent.w);
    h.set_int("latent.c", b.enc_cfg.latent.c);
    h.set_double("latent.lambda_z0", b.enc_cfg.latent.lambda_z0);
    denoiser_to_header(h, "prior", b.prior_cfg);
    denoiser_to_header(h, "decoder", b.dec_cfg);
    h.set_bool("base.present", b.base_cfg.has_value());
    if (b.base_cfg) denoiser_to_header(h, "base", *b.base_cfg);
    schedule_to_header(h, "prior_schedule", b.prior_schedule);
    schedule_to_header(h, "decoder_schedule", b.decoder_schedule);
    return h;
}

ModelBundle bundle_from_header(const ConfigMap& h) {
    ModelBundle b;
    b.seed = static_cast<uint64_t>(h.get_int("seed"));
    b.steps_trained = h.get_int("steps_trained");
    b.use_ema_for_eval = h.get_bool("use_ema_for_eval");
    b.weighting.bias = h.get_double("weighting.bias");
    b.weighting.loss_factor = h.get_double("weighting.loss_factor");
    b.enc_cfg.image_h = static_cast<int>(h.get_int("encoder.image_h"));
    b.enc_cfg.image_w = static_cast<int>(h.get_int("encoder.image_w"));
    b.enc_cfg.image_c = static_cast<int>(h.get_int("encoder.image_c"));
    b.enc_cfg.widths = h.get_int_list("encoder.widths");
    b.enc_cfg.blocks = static_cast<int>(h.get_int("encoder.blocks"));
    b.enc_cfg.patch = static_cast<int>(h.get_int("encoder.patch"));
    b.enc_cfg.learned_variance = h.get_bool("encoder.learned_variance");
    b.enc_cfg.latent.h = static_cast<int>(h.get_int("latent.h"));
    b.enc_cfg.latent.w = static_cast<int>(h.get_int("latent.w"));
    b.enc_cfg.latent.c = static_cast<int>(h.get_int("latent.c"));
    b.enc_cfg.latent.lambda_z0 = h.get_double("latent.lambda_z0");
    b.prior_cfg = denoiser_from_header(h, "prior", DenoiserRole::Prior);
    b.dec_cfg = denoiser_from_header(h, "decoder", DenoiserRole::Decoder);
    if (h.get_bool("base.present")) {
        b.base_cfg = denoiser_from_header(h, "base", DenoiserRole::Base);
    }
    b.prior_schedule = schedule_from_header(h, "prior_schedule");
    b.decoder_schedule = schedule_from_header(h, "decoder_schedule");
    b.validate();
    return b;
}

void save_bundle(const ModelBundle& bundle, const std::string& path) {
    bundle.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
    out.write(kMagic, sizeof kMagic);
    write_string(out, bundle_header(bundle).serialize());
    const std::pair<const char*, const ParamSet*> sets[] = {
        {"enc", &bundle.enc},         {"prior", &bundle.prior},
        {"dec", &bundle.dec},         {"base", &bundle.base},
        {"enc_ema", &bundle.enc_ema}, {"prior_ema", &bundle.prior_ema},
        {"dec_ema", &bundle.dec_ema}, {"base_ema", &bundle.base_ema},
    };
    write_u32(out, static_cast<uint32_t>(std::size(sets)));
    for (const auto& [name, ps] : sets) write_param_set(out, name, *ps);
    if (!out) throw std::runtime_error("checkpoint: failed writing '" + path + "'");
}

ModelBundle load_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[sizeof kMagic];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file");
    }
    ConfigMap header;
    try {
        header = parse_config_text(read_string(in, path));
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error("checkpoint: bad header in '" + path + "': " + e.what());
    }
    ModelBundle b = bundle_from_header(header);
    const uint32_t n_sets = read_u32(in, path);
    for (uint32_t i = 0; i < n_sets; ++i) {
        const std::string name = read_string(in, path);
        ParamSet ps = read_param_set(in, path);
        if (name == "enc") {
            b.enc = std::move(ps);
        } else if (name == "prior") {
            b.prior = std::move(ps);
        } else if (name == "dec") {
            b.dec = std::move(ps);
        } else if (name == "base") {
            b.base = std::move(ps);
        } else if (name == "enc_ema") {
            b.enc_ema = std::move(ps);
        } else if (name == "prior_ema") {
            b.prior_ema = std::move(ps);
        } else if (name == "dec_ema") {
            b.dec_ema = std::move(ps);
        } else if (name == "base_ema") {
            b.base_ema = std::move(ps);
        } else {
            throw std::runtime_error("checkpoint: unknown parameter set '" + name + "' in '" + path +
                                     "'");
        }
    }
    return b;
}

uint64_t param_checksum(const ParamSet& ps) {
    // FNV-1a over names, shapes and raw value bytes.
    uint64_t h = 1469598103934665603ull;
    auto mix_bytes = [&h](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, t] : ps.items) {
        mix_bytes(name.data(), name.size());
        for (int d : t.shape) mix_bytes(&d, sizeof d);
        mix_bytes(t.data.data(), t.data.size() * sizeof(double));
    }
    return h;
}

uint64_t bundle_checksum(const ModelBundle& b) {
    uint64_t h = 1469598103934665603ull;
    for (const ParamSet* ps : {&b.enc, &b.prior, &b.dec, &b.base, &b.enc_ema, &b.prior_ema,
                               &b.dec_ema, &b.base_ema}) {
        const uint64_t c = param_checksum(*ps);
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string checkpoint_id(const ModelBundle& bundle) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(bundle_checksum(bundle)));
    return buf;
}

}  // namespace ul
