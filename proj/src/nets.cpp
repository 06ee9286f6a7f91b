#include "ul/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace ul {

namespace {

// One parameter-owning layer. The same walk drives initialization, parameter
// counting and FLOP description, so they cannot drift out of sync with the
// graph builders (which request these names through Bindings).
struct LayerDef {
    std::string name;
    std::vector<int> wshape;  // conv [k,k,ci,co] or linear [in,out]
    int bdim = 0;
    double wstd = -1.0;   // -1 => variance-scaled 1/sqrt(fan_in); 0 => zeros
    double binit = 0.0;
    int64_t tokens = 0;   // positions the map is applied at, for FLOPs
    bool is_norm = false; // layer-norm gamma/beta pair of size bdim
};

LayerDef norm_layer(std::string name, int dim) {
    LayerDef d;
    d.name = std::move(name);
    d.bdim = dim;
    d.is_norm = true;
    return d;
}

LayerDef conv_layer(std::string name, int k, int ci, int co, int64_t tokens, double wstd = -1.0,
                    double binit = 0.0) {
    LayerDef d;
    d.name = std::move(name);
    d.wshape = {k, k, ci, co};
    d.bdim = co;
    d.wstd = wstd;
    d.binit = binit;
    d.tokens = tokens;
    return d;
}

LayerDef lin_layer(std::string name, int in, int out, int64_t tokens, double wstd = -1.0,
                   double binit = 0.0) {
    LayerDef d;
    d.name = std::move(name);
    d.wshape = {in, out};
    d.bdim = out;
    d.wstd = wstd;
    d.binit = binit;
    d.tokens = tokens;
    return d;
}

int64_t fan_in(const std::vector<int>& wshape) {
    int64_t f = 1;
    for (size_t i = 0; i + 1 < wshape.size(); ++i) f *= wshape[i];
    return f;
}

std::vector<LayerDef> encoder_layers(const EncoderConfig& cfg) {
    cfg.validate();
    std::vector<LayerDef> out;
    const int L = static_cast<int>(cfg.widths.size());
    int h = cfg.image_h / cfg.patch;
    int w = cfg.image_w / cfg.patch;
    out.push_back(conv_layer("stem", 3, cfg.image_c * cfg.patch * cfg.patch, cfg.widths[0],
                             static_cast<int64_t>(h) * w));
    for (int i = 0; i < L; ++i) {
        if (i > 0) {
            h /= 2;
            w /= 2;
            out.push_back(conv_layer("down" + std::to_string(i), 1, 4 * cfg.widths[i - 1],
                                     cfg.widths[i], static_cast<int64_t>(h) * w));
        }
        for (int j = 0; j < cfg.blocks; ++j) {
            const std::string base = "s" + std::to_string(i) + "b" + std::to_string(j);
            out.push_back(conv_layer(base + "c1", 3, cfg.widths[i], cfg.widths[i],
                                     static_cast<int64_t>(h) * w));
            out.push_back(conv_layer(base + "c2", 3, cfg.widths[i], cfg.widths[i],
                                     static_cast<int64_t>(h) * w));
        }
    }
    out.push_back(
        conv_layer("head", 3, cfg.widths[L - 1], cfg.latent.c, static_cast<int64_t>(h) * w));
    if (cfg.learned_variance) {
        // starts as a constant sigma of 0.08: zero weights, bias ln 0.08
        out.push_back(conv_layer("sighead", 1, cfg.widths[L - 1], cfg.latent.c,
                                 static_cast<int64_t>(h) * w, 0.0, std::log(0.08)));
    }
    return out;
}

std::vector<LayerDef> token_layers(const DenoiserConfig& cfg, const LatentSpec& latent) {
    cfg.validate();
    latent.validate();
    std::vector<LayerDef> out;
    const int T = latent.h * latent.w;
    const int C = latent.c;
    const int d = cfg.widths[0];
    const int m = 2 * d;
    const int E = cfg.lambda_embed_dim;
    out.push_back(lin_layer("in", C, d, T));
    out.push_back(lin_layer("emba", E, d, 1));
    out.push_back(lin_layer("embb", d, d, 1));
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string base = "b" + std::to_string(b);
        out.push_back(norm_layer(base + "ln1", d));
        out.push_back(lin_layer(base + "tmix", T, T, d));
        out.push_back(norm_layer(base + "ln2", d));
        out.push_back(lin_layer(base + "m1", d, m, T));
        out.push_back(lin_layer(base + "m2", m, d, T));
    }
    out.push_back(norm_layer("lnf", d));
    out.push_back(lin_layer("out", d, C, T, 0.0));  // zero-init: initial prediction is 0
    return out;
}

// Bottleneck sits at the coarsest level; the latent is nearest-upsampled to
// that resolution and concatenated before the inject conv.
int decoder_upsample_factor(const DenoiserConfig& cfg, const EncoderConfig& enc) {
    const int L = static_cast<int>(cfg.widths.size());
    const int bh = enc.image_h >> (L - 1);
    const int bw = enc.image_w >> (L - 1);
    if ((enc.image_h % (1 << (L - 1))) != 0 || (enc.image_w % (1 << (L - 1))) != 0 || bh <= 0 ||
        bw <= 0) {
        throw std::invalid_argument("decoder: image dims not divisible across " +
                                    std::to_string(L) + " levels");
    }
    if (bh % enc.latent.h != 0 || bw % enc.latent.w != 0 ||
        bh / enc.latent.h != bw / enc.latent.w) {
        throw std::invalid_argument(
            "decoder: bottleneck resolution is not an integer upsample of the latent grid");
    }
    return bh / enc.latent.h;
}

std::vector<LayerDef> decoder_layers(const DenoiserConfig& cfg, const EncoderConfig& enc) {
    cfg.validate();
    enc.validate();
    if (cfg.role != DenoiserRole::Decoder) {
        throw std::invalid_argument("decoder_layers: config role is not decoder");
    }
    (void)decoder_upsample_factor(cfg, enc);  // validates geometry
    std::vector<LayerDef> out;
    const int L = static_cast<int>(cfg.widths.size());
    const int E = cfg.lambda_embed_dim;
    const int Cx = enc.image_c;
    int h = enc.image_h;
    int w = enc.image_w;
    out.push_back(conv_layer("stem", 3, Cx, cfg.widths[0], static_cast<int64_t>(h) * w));
    out.push_back(lin_layer("emb0a", E, cfg.widths[0], 1));
    out.push_back(lin_layer("emb0b", cfg.widths[0], cfg.widths[0], 1));
    for (int i = 0; i + 1 < L; ++i) {
        for (int j = 0; j < cfg.blocks; ++j) {
            const std::string base = "d" + std::to_string(i) + "b" + std::to_string(j);
            out.push_back(conv_layer(base + "c1", 3, cfg.widths[i], cfg.widths[i],
                                     static_cast<int64_t>(h) * w));
            out.push_back(conv_layer(base + "c2", 3, cfg.widths[i], cfg.widths[i],
                                     static_cast<int64_t>(h) * w));
        }
        h /= 2;
        w /= 2;
        out.push_back(conv_layer("down" + std::to_string(i + 1), 1, 4 * cfg.widths[i],
                                 cfg.widths[i + 1], static_cast<int64_t>(h) * w));
    }
    const int wb = cfg.widths[L - 1];
    out.push_back(conv_layer("inject", 3, wb + enc.latent.c, wb, static_cast<int64_t>(h) * w));
    out.push_back(lin_layer("embba", E, wb, 1));
    out.push_back(lin_layer("embbb", wb, wb, 1));
    for (int j = 0; j < cfg.blocks; ++j) {
        const std::string base = "bb" + std::to_string(j);
        out.push_back(conv_layer(base + "c1", 3, wb, wb, static_cast<int64_t>(h) * w));
        out.push_back(conv_layer(base + "c2", 3, wb, wb, static_cast<int64_t>(h) * w));
    }
    for (int i = L - 1; i >= 1; --i) {
        h *= 2;
        w *= 2;
        out.push_back(conv_layer("up" + std::to_string(i), 1, cfg.widths[i], cfg.widths[i - 1],
                                 static_cast<int64_t>(h) * w));
        out.push_back(conv_layer("fuse" + std::to_string(i), 1, 2 * cfg.widths[i - 1],
                                 cfg.widths[i - 1], static_cast<int64_t>(h) * w));
        for (int j = 0; j < cfg.blocks; ++j) {
            const std::string base = "u" + std::to_string(i - 1) + "b" + std::to_string(j);
            out.push_back(conv_layer(base + "c1", 3, cfg.widths[i - 1], cfg.widths[i - 1],
                                     static_cast<int64_t>(h) * w));
            out.push_back(conv_layer(base + "c2", 3, cfg.widths[i - 1], cfg.widths[i - 1],
                                     static_cast<int64_t>(h) * w));
        }
    }
    out.push_back(conv_layer("head", 3, cfg.widths[0], Cx, static_cast<int64_t>(h) * w, 0.0));
    return out;
}

ParamSet init_from_layers(const std::vector<LayerDef>& layers, uint64_t seed) {
    ParamSet ps;
    Rng rng(seed);
    for (const LayerDef& d : layers) {
        if (d.is_norm) {
            ps.add(d.name + ".g", Tensor::full({d.bdim}, 1.0));
            ps.add(d.name + ".b", Tensor::zeros({d.bdim}));
            continue;
        }
        Tensor w = Tensor::zeros(d.wshape);
        const double std = d.wstd < 0.0 ? 1.0 / std::sqrt(static_cast<double>(fan_in(d.wshape)))
                                        : d.wstd;
        if (std > 0.0) {
            for (double& v : w.data) v = std * rng.normal();
        }
        ps.add(d.name + ".w", std::move(w));
        ps.add(d.name + ".b", Tensor::full({d.bdim}, d.binit));
    }
    return ps;
}

NetDescription describe_from_layers(const std::vector<LayerDef>& layers) {
    NetDescription nd;
    for (const LayerDef& d : layers) {
        if (d.is_norm) {
            nd.param_count += 2 * d.bdim;
            continue;
        }
        int64_t n = 1;
        for (int x : d.wshape) n *= x;
        nd.param_count += n + d.bdim;
        LinearDesc ld;
        ld.name = d.name;
        ld.tokens = d.tokens;
        ld.in = fan_in(d.wshape);
        ld.out = d.wshape.back();
        nd.linears.push_back(std::move(ld));
    }
    return nd;
}

// ---- builder helpers ----

Ref conv(Graph& g, Bindings& p, const std::string& name, Ref x) {
    return g.conv2d(x, p(name + ".w"), p(name + ".b"));
}

Ref lin(Graph& g, Bindings& p, const std::string& name, Ref x) {
    return g.add_bias(g.matmul(x, p(name + ".w")), p(name + ".b"));
}

Ref lnorm(Graph& g, Bindings& p, const std::string& name, Ref x) {
    return g.layer_norm(x, p(name + ".g"), p(name + ".b"));
}

Ref resblock(Graph& g, Bindings& p, const std::string& base, Ref x, double dropout_rate,
             Rng* dropout) {
    Ref h = conv(g, p, base + "c2", g.silu(conv(g, p, base + "c1", g.silu(x))));
    if (dropout != nullptr && dropout_rate > 0.0) {
        const double keep = 1.0 - dropout_rate;
        Tensor mask = Tensor::zeros(g.val(h).shape);
        for (double& v : mask.data) v = dropout->uniform() < keep ? 1.0 / keep : 0.0;
        h = g.mul(h, g.input(std::move(mask)));
    }
    return g.add(x, h);
}

// project the lambda embedding and add it to every position of x [N,...,C]
Ref add_lambda_cond(Graph& g, Bindings& p, const std::string& base, double lambda, int embed_dim,
                    Ref x) {
    const int n = g.val(x).shape[0];
    Ref e = g.input(lambda_embedding(lambda, embed_dim));
    Ref v = lin(g, p, base + "b", g.silu(lin(g, p, base + "a", e)));  // [1, C]
    Ref tiled = g.matmul(g.input(Tensor::full({n, 1}, 1.0)), v);     // [N, C]
    return g.add_bcast_mid(x, tiled);
}

void require_finite(const Tensor& t, const char* who) {
    if (!t.all_finite()) {
        throw std::invalid_argument(std::string(who) + ": non-finite input values");
    }
}

void require_shape(const Tensor& t, const std::vector<int>& want, const char* who) {
    if (t.shape.size() != want.size() + 1) {
        throw std::invalid_argument(std::string(who) + ": expected batched tensor with dims " +
                                    shape_str(want) + " after the batch dim, got " +
                                    shape_str(t.shape));
    }
    for (size_t i = 0; i < want.size(); ++i) {
        if (t.shape[i + 1] != want[i]) {
            throw std::invalid_argument(std::string(who) + ": expected trailing dims " +
                                        shape_str(want) + ", got " + shape_str(t.shape));
        }
    }
}

void require_lambda_in(const NoiseSchedule& s, double lambda, const char* who) {
    const double slack = 1e-9;
    if (!(lambda >= s.lambda_min - slack && lambda <= s.lambda_max + slack)) {
        throw std::invalid_argument(std::string(who) + ": lambda " + std::to_string(lambda) +
                                    " outside schedule range [" + std::to_string(s.lambda_min) +
                                    ", " + std::to_string(s.lambda_max) + "]");
    }
}

}  // namespace

// ---- config validation ----

void LatentSpec::validate() const {
    if (h <= 0 || w <= 0 || c <= 0) {
        throw std::invalid_argument("LatentSpec: dims must be positive");
    }
    if (!std::isfinite(lambda_z0)) {
        throw std::invalid_argument("LatentSpec: lambda_z0 must be finite");
    }
}

void EncoderConfig::validate() const {
    latent.validate();
    if (image_h <= 0 || image_w <= 0 || image_c <= 0) {
        throw std::invalid_argument("EncoderConfig: image dims must be positive");
    }
    if (widths.empty()) throw std::invalid_argument("EncoderConfig: widths must be non-empty");
    for (int w : widths) {
        if (w <= 0) throw std::invalid_argument("EncoderConfig: widths must be positive");
    }
    if (blocks < 0) throw std::invalid_argument("EncoderConfig: blocks must be >= 0");
    if (patch < 1) throw std::invalid_argument("EncoderConfig: patch must be >= 1");
    const int total = patch * (1 << (static_cast<int>(widths.size()) - 1));
    if (image_h % total != 0 || image_w % total != 0) {
        throw std::invalid_argument(
            "EncoderConfig: image dims must be divisible by patch * 2^(stages-1) = " +
            std::to_string(total));
    }
    if (image_h / total != latent.h || image_w / total != latent.w) {
        throw std::invalid_argument("EncoderConfig: encoder output grid " +
                                    std::to_string(image_h / total) + "x" +
                                    std::to_string(image_w / total) +
                                    " does not match the latent grid " + std::to_string(latent.h) +
                                    "x" + std::to_string(latent.w));
    }
}

void DenoiserConfig::validate() const {
    if (widths.empty()) throw std::invalid_argument("DenoiserConfig: widths must be non-empty");
    for (int w : widths) {
        if (w <= 0) throw std::invalid_argument("DenoiserConfig: widths must be positive");
    }
    if (blocks < 1) throw std::invalid_argument("DenoiserConfig: blocks must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
        throw std::invalid_argument("DenoiserConfig: dropout_rate must lie in [0, 1)");
    }
    if (lambda_embed_dim < 2 || lambda_embed_dim % 2 != 0) {
        throw std::invalid_argument("DenoiserConfig: lambda_embed_dim must be even and >= 2");
    }
    const bool wants_latent = (role == DenoiserRole::Decoder);
    if (wants_latent != (conditioning == Conditioning::Latent)) {
        throw std::invalid_argument(
            "DenoiserConfig: decoder role requires latent conditioning; prior/base require none");
    }
}

void ModelBundle::validate() const {
    enc_cfg.validate();
    prior_cfg.validate();
    dec_cfg.validate();
    if (prior_cfg.role != DenoiserRole::Prior) {
        throw std::invalid_argument("ModelBundle: prior config must have prior role");
    }
    if (dec_cfg.role != DenoiserRole::Decoder) {
        throw std::invalid_argument("ModelBundle: decoder config must have decoder role");
    }
    if (base_cfg) {
        base_cfg->validate();
        if (base_cfg->role != DenoiserRole::Base) {
            throw std::invalid_argument("ModelBundle: base config must have base role");
        }
    }
    weighting.validate();
    if (prior_schedule.lambda_max != enc_cfg.latent.lambda_z0) {
        throw std::invalid_argument(
            "ModelBundle: prior schedule must start at the encoding log-SNR lambda_z0");
    }
}

// ---- ParamSet / Bindings ----

Tensor& ParamSet::add(std::string name, Tensor t) {
    if (find(name) != nullptr) {
        throw std::invalid_argument("ParamSet: duplicate parameter " + name);
    }
    items.emplace_back(std::move(name), std::move(t));
    return items.back().second;
}

Tensor* ParamSet::find(std::string_view name) {
    for (auto& [n, t] : items) {
        if (n == name) return &t;
    }
    return nullptr;
}

const Tensor* ParamSet::find(std::string_view name) const {
    for (const auto& [n, t] : items) {
        if (n == name) return &t;
    }
    return nullptr;
}

int64_t ParamSet::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
}

bool ParamSet::all_finite() const {
    for (const auto& [name, t] : items) {
        if (!t.all_finite()) return false;
    }
    return true;
}

Ref Bindings::operator()(const std::string& name) {
    for (const auto& [n, r] : bound_) {
        if (n == name) return r;
    }
    const Tensor* t = params_->find(name);
    if (t == nullptr) {
        throw std::invalid_argument("Bindings: unknown parameter " + name);
    }
    Ref r = g_->input(*t, needs_grad_);
    bound_.emplace_back(name, r);
    return r;
}

// ---- initialization / description ----

ParamSet init_encoder(const EncoderConfig& cfg, uint64_t seed) {
    return init_from_layers(encoder_layers(cfg), seed);
}

ParamSet init_token_denoiser(const DenoiserConfig& cfg, const LatentSpec& latent, uint64_t seed) {
    if (cfg.role == DenoiserRole::Decoder) {
        throw std::invalid_argument("init_token_denoiser: decoder config given");
    }
    return init_from_layers(token_layers(cfg, latent), seed);
}

ParamSet init_decoder(const DenoiserConfig& cfg, const EncoderConfig& enc, uint64_t seed) {
    return init_from_layers(decoder_layers(cfg, enc), seed);
}

NetDescription describe_encoder(const EncoderConfig& cfg) {
    return describe_from_layers(encoder_layers(cfg));
}

NetDescription describe_token_denoiser(const DenoiserConfig& cfg, const LatentSpec& latent) {
    if (cfg.role == DenoiserRole::Decoder) {
        throw std::invalid_argument("describe_token_denoiser: decoder config given");
    }
    return describe_from_layers(token_layers(cfg, latent));
}

NetDescription describe_decoder(const DenoiserConfig& cfg, const EncoderConfig& enc) {
    return describe_from_layers(decoder_layers(cfg, enc));
}

ModelBundle make_bundle(const EncoderConfig& enc, const DenoiserConfig& prior,
                        const DenoiserConfig& dec, const std::optional<DenoiserConfig>& base,
                        const WeightingConfig& weighting, uint64_t seed, double prior_lambda_min,
                        double decoder_lambda_max, double decoder_lambda_min) {
    ModelBundle b;
    b.enc_cfg = enc;
    b.prior_cfg = prior;
    b.dec_cfg = dec;
    b.base_cfg = base;
    b.prior_schedule = NoiseSchedule(enc.latent.lambda_z0, prior_lambda_min);
    b.decoder_schedule = NoiseSchedule(decoder_lambda_max, decoder_lambda_min);
    b.weighting = weighting;
    b.seed = seed;
    b.validate();
    b.enc = init_encoder(enc, derive_seed(seed, "init.enc"));
    b.prior = init_token_denoiser(prior, enc.latent, derive_seed(seed, "init.prior"));
    b.dec = init_decoder(dec, enc, derive_seed(seed, "init.dec"));
    if (base) {
        b.base = init_token_denoiser(*base, enc.latent, derive_seed(seed, "init.base"));
    }
    return b;
}

// ---- lambda embedding ----

Tensor lambda_embedding(double lambda, int dim) {
    if (dim < 2 || dim % 2 != 0) {
        throw std::invalid_argument("lambda_embedding: dim must be even and >= 2");
    }
    if (!std::isfinite(lambda)) {
        throw std::invalid_argument("lambda_embedding: lambda must be finite");
    }
    Tensor e = Tensor::zeros({1, dim});
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        // geometric frequency ladder from 1 down to 1/100, suited to |lambda| <= ~20
        const double freq =
            half == 1 ? 1.0 : std::pow(100.0, -static_cast<double>(k) / (half - 1));
        e.data[static_cast<size_t>(2 * k)] = std::sin(freq * lambda);
        e.data[static_cast<size_t>(2 * k + 1)] = std::cos(freq * lambda);
    }
    return e;
}

// ---- graph builders ----

EncodeOut encode_g(Graph& g, Bindings& p, const EncoderConfig& cfg, Ref x) {
    const int L = static_cast<int>(cfg.widths.size());
    Ref t = x;
    if (cfg.patch > 1) t = g.space_to_depth(t, cfg.patch);
    t = conv(g, p, "stem", t);
    for (int i = 0; i < L; ++i) {
        if (i > 0) {
            t = conv(g, p, "down" + std::to_string(i), g.space_to_depth(t, 2));
        }
        for (int j = 0; j < cfg.blocks; ++j) {
            t = resblock(g, p, "s" + std::to_string(i) + "b" + std::to_string(j), t, 0.0, nullptr);
        }
    }
    EncodeOut out;
    out.mean = conv(g, p, "head", t);
    if (cfg.learned_variance) {
        out.log_sigma = conv(g, p, "sighead", t);
        out.has_sigma = true;
    }
    return out;
}

Ref denoise_tokens_g(Graph& g, Bindings& p, const DenoiserConfig& cfg, const LatentSpec& latent,
                     Ref z_t, double lambda, Rng* dropout) {
    const int n = g.val(z_t).shape[0];
    const int T = latent.h * latent.w;
    Ref h = g.reshape(z_t, {n, T, latent.c});
    h = lin(g, p, "in", h);
    h = add_lambda_cond(g, p, "emb", lambda, cfg.lambda_embed_dim, h);
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string base = "b" + std::to_string(b);
        Ref u = lnorm(g, p, base + "ln1", h);
        u = g.transpose_12(u);                 // [N, d, T]
        u = lin(g, p, base + "tmix", u);       // mix across token positions
        u = g.transpose_12(u);
        h = g.add(h, u);
        Ref v = lnorm(g, p, base + "ln2", h);
        v = g.silu(lin(g, p, base + "m1", v));
        if (dropout != nullptr && cfg.dropout_rate > 0.0) {
            const double keep = 1.0 - cfg.dropout_rate;
            Tensor mask = Tensor::zeros(g.val(v).shape);
            for (double& mv : mask.data) mv = dropout->uniform() < keep ? 1.0 / keep : 0.0;
            v = g.mul(v, g.input(std::move(mask)));
        }
        v = lin(g, p, base + "m2", v);
        h = g.add(h, v);
    }
    h = lnorm(g, p, "lnf", h);
    h = lin(g, p, "out", h);
    return g.reshape(h, {n, latent.h, latent.w, latent.c});
}

Ref denoise_decoder_g(Graph& g, Bindings& p, const DenoiserConfig& cfg, const EncoderConfig& enc,
                      Ref x_t, Ref z0, double lambda, Rng* dropout) {
    const int L = static_cast<int>(cfg.widths.size());
    const int f = decoder_upsample_factor(cfg, enc);
    Ref t = conv(g, p, "stem", x_t);
    t = add_lambda_cond(g, p, "emb0", lambda, cfg.lambda_embed_dim, t);
    std::vector<Ref> skips;
    for (int i = 0; i + 1 < L; ++i) {
        for (int j = 0; j < cfg.blocks; ++j) {
            t = resblock(g, p, "d" + std::to_string(i) + "b" + std::to_string(j), t,
                         cfg.dropout_rate, dropout);
        }
        skips.push_back(t);
        t = conv(g, p, "down" + std::to_string(i + 1), g.space_to_depth(t, 2));
    }
    Ref z = (f > 1) ? g.upsample_nearest(z0, f) : z0;
    t = conv(g, p, "inject", g.concat_last(t, z));
    t = add_lambda_cond(g, p, "embb", lambda, cfg.lambda_embed_dim, t);
    for (int j = 0; j < cfg.blocks; ++j) {
        t = resblock(g, p, "bb" + std::to_string(j), t, cfg.dropout_rate, dropout);
    }
    for (int i = L - 1; i >= 1; --i) {
        t = conv(g, p, "up" + std::to_string(i), g.upsample_nearest(t, 2));
        t = conv(g, p, "fuse" + std::to_string(i), g.concat_last(t, skips[static_cast<size_t>(i - 1)]));
        for (int j = 0; j < cfg.blocks; ++j) {
            t = resblock(g, p, "u" + std::to_string(i - 1) + "b" + std::to_string(j), t,
                         cfg.dropout_rate, dropout);
        }
    }
    return conv(g, p, "head", t);
}

// ---- plain evaluation wrappers ----

Tensor encode(const ModelBundle& bundle, const Tensor& x) {
    require_finite(x, "encode");
    require_shape(x, {bundle.enc_cfg.image_h, bundle.enc_cfg.image_w, bundle.enc_cfg.image_c},
                  "encode");
    Graph g;
    Bindings p(g, bundle.eval_params(bundle.enc, bundle.enc_ema), false);
    return g.val(encode_g(g, p, bundle.enc_cfg, g.input(x)).mean);
}

Tensor encode_sigma(const ModelBundle& bundle, const Tensor& x) {
    if (!bundle.enc_cfg.learned_variance) {
        throw std::invalid_argument("encode_sigma: encoder has no learned-variance head");
    }
    require_finite(x, "encode_sigma");
    require_shape(x, {bundle.enc_cfg.image_h, bundle.enc_cfg.image_w, bundle.enc_cfg.image_c},
                  "encode_sigma");
    Graph g;
    Bindings p(g, bundle.eval_params(bundle.enc, bundle.enc_ema), false);
    EncodeOut out = encode_g(g, p, bundle.enc_cfg, g.input(x));
    return g.val(g.exp(out.log_sigma));
}

Tensor denoise_prior(const ModelBundle& bundle, const Tensor& z_t, double lambda) {
    require_finite(z_t, "denoise_prior");
    const LatentSpec& ls = bundle.enc_cfg.latent;
    require_shape(z_t, {ls.h, ls.w, ls.c}, "denoise_prior");
    require_lambda_in(bundle.prior_schedule, lambda, "denoise_prior");
    Graph g;
    Bindings p(g, bundle.eval_params(bundle.prior, bundle.prior_ema), false);
    return g.val(denoise_tokens_g(g, p, bundle.prior_cfg, ls, g.input(z_t), lambda));
}

Tensor denoise_base(const ModelBundle& bundle, const Tensor& z_t, double lambda) {
    if (!bundle.base_cfg || bundle.base.empty()) {
        throw std::invalid_argument("denoise_base: bundle has no trained base model");
    }
    require_finite(z_t, "denoise_base");
    const LatentSpec& ls = bundle.enc_cfg.latent;
    require_shape(z_t, {ls.h, ls.w, ls.c}, "denoise_base");
    require_lambda_in(bundle.prior_schedule, lambda, "denoise_base");
    Graph g;
    Bindings p(g, bundle.eval_params(bundle.base, bundle.base_ema), false);
    return g.val(denoise_tokens_g(g, p, *bundle.base_cfg, ls, g.input(z_t), lambda));
}

Tensor denoise_decoder(const ModelBundle& bundle, const Tensor& x_t, const Tensor& z0,
                       double lambda) {
    require_finite(x_t, "denoise_decoder");
    require_finite(z0, "denoise_decoder");
    require_shape(x_t, {bundle.enc_cfg.image_h, bundle.enc_cfg.image_w, bundle.enc_cfg.image_c},
                  "denoise_decoder");
    const LatentSpec& ls = bundle.enc_cfg.latent;
    require_shape(z0, {ls.h, ls.w, ls.c}, "denoise_decoder");
    if (x_t.shape[0] != z0.shape[0]) {
        throw std::invalid_argument("denoise_decoder: x_t and z0 batch sizes differ");
    }
    require_lambda_in(bundle.decoder_schedule, lambda, "denoise_decoder");
    Graph g;
    Bindings p(g, bundle.eval_params(bundle.dec, bundle.dec_ema), false);
    return g.val(
        denoise_decoder_g(g, p, bundle.dec_cfg, bundle.enc_cfg, g.input(x_t), g.input(z0), lambda));
}

}  // namespace ul
