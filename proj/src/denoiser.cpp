#include "xar/denoiser.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "xar/errors.hpp"

namespace xar {

// ============================================================================
// Config, parameters, masks, geometry
// ============================================================================

void DenoiserConfig::validate() const {
    auto fail = [](const std::string& m) { throw DomainError("denoiser config: " + m); };
    if (depth < 1 || width < 1 || heads < 1 || token_dim < 1 || max_tokens < 1 || mlp_ratio < 1) {
        fail("sizes must be positive");
    }
    if (width % heads != 0) {
        fail("width must be divisible by heads");
    }
    if (width % 4 != 0) {
        fail("width must be divisible by 4 for 2-D positions");
    }
    if (time_freq_dim < 2 || time_freq_dim % 2 != 0) {
        fail("time_freq_dim must be even and >= 2");
    }
    for (double r : {dropout, attn_dropout, label_dropout}) {
        if (!(r >= 0.0 && r < 1.0)) {
            fail("dropout rates must lie in [0, 1)");
        }
    }
}

std::size_t ParamSet::add(std::string name, std::size_t rows, std::size_t cols, bool decay) {
    ParamInfo info{std::move(name), values_.size(), rows, cols, decay};
    values_.resize(values_.size() + info.size(), 0.0);
    grads_.resize(values_.size(), 0.0);
    infos_.push_back(std::move(info));
    return infos_.size() - 1;
}

std::optional<std::size_t> ParamSet::find(const std::string& name) const {
    for (std::size_t i = 0; i < infos_.size(); ++i) {
        if (infos_[i].name == name) {
            return i;
        }
    }
    return std::nullopt;
}

void ParamSet::zero_grad() {
    std::fill(grads_.begin(), grads_.end(), 0.0);
}

std::size_t AttentionMask::count_true() const {
    return static_cast<std::size_t>(std::count(allow.begin(), allow.end(), std::uint8_t{1}));
}

AttentionMask build_block_causal_mask(const std::vector<TokenSpan>& spans) {
    std::size_t expected = 0;
    for (const TokenSpan& s : spans) {
        if (s.offset < expected) {
            throw MaskError("entity spans overlap at token " + std::to_string(s.offset));
        }
        if (s.offset > expected) {
            throw MaskError("entity spans leave a gap before token " + std::to_string(s.offset));
        }
        expected = s.offset + s.count;
    }
    AttentionMask m{expected, std::vector<std::uint8_t>(expected * expected, 0)};
    for (const TokenSpan& s : spans) {
        const std::size_t visible = s.offset + s.count;
        for (std::size_t q = s.offset; q < visible; ++q) {
            std::fill_n(m.allow.begin() + static_cast<std::ptrdiff_t>(q * expected), visible, std::uint8_t{1});
        }
    }
    return m;
}

void SequenceGeometry::set_mask(AttentionMask m) {
    mask = std::move(m);
    keys.assign(mask.size, {});
    for (std::size_t q = 0; q < mask.size; ++q) {
        for (std::size_t k = 0; k < mask.size; ++k) {
            if (mask(q, k)) {
                keys[q].push_back(static_cast<std::uint32_t>(k));
            }
        }
    }
}

Matrix sinusoidal_positions(const std::vector<std::pair<double, double>>& coords, std::size_t width) {
    const std::size_t quarter = width / 4;
    Matrix out(coords.size(), width);
    for (std::size_t t = 0; t < coords.size(); ++t) {
        const double axis[2] = {coords[t].first, coords[t].second};
        for (std::size_t a = 0; a < 2; ++a) {
            for (std::size_t k = 0; k < quarter; ++k) {
                const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(quarter));
                out(t, a * 2 * quarter + k) = std::sin(axis[a] * freq);
                out(t, a * 2 * quarter + quarter + k) = std::cos(axis[a] * freq);
            }
        }
    }
    return out;
}

std::vector<double> timestep_embedding(double t, std::size_t dim) {
    const std::size_t half = dim / 2;
    std::vector<double> out(dim);
    const double x = 1000.0 * t;
    for (std::size_t k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
        out[k] = std::cos(x * freq);
        out[half + k] = std::sin(x * freq);
    }
    return out;
}

SequenceGeometry single_stream_geometry(const EntityLayout& layout, std::size_t width) {
    SequenceGeometry g;
    g.tokens = layout.total_tokens();
    g.blocks = layout.spans();
    g.token_block.resize(g.tokens);
    for (std::size_t b = 0; b < g.blocks.size(); ++b) {
        for (std::size_t i = 0; i < g.blocks[b].count; ++i) {
            g.token_block[g.blocks[b].offset + i] = b;
        }
        g.block_entity.push_back(b);
    }
    g.positions = sinusoidal_positions(layout.token_coordinates(), width);
    g.set_mask(build_block_causal_mask(layout.spans()));
    return g;
}

SequenceGeometry dual_stream_geometry(const EntityLayout& layout, std::size_t width) {
    const std::size_t T = layout.total_tokens();
    const std::size_t N = layout.entity_count();
    const auto& spans = layout.spans();
    SequenceGeometry g;
    g.tokens = 2 * T;
    g.token_block.resize(2 * T);
    for (std::size_t stream = 0; stream < 2; ++stream) {
        for (std::size_t n = 0; n < N; ++n) {
            g.blocks.push_back({stream * T + spans[n].offset, spans[n].count});
            g.block_entity.push_back(n);
            for (std::size_t i = 0; i < spans[n].count; ++i) {
                g.token_block[stream * T + spans[n].offset + i] = stream * N + n;
            }
        }
    }
    const Matrix pos = sinusoidal_positions(layout.token_coordinates(), width);
    g.positions = vstack(pos, pos);
    AttentionMask m{2 * T, std::vector<std::uint8_t>(4 * T * T, 0)};
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t ctx_visible = spans[n].offset + spans[n].count;
        for (std::size_t i = 0; i < spans[n].count; ++i) {
            const std::size_t qc = spans[n].offset + i;
            const std::size_t qt = T + spans[n].offset + i;
            for (std::size_t k = 0; k < ctx_visible; ++k) {
                m.allow[qc * 2 * T + k] = 1;
            }
            for (std::size_t k = 0; k < spans[n].offset; ++k) {
                m.allow[qt * 2 * T + k] = 1;
            }
            for (std::size_t k = 0; k < spans[n].count; ++k) {
                m.allow[qt * 2 * T + T + spans[n].offset + k] = 1;
            }
        }
    }
    g.set_mask(std::move(m));
    return g;
}

// ============================================================================
// Model construction
// ============================================================================

DenoiserModel::DenoiserModel(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const std::size_t w = config_.width;
    const std::size_t c = config_.token_dim;
    const std::size_t m = w * config_.mlp_ratio;
    Index& ix = index_;
    ix.in_w = params_.add("input.weight", c, w, true);
    ix.in_b = params_.add("input.bias", 1, w, false);
    ix.entity_emb = params_.add("entity_embedding", config_.max_tokens, w, false);
    ix.class_emb = params_.add("class_embedding", config_.num_classes + 1, w, false);
    ix.t1_w = params_.add("time.fc1.weight", config_.time_freq_dim, w, true);
    ix.t1_b = params_.add("time.fc1.bias", 1, w, false);
    ix.t2_w = params_.add("time.fc2.weight", w, w, true);
    ix.t2_b = params_.add("time.fc2.bias", 1, w, false);
    for (std::size_t l = 0; l < config_.depth; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        LayerIndex li{};
        li.mod_w = params_.add(p + "ada.weight", w, 6 * w, true);
        li.mod_b = params_.add(p + "ada.bias", 1, 6 * w, false);
        li.qkv_w = params_.add(p + "attn.qkv.weight", w, 3 * w, true);
        li.qkv_b = params_.add(p + "attn.qkv.bias", 1, 3 * w, false);
        li.proj_w = params_.add(p + "attn.proj.weight", w, w, true);
        li.proj_b = params_.add(p + "attn.proj.bias", 1, w, false);
        li.fc1_w = params_.add(p + "mlp.fc1.weight", w, m, true);
        li.fc1_b = params_.add(p + "mlp.fc1.bias", 1, m, false);
        li.fc2_w = params_.add(p + "mlp.fc2.weight", m, w, true);
        li.fc2_b = params_.add(p + "mlp.fc2.bias", 1, w, false);
        ix.layers.push_back(li);
    }
    ix.final_mod_w = params_.add("final.ada.weight", w, 2 * w, true);
    ix.final_mod_b = params_.add("final.ada.bias", 1, 2 * w, false);
    ix.out_w = params_.add("final.out.weight", w, c, true);
    ix.out_b = params_.add("final.out.bias", 1, c, false);

    // Xavier-uniform linear weights, N(0, 0.02) embeddings, zero biases.
    // The output projection stays zero so a fresh model predicts zero velocity.
    Rng rng(seed);
    for (std::size_t i = 0; i < params_.infos().size(); ++i) {
        const ParamInfo& info = params_.infos()[i];
        auto v = params_.value(i);
        if (i == ix.out_w || i == ix.out_b) {
            continue;
        }
        if (i == ix.entity_emb || i == ix.class_emb) {
            for (double& x : v) {
                x = 0.02 * rng.normal();
            }
        } else if (info.decay) {
            const double a = std::sqrt(6.0 / static_cast<double>(info.rows + info.cols));
            for (double& x : v) {
                x = a * (2.0 * rng.uniform() - 1.0);
            }
        }
    }
}

// ============================================================================
// Elementwise helpers
// ============================================================================

namespace {

constexpr double kLnEps = 1e-6;

double silu(double x) {
    return x / (1.0 + std::exp(-x));
}
double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}
double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double th = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

Matrix map(const Matrix& x, double (*f)(double)) {
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        out.data[i] = f(x.data[i]);
    }
    return out;
}

// Row-wise layer norm without affine parameters.
void layer_norm(const Matrix& x, Matrix& out, std::vector<double>& rstd) {
    out = Matrix(x.rows, x.cols);
    rstd.assign(x.rows, 0.0);
    const double n = static_cast<double>(x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
        auto xr = x.row(r);
        double mean = 0.0;
        for (double v : xr) {
            mean += v;
        }
        mean /= n;
        double var = 0.0;
        for (double v : xr) {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        rstd[r] = rs;
        auto o = out.row(r);
        for (std::size_t j = 0; j < x.cols; ++j) {
            o[j] = (xr[j] - mean) * rs;
        }
    }
}

// dx for y = layer_norm(x), given y and rstd.
void layer_norm_backward(const Matrix& dy, const Matrix& y, const std::vector<double>& rstd, Matrix& dx_accum) {
    const double n = static_cast<double>(y.cols);
    for (std::size_t r = 0; r < y.rows; ++r) {
        auto g = dy.row(r);
        auto yr = y.row(r);
        double mg = 0.0;
        double mgy = 0.0;
        for (std::size_t j = 0; j < y.cols; ++j) {
            mg += g[j];
            mgy += g[j] * yr[j];
        }
        mg /= n;
        mgy /= n;
        auto d = dx_accum.row(r);
        for (std::size_t j = 0; j < y.cols; ++j) {
            d[j] += rstd[r] * (g[j] - mg - yr[j] * mgy);
        }
    }
}

// Per-block modulation vectors live in `mod` rows [batch * nb, k * width];
// chunk selects one width-sized slice.
struct ModView {
    const Matrix* mod;
    std::size_t width;
    std::size_t chunk;
    const double* at(std::size_t block_row) const {
        return mod->data.data() + block_row * mod->cols + chunk * width;
    }
};

}  // namespace

// ============================================================================
// Forward engine
// ============================================================================

struct LayerCache {
    Matrix h_in;
    Matrix n1;
    std::vector<double> rstd1;
    Matrix m1;
    Matrix qkv;
    std::vector<double> probs;      // [batch, heads, tq, tk], zero where masked
    std::vector<double> attn_drop;  // same layout, multipliers; empty when unused
    Matrix attn;                    // concatenated head outputs
    Matrix proj;
    Matrix proj_drop;               // multipliers; empty when unused
    Matrix h_mid;
    Matrix n2;
    std::vector<double> rstd2;
    Matrix m2;
    Matrix u;
    Matrix g;
    Matrix z;
    Matrix z_drop;
};

struct ForwardCache {
    std::size_t batch = 0;
    std::size_t tq = 0;
    std::size_t nb = 0;
    const SequenceGeometry* geom = nullptr;
    std::vector<std::size_t> class_rows;  // per sample, after label dropout
    Matrix tfreq;
    Matrix c1;
    Matrix a1;
    Matrix cond;
    Matrix scond;
    std::vector<Matrix> mod;
    Matrix fmod;
    Matrix x;
    std::vector<LayerCache> layers;
    Matrix h_final;
    Matrix nf;
    std::vector<double> rstdf;
    Matrix mf;
};

ForwardTape::ForwardTape() : cache_(new ForwardCache) {}
ForwardTape::~ForwardTape() {
    delete cache_;
}
ForwardTape::ForwardTape(ForwardTape&& o) noexcept : cache_(o.cache_) {
    o.cache_ = nullptr;
}
ForwardTape& ForwardTape::operator=(ForwardTape&& o) noexcept {
    std::swap(cache_, o.cache_);
    return *this;
}

namespace {

// Query rows for one engine call. Keys for local query i index the
// concatenation [prefix (P rows per sample) | query rows (tq per sample)].
struct EngineInput {
    const Matrix* tokens = nullptr;                          // [batch * tq, c]
    std::size_t batch = 0;
    std::size_t tq = 0;
    const std::vector<std::size_t>* row_block = nullptr;     // [tq]
    std::size_t nb = 0;
    const std::vector<std::size_t>* block_entity = nullptr;  // [nb]
    const Matrix* positions = nullptr;                       // [tq, width]
    const std::vector<std::vector<std::uint32_t>>* keys = nullptr;
    const double* times = nullptr;                           // [batch * nb]
    const int* labels = nullptr;                             // [batch]
    std::size_t prefix = 0;
    const std::vector<Matrix>* prefix_k = nullptr;           // per layer [batch * prefix, width]
    const std::vector<Matrix>* prefix_v = nullptr;
};

Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, Rng& rng) {
    Matrix m(rows, cols);
    const double keep = 1.0 / (1.0 - p);
    for (double& v : m.data) {
        v = rng.uniform() < p ? 0.0 : keep;
    }
    return m;
}

void hadamard_inplace(Matrix& x, const Matrix& mask) {
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        x.data[i] *= mask.data[i];
    }
}

// x * (1 + scale[block]) + shift[block], row by row.
void modulate(const Matrix& x, const Matrix& mod, std::size_t shift_chunk, std::size_t scale_chunk,
              const std::vector<std::size_t>& row_block, std::size_t tq, std::size_t nb, Matrix& out) {
    const std::size_t w = x.cols;
    out = Matrix(x.rows, w);
    const ModView shift{&mod, w, shift_chunk};
    const ModView scale{&mod, w, scale_chunk};
    for (std::size_t r = 0; r < x.rows; ++r) {
        const std::size_t br = (r / tq) * nb + row_block[r % tq];
        const double* sh = shift.at(br);
        const double* sc = scale.at(br);
        auto xr = x.row(r);
        auto o = out.row(r);
        for (std::size_t j = 0; j < w; ++j) {
            o[j] = xr[j] * (1.0 + sc[j]) + sh[j];
        }
    }
}

void gated_residual(Matrix& h, const Matrix& delta, const Matrix& mod, std::size_t gate_chunk,
                    const std::vector<std::size_t>& row_block, std::size_t tq, std::size_t nb) {
    const std::size_t w = h.cols;
    const ModView gate{&mod, w, gate_chunk};
    for (std::size_t r = 0; r < h.rows; ++r) {
        const double* gt = gate.at((r / tq) * nb + row_block[r % tq]);
        auto hr = h.row(r);
        auto dr = delta.row(r);
        for (std::size_t j = 0; j < w; ++j) {
            hr[j] += gt[j] * dr[j];
        }
    }
}

Matrix run_engine(const DenoiserModel& model, const EngineInput& in, const ForwardOptions& opts,
                  ForwardCache* cache, std::vector<Matrix>* kv_out) {
    const DenoiserConfig& cfg = model.config();
    const ParamSet& P = model.params();
    const auto& ix = model.index();
    const std::size_t w = cfg.width;
    const std::size_t H = cfg.heads;
    const std::size_t dh = w / H;
    const std::size_t B = in.batch;
    const std::size_t tq = in.tq;
    const std::size_t nb = in.nb;
    const std::size_t R = B * tq;
    const std::size_t tk = in.prefix + tq;
    const bool train = opts.train;
    const bool any_dropout = train && (cfg.dropout > 0.0 || cfg.attn_dropout > 0.0 || cfg.label_dropout > 0.0);
    if (any_dropout && opts.rng == nullptr) {
        throw DomainError("forward: train mode with dropout needs an rng");
    }
    if (in.tokens->rows != R || in.tokens->cols != cfg.token_dim) {
        throw DomainError("forward: token matrix shape does not match batch and token_dim");
    }
    for (std::size_t e : *in.block_entity) {
        if (e >= cfg.max_tokens) {
            throw DomainError("forward: entity index exceeds max_tokens");
        }
    }

    ForwardCache local;
    ForwardCache& C = cache ? *cache : local;
    C.batch = B;
    C.tq = tq;
    C.nb = nb;

    // ---- conditioning: per (sample, block) vectors
    C.class_rows.assign(B, cfg.null_class());
    for (std::size_t b = 0; b < B; ++b) {
        const int lab = in.labels[b];
        if (lab >= static_cast<int>(cfg.num_classes)) {
            throw DomainError("forward: label " + std::to_string(lab) + " >= num_classes");
        }
        std::size_t row = (lab < 0) ? cfg.null_class() : static_cast<std::size_t>(lab);
        if (train && cfg.label_dropout > 0.0 && opts.rng->uniform() < cfg.label_dropout) {
            row = cfg.null_class();
        }
        C.class_rows[b] = row;
    }
    C.tfreq = Matrix(B * nb, cfg.time_freq_dim);
    for (std::size_t r = 0; r < B * nb; ++r) {
        const double t = in.times[r];
        if (!(t >= 0.0 && t <= 1.0)) {
            throw DomainError("forward: time outside [0, 1]");
        }
        const auto e = timestep_embedding(t, cfg.time_freq_dim);
        std::copy(e.begin(), e.end(), C.tfreq.row(r).begin());
    }
    matmul(C.tfreq, P.value(ix.t1_w), P.value(ix.t1_b), w, C.c1);
    C.a1 = map(C.c1, silu);
    matmul(C.a1, P.value(ix.t2_w), P.value(ix.t2_b), w, C.cond);
    {
        auto cls = P.value(ix.class_emb);
        for (std::size_t r = 0; r < B * nb; ++r) {
            const double* e = cls.data() + C.class_rows[r / nb] * w;
            auto cr = C.cond.row(r);
            for (std::size_t j = 0; j < w; ++j) {
                cr[j] += e[j];
            }
        }
    }
    C.scond = map(C.cond, silu);
    C.mod.resize(cfg.depth);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        matmul(C.scond, P.value(ix.layers[l].mod_w), P.value(ix.layers[l].mod_b), 6 * w, C.mod[l]);
    }
    matmul(C.scond, P.value(ix.final_mod_w), P.value(ix.final_mod_b), 2 * w, C.fmod);

    // ---- token embedding
    C.x = *in.tokens;
    Matrix h;
    matmul(C.x, P.value(ix.in_w), P.value(ix.in_b), w, h);
    {
        auto ent = P.value(ix.entity_emb);
        for (std::size_t r = 0; r < R; ++r) {
            const std::size_t q = r % tq;
            const double* e = ent.data() + (*in.block_entity)[(*in.row_block)[q]] * w;
            auto pr = in.positions->row(q);
            auto hr = h.row(r);
            for (std::size_t j = 0; j < w; ++j) {
                hr[j] += pr[j] + e[j];
            }
        }
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool keep_cache = cache != nullptr;
    if (keep_cache && in.prefix != 0) {
        throw DomainError("forward: backward tape is not supported with a cached prefix");
    }
    C.layers.assign(keep_cache ? cfg.depth : 0, {});
    if (kv_out) {
        kv_out->assign(2 * cfg.depth, {});
    }
    std::vector<double> scores(tk);

    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const auto& li = ix.layers[l];
        LayerCache tmp;
        LayerCache& L = keep_cache ? C.layers[l] : tmp;
        const Matrix& mod = C.mod[l];
        if (keep_cache) {
            L.h_in = h;
        }
        layer_norm(h, L.n1, L.rstd1);
        modulate(L.n1, mod, 0, 1, *in.row_block, tq, nb, L.m1);
        matmul(L.m1, P.value(li.qkv_w), P.value(li.qkv_b), 3 * w, L.qkv);
        if (kv_out) {
            Matrix k(R, w);
            Matrix v(R, w);
            for (std::size_t r = 0; r < R; ++r) {
                std::copy_n(L.qkv.row(r).begin() + static_cast<std::ptrdiff_t>(w), w, k.row(r).begin());
                std::copy_n(L.qkv.row(r).begin() + static_cast<std::ptrdiff_t>(2 * w), w, v.row(r).begin());
            }
            (*kv_out)[2 * l] = std::move(k);
            (*kv_out)[2 * l + 1] = std::move(v);
        }

        // ---- masked multi-head attention
        const bool attn_drop = train && cfg.attn_dropout > 0.0;
        L.attn = Matrix(R, w);
        if (keep_cache) {
            L.probs.assign(B * H * tq * tk, 0.0);
            L.attn_drop.assign(attn_drop ? B * H * tq * tk : 0, 1.0);
        }
        const Matrix* pk = in.prefix ? &(*in.prefix_k)[l] : nullptr;
        const Matrix* pv = in.prefix ? &(*in.prefix_v)[l] : nullptr;
        auto key_row = [&](std::size_t b, std::size_t j) -> const double* {
            if (j < in.prefix) {
                return pk->data.data() + (b * in.prefix + j) * w;
            }
            return L.qkv.data.data() + (b * tq + (j - in.prefix)) * 3 * w + w;
        };
        auto value_row = [&](std::size_t b, std::size_t j) -> const double* {
            if (j < in.prefix) {
                return pv->data.data() + (b * in.prefix + j) * w;
            }
            return L.qkv.data.data() + (b * tq + (j - in.prefix)) * 3 * w + 2 * w;
        };
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t hd = 0; hd < H; ++hd) {
                for (std::size_t i = 0; i < tq; ++i) {
                    const auto& kl = (*in.keys)[i];
                    const double* q = L.qkv.data.data() + (b * tq + i) * 3 * w + hd * dh;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t a = 0; a < kl.size(); ++a) {
                        const double* k = key_row(b, kl[a]) + hd * dh;
                        double s = 0.0;
                        for (std::size_t d = 0; d < dh; ++d) {
                            s += q[d] * k[d];
                        }
                        scores[a] = s * scale;
                        mx = std::max(mx, scores[a]);
                    }
                    double sum = 0.0;
                    for (std::size_t a = 0; a < kl.size(); ++a) {
                        scores[a] = std::exp(scores[a] - mx);
                        sum += scores[a];
                    }
                    double* o = L.attn.data.data() + (b * tq + i) * w + hd * dh;
                    const std::size_t base = ((b * H + hd) * tq + i) * tk;
                    for (std::size_t a = 0; a < kl.size(); ++a) {
                        const double p = scores[a] / sum;
                        double pd = p;
                        if (attn_drop) {
                            const double keep = opts.rng->uniform() < cfg.attn_dropout ? 0.0 : 1.0 / (1.0 - cfg.attn_dropout);
                            pd = p * keep;
                            if (keep_cache) {
                                L.attn_drop[base + kl[a]] = keep;
                            }
                        }
                        if (keep_cache) {
                            L.probs[base + kl[a]] = p;
                        }
                        const double* v = value_row(b, kl[a]) + hd * dh;
                        for (std::size_t d = 0; d < dh; ++d) {
                            o[d] += pd * v[d];
                        }
                    }
                }
            }
        }
        matmul(L.attn, P.value(li.proj_w), P.value(li.proj_b), w, L.proj);
        Matrix delta = L.proj;
        if (train && cfg.dropout > 0.0) {
            L.proj_drop = dropout_mask(R, w, cfg.dropout, *opts.rng);
            hadamard_inplace(delta, L.proj_drop);
        }
        gated_residual(h, delta, mod, 2, *in.row_block, tq, nb);
        if (keep_cache) {
            L.h_mid = h;
        }

        // ---- MLP
        layer_norm(h, L.n2, L.rstd2);
        modulate(L.n2, mod, 3, 4, *in.row_block, tq, nb, L.m2);
        matmul(L.m2, P.value(li.fc1_w), P.value(li.fc1_b), w * cfg.mlp_ratio, L.u);
        L.g = map(L.u, gelu);
        matmul(L.g, P.value(li.fc2_w), P.value(li.fc2_b), w, L.z);
        Matrix delta2 = L.z;
        if (train && cfg.dropout > 0.0) {
            L.z_drop = dropout_mask(R, w, cfg.dropout, *opts.rng);
            hadamard_inplace(delta2, L.z_drop);
        }
        gated_residual(h, delta2, mod, 5, *in.row_block, tq, nb);
    }

    // ---- final adaptive norm and projection
    Matrix nf;
    std::vector<double> rstdf;
    Matrix mf;
    layer_norm(h, nf, rstdf);
    modulate(nf, C.fmod, 0, 1, *in.row_block, tq, nb, mf);
    Matrix out;
    matmul(mf, P.value(ix.out_w), P.value(ix.out_b), cfg.token_dim, out);
    if (keep_cache) {
        C.h_final = std::move(h);
        C.nf = std::move(nf);
        C.rstdf = std::move(rstdf);
        C.mf = std::move(mf);
    }
    return out;
}

// dx * (1 + scale) and scale / shift gradients for a modulate() call.
void modulate_backward(const Matrix& dm, const Matrix& x, const Matrix& mod, Matrix& dmod, std::size_t shift_chunk,
                       std::size_t scale_chunk, const std::vector<std::size_t>& row_block, std::size_t tq,
                       std::size_t nb, Matrix& dx) {
    const std::size_t w = x.cols;
    dx = Matrix(x.rows, w);
    for (std::size_t r = 0; r < x.rows; ++r) {
        const std::size_t br = (r / tq) * nb + row_block[r % tq];
        const double* sc = mod.data.data() + br * mod.cols + scale_chunk * w;
        double* dsh = dmod.data.data() + br * dmod.cols + shift_chunk * w;
        double* dsc = dmod.data.data() + br * dmod.cols + scale_chunk * w;
        auto g = dm.row(r);
        auto xr = x.row(r);
        auto d = dx.row(r);
        for (std::size_t j = 0; j < w; ++j) {
            d[j] = g[j] * (1.0 + sc[j]);
            dsc[j] += g[j] * xr[j];
            dsh[j] += g[j];
        }
    }
}

// Gradient through h += gate * delta: returns d(delta), accumulates d(gate).
Matrix gated_residual_backward(const Matrix& dh, const Matrix& delta, const Matrix& mod, Matrix& dmod,
                               std::size_t gate_chunk, const std::vector<std::size_t>& row_block, std::size_t tq,
                               std::size_t nb) {
    const std::size_t w = dh.cols;
    Matrix dd(dh.rows, w);
    for (std::size_t r = 0; r < dh.rows; ++r) {
        const std::size_t br = (r / tq) * nb + row_block[r % tq];
        const double* gt = mod.data.data() + br * mod.cols + gate_chunk * w;
        double* dg = dmod.data.data() + br * dmod.cols + gate_chunk * w;
        auto g = dh.row(r);
        auto dr = delta.row(r);
        auto o = dd.row(r);
        for (std::size_t j = 0; j < w; ++j) {
            o[j] = g[j] * gt[j];
            dg[j] += g[j] * dr[j];
        }
    }
    return dd;
}

}  // namespace

Matrix forward_batch(const DenoiserModel& model, const SequenceGeometry& geom, const BatchInput& input,
                     const ForwardOptions& opts, ForwardCache* cache) {
    if (input.labels.size() != input.batch) {
        throw DomainError("forward: need one label per batch element");
    }
    if (input.times.size() != input.batch * geom.blocks.size()) {
        throw DomainError("forward: need one time per entity block");
    }
    EngineInput in;
    in.tokens = &input.tokens;
    in.batch = input.batch;
    in.tq = geom.tokens;
    in.row_block = &geom.token_block;
    in.nb = geom.blocks.size();
    in.block_entity = &geom.block_entity;
    in.positions = &geom.positions;
    in.keys = &geom.keys;
    in.times = input.times.data();
    in.labels = input.labels.data();
    if (cache) {
        cache->geom = &geom;
    }
    return run_engine(model, in, opts, cache, nullptr);
}

void backward(DenoiserModel& model, const ForwardCache& C, const Matrix& d_out) {
    const DenoiserConfig& cfg = model.config();
    ParamSet& P = model.params();
    const auto& ix = model.index();
    const SequenceGeometry& geom = *C.geom;
    const std::size_t w = cfg.width;
    const std::size_t H = cfg.heads;
    const std::size_t hdim = w / H;
    const std::size_t B = C.batch;
    const std::size_t tq = C.tq;
    const std::size_t nb = C.nb;
    const std::size_t R = B * tq;
    const auto& rb = geom.token_block;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hdim));

    // ---- output head
    matmul_grad_params(C.mf, d_out, P.grad(ix.out_w), P.grad(ix.out_b));
    Matrix dmf;
    matmul_grad_input(d_out, P.value(ix.out_w), w, dmf);
    Matrix dfmod(B * nb, 2 * w);
    Matrix dnf;
    modulate_backward(dmf, C.nf, C.fmod, dfmod, 0, 1, rb, tq, nb, dnf);
    Matrix dh(R, w);
    layer_norm_backward(dnf, C.nf, C.rstdf, dh);

    Matrix dscond(B * nb, w);
    for (std::size_t l = cfg.depth; l-- > 0;) {
        const auto& li = ix.layers[l];
        const LayerCache& L = C.layers[l];
        const Matrix& mod = C.mod[l];
        Matrix dmod(B * nb, 6 * w);

        // h_out = h_mid + gate2 * drop(z)
        Matrix z_used = L.z;
        if (!L.z_drop.data.empty()) {
            hadamard_inplace(z_used, L.z_drop);
        }
        Matrix dz = gated_residual_backward(dh, z_used, mod, dmod, 5, rb, tq, nb);
        if (!L.z_drop.data.empty()) {
            hadamard_inplace(dz, L.z_drop);
        }
        matmul_grad_params(L.g, dz, P.grad(li.fc2_w), P.grad(li.fc2_b));
        Matrix dg;
        matmul_grad_input(dz, P.value(li.fc2_w), w * cfg.mlp_ratio, dg);
        for (std::size_t i = 0; i < dg.data.size(); ++i) {
            dg.data[i] *= gelu_grad(L.u.data[i]);
        }
        matmul_grad_params(L.m2, dg, P.grad(li.fc1_w), P.grad(li.fc1_b));
        Matrix dm2;
        matmul_grad_input(dg, P.value(li.fc1_w), w, dm2);
        Matrix dn2;
        modulate_backward(dm2, L.n2, mod, dmod, 3, 4, rb, tq, nb, dn2);
        layer_norm_backward(dn2, L.n2, L.rstd2, dh);  // dh now holds d(h_mid)

        // h_mid = h_in + gate1 * drop(proj)
        Matrix p_used = L.proj;
        if (!L.proj_drop.data.empty()) {
            hadamard_inplace(p_used, L.proj_drop);
        }
        Matrix dproj = gated_residual_backward(dh, p_used, mod, dmod, 2, rb, tq, nb);
        if (!L.proj_drop.data.empty()) {
            hadamard_inplace(dproj, L.proj_drop);
        }
        matmul_grad_params(L.attn, dproj, P.grad(li.proj_w), P.grad(li.proj_b));
        Matrix dattn;
        matmul_grad_input(dproj, P.value(li.proj_w), w, dattn);

        // attention
        Matrix dqkv(R, 3 * w);
        const bool dropped = !L.attn_drop.empty();
        std::vector<double> dp(tq);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t hd = 0; hd < H; ++hd) {
                for (std::size_t i = 0; i < tq; ++i) {
                    const auto& kl = geom.keys[i];
                    const std::size_t base = ((b * H + hd) * tq + i) * tq;
                    const double* dout = dattn.data.data() + (b * tq + i) * w + hd * hdim;
                    const double* q = L.qkv.data.data() + (b * tq + i) * 3 * w + hd * hdim;
                    double* dq = dqkv.data.data() + (b * tq + i) * 3 * w + hd * hdim;
                    double dot = 0.0;
                    dp.assign(kl.size(), 0.0);
                    for (std::size_t a = 0; a < kl.size(); ++a) {
                        const std::size_t j = kl[a];
                        const double* v = L.qkv.data.data() + (b * tq + j) * 3 * w + 2 * w + hd * hdim;
                        double* dv = dqkv.data.data() + (b * tq + j) * 3 * w + 2 * w + hd * hdim;
                        const double keep = dropped ? L.attn_drop[base + j] : 1.0;
                        const double pd = L.probs[base + j] * keep;
                        double g = 0.0;
                        for (std::size_t d = 0; d < hdim; ++d) {
                            g += dout[d] * v[d];
                            dv[d] += pd * dout[d];
                        }
                        dp[a] = g * keep;
                        dot += dp[a] * L.probs[base + j];
                    }
                    for (std::size_t a = 0; a < kl.size(); ++a) {
                        const std::size_t j = kl[a];
                        const double ds = L.probs[base + j] * (dp[a] - dot) * scale;
                        const double* k = L.qkv.data.data() + (b * tq + j) * 3 * w + w + hd * hdim;
                        double* dk = dqkv.data.data() + (b * tq + j) * 3 * w + w + hd * hdim;
                        for (std::size_t d = 0; d < hdim; ++d) {
                            dq[d] += ds * k[d];
                            dk[d] += ds * q[d];
                        }
                    }
                }
            }
        }
        matmul_grad_params(L.m1, dqkv, P.grad(li.qkv_w), P.grad(li.qkv_b));
        Matrix dm1;
        matmul_grad_input(dqkv, P.value(li.qkv_w), w, dm1);
        Matrix dn1;
        modulate_backward(dm1, L.n1, mod, dmod, 0, 1, rb, tq, nb, dn1);
        layer_norm_backward(dn1, L.n1, L.rstd1, dh);  // dh now holds d(h_in)

        matmul_grad_params(C.scond, dmod, P.grad(li.mod_w), P.grad(li.mod_b));
        Matrix ds;
        matmul_grad_input(dmod, P.value(li.mod_w), w, ds);
        for (std::size_t i = 0; i < ds.data.size(); ++i) {
            dscond.data[i] += ds.data[i];
        }
    }

    // ---- token embedding
    matmul_grad_params(C.x, dh, P.grad(ix.in_w), P.grad(ix.in_b));
    {
        auto dent = P.grad(ix.entity_emb);
        for (std::size_t r = 0; r < R; ++r) {
            double* e = dent.data() + geom.block_entity[rb[r % tq]] * w;
            auto g = dh.row(r);
            for (std::size_t j = 0; j < w; ++j) {
                e[j] += g[j];
            }
        }
    }

    // ---- conditioning path
    matmul_grad_params(C.scond, dfmod, P.grad(ix.final_mod_w), P.grad(ix.final_mod_b));
    {
        Matrix ds;
        matmul_grad_input(dfmod, P.value(ix.final_mod_w), w, ds);
        for (std::size_t i = 0; i < ds.data.size(); ++i) {
            dscond.data[i] += ds.data[i];
        }
    }
    Matrix dcond = dscond;
    for (std::size_t i = 0; i < dcond.data.size(); ++i) {
        dcond.data[i] *= silu_grad(C.cond.data[i]);
    }
    {
        auto dcls = P.grad(ix.class_emb);
        for (std::size_t r = 0; r < B * nb; ++r) {
            double* e = dcls.data() + C.class_rows[r / nb] * w;
            auto g = dcond.row(r);
            for (std::size_t j = 0; j < w; ++j) {
                e[j] += g[j];
            }
        }
    }
    matmul_grad_params(C.a1, dcond, P.grad(ix.t2_w), P.grad(ix.t2_b));
    Matrix da1;
    matmul_grad_input(dcond, P.value(ix.t2_w), w, da1);
    for (std::size_t i = 0; i < da1.data.size(); ++i) {
        da1.data[i] *= silu_grad(C.c1.data[i]);
    }
    matmul_grad_params(C.tfreq, da1, P.grad(ix.t1_w), P.grad(ix.t1_b));
}

EntitySequence forward(const DenoiserModel& model, const EntitySequence& noisy, const TimeVector& times,
                       std::optional<int> label, const AttentionMask& mask, bool train_mode, Rng& rng) {
    if (times.size() != noisy.layout.entity_count()) {
        throw DomainError("forward: times length must equal entity count");
    }
    if (mask.size != noisy.layout.total_tokens()) {
        throw DomainError("forward: mask size does not match sequence");
    }
    SequenceGeometry geom = single_stream_geometry(noisy.layout, model.config().width);
    geom.set_mask(mask);
    BatchInput in{noisy.tokens, times, {label.value_or(kNullLabel)}, 1};
    ForwardOptions opts{train_mode, &rng};
    return EntitySequence{forward_batch(model, geom, in, opts), noisy.layout};
}

Matrix cfg_combine(const Matrix& v_cond, const Matrix& v_uncond, double w) {
    if (!v_cond.same_shape(v_uncond)) {
        throw DomainError("cfg_combine: shape mismatch");
    }
    Matrix out(v_cond.rows, v_cond.cols);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = v_uncond.data[i] + w * (v_cond.data[i] - v_uncond.data[i]);
    }
    return out;
}

// ============================================================================
// Incremental decoding
// ============================================================================

IncrementalDecoder::IncrementalDecoder(const DenoiserModel& model, const EntityLayout& layout,
                                       std::vector<int> labels)
    : model_(model), layout_(layout), labels_(std::move(labels)) {
    const DenoiserConfig& cfg = model.config();
    if (layout.grid().c != cfg.token_dim) {
        throw DomainError("layout channel count " + std::to_string(layout.grid().c) + " != model token_dim " +
                          std::to_string(cfg.token_dim));
    }
    if (layout.total_tokens() > cfg.max_tokens || layout.entity_count() > cfg.max_tokens) {
        throw DomainError("layout has more tokens than the model's max_tokens");
    }
    if (labels_.empty()) {
        throw DomainError("decoder needs a non-empty batch");
    }
    positions_ = sinusoidal_positions(layout.token_coordinates(), cfg.width);
    keys_.assign(cfg.depth, Matrix(0, cfg.width));
    values_.assign(cfg.depth, Matrix(0, cfg.width));
}

Matrix IncrementalDecoder::run(const Matrix& rows, double t, std::vector<Matrix>* kv_out) const {
    if (done_ >= layout_.entity_count()) {
        throw DomainError("decoder: all entities already generated");
    }
    const TokenSpan span = layout_.spans()[done_];
    const std::size_t B = labels_.size();
    if (rows.rows != B * span.count) {
        throw DomainError("decoder: rows do not match the next entity's size");
    }
    // Same key order as a full block-causal forward: prefix tokens, then own tokens.
    std::vector<std::vector<std::uint32_t>> keys(span.count);
    for (auto& k : keys) {
        k.resize(prefix_tokens_ + span.count);
        for (std::size_t j = 0; j < k.size(); ++j) {
            k[j] = static_cast<std::uint32_t>(j);
        }
    }
    const std::vector<std::size_t> row_block(span.count, 0);
    const std::vector<std::size_t> block_entity{done_};
    const Matrix pos = rows_slice(positions_, span.offset, span.count);
    const std::vector<double> times(B, t);
    EngineInput in;
    in.tokens = &rows;
    in.batch = B;
    in.tq = span.count;
    in.row_block = &row_block;
    in.nb = 1;
    in.block_entity = &block_entity;
    in.positions = &pos;
    in.keys = &keys;
    in.times = times.data();
    in.labels = labels_.data();
    in.prefix = prefix_tokens_;
    in.prefix_k = &keys_;
    in.prefix_v = &values_;
    return run_engine(model_, in, ForwardOptions{}, nullptr, kv_out);
}

Matrix IncrementalDecoder::velocity(const Matrix& current, double t) const {
    return run(current, t, nullptr);
}

void IncrementalDecoder::append_clean(const Matrix& entity_tokens) {
    std::vector<Matrix> kv;
    run(entity_tokens, 0.0, &kv);
    const std::size_t B = labels_.size();
    const std::size_t count = layout_.spans()[done_].count;
    const std::size_t w = model_.config().width;
    const std::size_t np = prefix_tokens_ + count;
    for (std::size_t l = 0; l < model_.config().depth; ++l) {
        for (int which = 0; which < 2; ++which) {
            Matrix& store = which == 0 ? keys_[l] : values_[l];
            const Matrix& fresh = kv[2 * l + static_cast<std::size_t>(which)];
            Matrix grown(B * np, w);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t p = 0; p < prefix_tokens_; ++p) {
                    std::copy_n(store.row(b * prefix_tokens_ + p).begin(), w, grown.row(b * np + p).begin());
                }
                for (std::size_t p = 0; p < count; ++p) {
                    std::copy_n(fresh.row(b * count + p).begin(), w, grown.row(b * np + prefix_tokens_ + p).begin());
                }
            }
            store = std::move(grown);
        }
    }
    prefix_tokens_ = np;
    ++done_;
}

}  // namespace xar
