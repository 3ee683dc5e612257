#include "noisear/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace noisear {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Y[S x out] = X[S x in] * W^T + b, W row-major [out][in]
void linear_fwd(const double* x, std::size_t s_len, std::size_t in, const double* w,
                const double* b, std::size_t out, double* y) {
    for (std::size_t s = 0; s < s_len; ++s)
        for (std::size_t o = 0; o < out; ++o)
            y[s * out + o] = dot(w + o * in, x + s * in, in) + b[o];
}

// Accumulates dW, db and (optionally) dX.
void linear_bwd(const double* x, const double* dy, std::size_t s_len, std::size_t in,
                std::size_t out, const double* w, double* dx, double* dw, double* db) {
    for (std::size_t s = 0; s < s_len; ++s) {
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dy[s * out + o];
            if (g == 0.0) continue;
            db[o] += g;
            axpy(g, x + s * in, dw + o * in, in);
            if (dx) axpy(g, w + o * in, dx + s * in, in);
        }
    }
}

void layernorm_fwd(const double* x, std::size_t s_len, std::size_t d, const double* gain,
                   const double* bias, double* y, double* mean_out, double* rstd_out) {
    for (std::size_t s = 0; s < s_len; ++s) {
        const double* row = x + s * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += row[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = row[i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        mean_out[s] = mean;
        rstd_out[s] = rstd;
        double* yrow = y + s * d;
        for (std::size_t i = 0; i < d; ++i)
            yrow[i] = gain[i] * (row[i] - mean) * rstd + bias[i];
    }
}

// dx accumulated; dgain/dbias accumulated.
void layernorm_bwd(const double* x, const double* dy, std::size_t s_len, std::size_t d,
                   const double* gain, const double* mean, const double* rstd, double* dx,
                   double* dgain, double* dbias) {
    for (std::size_t s = 0; s < s_len; ++s) {
        const double* row = x + s * d;
        const double* dyrow = dy + s * d;
        const double m = mean[s];
        const double r = rstd[s];
        double sum_t = 0.0, sum_tx = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (row[i] - m) * r;
            const double t = dyrow[i] * gain[i];
            dgain[i] += dyrow[i] * xhat;
            dbias[i] += dyrow[i];
            sum_t += t;
            sum_tx += t * xhat;
        }
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (row[i] - m) * r;
            const double t = dyrow[i] * gain[i];
            dx[s * d + i] += r * (t - sum_t * inv_d - xhat * sum_tx * inv_d);
        }
    }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_deriv(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
           x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

std::vector<double> sinusoidal_table(std::size_t len, std::size_t d) {
    std::vector<double> table(len * d);
    for (std::size_t p = 0; p < len; ++p) {
        for (std::size_t i = 0; i < d; ++i) {
            const std::size_t pair = i / 2;
            const double angle =
                static_cast<double>(p) /
                std::pow(10000.0, static_cast<double>(2 * pair) / static_cast<double>(d));
            table[p * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return table;
}

// Entry-index layout of the tensor table.
constexpr std::size_t kEntryPatchW = 0;
constexpr std::size_t kEntryPatchB = 1;
constexpr std::size_t kEntryStart = 2;
constexpr std::size_t kEntryCond = 3;
constexpr std::size_t kLayerBase = 4;
constexpr std::size_t kPerLayer = 26;
// per-layer entry offsets
enum LayerEntry {
    LN1_G, LN1_B,
    SELF_WQ, SELF_BQ, SELF_WK, SELF_BK, SELF_WV, SELF_BV, SELF_WO, SELF_BO,
    LN2_G, LN2_B,
    CROSS_WQ, CROSS_BQ, CROSS_WK, CROSS_BK, CROSS_WV, CROSS_BV, CROSS_WO, CROSS_BO,
    LN3_G, LN3_B,
    FFN_W1, FFN_B1, FFN_W2, FFN_B2,
};

}  // namespace

void ModelConfig::validate() const {
    shape.validate();
    require(d_model >= 1 && n_heads >= 1, "d_model and n_heads must be >= 1");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(n_decoder_layers >= 1, "need at least one decoder layer");
    require(n_head_layers >= 1, "need at least one head layer");
    require(ffn_mult >= 1, "ffn_mult must be >= 1");
    require(vocab_size >= 1, "vocab_size must be >= 1");
    require(cond_max_len >= 1, "cond_max_len must be >= 1");
    require(log_var_clamp_lo < log_var_clamp_hi, "log_var clamp lo must be < hi");
}

Model::Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    build_table();
    positional_ = sinusoidal_table(config_.shape.num_patches() + 1, config_.d_model);
    cond_positional_ = sinusoidal_table(config_.cond_max_len, config_.d_model);
}

void Model::build_table() {
    const std::size_t d = config_.d_model;
    const std::size_t k = config_.shape.patch_elems();
    const std::size_t dff = config_.ffn_mult * d;

    std::size_t offset = 0;
    auto add = [&](const std::string& name, std::vector<std::size_t> shape) {
        std::size_t size = 1;
        for (std::size_t s : shape) size *= s;
        table_.push_back({name, std::move(shape), offset, size});
        offset += size;
    };

    add("patch_embed.weight", {d, k});
    add("patch_embed.bias", {d});
    add("start_token", {d});
    add("cond_embed.weight", {config_.vocab_size, d});
    for (std::size_t l = 0; l < config_.n_decoder_layers; ++l) {
        const std::string p = "decoder." + std::to_string(l) + ".";
        add(p + "ln1.gain", {d});
        add(p + "ln1.bias", {d});
        add(p + "self.wq", {d, d});
        add(p + "self.bq", {d});
        add(p + "self.wk", {d, d});
        add(p + "self.bk", {d});
        add(p + "self.wv", {d, d});
        add(p + "self.bv", {d});
        add(p + "self.wo", {d, d});
        add(p + "self.bo", {d});
        add(p + "ln2.gain", {d});
        add(p + "ln2.bias", {d});
        add(p + "cross.wq", {d, d});
        add(p + "cross.bq", {d});
        add(p + "cross.wk", {d, d});
        add(p + "cross.bk", {d});
        add(p + "cross.wv", {d, d});
        add(p + "cross.bv", {d});
        add(p + "cross.wo", {d, d});
        add(p + "cross.bo", {d});
        add(p + "ln3.gain", {d});
        add(p + "ln3.bias", {d});
        add(p + "ffn.w1", {dff, d});
        add(p + "ffn.b1", {dff});
        add(p + "ffn.w2", {d, dff});
        add(p + "ffn.b2", {d});
    }
    for (std::size_t h = 0; h < config_.n_head_layers; ++h) {
        const std::string p = "head." + std::to_string(h) + ".";
        add(p + "weight", {d, d});
        add(p + "bias", {d});
    }
    add("head.final.weight", {2 * k, d});
    add("head.final.bias", {2 * k});

    params_.assign(offset, 0.0);
}

Model Model::init_params(const ModelConfig& config) {
    Model m(config);
    Rng rng(config.seed);
    const std::size_t d = config.d_model;
    for (const TensorEntry& e : m.table_) {
        double* p = m.params_.data() + e.offset;
        if (e.name.find(".gain") != std::string::npos) {
            std::fill(p, p + e.size, 1.0);
            continue;
        }
        if (e.shape.size() == 1 && e.name != "start_token") {
            // biases and normalization offsets start at zero
            continue;
        }
        std::size_t fan_in = (e.shape.size() == 2) ? e.shape[1] : d;
        if (e.name == "cond_embed.weight" || e.name == "start_token") fan_in = d;
        const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
        for (std::size_t i = 0; i < e.size; ++i) p[i] = rng.uniform(-bound, bound);
        // keep the fresh prior close to N(0, I)
        if (e.name == "head.final.weight")
            for (std::size_t i = 0; i < e.size; ++i) p[i] *= 0.01;
    }
    return m;
}

namespace {
// offsets into params for entry index
inline const double* P(const std::vector<double>& params,
                       const std::vector<TensorEntry>& table, std::size_t idx) {
    return params.data() + table[idx].offset;
}
inline double* G(std::vector<double>& grad, const std::vector<TensorEntry>& table,
                 std::size_t idx) {
    return grad.data() + table[idx].offset;
}
}  // namespace

void Model::validate_condition(const Condition& c) const {
    require(!c.tokens.empty(), "condition must be nonempty");
    require(c.tokens.size() <= config_.cond_max_len, "condition too long");
    for (auto t : c.tokens)
        require(t < config_.vocab_size, "condition token out of vocabulary");
}

std::vector<std::vector<double>> Model::encode_condition(const Condition& c) const {
    validate_condition(c);
    const std::size_t d = config_.d_model;
    const double* table = P(params_, table_, kEntryCond);
    std::vector<std::vector<double>> out(c.tokens.size(), std::vector<double>(d));
    for (std::size_t i = 0; i < c.tokens.size(); ++i) {
        const double* row = table + static_cast<std::size_t>(c.tokens[i]) * d;
        for (std::size_t j = 0; j < d; ++j)
            out[i][j] = row[j] + cond_positional_[i * d + j];
    }
    return out;
}

std::vector<GaussianParams> Model::forward_teacher_forced(const PatchSequence& s,
                                                          const Condition& c,
                                                          Tape* tape) const {
    require(s.shape == config_.shape, "patch sequence shape does not match model config");
    s.validate();
    validate_condition(c);

    const std::size_t m = config_.shape.num_patches();
    const std::size_t k = config_.shape.patch_elems();
    const std::size_t d = config_.d_model;
    const std::size_t seq = m + 1;
    const std::size_t heads = config_.n_heads;
    const std::size_t dh = d / heads;
    const std::size_t dff = config_.ffn_mult * d;
    const std::size_t cl = c.tokens.size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // embedded input
    std::vector<double> x(seq * d);
    {
        const double* start = P(params_, table_, kEntryStart);
        const double* pw = P(params_, table_, kEntryPatchW);
        const double* pb = P(params_, table_, kEntryPatchB);
        for (std::size_t i = 0; i < d; ++i) x[i] = start[i] + positional_[i];
        for (std::size_t j = 0; j < m; ++j) {
            double* row = x.data() + (j + 1) * d;
            const double* patch = s.patches[j].data();
            for (std::size_t o = 0; o < d; ++o)
                row[o] = dot(pw + o * k, patch, k) + pb[o] + positional_[(j + 1) * d + o];
        }
    }

    // condition vectors
    std::vector<double> u(cl * d);
    {
        auto vecs = encode_condition(c);
        for (std::size_t i = 0; i < cl; ++i)
            std::copy(vecs[i].begin(), vecs[i].end(), u.begin() + i * d);
    }

    if (tape) {
        tape->seq_len = seq;
        tape->cond_len = cl;
        tape->cond_tokens = c.tokens;
        tape->patches.resize(m * k);
        for (std::size_t j = 0; j < m; ++j)
            std::copy(s.patches[j].begin(), s.patches[j].end(), tape->patches.begin() + j * k);
        tape->cond_u = u;
        tape->x0 = x;
        tape->layers.assign(config_.n_decoder_layers, Tape::Layer{});
    }

    std::vector<double> a(seq * d), q(seq * d), kk(seq * d), vv(seq * d);
    std::vector<double> mean(seq), rstd(seq);
    std::vector<double> concat(seq * d), proj(seq * d);
    std::vector<double> cq(seq * d), ck(cl * d), cv(cl * d);
    std::vector<double> ffn_pre(seq * dff), ffn_act(seq * dff);

    for (std::size_t l = 0; l < config_.n_decoder_layers; ++l) {
        const std::size_t base = kLayerBase + l * kPerLayer;
        Tape::Layer* tl = tape ? &tape->layers[l] : nullptr;
        if (tl) tl->x_in = x;

        // --- masked self-attention ---
        layernorm_fwd(x.data(), seq, d, P(params_, table_, base + LN1_G),
                      P(params_, table_, base + LN1_B), a.data(), mean.data(), rstd.data());
        if (tl) { tl->a1 = a; tl->ln1_mean = mean; tl->ln1_rstd = rstd; }
        linear_fwd(a.data(), seq, d, P(params_, table_, base + SELF_WQ),
                   P(params_, table_, base + SELF_BQ), d, q.data());
        linear_fwd(a.data(), seq, d, P(params_, table_, base + SELF_WK),
                   P(params_, table_, base + SELF_BK), d, kk.data());
        linear_fwd(a.data(), seq, d, P(params_, table_, base + SELF_WV),
                   P(params_, table_, base + SELF_BV), d, vv.data());
        if (tl) { tl->q = q; tl->k = kk; tl->v = vv; }

        std::vector<double> probs(heads * seq * seq, 0.0);
        std::fill(concat.begin(), concat.end(), 0.0);
        std::vector<double> scores(seq);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t ho = h * dh;
            for (std::size_t i = 0; i < seq; ++i) {
                const std::size_t limit = causal_mask_ ? i + 1 : seq;
                double mx = -1e300;
                for (std::size_t j2 = 0; j2 < limit; ++j2) {
                    scores[j2] = scale * dot(q.data() + i * d + ho, kk.data() + j2 * d + ho, dh);
                    mx = std::max(mx, scores[j2]);
                }
                double z = 0.0;
                for (std::size_t j2 = 0; j2 < limit; ++j2) {
                    scores[j2] = std::exp(scores[j2] - mx);
                    z += scores[j2];
                }
                double* prow = probs.data() + (h * seq + i) * seq;
                double* crow = concat.data() + i * d + ho;
                for (std::size_t j2 = 0; j2 < limit; ++j2) {
                    const double p = scores[j2] / z;
                    prow[j2] = p;
                    axpy(p, vv.data() + j2 * d + ho, crow, dh);
                }
            }
        }
        if (tl) { tl->probs = probs; tl->attn_concat = concat; }
        linear_fwd(concat.data(), seq, d, P(params_, table_, base + SELF_WO),
                   P(params_, table_, base + SELF_BO), d, proj.data());
        for (std::size_t i = 0; i < seq * d; ++i) x[i] += proj[i];
        if (tl) tl->x_self = x;

        // --- cross-attention to the condition ---
        layernorm_fwd(x.data(), seq, d, P(params_, table_, base + LN2_G),
                      P(params_, table_, base + LN2_B), a.data(), mean.data(), rstd.data());
        if (tl) { tl->a2 = a; tl->ln2_mean = mean; tl->ln2_rstd = rstd; }
        linear_fwd(a.data(), seq, d, P(params_, table_, base + CROSS_WQ),
                   P(params_, table_, base + CROSS_BQ), d, cq.data());
        linear_fwd(u.data(), cl, d, P(params_, table_, base + CROSS_WK),
                   P(params_, table_, base + CROSS_BK), d, ck.data());
        linear_fwd(u.data(), cl, d, P(params_, table_, base + CROSS_WV),
                   P(params_, table_, base + CROSS_BV), d, cv.data());
        if (tl) { tl->cq = cq; tl->ck = ck; tl->cv = cv; }

        std::vector<double> cprobs(heads * seq * cl);
        std::fill(concat.begin(), concat.end(), 0.0);
        std::vector<double> cscores(cl);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t ho = h * dh;
            for (std::size_t i = 0; i < seq; ++i) {
                double mx = -1e300;
                for (std::size_t j2 = 0; j2 < cl; ++j2) {
                    cscores[j2] = scale * dot(cq.data() + i * d + ho, ck.data() + j2 * d + ho, dh);
                    mx = std::max(mx, cscores[j2]);
                }
                double z = 0.0;
                for (std::size_t j2 = 0; j2 < cl; ++j2) {
                    cscores[j2] = std::exp(cscores[j2] - mx);
                    z += cscores[j2];
                }
                double* prow = cprobs.data() + (h * seq + i) * cl;
                double* crow = concat.data() + i * d + ho;
                for (std::size_t j2 = 0; j2 < cl; ++j2) {
                    const double p = cscores[j2] / z;
                    prow[j2] = p;
                    axpy(p, cv.data() + j2 * d + ho, crow, dh);
                }
            }
        }
        if (tl) { tl->cprobs = cprobs; tl->cattn_concat = concat; }
        linear_fwd(concat.data(), seq, d, P(params_, table_, base + CROSS_WO),
                   P(params_, table_, base + CROSS_BO), d, proj.data());
        for (std::size_t i = 0; i < seq * d; ++i) x[i] += proj[i];
        if (tl) tl->x_cross = x;

        // --- feed-forward ---
        layernorm_fwd(x.data(), seq, d, P(params_, table_, base + LN3_G),
                      P(params_, table_, base + LN3_B), a.data(), mean.data(), rstd.data());
        if (tl) { tl->a3 = a; tl->ln3_mean = mean; tl->ln3_rstd = rstd; }
        linear_fwd(a.data(), seq, d, P(params_, table_, base + FFN_W1),
                   P(params_, table_, base + FFN_B1), dff, ffn_pre.data());
        for (std::size_t i = 0; i < seq * dff; ++i) ffn_act[i] = gelu(ffn_pre[i]);
        if (tl) { tl->ffn_pre = ffn_pre; tl->ffn_act = ffn_act; }
        linear_fwd(ffn_act.data(), seq, dff, P(params_, table_, base + FFN_W2),
                   P(params_, table_, base + FFN_B2), d, proj.data());
        for (std::size_t i = 0; i < seq * d; ++i) x[i] += proj[i];
    }
    if (tape) tape->x_final = x;

    // --- prediction head on positions 0..M-1 ---
    const std::size_t head_base = kLayerBase + config_.n_decoder_layers * kPerLayer;
    const std::size_t final_w = head_base + 2 * config_.n_head_layers;
    if (tape) {
        tape->head_pre.assign(config_.n_head_layers, std::vector<double>(m * d));
        tape->raw_out.assign(m * 2 * k, 0.0);
    }
    std::vector<GaussianParams> out(m);
    std::vector<double> z(d), pre(d);
    for (std::size_t j = 0; j < m; ++j) {
        std::copy(x.begin() + j * d, x.begin() + (j + 1) * d, z.begin());
        for (std::size_t hlayer = 0; hlayer < config_.n_head_layers; ++hlayer) {
            linear_fwd(z.data(), 1, d, P(params_, table_, head_base + 2 * hlayer),
                       P(params_, table_, head_base + 2 * hlayer + 1), d, pre.data());
            if (tape)
                std::copy(pre.begin(), pre.end(), tape->head_pre[hlayer].begin() + j * d);
            for (std::size_t i = 0; i < d; ++i) z[i] = gelu(pre[i]);
        }
        std::vector<double> raw(2 * k);
        linear_fwd(z.data(), 1, d, P(params_, table_, final_w),
                   P(params_, table_, final_w + 1), 2 * k, raw.data());
        if (tape) std::copy(raw.begin(), raw.end(), tape->raw_out.begin() + j * 2 * k);
        out[j].mean.assign(raw.begin(), raw.begin() + k);
        out[j].log_var.resize(k);
        for (std::size_t i = 0; i < k; ++i)
            out[j].log_var[i] = std::clamp(raw[k + i], config_.log_var_clamp_lo,
                                           config_.log_var_clamp_hi);
    }
    return out;
}

GaussianParams Model::predict_params(const std::vector<double>& hidden) const {
    const std::size_t d = config_.d_model;
    const std::size_t k = config_.shape.patch_elems();
    require(hidden.size() == d, "hidden vector length mismatch");
    const std::size_t head_base = kLayerBase + config_.n_decoder_layers * kPerLayer;
    const std::size_t final_w = head_base + 2 * config_.n_head_layers;
    std::vector<double> z = hidden, pre(d);
    for (std::size_t hlayer = 0; hlayer < config_.n_head_layers; ++hlayer) {
        linear_fwd(z.data(), 1, d, P(params_, table_, head_base + 2 * hlayer),
                   P(params_, table_, head_base + 2 * hlayer + 1), d, pre.data());
        for (std::size_t i = 0; i < d; ++i) z[i] = gelu(pre[i]);
    }
    std::vector<double> raw(2 * k);
    linear_fwd(z.data(), 1, d, P(params_, table_, final_w),
               P(params_, table_, final_w + 1), 2 * k, raw.data());
    GaussianParams out;
    out.mean.assign(raw.begin(), raw.begin() + k);
    out.log_var.resize(k);
    for (std::size_t i = 0; i < k; ++i)
        out.log_var[i] =
            std::clamp(raw[k + i], config_.log_var_clamp_lo, config_.log_var_clamp_hi);
    return out;
}

void Model::backward(const Tape& tape, const std::vector<double>& d_mean,
                     const std::vector<double>& d_log_var,
                     std::vector<double>& grad) const {
    const std::size_t m = config_.shape.num_patches();
    const std::size_t k = config_.shape.patch_elems();
    const std::size_t d = config_.d_model;
    const std::size_t seq = m + 1;
    const std::size_t heads = config_.n_heads;
    const std::size_t dh = d / heads;
    const std::size_t dff = config_.ffn_mult * d;
    const std::size_t cl = tape.cond_len;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    require(d_mean.size() == m * k && d_log_var.size() == m * k,
            "gradient input length mismatch");
    require(grad.size() == params_.size(), "gradient buffer size mismatch");

    const std::size_t head_base = kLayerBase + config_.n_decoder_layers * kPerLayer;
    const std::size_t final_w = head_base + 2 * config_.n_head_layers;

    std::vector<double> dx(seq * d, 0.0);

    // --- head backward ---
    {
        std::vector<double> z(d), pre(d), dz(d), dpre(d), draw(2 * k);
        for (std::size_t j = 0; j < m; ++j) {
            // recompute head-layer outputs from the taped pre-activations
            for (std::size_t i = 0; i < 2 * k; ++i) {
                const double raw = tape.raw_out[j * 2 * k + i];
                if (i < k) {
                    draw[i] = d_mean[j * k + i];
                } else {
                    const bool clamped = raw <= config_.log_var_clamp_lo ||
                                         raw >= config_.log_var_clamp_hi;
                    draw[i] = clamped ? 0.0 : d_log_var[j * k + (i - k)];
                }
            }
            // input to final linear = gelu of last head-layer pre-activation
            const double* last_pre =
                tape.head_pre[config_.n_head_layers - 1].data() + j * d;
            for (std::size_t i = 0; i < d; ++i) z[i] = gelu(last_pre[i]);
            std::fill(dz.begin(), dz.end(), 0.0);
            linear_bwd(z.data(), draw.data(), 1, d, 2 * k, P(params_, table_, final_w),
                       dz.data(), G(grad, table_, final_w), G(grad, table_, final_w + 1));
            for (std::size_t hlayer = config_.n_head_layers; hlayer-- > 0;) {
                const double* hpre = tape.head_pre[hlayer].data() + j * d;
                for (std::size_t i = 0; i < d; ++i) dpre[i] = dz[i] * gelu_deriv(hpre[i]);
                // input to this head layer
                if (hlayer == 0) {
                    std::copy(tape.x_final.begin() + j * d, tape.x_final.begin() + (j + 1) * d,
                              z.begin());
                } else {
                    const double* prev = tape.head_pre[hlayer - 1].data() + j * d;
                    for (std::size_t i = 0; i < d; ++i) z[i] = gelu(prev[i]);
                }
                std::fill(dz.begin(), dz.end(), 0.0);
                linear_bwd(z.data(), dpre.data(), 1, d, d,
                           P(params_, table_, head_base + 2 * hlayer), dz.data(),
                           G(grad, table_, head_base + 2 * hlayer),
                           G(grad, table_, head_base + 2 * hlayer + 1));
            }
            axpy(1.0, dz.data(), dx.data() + j * d, d);
        }
    }

    std::vector<double> du(cl * d, 0.0);
    std::vector<double> buf(seq * d), buf2(seq * d);

    for (std::size_t l = config_.n_decoder_layers; l-- > 0;) {
        const std::size_t base = kLayerBase + l * kPerLayer;
        const Tape::Layer& tl = tape.layers[l];

        // --- feed-forward backward ---
        {
            std::vector<double> dact(seq * dff, 0.0), dpre(seq * dff);
            // dx is gradient at layer output; residual passes it to x_cross too
            linear_bwd(tl.ffn_act.data(), dx.data(), seq, dff, d,
                       P(params_, table_, base + FFN_W2), dact.data(),
                       G(grad, table_, base + FFN_W2), G(grad, table_, base + FFN_B2));
            for (std::size_t i = 0; i < seq * dff; ++i)
                dpre[i] = dact[i] * gelu_deriv(tl.ffn_pre[i]);
            std::fill(buf.begin(), buf.end(), 0.0);  // d_a3
            linear_bwd(tl.a3.data(), dpre.data(), seq, d, dff,
                       P(params_, table_, base + FFN_W1), buf.data(),
                       G(grad, table_, base + FFN_W1), G(grad, table_, base + FFN_B1));
            layernorm_bwd(tl.x_cross.data(), buf.data(), seq, d,
                          P(params_, table_, base + LN3_G), tl.ln3_mean.data(),
                          tl.ln3_rstd.data(), dx.data(), G(grad, table_, base + LN3_G),
                          G(grad, table_, base + LN3_B));
        }

        // --- cross-attention backward ---
        {
            std::fill(buf.begin(), buf.end(), 0.0);  // d_cattn_concat
            linear_bwd(tl.cattn_concat.data(), dx.data(), seq, d, d,
                       P(params_, table_, base + CROSS_WO), buf.data(),
                       G(grad, table_, base + CROSS_WO), G(grad, table_, base + CROSS_BO));
            std::vector<double> dcq(seq * d, 0.0), dck(cl * d, 0.0), dcv(cl * d, 0.0);
            std::vector<double> dp(cl), ds(cl);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t ho = h * dh;
                for (std::size_t i = 0; i < seq; ++i) {
                    const double* dctx = buf.data() + i * d + ho;
                    const double* prow = tl.cprobs.data() + (h * seq + i) * cl;
                    double dot_pp = 0.0;
                    for (std::size_t j2 = 0; j2 < cl; ++j2) {
                        dp[j2] = dot(dctx, tl.cv.data() + j2 * d + ho, dh);
                        axpy(prow[j2], dctx, dcv.data() + j2 * d + ho, dh);
                        dot_pp += dp[j2] * prow[j2];
                    }
                    for (std::size_t j2 = 0; j2 < cl; ++j2) {
                        ds[j2] = prow[j2] * (dp[j2] - dot_pp);
                        axpy(ds[j2] * scale, tl.ck.data() + j2 * d + ho,
                             dcq.data() + i * d + ho, dh);
                        axpy(ds[j2] * scale, tl.cq.data() + i * d + ho,
                             dck.data() + j2 * d + ho, dh);
                    }
                }
            }
            std::fill(buf2.begin(), buf2.end(), 0.0);  // d_a2
            linear_bwd(tl.a2.data(), dcq.data(), seq, d, d,
                       P(params_, table_, base + CROSS_WQ), buf2.data(),
                       G(grad, table_, base + CROSS_WQ), G(grad, table_, base + CROSS_BQ));
            linear_bwd(tape.cond_u.data(), dck.data(), cl, d, d,
                       P(params_, table_, base + CROSS_WK), du.data(),
                       G(grad, table_, base + CROSS_WK), G(grad, table_, base + CROSS_BK));
            linear_bwd(tape.cond_u.data(), dcv.data(), cl, d, d,
                       P(params_, table_, base + CROSS_WV), du.data(),
                       G(grad, table_, base + CROSS_WV), G(grad, table_, base + CROSS_BV));
            layernorm_bwd(tl.x_self.data(), buf2.data(), seq, d,
                          P(params_, table_, base + LN2_G), tl.ln2_mean.data(),
                          tl.ln2_rstd.data(), dx.data(), G(grad, table_, base + LN2_G),
                          G(grad, table_, base + LN2_B));
        }

        // --- masked self-attention backward ---
        {
            std::fill(buf.begin(), buf.end(), 0.0);  // d_attn_concat
            linear_bwd(tl.attn_concat.data(), dx.data(), seq, d, d,
                       P(params_, table_, base + SELF_WO), buf.data(),
                       G(grad, table_, base + SELF_WO), G(grad, table_, base + SELF_BO));
            std::vector<double> dq(seq * d, 0.0), dk(seq * d, 0.0), dv(seq * d, 0.0);
            std::vector<double> dp(seq), ds(seq);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t ho = h * dh;
                for (std::size_t i = 0; i < seq; ++i) {
                    const std::size_t limit = causal_mask_ ? i + 1 : seq;
                    const double* dctx = buf.data() + i * d + ho;
                    const double* prow = tl.probs.data() + (h * seq + i) * seq;
                    double dot_pp = 0.0;
                    for (std::size_t j2 = 0; j2 < limit; ++j2) {
                        dp[j2] = dot(dctx, tl.v.data() + j2 * d + ho, dh);
                        axpy(prow[j2], dctx, dv.data() + j2 * d + ho, dh);
                        dot_pp += dp[j2] * prow[j2];
                    }
                    for (std::size_t j2 = 0; j2 < limit; ++j2) {
                        ds[j2] = prow[j2] * (dp[j2] - dot_pp);
                        axpy(ds[j2] * scale, tl.k.data() + j2 * d + ho,
                             dq.data() + i * d + ho, dh);
                        axpy(ds[j2] * scale, tl.q.data() + i * d + ho,
                             dk.data() + j2 * d + ho, dh);
                    }
                }
            }
            std::fill(buf2.begin(), buf2.end(), 0.0);  // d_a1
            linear_bwd(tl.a1.data(), dq.data(), seq, d, d,
                       P(params_, table_, base + SELF_WQ), buf2.data(),
                       G(grad, table_, base + SELF_WQ), G(grad, table_, base + SELF_BQ));
            linear_bwd(tl.a1.data(), dk.data(), seq, d, d,
                       P(params_, table_, base + SELF_WK), buf2.data(),
                       G(grad, table_, base + SELF_WK), G(grad, table_, base + SELF_BK));
            linear_bwd(tl.a1.data(), dv.data(), seq, d, d,
                       P(params_, table_, base + SELF_WV), buf2.data(),
                       G(grad, table_, base + SELF_WV), G(grad, table_, base + SELF_BV));
            layernorm_bwd(tl.x_in.data(), buf2.data(), seq, d,
                          P(params_, table_, base + LN1_G), tl.ln1_mean.data(),
                          tl.ln1_rstd.data(), dx.data(), G(grad, table_, base + LN1_G),
                          G(grad, table_, base + LN1_B));
        }
    }

    // --- embedding backward ---
    axpy(1.0, dx.data(), G(grad, table_, kEntryStart), d);
    {
        double* dpw = G(grad, table_, kEntryPatchW);
        double* dpb = G(grad, table_, kEntryPatchB);
        for (std::size_t j = 0; j < m; ++j) {
            const double* drow = dx.data() + (j + 1) * d;
            const double* patch = tape.patches.data() + j * k;
            for (std::size_t o = 0; o < d; ++o) {
                dpb[o] += drow[o];
                axpy(drow[o], patch, dpw + o * k, k);
            }
        }
    }
    // condition embedding (positional part is constant)
    {
        double* dcond = G(grad, table_, kEntryCond);
        for (std::size_t i = 0; i < cl; ++i) {
            const std::size_t row = static_cast<std::size_t>(tape.cond_tokens[i]);
            axpy(1.0, du.data() + i * d, dcond + row * d, d);
        }
    }
}

GaussianParams Model::forward_incremental(const std::vector<std::vector<double>>& prefix,
                                          const Condition& c) const {
    const std::size_t m = config_.shape.num_patches();
    require(prefix.size() < m, "prefix too long");
    DecodeCache cache = begin_decode(c);
    GaussianParams params = decode_step(cache, nullptr);
    for (const auto& patch : prefix) params = decode_step(cache, &patch);
    return params;
}

DecodeCache Model::begin_decode(const Condition& c) const {
    validate_condition(c);
    const std::size_t d = config_.d_model;
    const std::size_t cl = c.tokens.size();
    DecodeCache cache;
    cache.cond = c;
    cache.cond_u.resize(cl * d);
    auto vecs = encode_condition(c);
    for (std::size_t i = 0; i < cl; ++i)
        std::copy(vecs[i].begin(), vecs[i].end(), cache.cond_u.begin() + i * d);
    cache.layers.resize(config_.n_decoder_layers);
    for (std::size_t l = 0; l < config_.n_decoder_layers; ++l) {
        const std::size_t base = kLayerBase + l * kPerLayer;
        cache.layers[l].ck.resize(cl * d);
        cache.layers[l].cv.resize(cl * d);
        linear_fwd(cache.cond_u.data(), cl, d, P(params_, table_, base + CROSS_WK),
                   P(params_, table_, base + CROSS_BK), d, cache.layers[l].ck.data());
        linear_fwd(cache.cond_u.data(), cl, d, P(params_, table_, base + CROSS_WV),
                   P(params_, table_, base + CROSS_BV), d, cache.layers[l].cv.data());
    }
    return cache;
}

GaussianParams Model::decode_step(DecodeCache& cache,
                                  const std::vector<double>* prev_patch) const {
    const std::size_t m = config_.shape.num_patches();
    const std::size_t k = config_.shape.patch_elems();
    const std::size_t d = config_.d_model;
    const std::size_t heads = config_.n_heads;
    const std::size_t dh = d / heads;
    const std::size_t dff = config_.ffn_mult * d;
    const std::size_t cl = cache.cond.tokens.size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    require(cache.pos < m, "prefix too long: all patches already predicted");
    if (cache.pos == 0)
        require(prev_patch == nullptr, "first step takes no patch (start token)");
    else
        require(prev_patch != nullptr && prev_patch->size() == k,
                "expected previous patch of length K");

    const std::size_t pos = cache.pos;
    std::vector<double> x(d);
    if (pos == 0) {
        const double* start = P(params_, table_, kEntryStart);
        for (std::size_t i = 0; i < d; ++i) x[i] = start[i] + positional_[i];
    } else {
        const double* pw = P(params_, table_, kEntryPatchW);
        const double* pb = P(params_, table_, kEntryPatchB);
        for (std::size_t o = 0; o < d; ++o)
            x[o] = dot(pw + o * k, prev_patch->data(), k) + pb[o] +
                   positional_[pos * d + o];
    }

    std::vector<double> a(d), q(d), kv(d), proj(d), concat(d);
    std::vector<double> mean(1), rstd(1);
    std::vector<double> ffn_pre(dff), ffn_act(dff);

    for (std::size_t l = 0; l < config_.n_decoder_layers; ++l) {
        const std::size_t base = kLayerBase + l * kPerLayer;
        auto& cl_layer = cache.layers[l];

        layernorm_fwd(x.data(), 1, d, P(params_, table_, base + LN1_G),
                      P(params_, table_, base + LN1_B), a.data(), mean.data(), rstd.data());
        linear_fwd(a.data(), 1, d, P(params_, table_, base + SELF_WQ),
                   P(params_, table_, base + SELF_BQ), d, q.data());
        cl_layer.k.resize((pos + 1) * d);
        cl_layer.v.resize((pos + 1) * d);
        linear_fwd(a.data(), 1, d, P(params_, table_, base + SELF_WK),
                   P(params_, table_, base + SELF_BK), d, cl_layer.k.data() + pos * d);
        linear_fwd(a.data(), 1, d, P(params_, table_, base + SELF_WV),
                   P(params_, table_, base + SELF_BV), d, cl_layer.v.data() + pos * d);

        std::fill(concat.begin(), concat.end(), 0.0);
        std::vector<double> scores(pos + 1);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t ho = h * dh;
            double mx = -1e300;
            for (std::size_t j2 = 0; j2 <= pos; ++j2) {
                scores[j2] = scale * dot(q.data() + ho, cl_layer.k.data() + j2 * d + ho, dh);
                mx = std::max(mx, scores[j2]);
            }
            double z = 0.0;
            for (std::size_t j2 = 0; j2 <= pos; ++j2) {
                scores[j2] = std::exp(scores[j2] - mx);
                z += scores[j2];
            }
            for (std::size_t j2 = 0; j2 <= pos; ++j2)
                axpy(scores[j2] / z, cl_layer.v.data() + j2 * d + ho, concat.data() + ho, dh);
        }
        linear_fwd(concat.data(), 1, d, P(params_, table_, base + SELF_WO),
                   P(params_, table_, base + SELF_BO), d, proj.data());
        for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

        layernorm_fwd(x.data(), 1, d, P(params_, table_, base + LN2_G),
                      P(params_, table_, base + LN2_B), a.data(), mean.data(), rstd.data());
        linear_fwd(a.data(), 1, d, P(params_, table_, base + CROSS_WQ),
                   P(params_, table_, base + CROSS_BQ), d, q.data());
        std::fill(concat.begin(), concat.end(), 0.0);
        std::vector<double> cscores(cl);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t ho = h * dh;
            double mx = -1e300;
            for (std::size_t j2 = 0; j2 < cl; ++j2) {
                cscores[j2] = scale * dot(q.data() + ho, cl_layer.ck.data() + j2 * d + ho, dh);
                mx = std::max(mx, cscores[j2]);
            }
            double z = 0.0;
            for (std::size_t j2 = 0; j2 < cl; ++j2) {
                cscores[j2] = std::exp(cscores[j2] - mx);
                z += cscores[j2];
            }
            for (std::size_t j2 = 0; j2 < cl; ++j2)
                axpy(cscores[j2] / z, cl_layer.cv.data() + j2 * d + ho, concat.data() + ho, dh);
        }
        linear_fwd(concat.data(), 1, d, P(params_, table_, base + CROSS_WO),
                   P(params_, table_, base + CROSS_BO), d, proj.data());
        for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

        layernorm_fwd(x.data(), 1, d, P(params_, table_, base + LN3_G),
                      P(params_, table_, base + LN3_B), a.data(), mean.data(), rstd.data());
        linear_fwd(a.data(), 1, d, P(params_, table_, base + FFN_W1),
                   P(params_, table_, base + FFN_B1), dff, ffn_pre.data());
        for (std::size_t i = 0; i < dff; ++i) ffn_act[i] = gelu(ffn_pre[i]);
        linear_fwd(ffn_act.data(), 1, dff, P(params_, table_, base + FFN_W2),
                   P(params_, table_, base + FFN_B2), d, proj.data());
        for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
        (void)kv;
    }

    cache.pos += 1;
    return predict_params(x);
}

}  // namespace noisear
