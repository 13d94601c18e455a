#pragma once

// The speaker-independent conversation model: a compact post-LN transformer
// encoder-decoder over token ids, with an optional task representation
// prepended as encoder position 0 (no token id, no positional offset; real
// tokens shift to positions 1..len). Forward, teacher-forced NLL, analytic
// backward (including the gradient with respect to the prepended vector) and
// top-k sampling decode all live here. Gradients are exact; they are checked
// against finite differences in the test suite.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaconv/common.hpp"
#include "metaconv/data.hpp"

namespace metaconv {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct ModelConfig {
    int vocab_size = 200;
    int d_model = 64;
    int n_heads = 4;
    int enc_layers = 2;
    int dec_layers = 2;
    int d_ff = 128;
    int max_len = 80;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (vocab_size <= kNumSpecialTokens) throw ConfigError("model: vocab too small");
        if (vocab_size > 65536) throw ConfigError("model: vocab exceeds 16-bit token packing");
        if (d_model < 2 || n_heads < 1 || d_model % n_heads != 0)
            throw ConfigError("model: d_model must be a positive multiple of n_heads");
        if (enc_layers < 1 || dec_layers < 1 || d_ff < 1 || max_len < 1)
            throw ConfigError("model: bad layer sizes");
    }

    // The published full-scale shape, kept as a preset.
    static ModelConfig paper_scale(int vocab) {
        ModelConfig c;
        c.vocab_size = vocab;
        c.d_model = 512;
        c.n_heads = 8;
        c.enc_layers = 6;
        c.dec_layers = 6;
        c.d_ff = 2048;
        c.max_len = 80;
        return c;
    }
};

inline json model_config_to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                {"n_heads", c.n_heads},       {"enc_layers", c.enc_layers},
                {"dec_layers", c.dec_layers}, {"d_ff", c.d_ff},
                {"max_len", c.max_len}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.enc_layers = j.at("enc_layers").get<int>();
    c.dec_layers = j.at("dec_layers").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_len = j.at("max_len").get<int>();
    return c;
}

struct AttentionParams {
    Mat wq, wk, wv, wo;  // d x d
    Vec bq, bk, bv, bo;  // d
};

struct LayerNormParams {
    Vec gain, bias;  // d
};

struct FfnParams {
    Mat w1;  // d x d_ff
    Vec b1;  // d_ff
    Mat w2;  // d_ff x d
    Vec b2;  // d
};

struct EncoderLayerParams {
    AttentionParams attn;
    LayerNormParams ln_attn;
    FfnParams ffn;
    LayerNormParams ln_ffn;
};

struct DecoderLayerParams {
    AttentionParams self_attn;
    LayerNormParams ln_self;
    AttentionParams cross_attn;
    LayerNormParams ln_cross;
    FfnParams ffn;
    LayerNormParams ln_ffn;
};

struct ModelParameters {
    ModelConfig config;
    Mat embedding;  // vocab x d
    std::vector<EncoderLayerParams> encoder;
    std::vector<DecoderLayerParams> decoder;
    Mat out_w;  // d x vocab
    Vec out_b;  // vocab

    static ModelParameters zeros(const ModelConfig& cfg) {
        cfg.validate();
        ModelParameters p;
        p.config = cfg;
        int d = cfg.d_model;
        p.embedding = Mat::Zero(cfg.vocab_size, d);
        auto attn = [&] {
            AttentionParams a;
            a.wq = a.wk = a.wv = a.wo = Mat::Zero(d, d);
            a.bq = a.bk = a.bv = a.bo = Vec::Zero(d);
            return a;
        };
        auto ln = [&] { return LayerNormParams{Vec::Zero(d), Vec::Zero(d)}; };
        auto ffn = [&] {
            FfnParams f;
            f.w1 = Mat::Zero(d, cfg.d_ff);
            f.b1 = Vec::Zero(cfg.d_ff);
            f.w2 = Mat::Zero(cfg.d_ff, d);
            f.b2 = Vec::Zero(d);
            return f;
        };
        for (int l = 0; l < cfg.enc_layers; ++l)
            p.encoder.push_back(EncoderLayerParams{attn(), ln(), ffn(), ln()});
        for (int l = 0; l < cfg.dec_layers; ++l)
            p.decoder.push_back(DecoderLayerParams{attn(), ln(), attn(), ln(), ffn(), ln()});
        p.out_w = Mat::Zero(d, cfg.vocab_size);
        p.out_b = Vec::Zero(cfg.vocab_size);
        return p;
    }

    static ModelParameters init(const ModelConfig& cfg, Rng& rng) {
        ModelParameters p = zeros(cfg);
        auto xavier = [&rng](Mat& w) {
            double s = std::sqrt(2.0 / static_cast<double>(w.rows() + w.cols()));
            for (Eigen::Index i = 0; i < w.rows(); ++i)
                for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = s * rng.normal();
        };
        double emb_s = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
        for (Eigen::Index i = 0; i < p.embedding.rows(); ++i)
            for (Eigen::Index j = 0; j < p.embedding.cols(); ++j)
                p.embedding(i, j) = emb_s * rng.normal();
        auto init_attn = [&](AttentionParams& a) {
            xavier(a.wq);
            xavier(a.wk);
            xavier(a.wv);
            xavier(a.wo);
        };
        auto init_ln = [](LayerNormParams& l) { l.gain.setOnes(); };
        for (auto& l : p.encoder) {
            init_attn(l.attn);
            init_ln(l.ln_attn);
            xavier(l.ffn.w1);
            xavier(l.ffn.w2);
            init_ln(l.ln_ffn);
        }
        for (auto& l : p.decoder) {
            init_attn(l.self_attn);
            init_ln(l.ln_self);
            init_attn(l.cross_attn);
            init_ln(l.ln_cross);
            xavier(l.ffn.w1);
            xavier(l.ffn.w2);
            init_ln(l.ln_ffn);
        }
        xavier(p.out_w);
        return p;
    }
};

// ---------------------------------------------------------------------------
// Tensor visitation. Order is fixed; serialization, flat views and parameter
// arithmetic all rely on it.

template <class P, class F>
void for_each_named_tensor(P& p, F&& f) {
    auto attn = [&f](const std::string& pre, auto& a) {
        f(pre + "wq", a.wq);
        f(pre + "wk", a.wk);
        f(pre + "wv", a.wv);
        f(pre + "wo", a.wo);
        f(pre + "bq", a.bq);
        f(pre + "bk", a.bk);
        f(pre + "bv", a.bv);
        f(pre + "bo", a.bo);
    };
    auto ln = [&f](const std::string& pre, auto& l) {
        f(pre + "gain", l.gain);
        f(pre + "bias", l.bias);
    };
    auto ffn = [&f](const std::string& pre, auto& ff) {
        f(pre + "w1", ff.w1);
        f(pre + "b1", ff.b1);
        f(pre + "w2", ff.w2);
        f(pre + "b2", ff.b2);
    };
    f("embedding", p.embedding);
    for (std::size_t l = 0; l < p.encoder.size(); ++l) {
        std::string pre = "enc" + std::to_string(l) + ".";
        attn(pre + "attn.", p.encoder[l].attn);
        ln(pre + "ln_attn.", p.encoder[l].ln_attn);
        ffn(pre + "ffn.", p.encoder[l].ffn);
        ln(pre + "ln_ffn.", p.encoder[l].ln_ffn);
    }
    for (std::size_t l = 0; l < p.decoder.size(); ++l) {
        std::string pre = "dec" + std::to_string(l) + ".";
        attn(pre + "self.", p.decoder[l].self_attn);
        ln(pre + "ln_self.", p.decoder[l].ln_self);
        attn(pre + "cross.", p.decoder[l].cross_attn);
        ln(pre + "ln_cross.", p.decoder[l].ln_cross);
        ffn(pre + "ffn.", p.decoder[l].ffn);
        ln(pre + "ln_ffn.", p.decoder[l].ln_ffn);
    }
    f("out_w", p.out_w);
    f("out_b", p.out_b);
}

struct TensorView {
    double* data;
    std::size_t size;
};

template <class P>
std::vector<TensorView> tensor_views(P& p) {
    std::vector<TensorView> views;
    for_each_named_tensor(p, [&views](const std::string&, auto& t) {
        views.push_back(TensorView{const_cast<double*>(t.data()),
                                   static_cast<std::size_t>(t.size())});
    });
    return views;
}

inline std::size_t parameter_count(const ModelParameters& p) {
    std::size_t n = 0;
    for (auto v : tensor_views(p)) n += v.size;
    return n;
}

inline Vec flatten(const ModelParameters& p) {
    Vec flat(static_cast<Eigen::Index>(parameter_count(p)));
    Eigen::Index at = 0;
    for (auto v : tensor_views(p)) {
        flat.segment(at, static_cast<Eigen::Index>(v.size)) =
            Eigen::Map<const Vec>(v.data, static_cast<Eigen::Index>(v.size));
        at += static_cast<Eigen::Index>(v.size);
    }
    return flat;
}

inline void unflatten(ModelParameters& p, const Vec& flat) {
    Eigen::Index at = 0;
    for (auto v : tensor_views(p)) {
        Eigen::Map<Vec>(v.data, static_cast<Eigen::Index>(v.size)) =
            flat.segment(at, static_cast<Eigen::Index>(v.size));
        at += static_cast<Eigen::Index>(v.size);
    }
    if (at != flat.size()) throw ConfigError("unflatten: size mismatch");
}

// dst += c * src, matching shapes assumed
inline void add_scaled(ModelParameters& dst, const ModelParameters& src, double c) {
    auto dv = tensor_views(dst);
    auto sv = tensor_views(src);
    for (std::size_t i = 0; i < dv.size(); ++i)
        Eigen::Map<Vec>(dv[i].data, static_cast<Eigen::Index>(dv[i].size)) +=
            c * Eigen::Map<const Vec>(sv[i].data, static_cast<Eigen::Index>(sv[i].size));
}

inline void set_zero(ModelParameters& p) {
    for (auto v : tensor_views(p))
        Eigen::Map<Vec>(v.data, static_cast<Eigen::Index>(v.size)).setZero();
}

inline uint64_t checksum(const ModelParameters& p) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (auto v : tensor_views(p)) h = fnv1a64(v.data, v.size * sizeof(double), h);
    return h;
}

inline bool all_finite(const ModelParameters& p) {
    for (auto v : tensor_views(p))
        if (!Eigen::Map<const Vec>(v.data, static_cast<Eigen::Index>(v.size)).allFinite())
            return false;
    return true;
}

// ---------------------------------------------------------------------------
// Forward / backward machinery

namespace seqdetail {

constexpr double kLnEps = 1e-5;
constexpr double kMaskScore = -1e30;

inline Mat sinusoidal_positions(int max_pos, int d) {
    Mat pe(max_pos, d);
    for (int pos = 0; pos < max_pos; ++pos)
        for (int i = 0; i < d; ++i) {
            double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
            double angle = pos / std::pow(10000.0, exponent);
            pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return pe;
}

struct LnCache {
    Mat xhat;
    Vec rstd;
};

inline Mat layer_norm_fwd(const Mat& x, const LayerNormParams& ln, LnCache& c) {
    Eigen::Index n = x.rows(), d = x.cols();
    c.xhat.resize(n, d);
    c.rstd.resize(n);
    Mat y(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        double mu = x.row(r).mean();
        double var = (x.row(r).array() - mu).square().mean();
        double rstd = 1.0 / std::sqrt(var + kLnEps);
        c.rstd[r] = rstd;
        c.xhat.row(r) = (x.row(r).array() - mu) * rstd;
        y.row(r) = c.xhat.row(r).cwiseProduct(ln.gain.transpose()) + ln.bias.transpose();
    }
    return y;
}

inline Mat layer_norm_bwd(const Mat& dy, const LayerNormParams& ln, const LnCache& c,
                          LayerNormParams* g) {
    Eigen::Index n = dy.rows(), d = dy.cols();
    if (g) {
        for (Eigen::Index r = 0; r < n; ++r) {
            g->gain += dy.row(r).cwiseProduct(c.xhat.row(r)).transpose();
            g->bias += dy.row(r).transpose();
        }
    }
    Mat dx(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        Eigen::RowVectorXd gdy = dy.row(r).cwiseProduct(ln.gain.transpose());
        double m1 = gdy.mean();
        double m2 = gdy.cwiseProduct(c.xhat.row(r)).mean();
        dx.row(r) = c.rstd[r] * (gdy.array() - m1 - c.xhat.row(r).array() * m2);
    }
    return dx;
}

struct FfnCache {
    Mat input;   // pre-FFN activations
    Mat hidden;  // post-ReLU
};

inline Mat ffn_fwd(const Mat& x, const FfnParams& p, FfnCache& c) {
    c.input = x;
    c.hidden.noalias() = x * p.w1;
    c.hidden.rowwise() += p.b1.transpose();
    c.hidden = c.hidden.cwiseMax(0.0);
    Mat y;
    y.noalias() = c.hidden * p.w2;
    y.rowwise() += p.b2.transpose();
    return y;
}

inline Mat ffn_bwd(const Mat& dy, const FfnParams& p, const FfnCache& c, FfnParams* g) {
    if (g) {
        g->w2.noalias() += c.hidden.transpose() * dy;
        g->b2 += dy.colwise().sum().transpose();
    }
    Mat dh;
    dh.noalias() = dy * p.w2.transpose();
    dh = dh.cwiseProduct((c.hidden.array() > 0.0).cast<double>().matrix());
    if (g) {
        g->w1.noalias() += c.input.transpose() * dh;
        g->b1 += dh.colwise().sum().transpose();
    }
    Mat dx;
    dx.noalias() = dh * p.w1.transpose();
    return dx;
}

// Per-sample attention spec. Queries index rows b*s_q + t of x_q; keys and
// values index rows b*s_k + t of x_kv.
struct AttnSpec {
    int batch = 0, s_q = 0, s_k = 0;
    const std::vector<std::vector<uint8_t>>* k_valid = nullptr;
    bool causal = false;
    bool mask_key0 = false;  // hide the prepended slot from every attention consumer
};

struct AttnCache {
    Mat q, k, v;             // N x d (post projection)
    Mat ctx;                 // N_q x d, heads concatenated
    std::vector<Mat> probs;  // per (sample, head): s_q x s_k
};

inline Mat attention_fwd(const Mat& x_q, const Mat& x_kv, const AttentionParams& p,
                         const AttnSpec& spec, int n_heads, AttnCache& c) {
    int dk = static_cast<int>(x_q.cols()) / n_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    c.q.noalias() = x_q * p.wq;
    c.q.rowwise() += p.bq.transpose();
    c.k.noalias() = x_kv * p.wk;
    c.k.rowwise() += p.bk.transpose();
    c.v.noalias() = x_kv * p.wv;
    c.v.rowwise() += p.bv.transpose();
    c.ctx.resize(x_q.rows(), x_q.cols());
    c.probs.assign(static_cast<std::size_t>(spec.batch * n_heads), Mat());

    for (int b = 0; b < spec.batch; ++b) {
        const auto& kv = (*spec.k_valid)[static_cast<std::size_t>(b)];
        for (int h = 0; h < n_heads; ++h) {
            auto qb = c.q.block(b * spec.s_q, h * dk, spec.s_q, dk);
            auto kb = c.k.block(b * spec.s_k, h * dk, spec.s_k, dk);
            auto vb = c.v.block(b * spec.s_k, h * dk, spec.s_k, dk);
            Mat scores;
            scores.noalias() = qb * kb.transpose() * scale;
            for (int tq = 0; tq < spec.s_q; ++tq)
                for (int tk = 0; tk < spec.s_k; ++tk) {
                    bool allowed = kv[static_cast<std::size_t>(tk)] != 0;
                    if (spec.causal && tk > tq) allowed = false;
                    if (spec.mask_key0 && tk == 0) allowed = false;
                    if (!allowed) scores(tq, tk) = kMaskScore;
                }
            Mat& probs = c.probs[static_cast<std::size_t>(b * n_heads + h)];
            probs.resize(spec.s_q, spec.s_k);
            for (int tq = 0; tq < spec.s_q; ++tq) {
                double mx = scores.row(tq).maxCoeff();
                Eigen::RowVectorXd e = (scores.row(tq).array() - mx).exp();
                probs.row(tq) = e / e.sum();
            }
            c.ctx.block(b * spec.s_q, h * dk, spec.s_q, dk).noalias() = probs * vb;
        }
    }
    Mat out;
    out.noalias() = c.ctx * p.wo;
    out.rowwise() += p.bo.transpose();
    return out;
}

// dx_q is assigned; dx_kv is accumulated into (callers pass a zeroed or
// partially-filled buffer; for self-attention x_q == x_kv and both flows
// land in the same matrix).
inline void attention_bwd(const Mat& dout, const Mat& x_q, const Mat& x_kv,
                          const AttentionParams& p, const AttnSpec& spec, int n_heads,
                          const AttnCache& c, AttentionParams* g, Mat& dx_q, Mat& dx_kv) {
    int dk = static_cast<int>(x_q.cols()) / n_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    if (g) {
        g->wo.noalias() += c.ctx.transpose() * dout;
        g->bo += dout.colwise().sum().transpose();
    }
    Mat dctx;
    dctx.noalias() = dout * p.wo.transpose();

    Mat dq = Mat::Zero(c.q.rows(), c.q.cols());
    Mat dkm = Mat::Zero(c.k.rows(), c.k.cols());
    Mat dvm = Mat::Zero(c.v.rows(), c.v.cols());
    for (int b = 0; b < spec.batch; ++b)
        for (int h = 0; h < n_heads; ++h) {
            auto qb = c.q.block(b * spec.s_q, h * dk, spec.s_q, dk);
            auto kb = c.k.block(b * spec.s_k, h * dk, spec.s_k, dk);
            auto vb = c.v.block(b * spec.s_k, h * dk, spec.s_k, dk);
            const Mat& probs = c.probs[static_cast<std::size_t>(b * n_heads + h)];
            auto dctx_b = dctx.block(b * spec.s_q, h * dk, spec.s_q, dk);
            Mat dprobs;
            dprobs.noalias() = dctx_b * vb.transpose();
            dvm.block(b * spec.s_k, h * dk, spec.s_k, dk).noalias() +=
                probs.transpose() * dctx_b;
            // softmax backward per row
            Mat dscores(spec.s_q, spec.s_k);
            for (int tq = 0; tq < spec.s_q; ++tq) {
                double dot = dprobs.row(tq).cwiseProduct(probs.row(tq)).sum();
                dscores.row(tq) =
                    (probs.row(tq).array() * (dprobs.row(tq).array() - dot)).matrix();
            }
            dq.block(b * spec.s_q, h * dk, spec.s_q, dk).noalias() = dscores * kb * scale;
            dkm.block(b * spec.s_k, h * dk, spec.s_k, dk).noalias() =
                dscores.transpose() * qb * scale;
        }
    if (g) {
        g->wq.noalias() += x_q.transpose() * dq;
        g->bq += dq.colwise().sum().transpose();
        g->wk.noalias() += x_kv.transpose() * dkm;
        g->bk += dkm.colwise().sum().transpose();
        g->wv.noalias() += x_kv.transpose() * dvm;
        g->bv += dvm.colwise().sum().transpose();
    }
    dx_q.noalias() = dq * p.wq.transpose();
    dx_kv.noalias() += dkm * p.wk.transpose();
    dx_kv.noalias() += dvm * p.wv.transpose();
}

struct EncLayerCache {
    Mat x_in;
    AttnCache attn;
    LnCache ln_attn;
    Mat y_mid;  // post first LN
    FfnCache ffn;
    LnCache ln_ffn;
};

struct DecLayerCache {
    Mat x_in;
    AttnCache self_attn;
    LnCache ln_self;
    Mat y_self;
    AttnCache cross_attn;
    LnCache ln_cross;
    Mat y_cross;
    FfnCache ffn;
    LnCache ln_ffn;
};

struct BatchPlan {
    int batch = 0, s_enc = 0, s_dec = 0;
    bool has_h = false;
    std::vector<std::vector<int>> enc_tokens;  // -1 at the h slot and padding
    std::vector<std::vector<int>> dec_tokens;  // bos + shifted response, -1 padding
    std::vector<std::vector<int>> targets;     // response + eos, -1 padding
    std::vector<std::vector<uint8_t>> enc_valid, dec_valid;
    std::vector<int> target_len;
};

inline BatchPlan plan_batch(const ModelConfig& cfg, bool has_h,
                            const std::vector<ConversationSample>& batch) {
    if (batch.empty()) throw ConfigError("seq model: empty batch");
    BatchPlan plan;
    plan.batch = static_cast<int>(batch.size());
    plan.has_h = has_h;
    int offset = has_h ? 1 : 0;
    for (const auto& s : batch) {
        s.query.validate(cfg.vocab_size, cfg.max_len, "query");
        s.response.validate(cfg.vocab_size, cfg.max_len, "response");
        plan.s_enc = std::max(plan.s_enc, static_cast<int>(s.query.tokens.size()) + offset);
        plan.s_dec = std::max(plan.s_dec, static_cast<int>(s.response.tokens.size()) + 1);
    }
    for (const auto& s : batch) {
        std::vector<int> enc(static_cast<std::size_t>(plan.s_enc), -1);
        std::vector<uint8_t> ev(static_cast<std::size_t>(plan.s_enc), 0);
        if (has_h) ev[0] = 1;
        for (std::size_t i = 0; i < s.query.tokens.size(); ++i) {
            enc[i + static_cast<std::size_t>(offset)] = s.query.tokens[i];
            ev[i + static_cast<std::size_t>(offset)] = 1;
        }
        std::vector<int> dec(static_cast<std::size_t>(plan.s_dec), -1);
        std::vector<int> tgt(static_cast<std::size_t>(plan.s_dec), -1);
        std::vector<uint8_t> dv(static_cast<std::size_t>(plan.s_dec), 0);
        dec[0] = kBosToken;
        dv[0] = 1;
        for (std::size_t i = 0; i < s.response.tokens.size(); ++i) {
            tgt[i] = s.response.tokens[i];
            if (i + 1 < static_cast<std::size_t>(plan.s_dec)) {
                dec[i + 1] = s.response.tokens[i];
                dv[i + 1] = 1;
            }
        }
        tgt[s.response.tokens.size()] = kEosToken;
        plan.enc_tokens.push_back(std::move(enc));
        plan.dec_tokens.push_back(std::move(dec));
        plan.targets.push_back(std::move(tgt));
        plan.enc_valid.push_back(std::move(ev));
        plan.dec_valid.push_back(std::move(dv));
        plan.target_len.push_back(static_cast<int>(s.response.tokens.size()) + 1);
    }
    return plan;
}

struct ForwardCache {
    BatchPlan plan;
    Mat enc_input, dec_input;  // embedded sequences
    std::vector<EncLayerCache> enc_layers;
    std::vector<DecLayerCache> dec_layers;
    Mat enc_out, dec_out;
    Mat logits;       // (B*s_dec) x vocab
    Mat probs;        // softmax rows at valid target positions
    double loss = 0;  // mean over samples of per-token mean NLL
};

// Token positions start at `offset` (1 when a prepended vector occupies
// position 0); the prepended vector itself gets no positional term.
inline Mat embed_sequence(const ModelParameters& p, const Mat& posenc,
                          const std::vector<std::vector<int>>& tokens, int s_len, const Vec* h,
                          bool h_in_front) {
    int d = p.config.d_model;
    double scale = std::sqrt(static_cast<double>(d));
    int batch = static_cast<int>(tokens.size());
    Mat x = Mat::Zero(batch * s_len, d);
    for (int b = 0; b < batch; ++b)
        for (int t = 0; t < s_len; ++t) {
            Eigen::Index row = b * s_len + t;
            int tok = tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
            if (h_in_front && t == 0) {
                x.row(row) = h->transpose();
            } else if (tok >= 0) {
                x.row(row) = p.embedding.row(tok) * scale + posenc.row(t);
            } else {
                x.row(row) = p.embedding.row(kPadToken) * scale + posenc.row(t);
            }
        }
    return x;
}

inline void encoder_forward(const ModelParameters& p, ForwardCache& fc, bool ablate_h) {
    const auto& plan = fc.plan;
    Mat x = fc.enc_input;
    fc.enc_layers.resize(p.encoder.size());
    for (std::size_t l = 0; l < p.encoder.size(); ++l) {
        auto& lc = fc.enc_layers[l];
        lc.x_in = x;
        AttnSpec spec;
        spec.batch = plan.batch;
        spec.s_q = spec.s_k = plan.s_enc;
        spec.k_valid = &plan.enc_valid;
        spec.mask_key0 = ablate_h && plan.has_h;
        Mat attn_out = attention_fwd(lc.x_in, lc.x_in, p.encoder[l].attn, spec,
                                     p.config.n_heads, lc.attn);
        Mat r1 = lc.x_in + attn_out;
        lc.y_mid = layer_norm_fwd(r1, p.encoder[l].ln_attn, lc.ln_attn);
        Mat f = ffn_fwd(lc.y_mid, p.encoder[l].ffn, lc.ffn);
        Mat r2 = lc.y_mid + f;
        x = layer_norm_fwd(r2, p.encoder[l].ln_ffn, lc.ln_ffn);
    }
    fc.enc_out = std::move(x);
}

inline void decoder_forward(const ModelParameters& p, ForwardCache& fc, bool ablate_h) {
    const auto& plan = fc.plan;
    Mat x = fc.dec_input;
    fc.dec_layers.resize(p.decoder.size());
    for (std::size_t l = 0; l < p.decoder.size(); ++l) {
        auto& lc = fc.dec_layers[l];
        lc.x_in = x;
        AttnSpec self_spec;
        self_spec.batch = plan.batch;
        self_spec.s_q = self_spec.s_k = plan.s_dec;
        self_spec.k_valid = &plan.dec_valid;
        self_spec.causal = true;
        Mat self_out = attention_fwd(lc.x_in, lc.x_in, p.decoder[l].self_attn, self_spec,
                                     p.config.n_heads, lc.self_attn);
        lc.y_self = layer_norm_fwd(lc.x_in + self_out, p.decoder[l].ln_self, lc.ln_self);

        AttnSpec cross_spec;
        cross_spec.batch = plan.batch;
        cross_spec.s_q = plan.s_dec;
        cross_spec.s_k = plan.s_enc;
        cross_spec.k_valid = &plan.enc_valid;
        cross_spec.mask_key0 = ablate_h && plan.has_h;
        Mat cross_out = attention_fwd(lc.y_self, fc.enc_out, p.decoder[l].cross_attn,
                                      cross_spec, p.config.n_heads, lc.cross_attn);
        lc.y_cross = layer_norm_fwd(lc.y_self + cross_out, p.decoder[l].ln_cross, lc.ln_cross);

        Mat f = ffn_fwd(lc.y_cross, p.decoder[l].ffn, lc.ffn);
        x = layer_norm_fwd(lc.y_cross + f, p.decoder[l].ln_ffn, lc.ln_ffn);
    }
    fc.dec_out = std::move(x);
}

inline void output_forward(const ModelParameters& p, ForwardCache& fc) {
    const auto& plan = fc.plan;
    fc.logits.noalias() = fc.dec_out * p.out_w;
    fc.logits.rowwise() += p.out_b.transpose();
    fc.probs = Mat::Zero(fc.logits.rows(), fc.logits.cols());
    double total = 0.0;
    for (int b = 0; b < plan.batch; ++b) {
        double sample_nll = 0.0;
        for (int t = 0; t < plan.target_len[static_cast<std::size_t>(b)]; ++t) {
            Eigen::Index row = b * plan.s_dec + t;
            int target = plan.targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
            double mx = fc.logits.row(row).maxCoeff();
            Eigen::RowVectorXd e = (fc.logits.row(row).array() - mx).exp();
            double z = e.sum();
            fc.probs.row(row) = e / z;
            sample_nll += std::log(z) + mx - fc.logits(row, target);
        }
        total += sample_nll / plan.target_len[static_cast<std::size_t>(b)];
    }
    fc.loss = total / plan.batch;
    require_finite(fc.loss, "sequence model loss");
}

inline ForwardCache run_forward(const ModelParameters& p, const Vec* h,
                                const std::vector<ConversationSample>& batch, bool ablate_h) {
    p.config.validate();
    if (h && h->size() != p.config.d_model)
        throw ConfigError("task representation dimension does not match d_model");
    ForwardCache fc;
    fc.plan = plan_batch(p.config, h != nullptr, batch);
    Mat posenc = sinusoidal_positions(std::max(fc.plan.s_enc, fc.plan.s_dec) + 1,
                                      p.config.d_model);
    fc.enc_input = embed_sequence(p, posenc, fc.plan.enc_tokens, fc.plan.s_enc, h,
                                  h != nullptr);
    fc.dec_input = embed_sequence(p, posenc, fc.plan.dec_tokens, fc.plan.s_dec, nullptr, false);
    encoder_forward(p, fc, ablate_h);
    decoder_forward(p, fc, ablate_h);
    output_forward(p, fc);
    return fc;
}

}  // namespace seqdetail

// Teacher-forced token-level cross-entropy of the response given the query:
// per-sample mean over response tokens (eos included), then mean over the
// batch. `h`, when present, occupies encoder position 0.
inline double cm_loss(const ModelParameters& p, const Vec* h,
                      const std::vector<ConversationSample>& batch) {
    return seqdetail::run_forward(p, h, batch, false).loss;
}

// Same forward, plus gradients. `param_grads` (zeroed or pre-accumulated) and
// `h_grad` may each be null to skip that side. `ablate_h_attention` is a test
// hook that hides the h slot from every attention consumer.
inline double cm_loss_and_grad(const ModelParameters& p, const Vec* h,
                               const std::vector<ConversationSample>& batch,
                               ModelParameters* param_grads, Vec* h_grad,
                               bool ablate_h_attention = false) {
    using namespace seqdetail;
    if (h_grad && !h) throw ConfigError("h gradient requested without h");
    ForwardCache fc = run_forward(p, h, batch, ablate_h_attention);
    const auto& plan = fc.plan;
    int n_heads = p.config.n_heads;

    // dL/dlogits = (softmax - onehot) / (target_len * batch) at valid rows
    Mat dlogits = Mat::Zero(fc.logits.rows(), fc.logits.cols());
    for (int b = 0; b < plan.batch; ++b) {
        double w = 1.0 / (static_cast<double>(plan.target_len[static_cast<std::size_t>(b)]) *
                          plan.batch);
        for (int t = 0; t < plan.target_len[static_cast<std::size_t>(b)]; ++t) {
            Eigen::Index row = b * plan.s_dec + t;
            int target = plan.targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
            dlogits.row(row) = fc.probs.row(row) * w;
            dlogits(row, target) -= w;
        }
    }
    if (param_grads) {
        param_grads->out_w.noalias() += fc.dec_out.transpose() * dlogits;
        param_grads->out_b += dlogits.colwise().sum().transpose();
    }
    Mat dx;
    dx.noalias() = dlogits * p.out_w.transpose();

    Mat denc_out = Mat::Zero(fc.enc_out.rows(), fc.enc_out.cols());

    // decoder stack, top down
    for (int l = static_cast<int>(p.decoder.size()) - 1; l >= 0; --l) {
        const auto& lp = p.decoder[static_cast<std::size_t>(l)];
        auto& lc = fc.dec_layers[static_cast<std::size_t>(l)];
        FfnParams* ffn_g = nullptr;
        AttentionParams *self_g = nullptr, *cross_g = nullptr;
        LayerNormParams *ln_self_g = nullptr, *ln_cross_g = nullptr, *ln_ffn_g = nullptr;
        if (param_grads) {
            auto& gl = param_grads->decoder[static_cast<std::size_t>(l)];
            ffn_g = &gl.ffn;
            self_g = &gl.self_attn;
            cross_g = &gl.cross_attn;
            ln_self_g = &gl.ln_self;
            ln_cross_g = &gl.ln_cross;
            ln_ffn_g = &gl.ln_ffn;
        }
        Mat dr = layer_norm_bwd(dx, lp.ln_ffn, lc.ln_ffn, ln_ffn_g);
        Mat dy_cross = dr + ffn_bwd(dr, lp.ffn, lc.ffn, ffn_g);

        Mat dr2 = layer_norm_bwd(dy_cross, lp.ln_cross, lc.ln_cross, ln_cross_g);
        AttnSpec cross_spec;
        cross_spec.batch = plan.batch;
        cross_spec.s_q = plan.s_dec;
        cross_spec.s_k = plan.s_enc;
        cross_spec.k_valid = &plan.enc_valid;
        cross_spec.mask_key0 = ablate_h_attention && plan.has_h;
        Mat dy_self = dr2;  // residual path
        Mat dq_part(lc.y_self.rows(), lc.y_self.cols());
        attention_bwd(dr2, lc.y_self, fc.enc_out, lp.cross_attn, cross_spec, n_heads,
                      lc.cross_attn, cross_g, dq_part, denc_out);
        dy_self += dq_part;

        Mat dr3 = layer_norm_bwd(dy_self, lp.ln_self, lc.ln_self, ln_self_g);
        AttnSpec self_spec;
        self_spec.batch = plan.batch;
        self_spec.s_q = self_spec.s_k = plan.s_dec;
        self_spec.k_valid = &plan.dec_valid;
        self_spec.causal = true;
        Mat dx_in = dr3;  // residual
        Mat dq2(lc.x_in.rows(), lc.x_in.cols());
        Mat dkv2 = Mat::Zero(lc.x_in.rows(), lc.x_in.cols());
        attention_bwd(dr3, lc.x_in, lc.x_in, lp.self_attn, self_spec, n_heads, lc.self_attn,
                      self_g, dq2, dkv2);
        dx = dx_in + dq2 + dkv2;
    }

    // decoder input embeddings
    if (param_grads) {
        double scale = std::sqrt(static_cast<double>(p.config.d_model));
        for (int b = 0; b < plan.batch; ++b)
            for (int t = 0; t < plan.s_dec; ++t) {
                int tok = plan.dec_tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
                if (tok >= 0)
                    param_grads->embedding.row(tok) += dx.row(b * plan.s_dec + t) * scale;
            }
    }

    // encoder stack
    dx = std::move(denc_out);
    for (int l = static_cast<int>(p.encoder.size()) - 1; l >= 0; --l) {
        const auto& lp = p.encoder[static_cast<std::size_t>(l)];
        auto& lc = fc.enc_layers[static_cast<std::size_t>(l)];
        FfnParams* ffn_g = nullptr;
        AttentionParams* attn_g = nullptr;
        LayerNormParams *ln_attn_g = nullptr, *ln_ffn_g = nullptr;
        if (param_grads) {
            auto& gl = param_grads->encoder[static_cast<std::size_t>(l)];
            ffn_g = &gl.ffn;
            attn_g = &gl.attn;
            ln_attn_g = &gl.ln_attn;
            ln_ffn_g = &gl.ln_ffn;
        }
        Mat dr = layer_norm_bwd(dx, lp.ln_ffn, lc.ln_ffn, ln_ffn_g);
        Mat dy_mid = dr + ffn_bwd(dr, lp.ffn, lc.ffn, ffn_g);
        Mat dr2 = layer_norm_bwd(dy_mid, lp.ln_attn, lc.ln_attn, ln_attn_g);
        AttnSpec spec;
        spec.batch = plan.batch;
        spec.s_q = spec.s_k = plan.s_enc;
        spec.k_valid = &plan.enc_valid;
        spec.mask_key0 = ablate_h_attention && plan.has_h;
        Mat dq(lc.x_in.rows(), lc.x_in.cols());
        Mat dkv = Mat::Zero(lc.x_in.rows(), lc.x_in.cols());
        attention_bwd(dr2, lc.x_in, lc.x_in, lp.attn, spec, n_heads, lc.attn, attn_g, dq, dkv);
        dx = dr2 + dq + dkv;
    }

    // encoder input embeddings and the prepended vector
    if (h_grad) h_grad->setZero();
    double scale = std::sqrt(static_cast<double>(p.config.d_model));
    for (int b = 0; b < plan.batch; ++b)
        for (int t = 0; t < plan.s_enc; ++t) {
            Eigen::Index row = b * plan.s_enc + t;
            if (plan.has_h && t == 0) {
                if (h_grad) *h_grad += dx.row(row).transpose();
                continue;
            }
            int tok = plan.enc_tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
            if (param_grads && tok >= 0)
                param_grads->embedding.row(tok) += dx.row(row) * scale;
        }

    if (param_grads && !all_finite(*param_grads))
        throw NumericError("non-finite parameter gradient");
    if (h_grad && !h_grad->allFinite()) throw NumericError("non-finite h gradient");
    return fc.loss;
}

struct DecodeStep {
    std::vector<int> candidates;  // the k admissible token ids this step
    std::vector<double> probs;    // renormalized over the candidates
    int chosen = -1;
};

struct DecodeTrace {
    std::vector<DecodeStep> steps;
};

// Autoregressive top-k sampling. Each step keeps the k highest-probability
// admissible tokens (pad and bos are never admissible), renormalizes, and
// samples. Stops at eos or after max_new tokens. k=1 degenerates to greedy.
inline std::vector<int> decode_topk(const ModelParameters& p, const Vec* h,
                                    const Utterance& query, int k, int max_new, Rng& rng,
                                    DecodeTrace* trace = nullptr) {
    using namespace seqdetail;
    p.config.validate();
    if (k < 1) throw ConfigError("decode_topk: k must be >= 1");
    if (max_new < 1) throw ConfigError("decode_topk: max_new must be >= 1");
    max_new = std::min(max_new, p.config.max_len);
    query.validate(p.config.vocab_size, p.config.max_len, "query");

    std::vector<int> generated;
    for (int step = 0; step < max_new; ++step) {
        ConversationSample probe;
        probe.query = query;
        // response field carries the prefix; targets are ignored, we only
        // need the logits at the last position. A one-token dummy keeps the
        // plan valid when the prefix is empty.
        probe.response.tokens = generated.empty() ? std::vector<int>{kEosToken} : generated;
        std::vector<ConversationSample> batch{probe};
        ForwardCache fc = run_forward(p, h, batch, false);
        Eigen::Index row = static_cast<Eigen::Index>(generated.size());  // position of next token
        Eigen::RowVectorXd logits = fc.logits.row(row);

        std::vector<int> order;
        order.reserve(static_cast<std::size_t>(p.config.vocab_size));
        for (int t = 0; t < p.config.vocab_size; ++t)
            if (t != kPadToken && t != kBosToken) order.push_back(t);
        int kk = std::min<int>(k, static_cast<int>(order.size()));
        std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&](int a, int b) {
            if (logits[a] != logits[b]) return logits[a] > logits[b];
            return a < b;
        });
        order.resize(static_cast<std::size_t>(kk));

        double mx = logits[order[0]];
        std::vector<double> probs(order.size());
        double z = 0.0;
        for (std::size_t i = 0; i < order.size(); ++i) {
            probs[i] = std::exp(logits[order[i]] - mx);
            z += probs[i];
        }
        for (auto& q : probs) q /= z;

        int chosen;
        if (kk == 1) {
            chosen = order[0];
        } else {
            double u = rng.uniform_real();
            double acc = 0.0;
            std::size_t pick = order.size() - 1;
            for (std::size_t i = 0; i < order.size(); ++i) {
                acc += probs[i];
                if (u < acc) {
                    pick = i;
                    break;
                }
            }
            chosen = order[pick];
        }
        if (trace) {
            DecodeStep ds;
            ds.candidates = order;
            ds.probs = probs;
            ds.chosen = chosen;
            trace->steps.push_back(std::move(ds));
        }
        if (chosen == kEosToken) break;
        generated.push_back(chosen);
    }
    return generated;
}

}  // namespace metaconv
