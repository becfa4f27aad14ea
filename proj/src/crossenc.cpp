#include "ctxrank/crossenc.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "ctxrank/error.hpp"
#include "ctxrank/io.hpp"
#include "ctxrank/textprep.hpp"

namespace ctxrank {

// ---------------------------------------------------------------------------
// Configuration and input layout

void EncoderConfig::validate() const {
    if (layers < 1 || hidden < 1 || heads < 1 || ffn < 1 || max_len < 1 || vocab < 1) {
        throw UsageError("encoder dimensions must be positive");
    }
    if (hidden % heads != 0) throw UsageError("attention heads must divide the hidden size");
    if (max_len < 8) throw UsageError("maximum sequence length must be at least 8");
    if (vocab <= static_cast<int>(SubwordVocab::reserved_count)) {
        throw UsageError("vocabulary must be larger than the reserved token set");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw UsageError("dropout must lie in [0, 1)");
    if (max_query_len < 1 || max_query_len > max_len - 3) {
        throw UsageError("max query length must lie in [1, max_len - 3]");
    }
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = nlohmann::json{{"layers", c.layers},   {"hidden", c.hidden},   {"heads", c.heads},
                       {"ffn", c.ffn},         {"max_len", c.max_len}, {"vocab", c.vocab},
                       {"dropout", c.dropout}, {"max_query_len", c.max_query_len}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
    EncoderConfig d;
    c.layers = j.value("layers", d.layers);
    c.hidden = j.value("hidden", d.hidden);
    c.heads = j.value("heads", d.heads);
    c.ffn = j.value("ffn", d.ffn);
    c.max_len = j.value("max_len", d.max_len);
    c.vocab = j.value("vocab", d.vocab);
    c.dropout = j.value("dropout", d.dropout);
    c.max_query_len = j.value("max_query_len", d.max_query_len);
}

InputEncoding encode_pair(std::span<const int> query_ids, std::span<const int> passage_ids,
                          const EncoderConfig& config) {
    config.validate();
    if (query_ids.empty()) throw DataError("cannot encode an empty query");
    const auto S = static_cast<std::size_t>(config.max_len);
    std::size_t q = query_ids.size();
    std::size_t p = passage_ids.size();
    InputEncoding enc;
    if (q + p + 3 > S && q > static_cast<std::size_t>(config.max_query_len)) {
        q = static_cast<std::size_t>(config.max_query_len);
        enc.truncated = true;
    }
    if (q + p + 3 > S) {
        p = S - 3 - q;
        enc.truncated = true;
    }
    enc.token_ids.assign(S, SubwordVocab::pad_id);
    enc.segment_ids.assign(S, segment_query);
    enc.attention_mask.assign(S, 0);
    enc.position_ids.resize(S);
    std::iota(enc.position_ids.begin(), enc.position_ids.end(), 0);

    std::size_t i = 0;
    enc.token_ids[i++] = SubwordVocab::cls_id;
    for (std::size_t t = 0; t < q; ++t) enc.token_ids[i++] = query_ids[t];
    enc.token_ids[i++] = SubwordVocab::sep_id;
    const std::size_t doc_start = i;
    for (std::size_t t = 0; t < p; ++t) enc.token_ids[i++] = passage_ids[t];
    enc.token_ids[i++] = SubwordVocab::sep_id;
    for (std::size_t t = doc_start; t < i; ++t) enc.segment_ids[t] = segment_doc;
    for (std::size_t t = 0; t < i; ++t) enc.attention_mask[t] = 1;
    enc.length = static_cast<int>(i);
    return enc;
}

InputEncoding encode_sequence(std::span<const int> ids, const EncoderConfig& config) {
    if (ids.empty()) throw DataError("cannot encode an empty sequence");
    std::size_t half = (ids.size() + 1) / 2;
    return encode_pair(ids.subspan(0, half), ids.subspan(half), config);
}

// ---------------------------------------------------------------------------
// Parameters

bool is_head_tensor(std::string_view name) {
    return name.rfind("pooler_", 0) == 0 || name.rfind("classifier_", 0) == 0;
}

bool is_bias_like(std::string_view name) {
    auto dot = name.rfind('.');
    auto leaf = dot == std::string_view::npos ? name : name.substr(dot + 1);
    if (leaf.ends_with("_bias") || leaf.ends_with("_gain")) return true;
    return leaf == "bq" || leaf == "bk" || leaf == "bv" || leaf == "bo" || leaf == "b1" || leaf == "b2" ||
           leaf == "pooler_b" || leaf == "classifier_b";
}

EncoderParams EncoderParams::zeros(const EncoderConfig& c) {
    c.validate();
    const int H = c.hidden;
    EncoderParams p;
    p.config = c;
    p.token_embedding = Matrix::Zero(c.vocab, H);
    p.segment_embedding = Matrix::Zero(2, H);
    p.position_embedding = Matrix::Zero(c.max_len, H);
    p.emb_ln_gain = Matrix::Zero(1, H);
    p.emb_ln_bias = Matrix::Zero(1, H);
    p.layers.resize(static_cast<std::size_t>(c.layers));
    for (auto& L : p.layers) {
        L.wq = L.wk = L.wv = L.wo = Matrix::Zero(H, H);
        L.bq = L.bk = L.bv = L.bo = Matrix::Zero(1, H);
        L.ln1_gain = L.ln1_bias = L.ln2_gain = L.ln2_bias = Matrix::Zero(1, H);
        L.w1 = Matrix::Zero(H, c.ffn);
        L.b1 = Matrix::Zero(1, c.ffn);
        L.w2 = Matrix::Zero(c.ffn, H);
        L.b2 = Matrix::Zero(1, H);
    }
    p.pooler_w = Matrix::Zero(H, H);
    p.pooler_b = Matrix::Zero(1, H);
    p.classifier_w = Matrix::Zero(H, 1);
    p.classifier_b = Matrix::Zero(1, 1);
    p.mlm_bias = Matrix::Zero(1, c.vocab);
    return p;
}

std::size_t EncoderParams::parameter_count() const {
    std::size_t n = 0;
    for_each([&](std::string_view, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

namespace {

void fill_gaussian(Matrix& m, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
}

bool is_ln_gain(std::string_view name) { return name.ends_with("_gain"); }

std::vector<std::pair<std::string, Matrix*>> tensor_list(EncoderParams& p) {
    std::vector<std::pair<std::string, Matrix*>> out;
    p.for_each([&](std::string_view name, Matrix& m) { out.emplace_back(std::string(name), &m); });
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> tensor_list(const EncoderParams& p) {
    std::vector<std::pair<std::string, const Matrix*>> out;
    p.for_each([&](std::string_view name, const Matrix& m) { out.emplace_back(std::string(name), &m); });
    return out;
}

}  // namespace

EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed, double init_std) {
    auto p = EncoderParams::zeros(config);
    std::mt19937_64 rng(seed);
    p.for_each([&](std::string_view name, Matrix& m) {
        if (is_ln_gain(name)) {
            m.setOnes();
        } else if (!is_bias_like(name)) {
            fill_gaussian(m, rng, init_std);
        }
    });
    return p;
}

EncoderParams init_for_finetune(const EncoderParams& pretrained, const EncoderConfig& config,
                                std::uint64_t seed, double init_std) {
    config.validate();
    const auto& pc = pretrained.config;
    if (pc.layers != config.layers || pc.hidden != config.hidden || pc.heads != config.heads ||
        pc.ffn != config.ffn || pc.max_len != config.max_len || pc.vocab != config.vocab) {
        throw DataError("pretrained parameters do not match the fine-tuning configuration");
    }
    auto expected = EncoderParams::zeros(config);
    auto want = tensor_list(expected);
    auto have = tensor_list(pretrained);
    if (want.size() != have.size()) throw DataError("pretrained parameter set is incomplete");
    for (std::size_t i = 0; i < want.size(); ++i) {
        if (want[i].second->rows() != have[i].second->rows() ||
            want[i].second->cols() != have[i].second->cols()) {
            throw DataError("pretrained tensor " + have[i].first + " has the wrong shape");
        }
    }
    EncoderParams p = pretrained;
    p.config = config;
    std::mt19937_64 rng(seed ^ 0x5eedf00dULL);
    fill_gaussian(p.pooler_w, rng, init_std);
    p.pooler_b.setZero();
    fill_gaussian(p.classifier_w, rng, init_std);
    p.classifier_b.setZero();
    return p;
}

// ---------------------------------------------------------------------------
// Network pieces

namespace {

constexpr double ln_eps = 1e-12;

using Rng = std::mt19937_64;

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

struct LnCache {
    Matrix xhat;
    Eigen::VectorXd inv_std;
};

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LnCache& cache) {
    Eigen::VectorXd mean = x.rowwise().mean();
    Matrix centered = x.colwise() - mean;
    Eigen::VectorXd var = centered.array().square().rowwise().mean();
    cache.inv_std = (var.array() + ln_eps).rsqrt();
    cache.xhat = centered.array().colwise() * cache.inv_std.array();
    Matrix y = cache.xhat.array().rowwise() * gain.row(0).array();
    y.rowwise() += bias.row(0);
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LnCache& cache, Matrix& dgain,
                           Matrix& dbias) {
    dgain += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    dbias += dy.colwise().sum();
    Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
    Eigen::VectorXd m1 = dxhat.rowwise().mean();
    Eigen::VectorXd m2 = (dxhat.array() * cache.xhat.array()).rowwise().mean();
    Matrix dx = (dxhat.colwise() - m1).array() - cache.xhat.array().colwise() * m2.array();
    return dx.array().colwise() * cache.inv_std.array();
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
    return cdf + x * pdf;
}

// Inverted dropout; an empty mask means the layer was not dropped.
void dropout(Matrix& x, double rate, Rng* rng, Matrix& mask) {
    if (rng == nullptr || rate <= 0.0) {
        mask.resize(0, 0);
        return;
    }
    mask.resize(x.rows(), x.cols());
    const double keep = 1.0 / (1.0 - rate);
    for (Eigen::Index j = 0; j < x.cols(); ++j)
        for (Eigen::Index i = 0; i < x.rows(); ++i) mask(i, j) = uniform01(*rng) < rate ? 0.0 : keep;
    x.array() *= mask.array();
}

void dropout_backward(Matrix& dx, const Matrix& mask) {
    if (mask.size() > 0) dx.array() *= mask.array();
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = x * w;
    y.rowwise() += b.row(0);
    return y;
}

struct LayerCache {
    Matrix x, q, k, v;
    std::vector<Matrix> probs;
    Matrix ctx, attn_mask;
    LnCache ln1;
    Matrix e1, f1, g, ffn_mask;
    LnCache ln2;
};

struct EncoderCache {
    int rows = 0;
    LnCache ln0;
    Matrix emb_mask;
    std::vector<LayerCache> layers;
    Matrix hidden;
};

void check_encoding(const EncoderParams& params, const InputEncoding& enc) {
    const auto S = enc.token_ids.size();
    const auto& c = params.config;
    if (enc.segment_ids.size() != S || enc.position_ids.size() != S || enc.attention_mask.size() != S) {
        throw DataError("encoding arrays differ in length");
    }
    if (S > static_cast<std::size_t>(c.max_len)) {
        throw DataError("encoding longer than the model's maximum sequence length");
    }
    if (enc.length < 1 || static_cast<std::size_t>(enc.length) > S) throw DataError("bad encoding length");
    for (std::size_t i = 0; i < S; ++i) {
        if (enc.attention_mask[i] != (static_cast<int>(i) < enc.length ? 1 : 0)) {
            throw DataError("attention mask must be a prefix of ones covering the true length");
        }
        if (enc.token_ids[i] < 0 || enc.token_ids[i] >= c.vocab) throw DataError("token id outside the vocabulary");
        if (enc.segment_ids[i] != 0 && enc.segment_ids[i] != 1) throw DataError("segment id must be 0 or 1");
        if (enc.position_ids[i] < 0 || enc.position_ids[i] >= c.max_len) throw DataError("position id out of range");
    }
}

void check_finite(const EncoderParams& params) {
    params.for_each([](std::string_view name, const Matrix& m) {
        if (!m.allFinite()) throw NumericError("parameter " + std::string(name) + " is not finite");
    });
}

// Runs the embedding layer and transformer stack over the first `rows`
// positions of the encoding. Masked key positions get zero attention.
const Matrix& run_encoder(const EncoderParams& P, const InputEncoding& enc, int rows, Rng* rng,
                          EncoderCache& cache, AttentionTrace* trace) {
    const auto& c = P.config;
    const int H = c.hidden;
    const int A = c.heads;
    const int d = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    cache.rows = rows;

    Matrix x0(rows, H);
    for (int i = 0; i < rows; ++i) {
        x0.row(i) = P.token_embedding.row(enc.token_ids[i]) + P.segment_embedding.row(enc.segment_ids[i]) +
                    P.position_embedding.row(enc.position_ids[i]);
    }
    Matrix x = layer_norm(x0, P.emb_ln_gain, P.emb_ln_bias, cache.ln0);
    dropout(x, c.dropout, rng, cache.emb_mask);

    std::vector<int> masked_cols;
    for (int j = 0; j < rows; ++j)
        if (enc.attention_mask[j] == 0) masked_cols.push_back(j);

    cache.layers.resize(P.layers.size());
    for (std::size_t l = 0; l < P.layers.size(); ++l) {
        const auto& L = P.layers[l];
        auto& lc = cache.layers[l];
        lc.x = std::move(x);
        lc.q = affine(lc.x, L.wq, L.bq);
        lc.k = affine(lc.x, L.wk, L.bk);
        lc.v = affine(lc.x, L.wv, L.bv);
        lc.ctx.resize(rows, H);
        lc.probs.resize(static_cast<std::size_t>(A));
        for (int h = 0; h < A; ++h) {
            Matrix s = lc.q.middleCols(h * d, d) * lc.k.middleCols(h * d, d).transpose();
            s *= scale;
            for (int j : masked_cols) s.col(j).setConstant(-std::numeric_limits<double>::infinity());
            Eigen::VectorXd row_max = s.rowwise().maxCoeff();
            Matrix e = (s.colwise() - row_max).array().exp();
            Eigen::VectorXd row_sum = e.rowwise().sum();
            auto& prob = lc.probs[static_cast<std::size_t>(h)];
            prob = e.array().colwise() / row_sum.array();
            lc.ctx.middleCols(h * d, d) = prob * lc.v.middleCols(h * d, d);
            if (trace) {
                const int n = enc.length;
                trace->matrices.push_back(prob.topLeftCorner(n, n));
            }
        }
        Matrix a = affine(lc.ctx, L.wo, L.bo);
        dropout(a, c.dropout, rng, lc.attn_mask);
        lc.e1 = layer_norm(lc.x + a, L.ln1_gain, L.ln1_bias, lc.ln1);
        lc.f1 = affine(lc.e1, L.w1, L.b1);
        lc.g = lc.f1.unaryExpr([](double v) { return gelu(v); });
        Matrix f2 = affine(lc.g, L.w2, L.b2);
        dropout(f2, c.dropout, rng, lc.ffn_mask);
        x = layer_norm(lc.e1 + f2, L.ln2_gain, L.ln2_bias, lc.ln2);
    }
    cache.hidden = std::move(x);
    return cache.hidden;
}

void backward_encoder(const EncoderParams& P, const InputEncoding& enc, const EncoderCache& cache,
                      Matrix dx, EncoderParams& G) {
    const auto& c = P.config;
    const int A = c.heads;
    const int d = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const int rows = cache.rows;

    for (std::size_t li = P.layers.size(); li-- > 0;) {
        const auto& L = P.layers[li];
        auto& GL = G.layers[li];
        const auto& lc = cache.layers[li];

        Matrix dr2 = layer_norm_backward(dx, L.ln2_gain, lc.ln2, GL.ln2_gain, GL.ln2_bias);
        Matrix de1 = dr2;
        Matrix df2 = dr2;
        dropout_backward(df2, lc.ffn_mask);
        GL.w2.noalias() += lc.g.transpose() * df2;
        GL.b2 += df2.colwise().sum();
        Matrix dg = df2 * L.w2.transpose();
        Matrix df1 = dg.array() * lc.f1.unaryExpr([](double v) { return gelu_grad(v); }).array();
        GL.w1.noalias() += lc.e1.transpose() * df1;
        GL.b1 += df1.colwise().sum();
        de1.noalias() += df1 * L.w1.transpose();

        Matrix dr1 = layer_norm_backward(de1, L.ln1_gain, lc.ln1, GL.ln1_gain, GL.ln1_bias);
        Matrix dxl = dr1;
        Matrix da = dr1;
        dropout_backward(da, lc.attn_mask);
        GL.wo.noalias() += lc.ctx.transpose() * da;
        GL.bo += da.colwise().sum();
        Matrix dctx = da * L.wo.transpose();

        Matrix dq = Matrix::Zero(rows, c.hidden);
        Matrix dk = Matrix::Zero(rows, c.hidden);
        Matrix dv = Matrix::Zero(rows, c.hidden);
        for (int h = 0; h < A; ++h) {
            const auto& prob = lc.probs[static_cast<std::size_t>(h)];
            auto dch = dctx.middleCols(h * d, d);
            Matrix dprob = dch * lc.v.middleCols(h * d, d).transpose();
            dv.middleCols(h * d, d).noalias() += prob.transpose() * dch;
            Eigen::VectorXd row_dot = (dprob.array() * prob.array()).rowwise().sum();
            Matrix ds = prob.array() * (dprob.colwise() - row_dot).array();
            ds *= scale;
            dq.middleCols(h * d, d).noalias() += ds * lc.k.middleCols(h * d, d);
            dk.middleCols(h * d, d).noalias() += ds.transpose() * lc.q.middleCols(h * d, d);
        }
        GL.wq.noalias() += lc.x.transpose() * dq;
        GL.bq += dq.colwise().sum();
        GL.wk.noalias() += lc.x.transpose() * dk;
        GL.bk += dk.colwise().sum();
        GL.wv.noalias() += lc.x.transpose() * dv;
        GL.bv += dv.colwise().sum();
        dxl.noalias() += dq * L.wq.transpose();
        dxl.noalias() += dk * L.wk.transpose();
        dxl.noalias() += dv * L.wv.transpose();
        dx = std::move(dxl);
    }

    dropout_backward(dx, cache.emb_mask);
    Matrix dx0 = layer_norm_backward(dx, P.emb_ln_gain, cache.ln0, G.emb_ln_gain, G.emb_ln_bias);
    for (int i = 0; i < rows; ++i) {
        G.token_embedding.row(enc.token_ids[i]) += dx0.row(i);
        G.segment_embedding.row(enc.segment_ids[i]) += dx0.row(i);
        G.position_embedding.row(enc.position_ids[i]) += dx0.row(i);
    }
}

struct HeadOutput {
    Eigen::RowVectorXd cls;
    Eigen::RowVectorXd pooled;
    double logit = 0.0;
    double probability = 0.0;
};

HeadOutput run_head(const EncoderParams& P, const Matrix& hidden) {
    HeadOutput out;
    out.cls = hidden.row(0);
    Eigen::RowVectorXd z = out.cls * P.pooler_w + P.pooler_b.row(0);
    out.pooled = z.array().tanh();
    out.logit = (out.pooled * P.classifier_w)(0, 0) + P.classifier_b(0, 0);
    out.probability = 1.0 / (1.0 + std::exp(-out.logit));
    return out;
}

Matrix backward_head(const EncoderParams& P, const HeadOutput& h, double dlogit, int rows,
                     EncoderParams& G) {
    G.classifier_w += h.pooled.transpose() * dlogit;
    G.classifier_b(0, 0) += dlogit;
    Eigen::RowVectorXd dpooled = P.classifier_w.transpose() * dlogit;
    Eigen::RowVectorXd dz = dpooled.array() * (1.0 - h.pooled.array().square());
    G.pooler_w += h.cls.transpose() * dz;
    G.pooler_b += dz;
    Matrix dhidden = Matrix::Zero(rows, P.config.hidden);
    dhidden.row(0) = dz * P.pooler_w.transpose();
    return dhidden;
}

int rows_for(const InputEncoding& enc, bool trim) {
    return trim ? enc.length : static_cast<int>(enc.token_ids.size());
}

}  // namespace

ForwardResult forward(const EncoderParams& params, const InputEncoding& encoding,
                      const ForwardOptions& options) {
    check_finite(params);
    check_encoding(params, encoding);
    EncoderCache cache;
    AttentionTrace trace;
    AttentionTrace* tp = nullptr;
    if (options.capture_attention) {
        trace.layers = params.config.layers;
        trace.heads = params.config.heads;
        trace.token_ids.assign(encoding.token_ids.begin(), encoding.token_ids.begin() + encoding.length);
        tp = &trace;
    }
    const auto& hidden = run_encoder(params, encoding, rows_for(encoding, options.trim_padding), nullptr, cache, tp);
    auto head = run_head(params, hidden);
    ForwardResult out;
    out.probability = head.probability;
    out.logit = head.logit;
    if (tp) out.attention = std::move(trace);
    return out;
}

Matrix encode_hidden(const EncoderParams& params, const InputEncoding& encoding) {
    check_encoding(params, encoding);
    EncoderCache cache;
    return run_encoder(params, encoding, encoding.length, nullptr, cache, nullptr);
}

LossResult loss_and_gradients(const EncoderParams& params, std::span<const LabeledEncoding> batch,
                              std::optional<std::uint64_t> dropout_seed) {
    if (batch.empty()) throw DataError("loss requested for an empty batch");
    constexpr double p_floor = 1e-12;
    LossResult result;
    result.gradients = EncoderParams::zeros(params.config);
    std::optional<Rng> rng;
    if (dropout_seed) rng.emplace(*dropout_seed);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const auto& ex : batch) {
        check_encoding(params, ex.encoding);
        if (ex.label != 0 && ex.label != 1) throw DataError("labels must be 0 or 1");
        EncoderCache cache;
        const auto& hidden = run_encoder(params, ex.encoding, ex.encoding.length, rng ? &*rng : nullptr, cache, nullptr);
        auto head = run_head(params, hidden);
        double p = head.probability;
        if (p < p_floor || p > 1.0 - p_floor) {
            ++result.clamped;
            p = std::clamp(p, p_floor, 1.0 - p_floor);
        }
        const double y = ex.label;
        result.loss -= inv_b * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
        double dlogit = (head.probability - y) * inv_b;
        Matrix dhidden = backward_head(params, head, dlogit, cache.rows, result.gradients);
        backward_encoder(params, ex.encoding, cache, std::move(dhidden), result.gradients);
    }
    return result;
}

double dataset_loss(const EncoderParams& params, std::span<const LabeledEncoding> data) {
    if (data.empty()) throw DataError("loss requested for an empty dataset");
    double total = 0.0;
    for (const auto& ex : data) {
        double p = std::clamp(forward(params, ex.encoding).probability, 1e-12, 1.0 - 1e-12);
        total -= ex.label ? std::log(p) : std::log(1.0 - p);
    }
    return total / static_cast<double>(data.size());
}

double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

GradientCheckResult gradient_check(const EncoderParams& params, const InputEncoding& encoding, int label,
                                   const GradientCheckOptions& options) {
    if (!(options.epsilon > 0.0)) throw UsageError("finite-difference step must be positive");
    LabeledEncoding ex{encoding, label};
    auto analytic = loss_and_gradients(params, std::span(&ex, 1));
    EncoderParams probe = params;
    auto probe_tensors = tensor_list(probe);
    auto grad_tensors = tensor_list(std::as_const(analytic.gradients));
    auto loss_at = [&] { return loss_and_gradients(probe, std::span(&ex, 1)).loss; };

    GradientCheckResult result;
    Rng rng(options.seed);
    for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
        auto& [name, tensor] = probe_tensors[t];
        const Matrix& grad = *grad_tensors[t].second;
        std::vector<Eigen::Index> coords(static_cast<std::size_t>(tensor->size()));
        std::iota(coords.begin(), coords.end(), 0);
        if (options.coords_per_tensor > 0 && !is_bias_like(name) && coords.size() > options.coords_per_tensor) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(options.coords_per_tensor);
        }
        for (auto idx : coords) {
            double& w = tensor->data()[idx];
            const double saved = w;
            w = saved + options.epsilon;
            const double up = loss_at();
            w = saved - options.epsilon;
            const double down = loss_at();
            w = saved;
            const double numeric = (up - down) / (2.0 * options.epsilon);
            const double err = relative_error(grad.data()[idx], numeric);
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_tensor = name;
            }
            ++result.coordinates_checked;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Masked-token objective

MaskedExample mask_tokens(const InputEncoding& encoding, double rate, std::uint64_t seed,
                          bool always_mask_token) {
    if (!(rate > 0.0) || rate >= 1.0) throw UsageError("mask rate must lie in (0, 1)");
    MaskedExample ex;
    ex.encoding = encoding;
    std::vector<int> candidates;
    for (int i = 0; i < encoding.length; ++i)
        if (encoding.token_ids[static_cast<std::size_t>(i)] >= static_cast<int>(SubwordVocab::reserved_count))
            candidates.push_back(i);
    if (candidates.empty()) return ex;
    auto count = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(rate * static_cast<double>(candidates.size()))));
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng() % (candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
    }
    candidates.resize(count);
    std::sort(candidates.begin(), candidates.end());
    // Vocab size is not known here, so random replacements draw from the ids
    // already present in the sequence.
    std::vector<int> pool;
    for (int i = 0; i < encoding.length; ++i) {
        int id = encoding.token_ids[static_cast<std::size_t>(i)];
        if (id >= static_cast<int>(SubwordVocab::reserved_count)) pool.push_back(id);
    }
    for (int pos : candidates) {
        auto& tok = ex.encoding.token_ids[static_cast<std::size_t>(pos)];
        ex.positions.push_back(pos);
        ex.targets.push_back(tok);
        double r = always_mask_token ? 0.0 : uniform01(rng);
        if (r < 0.8) {
            tok = SubwordVocab::mask_id;
        } else if (r < 0.9) {
            tok = pool[static_cast<std::size_t>(rng() % pool.size())];
        }
    }
    return ex;
}

MlmLossResult mlm_loss_and_gradients(const EncoderParams& params, std::span<const MaskedExample> batch,
                                     std::optional<std::uint64_t> dropout_seed) {
    std::size_t total = 0;
    for (const auto& ex : batch) total += ex.positions.size();
    if (total == 0) throw DataError("masked-token loss needs at least one masked position");
    MlmLossResult result;
    result.gradients = EncoderParams::zeros(params.config);
    std::optional<Rng> rng;
    if (dropout_seed) rng.emplace(*dropout_seed);
    const double inv = 1.0 / static_cast<double>(total);
    for (const auto& ex : batch) {
        if (ex.positions.empty()) continue;
        check_encoding(params, ex.encoding);
        EncoderCache cache;
        const auto& hidden = run_encoder(params, ex.encoding, ex.encoding.length, rng ? &*rng : nullptr, cache, nullptr);
        const auto m = static_cast<Eigen::Index>(ex.positions.size());
        Matrix hm(m, params.config.hidden);
        for (Eigen::Index i = 0; i < m; ++i) hm.row(i) = hidden.row(ex.positions[static_cast<std::size_t>(i)]);
        Matrix logits = hm * params.token_embedding.transpose();
        logits.rowwise() += params.mlm_bias.row(0);
        Eigen::VectorXd row_max = logits.rowwise().maxCoeff();
        Matrix e = (logits.colwise() - row_max).array().exp();
        Eigen::VectorXd row_sum = e.rowwise().sum();
        Matrix prob = e.array().colwise() / row_sum.array();
        for (Eigen::Index i = 0; i < m; ++i) {
            int target = ex.targets[static_cast<std::size_t>(i)];
            result.loss -= inv * (logits(i, target) - row_max(i) - std::log(row_sum(i)));
            prob(i, target) -= 1.0;
        }
        Matrix dlogits = prob * inv;
        result.gradients.token_embedding.noalias() += dlogits.transpose() * hm;
        result.gradients.mlm_bias += dlogits.colwise().sum();
        Matrix dhm = dlogits * params.token_embedding;
        Matrix dhidden = Matrix::Zero(cache.rows, params.config.hidden);
        for (Eigen::Index i = 0; i < m; ++i) dhidden.row(ex.positions[static_cast<std::size_t>(i)]) += dhm.row(i);
        backward_encoder(params, ex.encoding, cache, std::move(dhidden), result.gradients);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Optimization

namespace {

class Adam {
  public:
    Adam(const EncoderParams& like, const TrainOptions& opt)
        : m_(EncoderParams::zeros(like.config)), v_(EncoderParams::zeros(like.config)), opt_(opt) {}

    void step(EncoderParams& params, EncoderParams& grads) {
        ++t_;
        auto p = tensor_list(params);
        auto g = tensor_list(grads);
        auto m = tensor_list(m_);
        auto v = tensor_list(v_);
        if (opt_.clip_norm > 0.0) {
            double sq = 0.0;
            for (auto& [_, gt] : g) sq += gt->squaredNorm();
            const double norm = std::sqrt(sq);
            if (norm > opt_.clip_norm) {
                for (auto& [_, gt] : g) *gt *= opt_.clip_norm / norm;
            }
        }
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < p.size(); ++i) {
            auto& pm = *p[i].second;
            auto& gm = *g[i].second;
            auto& mm = *m[i].second;
            auto& vm = *v[i].second;
            mm = opt_.beta1 * mm + (1.0 - opt_.beta1) * gm;
            vm = opt_.beta2 * vm + (1.0 - opt_.beta2) * gm.cwiseProduct(gm);
            Matrix update = (mm.array() / c1) / ((vm.array() / c2).sqrt() + opt_.adam_eps);
            if (opt_.weight_decay > 0.0 && !is_bias_like(p[i].first)) update += opt_.weight_decay * pm;
            pm -= opt_.lr * update;
        }
    }

  private:
    EncoderParams m_;
    EncoderParams v_;
    TrainOptions opt_;
    long t_ = 0;
};

// Cycles through a dataset in seeded shuffled order, reshuffling per epoch.
class BatchSampler {
  public:
    BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng_);
    }

    std::vector<std::size_t> next(std::size_t batch) {
        std::vector<std::size_t> out;
        out.reserve(batch);
        while (out.size() < std::min(batch, order_.size())) {
            if (cursor_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                cursor_ = 0;
            }
            out.push_back(order_[cursor_++]);
        }
        return out;
    }

  private:
    std::vector<std::size_t> order_;
    Rng rng_;
    std::size_t cursor_ = 0;
};

void check_loss(double loss, std::size_t step) {
    if (!std::isfinite(loss)) {
        throw NumericError("training diverged at step " + std::to_string(step) + " (loss is not finite)");
    }
}

}  // namespace

TrainResult train(EncoderParams params, std::span<const LabeledEncoding> data, const TrainOptions& options) {
    if (data.empty()) throw DataError("training set is empty");
    if (options.batch < 1) throw UsageError("batch size must be at least 1");
    TrainResult result{std::move(params), {}};
    if (options.steps == 0) return result;
    Adam adam(result.params, options);
    BatchSampler sampler(data.size(), options.seed);
    const bool use_dropout = result.params.config.dropout > 0.0;
    std::vector<LabeledEncoding> batch;
    for (std::size_t step = 1; step <= options.steps; ++step) {
        batch.clear();
        for (auto i : sampler.next(options.batch)) batch.push_back(data[i]);
        auto seed = use_dropout ? std::optional<std::uint64_t>(mix_seed(options.seed, step)) : std::nullopt;
        auto lr = loss_and_gradients(result.params, batch, seed);
        check_loss(lr.loss, step);
        adam.step(result.params, lr.gradients);
        result.loss_curve.push_back(lr.loss);
        if (options.on_step) options.on_step(step, lr.loss);
    }
    return result;
}

TrainResult pretrain_masked(const EncoderConfig& config, std::span<const std::vector<int>> sequences,
                            const PretrainOptions& options) {
    return pretrain_masked(init_params(config, options.train.seed), sequences, options);
}

TrainResult pretrain_masked(EncoderParams params, std::span<const std::vector<int>> sequences,
                            const PretrainOptions& options) {
    if (!(options.mask_rate > 0.0) || options.mask_rate >= 1.0) {
        throw UsageError("mask rate must lie in (0, 1)");
    }
    std::vector<InputEncoding> encodings;
    for (const auto& s : sequences)
        if (!s.empty()) encodings.push_back(encode_sequence(s, params.config));
    if (encodings.empty()) throw DataError("pretraining corpus is empty");
    const auto& opt = options.train;
    if (opt.batch < 1) throw UsageError("batch size must be at least 1");
    TrainResult result{std::move(params), {}};
    if (opt.steps == 0) return result;
    Adam adam(result.params, opt);
    BatchSampler sampler(encodings.size(), opt.seed);
    const bool use_dropout = result.params.config.dropout > 0.0;
    std::vector<MaskedExample> batch;
    for (std::size_t step = 1; step <= opt.steps; ++step) {
        batch.clear();
        for (auto i : sampler.next(opt.batch)) {
            batch.push_back(mask_tokens(encodings[i], options.mask_rate, mix_seed(opt.seed ^ 0x6d61736bULL, step * 1000003ULL + i)));
        }
        std::size_t masked = 0;
        for (const auto& b : batch) masked += b.positions.size();
        if (masked == 0) {
            result.loss_curve.push_back(result.loss_curve.empty() ? 0.0 : result.loss_curve.back());
            continue;
        }
        auto seed = use_dropout ? std::optional<std::uint64_t>(mix_seed(opt.seed, step)) : std::nullopt;
        auto lr = mlm_loss_and_gradients(result.params, batch, seed);
        check_loss(lr.loss, step);
        adam.step(result.params, lr.gradients);
        result.loss_curve.push_back(lr.loss);
        if (opt.on_step) opt.on_step(step, lr.loss);
    }
    return result;
}

double masked_accuracy(const EncoderParams& params, std::span<const std::vector<int>> sequences, double rate,
                       std::uint64_t seed) {
    std::size_t total = 0;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        if (sequences[s].empty()) continue;
        auto ex = mask_tokens(encode_sequence(sequences[s], params.config), rate, mix_seed(seed, s), true);
        if (ex.positions.empty()) continue;
        EncoderCache cache;
        const auto& hidden = run_encoder(params, ex.encoding, ex.encoding.length, nullptr, cache, nullptr);
        for (std::size_t i = 0; i < ex.positions.size(); ++i) {
            Eigen::RowVectorXd logits = hidden.row(ex.positions[i]) * params.token_embedding.transpose();
            logits += params.mlm_bias.row(0);
            Eigen::Index best = 0;
            logits.maxCoeff(&best);
            ++total;
            if (static_cast<int>(best) == ex.targets[i]) ++correct;
        }
    }
    if (total == 0) throw DataError("no maskable tokens to evaluate");
    return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char checkpoint_magic[8] = {'C', 'T', 'X', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t checkpoint_version = 1;
}  // namespace

void save_checkpoint(std::ostream& out, const EncoderParams& params) {
    nlohmann::json header;
    header["config"] = params.config;
    nlohmann::json tensors = nlohmann::json::array();
    params.for_each([&](std::string_view name, const Matrix& m) {
        tensors.push_back({{"name", std::string(name)}, {"rows", m.rows()}, {"cols", m.cols()}});
    });
    header["tensors"] = tensors;
    header["layout"] = "row-major float64 little-endian";
    const std::string text = header.dump();
    const std::uint64_t len = text.size();
    out.write(checkpoint_magic, sizeof checkpoint_magic);
    out.write(reinterpret_cast<const char*>(&checkpoint_version), sizeof checkpoint_version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    params.for_each([&](std::string_view, const Matrix& m) {
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
        out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
    });
}

EncoderParams load_checkpoint(std::istream& in) {
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, checkpoint_magic, sizeof magic) != 0) throw DataError("not a checkpoint file");
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    if (!in || version != checkpoint_version) throw DataError("unsupported checkpoint version");
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len > (1ULL << 30)) throw DataError("corrupt checkpoint header");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("corrupt checkpoint header: ") + e.what());
    }
    auto config = header.at("config").get<EncoderConfig>();
    auto params = EncoderParams::zeros(config);
    const auto& tensors = header.at("tensors");
    std::size_t i = 0;
    params.for_each([&](std::string_view name, Matrix& m) {
        if (i >= tensors.size() || tensors[i].at("name").get<std::string>() != name ||
            tensors[i].at("rows").get<Eigen::Index>() != m.rows() ||
            tensors[i].at("cols").get<Eigen::Index>() != m.cols()) {
            throw DataError("checkpoint tensor table does not match its configuration at " + std::string(name));
        }
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(m.rows(), m.cols());
        in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
        if (!in) throw DataError("checkpoint truncated in tensor " + std::string(name));
        m = rm;
        ++i;
    });
    if (i != tensors.size()) throw DataError("checkpoint carries unexpected tensors");
    return params;
}

void save_checkpoint(const std::filesystem::path& path, const EncoderParams& params) {
    write_file_atomic(path, [&](std::ostream& out) { save_checkpoint(out, params); }, true);
}

EncoderParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint \"" + path.string() + "\"");
    return load_checkpoint(in);
}

}  // namespace ctxrank
