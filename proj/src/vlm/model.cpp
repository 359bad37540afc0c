#include "ifcd/vlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ifcd/numerics/mlp.hpp"
#include "ifcd/numerics/ops.hpp"
#include "ifcd/numerics/rng.hpp"

namespace ifcd::vlm {

namespace nm = ifcd::numerics;

std::string to_string(LayerSite site) {
    return "b" + std::to_string(site.block) + (site.kind == SiteKind::attention_output ? ".attn" : ".ffn");
}

LayerSite layer_site_from_string(const std::string& s) {
    const auto dot = s.find('.');
    if (s.size() < 3 || s[0] != 'b' || dot == std::string::npos || dot < 2) {
        throw VlmError("bad layer site '" + s + "' (expected e.g. b1.ffn)");
    }
    LayerSite site;
    const std::string idx = s.substr(1, dot - 1);
    if (!std::all_of(idx.begin(), idx.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw VlmError("bad layer site '" + s + "'");
    }
    site.block = std::stoul(idx);
    const std::string kind = s.substr(dot + 1);
    if (kind == "attn") {
        site.kind = SiteKind::attention_output;
    } else if (kind == "ffn") {
        site.kind = SiteKind::ffn_output;
    } else {
        throw VlmError("bad layer site '" + s + "'");
    }
    return site;
}

std::vector<LayerSite> all_sites(std::size_t n_blocks) {
    std::vector<LayerSite> out;
    for (std::size_t b = 0; b < n_blocks; ++b) {
        out.push_back({b, SiteKind::attention_output});
        out.push_back({b, SiteKind::ffn_output});
    }
    return out;
}

HookBundle HookBundle::capture(std::vector<LayerSite> sites) {
    HookBundle h;
    h.mode_ = Mode::capture;
    h.sites_ = std::move(sites);
    return h;
}

HookBundle HookBundle::edit(std::map<LayerSite, Editor> editors) {
    HookBundle h;
    h.mode_ = Mode::edit;
    for (const auto& [site, _] : editors) {
        h.sites_.push_back(site);
    }
    h.editors_ = std::move(editors);
    return h;
}

bool HookBundle::watches(LayerSite site) const {
    return std::find(sites_.begin(), sites_.end(), site) != sites_.end();
}

const std::vector<Vec>& HookBundle::captured(LayerSite site) const {
    const auto it = buffers_.find(site);
    if (it == buffers_.end()) {
        throw VlmError("no capture recorded for site " + to_string(site));
    }
    return it->second;
}

void HookBundle::on_site(LayerSite site, std::vector<Vec>& rows) {
    if (mode_ == Mode::capture) {
        buffers_[site] = rows;
        return;
    }
    const auto& editor = editors_.at(site);
    for (std::size_t t = 0; t < rows.size(); ++t) {
        Vec edited = editor(rows[t], t);
        if (edited.size() != rows[t].size()) {
            throw VlmError("editor changed the dimension at site " + to_string(site));
        }
        rows[t] = std::move(edited);
    }
}

TokenDistribution TokenDistribution::from_logits(Vec logits) {
    TokenDistribution d;
    d.probs = nm::softmax(logits);
    d.logits = std::move(logits);
    return d;
}

namespace {

Matrix uniform_matrix(std::size_t rows, std::size_t cols, nm::Rng& rng) {
    Matrix m(rows, cols);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    for (auto& w : m.flat()) {
        w = rng.uniform(-bound, bound);
    }
    return m;
}

Matrix normal_matrix(std::size_t rows, std::size_t cols, double sd, nm::Rng& rng) {
    Matrix m(rows, cols);
    for (auto& w : m.flat()) {
        w = sd * rng.normal();
    }
    return m;
}

// y = W x + b
void affine(const Matrix& w, const Vec& b, std::span<const double> x, std::span<double> y) {
    const std::size_t in = w.cols();
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const double* wr = w.row(r).data();
        double s = b[r];
        for (std::size_t c = 0; c < in; ++c) {
            s += wr[c] * x[c];
        }
        y[r] = s;
    }
}

// dx += W^T dy
void affine_backward_input(const Matrix& w, std::span<const double> dy, std::span<double> dx) {
    const std::size_t in = w.cols();
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const double g = dy[r];
        if (g == 0.0) {
            continue;
        }
        const double* wr = w.row(r).data();
        for (std::size_t c = 0; c < in; ++c) {
            dx[c] += wr[c] * g;
        }
    }
}

// dW += dy x^T, db += dy
void affine_backward_params(std::span<const double> dy, std::span<const double> x, Matrix& dw, Vec& db) {
    const std::size_t in = dw.cols();
    for (std::size_t r = 0; r < dw.rows(); ++r) {
        const double g = dy[r];
        db[r] += g;
        if (g == 0.0) {
            continue;
        }
        double* wr = &dw(r, 0);
        for (std::size_t c = 0; c < in; ++c) {
            wr[c] += g * x[c];
        }
    }
}

struct BlockCache {
    std::vector<nm::LayerNormCache> ln1, ln2;
    Matrix a, q, k, v, ctx, n2, h, r;
    std::vector<Vec> weights;  // causal attention weights, row t has t + 1 entries
};

struct ForwardCache {
    std::vector<BlockCache> blocks;
};

void rows_to_matrix(const std::vector<Vec>& rows, Matrix& m) {
    for (std::size_t t = 0; t < rows.size(); ++t) {
        std::copy(rows[t].begin(), rows[t].end(), m.row(t).begin());
    }
}

std::vector<Vec> matrix_to_rows(const Matrix& m) {
    std::vector<Vec> rows(m.rows());
    for (std::size_t t = 0; t < m.rows(); ++t) {
        rows[t].assign(m.row(t).begin(), m.row(t).end());
    }
    return rows;
}

void run_hook(HookBundle* hooks, LayerSite site, Matrix& out) {
    if (hooks == nullptr || !hooks->watches(site)) {
        return;
    }
    auto rows = matrix_to_rows(out);
    hooks->on_site(site, rows);
    rows_to_matrix(rows, out);
}

void check_sequence(const ToyVlmParams& p, const Sequence& seq) {
    if (seq.length() == 0) {
        throw VlmError("empty sequence");
    }
    if (seq.length() > p.hyper.max_positions) {
        throw VlmError("sequence of length " + std::to_string(seq.length()) + " exceeds max_positions " +
                       std::to_string(p.hyper.max_positions));
    }
    for (const auto& f : seq.features) {
        if (f.size() != p.feature_dim) {
            throw VlmError("visual feature dimension mismatch");
        }
    }
    for (auto id : seq.tokens) {
        if (id >= p.vocab.size()) {
            throw VlmError("unknown token id " + std::to_string(id));
        }
    }
}

// Returns the final residual stream (T x d). Fills `cache` when non-null.
Matrix run_blocks(const ToyVlmParams& p, const Sequence& seq, HookBundle* hooks, ForwardCache* cache) {
    check_sequence(p, seq);
    const std::size_t d = p.hyper.d_model;
    const std::size_t dff = p.hyper.d_ff;
    const std::size_t nv = seq.features.size();
    const std::size_t T = seq.length();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Matrix x(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        auto row = x.row(t);
        if (t < nv) {
            affine(p.visual_weight, p.visual_bias, seq.features[t], row);
        } else {
            const auto e = p.token_embedding.row(seq.tokens[t - nv]);
            std::copy(e.begin(), e.end(), row.begin());
        }
        nm::axpy(1.0, p.position_embedding.row(t), row);
    }
    if (cache != nullptr) {
        cache->blocks.assign(p.blocks.size(), {});
    }

    for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
        const auto& b = p.blocks[bi];
        BlockCache local;
        BlockCache& c = cache != nullptr ? cache->blocks[bi] : local;
        c.ln1.resize(T);
        c.ln2.resize(T);
        c.a = Matrix(T, d);
        c.q = Matrix(T, d);
        c.k = Matrix(T, d);
        c.v = Matrix(T, d);
        c.ctx = Matrix(T, d);
        c.n2 = Matrix(T, d);
        c.h = Matrix(T, dff);
        c.r = Matrix(T, dff);
        c.weights.assign(T, {});
        for (std::size_t t = 0; t < T; ++t) {
            const Vec a = nm::layer_norm(x.row(t), b.ln1_gain, b.ln1_bias, &c.ln1[t]);
            std::copy(a.begin(), a.end(), c.a.row(t).begin());
            affine(b.wq, b.bq, a, c.q.row(t));
            affine(b.wk, b.bk, a, c.k.row(t));
            affine(b.wv, b.bv, a, c.v.row(t));
        }
        Matrix attn_out(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            Vec scores(t + 1);
            for (std::size_t j = 0; j <= t; ++j) {
                scores[j] = nm::dot(c.q.row(t), c.k.row(j)) * inv_sqrt_d;
            }
            c.weights[t] = nm::softmax(scores);
            auto ctx = c.ctx.row(t);
            for (std::size_t j = 0; j <= t; ++j) {
                nm::axpy(c.weights[t][j], c.v.row(j), ctx);
            }
            affine(b.wo, b.bo, ctx, attn_out.row(t));
        }
        run_hook(hooks, {bi, SiteKind::attention_output}, attn_out);
        for (std::size_t t = 0; t < T; ++t) {
            nm::axpy(1.0, attn_out.row(t), x.row(t));
        }

        Matrix ffn_out(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            const Vec n2 = nm::layer_norm(x.row(t), b.ln2_gain, b.ln2_bias, &c.ln2[t]);
            std::copy(n2.begin(), n2.end(), c.n2.row(t).begin());
            auto h = c.h.row(t);
            affine(b.w1, b.b1, n2, h);
            auto r = c.r.row(t);
            for (std::size_t i = 0; i < dff; ++i) {
                r[i] = h[i] > 0.0 ? h[i] : 0.0;
            }
            affine(b.w2, b.b2, r, ffn_out.row(t));
        }
        run_hook(hooks, {bi, SiteKind::ffn_output}, ffn_out);
        for (std::size_t t = 0; t < T; ++t) {
            nm::axpy(1.0, ffn_out.row(t), x.row(t));
        }
    }
    return x;
}

const Matrix& output_matrix(const ToyVlmParams& p) {
    return p.hyper.tie_embeddings ? p.token_embedding : p.output_weight;
}

Vec logits_of(const ToyVlmParams& p, std::span<const double> x, nm::LayerNormCache* cache, Vec* normalized) {
    Vec z = nm::layer_norm(x, p.lnf_gain, p.lnf_bias, cache);
    Vec logits(p.vocab.size());
    affine(output_matrix(p), p.output_bias, z, logits);
    if (normalized != nullptr) {
        *normalized = std::move(z);
    }
    return logits;
}

}  // namespace

ToyVlmParams ToyVlmParams::init(Vocab vocab, std::size_t feature_dim, const VlmHyper& hyper, nm::Rng& rng) {
    if (hyper.d_model == 0 || hyper.d_ff == 0 || hyper.n_blocks == 0 || hyper.max_positions == 0) {
        throw VlmError("model dimensions must be positive");
    }
    if (feature_dim == 0) {
        throw VlmError("feature_dim must be positive");
    }
    ToyVlmParams p;
    p.vocab = std::move(vocab);
    p.hyper = hyper;
    p.feature_dim = feature_dim;
    const std::size_t d = hyper.d_model;
    const std::size_t V = p.vocab.size();
    p.token_embedding = normal_matrix(V, d, hyper.embed_std, rng);
    p.position_embedding = normal_matrix(hyper.max_positions, d, hyper.position_std, rng);
    p.visual_weight = uniform_matrix(d, feature_dim, rng);
    p.visual_bias.assign(d, 0.0);
    for (std::size_t i = 0; i < hyper.n_blocks; ++i) {
        BlockParams b;
        b.ln1_gain.assign(d, 1.0);
        b.ln1_bias.assign(d, 0.0);
        b.wq = uniform_matrix(d, d, rng);
        b.wk = uniform_matrix(d, d, rng);
        b.wv = uniform_matrix(d, d, rng);
        b.wo = uniform_matrix(d, d, rng);
        b.bq.assign(d, 0.0);
        b.bk.assign(d, 0.0);
        b.bv.assign(d, 0.0);
        b.bo.assign(d, 0.0);
        b.ln2_gain.assign(d, 1.0);
        b.ln2_bias.assign(d, 0.0);
        b.w1 = uniform_matrix(hyper.d_ff, d, rng);
        b.b1.assign(hyper.d_ff, 0.0);
        b.w2 = uniform_matrix(d, hyper.d_ff, rng);
        b.b2.assign(d, 0.0);
        p.blocks.push_back(std::move(b));
    }
    p.lnf_gain.assign(d, 1.0);
    p.lnf_bias.assign(d, 0.0);
    if (!hyper.tie_embeddings) {
        p.output_weight = uniform_matrix(V, d, rng);
    }
    p.output_bias.assign(V, 0.0);
    return p;
}

ToyVlmParams ToyVlmParams::zeros_like() const {
    ToyVlmParams g = *this;
    for (auto s : g.spans()) {
        std::fill(s.begin(), s.end(), 0.0);
    }
    return g;
}

std::vector<std::span<double>> ToyVlmParams::spans() {
    std::vector<std::span<double>> out{token_embedding.flat(), position_embedding.flat(), visual_weight.flat(),
                                       visual_bias};
    for (auto& b : blocks) {
        out.insert(out.end(), {b.ln1_gain, b.ln1_bias, b.wq.flat(), b.bq, b.wk.flat(), b.bk, b.wv.flat(), b.bv,
                               b.wo.flat(), b.bo, b.ln2_gain, b.ln2_bias, b.w1.flat(), b.b1, b.w2.flat(), b.b2});
    }
    out.emplace_back(lnf_gain);
    out.emplace_back(lnf_bias);
    if (!hyper.tie_embeddings) {
        out.emplace_back(output_weight.flat());
    }
    out.emplace_back(output_bias);
    return out;
}

std::vector<std::span<const double>> ToyVlmParams::spans() const {
    auto mutable_spans = const_cast<ToyVlmParams*>(this)->spans();
    return {mutable_spans.begin(), mutable_spans.end()};
}

std::size_t ToyVlmParams::parameter_count() const {
    std::size_t n = 0;
    for (auto s : spans()) {
        n += s.size();
    }
    return n;
}

void ToyVlmParams::validate() const {
    const std::size_t d = hyper.d_model;
    const std::size_t V = vocab.size();
    auto shape = [](const Matrix& m, std::size_t r, std::size_t c) { return m.rows() == r && m.cols() == c; };
    bool ok = shape(token_embedding, V, d) && shape(position_embedding, hyper.max_positions, d) &&
              shape(visual_weight, d, feature_dim) && visual_bias.size() == d && blocks.size() == hyper.n_blocks &&
              lnf_gain.size() == d && lnf_bias.size() == d && output_bias.size() == V &&
              (hyper.tie_embeddings ? output_weight.size() == 0 : shape(output_weight, V, d));
    for (const auto& b : blocks) {
        ok = ok && b.ln1_gain.size() == d && b.ln1_bias.size() == d && shape(b.wq, d, d) && shape(b.wk, d, d) &&
             shape(b.wv, d, d) && shape(b.wo, d, d) && b.bq.size() == d && b.bk.size() == d && b.bv.size() == d &&
             b.bo.size() == d && b.ln2_gain.size() == d && b.ln2_bias.size() == d && shape(b.w1, hyper.d_ff, d) &&
             b.b1.size() == hyper.d_ff && shape(b.w2, d, hyper.d_ff) && b.b2.size() == d;
    }
    if (!ok) {
        throw VlmError("toy VLM parameter shapes are inconsistent");
    }
    for (auto s : spans()) {
        if (!nm::all_finite(s)) {
            throw VlmError("toy VLM parameters contain non-finite values");
        }
    }
}

Sequence make_sequence(const Vocab& vocab, const std::vector<Vec>& features, const Words& prompt,
                       const Words& prefix) {
    Sequence seq;
    seq.features = features;
    seq.tokens.push_back(Vocab::bos);
    for (const auto& w : prompt) {
        seq.tokens.push_back(vocab.id(w));
    }
    for (const auto& w : prefix) {
        seq.tokens.push_back(vocab.id(w));
    }
    return seq;
}

Matrix forward_all(const ToyVlmParams& params, const Sequence& seq, HookBundle* hooks) {
    const Matrix x = run_blocks(params, seq, hooks, nullptr);
    Matrix logits(x.rows(), params.vocab.size());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const Vec l = logits_of(params, x.row(t), nullptr, nullptr);
        std::copy(l.begin(), l.end(), logits.row(t).begin());
    }
    return logits;
}

TokenDistribution forward(const ToyVlmParams& params, const Sequence& seq, HookBundle* hooks) {
    const Matrix x = run_blocks(params, seq, hooks, nullptr);
    return TokenDistribution::from_logits(logits_of(params, x.row(x.rows() - 1), nullptr, nullptr));
}

double loss_and_gradient(const ToyVlmParams& p, const Sequence& seq,
                         const std::vector<std::pair<std::size_t, TokenId>>& targets, ToyVlmParams* grads,
                         double scale) {
    ForwardCache cache;
    const Matrix x = run_blocks(p, seq, nullptr, grads != nullptr ? &cache : nullptr);
    const std::size_t T = x.rows();
    const std::size_t d = p.hyper.d_model;
    const std::size_t dff = p.hyper.d_ff;
    const std::size_t nv = seq.features.size();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    double loss = 0.0;
    Matrix dx(T, d);
    for (const auto& [row, target] : targets) {
        if (row >= T || target >= p.vocab.size()) {
            throw VlmError("training target out of range");
        }
        nm::LayerNormCache lnc;
        Vec z;
        const Vec logits = logits_of(p, x.row(row), &lnc, &z);
        const Vec logp = nm::log_softmax(logits);
        loss -= logp[target];
        if (grads == nullptr) {
            continue;
        }
        Vec dlogits(logp.size());
        for (std::size_t i = 0; i < logp.size(); ++i) {
            dlogits[i] = scale * (std::exp(logp[i]) - (i == target ? 1.0 : 0.0));
        }
        Vec dz(d, 0.0);
        affine_backward_input(output_matrix(p), dlogits, dz);
        Matrix& dout = p.hyper.tie_embeddings ? grads->token_embedding : grads->output_weight;
        affine_backward_params(dlogits, z, dout, grads->output_bias);
        const Vec dxr = nm::layer_norm_backward(lnc, p.lnf_gain, dz, grads->lnf_gain, grads->lnf_bias);
        nm::axpy(1.0, dxr, dx.row(row));
    }
    if (grads == nullptr) {
        return loss;
    }

    for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
        const auto& b = p.blocks[bi];
        auto& g = grads->blocks[bi];
        const auto& c = cache.blocks[bi];

        // FFN sublayer: x_out = x_mid + W2 relu(W1 LN2(x_mid) + b1) + b2
        Matrix dx_mid = dx;
        for (std::size_t t = 0; t < T; ++t) {
            const auto df = dx.row(t);
            affine_backward_params(df, c.r.row(t), g.w2, g.b2);
            Vec dr(dff, 0.0);
            affine_backward_input(b.w2, df, dr);
            const auto h = c.h.row(t);
            for (std::size_t i = 0; i < dff; ++i) {
                dr[i] = h[i] > 0.0 ? dr[i] : 0.0;
            }
            affine_backward_params(dr, c.n2.row(t), g.w1, g.b1);
            Vec dn2(d, 0.0);
            affine_backward_input(b.w1, dr, dn2);
            const Vec dres = nm::layer_norm_backward(c.ln2[t], b.ln2_gain, dn2, g.ln2_gain, g.ln2_bias);
            nm::axpy(1.0, dres, dx_mid.row(t));
        }

        // Attention sublayer: x_mid = x_in + Wo attn(LN1(x_in)) + bo
        Matrix dq(T, d);
        Matrix dk(T, d);
        Matrix dv(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            const auto dout = dx_mid.row(t);
            affine_backward_params(dout, c.ctx.row(t), g.wo, g.bo);
            Vec dctx(d, 0.0);
            affine_backward_input(b.wo, dout, dctx);
            const Vec& w = c.weights[t];
            Vec dw(t + 1);
            double wdot = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
                dw[j] = nm::dot(dctx, c.v.row(j));
                wdot += w[j] * dw[j];
                nm::axpy(w[j], dctx, dv.row(j));
            }
            for (std::size_t j = 0; j <= t; ++j) {
                const double ds = w[j] * (dw[j] - wdot) * inv_sqrt_d;
                nm::axpy(ds, c.k.row(j), dq.row(t));
                nm::axpy(ds, c.q.row(t), dk.row(j));
            }
        }
        Matrix dx_in = dx_mid;
        for (std::size_t t = 0; t < T; ++t) {
            const auto a = c.a.row(t);
            affine_backward_params(dq.row(t), a, g.wq, g.bq);
            affine_backward_params(dk.row(t), a, g.wk, g.bk);
            affine_backward_params(dv.row(t), a, g.wv, g.bv);
            Vec da(d, 0.0);
            affine_backward_input(b.wq, dq.row(t), da);
            affine_backward_input(b.wk, dk.row(t), da);
            affine_backward_input(b.wv, dv.row(t), da);
            const Vec dres = nm::layer_norm_backward(c.ln1[t], b.ln1_gain, da, g.ln1_gain, g.ln1_bias);
            nm::axpy(1.0, dres, dx_in.row(t));
        }
        dx = std::move(dx_in);
    }

    for (std::size_t t = 0; t < T; ++t) {
        const auto row = dx.row(t);
        nm::axpy(1.0, row, grads->position_embedding.row(t));
        if (t < nv) {
            affine_backward_params(row, seq.features[t], grads->visual_weight, grads->visual_bias);
        } else {
            nm::axpy(1.0, row, grads->token_embedding.row(seq.tokens[t - nv]));
        }
    }
    return loss;
}

TrainingItem make_training_item(const Vocab& vocab, const TrainingExample& ex) {
    TrainingItem item;
    Words full = ex.response;
    item.sequence = make_sequence(vocab, ex.features, ex.prompt, full);
    std::vector<TokenId> next(item.sequence.tokens.begin() + 1, item.sequence.tokens.end());
    if (ex.append_eos) {
        next.push_back(Vocab::eos);
    }
    // Row r of the sequence predicts next[r - nv]; the response starts after <bos> + prompt.
    const std::size_t nv = ex.features.size();
    const std::size_t first = ex.prompt.size() + ex.loss_from;  // index into `next`
    for (std::size_t i = first; i < next.size(); ++i) {
        item.targets.emplace_back(nv + i, next[i]);
    }
    if (!ex.append_eos && ex.loss_from >= ex.response.size()) {
        throw VlmError("training example has no loss targets");
    }
    // The final response token is only an input when something follows it.
    if (!ex.append_eos) {
        item.sequence.tokens.pop_back();
    }
    return item;
}

ToyVlmParams train_toy_vlm(const std::vector<TrainingExample>& corpus, const Vocab& vocab, std::size_t feature_dim,
                           const VlmHyper& hyper, TrainStats* stats) {
    if (corpus.empty()) {
        throw VlmError("train_toy_vlm: empty corpus");
    }
    if (hyper.batch_size == 0) {
        throw VlmError("train_toy_vlm: batch_size must be positive");
    }
    nm::Rng init_rng(hyper.seed);
    nm::Rng sample_rng = init_rng.split();
    ToyVlmParams params = ToyVlmParams::init(vocab, feature_dim, hyper, init_rng);

    std::vector<TrainingItem> items;
    items.reserve(corpus.size());
    for (const auto& ex : corpus) {
        items.push_back(make_training_item(vocab, ex));
    }

    ToyVlmParams grads = params.zeros_like();
    auto param_spans = params.spans();
    auto grad_spans = grads.spans();
    nm::AdamConfig adam_cfg;
    adam_cfg.lr = hyper.lr;
    nm::AdamState adam(adam_cfg, param_spans);
    double last_finite = 0.0;
    std::vector<std::size_t> batch(hyper.batch_size);
    for (std::size_t step = 0; step < hyper.steps; ++step) {
        std::size_t n_targets = 0;
        for (auto& i : batch) {
            i = sample_rng.below(items.size());
            n_targets += items[i].targets.size();
        }
        for (auto s : grad_spans) {
            std::fill(s.begin(), s.end(), 0.0);
        }
        const double scale = 1.0 / static_cast<double>(n_targets);
        double loss = 0.0;
        for (auto i : batch) {
            loss += loss_and_gradient(params, items[i].sequence, items[i].targets, &grads, scale);
        }
        loss *= scale;
        if (!std::isfinite(loss)) {
            std::ostringstream msg;
            msg << "training diverged at step " << step << " (last finite loss " << last_finite << ")";
            throw VlmError(msg.str());
        }
        last_finite = loss;
        nm::adam_step(param_spans, grad_spans, adam);
        if (stats != nullptr) {
            stats->loss_history.push_back(loss);
        }
        if (hyper.log_every != 0 && step % hyper.log_every == 0) {
            std::fprintf(stderr, "step %zu loss %.4f\n", step, loss);
        }
    }
    if (stats != nullptr) {
        stats->final_loss = last_finite;
    }
    return params;
}

double corpus_loss(const ToyVlmParams& params, const std::vector<TrainingExample>& corpus) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& ex : corpus) {
        const auto item = make_training_item(params.vocab, ex);
        total += loss_and_gradient(params, item.sequence, item.targets, nullptr);
        count += item.targets.size();
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

void to_json(nlohmann::json& j, const VlmHyper& h) {
    j = nlohmann::json{{"d_model", h.d_model},       {"d_ff", h.d_ff},
                       {"n_blocks", h.n_blocks},     {"max_positions", h.max_positions},
                       {"tie_embeddings", h.tie_embeddings}, {"embed_std", h.embed_std},
                       {"position_std", h.position_std},     {"steps", h.steps},
                       {"batch_size", h.batch_size}, {"lr", h.lr},
                       {"seed", h.seed}};
}

void from_json(const nlohmann::json& j, VlmHyper& h) {
    static const std::vector<std::string> known{"d_model",   "d_ff",  "n_blocks", "max_positions", "tie_embeddings",
                                                "embed_std", "position_std", "steps", "batch_size", "lr", "seed",
                                                "log_every"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw VlmError("vlm hyper: unknown key '" + key + "'");
        }
    }
    auto opt = [&j](const char* key, auto& field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    opt("d_model", h.d_model);
    opt("d_ff", h.d_ff);
    opt("n_blocks", h.n_blocks);
    opt("max_positions", h.max_positions);
    opt("tie_embeddings", h.tie_embeddings);
    opt("embed_std", h.embed_std);
    opt("position_std", h.position_std);
    opt("steps", h.steps);
    opt("batch_size", h.batch_size);
    opt("lr", h.lr);
    opt("seed", h.seed);
    opt("log_every", h.log_every);
}

nlohmann::json checkpoint_to_json(const ToyVlmParams& p) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : p.blocks) {
        blocks.push_back({{"ln1_gain", b.ln1_gain}, {"ln1_bias", b.ln1_bias}, {"wq", b.wq},      {"bq", b.bq},
                          {"wk", b.wk},             {"bk", b.bk},             {"wv", b.wv},      {"bv", b.bv},
                          {"wo", b.wo},             {"bo", b.bo},             {"ln2_gain", b.ln2_gain},
                          {"ln2_bias", b.ln2_bias}, {"w1", b.w1},             {"b1", b.b1},      {"w2", b.w2},
                          {"b2", b.b2}});
    }
    nlohmann::json j{{"format", "ifcd.toy_vlm.v1"},
                     {"vocab", p.vocab.tokens()},
                     {"hyper", p.hyper},
                     {"feature_dim", p.feature_dim},
                     {"token_embedding", p.token_embedding},
                     {"position_embedding", p.position_embedding},
                     {"visual_weight", p.visual_weight},
                     {"visual_bias", p.visual_bias},
                     {"blocks", blocks},
                     {"lnf_gain", p.lnf_gain},
                     {"lnf_bias", p.lnf_bias},
                     {"output_bias", p.output_bias}};
    if (!p.hyper.tie_embeddings) {
        j["output_weight"] = p.output_weight;
    }
    return j;
}

ToyVlmParams checkpoint_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "ifcd.toy_vlm.v1") {
        throw VlmError("not a toy VLM checkpoint");
    }
    ToyVlmParams p;
    p.vocab = Vocab(j.at("vocab").get<std::vector<std::string>>());
    p.hyper = j.at("hyper").get<VlmHyper>();
    p.feature_dim = j.at("feature_dim").get<std::size_t>();
    j.at("token_embedding").get_to(p.token_embedding);
    j.at("position_embedding").get_to(p.position_embedding);
    j.at("visual_weight").get_to(p.visual_weight);
    j.at("visual_bias").get_to(p.visual_bias);
    for (const auto& jb : j.at("blocks")) {
        BlockParams b;
        jb.at("ln1_gain").get_to(b.ln1_gain);
        jb.at("ln1_bias").get_to(b.ln1_bias);
        jb.at("wq").get_to(b.wq);
        jb.at("bq").get_to(b.bq);
        jb.at("wk").get_to(b.wk);
        jb.at("bk").get_to(b.bk);
        jb.at("wv").get_to(b.wv);
        jb.at("bv").get_to(b.bv);
        jb.at("wo").get_to(b.wo);
        jb.at("bo").get_to(b.bo);
        jb.at("ln2_gain").get_to(b.ln2_gain);
        jb.at("ln2_bias").get_to(b.ln2_bias);
        jb.at("w1").get_to(b.w1);
        jb.at("b1").get_to(b.b1);
        jb.at("w2").get_to(b.w2);
        jb.at("b2").get_to(b.b2);
        p.blocks.push_back(std::move(b));
    }
    j.at("lnf_gain").get_to(p.lnf_gain);
    j.at("lnf_bias").get_to(p.lnf_bias);
    j.at("output_bias").get_to(p.output_bias);
    if (!p.hyper.tie_embeddings) {
        j.at("output_weight").get_to(p.output_weight);
    }
    p.validate();
    return p;
}

void save_checkpoint(const std::string& path, const ToyVlmParams& params) {
    std::ofstream out(path);
    if (!out) {
        throw VlmError("cannot write " + path);
    }
    out << checkpoint_to_json(params).dump() << '\n';
}

ToyVlmParams load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw VlmError("cannot read " + path);
    }
    return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace ifcd::vlm
