#include "ifcd/probe/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ifcd/numerics/adam.hpp"
#include "ifcd/numerics/ops.hpp"
#include "ifcd/numerics/rng.hpp"

namespace ifcd::probe {

namespace nm = ifcd::numerics;

std::vector<std::span<double>> SiteProbe::spans() {
    std::vector<std::span<double>> out;
    for (auto* m : {&truth_enc, &sem_enc, &dec}) {
        for (auto s : m->spans()) {
            out.push_back(s);
        }
    }
    out.insert(out.end(), {wq.flat(), wk.flat(), wv.flat(), null_key, head_weight, head_bias});
    return out;
}

std::vector<std::span<const double>> SiteProbe::spans() const {
    auto m = const_cast<SiteProbe*>(this)->spans();
    return {m.begin(), m.end()};
}

SiteProbe SiteProbe::zeros_like() const {
    SiteProbe g = *this;
    for (auto s : g.spans()) {
        std::fill(s.begin(), s.end(), 0.0);
    }
    std::fill(g.delta.begin(), g.delta.end(), 0.0);
    return g;
}

const SiteProbe& ProbeParams::at(LayerSite site) const {
    const auto it = sites.find(site);
    if (it == sites.end()) {
        throw ProbeError("probe has no site " + vlm::to_string(site));
    }
    return it->second;
}

std::vector<LayerSite> ProbeParams::top_sites(std::size_t k) const {
    if (k == 0 || k > layer_ranking.size()) {
        throw ProbeError("requested " + std::to_string(k) + " active sites but the ranking has " +
                         std::to_string(layer_ranking.size()));
    }
    std::vector<LayerSite> out;
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back(layer_ranking[i].site);
    }
    return out;
}

namespace {

Matrix uniform_square(std::size_t n, nm::Rng& rng) {
    Matrix m(n, n);
    const double bound = 1.0 / std::sqrt(static_cast<double>(n));
    for (auto& v : m.flat()) {
        v = rng.uniform(-bound, bound);
    }
    return m;
}

using nm::Activation;

struct LatentForward {
    nm::MlpForward truth;
    nm::MlpForward sem;
    Vec q, k_truth, v_truth;
    nm::AttentionResult attn;
    nm::MlpForward dec;
};

nm::AttentionResult latent_attention(const SiteProbe& p, std::span<const double> h_truth,
                                     std::span<const double> h_sem, Vec* q, Vec* k, Vec* v) {
    *q = nm::matvec(p.wq, h_sem);
    *k = nm::matvec(p.wk, h_truth);
    *v = nm::matvec(p.wv, h_truth);
    return nm::scaled_dot_attention(*q, {*k, p.null_key}, {*v, Vec(v->size(), 0.0)});
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

SiteProbe init_site_probe(LayerSite site, std::size_t d_model, const ProbeHyper& hyper, nm::Rng& rng) {
    if (d_model == 0 || hyper.d_latent == 0 || hyper.hidden == 0) {
        throw ProbeError("probe dimensions must be positive");
    }
    SiteProbe p;
    p.site = site;
    const std::vector<Activation> acts{Activation::tanh, Activation::identity};
    p.truth_enc = nm::MlpParams::random({d_model, hyper.hidden, hyper.d_latent}, acts, rng);
    p.sem_enc = nm::MlpParams::random({d_model, hyper.hidden, hyper.d_latent}, acts, rng);
    p.dec = nm::MlpParams::random({hyper.d_latent, hyper.hidden, d_model}, acts, rng);
    p.wq = uniform_square(hyper.d_latent, rng);
    p.wk = uniform_square(hyper.d_latent, rng);
    p.wv = uniform_square(hyper.d_latent, rng);
    p.null_key.assign(hyper.d_latent, 0.0);
    p.head_weight.assign(hyper.d_latent, 0.0);
    p.head_bias.assign(1, 0.0);
    p.delta.assign(hyper.d_latent, 0.0);
    return p;
}

Latents encode(const SiteProbe& probe, std::span<const double> x) {
    if (x.size() != probe.d_model()) {
        throw ProbeError("encode: expected dimension " + std::to_string(probe.d_model()));
    }
    return {nm::mlp_apply(probe.truth_enc, x), nm::mlp_apply(probe.sem_enc, x)};
}

Vec reconstruct(const SiteProbe& probe, std::span<const double> h_truth, std::span<const double> h_sem) {
    if (h_truth.size() != probe.d_latent() || h_sem.size() != probe.d_latent()) {
        throw ProbeError("reconstruct: latent dimension mismatch");
    }
    Vec q, k, v;
    const auto attn = latent_attention(probe, h_truth, h_sem, &q, &k, &v);
    return nm::mlp_apply(probe.dec, nm::add(h_sem, attn.output));
}

ProbeLoss probe_loss(const SiteProbe& p, const std::vector<Vec>& xs, const std::vector<int>& labels, double lambda_c,
                     SiteProbe* grads) {
    if (xs.empty() || xs.size() != labels.size()) {
        throw ProbeError("probe_loss: need one label per sample");
    }
    const double n = static_cast<double>(xs.size());
    const double d = static_cast<double>(p.d_model());
    ProbeLoss loss;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto& x = xs[i];
        LatentForward f;
        f.truth = nm::mlp_forward(p.truth_enc, x);
        f.sem = nm::mlp_forward(p.sem_enc, x);
        const Vec& ht = f.truth.output;
        const Vec& hs = f.sem.output;
        f.attn = latent_attention(p, ht, hs, &f.q, &f.k_truth, &f.v_truth);
        f.dec = nm::mlp_forward(p.dec, nm::add(hs, f.attn.output));

        double rec = 0.0;
        Vec d_rec(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double e = f.dec.output[j] - x[j];
            rec += e * e;
            d_rec[j] = 2.0 * e / (d * n);
        }
        rec /= d;
        const double logit = nm::dot(p.head_weight, ht) + p.head_bias[0];
        const double y = labels[i] != 0 ? 1.0 : 0.0;
        const double bce = softplus(logit) - y * logit;
        loss.reconstruction += rec / n;
        loss.contrastive += bce / n;
        if (grads == nullptr) {
            continue;
        }

        const Vec du = nm::mlp_backward_into(p.dec, f.dec.cache, d_rec, grads->dec);
        Vec d_hs = du;
        const std::vector<Vec> keys{f.k_truth, p.null_key};
        const std::vector<Vec> values{f.v_truth, Vec(f.v_truth.size(), 0.0)};
        const auto ag = nm::scaled_dot_attention_backward(f.q, keys, values, f.attn, du);
        nm::add_outer(grads->wq, ag.query, hs);
        nm::axpy(1.0, nm::matvec_transposed(p.wq, ag.query), d_hs);
        nm::add_outer(grads->wk, ag.keys[0], ht);
        nm::add_outer(grads->wv, ag.values[0], ht);
        nm::axpy(1.0, ag.keys[1], grads->null_key);
        Vec d_ht = nm::matvec_transposed(p.wk, ag.keys[0]);
        nm::axpy(1.0, nm::matvec_transposed(p.wv, ag.values[0]), d_ht);

        const double d_logit = lambda_c * (sigmoid(logit) - y) / n;
        nm::axpy(d_logit, ht, grads->head_weight);
        grads->head_bias[0] += d_logit;
        nm::axpy(d_logit, p.head_weight, d_ht);

        nm::mlp_backward_into(p.truth_enc, f.truth.cache, d_ht, grads->truth_enc);
        nm::mlp_backward_into(p.sem_enc, f.sem.cache, d_hs, grads->sem_enc);
    }
    loss.total = loss.reconstruction + lambda_c * loss.contrastive;
    return loss;
}

Vec compute_edit_direction(const SiteProbe& probe, const std::vector<ProbePair>& pairs) {
    if (pairs.empty()) {
        throw ProbeError("compute_edit_direction: no pairs");
    }
    Vec pos(probe.d_latent(), 0.0);
    Vec neg(probe.d_latent(), 0.0);
    for (const auto& pr : pairs) {
        nm::axpy(1.0, nm::mlp_apply(probe.truth_enc, pr.x_pos), pos);
        nm::axpy(1.0, nm::mlp_apply(probe.truth_enc, pr.x_neg), neg);
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    Vec delta(probe.d_latent());
    for (std::size_t i = 0; i < delta.size(); ++i) {
        delta[i] = pos[i] * inv - neg[i] * inv;
    }
    return delta;
}

std::string to_string(EditSign s) { return s == EditSign::positive ? "positive" : "negative"; }

EditSign edit_sign_from_string(const std::string& s) {
    if (s == "positive") {
        return EditSign::positive;
    }
    if (s == "negative") {
        return EditSign::negative;
    }
    throw ProbeError("unknown edit sign '" + s + "'");
}

Vec compute_delta(const SiteProbe& probe, std::span<const double> x, EditSign sign) {
    const auto lat = encode(probe, x);
    const double s = sign == EditSign::positive ? 1.0 : -1.0;
    Vec shifted = lat.truth;
    nm::axpy(s, probe.delta, shifted);
    return nm::sub(reconstruct(probe, shifted, lat.sem), reconstruct(probe, lat.truth, lat.sem));
}

Vec apply_edit(std::span<const double> x, std::span<const double> delta, double gamma) {
    if (x.size() != delta.size()) {
        throw ProbeError("apply_edit: dimension mismatch");
    }
    if (!(gamma >= 0.0)) {
        throw ProbeError("apply_edit: gamma must be non-negative");
    }
    Vec out(x.begin(), x.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += gamma * delta[i];
    }
    return out;
}

double auc(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores) {
    if (pos_scores.empty() || neg_scores.empty()) {
        throw ProbeError("auc: need both classes");
    }
    // Rank-sum with average ranks for ties.
    std::vector<std::pair<double, int>> all;
    for (double s : pos_scores) {
        all.emplace_back(s, 1);
    }
    for (double s : neg_scores) {
        all.emplace_back(s, 0);
    }
    std::sort(all.begin(), all.end());
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i;
        while (j < all.size() && all[j].first == all[i].first) {
            ++j;
        }
        const double avg_rank = 0.5 * static_cast<double>(i + j + 1);  // ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (all[k].second == 1) {
                rank_sum += avg_rank;
            }
        }
        i = j;
    }
    const double np = static_cast<double>(pos_scores.size());
    const double nn = static_cast<double>(neg_scores.size());
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double separation_auc(const SiteProbe& probe, const std::vector<ProbePair>& pairs) {
    std::vector<double> pos;
    std::vector<double> neg;
    for (const auto& pr : pairs) {
        pos.push_back(nm::dot(probe.delta, nm::mlp_apply(probe.truth_enc, pr.x_pos)));
        neg.push_back(nm::dot(probe.delta, nm::mlp_apply(probe.truth_enc, pr.x_neg)));
    }
    return auc(pos, neg);
}

namespace {

std::map<LayerSite, std::vector<ProbePair>> by_site(const std::vector<ProbePair>& pairs) {
    std::map<LayerSite, std::vector<ProbePair>> out;
    for (const auto& p : pairs) {
        out[p.site].push_back(p);
    }
    return out;
}

}  // namespace

std::vector<RankedSite> rank_layers(const ProbeParams& probe, const std::vector<ProbePair>& validation) {
    const auto groups = by_site(validation);
    std::vector<RankedSite> ranking;
    for (const auto& [site, sp] : probe.sites) {
        const auto it = groups.find(site);
        const double score = it == groups.end() ? sp.heldout_auc : separation_auc(sp, it->second);
        ranking.push_back({site, score});
    }
    // probe.sites iterates in (block, kind) order, so a stable sort keeps that order on ties.
    std::stable_sort(ranking.begin(), ranking.end(),
                     [](const RankedSite& a, const RankedSite& b) { return a.score > b.score; });
    return ranking;
}

ProbeParams train_probe(const std::vector<ProbePair>& train, const std::vector<ProbePair>& heldout,
                        const ProbeHyper& hyper, TrainStats* stats) {
    if (train.empty()) {
        throw ProbeError("insufficient pairs: none given");
    }
    const auto groups = by_site(train);
    const auto held_groups = by_site(heldout);
    ProbeParams out;
    out.hyper = hyper;
    out.train_pairs = train.size() / groups.size();
    nm::Rng rng(hyper.seed);
    for (const auto& [site, pairs] : groups) {
        if (pairs.size() < std::max<std::size_t>(hyper.min_pairs, 2)) {
            throw ProbeError("insufficient pairs for site " + vlm::to_string(site) + ": " +
                             std::to_string(pairs.size()) + " < " + std::to_string(hyper.min_pairs));
        }
        const std::size_t d = pairs.front().x_pos.size();
        std::vector<Vec> xs;
        std::vector<int> labels;
        for (const auto& pr : pairs) {
            if (pr.x_pos.size() != d || pr.x_neg.size() != d) {
                throw ProbeError("pair dimension mismatch at site " + vlm::to_string(site));
            }
            xs.push_back(pr.x_pos);
            labels.push_back(1);
        }
        for (const auto& pr : pairs) {
            xs.push_back(pr.x_neg);
            labels.push_back(0);
        }
        SiteProbe probe = init_site_probe(site, d, hyper, rng);
        SiteProbe grads = probe.zeros_like();
        auto param_spans = probe.spans();
        auto grad_spans = grads.spans();
        nm::AdamConfig cfg;
        cfg.lr = hyper.lr;
        nm::AdamState adam(cfg, param_spans);
        std::vector<double> history;
        for (std::size_t step = 0; step < hyper.steps; ++step) {
            for (auto s : grad_spans) {
                std::fill(s.begin(), s.end(), 0.0);
            }
            const auto loss = probe_loss(probe, xs, labels, hyper.lambda_c, &grads);
            if (!std::isfinite(loss.total)) {
                throw ProbeError("probe training diverged at site " + vlm::to_string(site));
            }
            if (hyper.weight_decay > 0.0) {
                for (std::size_t b = 0; b < param_spans.size(); ++b) {
                    nm::axpy(hyper.weight_decay, param_spans[b], grad_spans[b]);
                }
            }
            history.push_back(loss.total);
            nm::adam_step(param_spans, grad_spans, adam);
        }
        probe.delta = compute_edit_direction(probe, pairs);
        const auto held = held_groups.find(site);
        const auto& eval_pairs = held == held_groups.end() ? pairs : held->second;
        probe.heldout_auc = separation_auc(probe, eval_pairs);
        if (stats != nullptr) {
            stats->loss_history[site] = std::move(history);
            stats->heldout_auc[site] = probe.heldout_auc;
            std::vector<Vec> hx;
            for (const auto& pr : eval_pairs) {
                hx.push_back(pr.x_pos);
                hx.push_back(pr.x_neg);
            }
            stats->heldout_reconstruction_mse[site] =
                probe_loss(probe, hx, std::vector<int>(hx.size(), 0), 0.0, nullptr).reconstruction;
        }
        out.sites.emplace(site, std::move(probe));
    }
    out.layer_ranking = rank_layers(out, heldout);
    return out;
}

std::vector<ScatterPoint> latent_scatter(const SiteProbe& probe, const std::vector<ProbePair>& pairs) {
    if (pairs.size() < 3) {
        throw ProbeError("latent_scatter: need at least 3 pairs");
    }
    std::vector<Vec> pts;
    for (const auto& pr : pairs) {
        pts.push_back(nm::mlp_apply(probe.truth_enc, pr.x_pos));
    }
    for (const auto& pr : pairs) {
        pts.push_back(nm::mlp_apply(probe.truth_enc, pr.x_neg));
    }
    const auto proj = nm::pca_2d(pts);
    std::vector<ScatterPoint> out;
    for (std::size_t i = 0; i < proj.size(); ++i) {
        out.push_back({proj[i].first, proj[i].second, i < pairs.size() ? 1 : 0});
    }
    return out;
}

void EditConfig::validate() const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
        throw ProbeError("gamma must be finite and non-negative");
    }
    if (active_sites.empty()) {
        throw ProbeError("editing needs at least one active site");
    }
}

std::map<LayerSite, vlm::HookBundle::Editor> make_editors(const ProbeParams& probe, const EditConfig& config) {
    config.validate();
    std::map<LayerSite, vlm::HookBundle::Editor> editors;
    for (const auto& site : config.active_sites) {
        const SiteProbe* sp = &probe.at(site);
        const double gamma = config.gamma;
        const EditSign sign = config.sign;
        editors[site] = [sp, gamma, sign](std::span<const double> x, std::size_t) {
            return apply_edit(x, compute_delta(*sp, x, sign), gamma);
        };
    }
    return editors;
}

void to_json(nlohmann::json& j, const ProbeHyper& h) {
    j = nlohmann::json{{"d_latent", h.d_latent}, {"hidden", h.hidden},       {"steps", h.steps},
                       {"lr", h.lr},             {"lambda_c", h.lambda_c},   {"weight_decay", h.weight_decay},
                       {"min_pairs", h.min_pairs}, {"seed", h.seed}};
}

void from_json(const nlohmann::json& j, ProbeHyper& h) {
    static const std::vector<std::string> known{"d_latent", "hidden",       "steps",     "lr",
                                                "lambda_c", "weight_decay", "min_pairs", "seed"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ProbeError("probe hyper: unknown key '" + key + "'");
        }
    }
    auto opt = [&j](const char* key, auto& field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    opt("d_latent", h.d_latent);
    opt("hidden", h.hidden);
    opt("steps", h.steps);
    opt("lr", h.lr);
    opt("lambda_c", h.lambda_c);
    opt("weight_decay", h.weight_decay);
    opt("min_pairs", h.min_pairs);
    opt("seed", h.seed);
}

nlohmann::json probe_to_json(const ProbeParams& p, const nlohmann::json& metadata) {
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& [site, sp] : p.sites) {
        sites.push_back({{"site", vlm::to_string(site)},
                         {"truth_enc", sp.truth_enc},
                         {"sem_enc", sp.sem_enc},
                         {"dec", sp.dec},
                         {"wq", sp.wq},
                         {"wk", sp.wk},
                         {"wv", sp.wv},
                         {"null_key", sp.null_key},
                         {"head_weight", sp.head_weight},
                         {"head_bias", sp.head_bias},
                         {"delta", sp.delta},
                         {"heldout_auc", sp.heldout_auc}});
    }
    nlohmann::json ranking = nlohmann::json::array();
    for (const auto& r : p.layer_ranking) {
        ranking.push_back({{"site", vlm::to_string(r.site)}, {"score", r.score}});
    }
    return {{"format", "ifcd.truth_probe.v1"}, {"hyper", p.hyper},       {"train_pairs", p.train_pairs},
            {"sites", sites},                  {"ranking", ranking},     {"metadata", metadata}};
}

ProbeParams probe_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "ifcd.truth_probe.v1") {
        throw ProbeError("not a truth probe checkpoint");
    }
    ProbeParams p;
    p.hyper = j.at("hyper").get<ProbeHyper>();
    p.train_pairs = j.at("train_pairs").get<std::size_t>();
    for (const auto& js : j.at("sites")) {
        SiteProbe sp;
        sp.site = vlm::layer_site_from_string(js.at("site").get<std::string>());
        js.at("truth_enc").get_to(sp.truth_enc);
        js.at("sem_enc").get_to(sp.sem_enc);
        js.at("dec").get_to(sp.dec);
        js.at("wq").get_to(sp.wq);
        js.at("wk").get_to(sp.wk);
        js.at("wv").get_to(sp.wv);
        js.at("null_key").get_to(sp.null_key);
        js.at("head_weight").get_to(sp.head_weight);
        js.at("head_bias").get_to(sp.head_bias);
        js.at("delta").get_to(sp.delta);
        sp.heldout_auc = js.at("heldout_auc").get<double>();
        if (!nm::all_finite(sp.delta)) {
            throw ProbeError("probe checkpoint has a non-finite delta");
        }
        p.sites.emplace(sp.site, std::move(sp));
    }
    for (const auto& jr : j.at("ranking")) {
        p.layer_ranking.push_back(
            {vlm::layer_site_from_string(jr.at("site").get<std::string>()), jr.at("score").get<double>()});
    }
    return p;
}

void save_probe(const std::string& path, const ProbeParams& p, const nlohmann::json& metadata) {
    std::ofstream out(path);
    if (!out) {
        throw ProbeError("cannot write " + path);
    }
    out << probe_to_json(p, metadata).dump() << '\n';
}

ProbeParams load_probe(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ProbeError("cannot read " + path);
    }
    return probe_from_json(nlohmann::json::parse(in));
}

}  // namespace ifcd::probe
