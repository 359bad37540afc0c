#include "ifcd/decoder/ifcd.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "ifcd/numerics/ops.hpp"
#include "ifcd/numerics/rng.hpp"

namespace ifcd::decoder {

namespace nm = ifcd::numerics;

namespace {

const std::vector<std::pair<Mode, const char*>>& mode_names() {
    static const std::vector<std::pair<Mode, const char*>> names{{Mode::regular, "regular"},
                                                                 {Mode::editing_only, "editing_only"},
                                                                 {Mode::ifcd_wo_neg, "ifcd_wo_neg"},
                                                                 {Mode::ifcd_wo_pos, "ifcd_wo_pos"},
                                                                 {Mode::ifcd_full, "ifcd_full"}};
    return names;
}

bool needs_probe(Mode m) { return m != Mode::regular; }

}  // namespace

std::string to_string(Mode m) {
    for (const auto& [mode, name] : mode_names()) {
        if (mode == m) {
            return name;
        }
    }
    return "regular";
}

Mode mode_from_string(const std::string& s) {
    for (const auto& [mode, name] : mode_names()) {
        if (s == name) {
            return mode;
        }
    }
    throw DecodeError("unknown decoding mode '" + s + "'");
}

std::string to_string(Selection s) { return s == Selection::greedy ? "greedy" : "sample"; }

Selection selection_from_string(const std::string& s) {
    if (s == "greedy") {
        return Selection::greedy;
    }
    if (s == "sample") {
        return Selection::sample;
    }
    throw DecodeError("unknown selection '" + s + "'");
}

const std::vector<Mode>& all_modes() {
    static const std::vector<Mode> modes{Mode::regular, Mode::editing_only, Mode::ifcd_wo_neg, Mode::ifcd_wo_pos,
                                         Mode::ifcd_full};
    return modes;
}

void DecodingConfig::validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
        throw DecodeError("alpha must be finite and non-negative");
    }
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw DecodeError("beta must lie in [0, 1]");
    }
    if (max_new_tokens < 1) {
        throw DecodeError("max_new_tokens must be at least 1");
    }
    if (needs_probe(mode)) {
        edit.validate();
    }
}

bool CandidateSet::contains(TokenId t) const { return std::binary_search(included.begin(), included.end(), t); }

Vec contrast_logits(const Vec& logits_pos, const Vec& logits_neg, double alpha) {
    if (logits_pos.size() != logits_neg.size()) {
        throw DecodeError("contrast_logits: dimension mismatch");
    }
    if (!(alpha >= 0.0)) {
        throw DecodeError("contrast_logits: alpha must be non-negative");
    }
    if (alpha == 0.0) {
        return logits_pos;
    }
    Vec out(logits_pos.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (1.0 + alpha) * logits_pos[i] - alpha * logits_neg[i];
    }
    return out;
}

CandidateSet plausibility_mask(const TokenDistribution& base, double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw DecodeError("plausibility_mask: beta must lie in [0, 1]");
    }
    if (base.probs.empty()) {
        throw DecodeError("plausibility_mask: empty distribution");
    }
    CandidateSet set;
    const double top = *std::max_element(base.probs.begin(), base.probs.end());
    set.threshold_used = beta * top;
    for (std::size_t t = 0; t < base.probs.size(); ++t) {
        if (base.probs[t] >= set.threshold_used) {
            set.included.push_back(t);
        }
    }
    return set;
}

namespace {

struct EditedPass {
    TokenDistribution dist;
    std::vector<EditNorm> norms;
};

EditedPass run_pass(const vlm::ToyVlmParams& vlm, const probe::ProbeParams* probe, const vlm::Sequence& seq,
                    const probe::EditConfig& edit, std::optional<probe::EditSign> sign) {
    EditedPass out;
    if (!sign || edit.gamma == 0.0) {
        out.dist = vlm::forward(vlm, seq);
        return out;
    }
    probe::EditConfig cfg = edit;
    cfg.sign = *sign;
    auto editors = probe::make_editors(*probe, cfg);
    // Record ||gamma * Delta|| for the last position of each edited site.
    std::map<vlm::LayerSite, double> norms;
    for (auto& [site, editor] : editors) {
        editor = [inner = editor, site = site, &norms, last = seq.length() - 1](std::span<const double> x,
                                                                              std::size_t pos) {
            Vec edited = inner(x, pos);
            if (pos == last) {
                double s = 0.0;
                for (std::size_t i = 0; i < x.size(); ++i) {
                    s += (edited[i] - x[i]) * (edited[i] - x[i]);
                }
                norms[site] = std::sqrt(s);
            }
            return edited;
        };
    }
    auto hooks = vlm::HookBundle::edit(std::move(editors));
    out.dist = vlm::forward(vlm, seq, &hooks);
    for (const auto& [site, n] : norms) {
        out.norms.push_back({site, *sign, n});
    }
    return out;
}

}  // namespace

StepResult ifcd_step(const vlm::ToyVlmParams& vlm, const probe::ProbeParams* probe, const Context& context,
                     const DecodingConfig& config, nm::Rng* rng) {
    config.validate();
    if (needs_probe(config.mode) && probe == nullptr) {
        throw DecodeError("mode " + to_string(config.mode) + " needs a trained probe");
    }
    vlm::Sequence seq = vlm::make_sequence(vlm.vocab, context.features, context.prompt);
    seq.tokens.insert(seq.tokens.end(), context.prefix.begin(), context.prefix.end());

    using probe::EditSign;
    std::optional<EditSign> pos_sign;
    std::optional<EditSign> neg_sign;
    bool contrastive = true;
    std::string original_side = "none";
    switch (config.mode) {
        case Mode::regular:
            contrastive = false;
            break;
        case Mode::editing_only:
            pos_sign = EditSign::positive;
            contrastive = false;
            break;
        case Mode::ifcd_wo_neg:
            pos_sign = EditSign::positive;
            original_side = "negative";
            break;
        case Mode::ifcd_wo_pos:
            neg_sign = EditSign::negative;
            original_side = "positive";
            break;
        case Mode::ifcd_full:
            pos_sign = EditSign::positive;
            neg_sign = EditSign::negative;
            break;
    }

    StepResult result;
    StepTrace& tr = result.trace;
    tr.original_side = original_side;
    const EditedPass pos = run_pass(vlm, probe, seq, config.edit, pos_sign);
    tr.logits_pos = pos.dist.logits;
    tr.edit_norms = pos.norms;

    Vec combined;
    const TokenDistribution* base = &pos.dist;
    TokenDistribution unedited;
    if (contrastive) {
        const EditedPass neg = run_pass(vlm, probe, seq, config.edit, neg_sign);
        tr.logits_neg = neg.dist.logits;
        tr.edit_norms.insert(tr.edit_norms.end(), neg.norms.begin(), neg.norms.end());
        if (config.space == ContrastSpace::logits) {
            combined = contrast_logits(pos.dist.logits, neg.dist.logits, config.alpha);
        } else {
            combined = contrast_logits(pos.dist.probs, neg.dist.probs, config.alpha);
        }
    } else {
        combined = pos.dist.logits;
    }
    if (config.base == PlausibilityBase::unedited && pos_sign && config.edit.gamma != 0.0) {
        unedited = vlm::forward(vlm, seq);
        base = &unedited;
    }
    tr.candidates = plausibility_mask(*base, config.beta);
    if (tr.candidates.included.empty()) {
        throw DecodeError("internal: plausibility mask removed every token");
    }
    for (std::size_t t = 0, k = 0; t < combined.size(); ++t) {
        if (k < tr.candidates.included.size() && tr.candidates.included[k] == t) {
            ++k;
        } else {
            combined[t] = kMaskedLogit;
        }
    }
    tr.probs = nm::softmax(combined);
    tr.combined_logits = std::move(combined);
    if (config.selection == Selection::greedy) {
        tr.chosen = nm::argmax(tr.combined_logits);
    } else {
        if (rng == nullptr) {
            throw DecodeError("sampling needs a random generator");
        }
        tr.chosen = rng->weighted_index(tr.probs);
    }
    if (!tr.candidates.contains(tr.chosen)) {
        throw DecodeError("internal: chosen token outside the candidate set");
    }
    result.token = tr.chosen;
    return result;
}

vlm::Words DecodeResult::words(const vlm::Vocab& vocab) const {
    vlm::Words out;
    for (auto t : tokens) {
        if (t != vlm::Vocab::eos) {
            out.push_back(vocab.token(t));
        }
    }
    return out;
}

DecodeResult decode(const vlm::ToyVlmParams& vlm, const probe::ProbeParams* probe, const std::vector<Vec>& features,
                    const vlm::Words& prompt, const DecodingConfig& config) {
    config.validate();
    nm::Rng rng(config.seed);
    Context ctx{features, prompt, {}};
    DecodeResult out;
    const std::size_t fixed = features.size() + 1 + prompt.size();
    for (std::size_t step = 0; step < config.max_new_tokens; ++step) {
        if (fixed + ctx.prefix.size() > vlm.hyper.max_positions) {
            break;
        }
        auto r = ifcd_step(vlm, probe, ctx, config, &rng);
        out.tokens.push_back(r.token);
        out.trace.push_back(std::move(r.trace));
        if (r.token == vlm::Vocab::eos) {
            out.hit_eos = true;
            break;
        }
        ctx.prefix.push_back(r.token);
    }
    return out;
}

nlohmann::json step_to_json(const StepTrace& step, const vlm::Vocab& vocab) {
    nlohmann::json norms = nlohmann::json::array();
    for (const auto& n : step.edit_norms) {
        norms.push_back({{"site", vlm::to_string(n.site)}, {"sign", probe::to_string(n.sign)}, {"norm", n.norm}});
    }
    nlohmann::json combined = nlohmann::json::array();
    for (double v : step.combined_logits) {
        if (v == kMaskedLogit) {
            combined.push_back(nullptr);
        } else {
            combined.push_back(v);
        }
    }
    nlohmann::json j{{"chosen", step.chosen},
                     {"chosen_token", vocab.token(step.chosen)},
                     {"logits_pos", step.logits_pos},
                     {"combined_logits", combined},
                     {"probs", step.probs},
                     {"candidates", step.candidates.included},
                     {"threshold", step.candidates.threshold_used},
                     {"original_side", step.original_side},
                     {"edit_norms", norms}};
    if (step.logits_neg) {
        j["logits_neg"] = *step.logits_neg;
    }
    return j;
}

void write_trace_jsonl(std::ostream& out, const DecodeResult& result, const vlm::Vocab& vocab) {
    for (std::size_t i = 0; i < result.trace.size(); ++i) {
        auto j = step_to_json(result.trace[i], vocab);
        j["step"] = i;
        out << j.dump() << '\n';
    }
}

void to_json(nlohmann::json& j, const DecodingConfig& c) {
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& s : c.edit.active_sites) {
        sites.push_back(vlm::to_string(s));
    }
    j = nlohmann::json{{"alpha", c.alpha},
                       {"beta", c.beta},
                       {"gamma", c.edit.gamma},
                       {"active_sites", sites},
                       {"mode", to_string(c.mode)},
                       {"max_new_tokens", c.max_new_tokens},
                       {"selection", to_string(c.selection)},
                       {"seed", c.seed},
                       {"plausibility_base", c.base == PlausibilityBase::positive_side ? "positive" : "unedited"},
                       {"contrast_space", c.space == ContrastSpace::logits ? "logits" : "probabilities"}};
}

void from_json(const nlohmann::json& j, DecodingConfig& c) {
    static const std::vector<std::string> known{"alpha",     "beta", "gamma",     "active_sites",      "mode",
                                                "max_new_tokens", "selection", "seed", "plausibility_base",
                                                "contrast_space"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw DecodeError("decoding config: unknown key '" + key + "'");
        }
    }
    if (j.contains("alpha")) j.at("alpha").get_to(c.alpha);
    if (j.contains("beta")) j.at("beta").get_to(c.beta);
    if (j.contains("gamma")) j.at("gamma").get_to(c.edit.gamma);
    if (j.contains("active_sites")) {
        c.edit.active_sites.clear();
        for (const auto& s : j.at("active_sites")) {
            c.edit.active_sites.push_back(vlm::layer_site_from_string(s.get<std::string>()));
        }
    }
    if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("max_new_tokens")) j.at("max_new_tokens").get_to(c.max_new_tokens);
    if (j.contains("selection")) c.selection = selection_from_string(j.at("selection").get<std::string>());
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("plausibility_base")) {
        const auto b = j.at("plausibility_base").get<std::string>();
        if (b != "positive" && b != "unedited") {
            throw DecodeError("plausibility_base must be 'positive' or 'unedited'");
        }
        c.base = b == "positive" ? PlausibilityBase::positive_side : PlausibilityBase::unedited;
    }
    if (j.contains("contrast_space")) {
        const auto s = j.at("contrast_space").get<std::string>();
        if (s != "logits" && s != "probabilities") {
            throw DecodeError("contrast_space must be 'logits' or 'probabilities'");
        }
        c.space = s == "logits" ? ContrastSpace::logits : ContrastSpace::probabilities;
    }
}

}  // namespace ifcd::decoder
