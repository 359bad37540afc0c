#include "ifcd/probe/pairs.hpp"

#include <algorithm>

#include "ifcd/numerics/rng.hpp"

namespace ifcd::probe {

std::string to_string(PairKind k) { return k == PairKind::existence ? "existence" : "color"; }

PairKind pair_kind_from_string(const std::string& s) {
    if (s == "existence") {
        return PairKind::existence;
    }
    if (s == "color") {
        return PairKind::color;
    }
    throw ProbeError("unknown pair kind '" + s + "'");
}

namespace {

std::vector<std::size_t> group_of(const vlm::WorldConfig& world, std::size_t category) {
    for (const auto& g : world.groups) {
        std::vector<std::size_t> ids;
        for (const auto& name : g) {
            ids.push_back(world.category_index(name));
        }
        if (std::find(ids.begin(), ids.end(), category) != ids.end()) {
            return ids;
        }
    }
    return {};
}

std::map<LayerSite, Vec> capture_answer(const vlm::ToyVlmParams& model, const std::vector<Vec>& features,
                                        const vlm::Words& prompt, const std::string& answer,
                                        const std::vector<LayerSite>& sites) {
    const auto seq = vlm::make_sequence(model.vocab, features, prompt, {answer});
    auto hooks = vlm::HookBundle::capture(sites);
    vlm::forward(model, seq, &hooks);
    std::map<LayerSite, Vec> out;
    for (const auto& s : sites) {
        out[s] = hooks.captured(s).back();
    }
    return out;
}

}  // namespace

std::vector<ProbePair> collect_pairs(const vlm::ToyVlmParams& model, const vlm::WorldConfig& world, std::size_t n,
                                     numerics::Rng& rng, const PairOptions& options) {
    if (options.kinds.empty()) {
        throw ProbeError("collect_pairs: no pair kinds");
    }
    const auto sites = options.sites.empty() ? vlm::all_sites(model.blocks.size()) : options.sites;
    std::vector<ProbePair> pairs;
    std::size_t produced = 0;
    while (produced < n) {
        const auto scene = vlm::generate_scene(world, rng, produced);
        const auto features = vlm::scene_features(world, scene, rng);
        const PairKind kind = options.kinds[rng.below(options.kinds.size())];
        vlm::Words prompt;
        std::string truthful;
        std::string untruthful;
        if (kind == PairKind::existence) {
            std::vector<std::size_t> absent;
            for (std::size_t c = 0; c < world.categories.size(); ++c) {
                if (!scene.contains(c)) {
                    absent.push_back(c);
                }
            }
            std::vector<std::size_t> tempting;
            for (auto c : group_of(world, scene.objects.front().category)) {
                if (!scene.contains(c)) {
                    tempting.push_back(c);
                }
            }
            if (tempting.empty()) {
                tempting = absent;
            }
            if (rng.bernoulli(0.5) || tempting.empty()) {
                prompt = vlm::templates::existence_question(world, scene.objects[rng.below(scene.objects.size())].category);
                truthful = "yes";
                untruthful = "no";
            } else {
                prompt = vlm::templates::existence_question(world, rng.choice(tempting));
                truthful = "no";
                untruthful = "yes";
            }
        } else {
            if (world.colors.size() < 2) {
                throw ProbeError("color pairs need at least two colors");
            }
            const auto& o = scene.objects[rng.below(scene.objects.size())];
            const std::size_t canon = world.canonical_color_index(o.category);
            std::size_t wrong = canon;
            if (canon == o.color || canon >= world.colors.size()) {
                const std::size_t pick = rng.below(world.colors.size() - 1);
                wrong = pick >= o.color ? pick + 1 : pick;
            }
            prompt = vlm::templates::color_question(world, o.category);
            truthful = world.colors[o.color];
            untruthful = world.colors[wrong];
        }
        const auto pos = capture_answer(model, features, prompt, truthful, sites);
        const auto neg = capture_answer(model, features, prompt, untruthful, sites);
        for (const auto& s : sites) {
            pairs.push_back({s, pos.at(s), neg.at(s), produced});
        }
        ++produced;
    }
    return pairs;
}

}  // namespace ifcd::probe
