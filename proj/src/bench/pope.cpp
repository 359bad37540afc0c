#include "ifcd/bench/pope.hpp"

#include <algorithm>
#include <numeric>

#include "ifcd/numerics/rng.hpp"

namespace ifcd::bench {

CategoryStats CategoryStats::from_scenes(const vlm::WorldConfig& world, const std::vector<vlm::SceneSpec>& scenes) {
    const std::size_t n = world.categories.size();
    CategoryStats s;
    s.frequency.assign(n, 0);
    s.cooccurrence.assign(n, std::vector<std::size_t>(n, 0));
    for (const auto& scene : scenes) {
        std::vector<bool> present(n, false);
        for (const auto& o : scene.objects) {
            present[o.category] = true;
        }
        for (std::size_t a = 0; a < n; ++a) {
            if (!present[a]) {
                continue;
            }
            ++s.frequency[a];
            for (std::size_t b = 0; b < n; ++b) {
                if (b != a && present[b]) {
                    ++s.cooccurrence[a][b];
                }
            }
        }
    }
    return s;
}

std::vector<std::size_t> negative_ranking(const vlm::WorldConfig& world, const CategoryStats& stats,
                                          const vlm::SceneSpec& scene, eval::PopeStrategy strategy,
                                          numerics::Rng& rng) {
    std::vector<std::size_t> absent;
    for (std::size_t c = 0; c < world.categories.size(); ++c) {
        if (!scene.contains(c)) {
            absent.push_back(c);
        }
    }
    if (absent.empty()) {
        throw BenchError("cannot build negatives: scene " + std::to_string(scene.scene_id) +
                         " contains every category");
    }
    auto by_frequency = [&](std::size_t a, std::size_t b) {
        if (stats.frequency[a] != stats.frequency[b]) {
            return stats.frequency[a] > stats.frequency[b];
        }
        return a < b;
    };
    switch (strategy) {
        case eval::PopeStrategy::random:
            rng.shuffle(absent);
            break;
        case eval::PopeStrategy::popular:
            std::sort(absent.begin(), absent.end(), by_frequency);
            break;
        case eval::PopeStrategy::adversarial: {
            std::vector<std::size_t> score(world.categories.size(), 0);
            for (auto c : absent) {
                for (const auto& o : scene.objects) {
                    score[c] += stats.cooccurrence[o.category][c];
                }
            }
            std::sort(absent.begin(), absent.end(), [&](std::size_t a, std::size_t b) {
                if (score[a] != score[b]) {
                    return score[a] > score[b];
                }
                return by_frequency(a, b);
            });
            break;
        }
    }
    return absent;
}

std::vector<PopeQuestion> build_pope_dataset(const vlm::WorldConfig& world, const std::vector<vlm::SceneSpec>& scenes,
                                             eval::PopeStrategy strategy, std::size_t n_questions,
                                             numerics::Rng& rng) {
    if (scenes.empty()) {
        throw BenchError("build_pope_dataset: no scenes");
    }
    const auto stats = CategoryStats::from_scenes(world, scenes);
    std::vector<std::vector<std::size_t>> rankings;
    rankings.reserve(scenes.size());
    for (const auto& scene : scenes) {
        if (scene.objects.empty()) {
            throw BenchError("build_pope_dataset: empty scene " + std::to_string(scene.scene_id));
        }
        rankings.push_back(negative_ranking(world, stats, scene, strategy, rng));
    }
    std::vector<std::size_t> yes_used(scenes.size(), 0);
    std::vector<std::size_t> no_used(scenes.size(), 0);
    std::vector<PopeQuestion> out;
    out.reserve(n_questions);
    for (std::size_t q = 0; q < n_questions; ++q) {
        const std::size_t s = q % scenes.size();
        const auto& scene = scenes[s];
        PopeQuestion pq;
        pq.scene_id = scene.scene_id;
        pq.strategy = strategy;
        // Alternate labels across the whole list; per scene, alternate when the
        // scene count is even so each scene still sees both answers.
        const bool yes = scenes.size() % 2 == 0 ? ((q / scenes.size()) + s) % 2 == 0 : q % 2 == 0;
        if (yes) {
            const auto& obj = scene.objects[yes_used[s]++ % scene.objects.size()];
            pq.object = world.categories[obj.category];
            pq.label = eval::Answer::yes;
        } else {
            const auto& rank = rankings[s];
            pq.object = world.categories[rank[no_used[s]++ % rank.size()]];
            pq.label = eval::Answer::no;
        }
        out.push_back(std::move(pq));
    }
    return out;
}

std::optional<eval::Answer> parse_answer(const vlm::Words& words) {
    if (!words.empty() && words.front() == "yes") {
        return eval::Answer::yes;
    }
    if (!words.empty() && words.front() == "no") {
        return eval::Answer::no;
    }
    return std::nullopt;
}

void to_json(nlohmann::json& j, const PopeQuestion& q) {
    j = nlohmann::json{{"scene_id", q.scene_id},
                       {"object", q.object},
                       {"label", std::string(eval::to_string(q.label))},
                       {"strategy", std::string(eval::to_string(q.strategy))}};
}

void from_json(const nlohmann::json& j, PopeQuestion& q) {
    j.at("scene_id").get_to(q.scene_id);
    j.at("object").get_to(q.object);
    q.label = eval::answer_from_string(j.at("label").get<std::string>());
    q.strategy = eval::strategy_from_string(j.at("strategy").get<std::string>());
}

}  // namespace ifcd::bench
