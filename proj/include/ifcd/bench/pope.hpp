#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ifcd/eval/metrics.hpp"
#include "ifcd/numerics/linalg.hpp"
#include "ifcd/vlm/world.hpp"

namespace ifcd::bench {

class BenchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Configuration problems (bad flags, unknown keys); the CLI maps these to exit code 1.
class ValidationError : public BenchError {
public:
    using BenchError::BenchError;
};

struct PopeQuestion {
    std::size_t scene_id = 0;
    std::string object;
    eval::Answer label = eval::Answer::yes;
    eval::PopeStrategy strategy = eval::PopeStrategy::random;

    bool operator==(const PopeQuestion&) const = default;
};

/// Category statistics over a scene collection.
struct CategoryStats {
    std::vector<std::size_t> frequency;                 // scenes containing each category
    std::vector<std::vector<std::size_t>> cooccurrence;  // scenes containing both

    static CategoryStats from_scenes(const vlm::WorldConfig& world, const std::vector<vlm::SceneSpec>& scenes);
};

/// Absent categories of `scene` in the order the strategy prefers them as negatives.
/// random: shuffled; popular: by frequency; adversarial: by co-occurrence with
/// the present categories. Ties fall back to frequency, then token order.
std::vector<std::size_t> negative_ranking(const vlm::WorldConfig& world, const CategoryStats& stats,
                                          const vlm::SceneSpec& scene, eval::PopeStrategy strategy,
                                          numerics::Rng& rng);

/// n_questions questions spread round-robin over the scenes, alternating
/// yes/no so the split is balanced to within one.
std::vector<PopeQuestion> build_pope_dataset(const vlm::WorldConfig& world, const std::vector<vlm::SceneSpec>& scenes,
                                             eval::PopeStrategy strategy, std::size_t n_questions,
                                             numerics::Rng& rng);

/// The answer when the first generated word is yes or no; anything else is unparsed.
std::optional<eval::Answer> parse_answer(const vlm::Words& words);

void to_json(nlohmann::json& j, const PopeQuestion& q);
void from_json(const nlohmann::json& j, PopeQuestion& q);

}  // namespace ifcd::bench
