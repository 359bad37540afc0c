#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ifcd/numerics/linalg.hpp"

namespace ifcd::numerics {
class Rng;
}

namespace ifcd::vlm {

using numerics::Vec;
using TokenId = std::size_t;

class VlmError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct WorldConfig {
    std::vector<std::string> categories;
    std::vector<std::string> colors;
    int max_count = 4;
    std::map<std::string, std::string> canonical_color;
    double bias_ratio = 0.3;
    std::uint64_t seed = 0;

    // Scene statistics. Objects of one scene are drawn from a shared group with
    // probability `co_occurrence`; inside a group earlier members are more frequent.
    std::vector<std::vector<std::string>> groups;
    double co_occurrence = 0.8;
    double non_canonical_rate = 0.5;
    int max_objects = 3;

    // Fraction of grounded examples that are answer-verification items.
    double verify_ratio = 0.2;
    // Gaussian perception noise on the category / color / count one-hot blocks.
    std::array<double, 3> feature_noise{0.4, 0.6, 0.3};

    /// 12 categories in three co-occurrence groups, 6 colors, counts 1..4.
    static WorldConfig defaults();

    void validate() const;

    [[nodiscard]] std::size_t category_index(const std::string& name) const;
    [[nodiscard]] std::size_t color_index(const std::string& name) const;
    [[nodiscard]] std::size_t canonical_color_index(std::size_t category) const;
    [[nodiscard]] std::size_t feature_dim() const;
};

struct SceneObject {
    std::size_t category = 0;
    std::size_t color = 0;
    int count = 1;

    bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
    std::size_t scene_id = 0;
    std::vector<SceneObject> objects;

    [[nodiscard]] bool contains(std::size_t category) const;
    [[nodiscard]] const SceneObject* find(std::size_t category) const;
    bool operator==(const SceneSpec&) const = default;
};

SceneSpec generate_scene(const WorldConfig& config, numerics::Rng& rng, std::size_t scene_id = 0);

/// Closed word-level vocabulary: specials, categories, colors, count digits,
/// answer words, then template words.
class Vocab {
public:
    Vocab() = default;
    explicit Vocab(std::vector<std::string> tokens);
    static Vocab for_world(const WorldConfig& config);

    [[nodiscard]] std::size_t size() const noexcept { return tokens_.size(); }
    [[nodiscard]] TokenId id(const std::string& token) const;
    [[nodiscard]] bool contains(const std::string& token) const { return index_.contains(token); }
    [[nodiscard]] const std::string& token(TokenId id) const;
    [[nodiscard]] const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    [[nodiscard]] std::vector<TokenId> encode(const std::vector<std::string>& words) const;
    [[nodiscard]] std::vector<std::string> decode(const std::vector<TokenId>& ids) const;

    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

    static constexpr TokenId pad = 0;
    static constexpr TokenId bos = 1;
    static constexpr TokenId eos = 2;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

using Words = std::vector<std::string>;

// Prompt / response templates shared by the corpus and the evaluation harness.
namespace templates {
Words caption_prompt();
Words caption(const WorldConfig& config, const SceneSpec& scene);
Words existence_question(const WorldConfig& config, std::size_t category);
Words color_question(const WorldConfig& config, std::size_t category);
Words count_question(const WorldConfig& config, std::size_t category);
std::string count_word(int count);
/// Fixed prompt prefix used as a language-side disturbance.
Words confused_prefix();
}  // namespace templates

enum class ExampleKind { caption, existence, color, count, verify, prior_color, prior_caption };

const char* to_string(ExampleKind k);
ExampleKind example_kind_from_string(const std::string& s);

struct TrainingExample {
    ExampleKind kind = ExampleKind::caption;
    std::vector<Vec> features;  // empty for text-only examples
    Words prompt;
    Words response;
    // Loss covers response[loss_from..] and, when append_eos, the end token.
    std::size_t loss_from = 0;
    bool append_eos = true;

    [[nodiscard]] bool text_only() const { return features.empty(); }
};

/// Noisy one-hot (category | color | count) rows, one per object. This is the
/// visual input; the model owns the learned projection to d_model.
std::vector<Vec> scene_features(const WorldConfig& config, const SceneSpec& scene, numerics::Rng& rng);

/// Grounded example (caption / QA / verification) for `scene`.
TrainingExample grounded_example(const WorldConfig& config, const SceneSpec& scene, numerics::Rng& rng);
/// Text-only sentence asserting canonical colors.
TrainingExample prior_example(const WorldConfig& config, numerics::Rng& rng);

/// `n_examples` draws; each is a text-only prior sentence with probability
/// bias_ratio and a grounded example otherwise.
std::vector<TrainingExample> build_corpus(const WorldConfig& config, std::size_t n_examples, numerics::Rng& rng);

/// Forward diffusion q(x_t | x_0) with the linear beta schedule 1e-4..0.02
/// over 1000 steps: x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps.
std::vector<Vec> add_visual_noise(const std::vector<Vec>& features, int noise_steps, numerics::Rng& rng);
double diffusion_alpha_bar(int noise_steps);

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

nlohmann::json scene_to_json(const WorldConfig& config, const SceneSpec& scene);
SceneSpec scene_from_json(const WorldConfig& config, const nlohmann::json& j);
nlohmann::json example_to_json(const TrainingExample& ex);
TrainingExample example_from_json(const nlohmann::json& j);

void write_scenes_jsonl(std::ostream& out, const WorldConfig& config, const std::vector<SceneSpec>& scenes);
std::vector<SceneSpec> read_scenes_jsonl(std::istream& in, const WorldConfig& config);
void write_corpus_jsonl(std::ostream& out, const std::vector<TrainingExample>& corpus);
std::vector<TrainingExample> read_corpus_jsonl(std::istream& in);

}  // namespace ifcd::vlm
