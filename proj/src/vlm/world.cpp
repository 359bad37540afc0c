#include "ifcd/vlm/world.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>

#include "ifcd/numerics/rng.hpp"

namespace ifcd::vlm {

namespace {

constexpr std::size_t npos = static_cast<std::size_t>(-1);

const std::vector<std::string>& template_words() {
    static const std::vector<std::string> words{"is",    "there", "a",        "what",  "color", "the", "how",
                                                "many",  "describe", "scene", "?",   ".",
                                                // only used by the disturbance prompt prefix
                                                "you",   "are",   "confused", "object", "detector"};
    return words;
}

const std::vector<std::string>& answer_words() {
    static const std::vector<std::string> words{"yes", "no", "right", "wrong"};
    return words;
}

}  // namespace

WorldConfig WorldConfig::defaults() {
    WorldConfig c;
    c.categories = {"strawberry", "banana", "apple", "lemon", "fork", "knife",
                    "spoon",      "cup",    "dog",   "cat",   "bird", "car"};
    c.colors = {"red", "yellow", "green", "white", "blue", "black"};
    c.canonical_color = {{"strawberry", "red"}, {"banana", "yellow"}, {"apple", "green"}, {"lemon", "yellow"},
                         {"fork", "white"},     {"knife", "white"},   {"spoon", "white"}, {"cup", "blue"},
                         {"dog", "black"},      {"cat", "black"},     {"bird", "blue"},   {"car", "red"}};
    c.groups = {{"strawberry", "banana", "apple", "lemon"},
                {"fork", "knife", "spoon", "cup"},
                {"dog", "cat", "bird", "car"}};
    return c;
}

void WorldConfig::validate() const {
    auto fail = [](const std::string& msg) { throw VlmError("world config: " + msg); };
    if (categories.empty()) {
        fail("no categories");
    }
    if (colors.empty()) {
        fail("no colors");
    }
    if (max_count < 1 || max_count > 9) {
        fail("max_count must be in [1, 9]");
    }
    if (max_objects < 1) {
        fail("max_objects must be positive");
    }
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(bias_ratio) || !in_unit(co_occurrence) || !in_unit(non_canonical_rate) || !in_unit(verify_ratio)) {
        fail("probabilities must lie in [0, 1]");
    }
    for (double s : feature_noise) {
        if (!(s >= 0.0) || !std::isfinite(s)) {
            fail("feature_noise must be finite and non-negative");
        }
    }
    std::set<std::string> seen{"<pad>", "<bos>", "<eos>"};
    seen.insert(template_words().begin(), template_words().end());
    seen.insert(answer_words().begin(), answer_words().end());
    for (int k = 1; k <= max_count; ++k) {
        seen.insert(templates::count_word(k));
    }
    for (const auto& w : categories) {
        if (!seen.insert(w).second) {
            fail("duplicate or reserved token '" + w + "'");
        }
    }
    for (const auto& w : colors) {
        if (!seen.insert(w).second) {
            fail("duplicate or reserved token '" + w + "'");
        }
    }
    for (const auto& [cat, col] : canonical_color) {
        if (std::find(categories.begin(), categories.end(), cat) == categories.end()) {
            fail("canonical_color key '" + cat + "' is not a category");
        }
        if (std::find(colors.begin(), colors.end(), col) == colors.end()) {
            fail("canonical color '" + col + "' is not a color");
        }
    }
    std::set<std::string> grouped;
    for (const auto& g : groups) {
        if (g.empty()) {
            fail("empty group");
        }
        for (const auto& cat : g) {
            if (std::find(categories.begin(), categories.end(), cat) == categories.end()) {
                fail("group member '" + cat + "' is not a category");
            }
            if (!grouped.insert(cat).second) {
                fail("category '" + cat + "' appears in two groups");
            }
        }
    }
}

std::size_t WorldConfig::category_index(const std::string& name) const {
    const auto it = std::find(categories.begin(), categories.end(), name);
    if (it == categories.end()) {
        throw VlmError("unknown category '" + name + "'");
    }
    return static_cast<std::size_t>(it - categories.begin());
}

std::size_t WorldConfig::color_index(const std::string& name) const {
    const auto it = std::find(colors.begin(), colors.end(), name);
    if (it == colors.end()) {
        throw VlmError("unknown color '" + name + "'");
    }
    return static_cast<std::size_t>(it - colors.begin());
}

std::size_t WorldConfig::canonical_color_index(std::size_t category) const {
    const auto it = canonical_color.find(categories.at(category));
    return it == canonical_color.end() ? npos : color_index(it->second);
}

std::size_t WorldConfig::feature_dim() const {
    return categories.size() + colors.size() + static_cast<std::size_t>(max_count);
}

bool SceneSpec::contains(std::size_t category) const { return find(category) != nullptr; }

const SceneObject* SceneSpec::find(std::size_t category) const {
    for (const auto& o : objects) {
        if (o.category == category) {
            return &o;
        }
    }
    return nullptr;
}

SceneSpec generate_scene(const WorldConfig& config, numerics::Rng& rng, std::size_t scene_id) {
    const std::size_t ncat = config.categories.size();
    const int limit = std::min<int>(config.max_objects, static_cast<int>(ncat));
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, limit));

    std::vector<std::size_t> group;
    if (!config.groups.empty()) {
        for (const auto& name : config.groups[rng.below(config.groups.size())]) {
            group.push_back(config.category_index(name));
        }
    }
    std::vector<double> weights;
    for (std::size_t i = 0; i < group.size(); ++i) {
        weights.push_back(static_cast<double>(group.size() - i));
    }

    SceneSpec scene;
    scene.scene_id = scene_id;
    std::vector<std::size_t> cats;
    while (cats.size() < n) {
        const bool group_open = std::any_of(group.begin(), group.end(), [&cats](std::size_t c) {
            return std::find(cats.begin(), cats.end(), c) == cats.end();
        });
        std::size_t c = 0;
        if (group_open && rng.bernoulli(config.co_occurrence)) {
            c = group[rng.weighted_index(weights)];
        } else {
            c = rng.below(ncat);
        }
        if (std::find(cats.begin(), cats.end(), c) == cats.end()) {
            cats.push_back(c);
        }
    }
    for (std::size_t c : cats) {
        SceneObject o;
        o.category = c;
        const std::size_t canon = config.canonical_color_index(c);
        const std::size_t ncol = config.colors.size();
        if (canon == npos) {
            o.color = rng.below(ncol);
        } else if (ncol > 1 && rng.bernoulli(config.non_canonical_rate)) {
            const std::size_t pick = rng.below(ncol - 1);
            o.color = pick >= canon ? pick + 1 : pick;
        } else {
            o.color = canon;
        }
        o.count = rng.uniform_int(1, config.max_count);
        scene.objects.push_back(o);
    }
    return scene;
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], i).second) {
            throw VlmError("vocab: duplicate token '" + tokens_[i] + "'");
        }
    }
    if (tokens_.size() < 3 || tokens_[pad] != "<pad>" || tokens_[bos] != "<bos>" || tokens_[eos] != "<eos>") {
        throw VlmError("vocab: must start with <pad>, <bos>, <eos>");
    }
}

Vocab Vocab::for_world(const WorldConfig& config) {
    config.validate();
    std::vector<std::string> t{"<pad>", "<bos>", "<eos>"};
    t.insert(t.end(), config.categories.begin(), config.categories.end());
    t.insert(t.end(), config.colors.begin(), config.colors.end());
    for (int k = 1; k <= config.max_count; ++k) {
        t.push_back(templates::count_word(k));
    }
    t.insert(t.end(), answer_words().begin(), answer_words().end());
    t.insert(t.end(), template_words().begin(), template_words().end());
    return Vocab(std::move(t));
}

TokenId Vocab::id(const std::string& token) const {
    const auto it = index_.find(token);
    if (it == index_.end()) {
        throw VlmError("unknown token '" + token + "'");
    }
    return it->second;
}

const std::string& Vocab::token(TokenId id) const {
    if (id >= tokens_.size()) {
        throw VlmError("token id " + std::to_string(id) + " out of range");
    }
    return tokens_[id];
}

std::vector<TokenId> Vocab::encode(const std::vector<std::string>& words) const {
    std::vector<TokenId> ids;
    ids.reserve(words.size());
    for (const auto& w : words) {
        ids.push_back(id(w));
    }
    return ids;
}

std::vector<std::string> Vocab::decode(const std::vector<TokenId>& ids) const {
    std::vector<std::string> words;
    words.reserve(ids.size());
    for (auto i : ids) {
        words.push_back(token(i));
    }
    return words;
}

namespace templates {

std::string count_word(int count) { return std::to_string(count); }

Words caption_prompt() { return {"describe", "the", "scene", "."}; }

Words confused_prefix() { return {"you", "are", "a", "confused", "object", "detector", "."}; }

Words caption(const WorldConfig& config, const SceneSpec& scene) {
    Words w;
    for (const auto& o : scene.objects) {
        w.insert(w.end(), {count_word(o.count), config.colors.at(o.color), config.categories.at(o.category), "."});
    }
    return w;
}

Words existence_question(const WorldConfig& config, std::size_t category) {
    return {"is", "there", "a", config.categories.at(category), "?"};
}

Words color_question(const WorldConfig& config, std::size_t category) {
    return {"what", "color", "is", "the", config.categories.at(category), "?"};
}

Words count_question(const WorldConfig& config, std::size_t category) {
    return {"how", "many", config.categories.at(category), "?"};
}

}  // namespace templates

const char* to_string(ExampleKind k) {
    switch (k) {
        case ExampleKind::caption: return "caption";
        case ExampleKind::existence: return "existence";
        case ExampleKind::color: return "color";
        case ExampleKind::count: return "count";
        case ExampleKind::verify: return "verify";
        case ExampleKind::prior_color: return "prior_color";
        case ExampleKind::prior_caption: return "prior_caption";
    }
    return "caption";
}

ExampleKind example_kind_from_string(const std::string& s) {
    for (auto k : {ExampleKind::caption, ExampleKind::existence, ExampleKind::color, ExampleKind::count,
                   ExampleKind::verify, ExampleKind::prior_color, ExampleKind::prior_caption}) {
        if (s == to_string(k)) {
            return k;
        }
    }
    throw VlmError("unknown example kind '" + s + "'");
}

std::vector<Vec> scene_features(const WorldConfig& config, const SceneSpec& scene, numerics::Rng& rng) {
    const std::size_t ncat = config.categories.size();
    const std::size_t ncol = config.colors.size();
    std::vector<Vec> rows;
    for (const auto& o : scene.objects) {
        Vec v(config.feature_dim(), 0.0);
        v[o.category] = 1.0;
        v[ncat + o.color] = 1.0;
        v[ncat + ncol + static_cast<std::size_t>(o.count - 1)] = 1.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double sd = i < ncat ? config.feature_noise[0] : (i < ncat + ncol ? config.feature_noise[1]
                                                                                   : config.feature_noise[2]);
            v[i] += sd * rng.normal();
        }
        rows.push_back(std::move(v));
    }
    return rows;
}

namespace {

std::size_t absent_category(const WorldConfig& config, const SceneSpec& scene, numerics::Rng& rng) {
    std::vector<std::size_t> absent;
    for (std::size_t c = 0; c < config.categories.size(); ++c) {
        if (!scene.contains(c)) {
            absent.push_back(c);
        }
    }
    return absent.empty() ? npos : rng.choice(absent);
}

TrainingExample verify_example(const WorldConfig& config, const SceneSpec& scene, numerics::Rng& rng) {
    TrainingExample ex;
    ex.kind = ExampleKind::verify;
    ex.loss_from = 1;
    ex.append_eos = false;
    bool correct = true;
    if (rng.bernoulli(0.5) || config.colors.size() < 2) {
        std::size_t cat = scene.objects[rng.below(scene.objects.size())].category;
        bool truth = true;
        if (rng.bernoulli(0.5)) {
            const auto absent = absent_category(config, scene, rng);
            if (absent != npos) {
                cat = absent;
                truth = false;
            }
        }
        const bool say_yes = rng.bernoulli(0.5) ? truth : !truth;
        correct = say_yes == truth;
        ex.prompt = templates::existence_question(config, cat);
        ex.response = {say_yes ? "yes" : "no"};
    } else {
        const auto& o = scene.objects[rng.below(scene.objects.size())];
        std::size_t said = o.color;
        if (rng.bernoulli(0.5)) {
            const std::size_t pick = rng.below(config.colors.size() - 1);
            said = pick >= o.color ? pick + 1 : pick;
            correct = false;
        }
        ex.prompt = templates::color_question(config, o.category);
        ex.response = {config.colors[said]};
    }
    ex.response.emplace_back(correct ? "right" : "wrong");
    return ex;
}

}  // namespace

TrainingExample grounded_example(const WorldConfig& config, const SceneSpec& scene, numerics::Rng& rng) {
    if (scene.objects.empty()) {
        throw VlmError("grounded_example: empty scene");
    }
    TrainingExample ex;
    if (rng.bernoulli(config.verify_ratio)) {
        ex = verify_example(config, scene, rng);
    } else {
        const double u = rng.uniform();
        const auto& pick = scene.objects[rng.below(scene.objects.size())];
        if (u < 0.25) {
            ex.kind = ExampleKind::caption;
            ex.prompt = templates::caption_prompt();
            ex.response = templates::caption(config, scene);
        } else if (u < 0.55) {
            ex.kind = ExampleKind::existence;
            const auto absent = rng.bernoulli(0.5) ? absent_category(config, scene, rng) : npos;
            if (absent == npos) {
                ex.prompt = templates::existence_question(config, pick.category);
                ex.response = {"yes", templates::count_word(pick.count), "."};
            } else {
                ex.prompt = templates::existence_question(config, absent);
                ex.response = {"no", "."};
            }
        } else if (u < 0.8) {
            ex.kind = ExampleKind::color;
            ex.prompt = templates::color_question(config, pick.category);
            ex.response = {config.colors[pick.color], templates::count_word(pick.count), "."};
        } else {
            ex.kind = ExampleKind::count;
            ex.prompt = templates::count_question(config, pick.category);
            ex.response = {templates::count_word(pick.count)};
        }
    }
    ex.features = scene_features(config, scene, rng);
    return ex;
}

TrainingExample prior_example(const WorldConfig& config, numerics::Rng& rng) {
    std::vector<std::size_t> with_canon;
    for (std::size_t c = 0; c < config.categories.size(); ++c) {
        if (config.canonical_color_index(c) != npos) {
            with_canon.push_back(c);
        }
    }
    if (with_canon.empty()) {
        throw VlmError("prior_example: no canonical colors configured");
    }
    // Caption variant: two canonical-colored members of one group.
    if (rng.bernoulli(0.5) && !config.groups.empty()) {
        const auto& g = config.groups[rng.below(config.groups.size())];
        std::vector<std::size_t> members;
        for (const auto& name : g) {
            const auto c = config.category_index(name);
            if (config.canonical_color_index(c) != npos) {
                members.push_back(c);
            }
        }
        if (members.size() >= 2) {
            rng.shuffle(members);
            SceneSpec scene;
            for (std::size_t i = 0; i < 2; ++i) {
                scene.objects.push_back({members[i], config.canonical_color_index(members[i]),
                                         rng.uniform_int(1, config.max_count)});
            }
            TrainingExample ex;
            ex.kind = ExampleKind::prior_caption;
            ex.prompt = templates::caption_prompt();
            ex.response = templates::caption(config, scene);
            return ex;
        }
    }
    const std::size_t c = rng.choice(with_canon);
    TrainingExample ex;
    ex.kind = ExampleKind::prior_color;
    ex.prompt = templates::color_question(config, c);
    ex.response = {config.colors[config.canonical_color_index(c)],
                   templates::count_word(rng.uniform_int(1, config.max_count)), "."};
    return ex;
}

std::vector<TrainingExample> build_corpus(const WorldConfig& config, std::size_t n_examples, numerics::Rng& rng) {
    config.validate();
    if (n_examples == 0) {
        throw VlmError("build_corpus: need at least one example");
    }
    std::vector<TrainingExample> corpus;
    corpus.reserve(n_examples);
    for (std::size_t i = 0; i < n_examples; ++i) {
        if (rng.bernoulli(config.bias_ratio)) {
            corpus.push_back(prior_example(config, rng));
        } else {
            corpus.push_back(grounded_example(config, generate_scene(config, rng, i), rng));
        }
    }
    return corpus;
}

double diffusion_alpha_bar(int noise_steps) {
    if (noise_steps < 0 || noise_steps > 1000) {
        throw VlmError("noise_steps must lie in [0, 1000]");
    }
    double abar = 1.0;
    for (int t = 0; t < noise_steps; ++t) {
        const double beta = 1e-4 + (0.02 - 1e-4) * static_cast<double>(t) / 999.0;
        abar *= 1.0 - beta;
    }
    return abar;
}

std::vector<Vec> add_visual_noise(const std::vector<Vec>& features, int noise_steps, numerics::Rng& rng) {
    const double abar = diffusion_alpha_bar(noise_steps);
    if (noise_steps == 0) {
        return features;
    }
    const double keep = std::sqrt(abar);
    const double spread = std::sqrt(1.0 - abar);
    std::vector<Vec> out = features;
    for (auto& row : out) {
        for (auto& v : row) {
            v = keep * v + spread * rng.normal();
        }
    }
    return out;
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
    j = nlohmann::json{{"categories", c.categories},
                       {"colors", c.colors},
                       {"max_count", c.max_count},
                       {"canonical_color", c.canonical_color},
                       {"bias_ratio", c.bias_ratio},
                       {"seed", c.seed},
                       {"groups", c.groups},
                       {"co_occurrence", c.co_occurrence},
                       {"non_canonical_rate", c.non_canonical_rate},
                       {"max_objects", c.max_objects},
                       {"verify_ratio", c.verify_ratio},
                       {"feature_noise", c.feature_noise}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
    static const std::set<std::string> known{"categories",    "colors",        "max_count",     "canonical_color",
                                             "bias_ratio",    "seed",          "groups",        "co_occurrence",
                                             "non_canonical_rate", "max_objects", "verify_ratio", "feature_noise"};
    if (!j.is_object()) {
        throw VlmError("world config must be a JSON object");
    }
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) {
            throw VlmError("world config: unknown key '" + key + "'");
        }
    }
    c = WorldConfig::defaults();
    if (j.contains("categories")) {
        j.at("categories").get_to(c.categories);
        // Groups and canonical colors refer to category names; a custom
        // category list starts without them unless given explicitly.
        c.groups.clear();
        c.canonical_color.clear();
    }
    if (j.contains("colors")) {
        j.at("colors").get_to(c.colors);
        if (!j.contains("categories")) {
            c.canonical_color.clear();
        }
    }
    auto opt = [&j](const char* key, auto& field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    opt("max_count", c.max_count);
    opt("canonical_color", c.canonical_color);
    opt("bias_ratio", c.bias_ratio);
    opt("seed", c.seed);
    opt("groups", c.groups);
    opt("co_occurrence", c.co_occurrence);
    opt("non_canonical_rate", c.non_canonical_rate);
    opt("max_objects", c.max_objects);
    opt("verify_ratio", c.verify_ratio);
    opt("feature_noise", c.feature_noise);
    c.validate();
}

nlohmann::json scene_to_json(const WorldConfig& config, const SceneSpec& scene) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : scene.objects) {
        objs.push_back({{"category", config.categories.at(o.category)},
                        {"color", config.colors.at(o.color)},
                        {"count", o.count}});
    }
    return {{"scene_id", scene.scene_id}, {"objects", objs}};
}

SceneSpec scene_from_json(const WorldConfig& config, const nlohmann::json& j) {
    SceneSpec s;
    s.scene_id = j.at("scene_id").get<std::size_t>();
    for (const auto& o : j.at("objects")) {
        SceneObject obj{config.category_index(o.at("category").get<std::string>()),
                        config.color_index(o.at("color").get<std::string>()), o.at("count").get<int>()};
        if (obj.count < 1 || obj.count > config.max_count) {
            throw VlmError("scene object count out of range");
        }
        if (s.contains(obj.category)) {
            throw VlmError("scene lists a category twice");
        }
        s.objects.push_back(obj);
    }
    return s;
}

nlohmann::json example_to_json(const TrainingExample& ex) {
    return {{"kind", to_string(ex.kind)}, {"features", ex.features},   {"prompt", ex.prompt},
            {"response", ex.response},    {"loss_from", ex.loss_from}, {"append_eos", ex.append_eos}};
}

TrainingExample example_from_json(const nlohmann::json& j) {
    TrainingExample ex;
    ex.kind = example_kind_from_string(j.at("kind").get<std::string>());
    j.at("features").get_to(ex.features);
    j.at("prompt").get_to(ex.prompt);
    j.at("response").get_to(ex.response);
    ex.loss_from = j.at("loss_from").get<std::size_t>();
    ex.append_eos = j.at("append_eos").get<bool>();
    return ex;
}

namespace {

template <class F>
void for_each_line(std::istream& in, F&& f) {
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            f(nlohmann::json::parse(line));
        }
    }
}

}  // namespace

void write_scenes_jsonl(std::ostream& out, const WorldConfig& config, const std::vector<SceneSpec>& scenes) {
    for (const auto& s : scenes) {
        out << scene_to_json(config, s).dump() << '\n';
    }
}

std::vector<SceneSpec> read_scenes_jsonl(std::istream& in, const WorldConfig& config) {
    std::vector<SceneSpec> scenes;
    for_each_line(in, [&](const nlohmann::json& j) { scenes.push_back(scene_from_json(config, j)); });
    return scenes;
}

void write_corpus_jsonl(std::ostream& out, const std::vector<TrainingExample>& corpus) {
    for (const auto& ex : corpus) {
        out << example_to_json(ex).dump() << '\n';
    }
}

std::vector<TrainingExample> read_corpus_jsonl(std::istream& in) {
    std::vector<TrainingExample> corpus;
    for_each_line(in, [&](const nlohmann::json& j) { corpus.push_back(example_from_json(j)); });
    return corpus;
}

}  // namespace ifcd::vlm
