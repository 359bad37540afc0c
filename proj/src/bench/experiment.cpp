#include "ifcd/bench/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "ifcd/numerics/ops.hpp"
#include "ifcd/numerics/rng.hpp"
#include "ifcd/probe/pairs.hpp"

namespace ifcd::bench {

namespace fs = std::filesystem;
namespace nm = ifcd::numerics;
using decoder::DecodingConfig;
using decoder::Mode;

namespace {

const std::vector<std::pair<Task, const char*>>& task_names() {
    static const std::vector<std::pair<Task, const char*>> names{
        {Task::pope, "pope"},
        {Task::caption, "caption"},
        {Task::sweep_gamma_layers, "sweep_gamma_layers"},
        {Task::sweep_alpha, "sweep_alpha"},
        {Task::sweep_max_tokens, "sweep_max_tokens"},
        {Task::sweep_train_size, "sweep_train_size"},
        {Task::ablation, "ablation"},
        {Task::latent_plot, "latent_plot"},
        {Task::fig3_panel, "fig3_panel"}};
    return names;
}

void say(std::ostream* log, const std::string& msg) {
    if (log != nullptr) {
        *log << msg << '\n';
        log->flush();
    }
}

template <class T>
void require_non_empty(const std::vector<T>& v, const char* name) {
    if (v.empty()) {
        throw ValidationError(std::string("experiment config: ") + name + " must not be empty");
    }
}

}  // namespace

std::string to_string(Task t) {
    for (const auto& [task, name] : task_names()) {
        if (task == t) {
            return name;
        }
    }
    return "pope";
}

Task task_from_string(const std::string& s) {
    for (const auto& [task, name] : task_names()) {
        if (s == name) {
            return task;
        }
    }
    throw ValidationError("unknown task '" + s + "'");
}

void ExperimentConfig::validate() const {
    try {
        world.validate();
        // Active sites come from the probe ranking at run time.
        auto dc = decoding;
        dc.edit.active_sites = {vlm::LayerSite{}};
        dc.validate();
    } catch (const std::runtime_error& e) {
        throw ValidationError(e.what());
    }
    require_non_empty(modes, "modes");
    require_non_empty(seeds, "seeds");
    require_non_empty(strategies, "strategies");
    require_non_empty(gamma_grid, "gamma_grid");
    require_non_empty(sites_grid, "sites_grid");
    require_non_empty(alpha_grid, "alpha_grid");
    require_non_empty(max_tokens_grid, "max_tokens_grid");
    require_non_empty(train_size_grid, "train_size_grid");
    require_non_empty(panel_gamma_grid, "panel_gamma_grid");
    if (corpus_size == 0 || vlm.steps == 0) {
        throw ValidationError("experiment config: corpus_size and vlm.steps must be positive");
    }
    const std::size_t n_sites = 2 * vlm.n_blocks;
    if (active_sites == 0 || active_sites > n_sites) {
        throw ValidationError("experiment config: active_sites must lie in [1, " + std::to_string(n_sites) + "]");
    }
    for (auto k : sites_grid) {
        if (k == 0 || k > n_sites) {
            throw ValidationError("experiment config: sites_grid entries must lie in [1, " + std::to_string(n_sites) +
                                  "]");
        }
    }
    if (probe_train_pairs < probe.min_pairs) {
        throw ValidationError("experiment config: probe_train_pairs is below probe.min_pairs");
    }
    for (auto n : train_size_grid) {
        if (n < probe.min_pairs) {
            throw ValidationError("experiment config: train_size_grid entry " + std::to_string(n) +
                                  " is below probe.min_pairs");
        }
    }
    for (double g : gamma_grid) {
        if (!(g >= 0.0)) {
            throw ValidationError("experiment config: gamma values must be non-negative");
        }
    }
    for (double g : panel_gamma_grid) {
        if (!(g >= 0.0)) {
            throw ValidationError("experiment config: panel gamma values must be non-negative");
        }
    }
    for (double a : alpha_grid) {
        if (!(a >= 0.0)) {
            throw ValidationError("experiment config: alpha values must be non-negative");
        }
    }
    for (auto t : max_tokens_grid) {
        if (t == 0) {
            throw ValidationError("experiment config: max_tokens_grid entries must be positive");
        }
    }
    if (probe_heldout_pairs < 1 || pope_scenes == 0 || pope_questions_per_scene == 0 || caption_scenes == 0 ||
        panel_size == 0 || pope_max_new_tokens == 0 || caption_max_new_tokens == 0) {
        throw ValidationError("experiment config: evaluation sizes must be positive");
    }
    if (noise_steps < 0 || noise_steps > 1000) {
        throw ValidationError("experiment config: noise_steps must lie in [0, 1000]");
    }
    if (workers == 0) {
        throw ValidationError("experiment config: workers must be at least 1");
    }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    nlohmann::json modes = nlohmann::json::array();
    for (auto m : c.modes) {
        modes.push_back(decoder::to_string(m));
    }
    nlohmann::json strategies = nlohmann::json::array();
    for (auto s : c.strategies) {
        strategies.push_back(std::string(eval::to_string(s)));
    }
    nlohmann::json decoding = c.decoding;
    decoding.erase("active_sites");
    j = nlohmann::json{{"task", to_string(c.task)},
                       {"world", c.world},
                       {"corpus_size", c.corpus_size},
                       {"vlm", c.vlm},
                       {"probe", c.probe},
                       {"probe_train_pairs", c.probe_train_pairs},
                       {"probe_heldout_pairs", c.probe_heldout_pairs},
                       {"active_sites", c.active_sites},
                       {"decoding", decoding},
                       {"modes", modes},
                       {"seeds", c.seeds},
                       {"pope_scenes", c.pope_scenes},
                       {"pope_questions_per_scene", c.pope_questions_per_scene},
                       {"pope_max_new_tokens", c.pope_max_new_tokens},
                       {"strategies", strategies},
                       {"caption_scenes", c.caption_scenes},
                       {"caption_max_new_tokens", c.caption_max_new_tokens},
                       {"gamma_grid", c.gamma_grid},
                       {"sites_grid", c.sites_grid},
                       {"alpha_grid", c.alpha_grid},
                       {"max_tokens_grid", c.max_tokens_grid},
                       {"train_size_grid", c.train_size_grid},
                       {"panel_size", c.panel_size},
                       {"panel_gamma_grid", c.panel_gamma_grid},
                       {"noise_steps", c.noise_steps},
                       {"outdir", c.outdir},
                       {"cache_dir", c.cache_dir},
                       {"workers", c.workers}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    if (!j.is_object()) {
        throw ValidationError("experiment config must be a JSON object");
    }
    static const std::set<std::string> known{
        "task",          "world",        "corpus_size",     "vlm",
        "probe",         "probe_train_pairs", "probe_heldout_pairs", "active_sites",
        "decoding",      "modes",        "seeds",           "pope_scenes",
        "pope_questions_per_scene", "pope_max_new_tokens", "strategies", "caption_scenes",
        "caption_max_new_tokens", "gamma_grid", "sites_grid", "alpha_grid",
        "max_tokens_grid", "train_size_grid", "panel_size", "panel_gamma_grid",
        "noise_steps",   "outdir",       "cache_dir",       "workers"};
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) {
            throw ValidationError("experiment config: unknown key '" + key + "'");
        }
    }
    try {
        auto opt = [&j](const char* key, auto& field) {
            if (j.contains(key)) {
                j.at(key).get_to(field);
            }
        };
        if (j.contains("task")) {
            c.task = task_from_string(j.at("task").get<std::string>());
        }
        opt("world", c.world);
        opt("corpus_size", c.corpus_size);
        opt("vlm", c.vlm);
        opt("probe", c.probe);
        opt("probe_train_pairs", c.probe_train_pairs);
        opt("probe_heldout_pairs", c.probe_heldout_pairs);
        opt("active_sites", c.active_sites);
        if (j.contains("decoding")) {
            if (j.at("decoding").contains("active_sites")) {
                throw ValidationError("decoding.active_sites is derived from the probe ranking; set active_sites");
            }
            j.at("decoding").get_to(c.decoding);
        }
        if (j.contains("modes")) {
            c.modes.clear();
            for (const auto& m : j.at("modes")) {
                c.modes.push_back(decoder::mode_from_string(m.get<std::string>()));
            }
        }
        opt("seeds", c.seeds);
        opt("pope_scenes", c.pope_scenes);
        opt("pope_questions_per_scene", c.pope_questions_per_scene);
        opt("pope_max_new_tokens", c.pope_max_new_tokens);
        if (j.contains("strategies")) {
            c.strategies.clear();
            for (const auto& s : j.at("strategies")) {
                c.strategies.push_back(eval::strategy_from_string(s.get<std::string>()));
            }
        }
        opt("caption_scenes", c.caption_scenes);
        opt("caption_max_new_tokens", c.caption_max_new_tokens);
        opt("gamma_grid", c.gamma_grid);
        opt("sites_grid", c.sites_grid);
        opt("alpha_grid", c.alpha_grid);
        opt("max_tokens_grid", c.max_tokens_grid);
        opt("train_size_grid", c.train_size_grid);
        opt("panel_size", c.panel_size);
        opt("panel_gamma_grid", c.panel_gamma_grid);
        opt("noise_steps", c.noise_steps);
        opt("outdir", c.outdir);
        opt("cache_dir", c.cache_dir);
        opt("workers", c.workers);
    } catch (const ValidationError&) {
        throw;
    } catch (const std::exception& e) {
        throw ValidationError(std::string("experiment config: ") + e.what());
    }
}

ExperimentConfig load_experiment_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("cannot parse " + path + ": " + e.what());
    } catch (const BenchError& e) {
        throw ValidationError(e.what());
    }
    return j.get<ExperimentConfig>();
}

namespace {

nm::Rng nth_split(std::uint64_t seed, int n) {
    nm::Rng base(seed);
    nm::Rng out = base.split();
    for (int i = 0; i < n; ++i) {
        out = base.split();
    }
    return out;
}

}  // namespace

SeedStreams::SeedStreams(std::uint64_t seed)
    : corpus(nth_split(seed, 0)),
      heldout_pairs(nth_split(seed, 1)),
      train_pairs(nth_split(seed, 2)),
      pope(nth_split(seed, 3)),
      caption(nth_split(seed, 4)),
      panel(nth_split(seed, 5)),
      contexts(nth_split(seed, 6)) {}

ArtifactStore::ArtifactStore(std::string cache_dir, std::ostream* log) : cache_dir_(std::move(cache_dir)), log_(log) {}

nlohmann::json ArtifactStore::model_key(const ExperimentConfig& cfg, std::uint64_t seed) {
    auto hyper = cfg.vlm;
    hyper.seed = seed;
    nlohmann::json h = hyper;
    h.erase("log_every");
    return {{"format", "ifcd.toy_vlm.v1"}, {"world", cfg.world}, {"corpus_size", cfg.corpus_size}, {"vlm", h}};
}

nlohmann::json ArtifactStore::probe_key(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t n_train) {
    auto hyper = cfg.probe;
    hyper.seed = seed;
    return {{"format", "ifcd.truth_probe.v1"},
            {"model", fingerprint(model_key(cfg, seed))},
            {"probe", hyper},
            {"train_pairs", n_train},
            {"heldout_pairs", cfg.probe_heldout_pairs}};
}

namespace {

void atomic_write(const fs::path& path, const std::function<void(const std::string&)>& writer) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    writer(tmp.string());
    fs::rename(tmp, path);
}

}  // namespace

const vlm::ToyVlmParams& ArtifactStore::model(const ExperimentConfig& cfg, std::uint64_t seed) {
    const auto fp = fingerprint(model_key(cfg, seed));
    std::lock_guard lock(mu_);
    if (auto it = models_.find(fp); it != models_.end()) {
        return *it->second;
    }
    const fs::path path = cache_dir_.empty() ? fs::path{} : fs::path(cache_dir_) / ("vlm-" + fp + ".json");
    if (!path.empty() && fs::exists(path)) {
        say(log_, "loading cached toy VLM " + path.string());
        auto m = std::make_unique<vlm::ToyVlmParams>(vlm::load_checkpoint(path.string()));
        return *models_.emplace(fp, std::move(m)).first->second;
    }
    say(log_, "training toy VLM seed=" + std::to_string(seed) + " steps=" + std::to_string(cfg.vlm.steps));
    SeedStreams streams(seed);
    const auto corpus = vlm::build_corpus(cfg.world, cfg.corpus_size, streams.corpus);
    auto hyper = cfg.vlm;
    hyper.seed = seed;
    auto m = std::make_unique<vlm::ToyVlmParams>(
        vlm::train_toy_vlm(corpus, vlm::Vocab::for_world(cfg.world), cfg.world.feature_dim(), hyper));
    if (!path.empty()) {
        atomic_write(path, [&](const std::string& p) { vlm::save_checkpoint(p, *m); });
    }
    return *models_.emplace(fp, std::move(m)).first->second;
}

void ArtifactStore::install_model(const ExperimentConfig& cfg, std::uint64_t seed, vlm::ToyVlmParams model) {
    std::lock_guard lock(mu_);
    models_[fingerprint(model_key(cfg, seed))] = std::make_unique<vlm::ToyVlmParams>(std::move(model));
}

void ArtifactStore::install_probe(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t n_train,
                                  probe::ProbeParams p) {
    std::lock_guard lock(mu_);
    probes_[fingerprint(probe_key(cfg, seed, n_train))] = std::make_unique<probe::ProbeParams>(std::move(p));
}

const std::vector<probe::ProbePair>& ArtifactStore::heldout_pairs(const ExperimentConfig& cfg, std::uint64_t seed) {
    const auto& m = model(cfg, seed);
    const auto fp = fingerprint({{"model", fingerprint(model_key(cfg, seed))}, {"n", cfg.probe_heldout_pairs}});
    std::lock_guard lock(mu_);
    if (auto it = heldout_.find(fp); it != heldout_.end()) {
        return *it->second;
    }
    SeedStreams streams(seed);
    auto pairs = std::make_unique<std::vector<probe::ProbePair>>(
        probe::collect_pairs(m, cfg.world, cfg.probe_heldout_pairs, streams.heldout_pairs));
    return *heldout_.emplace(fp, std::move(pairs)).first->second;
}

std::vector<probe::ProbePair> ArtifactStore::train_pairs(const ExperimentConfig& cfg, std::uint64_t seed,
                                                         std::size_t n) {
    const auto& m = model(cfg, seed);
    SeedStreams streams(seed);
    return probe::collect_pairs(m, cfg.world, n, streams.train_pairs);
}

const probe::ProbeParams& ArtifactStore::probe(const ExperimentConfig& cfg, std::uint64_t seed,
                                               std::optional<std::size_t> n_train) {
    const std::size_t n = n_train.value_or(cfg.probe_train_pairs);
    const auto fp = fingerprint(probe_key(cfg, seed, n));
    {
        std::lock_guard lock(mu_);
        if (auto it = probes_.find(fp); it != probes_.end()) {
            return *it->second;
        }
    }
    const fs::path path = cache_dir_.empty() ? fs::path{} : fs::path(cache_dir_) / ("probe-" + fp + ".json");
    std::unique_ptr<probe::ProbeParams> p;
    if (!path.empty() && fs::exists(path)) {
        say(log_, "loading cached probe " + path.string());
        p = std::make_unique<probe::ProbeParams>(probe::load_probe(path.string()));
    } else {
        const auto train = train_pairs(cfg, seed, n);
        const auto& held = heldout_pairs(cfg, seed);
        auto hyper = cfg.probe;
        hyper.seed = seed;
        say(log_, "training probe seed=" + std::to_string(seed) + " pairs=" + std::to_string(n));
        p = std::make_unique<probe::ProbeParams>(probe::train_probe(train, held, hyper));
        if (!path.empty()) {
            atomic_write(path, [&](const std::string& tmp) { probe::save_probe(tmp, *p, probe_key(cfg, seed, n)); });
        }
    }
    std::lock_guard lock(mu_);
    return *probes_.emplace(fp, std::move(p)).first->second;
}

void MaskAudit::check(const decoder::StepTrace& step) {
    ++steps;
    bool bad = !step.candidates.contains(step.chosen);
    for (std::size_t t = 0; t < step.probs.size() && !bad; ++t) {
        if (!step.candidates.contains(t) && step.probs[t] != 0.0) {
            bad = true;
        }
    }
    if (bad) {
        ++violations;
    }
}

void MaskAudit::check(const decoder::DecodeResult& r) {
    for (const auto& s : r.trace) {
        check(s);
    }
}

std::vector<EvalScene> draw_eval_scenes(const vlm::WorldConfig& world, std::size_t n, nm::Rng& rng) {
    std::vector<EvalScene> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        EvalScene s;
        s.scene = vlm::generate_scene(world, rng, i);
        s.features = vlm::scene_features(world, s.scene, rng);
        out.push_back(std::move(s));
    }
    return out;
}

PopeCell evaluate_pope(const vlm::ToyVlmParams& model, const probe::ProbeParams* probe,
                       const vlm::WorldConfig& world, const std::vector<EvalScene>& scenes, const std::vector<PopeQuestion>& questions,
                       const DecodingConfig& config) {
    PopeCell cell;
    std::vector<eval::PopeRecord> records;
    records.reserve(questions.size());
    for (std::size_t q = 0; q < questions.size(); ++q) {
        const auto& question = questions[q];
        if (question.scene_id >= scenes.size() || scenes[question.scene_id].scene.scene_id != question.scene_id) {
            throw BenchError("pope question refers to unknown scene " + std::to_string(question.scene_id));
        }
        const auto prompt = vlm::templates::existence_question(world, world.category_index(question.object));
        const auto out = decoder::decode(model, probe, scenes[question.scene_id].features, prompt, config);
        cell.audit.check(out);
        eval::PopeRecord rec;
        rec.question_id = q;
        rec.label = question.label;
        rec.strategy = question.strategy;
        const auto ans = parse_answer(out.words(model.vocab));
        if (ans) {
            rec.predicted = *ans;
        } else {
            ++cell.unparsed;
            rec.predicted = question.label == eval::Answer::yes ? eval::Answer::no : eval::Answer::yes;
        }
        records.push_back(rec);
    }
    cell.metrics = eval::pope_metrics(records);
    return cell;
}

CaptionCell evaluate_captions(const vlm::ToyVlmParams& model, const probe::ProbeParams* probe,
                              const vlm::WorldConfig& world, const std::vector<EvalScene>& scenes,
                              const DecodingConfig& config) {
    CaptionCell cell;
    const std::set<std::string> categories(world.categories.begin(), world.categories.end());
    std::vector<eval::CaptionAnnotation> annotations;
    std::vector<eval::Tokens> refs;
    double total_len = 0.0;
    for (const auto& s : scenes) {
        const auto out = decoder::decode(model, probe, s.features, vlm::templates::caption_prompt(), config);
        cell.audit.check(out);
        auto words = out.words(model.vocab);
        std::set<std::string> gt;
        for (const auto& o : s.scene.objects) {
            gt.insert(world.categories[o.category]);
        }
        annotations.push_back(eval::annotate_caption(words, categories, gt));
        refs.push_back(vlm::templates::caption(world, s.scene));
        total_len += static_cast<double>(words.size());
        cell.captions.push_back(std::move(words));
    }
    cell.chair = eval::chair_scores(annotations);
    cell.bleu = eval::bleu(cell.captions, refs);
    cell.mean_length = total_len / static_cast<double>(scenes.size());
    return cell;
}

std::vector<PanelItem> draw_prior_panel(const vlm::WorldConfig& world, const vlm::Vocab& vocab, std::size_t n,
                                        nm::Rng& rng) {
    std::vector<PanelItem> out;
    const std::size_t max_draws = 1000 * n + 1000;
    for (std::size_t draw = 0; draw < max_draws && out.size() < n; ++draw) {
        auto scene = vlm::generate_scene(world, rng, draw);
        for (const auto& o : scene.objects) {
            const auto canon = world.canonical_color_index(o.category);
            if (canon == static_cast<std::size_t>(-1) || canon == o.color) {
                continue;
            }
            PanelItem item;
            item.category = o.category;
            item.prior_color = vocab.id(world.colors[canon]);
            item.true_color = vocab.id(world.colors[o.color]);
            item.prompt = vlm::templates::color_question(world, o.category);
            item.scene.features = vlm::scene_features(world, scene, rng);
            item.scene.scene = std::move(scene);
            out.push_back(std::move(item));
            break;
        }
    }
    if (out.size() < n) {
        throw BenchError("cannot build a prior-contradicting panel: the world has too few non-canonical objects");
    }
    return out;
}

vlm::TokenDistribution panel_distribution(const vlm::ToyVlmParams& model, const probe::ProbeParams& probe,
                                          const std::vector<vlm::LayerSite>& sites, const PanelItem& item,
                                          double gamma, probe::EditSign sign) {
    const auto seq = vlm::make_sequence(model.vocab, item.scene.features, item.prompt);
    if (gamma == 0.0) {
        return vlm::forward(model, seq);
    }
    probe::EditConfig cfg;
    cfg.gamma = gamma;
    cfg.sign = sign;
    cfg.active_sites = sites;
    auto hooks = vlm::HookBundle::edit(probe::make_editors(probe, cfg));
    return vlm::forward(model, seq, &hooks);
}

double PanelSummary::monotone_fraction() const {
    if (p_prior.empty()) {
        return 0.0;
    }
    std::size_t ok = 0;
    for (const auto& row : p_prior) {
        bool mono = true;
        for (std::size_t g = 1; g < row.size(); ++g) {
            mono = mono && row[g] >= row[g - 1];
        }
        ok += mono ? 1 : 0;
    }
    return static_cast<double>(ok) / static_cast<double>(p_prior.size());
}

double PanelSummary::wo_pos_below_regular_fraction() const {
    if (wo_pos_p_prior.empty()) {
        return 0.0;
    }
    std::size_t ok = 0;
    for (std::size_t i = 0; i < wo_pos_p_prior.size(); ++i) {
        ok += wo_pos_p_prior[i] < regular_p_prior[i] ? 1 : 0;
    }
    return static_cast<double>(ok) / static_cast<double>(wo_pos_p_prior.size());
}

PanelSummary run_panel(const vlm::ToyVlmParams& model, const probe::ProbeParams& probe,
                       const std::vector<vlm::LayerSite>& sites, const std::vector<PanelItem>& panel,
                       const std::vector<double>& gammas, int noise_steps, const DecodingConfig& decoding,
                       nm::Rng& rng) {
    PanelSummary s;
    s.gammas = gammas;
    for (const auto& item : panel) {
        std::vector<double> prior;
        std::vector<double> truth;
        for (double g : gammas) {
            const auto d = panel_distribution(model, probe, sites, item, g);
            prior.push_back(d.probs[item.prior_color]);
            truth.push_back(d.probs[item.true_color]);
        }
        s.p_prior.push_back(std::move(prior));
        s.p_true.push_back(std::move(truth));

        const auto noisy = vlm::add_visual_noise(item.scene.features, noise_steps, rng);
        const auto dn = vlm::forward(model, vlm::make_sequence(model.vocab, noisy, item.prompt));
        s.noise_p_prior.push_back(dn.probs[item.prior_color]);
        s.noise_p_true.push_back(dn.probs[item.true_color]);

        auto prefixed = vlm::templates::confused_prefix();
        prefixed.insert(prefixed.end(), item.prompt.begin(), item.prompt.end());
        const auto dp = vlm::forward(model, vlm::make_sequence(model.vocab, item.scene.features, prefixed));
        s.prefix_p_prior.push_back(dp.probs[item.prior_color]);
        s.prefix_p_true.push_back(dp.probs[item.true_color]);

        decoder::Context ctx{item.scene.features, item.prompt, {}};
        auto cfg = decoding;
        cfg.selection = decoder::Selection::greedy;
        cfg.mode = Mode::regular;
        s.regular_p_prior.push_back(decoder::ifcd_step(model, &probe, ctx, cfg).trace.probs[item.prior_color]);
        cfg.mode = Mode::ifcd_wo_pos;
        s.wo_pos_p_prior.push_back(decoder::ifcd_step(model, &probe, ctx, cfg).trace.probs[item.prior_color]);
    }
    return s;
}

DecodingConfig seed_decoding(const ExperimentConfig& cfg, const probe::ProbeParams& probe) {
    auto dc = cfg.decoding;
    dc.edit.active_sites = probe.top_sites(cfg.active_sites);
    return dc;
}

namespace {

using Job = std::function<RunResult()>;

std::vector<RunResult> run_jobs(const std::vector<Job>& jobs, std::size_t workers, std::ostream* log) {
    std::vector<RunResult> out(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mu;
    auto work = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            const auto t0 = std::chrono::steady_clock::now();
            try {
                out[i] = jobs[i]();
            } catch (...) {
                errors[i] = std::current_exception();
                continue;
            }
            out[i].wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (log != nullptr) {
                std::lock_guard lock(log_mu);
                *log << "  [" << (i + 1) << "/" << jobs.size() << "] " << out[i].task;
                for (const auto& [k, v] : out[i].labels) {
                    *log << ' ' << k << '=' << v;
                }
                *log << " (" << format_number(std::round(out[i].wall_clock_s * 100.0) / 100.0) << "s)\n";
            }
        }
    };
    const std::size_t n = std::min(workers, std::max<std::size_t>(jobs.size(), 1));
    if (n <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n; ++w) {
            pool.emplace_back(work);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return out;
}

RunResult new_result(const std::string& task, std::uint64_t seed, nlohmann::json config) {
    RunResult r;
    r.task = task;
    r.seed = seed;
    config["task"] = task;
    config["seed"] = seed;
    r.config = std::move(config);
    r.fingerprint = fingerprint(r.config);
    r.provenance = provenance();
    return r;
}

bool needs_probe(const std::vector<Mode>& modes) {
    return std::any_of(modes.begin(), modes.end(), [](Mode m) { return m != Mode::regular; });
}

std::string num_label(double v) { return format_number(v); }

void add_pope_metrics(RunResult& r, const PopeCell& c) {
    r.metric("accuracy", c.metrics.accuracy);
    r.metric("precision", c.metrics.precision);
    r.metric("recall", c.metrics.recall);
    r.metric("f1", c.metrics.f1);
    r.metric("tp", static_cast<double>(c.metrics.tp));
    r.metric("fp", static_cast<double>(c.metrics.fp));
    r.metric("tn", static_cast<double>(c.metrics.tn));
    r.metric("fn", static_cast<double>(c.metrics.fn));
    r.metric("unparsed", static_cast<double>(c.unparsed));
    r.metric("steps", static_cast<double>(c.audit.steps));
    r.metric("mask_violations", static_cast<double>(c.audit.violations));
}

void add_caption_metrics(RunResult& r, const CaptionCell& c) {
    r.metric("chair_s", c.chair.chair_s);
    r.metric("chair_i", c.chair.chair_i);
    r.metric("bleu", c.bleu);
    r.metric("hallucinated_sentences", static_cast<double>(c.chair.hallucinated_sentences));
    r.metric("sentences", static_cast<double>(c.chair.sentences));
    r.metric("hallucinated_objects", static_cast<double>(c.chair.hallucinated_objects));
    r.metric("mentioned_objects", static_cast<double>(c.chair.mentioned_objects));
    r.metric("mean_length", c.mean_length);
    r.metric("steps", static_cast<double>(c.audit.steps));
    r.metric("mask_violations", static_cast<double>(c.audit.violations));
}

/// Mean of `metric` over seeds for each (series label, x) pair, x parsed from a label.
Chart mean_chart(const std::vector<RunResult>& results, const std::string& title, const std::string& series_key,
                 const std::string& x_key, const std::string& metric, const std::string& series_prefix = "") {
    Chart chart;
    chart.title = title;
    chart.x_label = x_key;
    chart.y_label = metric + " (mean over seeds)";
    std::vector<std::string> order;
    std::map<std::string, std::map<double, std::pair<double, int>>> acc;
    for (const auto& r : results) {
        const std::string s = series_prefix + r.label_at(series_key);
        if (std::find(order.begin(), order.end(), s) == order.end()) {
            order.push_back(s);
        }
        auto& cell = acc[s][std::stod(r.label_at(x_key))];
        cell.first += r.at(metric);
        cell.second += 1;
    }
    for (const auto& s : order) {
        Series series{s, {}};
        for (const auto& [x, sum] : acc[s]) {
            series.points.emplace_back(x, sum.first / sum.second);
        }
        chart.series.push_back(std::move(series));
    }
    return chart;
}

struct SeedData {
    std::uint64_t seed = 0;
    const vlm::ToyVlmParams* model = nullptr;
    const probe::ProbeParams* probe = nullptr;
    DecodingConfig decoding;
    nlohmann::json base;  // artifact fingerprints
};

SeedData prepare_seed(const ExperimentConfig& cfg, ArtifactStore& store, std::uint64_t seed, bool with_probe) {
    SeedData d;
    d.seed = seed;
    d.model = &store.model(cfg, seed);
    d.base = {{"model", fingerprint(ArtifactStore::model_key(cfg, seed))}};
    d.decoding = cfg.decoding;
    if (with_probe) {
        d.probe = &store.probe(cfg, seed);
        d.decoding = seed_decoding(cfg, *d.probe);
        d.base["probe"] = fingerprint(ArtifactStore::probe_key(cfg, seed, cfg.probe_train_pairs));
    }
    return d;
}

nlohmann::json decoding_json(const DecodingConfig& dc) {
    nlohmann::json j = dc;
    return j;
}

void add_captions_file(Report& report, const std::vector<std::tuple<std::uint64_t, std::string, CaptionCell>>& cells) {
    std::ostringstream out;
    for (const auto& [seed, mode, cell] : cells) {
        for (std::size_t i = 0; i < cell.captions.size(); ++i) {
            std::string text;
            for (const auto& w : cell.captions[i]) {
                text += (text.empty() ? "" : " ") + w;
            }
            out << nlohmann::json{{"seed", seed}, {"mode", mode}, {"scene_id", i}, {"caption", text}}.dump() << '\n';
        }
    }
    report.extra_files["captions.jsonl"] = out.str();
}

}  // namespace

Report run_experiment(const ExperimentConfig& cfg, ArtifactStore& store, std::ostream* log) {
    cfg.validate();
    Report report;
    report.manifest["config"] = cfg;
    const std::string task = to_string(cfg.task);
    std::vector<Job> jobs;
    std::vector<SeedData> seeds;
    const bool probe_needed = cfg.task != Task::pope && cfg.task != Task::caption ? true : needs_probe(cfg.modes);
    for (auto seed : cfg.seeds) {
        seeds.push_back(prepare_seed(cfg, store, seed, probe_needed));
    }
    nlohmann::json artifacts = nlohmann::json::array();
    for (const auto& d : seeds) {
        nlohmann::json a = d.base;
        a["seed"] = d.seed;
        if (d.probe != nullptr) {
            nlohmann::json ranking = nlohmann::json::array();
            for (const auto& r : d.probe->layer_ranking) {
                ranking.push_back({{"site", vlm::to_string(r.site)}, {"heldout_auc", r.score}});
            }
            a["layer_ranking"] = ranking;
        }
        artifacts.push_back(a);
    }
    report.manifest["artifacts"] = artifacts;
    say(log, "running " + task);

    // Per-seed evaluation data lives here so jobs can hold references.
    std::vector<std::vector<EvalScene>> pope_scenes(seeds.size());
    std::vector<std::map<eval::PopeStrategy, std::vector<PopeQuestion>>> pope_sets(seeds.size());
    std::vector<std::vector<EvalScene>> caption_scenes(seeds.size());
    auto prepare_pope = [&](std::size_t i) {
        SeedStreams streams(seeds[i].seed);
        pope_scenes[i] = draw_eval_scenes(cfg.world, cfg.pope_scenes, streams.pope);
        std::vector<vlm::SceneSpec> specs;
        for (const auto& s : pope_scenes[i]) {
            specs.push_back(s.scene);
        }
        for (auto strategy :
             {eval::PopeStrategy::random, eval::PopeStrategy::popular, eval::PopeStrategy::adversarial}) {
            pope_sets[i][strategy] = build_pope_dataset(cfg.world, specs, strategy,
                                                        cfg.pope_scenes * cfg.pope_questions_per_scene, streams.pope);
        }
    };
    auto prepare_captions = [&](std::size_t i) {
        SeedStreams streams(seeds[i].seed);
        caption_scenes[i] = draw_eval_scenes(cfg.world, cfg.caption_scenes, streams.caption);
    };

    // Caption cells are kept for captions.jsonl.
    std::vector<std::tuple<std::uint64_t, std::string, CaptionCell>> caption_cells;
    std::mutex cells_mu;
    auto caption_job = [&](std::size_t i, Mode mode, DecodingConfig dc, nlohmann::json point,
                           std::vector<std::pair<std::string, std::string>> labels, bool keep) -> Job {
        return [&, i, mode, dc, point, labels, keep]() mutable {
            dc.mode = mode;
            const auto& d = seeds[i];
            point.update(d.base);
            point["decoding"] = decoding_json(dc);
            point["caption_scenes"] = cfg.caption_scenes;
            auto r = new_result(task, d.seed, point);
            for (const auto& [k, v] : labels) {
                r.label(k, v);
            }
            const auto cell =
                evaluate_captions(*d.model, mode == Mode::regular ? nullptr : d.probe, cfg.world, caption_scenes[i], dc);
            add_caption_metrics(r, cell);
            if (keep) {
                std::lock_guard lock(cells_mu);
                caption_cells.emplace_back(d.seed, decoder::to_string(mode), cell);
            }
            return r;
        };
    };
    auto pope_job = [&](std::size_t i, Mode mode, eval::PopeStrategy strategy, DecodingConfig dc,
                        const probe::ProbeParams* probe_override, nlohmann::json point,
                        std::vector<std::pair<std::string, std::string>> labels) -> Job {
        return [&, i, mode, strategy, dc, probe_override, point, labels]() mutable {
            dc.mode = mode;
            dc.max_new_tokens = cfg.pope_max_new_tokens;
            const auto& d = seeds[i];
            const probe::ProbeParams* p = probe_override != nullptr ? probe_override : d.probe;
            point.update(d.base);
            point["decoding"] = decoding_json(dc);
            point["strategy"] = std::string(eval::to_string(strategy));
            point["pope_questions"] = cfg.pope_scenes * cfg.pope_questions_per_scene;
            auto r = new_result(task, d.seed, point);
            for (const auto& [k, v] : labels) {
                r.label(k, v);
            }
            const auto cell =
                evaluate_pope(*d.model, mode == Mode::regular ? nullptr : p, cfg.world, pope_scenes[i], pope_sets[i].at(strategy), dc);
            add_pope_metrics(r, cell);
            return r;
        };
    };

    switch (cfg.task) {
        case Task::pope: {
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                prepare_pope(i);
                for (auto mode : cfg.modes) {
                    for (auto strategy : cfg.strategies) {
                        jobs.push_back(pope_job(i, mode, strategy, seeds[i].decoding, nullptr, {},
                                                {{"mode", decoder::to_string(mode)},
                                                 {"strategy", std::string(eval::to_string(strategy))}}));
                    }
                }
            }
            report.results = run_jobs(jobs, cfg.workers, log);
            Chart chart;
            chart.title = "POPE accuracy by split";
            chart.x_label = "split (0 random, 1 popular, 2 adversarial)";
            chart.y_label = "accuracy (mean over seeds)";
            for (auto mode : cfg.modes) {
                Series s{decoder::to_string(mode), {}};
                for (auto strategy : cfg.strategies) {
                    double sum = 0.0;
                    int n = 0;
                    for (const auto& r : report.results) {
                        if (r.label_at("mode") == s.name && r.label_at("strategy") == eval::to_string(strategy)) {
                            sum += r.at("accuracy");
                            ++n;
                        }
                    }
                    s.points.emplace_back(static_cast<double>(strategy), sum / n);
                }
                chart.series.push_back(std::move(s));
            }
            report.charts["pope_accuracy"] = chart;
            break;
        }
        case Task::caption:
        case Task::ablation: {
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                prepare_captions(i);
                for (auto mode : cfg.modes) {
                    auto dc = seeds[i].decoding;
                    dc.max_new_tokens = cfg.caption_max_new_tokens;
                    jobs.push_back(caption_job(i, mode, dc, {}, {{"mode", decoder::to_string(mode)}}, true));
                }
            }
            report.results = run_jobs(jobs, cfg.workers, log);
            for (const char* metric : {"chair_s", "chair_i"}) {
                Chart chart;
                chart.title = std::string(metric) + " by decoding mode";
                chart.x_label = "mode index";
                chart.y_label = std::string(metric) + " (mean over seeds)";
                for (std::size_t m = 0; m < cfg.modes.size(); ++m) {
                    const auto name = decoder::to_string(cfg.modes[m]);
                    double sum = 0.0;
                    int n = 0;
                    for (const auto& r : report.results) {
                        if (r.label_at("mode") == name) {
                            sum += r.at(metric);
                            ++n;
                        }
                    }
                    chart.series.push_back({name, {{static_cast<double>(m), sum / n}}});
                }
                chart.scatter = true;
                report.charts[std::string(task) + "_" + metric] = chart;
            }
            add_captions_file(report, caption_cells);
            break;
        }
        case Task::sweep_gamma_layers: {
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                prepare_captions(i);
                for (auto k : cfg.sites_grid) {
                    for (double g : cfg.gamma_grid) {
                        auto dc = seeds[i].decoding;
                        dc.max_new_tokens = cfg.caption_max_new_tokens;
                        dc.edit.gamma = g;
                        dc.edit.active_sites = seeds[i].probe->top_sites(k);
                        jobs.push_back(caption_job(i, Mode::ifcd_full, dc, {{"active_sites", k}},
                                                   {{"sites", std::to_string(k)}, {"gamma", num_label(g)}}, false));
                    }
                }
            }
            report.results = run_jobs(jobs, cfg.workers, log);
            report.charts["sweep_gamma_chair_s"] =
                mean_chart(report.results, "chair_s vs editing strength", "sites", "gamma", "chair_s", "K=");
            report.charts["sweep_gamma_chair_i"] =
                mean_chart(report.results, "chair_i vs editing strength", "sites", "gamma", "chair_i", "K=");
            break;
        }
        case Task::sweep_alpha: {
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                prepare_captions(i);
                for (double a : cfg.alpha_grid) {
                    auto dc = seeds[i].decoding;
                    dc.max_new_tokens = cfg.caption_max_new_tokens;
                    dc.alpha = a;
                    jobs.push_back(caption_job(i, Mode::ifcd_full, dc, {},
                                               {{"mode", "ifcd_full"}, {"alpha", num_label(a)}}, false));
                }
            }
            report.results = run_jobs(jobs, cfg.workers, log);
            report.charts["sweep_alpha_chair_s"] =
                mean_chart(report.results, "chair_s vs contrast strength", "mode", "alpha", "chair_s");
            report.charts["sweep_alpha_chair_i"] =
                mean_chart(report.results, "chair_i vs contrast strength", "mode", "alpha", "chair_i");
            break;
        }
        case Task::sweep_max_tokens: {
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                prepare_captions(i);
                for (auto mode : cfg.modes) {
                    for (auto t : cfg.max_tokens_grid) {
                        auto dc = seeds[i].decoding;
                        dc.max_new_tokens = t;
                        jobs.push_back(caption_job(i, mode, dc, {},
                                                   {{"mode", decoder::to_string(mode)}, {"max_new_tokens", std::to_string(t)}},
                                                   false));
                    }
                }
            }
            report.results = run_jobs(jobs, cfg.workers, log);
            report.charts["sweep_max_tokens_chair_i"] =
                mean_chart(report.results, "chair_i vs max new tokens", "mode", "max_new_tokens", "chair_i");
            report.charts["sweep_max_tokens_chair_s"] =
                mean_chart(report.results, "chair_s vs max new tokens", "mode", "max_new_tokens", "chair_s");
            break;
        }
        case Task::sweep_train_size: {
            std::vector<std::vector<const probe::ProbeParams*>> probes(seeds.size());
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                prepare_pope(i);
                for (auto n : cfg.train_size_grid) {
                    probes[i].push_back(&store.probe(cfg, seeds[i].seed, n));
                }
            }
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                for (std::size_t k = 0; k < cfg.train_size_grid.size(); ++k) {
                    const auto* p = probes[i][k];
                    const auto n = cfg.train_size_grid[k];
                    auto dc = seed_decoding(cfg, *p);
                    for (auto mode : cfg.modes) {
                        Job inner = pope_job(i, mode, eval::PopeStrategy::adversarial, dc, p,
                                             {{"probe", fingerprint(ArtifactStore::probe_key(cfg, seeds[i].seed, n))},
                                              {"train_pairs", n}},
                                             {{"mode", decoder::to_string(mode)}, {"train_pairs", std::to_string(n)},
                                              {"strategy", "adversarial"}});
                        jobs.push_back([inner, p, &cfg]() {
                            auto r = inner();
                            double mean_auc = 0.0;
                            for (const auto& rs : p->layer_ranking) {
                                mean_auc += rs.score;
                            }
                            r.metric("top_site_auc", p->layer_ranking.front().score);
                            r.metric("active_min_auc", p->layer_ranking[cfg.active_sites - 1].score);
                            r.metric("mean_site_auc", mean_auc / static_cast<double>(p->layer_ranking.size()));
                            return r;
                        });
                    }
                }
            }
            report.results = run_jobs(jobs, cfg.workers, log);
            report.charts["sweep_train_size_accuracy"] = mean_chart(
                report.results, "adversarial POPE accuracy vs probe training pairs", "mode", "train_pairs", "accuracy");
            report.charts["sweep_train_size_auc"] = mean_chart(
                report.results, "held-out AUC of the top site vs training pairs", "mode", "train_pairs", "top_site_auc");
            break;
        }
        case Task::latent_plot: {
            std::ostringstream points;
            points << "seed,site,x,y,label\n";
            Chart chart;
            chart.title = "truth latent (PCA), top site, seed " + std::to_string(seeds.front().seed);
            chart.x_label = "pc1";
            chart.y_label = "pc2";
            chart.scatter = true;
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                const auto& d = seeds[i];
                const auto& held = store.heldout_pairs(cfg, d.seed);
                for (const auto& ranked : d.probe->layer_ranking) {
                    std::vector<probe::ProbePair> site_pairs;
                    for (const auto& p : held) {
                        if (p.site == ranked.site) {
                            site_pairs.push_back(p);
                        }
                    }
                    const auto& sp = d.probe->at(ranked.site);
                    const auto pts = probe::latent_scatter(sp, site_pairs);
                    auto point = d.base;
                    point["site"] = vlm::to_string(ranked.site);
                    auto r = new_result(task, d.seed, point);
                    r.label("site", vlm::to_string(ranked.site));
                    r.metric("heldout_auc", probe::separation_auc(sp, site_pairs));
                    r.metric("pairs", static_cast<double>(site_pairs.size()));
                    report.results.push_back(std::move(r));
                    for (const auto& pt : pts) {
                        points << d.seed << ',' << vlm::to_string(ranked.site) << ',' << format_number(pt.x) << ','
                               << format_number(pt.y) << ',' << pt.label << '\n';
                    }
                    if (i == 0 && ranked.site == d.probe->layer_ranking.front().site) {
                        Series truthful{"truthful", {}};
                        Series untruthful{"untruthful", {}};
                        for (const auto& pt : pts) {
                            (pt.label == 1 ? truthful : untruthful).points.emplace_back(pt.x, pt.y);
                        }
                        chart.series = {truthful, untruthful};
                    }
                }
            }
            report.extra_files["latent_points.csv"] = points.str();
            report.charts["latent_plot"] = chart;
            break;
        }
        case Task::fig3_panel: {
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                const auto& d = seeds[i];
                SeedStreams streams(d.seed);
                const auto panel = draw_prior_panel(cfg.world, d.model->vocab, cfg.panel_size, streams.panel);
                const auto summary = run_panel(*d.model, *d.probe, d.decoding.edit.active_sites, panel,
                                               cfg.panel_gamma_grid, cfg.noise_steps, d.decoding, streams.panel);
                auto mean = [](const std::vector<double>& v) {
                    double s = 0.0;
                    for (double x : v) {
                        s += x;
                    }
                    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
                };
                auto base = d.base;
                base["decoding"] = decoding_json(d.decoding);
                base["panel_size"] = cfg.panel_size;
                for (std::size_t g = 0; g < summary.gammas.size(); ++g) {
                    std::vector<double> prior;
                    std::vector<double> truth;
                    std::size_t flipped = 0;
                    for (std::size_t k = 0; k < panel.size(); ++k) {
                        prior.push_back(summary.p_prior[k][g]);
                        truth.push_back(summary.p_true[k][g]);
                        flipped += summary.p_prior[k][g] > summary.p_true[k][g] ? 1 : 0;
                    }
                    auto point = base;
                    point["condition"] = "negative_edit";
                    point["gamma"] = summary.gammas[g];
                    auto r = new_result(task, d.seed, point);
                    r.label("condition", "negative_edit");
                    r.label("gamma", num_label(summary.gammas[g]));
                    r.metric("mean_p_prior", mean(prior));
                    r.metric("mean_p_true", mean(truth));
                    r.metric("prior_above_true", static_cast<double>(flipped) / static_cast<double>(panel.size()));
                    report.results.push_back(std::move(r));
                }
                auto add_condition = [&](const std::string& name, const std::vector<double>& prior,
                                         const std::vector<double>& truth) {
                    auto point = base;
                    point["condition"] = name;
                    if (name == "visual_noise") {
                        point["noise_steps"] = cfg.noise_steps;
                    }
                    auto r = new_result(task, d.seed, point);
                    r.label("condition", name);
                    r.label("gamma", "");
                    r.metric("mean_p_prior", mean(prior));
                    if (!truth.empty()) {
                        std::size_t flipped = 0;
                        for (std::size_t k = 0; k < prior.size(); ++k) {
                            flipped += prior[k] > truth[k] ? 1 : 0;
                        }
                        r.metric("mean_p_true", mean(truth));
                        r.metric("prior_above_true", static_cast<double>(flipped) / static_cast<double>(prior.size()));
                    }
                    report.results.push_back(std::move(r));
                };
                add_condition("visual_noise", summary.noise_p_prior, summary.noise_p_true);
                add_condition("confused_prefix", summary.prefix_p_prior, summary.prefix_p_true);
                add_condition("regular_decoder", summary.regular_p_prior, {});
                add_condition("ifcd_wo_pos_decoder", summary.wo_pos_p_prior, {});
                auto point = base;
                point["condition"] = "summary";
                auto r = new_result(task, d.seed, point);
                r.label("condition", "summary");
                r.label("gamma", "");
                r.metric("monotone_fraction", summary.monotone_fraction());
                r.metric("wo_pos_below_regular", summary.wo_pos_below_regular_fraction());
                report.results.push_back(std::move(r));
            }
            std::vector<RunResult> edits;
            for (const auto& r : report.results) {
                if (r.label_at("condition") == "negative_edit") {
                    edits.push_back(r);
                }
            }
            auto chart = mean_chart(edits, "color probability under negative editing", "condition", "gamma",
                                    "mean_p_prior", "prior color / ");
            auto truth = mean_chart(edits, "", "condition", "gamma", "mean_p_true", "true color / ");
            chart.series.insert(chart.series.end(), truth.series.begin(), truth.series.end());
            chart.y_label = "probability (mean over panel and seeds)";
            report.charts["fig3_panel"] = chart;
            break;
        }
    }
    return report;
}

}  // namespace ifcd::bench
