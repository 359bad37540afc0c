#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ifcd/bench/pope.hpp"
#include "ifcd/bench/report.hpp"
#include "ifcd/decoder/ifcd.hpp"
#include "ifcd/numerics/rng.hpp"
#include "ifcd/probe/probe.hpp"
#include "ifcd/vlm/model.hpp"
#include "ifcd/vlm/world.hpp"

namespace ifcd::bench {

enum class Task {
    pope,
    caption,
    sweep_gamma_layers,
    sweep_alpha,
    sweep_max_tokens,
    sweep_train_size,
    ablation,
    latent_plot,
    fig3_panel
};

std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct ExperimentConfig {
    Task task = Task::pope;
    vlm::WorldConfig world = vlm::WorldConfig::defaults();
    std::size_t corpus_size = 30000;
    vlm::VlmHyper vlm;
    probe::ProbeHyper probe;
    std::size_t probe_train_pairs = 300;
    std::size_t probe_heldout_pairs = 200;
    std::size_t active_sites = 1;  // K: edit the top-K ranked sites
    decoder::DecodingConfig decoding;
    std::vector<decoder::Mode> modes{decoder::all_modes()};
    std::vector<std::uint64_t> seeds{0};

    std::size_t pope_scenes = 200;
    std::size_t pope_questions_per_scene = 6;
    std::size_t pope_max_new_tokens = 32;
    std::vector<eval::PopeStrategy> strategies{eval::PopeStrategy::random, eval::PopeStrategy::popular,
                                               eval::PopeStrategy::adversarial};
    std::size_t caption_scenes = 100;
    std::size_t caption_max_new_tokens = 128;

    std::vector<double> gamma_grid{0.0, 0.25, 0.5, 1.0, 2.0};
    std::vector<std::size_t> sites_grid{1, 2, 3, 4};
    std::vector<double> alpha_grid{0.0, 0.05, 0.1, 0.5, 1.0};
    std::vector<std::size_t> max_tokens_grid{16, 32, 64, 128};
    std::vector<std::size_t> train_size_grid{50, 100, 300, 700};

    std::size_t panel_size = 100;
    std::vector<double> panel_gamma_grid{0.0, 0.5, 1.0, 2.0};
    int noise_steps = 400;

    std::string outdir = "ifcd_out";
    std::string cache_dir;  // empty: artifacts live in memory only
    std::size_t workers = 1;

    /// Throws ValidationError.
    void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Strict: unknown keys raise ValidationError.
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::string& path);

/// Independent random streams derived from one seed. Each consumer gets its
/// own stream so adding or skipping one experiment never shifts another.
struct SeedStreams {
    numerics::Rng corpus;
    numerics::Rng heldout_pairs;
    numerics::Rng train_pairs;
    numerics::Rng pope;
    numerics::Rng caption;
    numerics::Rng panel;
    numerics::Rng contexts;

    explicit SeedStreams(std::uint64_t seed);
};

/// Trained models and probes keyed by config fingerprint; optionally backed by
/// a directory of JSON checkpoints so repeated runs skip training.
class ArtifactStore {
public:
    explicit ArtifactStore(std::string cache_dir = {}, std::ostream* log = nullptr);

    const vlm::ToyVlmParams& model(const ExperimentConfig& cfg, std::uint64_t seed);
    const probe::ProbeParams& probe(const ExperimentConfig& cfg, std::uint64_t seed,
                                    std::optional<std::size_t> n_train = std::nullopt);
    const std::vector<probe::ProbePair>& heldout_pairs(const ExperimentConfig& cfg, std::uint64_t seed);
    std::vector<probe::ProbePair> train_pairs(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t n);

    static nlohmann::json model_key(const ExperimentConfig& cfg, std::uint64_t seed);
    static nlohmann::json probe_key(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t n_train);

    void install_model(const ExperimentConfig& cfg, std::uint64_t seed, vlm::ToyVlmParams model);
    void install_probe(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t n_train, probe::ProbeParams p);

private:
    std::string cache_dir_;
    std::ostream* log_;
    std::mutex mu_;
    std::map<std::string, std::unique_ptr<vlm::ToyVlmParams>> models_;
    std::map<std::string, std::unique_ptr<probe::ProbeParams>> probes_;
    std::map<std::string, std::unique_ptr<std::vector<probe::ProbePair>>> heldout_;
};

/// Running count of decode steps and plausibility-mask violations.
struct MaskAudit {
    std::size_t steps = 0;
    std::size_t violations = 0;

    void check(const decoder::DecodeResult& r);
    void check(const decoder::StepTrace& step);
};

struct EvalScene {
    vlm::SceneSpec scene;
    std::vector<numerics::Vec> features;
};

/// Scenes with their noisy features, drawn once per seed and shared by every mode.
std::vector<EvalScene> draw_eval_scenes(const vlm::WorldConfig& world, std::size_t n, numerics::Rng& rng);

struct PopeCell {
    eval::PopeMetrics metrics;
    std::size_t unparsed = 0;
    MaskAudit audit;
};

PopeCell evaluate_pope(const vlm::ToyVlmParams& model, const probe::ProbeParams* probe,
                       const vlm::WorldConfig& world, const std::vector<EvalScene>& scenes, const std::vector<PopeQuestion>& questions,
                       const decoder::DecodingConfig& config);

struct CaptionCell {
    eval::ChairScores chair;
    double bleu = 0.0;
    double mean_length = 0.0;
    MaskAudit audit;
    std::vector<vlm::Words> captions;
};

CaptionCell evaluate_captions(const vlm::ToyVlmParams& model, const probe::ProbeParams* probe,
                              const vlm::WorldConfig& world, const std::vector<EvalScene>& scenes,
                              const decoder::DecodingConfig& config);

/// One prior-contradicting question: an object shown in a non-canonical color.
struct PanelItem {
    EvalScene scene;
    std::size_t category = 0;
    vlm::TokenId prior_color = 0;  // canonical color token
    vlm::TokenId true_color = 0;
    vlm::Words prompt;
};

std::vector<PanelItem> draw_prior_panel(const vlm::WorldConfig& world, const vlm::Vocab& vocab, std::size_t n,
                                        numerics::Rng& rng);

/// Next-token distribution at the answer position of the color question,
/// with negative editing of `sites` at strength gamma (gamma 0 = unedited).
vlm::TokenDistribution panel_distribution(const vlm::ToyVlmParams& model, const probe::ProbeParams& probe,
                                          const std::vector<vlm::LayerSite>& sites, const PanelItem& item,
                                          double gamma, probe::EditSign sign = probe::EditSign::negative);

struct PanelSummary {
    std::vector<double> gammas;
    std::vector<std::vector<double>> p_prior;  // [item][gamma]
    std::vector<std::vector<double>> p_true;
    std::vector<double> noise_p_prior, noise_p_true;
    std::vector<double> prefix_p_prior, prefix_p_true;
    std::vector<double> regular_p_prior;  // final decoder distributions, plausibility mask applied
    std::vector<double> wo_pos_p_prior;

    /// Share of items whose prior-color probability never decreases along the grid.
    [[nodiscard]] double monotone_fraction() const;
    /// Share of items where ifcd_wo_pos puts strictly less mass on the prior color than regular decoding.
    [[nodiscard]] double wo_pos_below_regular_fraction() const;
};

PanelSummary run_panel(const vlm::ToyVlmParams& model, const probe::ProbeParams& probe,
                       const std::vector<vlm::LayerSite>& sites, const std::vector<PanelItem>& panel,
                       const std::vector<double>& gammas, int noise_steps, const decoder::DecodingConfig& decoding,
                       numerics::Rng& rng);

/// Decoding config for one seed: the base config with the probe's top-K sites.
decoder::DecodingConfig seed_decoding(const ExperimentConfig& cfg, const probe::ProbeParams& probe);

/// Runs cfg.task and returns the report (results, charts, manifest) without writing it.
Report run_experiment(const ExperimentConfig& cfg, ArtifactStore& store, std::ostream* log = nullptr);

}  // namespace ifcd::bench
