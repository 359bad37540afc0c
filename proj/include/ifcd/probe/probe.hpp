#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ifcd/numerics/linalg.hpp"
#include "ifcd/numerics/mlp.hpp"
#include "ifcd/vlm/model.hpp"

namespace ifcd::probe {

using numerics::Matrix;
using numerics::MlpParams;
using numerics::Vec;
using vlm::LayerSite;

class ProbeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ProbePair {
    LayerSite site;
    Vec x_pos;  // captured with the truthful answer token forced
    Vec x_neg;  // captured with the untruthful answer token forced
    std::size_t source_example_id = 0;
};

/// Autoencoder for one site: h_truth = TruthEnc(x), h_sem = SemEnc(x),
/// x' = Dec(h_sem + Attn(h_sem, h_truth)). The latent attention lets the
/// semantic query attend over {h_truth, null slot}; the null slot has a learned
/// key and a zero value, so attention can switch the truth channel off.
struct SiteProbe {
    LayerSite site;
    MlpParams truth_enc;
    MlpParams sem_enc;
    MlpParams dec;
    Matrix wq, wk, wv;  // d_latent x d_latent
    Vec null_key;
    Vec head_weight;  // logistic head on h_truth
    Vec head_bias;    // single entry
    Vec delta;        // mean h_truth(pos) - mean h_truth(neg)
    double heldout_auc = 0.5;

    [[nodiscard]] std::size_t d_model() const { return truth_enc.input_dim(); }
    [[nodiscard]] std::size_t d_latent() const { return truth_enc.output_dim(); }

    std::vector<std::span<double>> spans();
    [[nodiscard]] std::vector<std::span<const double>> spans() const;
    [[nodiscard]] SiteProbe zeros_like() const;

    bool operator==(const SiteProbe&) const = default;
};

struct ProbeHyper {
    std::size_t d_latent = 16;
    std::size_t hidden = 32;
    std::size_t steps = 200;
    double lr = 3e-3;
    double lambda_c = 1.0;
    double weight_decay = 0.0;
    std::size_t min_pairs = 8;
    std::uint64_t seed = 0;

    bool operator==(const ProbeHyper&) const = default;
};

struct RankedSite {
    LayerSite site;
    double score = 0.0;

    bool operator==(const RankedSite&) const = default;
};

struct ProbeParams {
    std::map<LayerSite, SiteProbe> sites;
    std::vector<RankedSite> layer_ranking;
    ProbeHyper hyper;
    std::size_t train_pairs = 0;

    [[nodiscard]] const SiteProbe& at(LayerSite site) const;
    /// The first k sites of the ranking.
    [[nodiscard]] std::vector<LayerSite> top_sites(std::size_t k) const;

    bool operator==(const ProbeParams&) const = default;
};

struct TrainStats {
    std::map<LayerSite, std::vector<double>> loss_history;
    std::map<LayerSite, double> heldout_auc;
    std::map<LayerSite, double> heldout_reconstruction_mse;
};

/// Fresh probe with random weights (delta zero).
SiteProbe init_site_probe(LayerSite site, std::size_t d_model, const ProbeHyper& hyper, numerics::Rng& rng);

struct Latents {
    Vec truth;
    Vec sem;
};
Latents encode(const SiteProbe& probe, std::span<const double> x);
Vec reconstruct(const SiteProbe& probe, std::span<const double> h_truth, std::span<const double> h_sem);

/// Mean reconstruction error plus lambda_c times the logistic loss of the
/// head on h_truth (label 1 = truthful), averaged over samples.
struct ProbeLoss {
    double reconstruction = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
};
ProbeLoss probe_loss(const SiteProbe& probe, const std::vector<Vec>& xs, const std::vector<int>& labels,
                     double lambda_c, SiteProbe* grads);

/// Trains one probe per site present in `train`, computes delta from the
/// training pairs and ranks sites by AUC on `heldout` (falls back to the
/// training pairs when a site has no held-out pairs).
ProbeParams train_probe(const std::vector<ProbePair>& train, const std::vector<ProbePair>& heldout,
                        const ProbeHyper& hyper, TrainStats* stats = nullptr);

Vec compute_edit_direction(const SiteProbe& probe, const std::vector<ProbePair>& pairs);

enum class EditSign { positive, negative };
std::string to_string(EditSign s);
EditSign edit_sign_from_string(const std::string& s);

/// Delta = Dec-path(h_truth + s * delta) - Dec-path(h_truth), s = +1 / -1.
Vec compute_delta(const SiteProbe& probe, std::span<const double> x, EditSign sign);

/// x + gamma * delta.
Vec apply_edit(std::span<const double> x, std::span<const double> delta, double gamma);

/// Mann-Whitney AUC of pos scores above neg scores (ties count one half).
double auc(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores);
/// AUC of delta . h_truth on the given pairs.
double separation_auc(const SiteProbe& probe, const std::vector<ProbePair>& pairs);

/// Sites ordered by held-out AUC, descending; ties keep (block, kind) order.
std::vector<RankedSite> rank_layers(const ProbeParams& probe, const std::vector<ProbePair>& validation);

struct ScatterPoint {
    double x = 0.0;
    double y = 0.0;
    int label = 0;  // 1 truthful, 0 untruthful
};
/// 2-D PCA of h_truth for every pair member (positives first).
std::vector<ScatterPoint> latent_scatter(const SiteProbe& probe, const std::vector<ProbePair>& pairs);

struct EditConfig {
    double gamma = 0.5;
    EditSign sign = EditSign::positive;
    std::vector<LayerSite> active_sites;

    void validate() const;
};

/// One editor per active site: x -> x + gamma * compute_delta(x).
std::map<LayerSite, vlm::HookBundle::Editor> make_editors(const ProbeParams& probe, const EditConfig& config);

void to_json(nlohmann::json& j, const ProbeHyper& h);
void from_json(const nlohmann::json& j, ProbeHyper& h);
nlohmann::json probe_to_json(const ProbeParams& p, const nlohmann::json& metadata = nlohmann::json::object());
ProbeParams probe_from_json(const nlohmann::json& j);
void save_probe(const std::string& path, const ProbeParams& p, const nlohmann::json& metadata);
ProbeParams load_probe(const std::string& path);

}  // namespace ifcd::probe
