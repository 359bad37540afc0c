#pragma once

#include <compare>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ifcd/numerics/adam.hpp"
#include "ifcd/numerics/linalg.hpp"
#include "ifcd/vlm/world.hpp"

namespace ifcd::vlm {

using numerics::Matrix;

enum class SiteKind { attention_output = 0, ffn_output = 1 };

struct LayerSite {
    std::size_t block = 0;
    SiteKind kind = SiteKind::attention_output;

    auto operator<=>(const LayerSite&) const = default;
};

std::string to_string(LayerSite site);
LayerSite layer_site_from_string(const std::string& s);
/// Every site of an n-block model in (block, kind) order.
std::vector<LayerSite> all_sites(std::size_t n_blocks);

/// Hooks on the sublayer outputs (attention output after the output
/// projection, FFN output after the second linear), before they are added to
/// the residual stream.
class HookBundle {
public:
    enum class Mode { capture, edit };
    // Receives the site vector at sequence position `position` and returns
    // its replacement.
    using Editor = std::function<Vec(std::span<const double> x, std::size_t position)>;

    static HookBundle capture(std::vector<LayerSite> sites);
    static HookBundle edit(std::map<LayerSite, Editor> editors);

    [[nodiscard]] Mode mode() const noexcept { return mode_; }
    [[nodiscard]] bool watches(LayerSite site) const;
    /// Captured vectors for `site`, one per sequence position of the last forward pass.
    [[nodiscard]] const std::vector<Vec>& captured(LayerSite site) const;

    // Called by the model.
    void on_site(LayerSite site, std::vector<Vec>& rows);

private:
    Mode mode_ = Mode::capture;
    std::vector<LayerSite> sites_;
    std::map<LayerSite, std::vector<Vec>> buffers_;
    std::map<LayerSite, Editor> editors_;
};

struct VlmHyper {
    std::size_t d_model = 32;
    std::size_t d_ff = 64;
    std::size_t n_blocks = 2;
    std::size_t max_positions = 160;
    bool tie_embeddings = true;
    double embed_std = 0.3;
    double position_std = 0.1;

    std::size_t steps = 12000;
    std::size_t batch_size = 32;
    double lr = 3e-3;
    std::uint64_t seed = 0;
    std::size_t log_every = 0;  // 0 disables progress logging

    bool operator==(const VlmHyper&) const = default;
};

struct BlockParams {
    Vec ln1_gain, ln1_bias;
    Matrix wq, wk, wv, wo;  // d x d
    Vec bq, bk, bv, bo;
    Vec ln2_gain, ln2_bias;
    Matrix w1;  // d_ff x d
    Vec b1;
    Matrix w2;  // d x d_ff
    Vec b2;

    bool operator==(const BlockParams&) const = default;
};

struct ToyVlmParams {
    Vocab vocab;
    VlmHyper hyper;
    std::size_t feature_dim = 0;

    Matrix token_embedding;     // |V| x d
    Matrix position_embedding;  // max_positions x d
    Matrix visual_weight;       // d x feature_dim
    Vec visual_bias;
    std::vector<BlockParams> blocks;
    Vec lnf_gain, lnf_bias;
    Matrix output_weight;  // |V| x d, unused (0 x 0) when embeddings are tied
    Vec output_bias;

    static ToyVlmParams init(Vocab vocab, std::size_t feature_dim, const VlmHyper& hyper, numerics::Rng& rng);

    [[nodiscard]] std::size_t d_model() const { return hyper.d_model; }
    [[nodiscard]] ToyVlmParams zeros_like() const;
    std::vector<std::span<double>> spans();
    [[nodiscard]] std::vector<std::span<const double>> spans() const;
    [[nodiscard]] std::size_t parameter_count() const;
    void validate() const;

    bool operator==(const ToyVlmParams&) const = default;
};

/// Visual rows followed by token ids (starting with <bos>).
struct Sequence {
    std::vector<Vec> features;
    std::vector<TokenId> tokens;

    [[nodiscard]] std::size_t length() const { return features.size() + tokens.size(); }
};

Sequence make_sequence(const Vocab& vocab, const std::vector<Vec>& features, const Words& prompt,
                       const Words& prefix = {});

struct TokenDistribution {
    Vec logits;
    Vec probs;

    static TokenDistribution from_logits(Vec logits);
};

/// Logits for every position of the sequence (rows = length()).
Matrix forward_all(const ToyVlmParams& params, const Sequence& seq, HookBundle* hooks = nullptr);

/// Next-token distribution after the last position.
TokenDistribution forward(const ToyVlmParams& params, const Sequence& seq, HookBundle* hooks = nullptr);

/// Token-mean cross-entropy of `targets` (pairs of sequence row, target id)
/// and its gradient, accumulated into `grads` scaled by `scale`.
double loss_and_gradient(const ToyVlmParams& params, const Sequence& seq,
                         const std::vector<std::pair<std::size_t, TokenId>>& targets, ToyVlmParams* grads,
                         double scale = 1.0);

/// Sequence and per-row targets for one corpus example.
struct TrainingItem {
    Sequence sequence;
    std::vector<std::pair<std::size_t, TokenId>> targets;
};
TrainingItem make_training_item(const Vocab& vocab, const TrainingExample& ex);

struct TrainStats {
    std::vector<double> loss_history;  // mean batch loss, one entry per step
    double final_loss = 0.0;
};

/// Adam on minibatches sampled with replacement. Throws VlmError (with the
/// last finite loss) when the loss diverges.
ToyVlmParams train_toy_vlm(const std::vector<TrainingExample>& corpus, const Vocab& vocab, std::size_t feature_dim,
                           const VlmHyper& hyper, TrainStats* stats = nullptr);

/// Mean per-token cross-entropy over a corpus.
double corpus_loss(const ToyVlmParams& params, const std::vector<TrainingExample>& corpus);

void to_json(nlohmann::json& j, const VlmHyper& h);
void from_json(const nlohmann::json& j, VlmHyper& h);
nlohmann::json checkpoint_to_json(const ToyVlmParams& params);
ToyVlmParams checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::string& path, const ToyVlmParams& params);
ToyVlmParams load_checkpoint(const std::string& path);

}  // namespace ifcd::vlm
