#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ifcd/probe/probe.hpp"
#include "ifcd/vlm/model.hpp"

namespace ifcd::decoder {

using numerics::Vec;
using vlm::TokenDistribution;
using vlm::TokenId;

class DecodeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Mode { regular, editing_only, ifcd_wo_neg, ifcd_wo_pos, ifcd_full };
enum class Selection { greedy, sample };
// Distribution the plausibility cutoff is measured against.
enum class PlausibilityBase { positive_side, unedited };
enum class ContrastSpace { logits, probabilities };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);
std::string to_string(Selection s);
Selection selection_from_string(const std::string& s);
const std::vector<Mode>& all_modes();

struct DecodingConfig {
    double alpha = 0.1;
    double beta = 0.1;
    probe::EditConfig edit;
    Mode mode = Mode::ifcd_full;
    std::size_t max_new_tokens = 32;
    Selection selection = Selection::greedy;
    std::uint64_t seed = 0;
    PlausibilityBase base = PlausibilityBase::positive_side;
    ContrastSpace space = ContrastSpace::logits;

    void validate() const;
};

struct CandidateSet {
    std::vector<TokenId> included;
    double threshold_used = 0.0;

    [[nodiscard]] bool contains(TokenId t) const;
};

/// (1 + alpha) * pos - alpha * neg, elementwise.
Vec contrast_logits(const Vec& logits_pos, const Vec& logits_neg, double alpha);

/// Tokens with p >= beta * max(p).
CandidateSet plausibility_mask(const TokenDistribution& base, double beta);

/// Logit assigned to tokens outside the candidate set.
inline constexpr double kMaskedLogit = -1e30;

struct EditNorm {
    vlm::LayerSite site;
    probe::EditSign sign = probe::EditSign::positive;
    double norm = 0.0;  // ||gamma * Delta|| at the last position
};

struct StepTrace {
    Vec logits_pos;                  // positive side (the single distribution for regular/editing_only)
    std::optional<Vec> logits_neg;   // contrastive modes only
    std::string original_side;       // "none", "positive" (w/o neg) or "negative" (w/o pos)
    Vec combined_logits;             // after masking
    Vec probs;                       // final distribution the token is chosen from
    CandidateSet candidates;
    TokenId chosen = 0;
    std::vector<EditNorm> edit_norms;
};

struct Context {
    std::vector<Vec> features;
    vlm::Words prompt;
    std::vector<TokenId> prefix;
};

struct StepResult {
    TokenId token = 0;
    StepTrace trace;
};

/// One decoding step. `rng` is used only for sampling.
StepResult ifcd_step(const vlm::ToyVlmParams& vlm, const probe::ProbeParams* probe, const Context& context,
                     const DecodingConfig& config, numerics::Rng* rng = nullptr);

struct DecodeResult {
    std::vector<TokenId> tokens;  // emitted tokens, including a final <eos> when produced
    std::vector<StepTrace> trace;
    bool hit_eos = false;

    /// Emitted words without the end token.
    [[nodiscard]] vlm::Words words(const vlm::Vocab& vocab) const;
};

DecodeResult decode(const vlm::ToyVlmParams& vlm, const probe::ProbeParams* probe, const std::vector<Vec>& features,
                    const vlm::Words& prompt, const DecodingConfig& config);

nlohmann::json step_to_json(const StepTrace& step, const vlm::Vocab& vocab);
void write_trace_jsonl(std::ostream& out, const DecodeResult& result, const vlm::Vocab& vocab);

void to_json(nlohmann::json& j, const DecodingConfig& c);
void from_json(const nlohmann::json& j, DecodingConfig& c);

}  // namespace ifcd::decoder
