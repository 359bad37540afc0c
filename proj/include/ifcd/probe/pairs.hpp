#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ifcd/probe/probe.hpp"
#include "ifcd/vlm/model.hpp"
#include "ifcd/vlm/world.hpp"

namespace ifcd::probe {

enum class PairKind { existence, color };

std::string to_string(PairKind k);
PairKind pair_kind_from_string(const std::string& s);

struct PairOptions {
    std::vector<PairKind> kinds{PairKind::existence, PairKind::color};
    std::vector<LayerSite> sites;  // empty = every site of the model
};

/// Draws `n` scenes; for each, forces a truthful and an untruthful answer
/// token after the same question and captures every requested site at the
/// answer-token position. Existence negatives prefer absent members of a
/// present object's co-occurrence group; color negatives prefer the canonical
/// color. Returns n pairs per site.
std::vector<ProbePair> collect_pairs(const vlm::ToyVlmParams& model, const vlm::WorldConfig& world, std::size_t n,
                                     numerics::Rng& rng, const PairOptions& options = {});

}  // namespace ifcd::probe
