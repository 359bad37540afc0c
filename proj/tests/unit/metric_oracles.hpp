#pragma once

// Deliberately naive recounts used to cross-check the metric implementations.

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ifcd/eval/metrics.hpp"
#include "ifcd/numerics/rng.hpp"

namespace ifcd::testing {

inline std::set<std::string> scan_objects(const eval::Tokens& toks, const std::set<std::string>& cats) {
    std::string text = " ";
    for (const auto& t : toks) {
        text += t + " ";
    }
    std::set<std::string> out;
    for (const auto& c : cats) {
        if (text.find(" " + c + " ") != std::string::npos) {
            out.insert(c);
        }
    }
    return out;
}

inline std::vector<eval::CaptionAnnotation> random_annotations(numerics::Rng& rng, const std::set<std::string>& cats,
                                                               std::size_t count) {
    const std::vector<std::string> pool(cats.begin(), cats.end());
    std::vector<eval::CaptionAnnotation> out;
    for (std::size_t k = 0; k < count; ++k) {
        eval::Tokens toks;
        const auto sentences = rng.uniform_int(1, 4);
        for (int s = 0; s < sentences; ++s) {
            for (auto w = rng.uniform_int(0, 3); w > 0; --w) {
                toks.push_back(rng.bernoulli(0.6) ? rng.choice(pool) : std::string("red"));
            }
            toks.emplace_back(".");
        }
        std::set<std::string> truth;
        for (const auto& c : pool) {
            if (rng.bernoulli(0.4)) {
                truth.insert(c);
            }
        }
        out.push_back(eval::annotate_caption(toks, cats, truth));
    }
    return out;
}

/// (chair_i, chair_s), one object and one sentence at a time.
inline std::pair<double, double> chair_oracle(const std::vector<eval::CaptionAnnotation>& anns) {
    long double hall_obj = 0;
    long double all_obj = 0;
    long double hall_sent = 0;
    long double all_sent = 0;
    for (const auto& a : anns) {
        std::vector<std::string> seen;
        for (const auto& t : a.caption_tokens) {
            const bool is_obj = a.mentioned_objects.count(t) == 1;
            if (is_obj && std::find(seen.begin(), seen.end(), t) == seen.end()) {
                seen.push_back(t);
                all_obj += 1;
                if (a.ground_truth_objects.count(t) == 0) {
                    hall_obj += 1;
                }
            }
        }
        for (const auto& span : a.sentences) {
            all_sent += 1;
            bool bad = false;
            for (std::size_t i = span.first; i < span.second; ++i) {
                const auto& t = a.caption_tokens[i];
                bad = bad || (a.mentioned_objects.count(t) == 1 && a.ground_truth_objects.count(t) == 0);
            }
            hall_sent += bad ? 1 : 0;
        }
    }
    return {all_obj > 0 ? static_cast<double>(hall_obj / all_obj) : 0.0,
            all_sent > 0 ? static_cast<double>(hall_sent / all_sent) : 0.0};
}

/// accuracy, precision, recall, f1 (f1 via 2TP / (2TP + FP + FN)).
inline std::array<double, 4> pope_oracle(const std::vector<eval::PopeRecord>& recs) {
    long double tp = 0;
    long double fp = 0;
    long double fn = 0;
    long double correct = 0;
    for (const auto& r : recs) {
        correct += r.predicted == r.label ? 1 : 0;
        tp += (r.predicted == eval::Answer::yes && r.label == eval::Answer::yes) ? 1 : 0;
        fp += (r.predicted == eval::Answer::yes && r.label == eval::Answer::no) ? 1 : 0;
        fn += (r.predicted == eval::Answer::no && r.label == eval::Answer::yes) ? 1 : 0;
    }
    const long double n = static_cast<long double>(recs.size());
    return {static_cast<double>(correct / n), tp + fp > 0 ? static_cast<double>(tp / (tp + fp)) : 0.0,
            tp + fn > 0 ? static_cast<double>(tp / (tp + fn)) : 0.0,
            tp > 0 ? static_cast<double>(2 * tp / (2 * tp + fp + fn)) : 0.0};
}

/// Corpus BLEU straight from the formula: clipped n-gram matches by pairwise
/// scanning, add-one on orders >= 2, brevity penalty, geometric mean.
inline double bleu_oracle(const std::vector<eval::Tokens>& cands, const std::vector<eval::Tokens>& refs,
                          std::size_t max_n = 4) {
    auto grams = [](const eval::Tokens& t, std::size_t n) {
        std::vector<std::string> g;
        for (std::size_t i = 0; i + n <= t.size(); ++i) {
            std::string s;
            for (std::size_t k = 0; k < n; ++k) {
                s += t[i + k] + '\x1f';
            }
            g.push_back(s);
        }
        return g;
    };
    std::vector<long double> match(max_n, 0);
    std::vector<long double> total(max_n, 0);
    long double c_len = 0;
    long double r_len = 0;
    for (std::size_t k = 0; k < cands.size(); ++k) {
        c_len += cands[k].size();
        r_len += refs[k].size();
        for (std::size_t n = 1; n <= max_n; ++n) {
            auto cg = grams(cands[k], n);
            auto rg = grams(refs[k], n);
            total[n - 1] += cg.size();
            std::vector<bool> used(rg.size(), false);
            for (const auto& g : cg) {
                for (std::size_t j = 0; j < rg.size(); ++j) {
                    if (!used[j] && rg[j] == g) {
                        used[j] = true;
                        match[n - 1] += 1;
                        break;
                    }
                }
            }
        }
    }
    if (c_len == 0 || match[0] == 0) {
        return 0.0;
    }
    long double log_p = std::log(match[0] / total[0]);
    for (std::size_t n = 2; n <= max_n; ++n) {
        log_p += std::log((match[n - 1] + 1) / (total[n - 1] + 1));
    }
    const long double bp = c_len > r_len ? 1.0L : std::exp(1.0L - r_len / c_len);
    return static_cast<double>(bp * std::exp(log_p / static_cast<long double>(max_n)));
}

}  // namespace ifcd::testing
