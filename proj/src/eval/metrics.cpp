#include "ifcd/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace ifcd::eval {

std::set<std::string> extract_objects(const Tokens& tokens, const std::set<std::string>& categories) {
    std::set<std::string> out;
    for (const auto& t : tokens) {
        if (categories.contains(t)) {
            out.insert(t);
        }
    }
    return out;
}

CaptionAnnotation annotate_caption(const Tokens& tokens, const std::set<std::string>& categories,
                                   std::set<std::string> ground_truth) {
    CaptionAnnotation a;
    a.caption_tokens = tokens;
    std::size_t begin = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == ".") {
            a.sentences.emplace_back(begin, i + 1);
            begin = i + 1;
        }
    }
    if (begin < tokens.size()) {
        a.sentences.emplace_back(begin, tokens.size());
    }
    a.mentioned_objects = extract_objects(tokens, categories);
    a.ground_truth_objects = std::move(ground_truth);
    return a;
}

ChairScores chair_scores(const std::vector<CaptionAnnotation>& annotations) {
    ChairScores s;
    for (const auto& a : annotations) {
        auto hallucinated = [&a](const std::string& t) {
            return a.mentioned_objects.contains(t) && !a.ground_truth_objects.contains(t);
        };
        s.mentioned_objects += a.mentioned_objects.size();
        s.hallucinated_objects += static_cast<std::size_t>(
            std::count_if(a.mentioned_objects.begin(), a.mentioned_objects.end(), hallucinated));
        for (const auto& [begin, end] : a.sentences) {
            if (begin > end || end > a.caption_tokens.size()) {
                throw MetricsError("chair_scores: sentence span out of range");
            }
            ++s.sentences;
            const auto first = a.caption_tokens.begin() + static_cast<std::ptrdiff_t>(begin);
            const auto last = a.caption_tokens.begin() + static_cast<std::ptrdiff_t>(end);
            if (std::any_of(first, last, hallucinated)) {
                ++s.hallucinated_sentences;
            }
        }
    }
    if (s.mentioned_objects == 0) {
        s.chair_i_undefined = true;
    } else {
        s.chair_i = static_cast<double>(s.hallucinated_objects) / static_cast<double>(s.mentioned_objects);
    }
    if (s.sentences == 0) {
        s.chair_s_undefined = true;
    } else {
        s.chair_s = static_cast<double>(s.hallucinated_sentences) / static_cast<double>(s.sentences);
    }
    return s;
}

std::string_view to_string(Answer a) { return a == Answer::yes ? "yes" : "no"; }

std::string_view to_string(PopeStrategy s) {
    switch (s) {
        case PopeStrategy::random:
            return "random";
        case PopeStrategy::popular:
            return "popular";
        case PopeStrategy::adversarial:
            return "adversarial";
    }
    return "random";
}

Answer answer_from_string(std::string_view s) {
    if (s == "yes") {
        return Answer::yes;
    }
    if (s == "no") {
        return Answer::no;
    }
    throw MetricsError("unknown answer '" + std::string(s) + "'");
}

PopeStrategy strategy_from_string(std::string_view s) {
    for (auto st : {PopeStrategy::random, PopeStrategy::popular, PopeStrategy::adversarial}) {
        if (to_string(st) == s) {
            return st;
        }
    }
    throw MetricsError("unknown POPE strategy '" + std::string(s) + "'");
}

PopeMetrics pope_metrics(const std::vector<PopeRecord>& records) {
    if (records.empty()) {
        throw MetricsError("pope_metrics: no records");
    }
    PopeMetrics m;
    for (const auto& r : records) {
        const bool pred = r.predicted == Answer::yes;
        const bool label = r.label == Answer::yes;
        if (pred && label) {
            ++m.tp;
        } else if (pred) {
            ++m.fp;
        } else if (label) {
            ++m.fn;
        } else {
            ++m.tn;
        }
    }
    const auto n = static_cast<double>(records.size());
    m.accuracy = static_cast<double>(m.tp + m.tn) / n;
    if (m.tp + m.fp == 0) {
        m.precision_undefined = true;
    } else {
        m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
    }
    if (m.tp + m.fn == 0) {
        m.recall_undefined = true;
    } else {
        m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
    }
    if (m.tp > 0) {
        m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    }
    return m;
}

namespace {

std::map<Tokens, std::size_t> ngram_counts(const Tokens& tokens, std::size_t n) {
    std::map<Tokens, std::size_t> counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++counts[Tokens(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                        tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return counts;
}

}  // namespace

double bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, std::size_t max_n) {
    if (candidates.empty() || candidates.size() != references.size()) {
        throw MetricsError("bleu: corpora must be non-empty and aligned");
    }
    if (max_n == 0) {
        throw MetricsError("bleu: max_n must be positive");
    }
    std::vector<double> matches(max_n, 0.0);
    std::vector<double> totals(max_n, 0.0);
    double cand_len = 0.0;
    double ref_len = 0.0;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
        cand_len += static_cast<double>(candidates[k].size());
        ref_len += static_cast<double>(references[k].size());
        for (std::size_t n = 1; n <= max_n; ++n) {
            const auto cand = ngram_counts(candidates[k], n);
            const auto ref = ngram_counts(references[k], n);
            for (const auto& [gram, count] : cand) {
                const auto it = ref.find(gram);
                const std::size_t clip = it == ref.end() ? 0 : std::min(count, it->second);
                matches[n - 1] += static_cast<double>(clip);
                totals[n - 1] += static_cast<double>(count);
            }
        }
    }
    if (cand_len == 0.0 || matches[0] == 0.0) {
        return 0.0;
    }
    double log_sum = std::log(matches[0] / totals[0]);
    for (std::size_t n = 2; n <= max_n; ++n) {
        log_sum += std::log((matches[n - 1] + 1.0) / (totals[n - 1] + 1.0));
    }
    const double brevity = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    return brevity * std::exp(log_sum / static_cast<double>(max_n));
}

void to_json(nlohmann::json& j, const CaptionAnnotation& a) {
    j = nlohmann::json{{"caption_tokens", a.caption_tokens},
                       {"sentences", a.sentences},
                       {"mentioned_objects", a.mentioned_objects},
                       {"ground_truth_objects", a.ground_truth_objects}};
}

void from_json(const nlohmann::json& j, CaptionAnnotation& a) {
    j.at("caption_tokens").get_to(a.caption_tokens);
    j.at("sentences").get_to(a.sentences);
    j.at("mentioned_objects").get_to(a.mentioned_objects);
    j.at("ground_truth_objects").get_to(a.ground_truth_objects);
}

void to_json(nlohmann::json& j, const PopeRecord& r) {
    j = nlohmann::json{{"question_id", r.question_id},
                       {"predicted", to_string(r.predicted)},
                       {"label", to_string(r.label)},
                       {"strategy", to_string(r.strategy)}};
}

void from_json(const nlohmann::json& j, PopeRecord& r) {
    r.question_id = j.at("question_id").get<std::size_t>();
    r.predicted = answer_from_string(j.at("predicted").get<std::string>());
    r.label = answer_from_string(j.at("label").get<std::string>());
    r.strategy = strategy_from_string(j.at("strategy").get<std::string>());
}

void to_json(nlohmann::json& j, const ChairScores& s) {
    j = nlohmann::json{{"chair_s", s.chair_s},
                       {"chair_i", s.chair_i},
                       {"hallucinated_sentences", s.hallucinated_sentences},
                       {"sentences", s.sentences},
                       {"hallucinated_objects", s.hallucinated_objects},
                       {"mentioned_objects", s.mentioned_objects},
                       {"chair_i_undefined", s.chair_i_undefined},
                       {"chair_s_undefined", s.chair_s_undefined}};
}

void to_json(nlohmann::json& j, const PopeMetrics& m) {
    j = nlohmann::json{{"accuracy", m.accuracy},   {"precision", m.precision}, {"recall", m.recall},
                       {"f1", m.f1},               {"tp", m.tp},               {"fp", m.fp},
                       {"tn", m.tn},               {"fn", m.fn},               {"precision_undefined", m.precision_undefined},
                       {"recall_undefined", m.recall_undefined}};
}

}  // namespace ifcd::eval
