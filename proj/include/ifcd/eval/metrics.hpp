#pragma once

#include <cstddef>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace ifcd::eval {

using Tokens = std::vector<std::string>;

class MetricsError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Category tokens present in `tokens`, by exact match against `categories`.
std::set<std::string> extract_objects(const Tokens& tokens, const std::set<std::string>& categories);

struct CaptionAnnotation {
    Tokens caption_tokens;
    std::vector<std::pair<std::size_t, std::size_t>> sentences;  // half-open [begin, end)
    std::set<std::string> mentioned_objects;
    std::set<std::string> ground_truth_objects;
};

/// Splits on "." tokens (a trailing fragment without "." is its own sentence)
/// and extracts mentioned objects.
CaptionAnnotation annotate_caption(const Tokens& tokens, const std::set<std::string>& categories,
                                   std::set<std::string> ground_truth);

struct ChairScores {
    double chair_s = 0.0;
    double chair_i = 0.0;
    std::size_t hallucinated_sentences = 0;
    std::size_t sentences = 0;
    std::size_t hallucinated_objects = 0;
    std::size_t mentioned_objects = 0;
    bool chair_i_undefined = false;  // no mentioned objects anywhere; chair_i reported as 0
    bool chair_s_undefined = false;
};

/// Corpus-level (micro) CHAIR. A sentence is hallucinated when one of its
/// tokens is a mentioned object missing from the ground truth.
ChairScores chair_scores(const std::vector<CaptionAnnotation>& annotations);

enum class Answer { yes, no };
enum class PopeStrategy { random, popular, adversarial };

std::string_view to_string(Answer a);
std::string_view to_string(PopeStrategy s);
Answer answer_from_string(std::string_view s);
PopeStrategy strategy_from_string(std::string_view s);

struct PopeRecord {
    std::size_t question_id = 0;
    Answer predicted = Answer::no;
    Answer label = Answer::no;
    PopeStrategy strategy = PopeStrategy::random;
};

struct PopeMetrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;
    bool precision_undefined = false;
    bool recall_undefined = false;
};

/// "yes" is the positive class. Throws on an empty record list.
PopeMetrics pope_metrics(const std::vector<PopeRecord>& records);

/// Corpus BLEU in [0, 1] with uniform weights, brevity penalty and add-one
/// smoothing of the n >= 2 precisions.
double bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, std::size_t max_n = 4);

void to_json(nlohmann::json& j, const CaptionAnnotation& a);
void from_json(const nlohmann::json& j, CaptionAnnotation& a);
void to_json(nlohmann::json& j, const PopeRecord& r);
void from_json(const nlohmann::json& j, PopeRecord& r);
void to_json(nlohmann::json& j, const ChairScores& s);
void to_json(nlohmann::json& j, const PopeMetrics& m);

}  // namespace ifcd::eval
