#pragma once

// Counting and grounding metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "countlab/geometry.hpp"

namespace countlab {

using json = nlohmann::json;

struct AccuracyRmse {
    double accuracy = 0.0;  // percent
    double rmse = 0.0;
    std::size_t size = 0;
};

/// Accuracy on rounded labels, RMSE on the fractional estimates.
inline AccuracyRmse accuracy_rmse(std::span<const int> predicted, std::span<const double> fractional,
                                  std::span<const int> labels) {
    if (labels.empty()) throw std::invalid_argument("accuracy_rmse: empty prediction list");
    if (predicted.size() != labels.size() || fractional.size() != labels.size())
        throw std::invalid_argument("accuracy_rmse: prediction and label lists differ in length");
    std::size_t correct = 0;
    double sq = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        correct += predicted[i] == labels[i];
        const double e = fractional[i] - labels[i];
        sq += e * e;
    }
    const double n = static_cast<double>(labels.size());
    return {100.0 * static_cast<double>(correct) / n, std::sqrt(sq / n), labels.size()};
}

struct LabelAccuracy {
    std::size_t support = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;
    friend bool operator==(const LabelAccuracy&, const LabelAccuracy&) = default;
};

using PerLabelAccuracy = std::map<int, LabelAccuracy>;

/// Accuracy within each true-label bucket; labels without support are absent.
inline PerLabelAccuracy per_label_accuracy(std::span<const int> predicted, std::span<const int> labels) {
    if (labels.empty()) throw std::invalid_argument("per_label_accuracy: empty prediction list");
    if (predicted.size() != labels.size())
        throw std::invalid_argument("per_label_accuracy: prediction and label lists differ in length");
    PerLabelAccuracy out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& b = out[labels[i]];
        ++b.support;
        b.correct += predicted[i] == labels[i];
    }
    for (auto& [label, b] : out) b.accuracy = 100.0 * static_cast<double>(b.correct) / static_cast<double>(b.support);
    return out;
}

/// Mean |acc(k) - acc(k+1)| over label pairs where both are supported.
inline std::optional<double> mean_adjacent_gap(const PerLabelAccuracy& m) {
    double total = 0.0;
    int pairs = 0;
    for (const auto& [k, b] : m) {
        const auto next = m.find(k + 1);
        if (next == m.end()) continue;
        total += std::abs(b.accuracy - next->second.accuracy);
        ++pairs;
    }
    if (pairs == 0) return std::nullopt;
    return total / pairs;
}

// ---------------------------------------------------------------------------
// Grounding

/// One triplet's grounding quantities.
struct GroundingEval {
    std::vector<Box> gt_boxes;
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::vector<double> precisions;
    double weighted = 0.0;  // S^m = Σ s_i p_i
    double total = 0.0;     // C^m = Σ s_i
};

inline GroundingEval make_grounding_eval(std::vector<Box> gt, std::vector<Box> boxes, std::vector<double> scores) {
    if (boxes.size() != scores.size()) throw std::invalid_argument("grounding: boxes and scores differ in length");
    GroundingEval g{std::move(gt), std::move(boxes), std::move(scores), {}, 0.0, 0.0};
    g.precisions.reserve(g.boxes.size());
    for (std::size_t i = 0; i < g.boxes.size(); ++i) {
        if (!(g.scores[i] >= 0.0)) throw std::invalid_argument("grounding: scores must be non-negative");
        const double p = box_precision(g.boxes[i], g.gt_boxes);
        g.precisions.push_back(p);
        g.weighted += g.scores[i] * p;
        g.total += g.scores[i];
    }
    return g;
}

struct GroundPResult {
    std::optional<double> value;  // empty when every predicted score is zero
    double weighted = 0.0;
    double total = 0.0;
};

inline GroundPResult ground_p(std::span<const GroundingEval> evals) {
    GroundPResult r;
    for (const auto& g : evals) {
        r.weighted += g.weighted;
        r.total += g.total;
    }
    if (r.total > 0.0) r.value = r.weighted / r.total;
    return r;
}

// ---------------------------------------------------------------------------
// Average precision

struct DetectionImage {
    std::vector<Box> gt_boxes;
    std::vector<Box> boxes;
    std::vector<double> scores;
};

struct RankedDetection {
    std::size_t image = 0;
    std::size_t proposal = 0;
    double score = 0.0;
    bool true_positive = false;
};

/// Proposals of all images ranked by score descending; ties keep
/// enumeration order (image, then proposal index).
inline std::vector<RankedDetection> rank_detections(std::span<const DetectionImage> images) {
    std::vector<RankedDetection> ranked;
    for (std::size_t m = 0; m < images.size(); ++m) {
        if (images[m].boxes.size() != images[m].scores.size())
            throw std::invalid_argument("average_precision: boxes and scores differ in length");
        for (std::size_t i = 0; i < images[m].boxes.size(); ++i) ranked.push_back({m, i, images[m].scores[i], false});
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const RankedDetection& a, const RankedDetection& b) { return a.score > b.score; });
    return ranked;
}

/// Greedy matching in rank order: each proposal takes the unmatched GT box
/// of its image with the highest IoU, if that IoU reaches the threshold.
inline void match_detections(std::span<const DetectionImage> images, std::vector<RankedDetection>& ranked,
                             double threshold) {
    std::vector<std::vector<bool>> used(images.size());
    for (std::size_t m = 0; m < images.size(); ++m) used[m].assign(images[m].gt_boxes.size(), false);
    for (auto& d : ranked) {
        const auto& img = images[d.image];
        double best = -1.0;
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < img.gt_boxes.size(); ++j) {
            if (used[d.image][j]) continue;
            const double o = iou(img.boxes[d.proposal], img.gt_boxes[j]);
            if (o > best) {
                best = o;
                best_j = j;
            }
        }
        if (best >= threshold) {
            used[d.image][best_j] = true;
            d.true_positive = true;
        }
    }
}

/// All-points interpolated AP; empty when the corpus has no GT boxes.
inline std::optional<double> average_precision(std::span<const DetectionImage> images, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw std::invalid_argument("average_precision: threshold must lie in (0, 1]");
    std::size_t n_gt = 0;
    for (const auto& img : images) n_gt += img.gt_boxes.size();
    if (n_gt == 0) return std::nullopt;

    std::vector<RankedDetection> ranked = rank_detections(images);
    match_detections(images, ranked, threshold);

    std::vector<double> recall, precision;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        tp += ranked[k].true_positive;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    }
    // Precision envelope, then sum over recall steps.
    for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        if (recall[k] > prev_recall) {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
    }
    return ap;
}

/// AP per group (question class) plus the mean over groups with defined AP
/// and the AP of all groups pooled into one corpus.
struct GroupedAp {
    std::map<int, double> per_group;
    std::optional<double> mean_over_groups;
    std::optional<double> pooled;
};

inline GroupedAp grouped_average_precision(std::span<const DetectionImage> images, std::span<const int> groups,
                                           double threshold) {
    if (groups.size() != images.size()) throw std::invalid_argument("grouped AP: one group id per image required");
    std::map<int, std::vector<DetectionImage>> by_group;
    for (std::size_t i = 0; i < images.size(); ++i) by_group[groups[i]].push_back(images[i]);
    GroupedAp out;
    double sum = 0.0;
    for (const auto& [g, imgs] : by_group)
        if (auto ap = average_precision(imgs, threshold)) {
            out.per_group[g] = *ap;
            sum += *ap;
        }
    if (!out.per_group.empty()) out.mean_over_groups = sum / static_cast<double>(out.per_group.size());
    out.pooled = average_precision(images, threshold);
    return out;
}

// ---------------------------------------------------------------------------
// Reports

struct GroundingSummary {
    std::optional<double> ground_p;
    double weighted_score = 0.0;
    double total_score = 0.0;
    double ap_threshold = 0.2;
    std::optional<double> ap_mean_per_class;
    std::optional<double> ap_pooled;
    std::map<int, double> ap_per_class;
    std::size_t triplets = 0;
};

struct EvalReport {
    double accuracy = 0.0;
    double rmse = 0.0;
    std::size_t size = 0;
    PerLabelAccuracy per_label;
    std::optional<double> adjacent_gap;
    std::optional<GroundingSummary> grounding;
    json provenance = json::object();
};

class SelfCheckFailed : public std::logic_error {
    using std::logic_error::logic_error;
};

/// Builds a report and re-derives accuracy and RMSE with a separate pass.
inline EvalReport make_eval_report(std::span<const int> predicted, std::span<const double> fractional,
                                   std::span<const int> labels, json provenance = json::object()) {
    const AccuracyRmse ar = accuracy_rmse(predicted, fractional, labels);
    EvalReport r;
    r.accuracy = ar.accuracy;
    r.rmse = ar.rmse;
    r.size = ar.size;
    r.per_label = per_label_accuracy(predicted, labels);
    r.adjacent_gap = mean_adjacent_gap(r.per_label);
    r.provenance = std::move(provenance);

    const auto hits = std::inner_product(predicted.begin(), predicted.end(), labels.begin(), std::size_t{0},
                                         std::plus<>{}, [](int a, int b) -> std::size_t { return a == b; });
    double sq = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) sq += (fractional[i] - labels[i]) * (fractional[i] - labels[i]);
    const double n = static_cast<double>(labels.size());
    if (std::abs(100.0 * static_cast<double>(hits) / n - r.accuracy) > 1e-9 ||
        std::abs(std::sqrt(sq / n) - r.rmse) > 1e-9)
        throw SelfCheckFailed("eval report: accuracy/RMSE disagree with recomputation");
    std::size_t support = 0;
    for (const auto& [k, b] : r.per_label) support += b.support;
    if (support != r.size) throw SelfCheckFailed("eval report: per-label support does not sum to the set size");
    return r;
}

inline json optional_to_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<double> optional_from_json(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

inline json grounding_to_json(const GroundingSummary& g) {
    json per = json::object();
    for (const auto& [k, v] : g.ap_per_class) per[std::to_string(k)] = v;
    return json{{"ground_p", optional_to_json(g.ground_p)},
                {"weighted_score", g.weighted_score},
                {"total_score", g.total_score},
                {"ap_threshold", g.ap_threshold},
                {"ap_mean_per_class", optional_to_json(g.ap_mean_per_class)},
                {"ap_pooled", optional_to_json(g.ap_pooled)},
                {"ap_per_class", per},
                {"ap_pooling", "per-question-class, averaged"},
                {"triplets", g.triplets}};
}

inline GroundingSummary grounding_from_json(const json& j) {
    GroundingSummary g;
    g.ground_p = optional_from_json(j.at("ground_p"));
    g.weighted_score = j.at("weighted_score");
    g.total_score = j.at("total_score");
    g.ap_threshold = j.at("ap_threshold");
    g.ap_mean_per_class = optional_from_json(j.at("ap_mean_per_class"));
    g.ap_pooled = optional_from_json(j.at("ap_pooled"));
    for (const auto& [k, v] : j.at("ap_per_class").items()) g.ap_per_class[std::stoi(k)] = v.get<double>();
    g.triplets = j.at("triplets");
    return g;
}

inline json eval_report_to_json(const EvalReport& r) {
    json per = json::array();
    for (const auto& [k, b] : r.per_label)
        per.push_back(json{{"label", k}, {"support", b.support}, {"correct", b.correct}, {"accuracy", b.accuracy}});
    json j{{"accuracy", r.accuracy},
           {"rmse", r.rmse},
           {"size", r.size},
           {"per_label", per},
           {"adjacent_gap", optional_to_json(r.adjacent_gap)},
           {"provenance", r.provenance}};
    j["grounding"] = r.grounding ? grounding_to_json(*r.grounding) : json(nullptr);
    return j;
}

inline EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    r.accuracy = j.at("accuracy");
    r.rmse = j.at("rmse");
    r.size = j.at("size");
    for (const auto& e : j.at("per_label"))
        r.per_label[e.at("label").get<int>()] = {e.at("support"), e.at("correct"), e.at("accuracy")};
    r.adjacent_gap = optional_from_json(j.at("adjacent_gap"));
    if (!j.at("grounding").is_null()) r.grounding = grounding_from_json(j.at("grounding"));
    r.provenance = j.at("provenance");
    return r;
}

/// label,support,accuracy rows for plotting.
inline std::string per_label_csv(const PerLabelAccuracy& m) {
    std::ostringstream out;
    out.precision(17);
    out << "label,support,accuracy\n";
    for (const auto& [k, b] : m) out << k << ',' << b.support << ',' << b.accuracy << '\n';
    return out.str();
}

struct SeedSpread {
    double mean = 0.0;
    double median = 0.0;
    double variance = 0.0;  // sample variance (n - 1)
    double stddev = 0.0;
};

inline SeedSpread seed_spread(std::vector<double> v) {
    SeedSpread s;
    if (v.empty()) return s;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n);
    s.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    if (n > 1) {
        for (double x : v) s.variance += (x - s.mean) * (x - s.mean);
        s.variance /= static_cast<double>(n - 1);
    }
    s.stddev = std::sqrt(s.variance);
    return s;
}

}  // namespace countlab
