#pragma once

// Spatial counting network.
//
//   region encoder    x_i = f_i W_f + box_i W_c          box_i = (x1,y1,x2,y2,w,h)
//   question encoder  q   = Σ token embeddings           (mode, class, attribute?, predicate?)
//   fusion            m_i = (tanh(x_i U) ⊙ tanh(q V)) O  low-rank bilinear, no bias
//   self-attention    r_i = Σ_j softmax_j(<m_i Wq, m_j Wk> / √a) m_j Wv,   m'_i = m_i + r_i
//   scoring           c_i = σ((tanh(m'_i U2) ⊙ tanh(q V2)) w + b),  ĉ = Σ c_i
//
// Regression training minimizes (ĉ - c)² + λ·H(c_1..c_n) where H is the mean
// per-region binary entropy. The classification ablation mean-pools the
// second fusion and applies a softmax over its label set; question-only and
// image-only heads are small classifiers over a single modality.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "countlab/autodiff.hpp"
#include "countlab/dataset.hpp"
#include "countlab/mcd.hpp"
#include "countlab/optim.hpp"
#include "countlab/random.hpp"

namespace countlab {

enum class HeadKind { Regression, Classification, QuestionOnly, ImageOnly };

inline const char* head_name(HeadKind h) {
    switch (h) {
        case HeadKind::Regression: return "regression";
        case HeadKind::Classification: return "classification";
        case HeadKind::QuestionOnly: return "q-only";
        case HeadKind::ImageOnly: return "i-only";
    }
    return "?";
}

inline HeadKind parse_head(const std::string& s) {
    if (s == "regression") return HeadKind::Regression;
    if (s == "classification") return HeadKind::Classification;
    if (s == "q-only") return HeadKind::QuestionOnly;
    if (s == "i-only") return HeadKind::ImageOnly;
    throw std::invalid_argument("unknown head kind '" + s + "'");
}

inline constexpr int kBoxFeatures = 6;

struct ModelConfig {
    int feature_dim = 16;    // d_v
    int question_dim = 16;   // d_q
    int hidden_dim = 32;     // m_i
    int fusion_rank = 32;
    int attention_dim = 16;
    int heads = 1;
    int pooled_dim = 32;     // classifier hidden width
    int num_classes = 6;     // question vocabulary
    int num_attributes = 3;
    double entropy_weight = 1.0;  // λ
    double score_clamp = 1e-6;    // ε
    double init_score_bias = -2.0;
    HeadKind head = HeadKind::Regression;
    std::vector<int> class_labels;  // labels emitted by classifier heads, in logit order

    static ModelConfig for_spec(const SceneSpec& spec) {
        ModelConfig c;
        c.feature_dim = spec.feature_dim;
        c.num_classes = spec.num_classes;
        c.num_attributes = spec.num_attributes;
        for (int k = 0; k <= spec.max_label; ++k) c.class_labels.push_back(k);
        return c;
    }

    bool classifier() const { return head != HeadKind::Regression; }

    int vocabulary_size() const { return kQuestionModeCount + num_classes + num_attributes + kHalfPlaneCount; }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
        if (feature_dim <= 0 || question_dim <= 0 || hidden_dim <= 0 || fusion_rank <= 0 || attention_dim <= 0 ||
            pooled_dim <= 0)
            fail("dimensions must be positive");
        if (heads != 1) fail("exactly one attention head is supported");
        if (num_classes < 1 || num_attributes < 1) fail("vocabulary sizes must be positive");
        if (!(entropy_weight >= 0.0)) fail("entropy weight must be non-negative");
        if (!(score_clamp > 0.0 && score_clamp < 0.5)) fail("score clamp must lie in (0, 0.5)");
        if (classifier()) {
            if (class_labels.empty()) fail("classifier heads need a label set");
            std::vector<int> sorted = class_labels;
            std::sort(sorted.begin(), sorted.end());
            if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end() || sorted.front() < 0)
                fail("class labels must be distinct and non-negative");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline json model_config_to_json(const ModelConfig& c) {
    return json{{"feature_dim", c.feature_dim},     {"question_dim", c.question_dim},
                {"hidden_dim", c.hidden_dim},       {"fusion_rank", c.fusion_rank},
                {"attention_dim", c.attention_dim}, {"heads", c.heads},
                {"pooled_dim", c.pooled_dim},       {"num_classes", c.num_classes},
                {"num_attributes", c.num_attributes}, {"entropy_weight", c.entropy_weight},
                {"score_clamp", c.score_clamp},     {"init_score_bias", c.init_score_bias},
                {"head", head_name(c.head)},        {"class_labels", c.class_labels}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.feature_dim = j.at("feature_dim");
    c.question_dim = j.at("question_dim");
    c.hidden_dim = j.at("hidden_dim");
    c.fusion_rank = j.at("fusion_rank");
    c.attention_dim = j.at("attention_dim");
    c.heads = j.at("heads");
    c.pooled_dim = j.at("pooled_dim");
    c.num_classes = j.at("num_classes");
    c.num_attributes = j.at("num_attributes");
    c.entropy_weight = j.at("entropy_weight");
    c.score_clamp = j.at("score_clamp");
    c.init_score_bias = j.at("init_score_bias");
    c.head = parse_head(j.at("head").get<std::string>());
    c.class_labels = j.at("class_labels").get<std::vector<int>>();
    return c;
}

/// Parameters plus the config that shapes them.
struct Model {
    ModelConfig config;
    ParameterStore params;

    std::size_t id(const std::string& name) const { return params.find(name); }
    Tensor& operator[](const std::string& name) { return params.value(params.find(name)); }
    const Tensor& operator[](const std::string& name) const { return params.value(params.find(name)); }

    friend bool operator==(const Model&, const Model&) = default;
};

namespace detail {

inline Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Tensor t(Shape{rows, cols});
    for (auto& v : t.storage()) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace detail

/// Seeded initialization; the parameter set depends on the head kind.
inline Model init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    Model m{config, {}};
    auto& p = m.params;
    const auto dv = static_cast<std::size_t>(config.feature_dim), dq = static_cast<std::size_t>(config.question_dim),
               h = static_cast<std::size_t>(config.hidden_dim), r = static_cast<std::size_t>(config.fusion_rank),
               a = static_cast<std::size_t>(config.attention_dim), pd = static_cast<std::size_t>(config.pooled_dim),
               vocab = static_cast<std::size_t>(config.vocabulary_size()),
               k = config.class_labels.size();

    const bool uses_question = config.head != HeadKind::ImageOnly;
    const bool uses_regions = config.head != HeadKind::QuestionOnly;
    const bool uses_trunk = config.head == HeadKind::Regression || config.head == HeadKind::Classification;

    if (uses_question) p.add("question.embedding", detail::glorot(vocab, dq, rng));
    if (uses_regions) {
        p.add("region.feature_proj", detail::glorot(dv, dv, rng));
        p.add("region.coord_proj", detail::glorot(kBoxFeatures, dv, rng));
    }
    if (uses_trunk) {
        p.add("fusion1.region", detail::glorot(dv, r, rng));
        p.add("fusion1.question", detail::glorot(dq, r, rng));
        p.add("fusion1.out", detail::glorot(r, h, rng));
        p.add("attention.query", detail::glorot(h, a, rng));
        p.add("attention.key", detail::glorot(h, a, rng));
        p.add("attention.value", detail::glorot(h, h, rng));
        p.add("fusion2.region", detail::glorot(h, r, rng));
        p.add("fusion2.question", detail::glorot(dq, r, rng));
    }
    if (config.head == HeadKind::Regression) {
        p.add("score.weight", detail::glorot(r, 1, rng));
        p.add("score.bias", Tensor(Shape{1, 1}, config.init_score_bias));
    } else {
        const std::size_t in = config.head == HeadKind::Classification ? r : (config.head == HeadKind::QuestionOnly ? dq : dv);
        p.add("classify.pool", detail::glorot(in, pd, rng));
        p.add("classify.pool_bias", Tensor(Shape{1, pd}));
        p.add("classify.logits", detail::glorot(pd, k, rng));
        p.add("classify.logit_bias", Tensor(Shape{1, k}));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Vocabulary index of each question token.
inline std::vector<int> question_tokens(const Question& q, const ModelConfig& c) {
    std::vector<int> tokens{static_cast<int>(q.mode), kQuestionModeCount + q.class_id};
    if (q.attribute) tokens.push_back(kQuestionModeCount + c.num_classes + *q.attribute);
    if (q.predicate) tokens.push_back(kQuestionModeCount + c.num_classes + c.num_attributes + static_cast<int>(*q.predicate));
    return tokens;
}

/// Per-region coordinate features (x1, y1, x2, y2, w, h).
inline Tensor box_features(std::span<const RegionProposal> regions) {
    Tensor t(Shape{regions.size(), static_cast<std::size_t>(kBoxFeatures)});
    for (std::size_t i = 0; i < regions.size(); ++i) {
        const Box& b = regions[i].box;
        const double row[] = {b.x1, b.y1, b.x2, b.y2, b.width(), b.height()};
        for (int j = 0; j < kBoxFeatures; ++j) t.at(i, static_cast<std::size_t>(j)) = row[j];
    }
    return t;
}

class EncodingError : public std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Symbolic handles of one forward pass.
struct ForwardVars {
    Var question;   // [1, d_q]
    Var regions;    // [n, d_v]
    Var fused;      // m   [n, h]
    Var attention;  // [n, n]
    Var context;    // r   [n, h]
    Var residual;   // m'  [n, h]
    Var fused2;     // [n, r]
    Var scores;     // clamped c_i [n, 1]        (regression)
    Var count;      // ĉ scalar                   (regression)
    Var log_probs;  // [1, K]                     (classifier heads)
};

/// Numeric snapshot of a forward pass.
struct ForwardTrace {
    Tensor regions;
    Tensor question;
    Tensor fused;
    Tensor attention;
    Tensor context;
    Tensor residual;
    std::vector<double> scores;
};

class ScnNetwork {
public:
    explicit ScnNetwork(const Model& model) : model_(model), cfg_(model.config) {}

    Var param(Tape& tape, const char* name) const { return tape.parameter(model_.params, model_.params.find(name)); }

    Var encode_question(Tape& tape, const Question& q) const {
        const auto vocab = static_cast<std::size_t>(cfg_.vocabulary_size());
        Tensor onehot(Shape{1, vocab});
        for (int t : question_tokens(q, cfg_)) {
            if (t < 0 || static_cast<std::size_t>(t) >= vocab)
                throw EncodingError("encode: question token " + std::to_string(t) + " outside vocabulary of " +
                                    std::to_string(vocab));
            onehot[static_cast<std::size_t>(t)] += 1.0;
        }
        return matmul(tape.constant(std::move(onehot)), param(tape, "question.embedding"));
    }

    Var encode_regions(Tape& tape, std::span<const RegionProposal> regions) const {
        if (regions.empty()) throw EncodingError("encode: a triplet needs at least one region");
        const auto dv = static_cast<std::size_t>(cfg_.feature_dim);
        Tensor features(Shape{regions.size(), dv});
        for (std::size_t i = 0; i < regions.size(); ++i) {
            if (regions[i].feature.size() != dv)
                throw EncodingError("encode: region feature has " + std::to_string(regions[i].feature.size()) +
                                    " dims, model expects " + std::to_string(dv));
            std::copy(regions[i].feature.begin(), regions[i].feature.end(), features.storage().begin() + i * dv);
        }
        const Var f = matmul(tape.constant(std::move(features)), param(tape, "region.feature_proj"));
        const Var c = matmul(tape.constant(box_features(regions)), param(tape, "region.coord_proj"));
        return add(f, c);
    }

    Var fuse(Var x, Var q, const char* region_w, const char* question_w) const {
        Tape& tape = *x.tape;
        return mul_row(countlab::tanh(matmul(x, param(tape, region_w))), countlab::tanh(matmul(q, param(tape, question_w))));
    }

    /// Single-head scaled dot-product self-attention with residual.
    void self_attend(ForwardVars& v) const {
        Tape& tape = *v.fused.tape;
        const Var query = matmul(v.fused, param(tape, "attention.query"));
        const Var key = matmul(v.fused, param(tape, "attention.key"));
        const Var value = matmul(v.fused, param(tape, "attention.value"));
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.attention_dim));
        v.attention = softmax_rows(scale(matmul_nt(query, key), inv_sqrt));
        v.context = matmul(v.attention, value);
        v.residual = add(v.fused, v.context);
    }

    ForwardVars forward(Tape& tape, const CountingTriplet& t) const {
        ForwardVars v;
        switch (cfg_.head) {
            case HeadKind::QuestionOnly:
                v.question = encode_question(tape, t.question);
                v.log_probs = classify(v.question);
                return v;
            case HeadKind::ImageOnly: {
                v.regions = encode_regions(tape, t.regions);
                const double n = static_cast<double>(t.regions.size());
                v.log_probs = classify(scale(sum_rows(v.regions), 1.0 / n));
                return v;
            }
            default: break;
        }
        v.question = encode_question(tape, t.question);
        v.regions = encode_regions(tape, t.regions);
        v.fused = matmul(fuse(v.regions, v.question, "fusion1.region", "fusion1.question"), param(tape, "fusion1.out"));
        self_attend(v);
        v.fused2 = fuse(v.residual, v.question, "fusion2.region", "fusion2.question");
        if (cfg_.head == HeadKind::Regression) {
            const Var logits = add_row(matmul(v.fused2, param(tape, "score.weight")), param(tape, "score.bias"));
            v.scores = clamp(sigmoid(logits), cfg_.score_clamp, 1.0 - cfg_.score_clamp);
            v.count = sum(v.scores);
        } else {
            const double n = static_cast<double>(t.regions.size());
            v.log_probs = classify(scale(sum_rows(v.fused2), 1.0 / n));
        }
        return v;
    }

private:
    Var classify(Var pooled) const {
        Tape& tape = *pooled.tape;
        const Var hidden =
            countlab::tanh(add_row(matmul(pooled, param(tape, "classify.pool")), param(tape, "classify.pool_bias")));
        const Var logits = add_row(matmul(hidden, param(tape, "classify.logits")), param(tape, "classify.logit_bias"));
        return log_softmax_rows(logits);
    }

    const Model& model_;
    const ModelConfig& cfg_;
};

inline ForwardTrace forward_trace(const CountingTriplet& t, const Model& model) {
    if (model.config.head != HeadKind::Regression && model.config.head != HeadKind::Classification)
        throw std::invalid_argument("forward_trace: baseline heads have no region trunk");
    Tape tape;
    const ForwardVars v = ScnNetwork(model).forward(tape, t);
    ForwardTrace tr{v.regions.value(), v.question.value(), v.fused.value(), v.attention.value(),
                    v.context.value(), v.residual.value(), {}};
    if (model.config.head == HeadKind::Regression) {
        const auto& s = v.scores.value().storage();
        tr.scores.assign(s.begin(), s.end());
    }
    return tr;
}

/// Encoded region vectors [n, d_v] and question vector [1, d_q].
inline std::pair<Tensor, Tensor> encode_inputs(const CountingTriplet& t, const Model& model) {
    Tape tape;
    const ScnNetwork net(model);
    const Var r = net.encode_regions(tape, t.regions);
    const Var q = net.encode_question(tape, t.question);
    return {r.value(), q.value()};
}

// ---------------------------------------------------------------------------
// Scores, loss, prediction

/// Nearest integer, halves rounded away from zero.
inline int round_count(double c) { return static_cast<int>(std::lround(c)); }

struct RegionScoreSet {
    std::vector<double> scores;
    double sum = 0.0;
    int label = 0;
};

inline RegionScoreSet make_score_set(std::vector<double> scores) {
    RegionScoreSet s;
    s.scores = std::move(scores);
    for (double c : s.scores) s.sum += c;
    s.label = round_count(s.sum);
    return s;
}

struct LossBreakdown {
    double mse = 0.0;
    double entropy = 0.0;        // L_H, mean binary entropy over regions
    double cross_entropy = 0.0;  // classifier heads
    double total = 0.0;
    double lambda = 0.0;
};

struct LossVars {
    Var mse, entropy, total;
};

/// (ĉ - c)² + λ·H on the tape. Scores must already be clamped to [ε, 1-ε].
inline LossVars regression_loss(Var scores, Var count, int label, double lambda) {
    for (double c : scores.value().values())
        if (!(c > 0.0 && c < 1.0)) throw std::logic_error("regression_loss: score outside (0,1) after clamping");
    const double n = static_cast<double>(scores.value().size());
    const Var diff = add_scalar(count, -static_cast<double>(label));
    const Var mse = mul(diff, diff);
    const Var complement = add_scalar(scale(scores, -1.0), 1.0);
    const Var plogp = add(mul(scores, log(scores)), mul(complement, log(complement)));
    const Var entropy = scale(sum(plogp), -1.0 / n);
    return {mse, entropy, add(mse, scale(entropy, lambda))};
}

/// Loss of one score set outside any tape.
inline LossBreakdown loss(const RegionScoreSet& s, int label, const ModelConfig& config) {
    Tape tape;
    const Tensor col(Shape{s.scores.size(), 1}, s.scores);
    const Var scores = tape.constant(col);
    const LossVars lv = regression_loss(scores, sum(scores), label, config.entropy_weight);
    return LossBreakdown{lv.mse.value().item(), lv.entropy.value().item(), 0.0, lv.total.value().item(),
                         config.entropy_weight};
}

inline int label_index(const ModelConfig& c, int label) {
    const auto it = std::find(c.class_labels.begin(), c.class_labels.end(), label);
    if (it == c.class_labels.end())
        throw std::invalid_argument("label " + std::to_string(label) + " is outside the classifier label set");
    return static_cast<int>(it - c.class_labels.begin());
}

/// Builds the training loss of one triplet on `tape`; fills `breakdown`.
inline Var training_loss(Tape& tape, const Model& model, const CountingTriplet& t, LossBreakdown* breakdown = nullptr) {
    const ForwardVars v = ScnNetwork(model).forward(tape, t);
    const ModelConfig& c = model.config;
    if (c.head == HeadKind::Regression) {
        const LossVars lv = regression_loss(v.scores, v.count, t.count, c.entropy_weight);
        if (breakdown)
            *breakdown = {lv.mse.value().item(), lv.entropy.value().item(), 0.0, lv.total.value().item(),
                          c.entropy_weight};
        return lv.total;
    }
    Tensor onehot(Shape{1, c.class_labels.size()});
    onehot[static_cast<std::size_t>(label_index(c, t.count))] = 1.0;
    const Var ce = scale(sum(mul(v.log_probs, tape.constant(std::move(onehot)))), -1.0);
    if (breakdown) *breakdown = {0.0, 0.0, ce.value().item(), ce.value().item(), 0.0};
    return ce;
}

struct Prediction {
    int label = 0;
    double estimate = 0.0;        // ĉ for regression, the label for classifiers
    RegionScoreSet score_set;     // regression only
    double mean_entropy = 0.0;    // regression only
};

inline Prediction predict(const CountingTriplet& t, const Model& model) {
    Tape tape;
    const ForwardVars v = ScnNetwork(model).forward(tape, t);
    Prediction p;
    if (model.config.head == HeadKind::Regression) {
        const auto& s = v.scores.value().storage();
        p.score_set = make_score_set({s.begin(), s.end()});
        p.label = p.score_set.label;
        p.estimate = p.score_set.sum;
        double h = 0.0;
        for (double c : s) h -= c * std::log(c) + (1.0 - c) * std::log(1.0 - c);
        p.mean_entropy = h / static_cast<double>(s.size());
        return p;
    }
    const auto& lp = v.log_probs.value().storage();
    const auto best = static_cast<std::size_t>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    p.label = model.config.class_labels[best];
    p.estimate = p.label;
    return p;
}

// ---------------------------------------------------------------------------
// Training

/// Train and validation triplets only; the test ids of a split never reach
/// this type.
class TrainingSet {
public:
    static TrainingSet from_split(const DatasetSplit& split, const Dataset& dataset) {
        TrainingSet s;
        for (auto id : split.train) s.train_.push_back(&dataset.by_id(id));
        for (auto id : split.validation) s.validation_.push_back(&dataset.by_id(id));
        s.provenance_ = split.provenance;
        return s;
    }

    static TrainingSet from_lists(std::vector<const CountingTriplet*> train, std::vector<const CountingTriplet*> val) {
        TrainingSet s;
        s.train_ = std::move(train);
        s.validation_ = std::move(val);
        return s;
    }

    const std::vector<const CountingTriplet*>& train() const noexcept { return train_; }
    const std::vector<const CountingTriplet*>& validation() const noexcept { return validation_; }
    const SplitProvenance& provenance() const noexcept { return provenance_; }

private:
    std::vector<const CountingTriplet*> train_;
    std::vector<const CountingTriplet*> validation_;
    SplitProvenance provenance_;
};

struct TrainerConfig {
    int epochs = 12;
    int batch_size = 32;
    int patience = 0;  // stop after this many epochs without validation gain; 0 = never
    LearningRateSchedule schedule{3e-3, 0.25, 2, 8};
    bool uniform_label_sampling = false;

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("trainer: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("trainer: batch size must be >= 1");
        if (patience < 0) throw std::invalid_argument("trainer: patience must be >= 0");
        schedule.validate();
    }
};

struct EpochRecord {
    int epoch = 0;
    double learning_rate = 0.0;
    double mse = 0.0;            // means over training triplets
    double entropy = 0.0;
    double cross_entropy = 0.0;
    double total = 0.0;
    double val_accuracy = 0.0;   // percent
    double val_mean_entropy = 0.0;
    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct RunHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double best_val_accuracy = -1.0;
    friend bool operator==(const RunHistory&, const RunHistory&) = default;
};

struct TrainResult {
    Model model;  // parameters of the best validation epoch
    RunHistory history;
};

class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(const std::string& what, int epoch, std::int64_t batch)
        : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
    int epoch() const noexcept { return epoch_; }
    std::int64_t batch() const noexcept { return batch_; }

private:
    int epoch_;
    std::int64_t batch_;
};

struct ValidationSummary {
    double accuracy = 0.0;
    double mean_entropy = 0.0;
};

inline ValidationSummary evaluate_validation(const std::vector<const CountingTriplet*>& val, const Model& model) {
    ValidationSummary s;
    if (val.empty()) return s;
    std::size_t correct = 0;
    for (const auto* t : val) {
        const Prediction p = predict(*t, model);
        correct += p.label == t->count;
        s.mean_entropy += p.mean_entropy;
    }
    s.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(val.size());
    s.mean_entropy /= static_cast<double>(val.size());
    return s;
}

namespace detail {

/// Epoch sample order: a shuffle of the training set, or with uniform label
/// sampling, labels drawn uniformly then a triplet uniformly within label.
inline std::vector<std::size_t> epoch_order(const std::vector<const CountingTriplet*>& train, bool uniform_labels,
                                            Rng& rng) {
    std::vector<std::size_t> order(train.size());
    if (!uniform_labels) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        return order;
    }
    std::map<int, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < train.size(); ++i) by_label[train[i]->count].push_back(i);
    std::vector<const std::vector<std::size_t>*> buckets;
    for (const auto& [label, members] : by_label) buckets.push_back(&members);
    for (auto& slot : order) {
        const auto& bucket = *buckets[rng.below(buckets.size())];
        slot = bucket[rng.below(bucket.size())];
    }
    return order;
}

}  // namespace detail

/// Mini-batch Adam on the mean training loss; keeps the parameters of the
/// epoch with the best validation accuracy (earliest on ties).
inline TrainResult train(const TrainingSet& data, const ModelConfig& config, const TrainerConfig& trainer,
                         std::uint64_t seed) {
    config.validate();
    trainer.validate();
    if (data.train().empty()) throw std::invalid_argument("train: empty training set");

    Model model = init_model(config, derive_seed(seed, 1));
    AdamState adam = AdamState::for_parameters(model.params, trainer.schedule);
    Gradients grads = zero_gradients(model.params);
    TrainResult result{model, {}};
    int since_best = 0;
    std::int64_t batch_id = 0;
    Tape tape;

    for (int epoch = 0; epoch < trainer.epochs; ++epoch) {
        Rng rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(epoch)));
        const std::vector<std::size_t> order = detail::epoch_order(data.train(), trainer.uniform_label_sampling, rng);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.learning_rate = trainer.schedule.rate(epoch);

        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(trainer.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(trainer.batch_size));
            for (auto& g : grads) g.fill(0.0);
            for (std::size_t k = start; k < end; ++k) {
                tape.clear();
                LossBreakdown lb;
                Var out;
                try {
                    out = training_loss(tape, model, *data.train()[order[k]], &lb);
                } catch (const std::domain_error& e) {
                    throw TrainingAborted(std::string("train: non-finite loss (") + e.what() + ") at epoch " +
                                              std::to_string(epoch) + " batch " + std::to_string(batch_id),
                                          epoch, batch_id);
                }
                if (!std::isfinite(lb.total))
                    throw TrainingAborted("train: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                              std::to_string(batch_id),
                                          epoch, batch_id);
                rec.mse += lb.mse;
                rec.entropy += lb.entropy;
                rec.cross_entropy += lb.cross_entropy;
                rec.total += lb.total;
                backward_into(tape, out, grads);
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (auto& g : grads)
                for (auto& x : g.storage()) x *= inv;
            try {
                adam_step(model.params, grads, adam, epoch, batch_id);
            } catch (const NonFiniteGradient& e) {
                throw TrainingAborted(e.what(), epoch, batch_id);
            }
            ++batch_id;
        }
        const double n = static_cast<double>(order.size());
        rec.mse /= n;
        rec.entropy /= n;
        rec.cross_entropy /= n;
        rec.total /= n;

        const ValidationSummary val = evaluate_validation(data.validation(), model);
        rec.val_accuracy = val.accuracy;
        rec.val_mean_entropy = val.mean_entropy;
        result.history.epochs.push_back(rec);
        if (rec.val_accuracy > result.history.best_val_accuracy) {
            result.history.best_val_accuracy = rec.val_accuracy;
            result.history.best_epoch = epoch;
            result.model = model;
            since_best = 0;
        } else if (trainer.patience > 0 && ++since_best >= trainer.patience) {
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Label-histogram baselines

enum class RandomBaselineKind { TrainDistribution, TestDistribution };

/// Samples labels from a histogram with a seeded generator.
inline std::vector<int> random_baseline(const LabelHistogram& histogram, std::size_t count, std::uint64_t seed) {
    std::vector<double> weights(histogram.begin(), histogram.end());
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("random baseline: histogram is not normalizable");
    Rng rng(seed);
    std::vector<int> out(count);
    for (auto& label : out) label = static_cast<int>(rng.categorical(weights));
    return out;
}

/// Expected accuracy of sampling from `sampler` on a set distributed as
/// `target`: Σ_k p(k) q(k).
inline double random_baseline_expected_accuracy(const LabelHistogram& sampler, const LabelHistogram& target) {
    const auto p = normalize(sampler);
    const auto q = normalize(target);
    double acc = 0.0;
    for (std::size_t k = 0; k < std::min(p.size(), q.size()); ++k) acc += p[k] * q[k];
    return 100.0 * acc;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

inline json checkpoint_to_json(const Model& model, const json& provenance) {
    json params = json::array();
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const Tensor& t = model.params.value(i);
        params.push_back(json{{"name", model.params.name(i)}, {"shape", t.shape()}, {"values", t.storage()}});
    }
    return json{{"format", "countlab-checkpoint"},
                {"version", kCheckpointVersion},
                {"config", model_config_to_json(model.config)},
                {"parameters", params},
                {"provenance", provenance}};
}

class CheckpointMismatch : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Restores a model; rejects version or config mismatches when `expected`
/// is given.
inline Model checkpoint_from_json(const json& j, const std::optional<ModelConfig>& expected = std::nullopt) {
    if (j.at("format") != "countlab-checkpoint") throw CheckpointMismatch("checkpoint: unknown format");
    if (j.at("version") != kCheckpointVersion)
        throw CheckpointMismatch("checkpoint: unsupported version " + j.at("version").dump());
    const ModelConfig cfg = model_config_from_json(j.at("config"));
    if (expected && !(cfg == *expected)) throw CheckpointMismatch("checkpoint: config does not match the expected model");
    Model model = init_model(cfg, 0);
    const auto& params = j.at("parameters");
    if (params.size() != model.params.size())
        throw CheckpointMismatch("checkpoint: parameter count differs from the config's model");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (p.at("name") != model.params.name(i))
            throw CheckpointMismatch("checkpoint: expected parameter '" + model.params.name(i) + "'");
        Tensor t(p.at("shape").get<Shape>(), p.at("values").get<std::vector<double>>());
        if (t.shape() != model.params.value(i).shape())
            throw CheckpointMismatch("checkpoint: shape mismatch for '" + model.params.name(i) + "'");
        model.params.value(i) = std::move(t);
    }
    return model;
}

}  // namespace countlab
