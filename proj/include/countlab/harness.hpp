#pragma once

// Experiment orchestration: configuration, single runs, p-sweeps, the
// entropy grounding study and report files.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "countlab/dataset.hpp"
#include "countlab/hash.hpp"
#include "countlab/mcd.hpp"
#include "countlab/metrics.hpp"
#include "countlab/scn.hpp"

namespace countlab {

// ---------------------------------------------------------------------------
// Configuration

/// Raised for invalid configuration; the CLI maps it to exit code 1.
class ConfigError : public std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

enum class LabelSet { All, SeenInTrain };

struct ExperimentConfig {
    SceneSpec spec;

    std::uint64_t train_size = 20000;
    std::uint64_t test_size = 4000;
    std::uint64_t grounding_size = 1000;  // 0 disables grounding evaluation
    std::uint64_t train_seed = 11;
    std::uint64_t test_seed = 12;
    std::uint64_t grounding_seed = 13;
    std::vector<double> label_histogram = default_label_histogram();

    SplitStrategy strategy;
    double validation_fraction = 0.1;
    std::uint64_t carve_seed = 21;
    std::uint64_t strategy_seed = 22;

    ModelConfig model;
    LabelSet label_set = LabelSet::All;
    TrainerConfig trainer;
    std::uint64_t seed = 0;

    double ap_threshold = 0.2;
    std::uint64_t random_samples = 10000;
    double max_accuracy_gap = 5.0;  // grounding study: allowed |Δ accuracy| between λ settings

    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<double> sweep_p{0, 50, 90, 100};
    std::vector<HeadKind> sweep_heads{HeadKind::Regression, HeadKind::Classification};

    std::string output_dir;  // not part of the config hash

    ExperimentConfig() { model = ModelConfig::for_spec(spec); }

    void validate() const;
};

namespace detail {

template <typename T>
std::vector<T> parse_list(const std::string& s, const std::function<T(const std::string&)>& one) {
    std::vector<T> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        if (b == std::string::npos) continue;
        out.push_back(one(item.substr(b, e - b + 1)));
    }
    return out;
}

inline double parse_double(const std::string& s) {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
}

inline long long parse_int(const std::string& s) {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
}

inline std::uint64_t parse_u64(const std::string& s) {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative value");
    std::size_t pos = 0;
    const auto v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
}

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw std::invalid_argument("expected true/false");
}

struct ConfigKey {
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<json(const ExperimentConfig&)> get;
};

#define COUNTLAB_INT(key, field)                                                                      \
    {key, {[](ExperimentConfig& c, const std::string& v) { c.field = static_cast<int>(parse_int(v)); }, \
           [](const ExperimentConfig& c) { return json(c.field); }}}
#define COUNTLAB_U64(key, field)                                                            \
    {key, {[](ExperimentConfig& c, const std::string& v) { c.field = parse_u64(v); }, \
           [](const ExperimentConfig& c) { return json(c.field); }}}
#define COUNTLAB_DBL(key, field)                                                               \
    {key, {[](ExperimentConfig& c, const std::string& v) { c.field = parse_double(v); }, \
           [](const ExperimentConfig& c) { return json(c.field); }}}

inline const std::map<std::string, ConfigKey>& config_keys() {
    static const std::map<std::string, ConfigKey> keys{
        COUNTLAB_INT("spec.num_classes", spec.num_classes),
        COUNTLAB_INT("spec.num_attributes", spec.num_attributes),
        COUNTLAB_INT("spec.max_instances", spec.max_instances),
        COUNTLAB_INT("spec.max_other_instances", spec.max_other_instances),
        COUNTLAB_DBL("spec.min_size", spec.min_size),
        COUNTLAB_DBL("spec.max_size", spec.max_size),
        COUNTLAB_INT("spec.min_duplicates", spec.min_duplicates),
        COUNTLAB_INT("spec.max_duplicates", spec.max_duplicates),
        COUNTLAB_INT("spec.min_distractors", spec.min_distractors),
        COUNTLAB_INT("spec.max_distractors", spec.max_distractors),
        COUNTLAB_INT("spec.max_regions", spec.max_regions),
        COUNTLAB_INT("spec.feature_dim", spec.feature_dim),
        COUNTLAB_DBL("spec.feature_noise", spec.feature_noise),
        COUNTLAB_DBL("spec.attribute_weight", spec.attribute_weight),
        COUNTLAB_DBL("spec.coverage_iou", spec.coverage_iou),
        COUNTLAB_DBL("spec.primary_min_iou", spec.primary_min_iou),
        COUNTLAB_DBL("spec.duplicate_max_iou", spec.duplicate_max_iou),
        COUNTLAB_U64("spec.prototype_seed", spec.prototype_seed),
        COUNTLAB_INT("spec.max_label", spec.max_label),
        COUNTLAB_INT("spec.max_questions_per_image", spec.max_questions_per_image),
        {"spec.mode_weights",
         {[](ExperimentConfig& c, const std::string& v) { c.spec.mode_weights = parse_list<double>(v, parse_double); },
          [](const ExperimentConfig& c) { return json(c.spec.mode_weights); }}},

        COUNTLAB_U64("data.train_size", train_size),
        COUNTLAB_U64("data.test_size", test_size),
        COUNTLAB_U64("data.grounding_size", grounding_size),
        COUNTLAB_U64("data.train_seed", train_seed),
        COUNTLAB_U64("data.test_seed", test_seed),
        COUNTLAB_U64("data.grounding_seed", grounding_seed),
        {"data.label_histogram",
         {[](ExperimentConfig& c, const std::string& v) { c.label_histogram = parse_list<double>(v, parse_double); },
          [](const ExperimentConfig& c) { return json(c.label_histogram); }}},

        {"split.strategy",
         {[](ExperimentConfig& c, const std::string& v) { c.strategy.kind = parse_strategy(v); },
          [](const ExperimentConfig& c) { return json(strategy_name(c.strategy.kind)); }}},
        COUNTLAB_DBL("split.p", strategy.p),
        COUNTLAB_DBL("split.validation_fraction", validation_fraction),
        COUNTLAB_U64("split.carve_seed", carve_seed),
        COUNTLAB_U64("split.strategy_seed", strategy_seed),

        {"model.head",
         {[](ExperimentConfig& c, const std::string& v) { c.model.head = parse_head(v); },
          [](const ExperimentConfig& c) { return json(head_name(c.model.head)); }}},
        {"model.labels",
         {[](ExperimentConfig& c, const std::string& v) {
              if (v == "all")
                  c.label_set = LabelSet::All;
              else if (v == "seen")
                  c.label_set = LabelSet::SeenInTrain;
              else
                  throw std::invalid_argument("expected all or seen");
          },
          [](const ExperimentConfig& c) { return json(c.label_set == LabelSet::All ? "all" : "seen"); }}},
        COUNTLAB_INT("model.question_dim", model.question_dim),
        COUNTLAB_INT("model.hidden_dim", model.hidden_dim),
        COUNTLAB_INT("model.fusion_rank", model.fusion_rank),
        COUNTLAB_INT("model.attention_dim", model.attention_dim),
        COUNTLAB_INT("model.pooled_dim", model.pooled_dim),
        COUNTLAB_DBL("model.entropy_weight", model.entropy_weight),
        COUNTLAB_DBL("model.score_clamp", model.score_clamp),
        COUNTLAB_DBL("model.init_score_bias", model.init_score_bias),

        COUNTLAB_INT("train.epochs", trainer.epochs),
        COUNTLAB_INT("train.batch_size", trainer.batch_size),
        COUNTLAB_INT("train.patience", trainer.patience),
        COUNTLAB_DBL("train.base_rate", trainer.schedule.base_rate),
        COUNTLAB_DBL("train.decay_factor", trainer.schedule.decay_factor),
        COUNTLAB_INT("train.decay_interval", trainer.schedule.decay_interval),
        COUNTLAB_INT("train.decay_start_epoch", trainer.schedule.decay_start_epoch),
        {"train.uniform_labels",
         {[](ExperimentConfig& c, const std::string& v) { c.trainer.uniform_label_sampling = parse_bool(v); },
          [](const ExperimentConfig& c) { return json(c.trainer.uniform_label_sampling); }}},
        COUNTLAB_U64("train.seed", seed),

        COUNTLAB_DBL("eval.ap_threshold", ap_threshold),
        COUNTLAB_U64("eval.random_samples", random_samples),
        COUNTLAB_DBL("study.max_accuracy_gap", max_accuracy_gap),

        {"run.seeds",
         {[](ExperimentConfig& c, const std::string& v) { c.seeds = parse_list<std::uint64_t>(v, parse_u64); },
          [](const ExperimentConfig& c) { return json(c.seeds); }}},
        {"sweep.p",
         {[](ExperimentConfig& c, const std::string& v) { c.sweep_p = parse_list<double>(v, parse_double); },
          [](const ExperimentConfig& c) { return json(c.sweep_p); }}},
        {"sweep.heads",
         {[](ExperimentConfig& c, const std::string& v) { c.sweep_heads = parse_list<HeadKind>(v, parse_head); },
          [](const ExperimentConfig& c) {
              json a = json::array();
              for (auto h : c.sweep_heads) a.push_back(head_name(h));
              return a;
          }}},
    };
    return keys;
}

#undef COUNTLAB_INT
#undef COUNTLAB_U64
#undef COUNTLAB_DBL

inline std::string json_scalar_text(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_array()) {
        std::string out;
        for (const auto& e : v) out += (out.empty() ? "" : ",") + json_scalar_text(e);
        return out;
    }
    return v.dump();
}

}  // namespace detail

/// Applies one `key = value` setting.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
    if (key == "output.dir") {
        c.output_dir = value;
        return;
    }
    const auto& keys = detail::config_keys();
    const auto it = keys.find(key);
    if (it == keys.end()) throw ConfigError("config: unknown key '" + key + "'");
    try {
        it->second.set(c, value);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("config: bad value '" + value + "' for '" + key + "': " + e.what());
    }
    if (key == "spec.feature_dim") c.model.feature_dim = c.spec.feature_dim;
    if (key == "spec.num_classes") c.model.num_classes = c.spec.num_classes;
    if (key == "spec.num_attributes") c.model.num_attributes = c.spec.num_attributes;
}

/// Parses `key = value` lines; `#` starts a comment.
inline void apply_config_text(ExperimentConfig& c, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        auto trim = [](std::string s) {
            const auto x = s.find_first_not_of(" \t\r");
            const auto y = s.find_last_not_of(" \t\r");
            return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
        };
        set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

/// Applies `key=value` overrides (command-line form).
inline void apply_overrides(ExperimentConfig& c, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
        set_config_value(c, o.substr(0, eq), o.substr(eq + 1));
    }
}

inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    ExperimentConfig c;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config: cannot read " + path);
        std::stringstream buf;
        buf << in.rdbuf();
        apply_config_text(c, buf.str());
    }
    apply_overrides(c, overrides);
    c.validate();
    return c;
}

/// Every hashed setting; output.dir is excluded.
inline json config_to_json(const ExperimentConfig& c) {
    json j = json::object();
    for (const auto& [key, k] : detail::config_keys()) j[key] = k.get(c);
    return j;
}

inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    for (const auto& [key, v] : j.items()) set_config_value(c, key, detail::json_scalar_text(v));
    c.validate();
    return c;
}

inline std::string config_hash(const ExperimentConfig& c) { return content_hash(config_to_json(c).dump()); }

inline void ExperimentConfig::validate() const {
    try {
        spec.validate();
        strategy.validate();
        trainer.validate();
        ModelConfig m = model;
        if (m.class_labels.empty()) m.class_labels = {0};
        m.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (model.feature_dim != spec.feature_dim || model.num_classes != spec.num_classes ||
        model.num_attributes != spec.num_attributes)
        throw ConfigError("config: model vocabulary/feature sizes disagree with the scene spec");
    if (train_size < 2) throw ConfigError("config: data.train_size must be >= 2");
    if (label_histogram.empty()) throw ConfigError("config: data.label_histogram is empty");
    for (std::size_t k = 0; k < label_histogram.size(); ++k) {
        if (!(label_histogram[k] >= 0.0)) throw ConfigError("config: label histogram entries must be >= 0");
        if (label_histogram[k] > 0.0 && static_cast<int>(k) > spec.max_label)
            throw ConfigError("config: label " + std::to_string(k) + " exceeds spec.max_label");
    }
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw ConfigError("config: split.validation_fraction must lie in (0, 1)");
    if (!(ap_threshold > 0.0 && ap_threshold <= 1.0)) throw ConfigError("config: eval.ap_threshold must lie in (0, 1]");
    if (!(max_accuracy_gap >= 0.0)) throw ConfigError("config: study.max_accuracy_gap must be >= 0");
    if (seeds.empty()) throw ConfigError("config: run.seeds is empty");
    for (double p : sweep_p)
        if (!(p >= 0.0 && p <= 100.0)) throw ConfigError("config: sweep.p values must lie in [0, 100]");
    if (sweep_heads.empty()) throw ConfigError("config: sweep.heads is empty");
}

// ---------------------------------------------------------------------------
// Datasets shared across runs

inline constexpr std::uint64_t kTestIdBase = 100'000'000;
inline constexpr std::uint64_t kGroundingIdBase = 200'000'000;

/// In-memory store of generated corpora, keyed by their generating inputs.
class Workspace {
public:
    struct Corpus {
        std::shared_ptr<const Dataset> train_pool;
        std::shared_ptr<const Dataset> test_pool;
        std::shared_ptr<const Dataset> grounding;  // may be null
        std::string train_hash, test_hash, grounding_hash;
        std::shared_ptr<const CorpusIndex> index;
    };

    const Corpus& corpus(const ExperimentConfig& c) {
        const std::string key = corpus_key(c);
        if (const auto it = corpora_.find(key); it != corpora_.end()) return it->second;
        Corpus corpus;
        corpus.train_pool = dataset(c.spec, c.train_size, c.train_seed, c.label_histogram, 0);
        corpus.test_pool = dataset(c.spec, c.test_size, c.test_seed, c.label_histogram, kTestIdBase);
        corpus.train_hash = hash_of(corpus.train_pool);
        corpus.test_hash = hash_of(corpus.test_pool);
        if (c.grounding_size > 0) {
            corpus.grounding = dataset(grounding_spec(c.spec), c.grounding_size, c.grounding_seed, c.label_histogram,
                                       kGroundingIdBase);
            corpus.grounding_hash = hash_of(corpus.grounding);
        }
        corpus.index = std::make_shared<const CorpusIndex>(CorpusIndex::from_datasets(
            *corpus.train_pool, corpus.test_pool.get(), content_hash(corpus.train_hash + corpus.test_hash)));
        return corpora_.emplace(key, std::move(corpus)).first->second;
    }

    /// Grounding questions use the simple "how many {class}" template only.
    static SceneSpec grounding_spec(SceneSpec s) {
        s.mode_weights = {1.0, 0.0, 0.0};
        return s;
    }

    std::map<std::string, json>& record_cache() { return records_; }

private:
    static std::string corpus_key(const ExperimentConfig& c) {
        return json{spec_to_json(c.spec), c.train_size, c.test_size, c.grounding_size, c.train_seed,
                    c.test_seed,          c.grounding_seed, c.label_histogram}
            .dump();
    }

    std::shared_ptr<const Dataset> dataset(const SceneSpec& spec, std::uint64_t n, std::uint64_t seed,
                                           const std::vector<double>& hist, std::uint64_t id_base) {
        const std::string key = json{spec_to_json(spec), n, seed, hist, id_base}.dump();
        if (const auto it = datasets_.find(key); it != datasets_.end()) return it->second;
        auto ds = std::make_shared<const Dataset>(generate_dataset(spec, n, seed, hist, id_base));
        datasets_.emplace(key, ds);
        return ds;
    }

    std::string hash_of(const std::shared_ptr<const Dataset>& ds) {
        if (const auto it = hashes_.find(ds.get()); it != hashes_.end()) return it->second;
        return hashes_[ds.get()] = dataset_hash(*ds);
    }

    std::map<std::string, std::shared_ptr<const Dataset>> datasets_;
    std::map<const Dataset*, std::string> hashes_;
    std::map<std::string, Corpus> corpora_;
    std::map<std::string, json> records_;
};

// ---------------------------------------------------------------------------
// Single run

class StageFailure : public std::runtime_error {
public:
    StageFailure(std::string stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

struct RandomBaselines {
    double train_expected = 0.0;  // sampling the train label histogram
    double train_sampled = 0.0;
    double test_expected = 0.0;   // sampling the test label histogram
    double test_sampled = 0.0;
};

struct RunRecord {
    json config;
    std::string config_hash;
    json datasets;  // hashes
    SplitProvenance split;
    json split_sizes;
    double val_test_label_coefficient = 0.0;
    ModelConfig model;
    RunHistory history;
    std::string checkpoint_hash;
    EvalReport validation;
    EvalReport test;
    std::optional<GroundingSummary> grounding;
    RandomBaselines random;
    std::map<std::string, double> timings;  // seconds; excluded from the canonical form
};

struct PredictionSet {
    std::vector<int> labels;
    std::vector<double> estimates;
    std::vector<int> truth;
};

inline PredictionSet predict_all(const std::vector<const CountingTriplet*>& triplets, const Model& model) {
    PredictionSet out;
    for (const auto* t : triplets) {
        const Prediction p = predict(*t, model);
        out.labels.push_back(p.label);
        out.estimates.push_back(p.estimate);
        out.truth.push_back(t->count);
    }
    return out;
}

/// GroundP and AP of a regression model over a grounding corpus.
inline GroundingSummary evaluate_grounding(const Dataset& corpus, const Model& model, double ap_threshold) {
    std::vector<GroundingEval> evals;
    std::vector<DetectionImage> images;
    std::vector<int> groups;
    for (const auto& t : corpus.triplets) {
        const Prediction p = predict(t, model);
        std::vector<Box> boxes;
        for (const auto& r : t.regions) boxes.push_back(r.box);
        evals.push_back(make_grounding_eval(t.gt_boxes, boxes, p.score_set.scores));
        images.push_back(DetectionImage{t.gt_boxes, boxes, p.score_set.scores});
        groups.push_back(t.question.class_id);
    }
    GroundingSummary g;
    const GroundPResult gp = ground_p(evals);
    g.ground_p = gp.value;
    g.weighted_score = gp.weighted;
    g.total_score = gp.total;
    g.ap_threshold = ap_threshold;
    const GroupedAp ap = grouped_average_precision(images, groups, ap_threshold);
    g.ap_per_class = ap.per_group;
    g.ap_mean_per_class = ap.mean_over_groups;
    g.ap_pooled = ap.pooled;
    g.triplets = corpus.triplets.size();
    return g;
}

namespace detail {

template <typename F>
auto stage(const char* name, std::map<std::string, double>& timings, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            timings[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        } else {
            auto r = f();
            timings[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            return r;
        }
    } catch (const StageFailure&) {
        throw;
    } catch (const std::exception& e) {
        throw StageFailure(name, e.what());
    }
}

inline double sampled_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
    return truth.empty() ? 0.0 : 100.0 * static_cast<double>(hit) / static_cast<double>(truth.size());
}

}  // namespace detail

/// The label set a classifier head of this config is built over.
inline std::vector<int> classifier_labels(const ExperimentConfig& c, const DatasetSplit& split, const CorpusIndex& index) {
    std::vector<int> labels;
    if (c.label_set == LabelSet::All) {
        for (int k = 0; k <= c.spec.max_label; ++k) labels.push_back(k);
        return labels;
    }
    std::set<int> seen;
    for (auto id : split.train) seen.insert(index.at(id).label);
    return {seen.begin(), seen.end()};
}

/// Corpus, split and model shape of a config: everything before training.
struct PreparedRun {
    const Workspace::Corpus* corpus = nullptr;
    DatasetSplit split;
    ModelConfig model;
};

inline PreparedRun prepare_run(const ExperimentConfig& config, Workspace& ws, RunRecord& rec) {
    detail::stage("validate", rec.timings, [&] { config.validate(); });
    rec.config = config_to_json(config);
    rec.config_hash = config_hash(config);

    PreparedRun run;
    run.corpus = detail::stage("generate", rec.timings, [&] { return &ws.corpus(config); });
    const Workspace::Corpus& corpus = *run.corpus;
    rec.datasets = json{{"train_pool", corpus.train_hash}, {"test_pool", corpus.test_hash}};
    if (corpus.grounding) rec.datasets["grounding"] = corpus.grounding_hash;
    const CorpusIndex& index = *corpus.index;

    run.split = detail::stage("split", rec.timings, [&] {
        const DatasetSplit base = make_base_split(index, config.validation_fraction, config.carve_seed);
        return apply_strategy(base, config.strategy, config.strategy_seed, index);
    });
    const DatasetSplit& split = run.split;
    rec.split = split.provenance;
    rec.split_sizes = json{{"train", split.train.size()}, {"validation", split.validation.size()}, {"test", split.test.size()}};
    if (!split.test.empty() && !split.validation.empty()) {
        auto v = normalize(count_histogram(split.validation, index));
        auto t = normalize(count_histogram(split.test, index));
        const std::size_t n = std::max(v.size(), t.size());
        v.resize(n, 0.0);
        t.resize(n, 0.0);
        rec.val_test_label_coefficient = bhattacharyya(v, t);
    }

    run.model = config.model;
    run.model.class_labels = classifier_labels(config, split, index);
    rec.model = run.model;
    return run;
}

inline json checkpoint_provenance(const RunRecord& rec, const ExperimentConfig& config) {
    return json{{"config_hash", rec.config_hash},
                {"datasets", rec.datasets},
                {"split", provenance_to_json(rec.split)},
                {"seed", config.seed}};
}

/// Validation, test (once), random baselines and grounding for a trained model.
inline void evaluate_trained(const ExperimentConfig& config, const PreparedRun& run, const Model& model, RunRecord& rec) {
    const Workspace::Corpus& corpus = *run.corpus;
    const DatasetSplit& split = run.split;
    const CorpusIndex& index = *corpus.index;
    rec.checkpoint_hash = content_hash(checkpoint_to_json(model, checkpoint_provenance(rec, config)).dump());

    detail::stage("evaluate", rec.timings, [&] {
        std::vector<const CountingTriplet*> val, test;
        for (auto id : split.validation) val.push_back(&corpus.train_pool->by_id(id));
        for (auto id : split.test) test.push_back(&corpus.test_pool->by_id(id));
        const json prov{{"checkpoint", rec.checkpoint_hash}, {"split", provenance_to_json(split.provenance)}};
        if (!val.empty()) {
            const PredictionSet pv = predict_all(val, model);
            rec.validation = make_eval_report(pv.labels, pv.estimates, pv.truth, prov);
        }
        if (test.empty()) throw std::runtime_error("test set is empty");
        const PredictionSet pt = predict_all(test, model);
        rec.test = make_eval_report(pt.labels, pt.estimates, pt.truth, prov);

        const LabelHistogram train_hist = count_histogram(split.train, index);
        const LabelHistogram test_hist = count_histogram(split.test, index);
        rec.random.train_expected = random_baseline_expected_accuracy(train_hist, test_hist);
        rec.random.test_expected = random_baseline_expected_accuracy(test_hist, test_hist);
        const std::uint64_t draws = config.random_samples;
        std::vector<int> truth;
        truth.reserve(draws);
        Rng pick(derive_seed(config.seed, 77));
        for (std::uint64_t i = 0; i < draws; ++i) truth.push_back(pt.truth[pick.below(pt.truth.size())]);
        rec.random.train_sampled =
            detail::sampled_accuracy(random_baseline(train_hist, draws, derive_seed(config.seed, 78)), truth);
        rec.random.test_sampled =
            detail::sampled_accuracy(random_baseline(test_hist, draws, derive_seed(config.seed, 79)), truth);
    });

    if (corpus.grounding && model.config.head == HeadKind::Regression)
        rec.grounding = detail::stage("grounding", rec.timings, [&] {
            return evaluate_grounding(*corpus.grounding, model, config.ap_threshold);
        });
}

/// generate → carve → strategy → train → select on validation → test once.
inline RunRecord run_experiment(const ExperimentConfig& config, Workspace& ws, Model* trained_out = nullptr) {
    RunRecord rec;
    const PreparedRun run = prepare_run(config, ws, rec);
    TrainResult trained = detail::stage("train", rec.timings, [&] {
        return train(TrainingSet::from_split(run.split, *run.corpus->train_pool), run.model, config.trainer, config.seed);
    });
    rec.history = trained.history;
    evaluate_trained(config, run, trained.model, rec);
    if (trained_out) *trained_out = std::move(trained.model);
    return rec;
}

// ---------------------------------------------------------------------------
// Record JSON

inline json history_to_json(const RunHistory& h) {
    json epochs = json::array();
    for (const auto& e : h.epochs)
        epochs.push_back(json{{"epoch", e.epoch},
                              {"learning_rate", e.learning_rate},
                              {"mse", e.mse},
                              {"entropy", e.entropy},
                              {"cross_entropy", e.cross_entropy},
                              {"total", e.total},
                              {"val_accuracy", e.val_accuracy},
                              {"val_mean_entropy", e.val_mean_entropy}});
    return json{{"epochs", epochs}, {"best_epoch", h.best_epoch}, {"best_val_accuracy", h.best_val_accuracy}};
}

inline RunHistory history_from_json(const json& j) {
    RunHistory h;
    for (const auto& e : j.at("epochs"))
        h.epochs.push_back(EpochRecord{e.at("epoch"), e.at("learning_rate"), e.at("mse"), e.at("entropy"),
                                       e.at("cross_entropy"), e.at("total"), e.at("val_accuracy"),
                                       e.at("val_mean_entropy")});
    h.best_epoch = j.at("best_epoch");
    h.best_val_accuracy = j.at("best_val_accuracy");
    return h;
}

inline constexpr int kRecordVersion = 1;

/// Canonical form omits timings so that reruns compare byte-for-byte.
inline json record_to_json(const RunRecord& r, bool with_timings = false) {
    json j{{"format", "countlab-run-record"},
           {"version", kRecordVersion},
           {"config", r.config},
           {"config_hash", r.config_hash},
           {"datasets", r.datasets},
           {"split", provenance_to_json(r.split)},
           {"split_sizes", r.split_sizes},
           {"val_test_label_coefficient", r.val_test_label_coefficient},
           {"model", model_config_to_json(r.model)},
           {"history", history_to_json(r.history)},
           {"selected_epoch", r.history.best_epoch},
           {"checkpoint_hash", r.checkpoint_hash},
           {"validation", eval_report_to_json(r.validation)},
           {"test", eval_report_to_json(r.test)},
           {"grounding", r.grounding ? grounding_to_json(*r.grounding) : json(nullptr)},
           {"random_baselines",
            {{"train_expected", r.random.train_expected},
             {"train_sampled", r.random.train_sampled},
             {"test_expected", r.random.test_expected},
             {"test_sampled", r.random.test_sampled}}}};
    if (with_timings) j["timings"] = r.timings;
    return j;
}

inline RunRecord record_from_json(const json& j) {
    if (j.at("format") != "countlab-run-record" || j.at("version") != kRecordVersion)
        throw std::invalid_argument("run record: unknown format or version");
    RunRecord r;
    r.config = j.at("config");
    r.config_hash = j.at("config_hash");
    r.datasets = j.at("datasets");
    r.split = provenance_from_json(j.at("split"));
    r.split_sizes = j.at("split_sizes");
    r.val_test_label_coefficient = j.at("val_test_label_coefficient");
    r.model = model_config_from_json(j.at("model"));
    r.history = history_from_json(j.at("history"));
    r.checkpoint_hash = j.at("checkpoint_hash");
    r.validation = eval_report_from_json(j.at("validation"));
    r.test = eval_report_from_json(j.at("test"));
    if (!j.at("grounding").is_null()) r.grounding = grounding_from_json(j.at("grounding"));
    const auto& rb = j.at("random_baselines");
    r.random = {rb.at("train_expected"), rb.at("train_sampled"), rb.at("test_expected"), rb.at("test_sampled")};
    if (j.contains("timings")) r.timings = j.at("timings").get<std::map<std::string, double>>();
    return r;
}

inline std::string canonical_record(const RunRecord& r) { return record_to_json(r).dump(); }

/// Re-runs the experiment described by a record's own config echo.
inline RunRecord replay_record(const json& record, Workspace& ws) {
    return run_experiment(config_from_json(record.at("config")), ws);
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepRow {
    std::string strategy;
    double p = 0.0;
    std::string variant;
    std::uint64_t seed = 0;
    std::string config_hash;
    bool ok = false;
    std::string error;
    double test_accuracy = 0.0;
    double test_rmse = 0.0;
    double val_accuracy = 0.0;
    std::optional<double> adjacent_gap;
};

struct SweepTable {
    std::vector<SweepRow> rows;
    std::size_t computed = 0;  // cells run in this call, rest came from the cache
};

/// Per-cell cache: in memory and, when a directory is given, one JSON file
/// per config hash.
class CellCache {
public:
    CellCache(Workspace& ws, std::string dir = {}) : ws_(ws), dir_(std::move(dir)) {
        if (!dir_.empty()) std::filesystem::create_directories(dir_);
    }

    std::optional<json> find(const std::string& hash) {
        auto& mem = ws_.record_cache();
        if (const auto it = mem.find(hash); it != mem.end()) return it->second;
        if (dir_.empty()) return std::nullopt;
        std::ifstream in(path(hash));
        if (!in) return std::nullopt;
        try {
            json j = json::parse(in);
            mem[hash] = j;
            return j;
        } catch (const json::exception&) {
            return std::nullopt;  // truncated by an interrupted write: recompute
        }
    }

    void store(const std::string& hash, const json& record) {
        ws_.record_cache()[hash] = record;
        if (dir_.empty()) return;
        const std::string tmp = path(hash) + ".tmp";
        {
            std::ofstream out(tmp);
            out << record.dump();
            if (!out) throw std::runtime_error("cell cache: cannot write " + tmp);
        }
        std::filesystem::rename(tmp, path(hash));
    }

private:
    std::string path(const std::string& hash) const { return dir_ + "/" + hash + ".json"; }
    Workspace& ws_;
    std::string dir_;
};

/// Cached run_experiment; the record is returned in canonical JSON form.
inline json cached_run(const ExperimentConfig& cell, CellCache& cache, Workspace& ws, bool* computed = nullptr) {
    const std::string hash = config_hash(cell);
    if (auto hit = cache.find(hash)) {
        if (computed) *computed = false;
        return *hit;
    }
    json record = record_to_json(run_experiment(cell, ws));
    cache.store(hash, record);
    if (computed) *computed = true;
    return record;
}

inline ExperimentConfig sweep_cell(const ExperimentConfig& base, double p, HeadKind head, std::uint64_t seed) {
    ExperimentConfig c = base;
    c.strategy.p = p;
    c.model.head = head;
    c.seed = seed;
    return c;
}

/// One run per (p, variant, seed). Failed cells are marked, the sweep goes on.
inline SweepTable sweep_p(const ExperimentConfig& base, const std::vector<double>& ps, const std::vector<HeadKind>& heads,
                          const std::vector<std::uint64_t>& seeds, CellCache& cache, Workspace& ws) {
    base.validate();
    for (double p : ps)
        if (!(p >= 0.0 && p <= 100.0)) throw ConfigError("sweep: p values must lie in [0, 100]");
    SweepTable table;
    for (double p : ps)
        for (HeadKind head : heads)
            for (std::uint64_t seed : seeds) {
                const ExperimentConfig cell = sweep_cell(base, p, head, seed);
                SweepRow row;
                row.strategy = strategy_name(base.strategy.kind);
                row.p = p;
                row.variant = head_name(head);
                row.seed = seed;
                row.config_hash = config_hash(cell);
                try {
                    bool computed = false;
                    const json r = cached_run(cell, cache, ws, &computed);
                    table.computed += computed;
                    row.ok = true;
                    row.test_accuracy = r.at("test").at("accuracy");
                    row.test_rmse = r.at("test").at("rmse");
                    row.val_accuracy = r.at("validation").at("accuracy");
                    row.adjacent_gap = optional_from_json(r.at("test").at("adjacent_gap"));
                } catch (const std::exception& e) {
                    row.error = e.what();
                }
                table.rows.push_back(std::move(row));
            }
    return table;
}

/// Median (over seeds) of a row field for one (p, variant) cell group.
inline std::optional<double> sweep_median(const SweepTable& t, double p, const std::string& variant,
                                          const std::function<std::optional<double>(const SweepRow&)>& field) {
    std::vector<double> v;
    for (const auto& r : t.rows)
        if (r.ok && r.p == p && r.variant == variant)
            if (auto x = field(r)) v.push_back(*x);
    if (v.empty()) return std::nullopt;
    return seed_spread(v).median;
}

inline std::string sweep_csv(const SweepTable& t) {
    std::ostringstream out;
    out.precision(17);
    out << "strategy,p,variant,seed,status,test_accuracy,test_rmse,val_accuracy,adjacent_gap,config_hash\n";
    for (const auto& r : t.rows) {
        out << r.strategy << ',' << r.p << ',' << r.variant << ',' << r.seed << ',' << (r.ok ? "ok" : "failed") << ',';
        if (r.ok)
            out << r.test_accuracy << ',' << r.test_rmse << ',' << r.val_accuracy << ','
                << (r.adjacent_gap ? std::to_string(*r.adjacent_gap) : "");
        else
            out << ",,,";
        out << ',' << r.config_hash << '\n';
    }
    return out.str();
}

inline json sweep_to_json(const SweepTable& t) {
    json rows = json::array();
    for (const auto& r : t.rows) {
        json j{{"strategy", r.strategy}, {"p", r.p},   {"variant", r.variant}, {"seed", r.seed},
               {"config_hash", r.config_hash}, {"ok", r.ok}};
        if (r.ok) {
            j["test_accuracy"] = r.test_accuracy;
            j["test_rmse"] = r.test_rmse;
            j["val_accuracy"] = r.val_accuracy;
            j["adjacent_gap"] = optional_to_json(r.adjacent_gap);
        } else {
            j["error"] = r.error;
        }
        rows.push_back(std::move(j));
    }
    return json{{"rows", rows}};
}

// ---------------------------------------------------------------------------
// Grounding study

struct GroundingRow {
    double lambda = 0.0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double accuracy = 0.0;
    std::optional<double> ground_p;
    std::optional<double> ap;  // mean over question classes
    std::optional<double> ap_pooled;
    double mean_entropy = 0.0;  // validation, selected epoch
};

struct GroundingStudy {
    std::vector<GroundingRow> rows;
    double max_accuracy_gap = 0.0;
};

/// Trains λ = 0 and λ = 1 on the unmodified split for every seed.
inline GroundingStudy grounding_study(const ExperimentConfig& base, CellCache& cache, Workspace& ws) {
    if (base.grounding_size == 0) throw ConfigError("grounding study: data.grounding_size must be > 0");
    GroundingStudy study;
    study.max_accuracy_gap = base.max_accuracy_gap;
    for (double lambda : {0.0, 1.0})
        for (std::uint64_t seed : base.seeds) {
            ExperimentConfig c = sweep_cell(base, 0.0, HeadKind::Regression, seed);
            c.model.entropy_weight = lambda;
            GroundingRow row;
            row.lambda = lambda;
            row.seed = seed;
            try {
                const RunRecord r = record_from_json(cached_run(c, cache, ws));
                row.ok = true;
                row.accuracy = r.test.accuracy;
                row.ground_p = r.grounding->ground_p;
                row.ap = r.grounding->ap_mean_per_class;
                row.ap_pooled = r.grounding->ap_pooled;
                const auto& sel = r.history.epochs.at(static_cast<std::size_t>(r.history.best_epoch));
                row.mean_entropy = sel.val_mean_entropy;
            } catch (const std::exception& e) {
                row.error = e.what();
            }
            study.rows.push_back(std::move(row));
        }
    return study;
}

inline std::string grounding_csv(const GroundingStudy& s) {
    std::ostringstream out;
    out.precision(17);
    auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string(); };
    out << "lambda,seed,status,accuracy,ground_p,ap,ap_pooled,val_mean_entropy\n";
    for (const auto& r : s.rows)
        out << r.lambda << ',' << r.seed << ',' << (r.ok ? "ok" : "failed") << ',' << r.accuracy << ','
            << opt(r.ground_p) << ',' << opt(r.ap) << ',' << opt(r.ap_pooled) << ',' << r.mean_entropy << '\n';
    return out.str();
}

inline json grounding_study_to_json(const GroundingStudy& s) {
    json rows = json::array();
    for (const auto& r : s.rows)
        rows.push_back(json{{"lambda", r.lambda},
                            {"seed", r.seed},
                            {"ok", r.ok},
                            {"error", r.error},
                            {"accuracy", r.accuracy},
                            {"ground_p", optional_to_json(r.ground_p)},
                            {"ap", optional_to_json(r.ap)},
                            {"ap_pooled", optional_to_json(r.ap_pooled)},
                            {"val_mean_entropy", r.mean_entropy}});
    return json{{"rows", rows}, {"max_accuracy_gap", s.max_accuracy_gap}};
}

// ---------------------------------------------------------------------------
// Report files

/// Environment and seed manifest written next to every report.
inline json environment_manifest(const json& extra = json::object()) {
    json m{{"compiler",
#if defined(__clang__)
            std::string("clang ") + __clang_version__
#elif defined(__GNUC__)
            std::string("gcc ") + __VERSION__
#else
            "unknown"
#endif
           },
           {"cplusplus", __cplusplus},
#ifdef NDEBUG
           {"assertions", false},
#else
           {"assertions", true},
#endif
           {"record_version", kRecordVersion}};
    for (const auto& [k, v] : extra.items()) m[k] = v;
    return m;
}

/// Writes `files` (name → content) into `dir` atomically: everything goes to
/// a sibling temp directory first, which then replaces `dir`.
inline void write_report_files(const std::filesystem::path& dir, const std::map<std::string, std::string>& files) {
    namespace fs = std::filesystem;
    const fs::path target = fs::absolute(dir);
    const fs::path parent = target.parent_path();
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec || !fs::is_directory(parent)) throw std::runtime_error("report: cannot create " + parent.string());
    const fs::path tmp = parent / (target.filename().string() + ".tmp");
    fs::remove_all(tmp, ec);
    if (!fs::create_directory(tmp, ec) || ec) throw std::runtime_error("report: " + parent.string() + " is not writable");
    try {
        for (const auto& [name, content] : files) {
            std::ofstream out(tmp / name, std::ios::binary);
            out << content;
            out.close();
            if (!out) throw std::runtime_error("report: failed writing " + name);
        }
    } catch (...) {
        fs::remove_all(tmp, ec);
        throw;
    }
    const fs::path old = parent / (target.filename().string() + ".old");
    fs::remove_all(old, ec);
    if (fs::exists(target)) fs::rename(target, old);
    fs::rename(tmp, target);
    fs::remove_all(old, ec);
}

inline std::string history_csv(const RunHistory& h) {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,learning_rate,mse,entropy,cross_entropy,total,val_accuracy,val_mean_entropy\n";
    for (const auto& e : h.epochs)
        out << e.epoch << ',' << e.learning_rate << ',' << e.mse << ',' << e.entropy << ',' << e.cross_entropy << ','
            << e.total << ',' << e.val_accuracy << ',' << e.val_mean_entropy << '\n';
    return out.str();
}

inline void emit_report(const RunRecord& r, const std::filesystem::path& dir) {
    write_report_files(dir, {{"record.json", record_to_json(r, true).dump(2) + "\n"},
                             {"per_label.csv", per_label_csv(r.test.per_label)},
                             {"history.csv", history_csv(r.history)},
                             {"manifest.json", environment_manifest(json{{"config_hash", r.config_hash},
                                                                         {"train_seed", r.config.at("train.seed")},
                                                                         {"datasets", r.datasets}})
                                                       .dump(2) +
                                                   "\n"}});
}

inline RunRecord load_report(const std::filesystem::path& dir) {
    std::ifstream in(dir / "record.json");
    if (!in) throw std::runtime_error("report: cannot read " + (dir / "record.json").string());
    return record_from_json(json::parse(in));
}

}  // namespace countlab
