#pragma once

// Counting triplets, label-histogram-targeted dataset generation and the
// JSON-lines dataset file (header line + one triplet per line).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "countlab/hash.hpp"
#include "countlab/scene.hpp"

namespace countlab {

using json = nlohmann::json;

struct CountingTriplet {
    std::uint64_t id = 0;
    std::uint64_t image_id = 0;
    std::vector<RegionProposal> regions;
    Question question;
    int count = 0;
    std::vector<Box> gt_boxes;         // matching instances; evaluation only
    std::vector<Instance> instances;   // full scene annotation; evaluation only
    friend bool operator==(const CountingTriplet&, const CountingTriplet&) = default;
};

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetHeader {
    int format_version = kDatasetFormatVersion;
    SceneSpec spec;
    std::string spec_hash;
    std::uint64_t seed = 0;
    std::uint64_t id_base = 0;
    std::uint64_t count = 0;
    std::vector<double> label_histogram;
};

struct Dataset {
    DatasetHeader header;
    std::vector<CountingTriplet> triplets;

    const CountingTriplet& by_id(std::uint64_t id) const {
        const auto it = index().find(id);
        if (it == index().end()) throw std::out_of_range("dataset: unknown triplet id " + std::to_string(id));
        return triplets[it->second];
    }

    bool contains(std::uint64_t id) const { return index().contains(id); }

    void reindex() const {
        index_.clear();
        for (std::size_t i = 0; i < triplets.size(); ++i) index_.emplace(triplets[i].id, i);
    }

private:
    const std::unordered_map<std::uint64_t, std::size_t>& index() const {
        if (index_.size() != triplets.size()) reindex();
        return index_;
    }
    mutable std::unordered_map<std::uint64_t, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// JSON encoding

inline json box_to_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }
inline Box box_from_json(const json& j) {
    return Box{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

inline json spec_to_json(const SceneSpec& s) {
    return json{{"num_classes", s.num_classes},
                {"num_attributes", s.num_attributes},
                {"max_instances", s.max_instances},
                {"max_other_instances", s.max_other_instances},
                {"min_size", s.min_size},
                {"max_size", s.max_size},
                {"min_duplicates", s.min_duplicates},
                {"max_duplicates", s.max_duplicates},
                {"min_distractors", s.min_distractors},
                {"max_distractors", s.max_distractors},
                {"max_regions", s.max_regions},
                {"feature_dim", s.feature_dim},
                {"feature_noise", s.feature_noise},
                {"attribute_weight", s.attribute_weight},
                {"coverage_iou", s.coverage_iou},
                {"primary_min_iou", s.primary_min_iou},
                {"duplicate_max_iou", s.duplicate_max_iou},
                {"prototype_seed", s.prototype_seed},
                {"max_label", s.max_label},
                {"max_questions_per_image", s.max_questions_per_image},
                {"mode_weights", s.mode_weights}};
}

inline SceneSpec spec_from_json(const json& j) {
    SceneSpec s;
    s.num_classes = j.at("num_classes");
    s.num_attributes = j.at("num_attributes");
    s.max_instances = j.at("max_instances");
    s.max_other_instances = j.at("max_other_instances");
    s.min_size = j.at("min_size");
    s.max_size = j.at("max_size");
    s.min_duplicates = j.at("min_duplicates");
    s.max_duplicates = j.at("max_duplicates");
    s.min_distractors = j.at("min_distractors");
    s.max_distractors = j.at("max_distractors");
    s.max_regions = j.at("max_regions");
    s.feature_dim = j.at("feature_dim");
    s.feature_noise = j.at("feature_noise");
    s.attribute_weight = j.at("attribute_weight");
    s.coverage_iou = j.at("coverage_iou");
    s.primary_min_iou = j.at("primary_min_iou");
    s.duplicate_max_iou = j.at("duplicate_max_iou");
    s.prototype_seed = j.at("prototype_seed");
    s.max_label = j.at("max_label");
    s.max_questions_per_image = j.at("max_questions_per_image");
    s.mode_weights = j.at("mode_weights").get<std::vector<double>>();
    return s;
}

inline std::string spec_hash(const SceneSpec& spec) { return content_hash(spec_to_json(spec).dump()); }

inline json question_to_json(const Question& q) {
    return json{{"mode", mode_name(q.mode)},
                {"class", q.class_id},
                {"attribute", q.attribute ? json(*q.attribute) : json(nullptr)},
                {"predicate", q.predicate ? json(half_name(*q.predicate)) : json(nullptr)},
                {"text", q.text}};
}

inline Question question_from_json(const json& j) {
    Question q;
    q.mode = parse_mode(j.at("mode").get<std::string>());
    q.class_id = j.at("class");
    if (!j.at("attribute").is_null()) q.attribute = j.at("attribute").get<int>();
    if (!j.at("predicate").is_null()) q.predicate = parse_half(j.at("predicate").get<std::string>());
    q.text = j.at("text").get<std::string>();
    return q;
}

inline json triplet_to_json(const CountingTriplet& t) {
    json regions = json::array();
    for (const auto& r : t.regions)
        regions.push_back(json{{"box", box_to_json(r.box)},
                               {"feature", r.feature},
                               {"source", r.source},
                               {"source_class", r.source_class}});
    json gt = json::array();
    for (const auto& b : t.gt_boxes) gt.push_back(box_to_json(b));
    json inst = json::array();
    for (const auto& i : t.instances)
        inst.push_back(json{{"class", i.class_id}, {"attribute", i.attribute_id}, {"box", box_to_json(i.box)}});
    return json{{"id", t.id},       {"image_id", t.image_id},
                {"regions", regions}, {"question", question_to_json(t.question)},
                {"count", t.count},  {"gt_boxes", gt},
                {"instances", inst}};
}

inline CountingTriplet triplet_from_json(const json& j) {
    CountingTriplet t;
    t.id = j.at("id");
    t.image_id = j.at("image_id");
    for (const auto& r : j.at("regions"))
        t.regions.push_back(RegionProposal{box_from_json(r.at("box")), r.at("feature").get<std::vector<double>>(),
                                           r.at("source").get<int>(), r.at("source_class").get<int>()});
    t.question = question_from_json(j.at("question"));
    t.count = j.at("count");
    for (const auto& b : j.at("gt_boxes")) t.gt_boxes.push_back(box_from_json(b));
    for (const auto& i : j.at("instances"))
        t.instances.push_back(Instance{i.at("class").get<int>(), i.at("attribute").get<int>(), box_from_json(i.at("box"))});
    return t;
}

inline json header_to_json(const DatasetHeader& h) {
    return json{{"format_version", h.format_version},
                {"spec", spec_to_json(h.spec)},
                {"spec_hash", h.spec_hash},
                {"seed", h.seed},
                {"id_base", h.id_base},
                {"count", h.count},
                {"label_histogram", h.label_histogram}};
}

inline DatasetHeader header_from_json(const json& j) {
    DatasetHeader h;
    h.format_version = j.at("format_version");
    if (h.format_version != kDatasetFormatVersion)
        throw std::runtime_error("dataset: unsupported format version " + std::to_string(h.format_version));
    h.spec = spec_from_json(j.at("spec"));
    h.spec_hash = j.at("spec_hash").get<std::string>();
    h.seed = j.at("seed");
    h.id_base = j.at("id_base");
    h.count = j.at("count");
    h.label_histogram = j.at("label_histogram").get<std::vector<double>>();
    return h;
}

inline void write_dataset(std::ostream& out, const Dataset& ds) {
    out << json{{"header", header_to_json(ds.header)}}.dump() << '\n';
    for (const auto& t : ds.triplets) out << triplet_to_json(t).dump() << '\n';
}

inline std::string serialize_dataset(const Dataset& ds) {
    std::ostringstream out;
    write_dataset(out, ds);
    return out.str();
}

inline Dataset read_dataset(std::istream& in) {
    Dataset ds;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("dataset: missing header line");
    ds.header = header_from_json(json::parse(line).at("header"));
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ds.triplets.push_back(triplet_from_json(json::parse(line)));
    }
    if (ds.triplets.size() != ds.header.count)
        throw std::runtime_error("dataset: header announces " + std::to_string(ds.header.count) + " triplets, file has " +
                                 std::to_string(ds.triplets.size()));
    return ds;
}

inline Dataset parse_dataset(const std::string& text) {
    std::istringstream in(text);
    return read_dataset(in);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset file " + path);
    return read_dataset(in);
}

/// FNV-1a over the serialized file bytes, computed line by line.
inline std::string dataset_hash(const Dataset& ds) {
    std::uint64_t h = fnv1a64(json{{"header", header_to_json(ds.header)}}.dump() + "\n");
    for (const auto& t : ds.triplets) h = fnv1a64(triplet_to_json(t).dump() + "\n", h);
    return hex64(h);
}

// ---------------------------------------------------------------------------
// Validation

class TripletInvalid : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Checks the triplet invariants: label recount, GT consistency, coverage,
/// boxes on canvas, finite features, well-formed question.
inline void validate_triplet(const CountingTriplet& t, const SceneSpec& spec) {
    auto fail = [&](const std::string& m) {
        throw TripletInvalid("triplet " + std::to_string(t.id) + ": " + m);
    };
    if (!t.question.well_formed()) fail("question mode and optional fields disagree");
    if (t.count < 0) fail("negative count");
    std::vector<Box> matching;
    for (const auto& inst : t.instances) {
        if (!inst.box.valid() || !inst.box.inside_canvas()) fail("instance box off canvas or degenerate");
        if (t.question.matches(inst)) matching.push_back(inst.box);
    }
    if (static_cast<int>(matching.size()) != t.count) fail("recount disagrees with stored label");
    if (matching != t.gt_boxes) fail("gt boxes differ from matching instances");
    for (const auto& r : t.regions) {
        if (!r.box.inside_canvas()) fail("region box off canvas");
        if (r.feature.size() != static_cast<std::size_t>(spec.feature_dim)) fail("feature dimension mismatch");
        for (double v : r.feature)
            if (!std::isfinite(v)) fail("non-finite feature");
    }
    for (const auto& g : t.gt_boxes) {
        const bool covered = std::any_of(t.regions.begin(), t.regions.end(),
                                         [&](const RegionProposal& r) { return iou(r.box, g) >= spec.coverage_iou; });
        if (!covered) fail("ground-truth instance without a covering proposal");
    }
}

// ---------------------------------------------------------------------------
// Generation

/// Integer quotas per label, each within 1 of n * weight (largest remainder).
inline std::vector<std::uint64_t> label_quotas(const std::vector<double>& histogram, std::uint64_t n) {
    double total = 0.0;
    for (double w : histogram) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("label histogram: negative or non-finite weight");
        total += w;
    }
    if (!(total > 0.0)) throw std::invalid_argument("label histogram: zero total mass");
    std::vector<std::uint64_t> quota(histogram.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::uint64_t assigned = 0;
    for (std::size_t k = 0; k < histogram.size(); ++k) {
        const double exact = static_cast<double>(n) * histogram[k] / total;
        quota[k] = static_cast<std::uint64_t>(std::floor(exact));
        assigned += quota[k];
        remainders.emplace_back(exact - std::floor(exact), k);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++quota[remainders[i % remainders.size()].second];
    return quota;
}

namespace detail {

/// A scene whose answer to `q` is exactly `count`, plus non-matching
/// instances (same class with a different attribute/half when the question
/// is complex, other classes otherwise).
inline Scene targeted_scene(const SceneSpec& spec, const Question& q, int count, Rng& rng) {
    Scene scene;
    std::vector<Box> taken;
    auto add = [&](int cls, int attr, std::optional<HalfPlane> half) {
        const Box b = place_box(spec, rng, taken, half);
        taken.push_back(b);
        scene.instances.push_back(Instance{cls, attr, b});
    };
    for (int i = 0; i < count; ++i)
        add(q.class_id, q.attribute ? *q.attribute : rng.between(0, spec.num_attributes - 1), q.predicate);

    int budget = std::min(spec.max_other_instances, spec.max_instances - count);
    if (budget > 0 && q.mode != QuestionMode::Simple) {
        const int same_class = rng.between(0, std::min(budget, 2));
        for (int i = 0; i < same_class; ++i) {
            if (q.attribute) {
                if (spec.num_attributes < 2) break;
                int attr = rng.between(0, spec.num_attributes - 2);
                if (attr >= *q.attribute) ++attr;
                add(q.class_id, attr, std::nullopt);
            } else {
                add(q.class_id, rng.between(0, spec.num_attributes - 1), opposite(*q.predicate));
            }
        }
        budget -= same_class;
    }
    const int others = budget > 0 ? rng.between(0, budget) : 0;
    for (int i = 0; i < others; ++i) {
        int cls = rng.between(0, spec.num_classes - 2);
        if (cls >= q.class_id) ++cls;
        add(cls, rng.between(0, spec.num_attributes - 1), std::nullopt);
    }
    rng.shuffle(scene.instances);
    return scene;
}

}  // namespace detail

/// Generates `n` triplets whose label histogram equals the largest-remainder
/// quotas of `label_histogram` (index = count label). Several questions may
/// share an image. Ids are `id_base + k` for triplets and images alike.
inline Dataset generate_dataset(const SceneSpec& spec, std::uint64_t n, std::uint64_t seed,
                                const std::vector<double>& label_histogram, std::uint64_t id_base = 0) {
    spec.validate();
    for (std::size_t k = 0; k < label_histogram.size(); ++k)
        if (label_histogram[k] > 0.0 && static_cast<int>(k) > spec.max_label)
            throw std::invalid_argument("generate_dataset: label " + std::to_string(k) +
                                        " is unreachable (max_label " + std::to_string(spec.max_label) + ")");
    Dataset ds;
    ds.header.spec = spec;
    ds.header.spec_hash = spec_hash(spec);
    ds.header.seed = seed;
    ds.header.id_base = id_base;
    ds.header.count = n;
    ds.header.label_histogram = label_histogram;
    if (n == 0) return ds;

    std::vector<std::uint64_t> quota = label_quotas(label_histogram, n);
    std::uint64_t produced = 0;
    for (std::uint64_t image = 0; produced < n; ++image) {
        Rng rng(derive_seed(seed, image));
        std::vector<double> weights(quota.begin(), quota.end());
        const int label = static_cast<int>(rng.categorical(weights));

        Question q;
        q.mode = static_cast<QuestionMode>(rng.categorical(spec.mode_weights));
        q.class_id = rng.between(0, spec.num_classes - 1);
        if (q.mode == QuestionMode::ComplexAttribute) q.attribute = rng.between(0, spec.num_attributes - 1);
        if (q.mode == QuestionMode::ComplexPosition) q.predicate = static_cast<HalfPlane>(rng.below(kHalfPlaneCount));

        const Scene scene = detail::targeted_scene(spec, q, label, rng);
        const std::vector<RegionProposal> regions = propose_regions(scene, spec, rng.next_u64());

        std::vector<QuestionAnswer> asked{answer(scene, q)};
        for (int extra = 1; extra < spec.max_questions_per_image; ++extra) {
            const auto mode = static_cast<QuestionMode>(rng.categorical(spec.mode_weights));
            const bool zero = mode == QuestionMode::Simple && rng.uniform() < 0.2;
            auto qa = make_question(scene, spec, mode, rng.next_u64(), zero);
            if (!qa) continue;
            const bool repeat = std::any_of(asked.begin(), asked.end(),
                                            [&](const QuestionAnswer& a) { return a.question == qa->question; });
            if (!repeat) asked.push_back(std::move(*qa));
        }

        for (auto& qa : asked) {
            if (produced >= n) break;
            if (qa.count >= static_cast<int>(quota.size()) || quota[qa.count] == 0) continue;
            --quota[qa.count];
            CountingTriplet t;
            t.id = id_base + produced;
            t.image_id = id_base + image;
            t.regions = regions;
            t.question = std::move(qa.question);
            t.count = qa.count;
            t.gt_boxes = std::move(qa.gt_boxes);
            t.instances = scene.instances;
            ds.triplets.push_back(std::move(t));
            ++produced;
        }
    }
    return ds;
}

/// Default desk-scale label histogram over 0..12: skewed toward small counts.
inline std::vector<double> default_label_histogram() {
    return {0.12, 0.16, 0.14, 0.12, 0.10, 0.08, 0.07, 0.06, 0.05, 0.04, 0.03, 0.02, 0.01};
}

}  // namespace countlab
