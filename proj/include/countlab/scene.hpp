#pragma once

// Synthetic counting scenes: class/attribute-tagged instances on the unit
// canvas, overlapping region proposals with prototype-plus-noise features,
// and templated "how many" questions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "countlab/geometry.hpp"
#include "countlab/random.hpp"

namespace countlab {

enum class QuestionMode { Simple, ComplexAttribute, ComplexPosition };
enum class HalfPlane { Left, Right, Top, Bottom };

inline constexpr int kQuestionModeCount = 3;
inline constexpr int kHalfPlaneCount = 4;

inline const char* mode_name(QuestionMode mode) {
    switch (mode) {
        case QuestionMode::Simple: return "simple";
        case QuestionMode::ComplexAttribute: return "complex-attribute";
        case QuestionMode::ComplexPosition: return "complex-position";
    }
    return "?";
}

inline QuestionMode parse_mode(const std::string& s) {
    if (s == "simple") return QuestionMode::Simple;
    if (s == "complex-attribute") return QuestionMode::ComplexAttribute;
    if (s == "complex-position") return QuestionMode::ComplexPosition;
    throw std::invalid_argument("unknown question mode '" + s + "'");
}

inline const char* half_name(HalfPlane h) {
    switch (h) {
        case HalfPlane::Left: return "left-half";
        case HalfPlane::Right: return "right-half";
        case HalfPlane::Top: return "top-half";
        case HalfPlane::Bottom: return "bottom-half";
    }
    return "?";
}

inline HalfPlane parse_half(const std::string& s) {
    for (int i = 0; i < kHalfPlaneCount; ++i)
        if (s == half_name(static_cast<HalfPlane>(i))) return static_cast<HalfPlane>(i);
    throw std::invalid_argument("unknown half-plane '" + s + "'");
}

/// Box centers on the dividing line count as right/bottom.
inline bool in_half(const Box& box, HalfPlane half) {
    switch (half) {
        case HalfPlane::Left: return box.center_x() < 0.5;
        case HalfPlane::Right: return box.center_x() >= 0.5;
        case HalfPlane::Top: return box.center_y() < 0.5;
        case HalfPlane::Bottom: return box.center_y() >= 0.5;
    }
    return false;
}

inline HalfPlane opposite(HalfPlane h) {
    switch (h) {
        case HalfPlane::Left: return HalfPlane::Right;
        case HalfPlane::Right: return HalfPlane::Left;
        case HalfPlane::Top: return HalfPlane::Bottom;
        case HalfPlane::Bottom: return HalfPlane::Top;
    }
    return h;
}

struct SceneSpec {
    int num_classes = 6;
    int num_attributes = 3;
    int max_instances = 14;
    int max_other_instances = 6;  // non-matching instances in label-targeted scenes
    double min_size = 0.06;  // box side, fraction of canvas
    double max_size = 0.20;
    int min_duplicates = 1;  // proposals per instance
    int max_duplicates = 2;
    int min_distractors = 0;
    int max_distractors = 3;
    int max_regions = 24;
    int feature_dim = 16;
    double feature_noise = 0.1;
    double attribute_weight = 0.5;
    double coverage_iou = 0.5;     // minimum IoU of any duplicate with its instance
    double primary_min_iou = 0.9;  // the best-localized proposal of each instance
    double duplicate_max_iou = 0.85;
    std::uint64_t prototype_seed = 1234;
    int max_label = 12;
    int max_questions_per_image = 3;
    std::vector<double> mode_weights{0.5, 0.25, 0.25};

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("scene spec: " + m); };
        if (num_classes < 2) fail("need at least 2 classes");
        if (num_attributes < 1) fail("need at least 1 attribute");
        if (max_instances < 0) fail("max_instances must be non-negative");
        if (max_other_instances < 0) fail("max_other_instances must be non-negative");
        if (!(min_size > 0.0 && min_size <= max_size && max_size <= 1.0)) fail("size range must lie within (0,1]");
        if (min_duplicates < 1 || max_duplicates < min_duplicates) fail("duplicates range must be 1 <= min <= max");
        if (min_distractors < 0 || max_distractors < min_distractors) fail("bad distractor range");
        if (max_regions < max_instances) fail("max_regions must be >= max_instances");
        if (feature_dim < num_classes) fail("feature_dim must be >= num_classes");
        if (!(feature_noise >= 0.0)) fail("feature_noise must be non-negative");
        if (!(coverage_iou > 0.0 && coverage_iou <= duplicate_max_iou && duplicate_max_iou < primary_min_iou &&
              primary_min_iou <= 1.0))
            fail("IoU bands must satisfy 0 < coverage <= duplicate_max < primary_min <= 1");
        if (max_label < 0 || max_label > max_instances) fail("max_label must be within [0, max_instances]");
        if (max_questions_per_image < 1) fail("max_questions_per_image must be >= 1");
        if (mode_weights.size() != kQuestionModeCount) fail("mode_weights needs 3 entries");
        double total = 0.0;
        for (double w : mode_weights) {
            if (!(w >= 0.0)) fail("mode weights must be non-negative");
            total += w;
        }
        if (!(total > 0.0)) fail("mode weights sum to zero");
    }
};

struct Instance {
    int class_id = 0;
    int attribute_id = 0;
    Box box;
    friend bool operator==(const Instance&, const Instance&) = default;
};

struct Scene {
    std::vector<Instance> instances;
    friend bool operator==(const Scene&, const Scene&) = default;
};

struct RegionProposal {
    Box box;
    std::vector<double> feature;
    int source = -1;        // instance index, -1 for a background distractor
    int source_class = -1;  // class of the source instance, -1 for background
    friend bool operator==(const RegionProposal&, const RegionProposal&) = default;
};

struct Question {
    QuestionMode mode = QuestionMode::Simple;
    int class_id = 0;
    std::optional<int> attribute;
    std::optional<HalfPlane> predicate;
    std::string text;

    bool matches(const Instance& inst) const {
        if (inst.class_id != class_id) return false;
        if (attribute && inst.attribute_id != *attribute) return false;
        if (predicate && !in_half(inst.box, *predicate)) return false;
        return true;
    }

    bool well_formed() const {
        return attribute.has_value() == (mode == QuestionMode::ComplexAttribute) &&
               predicate.has_value() == (mode == QuestionMode::ComplexPosition);
    }

    friend bool operator==(const Question&, const Question&) = default;
};

// ---------------------------------------------------------------------------
// Vocabulary

inline std::string class_name(int id) {
    static const char* names[] = {"cube",   "sphere", "cylinder", "cone",  "torus",
                                  "prism",  "ring",   "star",     "disk",  "pyramid"};
    return id >= 0 && id < 10 ? names[id] : "object" + std::to_string(id);
}

inline std::string attribute_name(int id) {
    static const char* names[] = {"red", "green", "blue", "yellow", "purple", "orange", "gray", "brown"};
    return id >= 0 && id < 8 ? names[id] : "shade" + std::to_string(id);
}

inline std::string predicate_phrase(HalfPlane h) {
    switch (h) {
        case HalfPlane::Left: return "on the left";
        case HalfPlane::Right: return "on the right";
        case HalfPlane::Top: return "at the top";
        case HalfPlane::Bottom: return "at the bottom";
    }
    return "";
}

inline std::string render_question(const Question& q) {
    std::string text = "how many ";
    if (q.attribute) text += attribute_name(*q.attribute) + " ";
    text += class_name(q.class_id) + "s";
    if (q.predicate) text += " are " + predicate_phrase(*q.predicate);
    return text + "?";
}

// ---------------------------------------------------------------------------
// Prototypes

struct Prototypes {
    std::vector<std::vector<double>> classes;
    std::vector<std::vector<double>> attributes;
    std::vector<double> background;
};

/// Seeded unit prototypes, Gram-Schmidt orthonormalized while the feature
/// dimension allows (class prototypes always fit since feature_dim >= classes).
inline Prototypes make_prototypes(const SceneSpec& spec) {
    Rng rng(derive_seed(spec.prototype_seed, 0x70726f74));
    const auto d = static_cast<std::size_t>(spec.feature_dim);
    std::vector<std::vector<double>> basis;
    auto draw = [&]() {
        for (int attempt = 0; attempt < 64; ++attempt) {
            std::vector<double> v(d);
            for (auto& x : v) x = rng.normal();
            if (basis.size() < d)
                for (const auto& b : basis) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < d; ++i) dot += v[i] * b[i];
                    for (std::size_t i = 0; i < d; ++i) v[i] -= dot * b[i];
                }
            double norm = 0.0;
            for (double x : v) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-6) continue;
            for (auto& x : v) x /= norm;
            basis.push_back(v);
            return v;
        }
        throw std::runtime_error("make_prototypes: could not draw a prototype");
    };
    Prototypes p;
    for (int c = 0; c < spec.num_classes; ++c) p.classes.push_back(draw());
    p.background = draw();
    for (int a = 0; a < spec.num_attributes; ++a) p.attributes.push_back(draw());
    return p;
}

// ---------------------------------------------------------------------------
// Scene sampling

namespace detail {

inline Box random_box(const SceneSpec& spec, Rng& rng, std::optional<HalfPlane> half = std::nullopt) {
    const double w = rng.uniform(spec.min_size, spec.max_size);
    const double h = rng.uniform(spec.min_size, spec.max_size);
    double cx_lo = w / 2, cx_hi = 1.0 - w / 2, cy_lo = h / 2, cy_hi = 1.0 - h / 2;
    if (half) {
        switch (*half) {
            case HalfPlane::Left: cx_hi = std::min(cx_hi, 0.5 - 1e-6); break;
            case HalfPlane::Right: cx_lo = std::max(cx_lo, 0.5); break;
            case HalfPlane::Top: cy_hi = std::min(cy_hi, 0.5 - 1e-6); break;
            case HalfPlane::Bottom: cy_lo = std::max(cy_lo, 0.5); break;
        }
    }
    const double cx = rng.uniform(cx_lo, cx_hi);
    const double cy = rng.uniform(cy_lo, cy_hi);
    return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

/// Places a box avoiding heavy overlap with `taken` when possible.
inline Box place_box(const SceneSpec& spec, Rng& rng, const std::vector<Box>& taken,
                     std::optional<HalfPlane> half = std::nullopt, double max_iou = 0.2) {
    Box best{};
    double best_overlap = 2.0;
    for (int attempt = 0; attempt < 40; ++attempt) {
        const Box b = random_box(spec, rng, half);
        double worst = 0.0;
        for (const Box& t : taken) worst = std::max(worst, iou(b, t));
        if (worst <= max_iou) return b;
        if (worst < best_overlap) {
            best_overlap = worst;
            best = b;
        }
    }
    return best;
}

inline Box clip_to_canvas(Box b) {
    b.x1 = std::clamp(b.x1, 0.0, 1.0);
    b.y1 = std::clamp(b.y1, 0.0, 1.0);
    b.x2 = std::clamp(b.x2, 0.0, 1.0);
    b.y2 = std::clamp(b.y2, 0.0, 1.0);
    return b;
}

/// A jittered copy of `src` whose IoU with it lies in [lo, hi].
inline Box jitter_box(const Box& src, double lo, double hi, Rng& rng) {
    const double w = src.width(), h = src.height();
    for (double spread = 0.4; spread > 0.005; spread *= 0.8) {
        for (int attempt = 0; attempt < 12; ++attempt) {
            const Box b = clip_to_canvas(Box{src.x1 + rng.uniform(-spread, spread) * w,
                                             src.y1 + rng.uniform(-spread, spread) * h,
                                             src.x2 + rng.uniform(-spread, spread) * w,
                                             src.y2 + rng.uniform(-spread, spread) * h});
            if (!b.valid()) continue;
            const double v = iou(b, src);
            if (v >= lo && v <= hi) return b;
        }
    }
    // Deterministic fallback: shrink around the center to the IoU midpoint.
    const double target = 0.5 * (lo + hi);
    const double s = std::sqrt(target);
    const double cx = src.center_x(), cy = src.center_y();
    return Box{cx - s * w / 2, cy - s * h / 2, cx + s * w / 2, cy + s * h / 2};
}

}  // namespace detail

/// Unconditional scene: instance count uniform on [0, max_instances], class
/// and attribute uniform per instance.
inline Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    Scene scene;
    const int n = rng.between(0, spec.max_instances);
    std::vector<Box> taken;
    for (int i = 0; i < n; ++i) {
        Instance inst;
        inst.class_id = rng.between(0, spec.num_classes - 1);
        inst.attribute_id = rng.between(0, spec.num_attributes - 1);
        inst.box = detail::place_box(spec, rng, taken);
        taken.push_back(inst.box);
        scene.instances.push_back(inst);
    }
    return scene;
}

/// Feature strength of a proposal as a function of its IoU with the source
/// instance: 1 for well-localized boxes, fading for loose duplicates.
inline double localization_quality(double overlap) { return std::clamp((overlap - 0.3) / 0.6, 0.0, 1.0); }

inline std::vector<RegionProposal> propose_regions(const Scene& scene, const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (static_cast<int>(scene.instances.size()) > spec.max_regions)
        throw std::invalid_argument("propose_regions: more instances than max_regions");
    Rng rng(seed);
    const Prototypes protos = make_prototypes(spec);
    const auto d = static_cast<std::size_t>(spec.feature_dim);

    const std::size_t n_inst = scene.instances.size();
    std::vector<int> dup(n_inst);
    for (auto& k : dup) k = rng.between(spec.min_duplicates, spec.max_duplicates);
    int distractors = rng.between(spec.min_distractors, spec.max_distractors);

    // Trim to the region budget: extra duplicates first (largest groups,
    // lowest index first), then distractors.
    auto total = [&]() {
        int t = distractors;
        for (int k : dup) t += k;
        return t;
    };
    while (total() > spec.max_regions) {
        auto it = std::max_element(dup.begin(), dup.end());
        if (it != dup.end() && *it > 1)
            --*it;
        else if (distractors > 0)
            --distractors;
        else
            break;
    }
    // Every triplet carries at least one region.
    if (n_inst == 0 && distractors == 0) distractors = 1;

    auto feature_for = [&](const std::vector<double>& base, double strength) {
        std::vector<double> f(d);
        for (std::size_t i = 0; i < d; ++i) f[i] = strength * base[i] + spec.feature_noise * rng.normal();
        return f;
    };

    std::vector<RegionProposal> out;
    std::vector<Box> taken;
    for (std::size_t i = 0; i < n_inst; ++i) {
        const Instance& inst = scene.instances[i];
        taken.push_back(inst.box);
        std::vector<double> base(d);
        for (std::size_t j = 0; j < d; ++j)
            base[j] = protos.classes[inst.class_id][j] + spec.attribute_weight * protos.attributes[inst.attribute_id][j];
        for (int k = 0; k < dup[i]; ++k) {
            const Box b = k == 0 ? detail::jitter_box(inst.box, spec.primary_min_iou, 1.0, rng)
                                 : detail::jitter_box(inst.box, spec.coverage_iou, spec.duplicate_max_iou, rng);
            out.push_back(RegionProposal{b, feature_for(base, localization_quality(iou(b, inst.box))),
                                         static_cast<int>(i), inst.class_id});
        }
    }
    for (int k = 0; k < distractors; ++k) {
        const Box b = detail::place_box(spec, rng, taken, std::nullopt, 0.05);
        out.push_back(RegionProposal{b, feature_for(protos.background, 1.0), -1, -1});
    }
    rng.shuffle(out);
    return out;
}

struct QuestionAnswer {
    Question question;
    int count = 0;
    std::vector<Box> gt_boxes;
};

inline QuestionAnswer answer(const Scene& scene, Question q) {
    q.text = render_question(q);
    QuestionAnswer qa{std::move(q), 0, {}};
    for (const Instance& inst : scene.instances)
        if (qa.question.matches(inst)) {
            ++qa.count;
            qa.gt_boxes.push_back(inst.box);
        }
    return qa;
}

/// Draws a question of `mode` about `scene`. With `zero_count`, a simple
/// question about a class absent from the scene. Returns nullopt when the
/// scene cannot support the request (caller resamples).
inline std::optional<QuestionAnswer> make_question(const Scene& scene, const SceneSpec& spec, QuestionMode mode,
                                                   std::uint64_t seed, bool zero_count = false) {
    Rng rng(seed);
    Question q;
    q.mode = mode;
    if (zero_count) {
        if (mode != QuestionMode::Simple) return std::nullopt;
        std::vector<int> absent;
        for (int c = 0; c < spec.num_classes; ++c)
            if (std::none_of(scene.instances.begin(), scene.instances.end(),
                             [c](const Instance& i) { return i.class_id == c; }))
                absent.push_back(c);
        if (absent.empty()) return std::nullopt;
        q.class_id = absent[rng.below(absent.size())];
        return answer(scene, q);
    }
    if (scene.instances.empty()) return std::nullopt;
    const Instance& anchor = scene.instances[rng.below(scene.instances.size())];
    q.class_id = anchor.class_id;
    if (mode == QuestionMode::ComplexAttribute) q.attribute = anchor.attribute_id;
    if (mode == QuestionMode::ComplexPosition) q.predicate = static_cast<HalfPlane>(rng.below(kHalfPlaneCount));
    return answer(scene, q);
}

}  // namespace countlab
