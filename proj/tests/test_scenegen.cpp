#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "countlab/dataset.hpp"

using namespace countlab;

namespace {

// Written independently of geometry.hpp.
double iou_oracle(const Box& a, const Box& b) {
    const double w = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double h = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = w * h;
    const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// Independent predicate check, from the instance fields alone.
bool satisfies(const Question& q, const Instance& inst) {
    if (inst.class_id != q.class_id) return false;
    if (q.mode == QuestionMode::ComplexAttribute) return inst.attribute_id == *q.attribute;
    if (q.mode == QuestionMode::ComplexPosition) {
        const double cx = 0.5 * (inst.box.x1 + inst.box.x2), cy = 0.5 * (inst.box.y1 + inst.box.y2);
        switch (*q.predicate) {
            case HalfPlane::Left: return cx < 0.5;
            case HalfPlane::Right: return cx >= 0.5;
            case HalfPlane::Top: return cy < 0.5;
            case HalfPlane::Bottom: return cy >= 0.5;
        }
    }
    return true;
}

Instance make_instance(int cls, int attr, Box b) { return Instance{cls, attr, b}; }

bool inside_canvas(const Box& b) { return b.x1 >= 0 && b.y1 >= 0 && b.x2 <= 1 && b.y2 <= 1 && b.x1 < b.x2 && b.y1 < b.y2; }

}  // namespace

TEST(SceneSpec, RejectsInfeasibleSpecs) {
    SceneSpec s;
    s.min_size = 0.5;
    s.max_size = 0.4;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = SceneSpec{};
    s.max_size = 1.5;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = SceneSpec{};
    s.feature_dim = s.num_classes - 1;
    EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(GenerateScene, ZeroMaxInstancesGivesEmptyScene) {
    SceneSpec s;
    s.max_instances = 0;
    s.max_label = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_TRUE(generate_scene(s, seed).instances.empty());
}

TEST(GenerateScene, SameSeedSameScene) {
    const SceneSpec s;
    EXPECT_EQ(generate_scene(s, 7), generate_scene(s, 7));
    EXPECT_NE(generate_scene(s, 7), generate_scene(s, 8));
}

TEST(GenerateScene, BoxesInsideCanvasAndCountInBounds) {
    const SceneSpec s;
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        const Scene scene = generate_scene(s, seed);
        EXPECT_LE(static_cast<int>(scene.instances.size()), s.max_instances);
        for (const auto& inst : scene.instances) {
            EXPECT_TRUE(inside_canvas(inst.box));
            EXPECT_GE(inst.box.width(), s.min_size - 1e-12);
            EXPECT_LE(inst.box.width(), s.max_size + 1e-12);
        }
    }
}

// Instance counts follow the uniform law on 0..max_instances: Pearson
// chi-square, 13 cells (df 12), critical value 26.217 at level 0.01.
TEST(GenerateScene, InstanceCountMatchesSamplingLaw) {
    SceneSpec s;
    s.max_instances = 12;
    std::map<int, int> observed;
    const int n = 1000;
    for (int seed = 0; seed < n; ++seed) ++observed[static_cast<int>(generate_scene(s, static_cast<std::uint64_t>(seed)).instances.size())];
    const double expected = n / 13.0;
    double chi2 = 0.0;
    for (int k = 0; k <= 12; ++k) chi2 += (observed[k] - expected) * (observed[k] - expected) / expected;
    EXPECT_LT(chi2, 26.217);
    EXPECT_EQ(observed.size(), 13u);
}

TEST(ProposeRegions, IdentityConfigurationGivesOneProposalPerInstance) {
    SceneSpec s;
    s.min_duplicates = s.max_duplicates = 1;
    s.min_distractors = s.max_distractors = 0;
    for (std::uint64_t seed = 1; seed < 50; ++seed) {
        const Scene scene = generate_scene(s, seed);
        if (scene.instances.empty()) continue;
        const auto regions = propose_regions(scene, s, seed + 1000);
        EXPECT_EQ(regions.size(), scene.instances.size());
        std::vector<int> sources;
        for (const auto& r : regions) sources.push_back(r.source);
        std::sort(sources.begin(), sources.end());
        for (std::size_t i = 0; i < sources.size(); ++i) EXPECT_EQ(sources[i], static_cast<int>(i));
    }
}

TEST(ProposeRegions, EmptySceneStillHasOneRegion) {
    SceneSpec s;
    s.min_distractors = s.max_distractors = 0;
    const auto regions = propose_regions(Scene{}, s, 3);
    ASSERT_EQ(regions.size(), 1u);
    EXPECT_EQ(regions[0].source, -1);
}

TEST(ProposeRegions, SpecArithmetic) {
    SceneSpec s;
    s.min_duplicates = s.max_duplicates = 2;
    s.min_distractors = s.max_distractors = 3;
    Scene scene;
    scene.instances = {make_instance(0, 0, {0.1, 0.1, 0.25, 0.25}), make_instance(1, 1, {0.6, 0.6, 0.75, 0.78})};
    const auto regions = propose_regions(scene, s, 9);
    EXPECT_EQ(regions.size(), 7u);
    EXPECT_EQ(std::count_if(regions.begin(), regions.end(), [](const RegionProposal& r) { return r.source < 0; }), 3);
}

TEST(ProposeRegions, DuplicatesOverlapSourceAndFeaturesAreFinite) {
    const SceneSpec s;
    int checked = 0;
    for (std::uint64_t seed = 0; checked < 1000; ++seed) {
        const Scene scene = generate_scene(s, seed);
        for (const auto& r : propose_regions(scene, s, seed + 77)) {
            EXPECT_TRUE(inside_canvas(r.box));
            EXPECT_EQ(r.feature.size(), static_cast<std::size_t>(s.feature_dim));
            for (double f : r.feature) EXPECT_TRUE(std::isfinite(f));
            if (r.source < 0) continue;
            EXPECT_GE(iou_oracle(r.box, scene.instances[static_cast<std::size_t>(r.source)].box), s.coverage_iou);
            ++checked;
        }
    }
}

TEST(MakeQuestion, SimpleCountsClass) {
    const SceneSpec s;
    Scene scene;
    scene.instances = {make_instance(2, 0, {0.1, 0.1, 0.2, 0.2}), make_instance(2, 1, {0.3, 0.3, 0.4, 0.4}),
                       make_instance(2, 2, {0.6, 0.1, 0.7, 0.2}), make_instance(4, 0, {0.8, 0.8, 0.9, 0.9})};
    Question q;
    q.mode = QuestionMode::Simple;
    q.class_id = 2;
    const QuestionAnswer qa = answer(scene, q);
    EXPECT_EQ(qa.count, 3);
    EXPECT_EQ(qa.gt_boxes.size(), 3u);
    EXPECT_EQ(qa.question.text, "how many " + class_name(2) + "s?");
}

TEST(MakeQuestion, AttributeFilter) {
    Scene scene;
    scene.instances = {make_instance(0, 0, {0.1, 0.1, 0.2, 0.2}), make_instance(0, 0, {0.3, 0.3, 0.4, 0.4}),
                       make_instance(0, 2, {0.6, 0.1, 0.7, 0.2})};
    Question q;
    q.mode = QuestionMode::ComplexAttribute;
    q.class_id = 0;
    q.attribute = 0;
    const QuestionAnswer qa = answer(scene, q);
    const auto brute = std::count_if(scene.instances.begin(), scene.instances.end(), [&](const Instance& i) { return satisfies(q, i); });
    EXPECT_EQ(qa.count, 2);
    EXPECT_EQ(qa.count, brute);
    EXPECT_EQ(qa.question.text, "how many red cubes?");
}

TEST(MakeQuestion, ZeroCountUsesAbsentClass) {
    const SceneSpec s;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const Scene scene = generate_scene(s, seed);
        const auto qa = make_question(scene, s, QuestionMode::Simple, seed, true);
        if (!qa) {
            // every class present: the generator must resample
            std::set<int> present;
            for (const auto& i : scene.instances) present.insert(i.class_id);
            EXPECT_EQ(static_cast<int>(present.size()), s.num_classes);
            continue;
        }
        EXPECT_EQ(qa->count, 0);
        EXPECT_TRUE(qa->gt_boxes.empty());
    }
}

TEST(MakeQuestion, UnsatisfiableModeSignals) {
    const SceneSpec s;
    Scene scene;
    for (int c = 0; c < s.num_classes; ++c)
        scene.instances.push_back(make_instance(c, 0, {0.1 * c, 0.0, 0.1 * c + 0.08, 0.08}));
    EXPECT_FALSE(make_question(scene, s, QuestionMode::Simple, 1, true).has_value());
}

TEST(Question, WellFormedness) {
    Question q;
    q.mode = QuestionMode::ComplexAttribute;
    EXPECT_FALSE(q.well_formed());
    q.attribute = 1;
    EXPECT_TRUE(q.well_formed());
    q.predicate = HalfPlane::Left;
    EXPECT_FALSE(q.well_formed());
}

TEST(GenerateDataset, EmptyDatasetHasValidHeader) {
    const SceneSpec s;
    const Dataset ds = generate_dataset(s, 0, 5, default_label_histogram());
    EXPECT_TRUE(ds.triplets.empty());
    const Dataset back = parse_dataset(serialize_dataset(ds));
    EXPECT_EQ(back.header.count, 0u);
    EXPECT_EQ(back.header.spec_hash, spec_hash(s));
    EXPECT_EQ(serialize_dataset(back), serialize_dataset(ds));
}

TEST(GenerateDataset, UniformHistogramHitsQuotas) {
    const SceneSpec s;
    std::vector<double> hist(11, 1.0);
    const Dataset ds = generate_dataset(s, 1100, 3, hist);
    std::map<int, int> counts;
    for (const auto& t : ds.triplets) ++counts[t.count];
    ASSERT_EQ(ds.triplets.size(), 1100u);
    for (int k = 0; k <= 10; ++k) EXPECT_NEAR(counts[k], 100, 1) << "label " << k;
}

TEST(GenerateDataset, LabelsMatchIndependentRecount) {
    const SceneSpec s;
    const Dataset ds = generate_dataset(s, 5000, 8, default_label_histogram());
    ASSERT_EQ(ds.triplets.size(), 5000u);
    for (const auto& t : ds.triplets) {
        const auto recount = std::count_if(t.instances.begin(), t.instances.end(),
                                           [&](const Instance& i) { return satisfies(t.question, i); });
        ASSERT_EQ(recount, t.count) << "triplet " << t.id;
        ASSERT_EQ(t.gt_boxes.size(), static_cast<std::size_t>(t.count));
        EXPECT_NO_THROW(validate_triplet(t, s));
        // coverage: every matching instance has a proposal at IoU >= threshold
        for (const Box& gt : t.gt_boxes) {
            double best = 0.0;
            for (const auto& r : t.regions) best = std::max(best, iou_oracle(r.box, gt));
            ASSERT_GE(best, s.coverage_iou);
        }
    }
}

TEST(GenerateDataset, ByteIdenticalForSameSeed) {
    const SceneSpec s;
    const std::string a = serialize_dataset(generate_dataset(s, 300, 42, default_label_histogram()));
    const std::string b = serialize_dataset(generate_dataset(s, 300, 42, default_label_histogram()));
    EXPECT_EQ(a, b);
    EXPECT_NE(a, serialize_dataset(generate_dataset(s, 300, 43, default_label_histogram())));
}

TEST(GenerateDataset, RoundTripIsBitExact) {
    const SceneSpec s;
    const Dataset ds = generate_dataset(s, 200, 1, default_label_histogram(), 500);
    const std::string text = serialize_dataset(ds);
    const Dataset back = parse_dataset(text);
    EXPECT_EQ(back.triplets, ds.triplets);
    EXPECT_EQ(serialize_dataset(back), text);
    EXPECT_EQ(dataset_hash(back), dataset_hash(ds));
}

TEST(GenerateDataset, RejectsUnreachableLabel) {
    SceneSpec s;
    s.max_label = 5;
    std::vector<double> hist(8, 0.0);
    hist[7] = 1.0;
    try {
        generate_dataset(s, 10, 1, hist);
        FAIL() << "expected rejection";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("label 7"), std::string::npos) << e.what();
    }
}

TEST(ValidateTriplet, DetectsWrongLabel) {
    const SceneSpec s;
    Dataset ds = generate_dataset(s, 20, 2, default_label_histogram());
    CountingTriplet t = ds.triplets.front();
    t.count += 1;
    EXPECT_THROW(validate_triplet(t, s), TripletInvalid);
}

// Nearest class prototype (largest dot product) on instance proposals.
TEST(Separability, NearestPrototypeRecoversClasses) {
    auto accuracy = [](const SceneSpec& s) {
        const Prototypes p = make_prototypes(s);
        std::size_t hit = 0, total = 0;
        for (std::uint64_t seed = 0; seed < 400; ++seed) {
            const Scene scene = generate_scene(s, seed);
            for (const auto& r : propose_regions(scene, s, seed + 1)) {
                if (r.source < 0) continue;
                int best = -1;
                double best_dot = -1e300;
                for (int c = 0; c < s.num_classes; ++c) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < r.feature.size(); ++i) dot += r.feature[i] * p.classes[static_cast<std::size_t>(c)][i];
                    if (dot > best_dot) {
                        best_dot = dot;
                        best = c;
                    }
                }
                hit += best == r.source_class;
                ++total;
            }
        }
        return static_cast<double>(hit) / static_cast<double>(total);
    };
    SceneSpec noiseless;
    noiseless.feature_noise = 0.0;
    EXPECT_EQ(accuracy(noiseless), 1.0);
    EXPECT_GT(accuracy(SceneSpec{}), 0.95);
}

TEST(Prototypes, PairwiseDistinctUnitVectors) {
    const Prototypes p = make_prototypes(SceneSpec{});
    std::vector<std::vector<double>> all = p.classes;
    all.push_back(p.background);
    for (const auto& a : p.attributes) all.push_back(a);
    for (std::size_t i = 0; i < all.size(); ++i) {
        double norm = 0.0;
        for (double x : all[i]) norm += x * x;
        EXPECT_NEAR(norm, 1.0, 1e-12);
        for (std::size_t j = 0; j < i; ++j) EXPECT_NE(all[i], all[j]);
    }
}
