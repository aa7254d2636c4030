#pragma once

// Modifying Count Distribution splits: image-disjoint validation carve-out,
// parity-based triplet removal (odd-even / even-odd at p%), and
// distribution-shift statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "countlab/dataset.hpp"
#include "countlab/hash.hpp"
#include "countlab/random.hpp"

namespace countlab {

using IdList = std::vector<std::uint64_t>;

/// What the split logic needs to know about one triplet.
struct TripletMeta {
    std::uint64_t id = 0;
    std::uint64_t image_id = 0;
    int label = 0;
    bool test_pool = false;
    std::vector<std::string> tokens;  // question words minus template scaffolding
    std::vector<int> concepts;        // source class per proposal, -1 = background
};

/// Template scaffolding excluded from token statistics.
inline bool is_stop_token(const std::string& token) {
    static const std::set<std::string> stop{"how", "many", "are", "on", "the", "at", "there", "is", "in", "of", "a"};
    return stop.contains(token);
}

inline std::vector<std::string> content_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&]() {
        if (!word.empty() && !is_stop_token(word)) out.push_back(word);
        word.clear();
    };
    for (char c : text) {
        if (c == ' ' || c == '?') {
            flush();
        } else {
            word.push_back(c);
        }
    }
    flush();
    return out;
}

/// Read-only view of the corpus (train pool + designated test pool).
class CorpusIndex {
public:
    CorpusIndex() = default;

    CorpusIndex(std::vector<TripletMeta> entries, std::string source_hash)
        : entries_(std::move(entries)), source_hash_(std::move(source_hash)) {
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!by_id_.emplace(entries_[i].id, i).second)
                throw std::invalid_argument("corpus: duplicate triplet id " + std::to_string(entries_[i].id));
            max_label_ = std::max(max_label_, entries_[i].label);
        }
    }

    /// Indexes a train pool and a test pool (ids must not collide).
    static CorpusIndex from_datasets(const Dataset& train_pool, const Dataset* test_pool, std::string source_hash) {
        std::vector<TripletMeta> entries;
        auto add = [&](const Dataset& ds, bool test) {
            for (const auto& t : ds.triplets) {
                TripletMeta m{t.id, t.image_id, t.count, test, content_tokens(t.question.text), {}};
                for (const auto& r : t.regions) m.concepts.push_back(r.source_class);
                entries.push_back(std::move(m));
            }
        };
        add(train_pool, false);
        if (test_pool) add(*test_pool, true);
        return CorpusIndex(std::move(entries), std::move(source_hash));
    }

    const std::vector<TripletMeta>& entries() const noexcept { return entries_; }
    const std::string& source_hash() const noexcept { return source_hash_; }
    int max_label() const noexcept { return max_label_; }
    bool contains(std::uint64_t id) const { return by_id_.contains(id); }

    const TripletMeta& at(std::uint64_t id) const {
        const auto it = by_id_.find(id);
        if (it == by_id_.end()) throw std::out_of_range("corpus: unknown triplet id " + std::to_string(id));
        return entries_[it->second];
    }

private:
    std::vector<TripletMeta> entries_;
    std::unordered_map<std::uint64_t, std::size_t> by_id_;
    std::string source_hash_;
    int max_label_ = 0;
};

enum class StrategyKind { OddEven, EvenOdd };

inline const char* strategy_name(StrategyKind k) { return k == StrategyKind::OddEven ? "odd-even" : "even-odd"; }

inline StrategyKind parse_strategy(const std::string& s) {
    if (s == "odd-even") return StrategyKind::OddEven;
    if (s == "even-odd") return StrategyKind::EvenOdd;
    throw std::invalid_argument("unknown split strategy '" + s + "' (expected odd-even or even-odd)");
}

struct SplitStrategy {
    StrategyKind kind = StrategyKind::OddEven;
    double p = 0.0;  // percentage in [0, 100]

    void validate() const {
        if (!(p >= 0.0 && p <= 100.0)) throw std::invalid_argument("split strategy: p must lie in [0, 100]");
    }

    /// Labels removed from train/validation have this parity (0 even, 1 odd).
    int train_removed_parity() const { return kind == StrategyKind::OddEven ? 0 : 1; }
    int test_removed_parity() const { return 1 - train_removed_parity(); }

    friend bool operator==(const SplitStrategy&, const SplitStrategy&) = default;
};

struct SplitProvenance {
    SplitStrategy strategy;
    double validation_fraction = 0.1;
    std::uint64_t carve_seed = 0;
    std::uint64_t strategy_seed = 0;
    std::string source_hash;
    friend bool operator==(const SplitProvenance&, const SplitProvenance&) = default;
};

struct DatasetSplit {
    IdList train;
    IdList validation;
    IdList test;
    SplitProvenance provenance;
    friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

class SplitError : public std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Holds out ceil(fraction * images) images (at least one, at most all but
/// one); every triplet on a held-out image goes to validation.
inline std::pair<IdList, IdList> carve_validation(const CorpusIndex& index, std::span<const std::uint64_t> pool,
                                                  double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw SplitError("carve_validation: fraction must lie in (0, 1)");
    std::vector<std::uint64_t> images;
    for (std::uint64_t id : pool) images.push_back(index.at(id).image_id);
    std::sort(images.begin(), images.end());
    images.erase(std::unique(images.begin(), images.end()), images.end());
    if (images.size() < 2) throw SplitError("carve_validation: need at least two images for an image-disjoint carve");

    const double exact = fraction * static_cast<double>(images.size());
    auto held = static_cast<std::size_t>(std::ceil(exact - 1e-9));
    held = std::clamp<std::size_t>(held, 1, images.size() - 1);

    Rng rng(seed);
    rng.shuffle(images);
    const std::set<std::uint64_t> held_out(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(held));
    std::pair<IdList, IdList> out;
    for (std::uint64_t id : pool) (held_out.contains(index.at(id).image_id) ? out.second : out.first).push_back(id);
    return out;
}

/// Train/validation carved from the train pool; test is the designated test
/// pool. This is the p = 0 split.
inline DatasetSplit make_base_split(const CorpusIndex& index, double validation_fraction, std::uint64_t carve_seed) {
    IdList pool;
    DatasetSplit split;
    for (const auto& e : index.entries()) (e.test_pool ? split.test : pool).push_back(e.id);
    auto [train, val] = carve_validation(index, pool, validation_fraction, carve_seed);
    split.train = std::move(train);
    split.validation = std::move(val);
    split.provenance.validation_fraction = validation_fraction;
    split.provenance.carve_seed = carve_seed;
    split.provenance.source_hash = index.source_hash();
    return split;
}

namespace detail {

/// Removes round(p/100 * n_label) uniformly chosen triplets from every label
/// of the given parity.
inline IdList remove_parity(const CorpusIndex& index, const IdList& ids, int parity, double p, std::uint64_t seed) {
    std::map<int, IdList> by_label;
    for (std::uint64_t id : ids) {
        const int label = index.at(id).label;
        if (label % 2 == parity) by_label[label].push_back(id);
    }
    std::set<std::uint64_t> removed;
    for (auto& [label, members] : by_label) {
        std::sort(members.begin(), members.end());
        const auto k = static_cast<std::size_t>(std::llround(p / 100.0 * static_cast<double>(members.size())));
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(label)));
        // partial Fisher-Yates: the first k slots become a uniform sample
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(members.size() - i));
            std::swap(members[i], members[j]);
            removed.insert(members[i]);
        }
    }
    IdList kept;
    kept.reserve(ids.size() - removed.size());
    for (std::uint64_t id : ids)
        if (!removed.contains(id)) kept.push_back(id);
    return kept;
}

}  // namespace detail

inline DatasetSplit apply_strategy(const DatasetSplit& split, const SplitStrategy& strategy, std::uint64_t seed,
                                   const CorpusIndex& index) {
    strategy.validate();
    DatasetSplit out = split;
    out.provenance.strategy = strategy;
    out.provenance.strategy_seed = seed;
    if (strategy.p == 0.0) return out;
    out.train = detail::remove_parity(index, split.train, strategy.train_removed_parity(), strategy.p, derive_seed(seed, 0));
    out.validation =
        detail::remove_parity(index, split.validation, strategy.train_removed_parity(), strategy.p, derive_seed(seed, 1));
    out.test = detail::remove_parity(index, split.test, strategy.test_removed_parity(), strategy.p, derive_seed(seed, 2));
    return out;
}

/// Rebuilds a split from its provenance alone.
inline DatasetSplit replay_split(const CorpusIndex& index, const SplitProvenance& prov) {
    if (prov.source_hash != index.source_hash())
        throw SplitError("replay_split: provenance refers to corpus " + prov.source_hash + ", index is " +
                         index.source_hash());
    const DatasetSplit base = make_base_split(index, prov.validation_fraction, prov.carve_seed);
    return apply_strategy(base, prov.strategy, prov.strategy_seed, index);
}

using LabelHistogram = std::vector<std::uint64_t>;  // index = count label

inline LabelHistogram count_histogram(std::span<const std::uint64_t> ids, const CorpusIndex& index) {
    LabelHistogram h(static_cast<std::size_t>(index.max_label()) + 1, 0);
    for (std::uint64_t id : ids) {
        const int label = index.at(id).label;
        if (static_cast<std::size_t>(label) >= h.size()) h.resize(static_cast<std::size_t>(label) + 1, 0);
        ++h[static_cast<std::size_t>(label)];
    }
    return h;
}

/// Σ √(p_i q_i) over a shared support (the shorter vector is zero-padded).
inline double bhattacharyya(std::span<const double> p, std::span<const double> q) {
    auto check = [](std::span<const double> d, const char* name) {
        double total = 0.0;
        for (double v : d) {
            if (!(v >= 0.0) || !std::isfinite(v))
                throw std::invalid_argument(std::string("bhattacharyya: ") + name + " has negative or non-finite mass");
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw std::invalid_argument(std::string("bhattacharyya: ") + name + " does not sum to 1");
    };
    check(p, "p");
    check(q, "q");
    double bc = 0.0;
    for (std::size_t i = 0; i < std::min(p.size(), q.size()); ++i) bc += std::sqrt(p[i] * q[i]);
    return std::clamp(bc, 0.0, 1.0);
}

/// Count-based form: Σ √(a_i b_i) / √(A B). Exact 1.0 for identical counts.
template <typename Key>
double bhattacharyya_counts(const std::map<Key, std::uint64_t>& a, const std::map<Key, std::uint64_t>& b) {
    double total_a = 0.0, total_b = 0.0, acc = 0.0;
    for (const auto& [k, v] : a) total_a += static_cast<double>(v);
    for (const auto& [k, v] : b) total_b += static_cast<double>(v);
    if (total_a == 0.0 && total_b == 0.0) return 1.0;
    if (total_a == 0.0 || total_b == 0.0) return 0.0;
    for (const auto& [k, v] : a) {
        const auto it = b.find(k);
        if (it != b.end()) acc += std::sqrt(static_cast<double>(v) * static_cast<double>(it->second));
    }
    return std::clamp(acc / std::sqrt(total_a * total_b), 0.0, 1.0);
}

inline std::map<int, std::uint64_t> as_map(const LabelHistogram& h) {
    std::map<int, std::uint64_t> m;
    for (std::size_t k = 0; k < h.size(); ++k)
        if (h[k]) m[static_cast<int>(k)] = h[k];
    return m;
}

struct SetStats {
    std::string name;
    std::uint64_t size = 0;
    std::uint64_t base_size = 0;
    LabelHistogram labels;
    LabelHistogram base_labels;
    std::map<std::string, std::uint64_t> tokens;
    std::map<int, std::uint64_t> concepts;
    double label_coefficient = 1.0;
    double token_coefficient = 1.0;
    double concept_coefficient = 1.0;
    friend bool operator==(const SetStats&, const SetStats&) = default;
};

struct DistributionStats {
    SplitProvenance provenance;
    std::vector<SetStats> sets;  // train, validation, test
    friend bool operator==(const DistributionStats&, const DistributionStats&) = default;

    const SetStats& set(const std::string& name) const {
        for (const auto& s : sets)
            if (s.name == name) return s;
        throw std::out_of_range("no set named " + name);
    }
};

namespace detail {

inline void tally(std::span<const std::uint64_t> ids, const CorpusIndex& index,
                  std::map<std::string, std::uint64_t>& tokens, std::map<int, std::uint64_t>& concepts) {
    for (std::uint64_t id : ids) {
        const auto& m = index.at(id);
        for (const auto& t : m.tokens) ++tokens[t];
        for (int c : m.concepts) ++concepts[c];
    }
}

}  // namespace detail

/// Histograms of each set plus label/token/visual-concept Bhattacharyya
/// coefficients against the same set before the strategy was applied.
inline DistributionStats split_report(const DatasetSplit& split, const CorpusIndex& index) {
    const DatasetSplit base = make_base_split(index, split.provenance.validation_fraction, split.provenance.carve_seed);
    DistributionStats stats;
    stats.provenance = split.provenance;
    const std::pair<const IdList*, const IdList*> pairs[] = {
        {&split.train, &base.train}, {&split.validation, &base.validation}, {&split.test, &base.test}};
    const char* names[] = {"train", "validation", "test"};
    for (int s = 0; s < 3; ++s) {
        SetStats st;
        st.name = names[s];
        st.size = pairs[s].first->size();
        st.base_size = pairs[s].second->size();
        st.labels = count_histogram(*pairs[s].first, index);
        st.base_labels = count_histogram(*pairs[s].second, index);
        std::map<std::string, std::uint64_t> base_tokens;
        std::map<int, std::uint64_t> base_concepts;
        detail::tally(*pairs[s].first, index, st.tokens, st.concepts);
        detail::tally(*pairs[s].second, index, base_tokens, base_concepts);
        st.label_coefficient = bhattacharyya_counts(as_map(st.labels), as_map(st.base_labels));
        st.token_coefficient = bhattacharyya_counts(st.tokens, base_tokens);
        st.concept_coefficient = bhattacharyya_counts(st.concepts, base_concepts);
        stats.sets.push_back(std::move(st));
    }
    return stats;
}

/// Normalizes a label histogram to a probability vector.
inline std::vector<double> normalize(const LabelHistogram& h) {
    double total = 0.0;
    for (auto v : h) total += static_cast<double>(v);
    if (!(total > 0.0)) throw std::invalid_argument("normalize: empty histogram");
    std::vector<double> p(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) p[i] = static_cast<double>(h[i]) / total;
    return p;
}

// ---------------------------------------------------------------------------
// JSON

inline json provenance_to_json(const SplitProvenance& p) {
    return json{{"strategy", strategy_name(p.strategy.kind)},
                {"p", p.strategy.p},
                {"validation_fraction", p.validation_fraction},
                {"carve_seed", p.carve_seed},
                {"strategy_seed", p.strategy_seed},
                {"source_hash", p.source_hash}};
}

inline SplitProvenance provenance_from_json(const json& j) {
    SplitProvenance p;
    p.strategy.kind = parse_strategy(j.at("strategy").get<std::string>());
    p.strategy.p = j.at("p");
    p.validation_fraction = j.at("validation_fraction");
    p.carve_seed = j.at("carve_seed");
    p.strategy_seed = j.at("strategy_seed");
    p.source_hash = j.at("source_hash").get<std::string>();
    return p;
}

inline json split_to_json(const DatasetSplit& s) {
    return json{{"provenance", provenance_to_json(s.provenance)},
                {"train", s.train},
                {"validation", s.validation},
                {"test", s.test}};
}

inline DatasetSplit split_from_json(const json& j) {
    DatasetSplit s;
    s.provenance = provenance_from_json(j.at("provenance"));
    s.train = j.at("train").get<IdList>();
    s.validation = j.at("validation").get<IdList>();
    s.test = j.at("test").get<IdList>();
    return s;
}

inline json stats_to_json(const DistributionStats& st) {
    json sets = json::array();
    for (const auto& s : st.sets) {
        json concepts = json::object();
        for (const auto& [k, v] : s.concepts) concepts[std::to_string(k)] = v;
        sets.push_back(json{{"name", s.name},
                            {"size", s.size},
                            {"base_size", s.base_size},
                            {"labels", s.labels},
                            {"base_labels", s.base_labels},
                            {"tokens", s.tokens},
                            {"concepts", concepts},
                            {"label_coefficient", s.label_coefficient},
                            {"token_coefficient", s.token_coefficient},
                            {"concept_coefficient", s.concept_coefficient}});
    }
    return json{{"provenance", provenance_to_json(st.provenance)}, {"sets", sets}};
}

inline DistributionStats stats_from_json(const json& j) {
    DistributionStats st;
    st.provenance = provenance_from_json(j.at("provenance"));
    for (const auto& s : j.at("sets")) {
        SetStats x;
        x.name = s.at("name").get<std::string>();
        x.size = s.at("size");
        x.base_size = s.at("base_size");
        x.labels = s.at("labels").get<LabelHistogram>();
        x.base_labels = s.at("base_labels").get<LabelHistogram>();
        x.tokens = s.at("tokens").get<std::map<std::string, std::uint64_t>>();
        for (const auto& [k, v] : s.at("concepts").items()) x.concepts[std::stoi(k)] = v.get<std::uint64_t>();
        x.label_coefficient = s.at("label_coefficient");
        x.token_coefficient = s.at("token_coefficient");
        x.concept_coefficient = s.at("concept_coefficient");
        st.sets.push_back(std::move(x));
    }
    return st;
}

}  // namespace countlab
