#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "segmenter.hpp"

namespace voxcell {

struct NearestDistances {
    std::vector<double> pred_to_truth;  // one per predicted atom
    std::vector<double> truth_to_pred;  // one per true atom; +inf when nothing was predicted
};

namespace detail {

inline double nearest(const Vec3& p, const std::vector<PlacedAtom>& others) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& o : others) best = std::min(best, distance(p, o.cart));
    return best;
}

}  // namespace detail

/// Distance from every predicted atom to its nearest true atom, and from
/// every true atom to its nearest predicted atom (plain Euclidean, box frame).
inline NearestDistances bidirectional_nn_distances(const std::vector<PlacedAtom>& pred,
                                                   const std::vector<PlacedAtom>& truth) {
    if (truth.empty()) fail(ErrorKind::EmptyTruth, "ground truth has no atoms");
    NearestDistances d;
    for (const auto& p : pred) d.pred_to_truth.push_back(detail::nearest(p.cart, truth));
    for (const auto& t : truth) d.truth_to_pred.push_back(detail::nearest(t.cart, pred));
    return d;
}

inline NearestDistances bidirectional_nn_distances(const SegmentedAtoms& pred, const std::vector<PlacedAtom>& truth) {
    return bidirectional_nn_distances(to_placed(pred), truth);
}

/// Rates over predicted atoms that have a true atom within `match_radius`.
/// Both are absent when no predicted atom qualifies.
struct SpeciesAccuracy {
    std::optional<double> top1;
    std::optional<double> within_2z;
    std::size_t matched = 0;
    std::size_t exact = 0;
    std::size_t close = 0;
};

inline SpeciesAccuracy species_accuracy(const std::vector<PlacedAtom>& pred, const std::vector<PlacedAtom>& truth,
                                        double match_radius = 0.5) {
    SpeciesAccuracy acc;
    for (const auto& p : pred) {
        const PlacedAtom* best = nullptr;
        double best_d = std::numeric_limits<double>::infinity();
        for (const auto& t : truth) {
            const double d = distance(p.cart, t.cart);
            if (d < best_d) {
                best_d = d;
                best = &t;
            }
        }
        if (!best || best_d > match_radius) continue;
        ++acc.matched;
        const int dz = std::abs(p.atomic_number - best->atomic_number);
        if (dz == 0) ++acc.exact;
        if (dz <= 2) ++acc.close;
    }
    if (acc.matched > 0) {
        acc.top1 = static_cast<double>(acc.exact) / static_cast<double>(acc.matched);
        acc.within_2z = static_cast<double>(acc.close) / static_cast<double>(acc.matched);
    }
    return acc;
}

inline SpeciesAccuracy species_accuracy(const SegmentedAtoms& pred, const std::vector<PlacedAtom>& truth,
                                        double match_radius = 0.5) {
    return species_accuracy(to_placed(pred), truth, match_radius);
}

struct CountReport {
    std::size_t n_pred = 0;
    std::size_t n_true = 0;
    std::size_t abs_diff = 0;
};

inline CountReport count_report(std::size_t n_pred, std::size_t n_true) {
    return {n_pred, n_true, n_pred > n_true ? n_pred - n_true : n_true - n_pred};
}

/// Linear interpolation between closest ranks: rank = p/100 * (n - 1).
inline double percentile(std::vector<double> values, double p) {
    require(!values.empty(), ErrorKind::InvalidArgument, "percentile of an empty list");
    require(p >= 0 && p <= 100, ErrorKind::InvalidArgument, "percentile must lie in [0, 100]");
    std::sort(values.begin(), values.end());
    const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    if (frac == 0) return values[lo];
    return values[lo] + frac * (values[hi] - values[lo]);
}

inline std::vector<double> percentile_bands(const std::vector<double>& values,
                                            const std::vector<double>& percentiles = {50, 75, 90}) {
    std::vector<double> out;
    for (double p : percentiles) out.push_back(percentile(values, p));
    return out;
}

struct Histogram {
    std::vector<double> edges;  // bins + 1 edges
    std::vector<std::size_t> counts;
    std::vector<double> samples;
};

inline Histogram make_histogram(std::vector<double> samples, double lo, double hi, int bins) {
    require(bins >= 1 && hi > lo, ErrorKind::InvalidArgument, "histogram needs bins >= 1 and hi > lo");
    Histogram h;
    h.samples = std::move(samples);
    const double width = (hi - lo) / bins;
    for (int i = 0; i <= bins; ++i) h.edges.push_back(lo + i * width);
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    for (double s : h.samples) {
        if (!(s >= lo && s <= hi)) continue;
        auto b = static_cast<std::size_t>((s - lo) / width);
        if (b >= h.counts.size()) b = h.counts.size() - 1;
        ++h.counts[b];
    }
    return h;
}

/// Nearest-neighbour distance of every atom, binned over [lo, hi].
inline Histogram spacing_histogram(const std::vector<PlacedAtom>& atoms, int bins = 50, double lo = 0.0,
                                   double hi = 5.0) {
    std::vector<double> nn;
    if (atoms.size() >= 2)
        for (std::size_t i = 0; i < atoms.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < atoms.size(); ++j)
                if (j != i) best = std::min(best, distance(atoms[i].cart, atoms[j].cart));
            nn.push_back(best);
        }
    return make_histogram(std::move(nn), lo, hi, bins);
}

inline Histogram spacing_histogram(const SegmentedAtoms& atoms, int bins = 50, double lo = 0.0, double hi = 5.0) {
    return spacing_histogram(to_placed(atoms), bins, lo, hi);
}

/// Pearson correlation over voxels.
inline double density_correlation(const DensityGrid& pred, const DensityGrid& truth) {
    require(pred.values.size() == truth.values.size() && !pred.values.empty(), ErrorKind::ShapeMismatch,
            "grids differ in size");
    const auto n = static_cast<double>(pred.values.size());
    double mp = 0, mt = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        mp += pred.values[i];
        mt += truth.values[i];
    }
    mp /= n;
    mt /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const double a = pred.values[i] - mp, b = truth.values[i] - mt;
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    require(sxx > 0 && syy > 0, ErrorKind::InvalidArgument, "correlation of a constant grid is undefined");
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Evaluation report

struct SampleEvaluation {
    std::string name;
    CountReport counts;
    NearestDistances distances;
    std::vector<int> pred_z;         // per predicted atom
    std::vector<int> matched_true_z;  // nearest true atom's Z, or 0 when farther than the match radius
    SpeciesAccuracy within_radius;
    SpeciesAccuracy unconditioned;
};

inline SampleEvaluation evaluate_sample(const std::string& name, const std::vector<PlacedAtom>& pred,
                                        const std::vector<PlacedAtom>& truth, double match_radius = 0.5) {
    SampleEvaluation e;
    e.name = name;
    e.counts = count_report(pred.size(), truth.size());
    e.distances = bidirectional_nn_distances(pred, truth);
    e.within_radius = species_accuracy(pred, truth, match_radius);
    e.unconditioned = species_accuracy(pred, truth, std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        e.pred_z.push_back(pred[i].atomic_number);
        int z = 0;
        if (e.distances.pred_to_truth[i] <= match_radius) {
            for (const auto& t : truth)
                if (distance(t.cart, pred[i].cart) == e.distances.pred_to_truth[i]) {
                    z = t.atomic_number;
                    break;
                }
        }
        e.matched_true_z.push_back(z);
    }
    return e;
}

struct EvalReport {
    std::vector<SampleEvaluation> samples;
    std::vector<double> percentiles{50, 75, 90};
    double match_radius = 0.5;

    std::vector<double> all_pred_to_truth() const {
        std::vector<double> v;
        for (const auto& s : samples) v.insert(v.end(), s.distances.pred_to_truth.begin(), s.distances.pred_to_truth.end());
        return v;
    }
    std::vector<double> all_truth_to_pred() const {
        std::vector<double> v;
        for (const auto& s : samples) v.insert(v.end(), s.distances.truth_to_pred.begin(), s.distances.truth_to_pred.end());
        return v;
    }

    SpeciesAccuracy pooled(bool within_radius) const {
        SpeciesAccuracy acc;
        for (const auto& s : samples) {
            const auto& a = within_radius ? s.within_radius : s.unconditioned;
            acc.matched += a.matched;
            acc.exact += a.exact;
            acc.close += a.close;
        }
        if (acc.matched > 0) {
            acc.top1 = static_cast<double>(acc.exact) / static_cast<double>(acc.matched);
            acc.within_2z = static_cast<double>(acc.close) / static_cast<double>(acc.matched);
        }
        return acc;
    }

    /// Number of samples per absolute count error.
    std::vector<std::size_t> count_error_histogram() const {
        std::vector<std::size_t> h;
        for (const auto& s : samples) {
            if (s.counts.abs_diff >= h.size()) h.resize(s.counts.abs_diff + 1, 0);
            ++h[s.counts.abs_diff];
        }
        return h;
    }
};

namespace detail {

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json finite_list(const std::vector<double>& v) {
    auto arr = nlohmann::json::array();
    for (double d : v) arr.push_back(std::isfinite(d) ? nlohmann::json(d) : nlohmann::json("inf"));
    return arr;
}

inline nlohmann::json bands_json(const std::vector<double>& values, const std::vector<double>& percentiles) {
    nlohmann::json j = nlohmann::json::object();
    if (values.empty()) return j;
    const auto bands = percentile_bands(values, percentiles);
    for (std::size_t i = 0; i < percentiles.size(); ++i) {
        std::ostringstream key;
        key << 'p' << percentiles[i];
        j[key.str()] = std::isfinite(bands[i]) ? nlohmann::json(bands[i]) : nlohmann::json("inf");
    }
    return j;
}

inline nlohmann::json accuracy_json(const SpeciesAccuracy& a) {
    return {{"top1", optional_json(a.top1)}, {"within_2z", optional_json(a.within_2z)}, {"matched", a.matched}};
}

}  // namespace detail

inline nlohmann::json to_json(const EvalReport& r) {
    auto samples = nlohmann::json::array();
    for (const auto& s : r.samples)
        samples.push_back({{"name", s.name},
                           {"n_pred", s.counts.n_pred},
                           {"n_true", s.counts.n_true},
                           {"count_error", s.counts.abs_diff},
                           {"pred_to_truth", detail::finite_list(s.distances.pred_to_truth)},
                           {"truth_to_pred", detail::finite_list(s.distances.truth_to_pred)},
                           {"species_within_radius", detail::accuracy_json(s.within_radius)},
                           {"species_unconditioned", detail::accuracy_json(s.unconditioned)}});
    return {{"match_radius", r.match_radius},
            {"samples", samples},
            {"aggregate",
             {{"pred_to_truth_percentiles", detail::bands_json(r.all_pred_to_truth(), r.percentiles)},
              {"truth_to_pred_percentiles", detail::bands_json(r.all_truth_to_pred(), r.percentiles)},
              {"species_within_radius", detail::accuracy_json(r.pooled(true))},
              {"species_unconditioned", detail::accuracy_json(r.pooled(false))},
              {"count_error_histogram", r.count_error_histogram()}}}};
}

/// Flat tables for plotting: counts, distances, distance percentiles and
/// species pairs, one named CSV document each.
inline std::vector<std::pair<std::string, std::string>> to_csv_tables(const EvalReport& r) {
    std::ostringstream counts, dists, bands, species;
    counts << "sample,n_true,n_pred,count_error\n";
    dists << "sample,direction,distance\n";
    species << "sample,pred_z,true_z\n";
    for (const auto& s : r.samples) {
        counts << s.name << ',' << s.counts.n_true << ',' << s.counts.n_pred << ',' << s.counts.abs_diff << '\n';
        for (double d : s.distances.pred_to_truth) dists << s.name << ",pred_to_truth," << d << '\n';
        for (double d : s.distances.truth_to_pred) dists << s.name << ",truth_to_pred," << d << '\n';
        for (std::size_t i = 0; i < s.pred_z.size(); ++i)
            species << s.name << ',' << s.pred_z[i] << ',' << s.matched_true_z[i] << '\n';
    }
    bands << "direction,percentile,distance\n";
    for (const auto& [name, values] : {std::pair{"pred_to_truth", r.all_pred_to_truth()},
                                       std::pair{"truth_to_pred", r.all_truth_to_pred()}}) {
        if (values.empty()) continue;
        const auto b = percentile_bands(values, r.percentiles);
        for (std::size_t i = 0; i < b.size(); ++i) bands << name << ',' << r.percentiles[i] << ',' << b[i] << '\n';
    }
    return {{"counts.csv", counts.str()},
            {"distances.csv", dists.str()},
            {"distance_percentiles.csv", bands.str()},
            {"species.csv", species.str()}};
}

}  // namespace voxcell
