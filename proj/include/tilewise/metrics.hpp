#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tilewise/errors.hpp"
#include "tilewise/tensor.hpp"
#include "tilewise/xai.hpp"

namespace tilewise {

enum class GroundTruthSource { manual_proxy, segnet };

inline std::string_view to_string(GroundTruthSource s) {
    return s == GroundTruthSource::manual_proxy ? "manual-proxy" : "segnet";
}

/// One evaluated (tile, threshold, aggregator, ground truth) combination.
struct ScoreRecord {
    std::string tile_id;
    double threshold = 0.0;
    Aggregator aggregator = Aggregator::abs;
    int intersection_hit = 0;
    double precision = 0.0;
    std::size_t popcount = 0;  ///< actual size of the thresholded mask
    std::optional<double> iou;
    double prediction = 0.0;
    double annotated_fraction = 0.0;
    GroundTruthSource source = GroundTruthSource::manual_proxy;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw shape_error(std::string(what) + ": mask shapes differ (" + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()) + ")");
    }
}

inline std::size_t overlap_count(const Tensor& a, const Tensor& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += (a[i] != 0.0 && b[i] != 0.0);
    return n;
}

}  // namespace detail

/// 1 iff the two binary masks share at least one positive pixel.
inline int intersection_hit(const Tensor& explanation, const Tensor& truth) {
    detail::check_same_shape(explanation, truth, "intersection_hit");
    return detail::overlap_count(explanation, truth) > 0 ? 1 : 0;
}

/// sum(a_t * g) / ((1 - t) n) with n the pixel count; the normalizer is the
/// nominal selection size, not the mask's popcount, so ties may push the
/// value above 1.
inline double precision_score(const Tensor& explanation, const Tensor& truth, double t) {
    detail::check_same_shape(explanation, truth, "precision_score");
    if (!(t >= 0.0 && t < 1.0)) throw invalid_argument("precision threshold must lie in [0,1)");
    return static_cast<double>(detail::overlap_count(explanation, truth)) /
           ((1.0 - t) * static_cast<double>(explanation.size()));
}

/// |m1 and m2| / |m1 or m2|; nullopt when the union is empty.
inline std::optional<double> iou_score(const Tensor& m1, const Tensor& m2) {
    detail::check_same_shape(m1, m2, "iou_score");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < m1.size(); ++i) {
        const bool a = m1[i] != 0.0, b = m2[i] != 0.0;
        inter += a && b;
        uni += a || b;
    }
    if (uni == 0) return std::nullopt;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Dataset intersection score. With manual-proxy ground truth, tiles without
/// annotation are excluded; segmentation ground truth keeps every tile.
/// Returns nullopt when no record qualifies.
inline std::optional<double> mean_intersection(std::span<const ScoreRecord> records) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : records) {
        if (r.source == GroundTruthSource::manual_proxy && r.annotated_fraction <= 0.0) continue;
        total += r.intersection_hit;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
}

/// Mean precision with the same inclusion rule as mean_intersection.
inline std::optional<double> mean_precision(std::span<const ScoreRecord> records) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : records) {
        if (r.source == GroundTruthSource::manual_proxy && r.annotated_fraction <= 0.0) continue;
        total += r.precision;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Uniform random baseline
// ---------------------------------------------------------------------------

struct UniformBaseline {
    double iou = 0.0;
    double precision = 0.0;
};

/// Expected scores of two i.i.d. U(0,1) maps thresholded at t:
/// IoU = (1 - t) / (1 + t), precision = 1 - t.
inline UniformBaseline uniform_baseline(double t) {
    if (!(t >= 0.0 && t < 1.0)) throw invalid_argument("baseline threshold must lie in [0,1)");
    return {(1.0 - t) / (1.0 + t), 1.0 - t};
}

struct MonteCarloBaseline {
    double iou_mean = 0.0;
    double iou_stderr = 0.0;
    double precision_mean = 0.0;
    double precision_stderr = 0.0;
    std::size_t trials = 0;
    std::size_t skipped = 0;  ///< trials with an empty union
};

/// Draw pairs of i.i.d. uniform L x L maps, percentile-normalize, threshold
/// at t, and score IoU(r_t, s_t) and P_t(r_t, s_t).
inline MonteCarloBaseline uniform_baseline_mc(double t, std::size_t size, std::size_t trials, std::uint64_t seed) {
    if (!(t >= 0.0 && t < 1.0)) throw invalid_argument("baseline threshold must lie in [0,1)");
    if (trials < 1) throw invalid_argument("need at least one Monte Carlo trial");
    if (size < 1) throw invalid_argument("map size must be positive");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> ious, precs;
    MonteCarloBaseline out;
    out.trials = trials;
    for (std::size_t k = 0; k < trials; ++k) {
        AttributionMap r{Tensor({size, size}), false}, s{Tensor({size, size}), false};
        for (auto& v : r.values.values()) v = u(rng);
        for (auto& v : s.values.values()) v = u(rng);
        const auto rt = threshold_map(percentile_normalize(r), t);
        const auto st = threshold_map(percentile_normalize(s), t);
        precs.push_back(precision_score(rt.values, st.values, t));
        if (auto iou = iou_score(rt.values, st.values)) {
            ious.push_back(*iou);
        } else {
            ++out.skipped;
        }
    }
    auto mean_se = [](const std::vector<double>& xs) -> std::pair<double, double> {
        if (xs.empty()) return {0.0, 0.0};
        const double n = static_cast<double>(xs.size());
        const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
        if (xs.size() < 2) return {mean, 0.0};
        double ss = 0.0;
        for (double x : xs) ss += (x - mean) * (x - mean);
        return {mean, std::sqrt(ss / (n - 1.0) / n)};
    };
    std::tie(out.iou_mean, out.iou_stderr) = mean_se(ious);
    std::tie(out.precision_mean, out.precision_stderr) = mean_se(precs);
    return out;
}

// ---------------------------------------------------------------------------
// Correlation and binning
// ---------------------------------------------------------------------------

/// Ranks starting at 1, tied values get the average of their positions.
inline std::vector<double> average_ranks(std::span<const double> xs) {
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(xs.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

/// Spearman correlation (Pearson on average ranks). nullopt when either
/// series is constant.
inline std::optional<double> rank_correlation(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw invalid_argument("rank_correlation needs equally long series");
    if (xs.size() < 3) throw invalid_argument("rank_correlation needs at least 3 pairs");
    const auto rx = average_ranks(xs), ry = average_ranks(ys);
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct Bin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    std::optional<double> mean;
    std::optional<double> stddev;  ///< sample standard deviation (0 for one record)
};

/// Bins [e_i, e_{i+1}); the last bin also includes its upper edge. Keys
/// outside the edges are dropped. Empty bins have count 0 and no mean.
inline std::vector<Bin> binned_summary(std::span<const double> keys, std::span<const double> values,
                                       std::span<const double> edges) {
    if (keys.size() != values.size()) throw invalid_argument("binned_summary needs one value per key");
    if (keys.empty()) throw invalid_argument("binned_summary needs at least one record");
    if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end()) ||
        std::adjacent_find(edges.begin(), edges.end()) != edges.end()) {
        throw invalid_argument("bin edges must be strictly increasing with at least two entries");
    }
    std::vector<std::vector<double>> members(edges.size() - 1);
    for (std::size_t i = 0; i < keys.size(); ++i) {
        const double k = keys[i];
        if (k < edges.front() || k > edges.back()) continue;
        auto it = std::upper_bound(edges.begin(), edges.end(), k);
        auto b = static_cast<std::size_t>(it - edges.begin()) - 1;
        if (b >= members.size()) b = members.size() - 1;
        members[b].push_back(values[i]);
    }
    std::vector<Bin> out;
    for (std::size_t b = 0; b < members.size(); ++b) {
        Bin bin{edges[b], edges[b + 1], members[b].size(), std::nullopt, std::nullopt};
        if (!members[b].empty()) {
            const double n = static_cast<double>(members[b].size());
            const double mean = std::accumulate(members[b].begin(), members[b].end(), 0.0) / n;
            double ss = 0.0;
            for (double v : members[b]) ss += (v - mean) * (v - mean);
            bin.mean = mean;
            bin.stddev = members[b].size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
        }
        out.push_back(bin);
    }
    return out;
}

/// ROC AUC by the rank-sum identity; ties count one half.
inline std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw invalid_argument("roc_auc needs one label per score");
    const auto ranks = average_ranks(scores);
    double pos = 0, neg = 0, rank_sum = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i]) {
            pos += 1;
            rank_sum += ranks[i];
        } else {
            neg += 1;
        }
    }
    if (pos == 0 || neg == 0) return std::nullopt;
    return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

}  // namespace tilewise
