#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fomox/tier.hpp"

namespace fomox::metrics {

// Rank-based AUROC (Mann-Whitney) with average ranks for tied scores.
// Throws UndefinedMetricError unless both classes are present.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Mean per-class recall over k classes. Throws UndefinedMetricError when a
// true class is absent, DomainError when a value falls outside [0, k).
double balanced_accuracy(std::span<const int> pred, std::span<const int> truth, int k = 4);

// Pearson correlation of average ranks. Throws UndefinedMetricError for
// constant inputs or fewer than two points.
double spearman(std::span<const double> a, std::span<const double> b);

struct ThresholdResult {
    double threshold;
    double f1;
};

// Scans midpoints between consecutive distinct sorted scores plus the
// -inf/+inf sentinels under the decision rule `score > threshold`; returns
// the smallest threshold attaining the maximal F1.
ThresholdResult f1_optimal_threshold(std::span<const double> scores,
                                     std::span<const int> labels);

struct TierRow {
    std::size_t count_normal = 0;
    std::size_t count_outlier = 0;
    double mistake_fraction = 0.0; // NaN when the tier is empty
};

// Per predicted tier: true-label counts and the fraction of mistakes, where
// a mistake is a true outlier predicted {SN, LN} or a true normal predicted
// {LO, SO}. Empty tiers report a NaN fraction (rendered as an em dash).
std::array<TierRow, 4> tier_table(std::span<const Tier> pred, std::span<const int> labels);

// Mean true label per predicted tier; NaN for empty tiers.
std::array<double, 4> outlier_fraction_by_tier(std::span<const Tier> pred,
                                               std::span<const int> labels);

struct TimingStats {
    double backbone_ns_per_sample = 0.0;
    double with_heads_ns_per_sample = 0.0;
    double overhead_fraction = 0.0; // (with_heads - backbone) / backbone
};

struct EvalReport {
    std::optional<double> auroc;
    std::optional<double> balanced_accuracy;
    std::vector<std::pair<std::string, double>> spearman_by_head; // head name -> rho
    std::optional<std::array<TierRow, 4>> tiers;
    std::optional<std::array<double, 4>> outlier_fraction;
    std::optional<TimingStats> timing;
};

// JSON document; metrics that are undefined (absent or NaN) render as "—".
std::string report_json(const EvalReport& r);

// Two-line flat CSV (header + row) for cross-dataset aggregation.
std::string report_csv(const EvalReport& r, const std::string& dataset);

} // namespace fomox::metrics
