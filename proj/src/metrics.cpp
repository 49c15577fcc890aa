#include "fomox/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "fomox/errors.hpp"

namespace fomox::metrics {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Average ranks (1-based), ties share the mean of their rank range.
std::vector<double> average_ranks(std::span<const double> x) {
    std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
        double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
        i = j + 1;
    }
    return r;
}

void require_same_length(std::size_t a, std::size_t b, const char* op) {
    if (a != b)
        throw DimensionError(std::string(op) + ": got " + std::to_string(a) + " vs " +
                             std::to_string(b) + " entries");
}

} // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
    require_same_length(scores.size(), labels.size(), "auroc");
    std::size_t pos = 0, neg = 0;
    for (int y : labels) {
        if (y == 1)
            ++pos;
        else if (y == 0)
            ++neg;
        else
            throw DomainError("auroc: label " + std::to_string(y) + " not in {0,1}");
    }
    if (pos == 0 || neg == 0)
        throw UndefinedMetricError("auroc: needs both classes, got " + std::to_string(pos) +
                                   " positives / " + std::to_string(neg) + " negatives");
    auto ranks = average_ranks(scores);
    double rank_sum_pos = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == 1) rank_sum_pos += ranks[i];
    double p = static_cast<double>(pos);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

double balanced_accuracy(std::span<const int> pred, std::span<const int> truth, int k) {
    require_same_length(pred.size(), truth.size(), "balanced_accuracy");
    if (k < 2) throw DomainError("balanced_accuracy: needs k >= 2 classes");
    std::vector<std::size_t> total(static_cast<std::size_t>(k), 0);
    std::vector<std::size_t> correct(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        int t = truth[i], p = pred[i];
        if (t < 0 || t >= k)
            throw DomainError("balanced_accuracy: true class " + std::to_string(t) +
                              " outside [0," + std::to_string(k) + ")");
        if (p < 0 || p >= k)
            throw DomainError("balanced_accuracy: predicted class " + std::to_string(p) +
                              " outside [0," + std::to_string(k) + ")");
        ++total[static_cast<std::size_t>(t)];
        if (p == t) ++correct[static_cast<std::size_t>(t)];
    }
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
        if (total[static_cast<std::size_t>(c)] == 0)
            throw UndefinedMetricError("balanced_accuracy: true class " + std::to_string(c) +
                                       " absent");
        sum += static_cast<double>(correct[static_cast<std::size_t>(c)]) /
               static_cast<double>(total[static_cast<std::size_t>(c)]);
    }
    return sum / static_cast<double>(k);
}

double spearman(std::span<const double> a, std::span<const double> b) {
    require_same_length(a.size(), b.size(), "spearman");
    if (a.size() < 2) throw UndefinedMetricError("spearman: needs at least 2 points");
    auto ra = average_ranks(a);
    auto rb = average_ranks(b);
    std::size_t n = a.size();
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0)
        throw UndefinedMetricError("spearman: constant input has no rank variance");
    return sab / std::sqrt(saa * sbb);
}

ThresholdResult f1_optimal_threshold(std::span<const double> scores,
                                     std::span<const int> labels) {
    require_same_length(scores.size(), labels.size(), "f1_optimal_threshold");
    std::size_t pos = 0, neg = 0;
    for (int y : labels) {
        if (y == 1)
            ++pos;
        else if (y == 0)
            ++neg;
        else
            throw DomainError("f1_optimal_threshold: label " + std::to_string(y) +
                              " not in {0,1}");
    }
    if (pos == 0 || neg == 0)
        throw UndefinedMetricError("f1_optimal_threshold: needs both classes");

    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

    std::vector<double> candidates;
    candidates.push_back(-std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i + 1 < sorted.size(); ++i)
        candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
    candidates.push_back(std::numeric_limits<double>::infinity());

    auto f1_at = [&](double t) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            bool flagged = scores[i] > t;
            if (flagged && labels[i] == 1) ++tp;
            if (flagged && labels[i] == 0) ++fp;
            if (!flagged && labels[i] == 1) ++fn;
        }
        std::size_t denom = 2 * tp + fp + fn;
        return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    };

    ThresholdResult best{candidates.front(), f1_at(candidates.front())};
    for (std::size_t i = 1; i < candidates.size(); ++i) {
        double f1 = f1_at(candidates[i]);
        if (f1 > best.f1) best = {candidates[i], f1};
    }
    return best;
}

std::array<TierRow, 4> tier_table(std::span<const Tier> pred, std::span<const int> labels) {
    require_same_length(pred.size(), labels.size(), "tier_table");
    std::array<TierRow, 4> table{};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        auto& row = table[static_cast<std::size_t>(pred[i])];
        if (labels[i] == 1)
            ++row.count_outlier;
        else
            ++row.count_normal;
    }
    for (int t = 0; t < 4; ++t) {
        auto& row = table[static_cast<std::size_t>(t)];
        std::size_t n = row.count_normal + row.count_outlier;
        if (n == 0) {
            row.mistake_fraction = kNaN;
            continue;
        }
        std::size_t mistakes = (t <= 1) ? row.count_outlier : row.count_normal;
        row.mistake_fraction = static_cast<double>(mistakes) / static_cast<double>(n);
    }
    return table;
}

std::array<double, 4> outlier_fraction_by_tier(std::span<const Tier> pred,
                                               std::span<const int> labels) {
    require_same_length(pred.size(), labels.size(), "outlier_fraction_by_tier");
    std::array<std::size_t, 4> total{};
    std::array<std::size_t, 4> outlier{};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        auto t = static_cast<std::size_t>(pred[i]);
        ++total[t];
        if (labels[i] == 1) ++outlier[t];
    }
    std::array<double, 4> frac{};
    for (std::size_t t = 0; t < 4; ++t)
        frac[t] = total[t] == 0
                      ? kNaN
                      : static_cast<double>(outlier[t]) / static_cast<double>(total[t]);
    return frac;
}

namespace {

nlohmann::json num_or_dash(double v) {
    if (std::isnan(v)) return std::string("—");
    return v;
}

std::string csv_cell(double v) {
    if (std::isnan(v)) return "—";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::string report_json(const EvalReport& r) {
    nlohmann::json j;
    j["auroc"] = r.auroc ? num_or_dash(*r.auroc) : nlohmann::json(std::string("—"));
    j["balanced_accuracy"] =
        r.balanced_accuracy ? num_or_dash(*r.balanced_accuracy) : nlohmann::json(std::string("—"));
    nlohmann::json sp = nlohmann::json::object();
    for (const auto& [name, rho] : r.spearman_by_head) sp[name] = num_or_dash(rho);
    j["spearman"] = sp;
    if (r.tiers) {
        nlohmann::json tiers = nlohmann::json::object();
        for (int t = 0; t < 4; ++t) {
            const auto& row = (*r.tiers)[static_cast<std::size_t>(t)];
            tiers[tier_name(static_cast<Tier>(t))] = {
                {"count_normal", row.count_normal},
                {"count_outlier", row.count_outlier},
                {"mistake_fraction", num_or_dash(row.mistake_fraction)},
            };
        }
        j["tier_table"] = tiers;
    }
    if (r.outlier_fraction) {
        nlohmann::json frac = nlohmann::json::object();
        for (int t = 0; t < 4; ++t)
            frac[tier_name(static_cast<Tier>(t))] =
                num_or_dash((*r.outlier_fraction)[static_cast<std::size_t>(t)]);
        j["outlier_fraction_by_tier"] = frac;
    }
    if (r.timing) {
        j["timing"] = {
            {"backbone_ns_per_sample", r.timing->backbone_ns_per_sample},
            {"with_heads_ns_per_sample", r.timing->with_heads_ns_per_sample},
            {"overhead_fraction", r.timing->overhead_fraction},
        };
    }
    return j.dump(2) + "\n";
}

std::string report_csv(const EvalReport& r, const std::string& dataset) {
    std::string header = "dataset,auroc,balanced_accuracy";
    std::string row = dataset;
    row += ",";
    row += r.auroc ? csv_cell(*r.auroc) : "—";
    row += ",";
    row += r.balanced_accuracy ? csv_cell(*r.balanced_accuracy) : "—";
    for (const auto& [name, rho] : r.spearman_by_head) {
        header += ",spearman_" + name;
        row += "," + csv_cell(rho);
    }
    for (int t = 0; t < 4; ++t) {
        std::string n = tier_name(static_cast<Tier>(t));
        header += ",mistake_" + n + ",outlier_frac_" + n;
        row += ",";
        row += r.tiers ? csv_cell((*r.tiers)[static_cast<std::size_t>(t)].mistake_fraction)
                       : "—";
        row += ",";
        row += r.outlier_fraction ? csv_cell((*r.outlier_fraction)[static_cast<std::size_t>(t)])
                                  : "—";
    }
    header += ",backbone_ns,with_heads_ns,overhead";
    for (double v : {r.timing ? r.timing->backbone_ns_per_sample : kNaN,
                     r.timing ? r.timing->with_heads_ns_per_sample : kNaN,
                     r.timing ? r.timing->overhead_fraction : kNaN}) {
        row += ",";
        row += std::isnan(v) ? "—" : csv_cell(v);
    }
    return header + "\n" + row + "\n";
}

} // namespace fomox::metrics
