#include "fomox/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "fomox/csv.hpp"
#include "fomox/errors.hpp"
#include "fomox/metrics.hpp"
#include "fomox/special.hpp"

namespace fomox::sim {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr std::uint64_t kTeacherSubstream = 0xF0;
constexpr int kMaxHypothesisRetries = 32;

void require(bool ok, const std::string& msg) {
    if (!ok) throw DomainError(msg);
}

double median(std::vector<double> v) {
    if (v.empty()) throw DomainError("median: empty sample");
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One point from a component with (possibly inflated) eigenvalues:
// x = mu + Q diag(sqrt(lambda)) z.
void draw_point(const GaussianComponent& c, const std::vector<double>& lambda,
                RandomSource& rng, double* x) {
    std::size_t d = c.mean.size();
    std::vector<double> z(d);
    for (std::size_t j = 0; j < d; ++j) z[j] = std::sqrt(lambda[j]) * rng.normal();
    for (std::size_t i = 0; i < d; ++i) {
        double s = c.mean[i];
        for (std::size_t j = 0; j < d; ++j) s += c.eigenbasis[i * d + j] * z[j];
        x[i] = s;
    }
}

std::size_t pick_component(const Hypothesis& h, RandomSource& rng) {
    double u = rng.uniform01();
    double cum = 0.0;
    for (std::size_t j = 0; j < h.components.size(); ++j) {
        cum += h.components[j].weight;
        if (u < cum) return j;
    }
    return h.components.size() - 1;
}

std::vector<double> inflated_eigenvalues(const Hypothesis& h, std::size_t comp) {
    std::vector<double> lambda = h.components[comp].eigenvalues;
    const Inflation& inf = h.inflation[comp];
    for (std::size_t dir : inf.directions) lambda[dir] *= inf.factor;
    return lambda;
}

Matrix rejection_sample(const Hypothesis& h, std::size_t n, const SimulatorConfig& cfg,
                        RandomSource& rng, bool want_inside) {
    std::size_t d = static_cast<std::size_t>(h.d);
    Matrix out(n, d);
    std::size_t budget = static_cast<std::size_t>(
        std::ceil(cfg.max_rejection_factor * static_cast<double>(n)));
    std::vector<double> x(d);
    std::size_t accepted = 0;
    for (std::size_t draw = 0; draw < budget && accepted < n; ++draw) {
        std::size_t j = pick_component(h, rng);
        const auto& comp = h.components[j];
        if (want_inside) {
            draw_point(comp, comp.eigenvalues, rng, x.data());
            if (!in_region(h, x.data())) continue;
        } else {
            draw_point(comp, inflated_eigenvalues(h, j), rng, x.data());
            if (in_region(h, x.data())) continue;
        }
        std::copy(x.begin(), x.end(), out.row(accepted));
        ++accepted;
    }
    if (accepted < n)
        throw SimulatorError(std::string(want_inside ? "sample_inliers" : "sample_outliers") +
                             ": rejection budget exhausted after " + std::to_string(budget) +
                             " draws (" + std::to_string(accepted) + "/" + std::to_string(n) +
                             " accepted)");
    return out;
}

// Embeds active-coordinate rows into the padded feature space.
Matrix embed_rows(const Matrix& active, const std::vector<std::size_t>& features,
                  std::size_t d_max) {
    Matrix out(active.rows, d_max);
    for (std::size_t i = 0; i < active.rows; ++i)
        for (std::size_t k = 0; k < features.size(); ++k)
            out.at(i, features[k]) = active.at(i, k);
    return out;
}

void fisher_yates(std::vector<std::size_t>& idx, RandomSource& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        auto j = static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(idx[i - 1], idx[j]);
    }
}

} // namespace

void SimulatorConfig::validate() const {
    require(d_range.lo >= 1 && d_range.lo <= d_range.hi, "simulator: d_range must be ordered and >= 1");
    require(m_range.lo >= 1 && m_range.lo <= m_range.hi, "simulator: m_range must be ordered and >= 1");
    require(center_range.lo < center_range.hi, "simulator: center_range must be nonempty");
    require(eigenvalue_scale_range.lo > 0.0 &&
                eigenvalue_scale_range.lo <= eigenvalue_scale_range.hi,
            "simulator: eigenvalue_scale_range must be ordered and positive");
    require(inlier_percentile > 0.0 && inlier_percentile < 1.0,
            "simulator: inlier_percentile must lie in (0,1)");
    require(inflation_range.lo > 1.0 && inflation_range.lo <= inflation_range.hi,
            "simulator: inflation factors must exceed 1");
    require(inflate_fraction_range.lo > 0.0 && inflate_fraction_range.hi <= 1.0 &&
                inflate_fraction_range.lo <= inflate_fraction_range.hi,
            "simulator: inflate_fraction_range must lie in (0,1]");
    require(static_cast<std::size_t>(d_range.hi) <= d_max,
            "simulator: d_range exceeds the padded width d_max");
    require(n_context >= 1, "simulator: n_context must be >= 1");
    require(n_query >= 2, "simulator: n_query must be >= 2 so both classes appear");
    require(max_rejection_factor >= 1.0, "simulator: max_rejection_factor must be >= 1");
    require(n_context + n_query_inliers() <= n_inlier_pool,
            "simulator: inlier pool too small for context plus query share");
    require(n_query_outliers() <= n_outlier_pool,
            "simulator: outlier pool too small for query share");
}

void sample_covariance(int d, RandomSource& rng, double scale, bool diagonal_only,
                       std::vector<double>& eigenbasis, std::vector<double>& eigenvalues) {
    if (d < 1) throw DomainError("sample_covariance: d must be >= 1");
    if (scale <= 0.0) throw DomainError("sample_covariance: scale must be positive");
    auto n = static_cast<std::size_t>(d);

    eigenbasis.assign(n * n, 0.0);
    if (diagonal_only) {
        for (std::size_t i = 0; i < n; ++i) eigenbasis[i * n + i] = 1.0;
    } else {
        // Householder QR of a standard-normal matrix; columns of Q form the
        // eigenbasis. R's diagonal signs are fixed positive so the result is
        // a deterministic function of the normal draws.
        std::vector<double> a(n * n);
        for (double& g : a) g = rng.normal();
        std::vector<double> q(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) q[i * n + i] = 1.0;
        std::vector<double> v(n);
        for (std::size_t k = 0; k < n; ++k) {
            double norm2 = 0.0;
            for (std::size_t i = k; i < n; ++i) norm2 += a[i * n + k] * a[i * n + k];
            double norm = std::sqrt(norm2);
            if (norm == 0.0) continue;
            double alpha = (a[k * n + k] > 0.0) ? -norm : norm;
            double vnorm2 = 0.0;
            for (std::size_t i = k; i < n; ++i) {
                v[i] = a[i * n + k] - (i == k ? alpha : 0.0);
                vnorm2 += v[i] * v[i];
            }
            if (vnorm2 == 0.0) continue;
            // A <- H A with H = I - 2 v v^T / (v^T v)
            for (std::size_t j = k; j < n; ++j) {
                double s = 0.0;
                for (std::size_t i = k; i < n; ++i) s += v[i] * a[i * n + j];
                s = 2.0 * s / vnorm2;
                for (std::size_t i = k; i < n; ++i) a[i * n + j] -= s * v[i];
            }
            // Q <- Q H (accumulates Q = H_0 H_1 ... )
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = k; j < n; ++j) s += q[i * n + j] * v[j];
                s = 2.0 * s / vnorm2;
                for (std::size_t j = k; j < n; ++j) q[i * n + j] -= s * v[j];
            }
        }
        // Sign fix: flip each column so Q's diagonal is nonnegative. The
        // covariance Q diag(lambda) Q^T is invariant under column flips, so
        // this only pins down an otherwise arbitrary sign (and makes the
        // one-dimensional basis exactly [1]).
        for (std::size_t k = 0; k < n; ++k)
            if (q[k * n + k] < 0.0)
                for (std::size_t i = 0; i < n; ++i) q[i * n + k] = -q[i * n + k];
        eigenbasis = std::move(q);
    }

    eigenvalues.resize(n);
    double floor = 1e-4 * scale;
    for (std::size_t i = 0; i < n; ++i)
        eigenvalues[i] = std::max(rng.exponential(scale), floor);
}

Hypothesis sample_hypothesis(const SimulatorConfig& cfg, RandomSource& rng) {
    cfg.validate();
    Hypothesis h;
    h.d = static_cast<int>(rng.uniform_int(cfg.d_range.lo, cfg.d_range.hi));
    auto m = static_cast<std::size_t>(rng.uniform_int(cfg.m_range.lo, cfg.m_range.hi));
    auto d = static_cast<std::size_t>(h.d);
    h.active_features = rng.subset(d, cfg.d_max);
    h.region_threshold = chi2_quantile(h.d, cfg.inlier_percentile);
    h.components.resize(m);
    h.inflation.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        auto& c = h.components[j];
        c.weight = 1.0 / static_cast<double>(m);
        c.mean.resize(d);
        for (std::size_t i = 0; i < d; ++i)
            c.mean[i] = rng.uniform(cfg.center_range.lo, cfg.center_range.hi);
        double scale =
            rng.uniform(cfg.eigenvalue_scale_range.lo, cfg.eigenvalue_scale_range.hi);
        sample_covariance(h.d, rng, scale, cfg.diagonal_only, c.eigenbasis, c.eigenvalues);
        auto& inf = h.inflation[j];
        double fraction =
            rng.uniform(cfg.inflate_fraction_range.lo, cfg.inflate_fraction_range.hi);
        auto count = static_cast<std::size_t>(
            std::lround(fraction * static_cast<double>(d)));
        count = std::clamp<std::size_t>(count, 1, d);
        inf.directions = rng.subset(count, d);
        inf.factor = rng.uniform(cfg.inflation_range.lo, cfg.inflation_range.hi);
    }
    return h;
}

double mahalanobis_sq(const GaussianComponent& c, const double* x) {
    std::size_t d = c.mean.size();
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double y = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            y += c.eigenbasis[i * d + j] * (x[i] - c.mean[i]);
        total += y * y / c.eigenvalues[j];
    }
    return total;
}

bool in_region(const Hypothesis& h, const double* x) {
    for (const auto& c : h.components)
        if (mahalanobis_sq(c, x) <= h.region_threshold) return true;
    return false;
}

double log_density_max(const Hypothesis& h, const double* x) {
    double best = -std::numeric_limits<double>::infinity();
    double d = static_cast<double>(h.d);
    for (const auto& c : h.components) {
        double log_det = 0.0;
        for (double lambda : c.eigenvalues) log_det += std::log(lambda);
        double ld = -0.5 * (d * std::log(kTwoPi) + log_det + mahalanobis_sq(c, x));
        best = std::max(best, ld);
    }
    return best;
}

Matrix sample_inliers(const Hypothesis& h, std::size_t n, const SimulatorConfig& cfg,
                      RandomSource& rng) {
    if (n == 0) throw DomainError("sample_inliers: n must be >= 1");
    return rejection_sample(h, n, cfg, rng, /*want_inside=*/true);
}

Matrix sample_outliers(const Hypothesis& h, std::size_t n, const SimulatorConfig& cfg,
                       RandomSource& rng) {
    if (n == 0) throw DomainError("sample_outliers: n must be >= 1");
    return rejection_sample(h, n, cfg, rng, /*want_inside=*/false);
}

Tier assign_tier(int y, double r, double m0, double m1) {
    if (y == 0) return r > m0 ? Tier::SN : Tier::LN;
    return r > m1 ? Tier::LO : Tier::SO;
}

Task make_task(const Hypothesis& h, const SimulatorConfig& cfg, RandomSource& rng,
               const TaskScorer* scorer) {
    cfg.validate();
    auto d = static_cast<std::size_t>(h.d);

    Matrix inliers = sample_inliers(h, cfg.n_inlier_pool, cfg, rng);
    Matrix outliers = sample_outliers(h, cfg.n_outlier_pool, cfg, rng);

    // Context: the first slice of the (exchangeable) inlier pool.
    Matrix context_active(cfg.n_context, d);
    std::copy(inliers.data.begin(),
              inliers.data.begin() + static_cast<std::ptrdiff_t>(cfg.n_context * d),
              context_active.data.begin());

    // Query pool: remaining inliers plus all outliers. Medians and tiers are
    // computed over this full pool so tier labels are stable under
    // subsetting.
    std::size_t n_rest = cfg.n_inlier_pool - cfg.n_context;
    std::vector<double> r0(n_rest), r1(cfg.n_outlier_pool);
    for (std::size_t i = 0; i < n_rest; ++i)
        r0[i] = log_density_max(h, inliers.row(cfg.n_context + i));
    for (std::size_t i = 0; i < cfg.n_outlier_pool; ++i)
        r1[i] = log_density_max(h, outliers.row(i));
    double m0 = median(r0);
    double m1 = median(r1);

    // Chosen queries: leading slices of each pool side, then shuffled so row
    // order carries no label signal.
    std::size_t nq0 = cfg.n_query_inliers(), nq1 = cfg.n_query_outliers();
    std::size_t nq = nq0 + nq1;
    Matrix q_active(nq, d);
    std::vector<int> labels(nq);
    std::vector<double> r(nq);
    for (std::size_t i = 0; i < nq0; ++i) {
        std::copy_n(inliers.row(cfg.n_context + i), d, q_active.row(i));
        labels[i] = 0;
        r[i] = r0[i];
    }
    for (std::size_t i = 0; i < nq1; ++i) {
        std::copy_n(outliers.row(i), d, q_active.row(nq0 + i));
        labels[nq0 + i] = 1;
        r[nq0 + i] = r1[i];
    }
    std::vector<std::size_t> order(nq);
    std::iota(order.begin(), order.end(), 0);
    fisher_yates(order, rng);

    Task task;
    task.m0 = m0;
    task.m1 = m1;
    task.labels.resize(nq);
    task.r.resize(nq);
    task.tiers.resize(nq);
    Matrix q_shuffled(nq, d);
    for (std::size_t i = 0; i < nq; ++i) {
        std::size_t src = order[i];
        std::copy_n(q_active.row(src), d, q_shuffled.row(i));
        task.labels[i] = labels[src];
        task.r[i] = r[src];
        task.tiers[i] = assign_tier(labels[src], r[src], m0, m1);
    }
    task.context = embed_rows(context_active, h.active_features, cfg.d_max);
    task.queries = embed_rows(q_shuffled, h.active_features, cfg.d_max);

    if (scorer) {
        std::vector<double> scores = scorer->score(task.context, task.queries);
        task.auroc_target = metrics::auroc(scores, task.labels);
        // Scores are outlier probabilities, so the +/-inf threshold
        // sentinels ("flag everything" / "flag nothing") clamp to the [0,1]
        // boundary without changing any decision; regression targets must
        // stay finite.
        task.threshold_target = std::clamp(
            metrics::f1_optimal_threshold(scores, task.labels).threshold, 0.0, 1.0);
        RandomSource teacher_rng = rng.substream(kTeacherSubstream);
        task.u_target = scorer->mc_log_u(task.context, task.queries, teacher_rng);
    }
    return task;
}

GeneratedTask generate_task(const SimulatorConfig& cfg, std::uint64_t seed,
                            std::uint64_t task_id, const TaskScorer* scorer) {
    RandomSource rng(seed, task_id);
    for (int attempt = 0;; ++attempt) {
        try {
            Hypothesis h = sample_hypothesis(cfg, rng);
            Task t = make_task(h, cfg, rng, scorer);
            return {std::move(h), std::move(t)};
        } catch (const SimulatorError&) {
            if (attempt + 1 >= kMaxHypothesisRetries) throw;
        }
    }
}

// --- task directory I/O ------------------------------------------------------

namespace {

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
    std::ofstream out(path);
    if (!out) throw Error("write_task_dir: cannot open " + path.string());
    for (std::size_t j = 0; j < m.cols; ++j) out << (j ? "," : "") << "f" << j;
    out << "\n";
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j)
            out << (j ? "," : "") << csv::format_double(m.at(i, j));
        out << "\n";
    }
    if (!out) throw Error("write_task_dir: write failed for " + path.string());
}

Matrix read_matrix_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("read_task_dir: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
    std::size_t cols = csv::split(line).size();
    std::vector<double> data;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = csv::split(line);
        if (cells.size() != cols)
            throw ParseError(path.string() + ": row " + std::to_string(rows + 2) + " has " +
                             std::to_string(cells.size()) + " cells, expected " +
                             std::to_string(cols));
        for (const auto& cell : cells)
            data.push_back(csv::parse_double(cell, path.string()));
        ++rows;
    }
    Matrix m(rows, cols);
    m.data = std::move(data);
    return m;
}

std::string json_double_array(const std::vector<double>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += csv::format_double(v[i]);
    }
    return s + "]";
}

std::string json_index_array(const std::vector<std::size_t>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s + "]";
}

} // namespace

void write_task_dir(const std::filesystem::path& dir, const GeneratedTask& gt) {
    std::filesystem::create_directories(dir);
    const Task& t = gt.task;
    write_matrix_csv(dir / "context.csv", t.context);
    write_matrix_csv(dir / "queries.csv", t.queries);

    {
        std::ofstream out(dir / "targets.csv");
        if (!out) throw Error("write_task_dir: cannot open targets.csv");
        bool teacher = !t.u_target.empty();
        out << "y,tier,r" << (teacher ? ",u_teacher" : "") << "\n";
        for (std::size_t i = 0; i < t.labels.size(); ++i) {
            out << t.labels[i] << "," << static_cast<int>(t.tiers[i]) << ","
                << csv::format_double(t.r[i]);
            if (teacher) out << "," << csv::format_double(t.u_target[i]);
            out << "\n";
        }
        if (!out) throw Error("write_task_dir: write failed for targets.csv");
    }
    {
        std::ofstream out(dir / "dataset_targets.csv");
        if (!out) throw Error("write_task_dir: cannot open dataset_targets.csv");
        out << "auroc_target,threshold_target\n";
        if (t.auroc_target && t.threshold_target)
            out << csv::format_double(*t.auroc_target) << ","
                << csv::format_double(*t.threshold_target) << "\n";
        if (!out) throw Error("write_task_dir: write failed for dataset_targets.csv");
    }
    {
        // Hand-rolled dump keeps every float at 17 significant digits.
        const Hypothesis& h = gt.hypothesis;
        std::ofstream out(dir / "hypothesis.json");
        if (!out) throw Error("write_task_dir: cannot open hypothesis.json");
        out << "{\n";
        out << "  \"d\": " << h.d << ",\n";
        out << "  \"region_threshold\": " << csv::format_double(h.region_threshold) << ",\n";
        out << "  \"active_features\": " << json_index_array(h.active_features) << ",\n";
        out << "  \"components\": [\n";
        for (std::size_t j = 0; j < h.components.size(); ++j) {
            const auto& c = h.components[j];
            out << "    {\"weight\": " << csv::format_double(c.weight)
                << ", \"mean\": " << json_double_array(c.mean)
                << ", \"eigenbasis\": " << json_double_array(c.eigenbasis)
                << ", \"eigenvalues\": " << json_double_array(c.eigenvalues) << "}"
                << (j + 1 < h.components.size() ? "," : "") << "\n";
        }
        out << "  ],\n";
        out << "  \"inflation\": [\n";
        for (std::size_t j = 0; j < h.inflation.size(); ++j) {
            const auto& inf = h.inflation[j];
            out << "    {\"directions\": " << json_index_array(inf.directions)
                << ", \"factor\": " << csv::format_double(inf.factor) << "}"
                << (j + 1 < h.inflation.size() ? "," : "") << "\n";
        }
        out << "  ]\n}\n";
        if (!out) throw Error("write_task_dir: write failed for hypothesis.json");
    }

    // m0/m1 ride along in a tiny sidecar so tasks round-trip exactly.
    {
        std::ofstream out(dir / "medians.csv");
        if (!out) throw Error("write_task_dir: cannot open medians.csv");
        out << "m0,m1\n"
            << csv::format_double(t.m0) << "," << csv::format_double(t.m1) << "\n";
    }
}

Task read_task_dir(const std::filesystem::path& dir) {
    Task t;
    t.context = read_matrix_csv(dir / "context.csv");
    t.queries = read_matrix_csv(dir / "queries.csv");

    std::ifstream in(dir / "targets.csv");
    if (!in) throw LoadError("read_task_dir: cannot open " + (dir / "targets.csv").string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError("targets.csv: empty file");
    auto header = csv::split(line);
    bool teacher = header.size() == 4;
    if (header.size() != 3 && header.size() != 4)
        throw ParseError("targets.csv: unexpected header '" + line + "'");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = csv::split(line);
        if (cells.size() != header.size())
            throw ParseError("targets.csv: ragged row '" + line + "'");
        t.labels.push_back(static_cast<int>(csv::parse_int(cells[0], "targets.csv:y")));
        t.tiers.push_back(
            tier_from_int(static_cast<int>(csv::parse_int(cells[1], "targets.csv:tier"))));
        t.r.push_back(csv::parse_double(cells[2], "targets.csv:r"));
        if (teacher) t.u_target.push_back(csv::parse_double(cells[3], "targets.csv:u_teacher"));
    }
    if (t.labels.size() != t.queries.rows)
        throw ParseError("read_task_dir: targets.csv rows (" + std::to_string(t.labels.size()) +
                         ") do not match queries.csv rows (" + std::to_string(t.queries.rows) +
                         ")");

    std::ifstream din(dir / "dataset_targets.csv");
    if (din) {
        std::string h, row;
        std::getline(din, h);
        if (std::getline(din, row) && !row.empty()) {
            auto cells = csv::split(row);
            if (cells.size() != 2) throw ParseError("dataset_targets.csv: ragged row");
            t.auroc_target = csv::parse_double(cells[0], "dataset_targets.csv:auroc");
            t.threshold_target = csv::parse_double(cells[1], "dataset_targets.csv:threshold");
        }
    }
    std::ifstream min(dir / "medians.csv");
    if (min) {
        std::string h, row;
        std::getline(min, h);
        if (std::getline(min, row) && !row.empty()) {
            auto cells = csv::split(row);
            if (cells.size() != 2) throw ParseError("medians.csv: ragged row");
            t.m0 = csv::parse_double(cells[0], "medians.csv:m0");
            t.m1 = csv::parse_double(cells[1], "medians.csv:m1");
        }
    }
    return t;
}

} // namespace fomox::sim
