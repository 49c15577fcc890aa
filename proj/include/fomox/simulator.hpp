#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "fomox/matrix.hpp"
#include "fomox/random.hpp"
#include "fomox/tier.hpp"

namespace fomox::sim {

struct IntervalI {
    int lo = 0;
    int hi = 0;
};

struct IntervalD {
    double lo = 0.0;
    double hi = 0.0;
};

struct SimulatorConfig {
    IntervalI d_range{2, 16};             // active dimensionality
    IntervalI m_range{1, 5};              // mixture components
    IntervalD center_range{-5.0, 5.0};    // component means, per coordinate
    IntervalD eigenvalue_scale_range{0.2, 2.0}; // exponential scale of eigenvalues
    double inlier_percentile = 0.9;       // chi-square region mass q
    IntervalD inflation_range{2.0, 10.0}; // variance inflation factors
    IntervalD inflate_fraction_range{0.3, 1.0}; // fraction of directions inflated
    std::size_t n_inlier_pool = 400;
    std::size_t n_outlier_pool = 400;
    std::size_t n_context = 128;
    std::size_t n_query = 128; // half inliers (rounded down), half outliers
    double max_rejection_factor = 50.0;
    std::size_t d_max = 16;      // padded feature width
    bool diagonal_only = false;  // fixes every eigenbasis to the identity

    std::size_t n_query_inliers() const { return n_query / 2; }
    std::size_t n_query_outliers() const { return n_query - n_query / 2; }
    void validate() const; // throws DomainError
};

struct GaussianComponent {
    double weight = 1.0;
    std::vector<double> mean;        // d
    std::vector<double> eigenbasis;  // d x d row-major; columns are eigenvectors
    std::vector<double> eigenvalues; // d, all positive
};

struct Inflation {
    std::vector<std::size_t> directions; // eigendirection indices
    double factor = 1.0;
};

struct Hypothesis {
    int d = 0;
    std::vector<GaussianComponent> components;
    std::vector<std::size_t> active_features; // sorted indices into [0, d_max)
    std::vector<Inflation> inflation;         // one per component
    double region_threshold = 0.0;            // chi2_quantile(d, q)
};

struct Task {
    Matrix context; // n_context x d_max, inliers only
    Matrix queries; // n_query x d_max
    std::vector<int> labels;
    std::vector<Tier> tiers;
    std::vector<double> r; // max-component log-density per query
    double m0 = 0.0;       // within-class median of r over the y=0 pool
    double m1 = 0.0;       // same for the y=1 pool
    // Teacher fields, populated when a scorer is supplied:
    std::vector<double> u_target; // log(u + eps) per query
    std::optional<double> auroc_target;
    std::optional<double> threshold_target;
};

// Read-only scoring hook the model layer implements so task generation can
// attach teacher targets without a dependency on the model internals.
class TaskScorer {
public:
    virtual ~TaskScorer() = default;
    // Outlier probability per query, deterministic (dropout off).
    virtual std::vector<double> score(const Matrix& context, const Matrix& queries) const = 0;
    // MC-dropout distillation target log(u + eps) per query; draws masks
    // from rng.
    virtual std::vector<double> mc_log_u(const Matrix& context, const Matrix& queries,
                                         RandomSource& rng) const = 0;
};

// --- hypothesis sampling ---------------------------------------------------

Hypothesis sample_hypothesis(const SimulatorConfig& cfg, RandomSource& rng);

// Q orthonormal from Householder QR of a standard-normal matrix, with each
// column sign-flipped so Q's diagonal is nonnegative (d = 1 gives exactly
// [1]); eigenvalues i.i.d. Exponential(scale) clamped below at 1e-4 * scale.
// diagonal_only skips the basis draw and returns Q = I.
void sample_covariance(int d, RandomSource& rng, double scale, bool diagonal_only,
                       std::vector<double>& eigenbasis, std::vector<double>& eigenvalues);

// --- densities and regions --------------------------------------------------

// Squared Mahalanobis distance ||diag(lambda^-1/2) Q^T (x - mu)||^2.
double mahalanobis_sq(const GaussianComponent& c, const double* x);

// True iff x lies inside any component's chi-square ellipsoid.
bool in_region(const Hypothesis& h, const double* x);

// r(x) = max over components of the component log-density.
double log_density_max(const Hypothesis& h, const double* x);

// --- point sampling ----------------------------------------------------------

// Rejection-samples n points in active coordinates (n x d). Throws
// SimulatorError when the draw budget (max_rejection_factor * n) runs out.
Matrix sample_inliers(const Hypothesis& h, std::size_t n, const SimulatorConfig& cfg,
                      RandomSource& rng);
Matrix sample_outliers(const Hypothesis& h, std::size_t n, const SimulatorConfig& cfg,
                       RandomSource& rng);

// Pure tier rule: class split at the within-class median (ties fall to the
// "surely outlier" / "likely normal" side, i.e. the <= branch).
Tier assign_tier(int y, double r, double m0, double m1);

// Builds one labeled task from a hypothesis. Pools are generated, the
// context takes the first n_context inliers, medians and tiers are computed
// over the full remaining pool, and the query subset is shuffled. Teacher
// targets are attached when a scorer is given; its dropout draws come from a
// substream so task data is identical with and without a scorer.
Task make_task(const Hypothesis& h, const SimulatorConfig& cfg, RandomSource& rng,
               const TaskScorer* scorer = nullptr);

struct GeneratedTask {
    Hypothesis hypothesis;
    Task task;
};

// Deterministic task-id-addressed generation: one RandomSource stream per
// task id, resampling the hypothesis (bounded retries) when rejection
// sampling exhausts its budget.
GeneratedTask generate_task(const SimulatorConfig& cfg, std::uint64_t seed,
                            std::uint64_t task_id, const TaskScorer* scorer = nullptr);

// --- task directory export ----------------------------------------------------

// Writes context.csv, queries.csv, targets.csv, dataset_targets.csv and
// hypothesis.json into dir (created if absent). Floats carry 17 significant
// digits so values round-trip exactly.
void write_task_dir(const std::filesystem::path& dir, const GeneratedTask& gt);

// Reads back the files written by write_task_dir (hypothesis not required).
Task read_task_dir(const std::filesystem::path& dir);

} // namespace fomox::sim
