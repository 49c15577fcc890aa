#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fomox/backbone.hpp"
#include "fomox/matrix.hpp"
#include "fomox/random.hpp"
#include "fomox/simulator.hpp"
#include "fomox/tensor.hpp"
#include "fomox/tier.hpp"

namespace fomox::heads {

inline constexpr std::uint32_t kHeadVersion = 1;

// The four diagnostic readouts. Each is an MLP on the frozen embedding z:
// severity classifies the four tiers, uncertainty regresses the log of the
// MC-dropout std, and the two dataset-level heads regress per-dataset
// failure-mode scores that are averaged over queries at evaluation time.
enum class HeadKind { severity, uncertainty, auroc, threshold };

struct HeadSpec {
    HeadKind kind = HeadKind::severity;

    std::string name() const;              // "severity" | "uncertainty" | "auroc" | "threshold"
    std::size_t output_dim() const;        // 4, 1, 1, 1
    bool dataset_level() const;            // auroc and threshold heads
    bool needs_teacher() const;            // uncertainty head (MC-dropout target)
};

// Throws DomainError for an unknown name.
HeadSpec head_spec_from_name(const std::string& name);

struct HeadParams {
    HeadSpec spec;
    std::size_t token_dim = 0;
    Tensor w1, b1, w2, b2; // token_dim x 2t, 2t, 2t x out, out

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
};

// normal(0, 0.02) projections, zero biases — the backbone's init scheme.
HeadParams init_head(const HeadSpec& spec, std::size_t token_dim, RandomSource& rng);

struct HeadTrainConfig {
    std::size_t epochs = 20;
    std::size_t batches_per_epoch = 25;
    std::size_t datasets_per_batch = 4;
    double lr = 1e-3;
    double lr_decay = 0.8;      // applied every decay_every epochs
    std::size_t decay_every = 10;
    std::size_t mc_passes = 10; // M for the uncertainty teacher
    double dropout_p = 0.1;     // teacher pass dropout probability
    double eps = 1e-6;          // log(u + eps)
    void validate() const;      // throws DomainError
};

// --- forward and losses --------------------------------------------------------

// W2^T gelu(W1^T z + b1) + b2, autodiff through head parameters only.
Tensor head_forward_graph(const HeadParams& hp, const Tensor& z);

// Inference wrapper: z (n x token_dim) -> outputs (n x output_dim).
Matrix head_forward(const HeadParams& hp, const Matrix& z);

// -log softmax(logits)[tier]; logits must have exactly 4 entries.
double severity_loss(std::span<const double> logits, Tier tier);

// Regression target ln(u + eps) for a nonnegative uncertainty u.
double uncertainty_target(double u, double eps);

// Mean-absolute-error contribution of one prediction.
double uncertainty_loss(double pred, double target);

struct DatasetTargets {
    std::optional<double> auroc;
    std::optional<double> threshold;
};

// Frozen-scorer dataset targets; empty when the task has only one class
// (the caller skips and logs such tasks). The threshold target lives in
// outlier-probability space: the scan's +/-inf sentinels clamp to [0,1],
// which decides identically on (0,1)-valued scores.
DatasetTargets dataset_head_targets(const sim::Task& task, const bb::Checkpoint& ckpt);

// --- training -------------------------------------------------------------------

struct HeadEpochLog {
    std::size_t epoch;
    double loss;       // mean training loss over the epoch's batches
    double val_metric; // NaN when undefined for the epoch
    double lr;
};

struct TrainedHead {
    HeadParams params;
    std::vector<HeadEpochLog> log;
    std::size_t skipped_tasks = 0; // dataset-level target undefined
};

// Trains one head on frozen embeddings with Adam, generating fresh tasks per
// batch under `seed`. Every 20th task id is held out as the validation
// stream; the per-epoch validation metric is balanced accuracy (severity),
// Spearman vs the cached teacher (uncertainty), or Spearman of the
// mean-aggregated estimate vs the dataset target across validation tasks.
// The backbone is strictly read-only: its hash is checked before and after.
// Throws NumericalError (with seed context) when the loss turns non-finite.
TrainedHead train_head(const HeadSpec& spec, const bb::Checkpoint& ckpt,
                       const sim::SimulatorConfig& sim_cfg, const HeadTrainConfig& train_cfg,
                       std::uint64_t seed);

// Training log CSV: header `epoch,loss,val_metric,lr`.
void write_head_log_csv(const std::filesystem::path& path, const std::vector<HeadEpochLog>& log);

// --- persistence ----------------------------------------------------------------

// Same container as the backbone checkpoint with magic "FMXH"; the JSON
// block stores the head name and dimensions.
void save_head(const HeadParams& hp, const std::filesystem::path& path);
HeadParams load_head(const std::filesystem::path& path);

// --- joint readout ---------------------------------------------------------------

struct DiagnoseResult {
    std::vector<double> p_outlier;           // always present
    Matrix tier_probs;                       // n x 4 when the severity head ran
    std::vector<Tier> tiers;                 // argmax of tier_probs
    std::vector<double> log_u;               // uncertainty head output
    std::optional<double> auroc_estimate;    // mean over queries
    std::optional<double> threshold_estimate;

    bool has_severity() const { return !tiers.empty(); }
    bool has_uncertainty() const { return !log_u.empty(); }
};

// One shared encode pass feeds the OD readout and every attached head; the
// OD probabilities are bitwise identical to a heads-free run. Duplicate head
// kinds or a token_dim mismatch throw ContractError.
DiagnoseResult diagnose(const bb::Checkpoint& ckpt, const std::vector<HeadParams>& attached,
                        const Matrix& context, const Matrix& queries);

// Per-query CSV: `p_outlier,tier,sn,ln,lo,so,log_u`; fields of absent heads
// render as an em dash. The JSON summary carries the dataset estimates.
void write_diagnose_csv(const std::filesystem::path& path, const DiagnoseResult& result);
void write_diagnose_summary_json(const std::filesystem::path& path, const DiagnoseResult& result);

} // namespace fomox::heads
