#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fomox/matrix.hpp"
#include "fomox/random.hpp"
#include "fomox/simulator.hpp"
#include "fomox/tensor.hpp"

namespace fomox::bb {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct BackboneConfig {
    std::size_t d_max = 16;        // padded feature count
    std::size_t token_dim = 64;    // embedding width
    std::size_t n_layers = 2;
    std::size_t n_attn_heads = 4;  // must divide token_dim
    std::size_t mlp_ratio = 4;
    double dropout_p = 0.1;
    bool train_dropout = true;     // apply dropout during pretraining too

    std::size_t head_dim() const { return token_dim / n_attn_heads; }
    std::size_t mlp_dim() const { return mlp_ratio * token_dim; }
    void validate() const; // throws DomainError
};

struct LayerParams {
    Tensor norm1_gamma, norm1_beta;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor norm2_gamma, norm2_beta;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// The in-context outlier detector: token embedding, masked pre-norm
// transformer encoder and the 2-logit scoring head, with its architecture
// config. Parameters are autodiff leaves; inference never mutates them.
struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    BackboneConfig config;
    Tensor embed_w, embed_b;
    std::vector<LayerParams> layers;
    Tensor od_w1, od_b1, od_w2, od_b2;

    // Canonical (name, tensor) listing; the serialization order.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
};

// Fresh parameters: normal(0, 0.02) projections, zero biases, unit norms.
Checkpoint init_checkpoint(const BackboneConfig& cfg, RandomSource& rng);

// --- preprocessing -----------------------------------------------------------

struct NormStats {
    std::vector<double> mean;
    std::vector<double> stddev; // floored at 1e-8
};

struct Normalized {
    Matrix context;
    Matrix queries;
    NormStats stats;
};

// Per-feature standardization by context statistics (population std, floored
// at 1e-8); the identical affine map is applied to the queries.
Normalized normalize(const Matrix& context, const Matrix& queries);

// --- forward passes ----------------------------------------------------------

struct DropoutSpec {
    double p = 0.0;
    RandomSource* rng = nullptr; // nullptr = dropout off
    bool on() const { return rng != nullptr && p > 0.0; }
};

// Autodiff forward: normalizes, embeds and encodes, returning the
// final-layer query tokens (n_queries x token_dim). Context tokens attend to
// every context token; query tokens attend to context tokens only, so
// queries are mutually invisible. Gradients flow to checkpoint parameters.
Tensor encode_graph(const Checkpoint& ckpt, const Matrix& context, const Matrix& queries,
                    const DropoutSpec& dropout = {});

// Process-wide count of encoder forward passes; lets callers assert that a
// multi-head readout shares a single encode.
std::uint64_t encode_invocations();

// Scoring head on embeddings: logits (n x 2), column 1 = outlier.
Tensor od_logits_graph(const Checkpoint& ckpt, const Tensor& z);

// Deterministic inference embedding (dropout off).
Matrix encode(const Checkpoint& ckpt, const Matrix& context, const Matrix& queries);

// One stochastic pass with dropout (p, rng).
Matrix encode_stochastic(const Checkpoint& ckpt, const Matrix& context, const Matrix& queries,
                         double p, RandomSource& rng);

struct OdResult {
    Matrix logits; // n x 2
    std::vector<double> p_outlier;
};

// Head readout of precomputed embeddings.
OdResult od_score(const Checkpoint& ckpt, const Matrix& z);

// Convenience: deterministic p_outlier per query.
std::vector<double> score_p_outlier(const Checkpoint& ckpt, const Matrix& context,
                                    const Matrix& queries);

// Sample standard deviation (Bessel 1/(M-1)) of M stochastic p_outlier
// passes per query; pass t draws its dropout masks from rng.substream(t).
// Throws DomainError when M < 2 or p outside (0,1).
std::vector<double> mc_dropout_std(const Checkpoint& ckpt, const Matrix& context,
                                   const Matrix& queries, std::size_t M, double p,
                                   RandomSource& rng);

// --- pretraining --------------------------------------------------------------

struct PretrainSchedule {
    std::size_t epochs = 20;
    std::size_t batches_per_epoch = 25;
    std::size_t tasks_per_batch = 4;
    double lr = 1e-3;
    double lr_decay = 0.8;       // applied every decay_every epochs
    std::size_t decay_every = 10;
};

struct EpochLog {
    std::size_t epoch;
    double mean_loss;
    double lr;
};

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<EpochLog> log;
};

// Simulator-objective pretraining: fresh tasks per batch (task ids count up
// under `seed`), mean per-query cross-entropy of the 2-logit head vs the
// labels, Adam on all parameters. Dropout is active at cfg.dropout_p when
// cfg.train_dropout is set. Throws NumericalError (naming epoch, batch and
// task seed) when the loss turns non-finite.
PretrainResult pretrain(const BackboneConfig& cfg, const sim::SimulatorConfig& sim_cfg,
                        const PretrainSchedule& schedule, std::uint64_t seed);

// --- persistence ---------------------------------------------------------------

// Binary container: magic "FMX1", version, JSON config, named tensors.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Serialized bytes (identical to the file content) and their FNV-1a hash;
// the hash fingerprints frozen parameters.
std::string serialize_checkpoint(const Checkpoint& ckpt);
std::uint64_t checkpoint_hash(const Checkpoint& ckpt);

// Loss log CSV: header `epoch,mean_loss,lr`, one row per epoch.
void write_loss_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);

// Adapter giving the simulator a scoring hook: deterministic p_outlier for
// score(), and log(std + eps) of M stochastic passes for mc_log_u().
class CheckpointScorer : public sim::TaskScorer {
public:
    CheckpointScorer(const Checkpoint& ckpt, std::size_t mc_passes = 10,
                     double dropout_p = 0.1, double eps = 1e-6)
        : ckpt_(ckpt), mc_passes_(mc_passes), dropout_p_(dropout_p), eps_(eps) {}

    std::vector<double> score(const Matrix& context, const Matrix& queries) const override;
    std::vector<double> mc_log_u(const Matrix& context, const Matrix& queries,
                                 RandomSource& rng) const override;

    const Checkpoint& checkpoint() const { return ckpt_; }
    std::size_t mc_passes() const { return mc_passes_; }
    double dropout_p() const { return dropout_p_; }
    double eps() const { return eps_; }

private:
    const Checkpoint& ckpt_;
    std::size_t mc_passes_;
    double dropout_p_;
    double eps_;
};

} // namespace fomox::bb
