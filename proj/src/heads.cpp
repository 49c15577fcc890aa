#include "fomox/heads.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "fomox/adam.hpp"
#include "fomox/csv.hpp"
#include "fomox/errors.hpp"
#include "fomox/fmx.hpp"
#include "fomox/metrics.hpp"

namespace fomox::heads {

namespace {

constexpr char kMagic[4] = {'F', 'M', 'X', 'H'};
constexpr std::uint64_t kValEvery = 20; // every 20th task id -> validation (5%)
const double kNaN = std::numeric_limits<double>::quiet_NaN();

Tensor matrix_to_tensor(const Matrix& m) {
    return Tensor::from_data({m.rows, m.cols}, m.data);
}

} // namespace

std::string HeadSpec::name() const {
    switch (kind) {
        case HeadKind::severity: return "severity";
        case HeadKind::uncertainty: return "uncertainty";
        case HeadKind::auroc: return "auroc";
        case HeadKind::threshold: return "threshold";
    }
    throw DomainError("head spec: invalid kind");
}

std::size_t HeadSpec::output_dim() const {
    return kind == HeadKind::severity ? 4 : 1;
}

bool HeadSpec::dataset_level() const {
    return kind == HeadKind::auroc || kind == HeadKind::threshold;
}

bool HeadSpec::needs_teacher() const { return kind == HeadKind::uncertainty; }

HeadSpec head_spec_from_name(const std::string& name) {
    if (name == "severity") return {HeadKind::severity};
    if (name == "uncertainty") return {HeadKind::uncertainty};
    if (name == "auroc") return {HeadKind::auroc};
    if (name == "threshold") return {HeadKind::threshold};
    throw DomainError("unknown head name '" + name +
                      "' (expected severity, uncertainty, auroc or threshold)");
}

std::vector<std::pair<std::string, Tensor>> HeadParams::named_parameters() const {
    return {{"head.w1", w1}, {"head.b1", b1}, {"head.w2", w2}, {"head.b2", b2}};
}

std::vector<Tensor> HeadParams::parameters() const { return {w1, b1, w2, b2}; }

HeadParams init_head(const HeadSpec& spec, std::size_t token_dim, RandomSource& rng) {
    if (token_dim < 1) throw DomainError("init_head: token_dim must be >= 1");
    HeadParams hp;
    hp.spec = spec;
    hp.token_dim = token_dim;
    std::size_t hidden = 2 * token_dim, out = spec.output_dim();
    hp.w1 = Tensor::randn({token_dim, hidden}, 0.02, rng, /*requires_grad=*/true);
    hp.b1 = Tensor::zeros({hidden}, /*requires_grad=*/true);
    hp.w2 = Tensor::randn({hidden, out}, 0.02, rng, /*requires_grad=*/true);
    hp.b2 = Tensor::zeros({out}, /*requires_grad=*/true);
    return hp;
}

void HeadTrainConfig::validate() const {
    // epochs = 0 is a valid no-op schedule, so it is not checked here.
    if (batches_per_epoch < 1 || datasets_per_batch < 1 || decay_every < 1)
        throw DomainError("head training config: counts must be >= 1");
    if (mc_passes < 2) throw DomainError("head training config: mc_passes must be >= 2");
    if (!(dropout_p > 0.0 && dropout_p < 1.0))
        throw DomainError("head training config: dropout_p must lie in (0,1)");
    if (!(eps > 0.0)) throw DomainError("head training config: eps must be positive");
    if (!(lr > 0.0) || !(lr_decay > 0.0))
        throw DomainError("head training config: learning rate terms must be positive");
}

Tensor head_forward_graph(const HeadParams& hp, const Tensor& z) {
    if (z.rank() != 2 || z.cols() != hp.token_dim)
        throw ContractError("head_forward: embedding width " +
                            std::to_string(z.rank() == 2 ? z.cols() : 0) +
                            " does not match head token_dim " + std::to_string(hp.token_dim));
    Tensor hidden = gelu(add_rowvec(matmul(z, hp.w1), hp.b1));
    return add_rowvec(matmul(hidden, hp.w2), hp.b2);
}

Matrix head_forward(const HeadParams& hp, const Matrix& z) {
    Tensor out = head_forward_graph(hp, matrix_to_tensor(z));
    Matrix m(out.rows(), out.cols());
    auto span = out.data();
    std::copy(span.begin(), span.end(), m.data.begin());
    return m;
}

double severity_loss(std::span<const double> logits, Tier tier) {
    if (logits.size() != 4)
        throw ContractError("severity_loss: expected 4 logits, got " +
                            std::to_string(logits.size()));
    double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double l : logits) denom += std::exp(l - mx);
    return std::log(denom) - (logits[static_cast<std::size_t>(tier)] - mx);
}

double uncertainty_target(double u, double eps) {
    if (u < 0.0) throw DomainError("uncertainty_target: u must be nonnegative");
    if (!(eps > 0.0)) throw DomainError("uncertainty_target: eps must be positive");
    return std::log(u + eps);
}

double uncertainty_loss(double pred, double target) { return std::fabs(pred - target); }

DatasetTargets dataset_head_targets(const sim::Task& task, const bb::Checkpoint& ckpt) {
    std::vector<double> scores = bb::score_p_outlier(ckpt, task.context, task.queries);
    DatasetTargets out;
    try {
        out.auroc = metrics::auroc(scores, task.labels);
        // Scores are outlier probabilities, so the +/-inf threshold
        // sentinels ("flag everything" / "flag nothing") clamp to the [0,1]
        // boundary without changing any decision; regression targets must
        // stay finite.
        out.threshold =
            std::clamp(metrics::f1_optimal_threshold(scores, task.labels).threshold, 0.0, 1.0);
    } catch (const UndefinedMetricError&) {
        out.auroc.reset();
        out.threshold.reset();
    }
    return out;
}

// --- training -------------------------------------------------------------------

namespace {

// Everything one task contributes to head training, with the backbone
// embeddings frozen in.
struct PreparedTask {
    Matrix z;
    std::vector<int> tiers;       // severity
    std::vector<double> u_target; // uncertainty (cached teacher)
    double dataset_target = 0.0;  // auroc / threshold
};

double validation_metric(const HeadSpec& spec, const HeadParams& hp,
                         const std::vector<PreparedTask>& val_tasks) {
    if (val_tasks.empty()) return kNaN;
    try {
        switch (spec.kind) {
            case HeadKind::severity: {
                std::vector<int> pred, truth;
                for (const PreparedTask& pt : val_tasks) {
                    Matrix out = head_forward(hp, pt.z);
                    for (std::size_t i = 0; i < out.rows; ++i) {
                        const double* row = out.row(i);
                        pred.push_back(static_cast<int>(
                            std::max_element(row, row + 4) - row));
                        truth.push_back(pt.tiers[i]);
                    }
                }
                return metrics::balanced_accuracy(pred, truth, 4);
            }
            case HeadKind::uncertainty: {
                std::vector<double> pred, teacher;
                for (const PreparedTask& pt : val_tasks) {
                    Matrix out = head_forward(hp, pt.z);
                    for (std::size_t i = 0; i < out.rows; ++i) {
                        pred.push_back(out.at(i, 0));
                        teacher.push_back(pt.u_target[i]);
                    }
                }
                return metrics::spearman(pred, teacher);
            }
            case HeadKind::auroc:
            case HeadKind::threshold: {
                std::vector<double> est, target;
                for (const PreparedTask& pt : val_tasks) {
                    Matrix out = head_forward(hp, pt.z);
                    double mean = 0.0;
                    for (std::size_t i = 0; i < out.rows; ++i) mean += out.at(i, 0);
                    est.push_back(mean / static_cast<double>(out.rows));
                    target.push_back(pt.dataset_target);
                }
                return metrics::spearman(est, target);
            }
        }
    } catch (const UndefinedMetricError&) {
        return kNaN;
    }
    return kNaN;
}

} // namespace

TrainedHead train_head(const HeadSpec& spec, const bb::Checkpoint& ckpt,
                       const sim::SimulatorConfig& sim_cfg, const HeadTrainConfig& train_cfg,
                       std::uint64_t seed) {
    train_cfg.validate();
    sim_cfg.validate();
    ckpt.config.validate();
    if (sim_cfg.d_max != ckpt.config.d_max)
        throw DomainError("train_head: simulator d_max " + std::to_string(sim_cfg.d_max) +
                          " does not match backbone d_max " + std::to_string(ckpt.config.d_max));

    std::uint64_t frozen_hash = bb::checkpoint_hash(ckpt);

    RandomSource init_rng(seed, 0x4EAD);
    TrainedHead out;
    out.params = init_head(spec, ckpt.config.token_dim, init_rng);
    std::vector<Tensor> params = out.params.parameters();
    AdamState state(params, train_cfg.lr);

    bb::CheckpointScorer scorer(ckpt, train_cfg.mc_passes, train_cfg.dropout_p, train_cfg.eps);
    const sim::TaskScorer* gen_scorer = spec.needs_teacher() ? &scorer : nullptr;

    std::uint64_t task_id = 0;
    auto prepare = [&](std::uint64_t id) -> std::optional<PreparedTask> {
        sim::GeneratedTask gt = sim::generate_task(sim_cfg, seed, id, gen_scorer);
        PreparedTask pt;
        if (spec.dataset_level()) {
            DatasetTargets targets = dataset_head_targets(gt.task, ckpt);
            if (!targets.auroc.has_value()) return std::nullopt; // single-class task
            pt.dataset_target =
                spec.kind == HeadKind::auroc ? *targets.auroc : *targets.threshold;
        }
        pt.z = bb::encode(ckpt, gt.task.context, gt.task.queries);
        if (spec.kind == HeadKind::severity) {
            pt.tiers.reserve(gt.task.tiers.size());
            for (Tier t : gt.task.tiers) pt.tiers.push_back(static_cast<int>(t));
        } else if (spec.needs_teacher()) {
            pt.u_target = gt.task.u_target; // already log(u + eps)
        }
        return pt;
    };

    for (std::size_t epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        state.lr = train_cfg.lr * std::pow(train_cfg.lr_decay,
                                           static_cast<double>(epoch / train_cfg.decay_every));
        double loss_sum = 0.0;
        std::vector<PreparedTask> val_tasks;
        for (std::size_t batch = 0; batch < train_cfg.batches_per_epoch; ++batch) {
            std::vector<PreparedTask> batch_tasks;
            std::size_t attempts = 0;
            while (batch_tasks.size() < train_cfg.datasets_per_batch) {
                if (++attempts > 100 * train_cfg.datasets_per_batch + 100)
                    throw SimulatorError(
                        "train_head(" + spec.name() +
                        "): almost every generated task lacks a defined target (seed " +
                        std::to_string(seed) + ")");
                std::uint64_t id = task_id++;
                std::optional<PreparedTask> pt = prepare(id);
                if (!pt.has_value()) {
                    ++out.skipped_tasks;
                    continue;
                }
                if (id % kValEvery == 0)
                    val_tasks.push_back(std::move(*pt));
                else
                    batch_tasks.push_back(std::move(*pt));
            }

            Tensor batch_loss;
            for (const PreparedTask& pt : batch_tasks) {
                Tensor z = matrix_to_tensor(pt.z);
                Tensor pred = head_forward_graph(out.params, z);
                Tensor task_loss;
                switch (spec.kind) {
                    case HeadKind::severity:
                        task_loss = cross_entropy_mean(pred, pt.tiers);
                        break;
                    case HeadKind::uncertainty:
                        task_loss = mae_mean(pred, pt.u_target);
                        break;
                    case HeadKind::auroc:
                    case HeadKind::threshold: {
                        std::vector<double> replicated(pt.z.rows, pt.dataset_target);
                        task_loss = mae_mean(pred, replicated);
                        break;
                    }
                }
                batch_loss = batch_loss.defined() ? add(batch_loss, task_loss) : task_loss;
            }
            batch_loss = scale(batch_loss, 1.0 / static_cast<double>(batch_tasks.size()));
            double loss_value = batch_loss.value();
            if (!std::isfinite(loss_value))
                throw NumericalError("train_head(" + spec.name() +
                                     "): non-finite loss at epoch " + std::to_string(epoch) +
                                     ", batch " + std::to_string(batch) + " (seed " +
                                     std::to_string(seed) + ")");
            backward(batch_loss);
            adam_step(params, state);
            loss_sum += loss_value;
        }
        out.log.push_back({epoch,
                           loss_sum / static_cast<double>(train_cfg.batches_per_epoch),
                           validation_metric(spec, out.params, val_tasks), state.lr});
    }

    if (bb::checkpoint_hash(ckpt) != frozen_hash)
        throw ContractError("train_head: backbone parameters changed during head training");
    return out;
}

void write_head_log_csv(const std::filesystem::path& path,
                        const std::vector<HeadEpochLog>& log) {
    std::ofstream out(path);
    if (!out) throw Error("write_head_log_csv: cannot open " + path.string());
    out << "epoch,loss,val_metric,lr\n";
    for (const HeadEpochLog& e : log) {
        out << e.epoch << "," << csv::format_double(e.loss) << ",";
        if (std::isfinite(e.val_metric))
            out << csv::format_double(e.val_metric);
        else
            out << "—";
        out << "," << csv::format_double(e.lr) << "\n";
    }
    if (!out) throw Error("write_head_log_csv: write failed for " + path.string());
}

// --- persistence ----------------------------------------------------------------

void save_head(const HeadParams& hp, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("save_head: cannot open " + path.string());
    fmx::write_bytes(out, kMagic, 4);
    fmx::write_u32(out, kHeadVersion);
    nlohmann::json config{{"name", hp.spec.name()},
                          {"token_dim", hp.token_dim},
                          {"output_dim", hp.spec.output_dim()}};
    fmx::write_string(out, config.dump());
    for (const auto& [name, tensor] : hp.named_parameters()) {
        auto span = tensor.data();
        fmx::write_tensor(out, name, tensor.shape(),
                          std::vector<double>(span.begin(), span.end()));
    }
    if (!out) throw Error("save_head: write failed for " + path.string());
}

HeadParams load_head(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("load_head: cannot open " + path.string());
    char magic[4];
    if (!in.read(magic, 4)) throw LoadError("load_head: truncated file (no magic)");
    if (!std::equal(magic, magic + 4, kMagic))
        throw LoadError("load_head: bad magic in " + path.string());
    std::uint32_t version = fmx::read_u32(in, "format version");
    if (version != kHeadVersion)
        throw LoadError("load_head: unsupported format version " + std::to_string(version));

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(fmx::read_string(in, "config block"));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("load_head: config is not valid JSON: ") + e.what());
    }
    HeadParams hp;
    try {
        hp.spec = head_spec_from_name(j.at("name").get<std::string>());
        hp.token_dim = j.at("token_dim").get<std::size_t>();
        if (j.at("output_dim").get<std::size_t>() != hp.spec.output_dim())
            throw LoadError("load_head: output_dim disagrees with head '" + hp.spec.name() +
                            "'");
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("load_head: config is missing a field: ") + e.what());
    } catch (const DomainError& e) {
        throw LoadError(std::string("load_head: ") + e.what());
    }

    std::size_t t = hp.token_dim, hidden = 2 * t, od = hp.spec.output_dim();
    const std::vector<std::pair<std::string, std::vector<std::size_t>>> expected = {
        {"head.w1", {t, hidden}},
        {"head.b1", {hidden}},
        {"head.w2", {hidden, od}},
        {"head.b2", {od}},
    };
    std::vector<Tensor> loaded;
    for (const auto& [name, shape] : expected) {
        fmx::NamedTensor nt = fmx::read_tensor(in);
        if (nt.name != name)
            throw LoadError("load_head: expected tensor '" + name + "', found '" + nt.name +
                            "'");
        if (nt.shape != shape)
            throw LoadError("load_head: tensor '" + name +
                            "' has a shape inconsistent with the stored config");
        loaded.push_back(Tensor::from_data(nt.shape, std::move(nt.data),
                                           /*requires_grad=*/true));
    }
    if (!fmx::at_eof(in)) throw LoadError("load_head: trailing data after tensors");
    hp.w1 = loaded[0];
    hp.b1 = loaded[1];
    hp.w2 = loaded[2];
    hp.b2 = loaded[3];
    return hp;
}

// --- joint readout ---------------------------------------------------------------

DiagnoseResult diagnose(const bb::Checkpoint& ckpt, const std::vector<HeadParams>& attached,
                        const Matrix& context, const Matrix& queries) {
    bool seen[4] = {false, false, false, false};
    for (const HeadParams& hp : attached) {
        if (hp.token_dim != ckpt.config.token_dim)
            throw ContractError("diagnose: head '" + hp.spec.name() + "' has token_dim " +
                                std::to_string(hp.token_dim) + " but the checkpoint uses " +
                                std::to_string(ckpt.config.token_dim));
        auto idx = static_cast<std::size_t>(hp.spec.kind);
        if (seen[idx]) throw ContractError("diagnose: duplicate head '" + hp.spec.name() + "'");
        seen[idx] = true;
    }

    Matrix z = bb::encode(ckpt, context, queries); // the single shared pass
    DiagnoseResult res;
    res.p_outlier = bb::od_score(ckpt, z).p_outlier;

    for (const HeadParams& hp : attached) {
        Matrix out = head_forward(hp, z);
        switch (hp.spec.kind) {
            case HeadKind::severity: {
                res.tier_probs = Matrix(out.rows, 4);
                res.tiers.resize(out.rows);
                for (std::size_t i = 0; i < out.rows; ++i) {
                    const double* row = out.row(i);
                    double mx = *std::max_element(row, row + 4);
                    double denom = 0.0;
                    for (std::size_t c = 0; c < 4; ++c) {
                        res.tier_probs.at(i, c) = std::exp(row[c] - mx);
                        denom += res.tier_probs.at(i, c);
                    }
                    for (std::size_t c = 0; c < 4; ++c) res.tier_probs.at(i, c) /= denom;
                    res.tiers[i] = static_cast<Tier>(std::max_element(row, row + 4) - row);
                }
                break;
            }
            case HeadKind::uncertainty: {
                res.log_u.resize(out.rows);
                for (std::size_t i = 0; i < out.rows; ++i) res.log_u[i] = out.at(i, 0);
                break;
            }
            case HeadKind::auroc:
            case HeadKind::threshold: {
                double mean = 0.0;
                for (std::size_t i = 0; i < out.rows; ++i) mean += out.at(i, 0);
                mean /= static_cast<double>(out.rows);
                if (hp.spec.kind == HeadKind::auroc)
                    res.auroc_estimate = mean;
                else
                    res.threshold_estimate = mean;
                break;
            }
        }
    }
    return res;
}

void write_diagnose_csv(const std::filesystem::path& path, const DiagnoseResult& result) {
    std::ofstream out(path);
    if (!out) throw Error("write_diagnose_csv: cannot open " + path.string());
    const char* dash = "—";
    out << "p_outlier,tier,sn,ln,lo,so,log_u\n";
    for (std::size_t i = 0; i < result.p_outlier.size(); ++i) {
        out << csv::format_double(result.p_outlier[i]) << ",";
        if (result.has_severity()) {
            out << tier_name(result.tiers[i]);
            for (std::size_t c = 0; c < 4; ++c)
                out << "," << csv::format_double(result.tier_probs.at(i, c));
        } else {
            out << dash << "," << dash << "," << dash << "," << dash << "," << dash;
        }
        out << ",";
        if (result.has_uncertainty())
            out << csv::format_double(result.log_u[i]);
        else
            out << dash;
        out << "\n";
    }
    if (!out) throw Error("write_diagnose_csv: write failed for " + path.string());
}

void write_diagnose_summary_json(const std::filesystem::path& path,
                                 const DiagnoseResult& result) {
    nlohmann::json j;
    j["n_queries"] = result.p_outlier.size();
    double mean_p = 0.0;
    for (double p : result.p_outlier) mean_p += p;
    j["mean_p_outlier"] =
        result.p_outlier.empty() ? 0.0 : mean_p / static_cast<double>(result.p_outlier.size());
    j["auroc_estimate"] =
        result.auroc_estimate ? nlohmann::json(*result.auroc_estimate) : nlohmann::json("—");
    j["threshold_estimate"] = result.threshold_estimate
                                  ? nlohmann::json(*result.threshold_estimate)
                                  : nlohmann::json("—");
    if (result.has_severity()) {
        std::array<std::size_t, 4> counts{0, 0, 0, 0};
        for (Tier t : result.tiers) ++counts[static_cast<std::size_t>(t)];
        j["tier_counts"] = {{"sn", counts[0]}, {"ln", counts[1]}, {"lo", counts[2]},
                            {"so", counts[3]}};
    }
    std::ofstream out(path);
    if (!out) throw Error("write_diagnose_summary_json: cannot open " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw Error("write_diagnose_summary_json: write failed for " + path.string());
}

} // namespace fomox::heads
