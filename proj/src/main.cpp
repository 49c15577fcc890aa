// fomox — command-line surface for the in-context outlier detection pipeline.
//
// Commands: simulate, pretrain, train-head, eval, diagnose, bench.
// Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numerical
// failure. Every command writes its artifacts under a run directory together
// with a manifest.json naming them and the configuration hash; with the same
// config and seed, all non-timing outputs are bytewise identical across runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"

#include "fomox/backbone.hpp"
#include "fomox/bench.hpp"
#include "fomox/dataio.hpp"
#include "fomox/errors.hpp"
#include "fomox/heads.hpp"
#include "fomox/metrics.hpp"
#include "fomox/runconfig.hpp"
#include "fomox/simulator.hpp"

namespace {

using namespace fomox;
namespace fs = std::filesystem;

// Dedicated streams so command-level draws never collide with the module
// streams used inside training.
constexpr std::uint64_t kSplitStream = 0x51D5;   // CSV context/test split
constexpr std::uint64_t kTeacherStream = 0x7EAC; // eval MC-teacher recomputation

// Thrown for problems the user must fix on the command line (exit 1), as
// opposed to the library error taxonomy (exit 2 or 3).
struct UsageFailure {
    std::string message;
};

std::uint64_t require_seed(const RunConfig& cfg) {
    if (!cfg.seed)
        throw UsageFailure{"a seed is required: pass --seed or set \"seed\" in the config"};
    return *cfg.seed;
}

void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& cfg,
                    std::vector<std::string> artifacts) {
    std::sort(artifacts.begin(), artifacts.end());
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(run_config_hash(cfg)));
    nlohmann::json m;
    m["artifacts"] = artifacts;
    m["command"] = command;
    m["config_hash"] = hex;
    m["seed"] = cfg.seed ? nlohmann::json(*cfg.seed) : nlohmann::json(nullptr);

    fs::path path = dir / "manifest.json";
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path.string());
    out << m.dump(2) << '\n';
    if (!out) throw Error("write failed for " + path.string());
}

std::vector<heads::HeadParams> load_heads(const std::vector<std::string>& paths) {
    std::vector<heads::HeadParams> attached;
    attached.reserve(paths.size());
    for (const std::string& p : paths) attached.push_back(heads::load_head(p));
    return attached;
}

bool has_kind(const std::vector<heads::HeadParams>& attached, heads::HeadKind kind) {
    for (const auto& hp : attached)
        if (hp.spec.kind == kind) return true;
    return false;
}

std::string render_metric(double v) {
    if (!std::isfinite(v)) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// --- datasets shared by eval and diagnose --------------------------------------

struct EvalDataset {
    std::string name;
    Matrix context;
    Matrix queries;
    std::vector<int> labels;
    std::vector<Tier> tiers; // empty when ground-truth tiers are unknown (CSV data)
};

EvalDataset dataset_from_task_dir(const fs::path& dir) {
    sim::Task t = sim::read_task_dir(dir);
    std::string name = dir.filename().string();
    if (name.empty()) name = dir.parent_path().filename().string();
    return {name, std::move(t.context), std::move(t.queries), std::move(t.labels),
            std::move(t.tiers)};
}

EvalDataset dataset_from_csv(const fs::path& path, const RunConfig& cfg, std::size_t d_max) {
    dataio::LabeledTable table = dataio::load_csv(path, cfg.eval.label_column);
    RandomSource rng(cfg.seed.value_or(0), kSplitStream);
    dataio::ContextSplit split = dataio::context_split(table, cfg.eval.context_fraction, rng);
    dataio::FittedPair fitted = dataio::fit_to_model(split.context, split.queries, d_max);
    return {path.stem().string(), std::move(fitted.context), std::move(fitted.queries),
            std::move(split.labels), {}};
}

// --- commands -------------------------------------------------------------------

int cmd_simulate(const RunConfig& cfg, const fs::path& out, std::size_t n_tasks) {
    std::uint64_t seed = require_seed(cfg);
    fs::create_directories(out);

    std::vector<std::string> artifacts;
    for (std::size_t id = 0; id < n_tasks; ++id) {
        sim::GeneratedTask gt = sim::generate_task(cfg.simulator, seed, id);
        char name[32];
        std::snprintf(name, sizeof name, "task_%06llu", static_cast<unsigned long long>(id));
        sim::write_task_dir(out / name, gt);
        for (const auto& entry : fs::directory_iterator(out / name))
            artifacts.push_back(std::string(name) + "/" + entry.path().filename().string());
    }
    write_manifest(out, "simulate", cfg, std::move(artifacts));
    std::cout << "simulate: wrote " << n_tasks << " task directories under " << out.string()
              << "\n";
    return 0;
}

int cmd_pretrain(const RunConfig& cfg, const fs::path& out) {
    std::uint64_t seed = require_seed(cfg);
    fs::create_directories(out);

    bb::PretrainResult result = bb::pretrain(cfg.backbone, cfg.simulator, cfg.schedule, seed);
    bb::save_checkpoint(result.checkpoint, out / "backbone.fmx");
    bb::write_loss_log_csv(out / "pretrain_log.csv", result.log);
    write_manifest(out, "pretrain", cfg, {"backbone.fmx", "pretrain_log.csv"});

    double final_loss = result.log.empty() ? std::numeric_limits<double>::quiet_NaN()
                                           : result.log.back().mean_loss;
    std::cout << "pretrain: final mean loss " << render_metric(final_loss) << "\n";
    return 0;
}

int cmd_train_head(const RunConfig& cfg, const fs::path& ckpt_path, const std::string& head_name,
                   const fs::path& out) {
    heads::HeadSpec spec;
    try {
        spec = heads::head_spec_from_name(head_name);
    } catch (const DomainError& e) {
        throw UsageFailure{e.what()};
    }
    std::uint64_t seed = require_seed(cfg);

    bb::Checkpoint ckpt = bb::load_checkpoint(ckpt_path);
    heads::TrainedHead trained =
        heads::train_head(spec, ckpt, cfg.simulator, cfg.head_training, seed);

    fs::create_directories(out);
    const std::string head_file = "head_" + head_name + ".fmx";
    const std::string log_file = "train_" + head_name + "_log.csv";
    heads::save_head(trained.params, out / head_file);
    heads::write_head_log_csv(out / log_file, trained.log);
    write_manifest(out, "train-head", cfg, {head_file, log_file});

    double final_metric = trained.log.empty() ? std::numeric_limits<double>::quiet_NaN()
                                              : trained.log.back().val_metric;
    std::cout << "train-head(" << head_name << "): final val metric "
              << render_metric(final_metric);
    if (trained.skipped_tasks > 0)
        std::cout << " (skipped " << trained.skipped_tasks << " single-class tasks)";
    std::cout << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const fs::path& ckpt_path,
             const std::vector<std::string>& head_paths, const std::vector<std::string>& task_dirs,
             const std::string& csv_path, const fs::path& out) {
    if (task_dirs.empty() && csv_path.empty())
        throw UsageFailure{"eval: supply at least one --task-dir or a --csv"};

    bb::Checkpoint ckpt = bb::load_checkpoint(ckpt_path);
    std::vector<heads::HeadParams> attached = load_heads(head_paths);
    const bool want_dataset_level = has_kind(attached, heads::HeadKind::auroc) ||
                                    has_kind(attached, heads::HeadKind::threshold);

    std::vector<EvalDataset> datasets;
    for (const std::string& dir : task_dirs) datasets.push_back(dataset_from_task_dir(dir));
    if (!csv_path.empty())
        datasets.push_back(dataset_from_csv(csv_path, cfg, ckpt.config.d_max));

    // Pools across datasets.
    std::vector<double> all_p;
    std::vector<int> all_labels;
    std::vector<Tier> pred_tiers;            // aligned with all_labels
    std::vector<int> sev_pred, sev_true;     // datasets with ground-truth tiers only
    std::vector<double> all_log_u, all_teacher;
    std::vector<double> est_auroc, tgt_auroc, est_thr, tgt_thr;

    bb::CheckpointScorer teacher(ckpt, cfg.eval.mc_passes, cfg.eval.dropout_p, cfg.eval.eps);

    for (std::size_t i = 0; i < datasets.size(); ++i) {
        const EvalDataset& ds = datasets[i];
        heads::DiagnoseResult res = heads::diagnose(ckpt, attached, ds.context, ds.queries);

        all_p.insert(all_p.end(), res.p_outlier.begin(), res.p_outlier.end());
        all_labels.insert(all_labels.end(), ds.labels.begin(), ds.labels.end());

        if (res.has_severity()) {
            pred_tiers.insert(pred_tiers.end(), res.tiers.begin(), res.tiers.end());
            if (!ds.tiers.empty()) {
                for (std::size_t q = 0; q < res.tiers.size(); ++q) {
                    sev_pred.push_back(static_cast<int>(res.tiers[q]));
                    sev_true.push_back(static_cast<int>(ds.tiers[q]));
                }
            }
        }
        if (res.has_uncertainty()) {
            RandomSource rng = RandomSource(cfg.seed.value_or(0), kTeacherStream).substream(i);
            std::vector<double> t = teacher.mc_log_u(ds.context, ds.queries, rng);
            all_log_u.insert(all_log_u.end(), res.log_u.begin(), res.log_u.end());
            all_teacher.insert(all_teacher.end(), t.begin(), t.end());
        }
        if (want_dataset_level) {
            sim::Task probe;
            probe.context = ds.context;
            probe.queries = ds.queries;
            probe.labels = ds.labels;
            heads::DatasetTargets tg = heads::dataset_head_targets(probe, ckpt);
            if (res.auroc_estimate && tg.auroc) {
                est_auroc.push_back(*res.auroc_estimate);
                tgt_auroc.push_back(*tg.auroc);
            }
            if (res.threshold_estimate && tg.threshold) {
                est_thr.push_back(*res.threshold_estimate);
                tgt_thr.push_back(*tg.threshold);
            }
        }
    }

    metrics::EvalReport report;
    try {
        report.auroc = metrics::auroc(all_p, all_labels);
    } catch (const UndefinedMetricError&) {
    }
    if (!sev_true.empty()) {
        try {
            report.balanced_accuracy = metrics::balanced_accuracy(sev_pred, sev_true, 4);
        } catch (const UndefinedMetricError&) {
        }
    }
    if (!pred_tiers.empty()) {
        report.tiers = metrics::tier_table(pred_tiers, all_labels);
        report.outlier_fraction = metrics::outlier_fraction_by_tier(pred_tiers, all_labels);
    }

    auto safe_spearman = [](std::span<const double> a, std::span<const double> b) {
        if (a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
        try {
            return metrics::spearman(a, b);
        } catch (const UndefinedMetricError&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    };
    for (const heads::HeadParams& hp : attached) {
        switch (hp.spec.kind) {
        case heads::HeadKind::severity:
            break; // covered by balanced_accuracy and the tier table
        case heads::HeadKind::uncertainty:
            report.spearman_by_head.emplace_back(hp.spec.name(),
                                                 safe_spearman(all_log_u, all_teacher));
            break;
        case heads::HeadKind::auroc:
            report.spearman_by_head.emplace_back(hp.spec.name(),
                                                 safe_spearman(est_auroc, tgt_auroc));
            break;
        case heads::HeadKind::threshold:
            report.spearman_by_head.emplace_back(hp.spec.name(),
                                                 safe_spearman(est_thr, tgt_thr));
            break;
        }
    }

    std::string dataset_name = datasets.size() == 1 ? datasets.front().name : "pooled";
    fs::create_directories(out);
    {
        std::ofstream js(out / "report.json");
        if (!js) throw Error("cannot open " + (out / "report.json").string());
        js << metrics::report_json(report);
    }
    {
        std::ofstream cs(out / "report.csv");
        if (!cs) throw Error("cannot open " + (out / "report.csv").string());
        cs << metrics::report_csv(report, dataset_name);
    }
    write_manifest(out, "eval", cfg, {"report.json", "report.csv"});

    std::cout << "eval: " << datasets.size() << " dataset" << (datasets.size() == 1 ? "" : "s")
              << ", auroc "
              << (report.auroc ? render_metric(*report.auroc) : std::string("n/a")) << "\n";
    return 0;
}

int cmd_diagnose(const RunConfig& cfg, const fs::path& ckpt_path,
                 const std::vector<std::string>& head_paths, const std::string& task_dir,
                 const std::string& csv_path, const fs::path& out) {
    if (task_dir.empty() == csv_path.empty())
        throw UsageFailure{"diagnose: supply exactly one of --task-dir or --csv"};

    bb::Checkpoint ckpt = bb::load_checkpoint(ckpt_path);
    std::vector<heads::HeadParams> attached = load_heads(head_paths);

    EvalDataset ds = task_dir.empty() ? dataset_from_csv(csv_path, cfg, ckpt.config.d_max)
                                      : dataset_from_task_dir(task_dir);
    heads::DiagnoseResult res = heads::diagnose(ckpt, attached, ds.context, ds.queries);

    fs::create_directories(out);
    heads::write_diagnose_csv(out / "diagnose.csv", res);
    heads::write_diagnose_summary_json(out / "summary.json", res);
    write_manifest(out, "diagnose", cfg, {"diagnose.csv", "summary.json"});

    double mean_p = 0.0;
    for (double p : res.p_outlier) mean_p += p;
    if (!res.p_outlier.empty()) mean_p /= static_cast<double>(res.p_outlier.size());
    std::cout << "diagnose: " << res.p_outlier.size() << " queries, mean p_outlier "
              << render_metric(mean_p) << "\n";
    return 0;
}

int cmd_bench(const RunConfig& cfg, const fs::path& ckpt_path,
              const std::vector<std::string>& head_paths, std::size_t reps, std::size_t n_tasks,
              const std::string& out) {
    bb::Checkpoint ckpt = bb::load_checkpoint(ckpt_path);
    std::vector<heads::HeadParams> attached = load_heads(head_paths);

    std::vector<sim::Task> tasks;
    tasks.reserve(n_tasks);
    for (std::size_t id = 0; id < n_tasks; ++id)
        tasks.push_back(sim::generate_task(cfg.simulator, cfg.seed.value_or(0), id).task);

    metrics::TimingStats ts = bench::bench_inference(ckpt, attached, tasks, reps);

    char line[160];
    std::snprintf(line, sizeof line,
                  "bench: backbone %.1f ns/sample, with heads %.1f ns/sample, overhead %.2f%%",
                  ts.backbone_ns_per_sample, ts.with_heads_ns_per_sample,
                  ts.overhead_fraction * 100.0);
    std::cout << line << "\n";

    if (!out.empty()) {
        fs::create_directories(out);
        nlohmann::json t = {
            {"backbone_ns_per_sample", ts.backbone_ns_per_sample},
            {"with_heads_ns_per_sample", ts.with_heads_ns_per_sample},
            {"overhead_fraction", ts.overhead_fraction},
        };
        std::ofstream js(fs::path(out) / "timing.json");
        if (!js) throw Error("cannot open " + (fs::path(out) / "timing.json").string());
        js << t.dump(2) << '\n';
        write_manifest(out, "bench", cfg, {"timing.json"});
    }
    return 0;
}

// --- dispatch --------------------------------------------------------------------

int run_guarded(const std::function<int()>& fn) {
    try {
        return fn();
    } catch (const UsageFailure& u) {
        std::cerr << "error: " << u.message << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const SimulatorError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"fomox — in-context outlier detection: simulator, pretraining, "
                 "diagnostic heads, evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed_flag;
    int threads = 0;
    app.add_option("--config", config_path, "JSON run configuration file");
    app.add_option("--seed", seed_flag, "seed overriding the config's \"seed\" field");
    app.add_option("--threads", threads, "worker thread count (0 = library default)");

    // simulate
    auto* c_sim = app.add_subcommand("simulate", "write synthetic task directories");
    c_sim->fallthrough();
    std::string sim_out;
    std::size_t sim_n_tasks = 0;
    c_sim->add_option("--out", sim_out, "run directory")->required();
    c_sim->add_option("--n-tasks", sim_n_tasks, "number of task directories")->required();

    // pretrain
    auto* c_pre = app.add_subcommand("pretrain", "pretrain the backbone on simulator tasks");
    c_pre->fallthrough();
    std::string pre_out;
    c_pre->add_option("--out", pre_out, "run directory")->required();

    // train-head
    auto* c_head = app.add_subcommand("train-head", "train one diagnostic head on a frozen "
                                                    "backbone");
    c_head->fallthrough();
    std::string th_ckpt, th_name, th_out;
    c_head->add_option("--ckpt", th_ckpt, "backbone checkpoint file")->required();
    c_head->add_option("--head", th_name, "severity | uncertainty | auroc | threshold")
        ->required();
    c_head->add_option("--out", th_out, "run directory")->required();

    // eval
    auto* c_eval = app.add_subcommand("eval", "score datasets and write a metric report");
    c_eval->fallthrough();
    std::string ev_ckpt, ev_csv, ev_out;
    std::vector<std::string> ev_heads, ev_task_dirs;
    c_eval->add_option("--ckpt", ev_ckpt, "backbone checkpoint file")->required();
    c_eval->add_option("--head", ev_heads, "trained head file (repeatable)");
    c_eval->add_option("--task-dir", ev_task_dirs, "synthetic task directory (repeatable)");
    c_eval->add_option("--csv", ev_csv, "labeled CSV dataset");
    c_eval->add_option("--out", ev_out, "run directory")->required();

    // diagnose
    auto* c_diag = app.add_subcommand("diagnose", "per-query scores and head readouts for one "
                                                  "dataset");
    c_diag->fallthrough();
    std::string dg_ckpt, dg_task_dir, dg_csv, dg_out;
    std::vector<std::string> dg_heads;
    c_diag->add_option("--ckpt", dg_ckpt, "backbone checkpoint file")->required();
    c_diag->add_option("--head", dg_heads, "trained head file (repeatable)");
    c_diag->add_option("--task-dir", dg_task_dir, "synthetic task directory");
    c_diag->add_option("--csv", dg_csv, "labeled CSV dataset");
    c_diag->add_option("--out", dg_out, "run directory")->required();

    // bench
    auto* c_bench = app.add_subcommand("bench", "time inference with and without heads");
    c_bench->fallthrough();
    std::string bn_ckpt, bn_out;
    std::vector<std::string> bn_heads;
    std::size_t bn_reps = 100, bn_n_tasks = 3;
    c_bench->add_option("--ckpt", bn_ckpt, "backbone checkpoint file")->required();
    c_bench->add_option("--head", bn_heads, "trained head file (repeatable)");
    c_bench->add_option("--reps", bn_reps, "timing repetitions (default 100)");
    c_bench->add_option("--n-tasks", bn_n_tasks, "synthetic tasks to time (default 3)");
    c_bench->add_option("--out", bn_out, "run directory for timing.json (optional)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1; // --help exits 0; all parse problems are usage errors
    }

#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#endif

    return run_guarded([&]() -> int {
        RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (seed_flag) cfg.seed = *seed_flag; // the flag wins over the config field

        if (*c_sim) return cmd_simulate(cfg, sim_out, sim_n_tasks);
        if (*c_pre) return cmd_pretrain(cfg, pre_out);
        if (*c_head) return cmd_train_head(cfg, th_ckpt, th_name, th_out);
        if (*c_eval) return cmd_eval(cfg, ev_ckpt, ev_heads, ev_task_dirs, ev_csv, ev_out);
        if (*c_diag) return cmd_diagnose(cfg, dg_ckpt, dg_heads, dg_task_dir, dg_csv, dg_out);
        if (*c_bench) return cmd_bench(cfg, bn_ckpt, bn_heads, bn_reps, bn_n_tasks, bn_out);
        throw UsageFailure{"no command selected"};
    });
}
