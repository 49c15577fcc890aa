#include "fomox/runconfig.hpp"

#include <fstream>
#include <initializer_list>

#include "fomox/errors.hpp"
#include "fomox/fmx.hpp"

namespace fomox {

namespace {

using nlohmann::json;

void require_object(const json& j, const std::string& where) {
    if (!j.is_object()) throw ParseError("config: " + where + " must be a JSON object");
}

void reject_unknown(const json& j, const std::string& where,
                    std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            if (key == a) {
                known = true;
                break;
            }
        if (!known) throw ParseError("config: unknown key '" + where + key + "'");
    }
}

template <typename T>
void read_field(const json& j, const std::string& where, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ParseError("config: " + where + key + " has the wrong type");
    }
}

void read_interval(const json& j, const std::string& where, const char* key,
                   sim::IntervalI& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_array() || v.size() != 2)
        throw ParseError("config: " + where + key + " must be a [lo, hi] pair");
    try {
        out.lo = v[0].get<int>();
        out.hi = v[1].get<int>();
    } catch (const json::exception&) {
        throw ParseError("config: " + where + key + " has the wrong type");
    }
}

void read_interval(const json& j, const std::string& where, const char* key,
                   sim::IntervalD& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_array() || v.size() != 2)
        throw ParseError("config: " + where + key + " must be a [lo, hi] pair");
    try {
        out.lo = v[0].get<double>();
        out.hi = v[1].get<double>();
    } catch (const json::exception&) {
        throw ParseError("config: " + where + key + " has the wrong type");
    }
}

void parse_simulator(const json& j, sim::SimulatorConfig& cfg) {
    const std::string where = "simulator.";
    require_object(j, "simulator");
    reject_unknown(j, where,
                   {"d_range", "m_range", "center_range", "eigenvalue_scale_range",
                    "inlier_percentile", "inflation_range", "inflate_fraction_range",
                    "n_inlier_pool", "n_outlier_pool", "n_context", "n_query",
                    "max_rejection_factor", "d_max", "diagonal_only"});
    read_interval(j, where, "d_range", cfg.d_range);
    read_interval(j, where, "m_range", cfg.m_range);
    read_interval(j, where, "center_range", cfg.center_range);
    read_interval(j, where, "eigenvalue_scale_range", cfg.eigenvalue_scale_range);
    read_field(j, where, "inlier_percentile", cfg.inlier_percentile);
    read_interval(j, where, "inflation_range", cfg.inflation_range);
    read_interval(j, where, "inflate_fraction_range", cfg.inflate_fraction_range);
    read_field(j, where, "n_inlier_pool", cfg.n_inlier_pool);
    read_field(j, where, "n_outlier_pool", cfg.n_outlier_pool);
    read_field(j, where, "n_context", cfg.n_context);
    read_field(j, where, "n_query", cfg.n_query);
    read_field(j, where, "max_rejection_factor", cfg.max_rejection_factor);
    read_field(j, where, "d_max", cfg.d_max);
    read_field(j, where, "diagonal_only", cfg.diagonal_only);
}

void parse_backbone(const json& j, bb::BackboneConfig& cfg, bb::PretrainSchedule& sched) {
    const std::string where = "backbone.";
    require_object(j, "backbone");
    reject_unknown(j, where,
                   {"d_max", "token_dim", "n_layers", "n_attn_heads", "mlp_ratio", "dropout_p",
                    "train_dropout", "epochs", "batches_per_epoch", "tasks_per_batch", "lr",
                    "lr_decay", "decay_every"});
    read_field(j, where, "d_max", cfg.d_max);
    read_field(j, where, "token_dim", cfg.token_dim);
    read_field(j, where, "n_layers", cfg.n_layers);
    read_field(j, where, "n_attn_heads", cfg.n_attn_heads);
    read_field(j, where, "mlp_ratio", cfg.mlp_ratio);
    read_field(j, where, "dropout_p", cfg.dropout_p);
    read_field(j, where, "train_dropout", cfg.train_dropout);
    read_field(j, where, "epochs", sched.epochs);
    read_field(j, where, "batches_per_epoch", sched.batches_per_epoch);
    read_field(j, where, "tasks_per_batch", sched.tasks_per_batch);
    read_field(j, where, "lr", sched.lr);
    read_field(j, where, "lr_decay", sched.lr_decay);
    read_field(j, where, "decay_every", sched.decay_every);
}

void parse_head_training(const json& j, heads::HeadTrainConfig& cfg) {
    const std::string where = "head_training.";
    require_object(j, "head_training");
    reject_unknown(j, where,
                   {"epochs", "batches_per_epoch", "datasets_per_batch", "lr", "lr_decay",
                    "decay_every", "mc_passes", "dropout_p", "eps"});
    read_field(j, where, "epochs", cfg.epochs);
    read_field(j, where, "batches_per_epoch", cfg.batches_per_epoch);
    read_field(j, where, "datasets_per_batch", cfg.datasets_per_batch);
    read_field(j, where, "lr", cfg.lr);
    read_field(j, where, "lr_decay", cfg.lr_decay);
    read_field(j, where, "decay_every", cfg.decay_every);
    read_field(j, where, "mc_passes", cfg.mc_passes);
    read_field(j, where, "dropout_p", cfg.dropout_p);
    read_field(j, where, "eps", cfg.eps);
}

void parse_eval(const json& j, EvalConfig& cfg) {
    const std::string where = "eval.";
    require_object(j, "eval");
    reject_unknown(j, where,
                   {"mc_passes", "dropout_p", "eps", "label_column", "context_fraction"});
    read_field(j, where, "mc_passes", cfg.mc_passes);
    read_field(j, where, "dropout_p", cfg.dropout_p);
    read_field(j, where, "eps", cfg.eps);
    read_field(j, where, "label_column", cfg.label_column);
    read_field(j, where, "context_fraction", cfg.context_fraction);
}

} // namespace

void EvalConfig::validate() const {
    if (mc_passes < 2) throw DomainError("eval config: mc_passes must be >= 2");
    if (!(dropout_p > 0.0 && dropout_p < 1.0))
        throw DomainError("eval config: dropout_p must lie in (0,1)");
    if (!(eps > 0.0)) throw DomainError("eval config: eps must be positive");
    if (label_column.empty()) throw DomainError("eval config: label_column must be nonempty");
    if (!(context_fraction > 0.0 && context_fraction < 1.0))
        throw DomainError("eval config: context_fraction must lie in (0,1)");
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    require_object(j, "document root");
    reject_unknown(j, "", {"simulator", "backbone", "head_training", "eval", "seed"});

    RunConfig cfg;
    if (j.contains("simulator")) parse_simulator(j.at("simulator"), cfg.simulator);
    if (j.contains("backbone")) parse_backbone(j.at("backbone"), cfg.backbone, cfg.schedule);
    if (j.contains("head_training")) parse_head_training(j.at("head_training"), cfg.head_training);
    if (j.contains("eval")) parse_eval(j.at("eval"), cfg.eval);
    if (j.contains("seed")) {
        // get<uint64_t>() would silently wrap a negative value, so check the
        // stored representation instead of relying on the conversion to throw.
        const json& s = j.at("seed");
        const bool negative = s.is_number_integer() && !s.is_number_unsigned() &&
                              s.get<std::int64_t>() < 0;
        if (!s.is_number_integer() || negative)
            throw ParseError("config: seed must be an unsigned integer");
        cfg.seed = s.get<std::uint64_t>();
    }

    cfg.simulator.validate();
    cfg.backbone.validate();
    cfg.head_training.validate();
    cfg.eval.validate();
    // The pretrain schedule has no validate() of its own; mirror the checks
    // pretrain() performs so bad values surface at config load time.
    if (cfg.schedule.tasks_per_batch < 1 || cfg.schedule.decay_every < 1)
        throw DomainError("backbone config: schedule sizes must be >= 1");
    if (!(cfg.schedule.lr > 0.0) || !(cfg.schedule.lr_decay > 0.0))
        throw DomainError("backbone config: lr and lr_decay must be positive");
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("config: cannot open " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["simulator"] = {
        {"d_range", {cfg.simulator.d_range.lo, cfg.simulator.d_range.hi}},
        {"m_range", {cfg.simulator.m_range.lo, cfg.simulator.m_range.hi}},
        {"center_range", {cfg.simulator.center_range.lo, cfg.simulator.center_range.hi}},
        {"eigenvalue_scale_range",
         {cfg.simulator.eigenvalue_scale_range.lo, cfg.simulator.eigenvalue_scale_range.hi}},
        {"inlier_percentile", cfg.simulator.inlier_percentile},
        {"inflation_range", {cfg.simulator.inflation_range.lo, cfg.simulator.inflation_range.hi}},
        {"inflate_fraction_range",
         {cfg.simulator.inflate_fraction_range.lo, cfg.simulator.inflate_fraction_range.hi}},
        {"n_inlier_pool", cfg.simulator.n_inlier_pool},
        {"n_outlier_pool", cfg.simulator.n_outlier_pool},
        {"n_context", cfg.simulator.n_context},
        {"n_query", cfg.simulator.n_query},
        {"max_rejection_factor", cfg.simulator.max_rejection_factor},
        {"d_max", cfg.simulator.d_max},
        {"diagonal_only", cfg.simulator.diagonal_only},
    };
    j["backbone"] = {
        {"d_max", cfg.backbone.d_max},
        {"token_dim", cfg.backbone.token_dim},
        {"n_layers", cfg.backbone.n_layers},
        {"n_attn_heads", cfg.backbone.n_attn_heads},
        {"mlp_ratio", cfg.backbone.mlp_ratio},
        {"dropout_p", cfg.backbone.dropout_p},
        {"train_dropout", cfg.backbone.train_dropout},
        {"epochs", cfg.schedule.epochs},
        {"batches_per_epoch", cfg.schedule.batches_per_epoch},
        {"tasks_per_batch", cfg.schedule.tasks_per_batch},
        {"lr", cfg.schedule.lr},
        {"lr_decay", cfg.schedule.lr_decay},
        {"decay_every", cfg.schedule.decay_every},
    };
    j["head_training"] = {
        {"epochs", cfg.head_training.epochs},
        {"batches_per_epoch", cfg.head_training.batches_per_epoch},
        {"datasets_per_batch", cfg.head_training.datasets_per_batch},
        {"lr", cfg.head_training.lr},
        {"lr_decay", cfg.head_training.lr_decay},
        {"decay_every", cfg.head_training.decay_every},
        {"mc_passes", cfg.head_training.mc_passes},
        {"dropout_p", cfg.head_training.dropout_p},
        {"eps", cfg.head_training.eps},
    };
    j["eval"] = {
        {"mc_passes", cfg.eval.mc_passes},
        {"dropout_p", cfg.eval.dropout_p},
        {"eps", cfg.eval.eps},
        {"label_column", cfg.eval.label_column},
        {"context_fraction", cfg.eval.context_fraction},
    };
    if (cfg.seed)
        j["seed"] = *cfg.seed;
    else
        j["seed"] = nullptr;
    return j;
}

std::uint64_t run_config_hash(const RunConfig& cfg) {
    return fmx::fnv1a(run_config_to_json(cfg).dump());
}

} // namespace fomox
