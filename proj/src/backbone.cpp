#include "fomox/backbone.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fomox/adam.hpp"
#include "fomox/csv.hpp"
#include "fomox/errors.hpp"
#include "fomox/fmx.hpp"

namespace fomox::bb {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kStdFloor = 1e-8;
constexpr char kMagic[4] = {'F', 'M', 'X', '1'};

// Canonical tensor names and config-implied shapes, in serialization order.
std::vector<std::pair<std::string, std::vector<std::size_t>>> expected_tensors(
    const BackboneConfig& cfg) {
    std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
    std::size_t t = cfg.token_dim, m = cfg.mlp_dim();
    out.emplace_back("embed.weight", std::vector<std::size_t>{cfg.d_max, t});
    out.emplace_back("embed.bias", std::vector<std::size_t>{t});
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        std::string p = "layers." + std::to_string(i) + ".";
        out.emplace_back(p + "norm1.gamma", std::vector<std::size_t>{t});
        out.emplace_back(p + "norm1.beta", std::vector<std::size_t>{t});
        out.emplace_back(p + "attn.wq", std::vector<std::size_t>{t, t});
        out.emplace_back(p + "attn.bq", std::vector<std::size_t>{t});
        out.emplace_back(p + "attn.wk", std::vector<std::size_t>{t, t});
        out.emplace_back(p + "attn.bk", std::vector<std::size_t>{t});
        out.emplace_back(p + "attn.wv", std::vector<std::size_t>{t, t});
        out.emplace_back(p + "attn.bv", std::vector<std::size_t>{t});
        out.emplace_back(p + "attn.wo", std::vector<std::size_t>{t, t});
        out.emplace_back(p + "attn.bo", std::vector<std::size_t>{t});
        out.emplace_back(p + "norm2.gamma", std::vector<std::size_t>{t});
        out.emplace_back(p + "norm2.beta", std::vector<std::size_t>{t});
        out.emplace_back(p + "mlp.w1", std::vector<std::size_t>{t, m});
        out.emplace_back(p + "mlp.b1", std::vector<std::size_t>{m});
        out.emplace_back(p + "mlp.w2", std::vector<std::size_t>{m, t});
        out.emplace_back(p + "mlp.b2", std::vector<std::size_t>{t});
    }
    out.emplace_back("od.w1", std::vector<std::size_t>{t, 2 * t});
    out.emplace_back("od.b1", std::vector<std::size_t>{2 * t});
    out.emplace_back("od.w2", std::vector<std::size_t>{2 * t, 2});
    out.emplace_back("od.b2", std::vector<std::size_t>{2});
    return out;
}

nlohmann::json config_to_json(const BackboneConfig& cfg) {
    return nlohmann::json{{"d_max", cfg.d_max},
                          {"token_dim", cfg.token_dim},
                          {"n_layers", cfg.n_layers},
                          {"n_attn_heads", cfg.n_attn_heads},
                          {"mlp_ratio", cfg.mlp_ratio},
                          {"dropout_p", cfg.dropout_p},
                          {"train_dropout", cfg.train_dropout}};
}

BackboneConfig config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("checkpoint config is not valid JSON: ") + e.what());
    }
    BackboneConfig cfg;
    try {
        cfg.d_max = j.at("d_max").get<std::size_t>();
        cfg.token_dim = j.at("token_dim").get<std::size_t>();
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.n_attn_heads = j.at("n_attn_heads").get<std::size_t>();
        cfg.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
        cfg.dropout_p = j.at("dropout_p").get<double>();
        cfg.train_dropout = j.at("train_dropout").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("checkpoint config is missing a field: ") + e.what());
    }
    try {
        cfg.validate();
    } catch (const DomainError& e) {
        throw LoadError(std::string("checkpoint config is invalid: ") + e.what());
    }
    return cfg;
}

Tensor matrix_to_tensor(const Matrix& m) {
    return Tensor::from_data({m.rows, m.cols}, m.data);
}

Matrix tensor_to_matrix(const Tensor& t) {
    Matrix m(t.rows(), t.cols());
    auto src = t.data();
    std::copy(src.begin(), src.end(), m.data.begin());
    return m;
}

} // namespace

void BackboneConfig::validate() const {
    if (d_max < 1 || token_dim < 1 || n_layers < 1 || n_attn_heads < 1 || mlp_ratio < 1)
        throw DomainError("backbone config: all sizes must be >= 1");
    if (token_dim % n_attn_heads != 0)
        throw DomainError("backbone config: token_dim " + std::to_string(token_dim) +
                          " is not divisible by n_attn_heads " + std::to_string(n_attn_heads));
    if (!(dropout_p >= 0.0 && dropout_p < 1.0))
        throw DomainError("backbone config: dropout_p must lie in [0,1)");
}

std::vector<std::pair<std::string, Tensor>> Checkpoint::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embed.weight", embed_w);
    out.emplace_back("embed.bias", embed_b);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerParams& l = layers[i];
        std::string p = "layers." + std::to_string(i) + ".";
        out.emplace_back(p + "norm1.gamma", l.norm1_gamma);
        out.emplace_back(p + "norm1.beta", l.norm1_beta);
        out.emplace_back(p + "attn.wq", l.wq);
        out.emplace_back(p + "attn.bq", l.bq);
        out.emplace_back(p + "attn.wk", l.wk);
        out.emplace_back(p + "attn.bk", l.bk);
        out.emplace_back(p + "attn.wv", l.wv);
        out.emplace_back(p + "attn.bv", l.bv);
        out.emplace_back(p + "attn.wo", l.wo);
        out.emplace_back(p + "attn.bo", l.bo);
        out.emplace_back(p + "norm2.gamma", l.norm2_gamma);
        out.emplace_back(p + "norm2.beta", l.norm2_beta);
        out.emplace_back(p + "mlp.w1", l.mlp_w1);
        out.emplace_back(p + "mlp.b1", l.mlp_b1);
        out.emplace_back(p + "mlp.w2", l.mlp_w2);
        out.emplace_back(p + "mlp.b2", l.mlp_b2);
    }
    out.emplace_back("od.w1", od_w1);
    out.emplace_back("od.b1", od_b1);
    out.emplace_back("od.w2", od_w2);
    out.emplace_back("od.b2", od_b2);
    return out;
}

std::vector<Tensor> Checkpoint::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

Checkpoint init_checkpoint(const BackboneConfig& cfg, RandomSource& rng) {
    cfg.validate();
    std::size_t t = cfg.token_dim, m = cfg.mlp_dim();
    auto proj = [&](std::vector<std::size_t> shape) {
        return Tensor::randn(std::move(shape), kInitStd, rng, /*requires_grad=*/true);
    };
    auto zeros = [](std::vector<std::size_t> shape) {
        return Tensor::zeros(std::move(shape), /*requires_grad=*/true);
    };
    auto ones = [](std::vector<std::size_t> shape) {
        return Tensor::full(std::move(shape), 1.0, /*requires_grad=*/true);
    };
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.embed_w = proj({cfg.d_max, t});
    ckpt.embed_b = zeros({t});
    ckpt.layers.resize(cfg.n_layers);
    for (auto& l : ckpt.layers) {
        l.norm1_gamma = ones({t});
        l.norm1_beta = zeros({t});
        l.wq = proj({t, t});
        l.bq = zeros({t});
        l.wk = proj({t, t});
        l.bk = zeros({t});
        l.wv = proj({t, t});
        l.bv = zeros({t});
        l.wo = proj({t, t});
        l.bo = zeros({t});
        l.norm2_gamma = ones({t});
        l.norm2_beta = zeros({t});
        l.mlp_w1 = proj({t, m});
        l.mlp_b1 = zeros({m});
        l.mlp_w2 = proj({m, t});
        l.mlp_b2 = zeros({t});
    }
    ckpt.od_w1 = proj({t, 2 * t});
    ckpt.od_b1 = zeros({2 * t});
    ckpt.od_w2 = proj({2 * t, 2});
    ckpt.od_b2 = zeros({2});
    return ckpt;
}

Normalized normalize(const Matrix& context, const Matrix& queries) {
    if (context.rows == 0) throw ContractError("normalize: context must be nonempty");
    if (queries.cols != context.cols)
        throw ContractError("normalize: query width " + std::to_string(queries.cols) +
                            " differs from context width " + std::to_string(context.cols));
    std::size_t n = context.rows, d = context.cols;
    Normalized out;
    out.stats.mean.resize(d);
    out.stats.stddev.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += context.at(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double diff = context.at(i, j) - mean;
            var += diff * diff;
        }
        var /= static_cast<double>(n);
        out.stats.mean[j] = mean;
        out.stats.stddev[j] = std::max(std::sqrt(var), kStdFloor);
    }
    auto apply = [&](const Matrix& src) {
        Matrix dst(src.rows, src.cols);
        for (std::size_t i = 0; i < src.rows; ++i)
            for (std::size_t j = 0; j < d; ++j)
                dst.at(i, j) = (src.at(i, j) - out.stats.mean[j]) / out.stats.stddev[j];
        return dst;
    };
    out.context = apply(context);
    out.queries = apply(queries);
    return out;
}

namespace {
std::atomic<std::uint64_t> g_encode_calls{0};
} // namespace

std::uint64_t encode_invocations() { return g_encode_calls.load(); }

Tensor encode_graph(const Checkpoint& ckpt, const Matrix& context, const Matrix& queries,
                    const DropoutSpec& dropout) {
    g_encode_calls.fetch_add(1, std::memory_order_relaxed);
    const BackboneConfig& cfg = ckpt.config;
    if (context.cols != cfg.d_max || queries.cols != cfg.d_max)
        throw ContractError("encode: inputs must be padded to d_max=" +
                            std::to_string(cfg.d_max) + ", got context width " +
                            std::to_string(context.cols) + ", query width " +
                            std::to_string(queries.cols));
    if (context.rows == 0) throw ContractError("encode: context must be nonempty");
    if (queries.rows == 0) throw ContractError("encode: no queries");

    Normalized nm = normalize(context, queries);
    std::size_t n_ctx = context.rows, n_q = queries.rows;
    std::size_t total = n_ctx + n_q;
    std::vector<double> rows;
    rows.reserve(total * cfg.d_max);
    rows.insert(rows.end(), nm.context.data.begin(), nm.context.data.end());
    rows.insert(rows.end(), nm.queries.data.begin(), nm.queries.data.end());
    Tensor x = Tensor::from_data({total, cfg.d_max}, std::move(rows));

    Tensor h = add_rowvec(matmul(x, ckpt.embed_w), ckpt.embed_b);
    std::size_t dh = cfg.head_dim();
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const LayerParams& l : ckpt.layers) {
        // Keys/values come from context rows only: every token attends to
        // the context set and nothing else, so queries stay mutually
        // invisible while context tokens see each other.
        Tensor ln1 = layer_norm(h, l.norm1_gamma, l.norm1_beta);
        Tensor ctx_ln = slice_rows(ln1, 0, n_ctx);
        Tensor q = add_rowvec(matmul(ln1, l.wq), l.bq);
        Tensor k = add_rowvec(matmul(ctx_ln, l.wk), l.bk);
        Tensor v = add_rowvec(matmul(ctx_ln, l.wv), l.bv);
        std::vector<Tensor> heads;
        heads.reserve(cfg.n_attn_heads);
        for (std::size_t hh = 0; hh < cfg.n_attn_heads; ++hh) {
            Tensor qh = slice_cols(q, hh * dh, dh);
            Tensor kh = slice_cols(k, hh * dh, dh);
            Tensor vh = slice_cols(v, hh * dh, dh);
            Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
            heads.push_back(matmul(softmax(scores, -1), vh));
        }
        Tensor attn_out = add_rowvec(matmul(concat_cols(heads), l.wo), l.bo);
        if (dropout.on()) attn_out = fomox::dropout(attn_out, dropout.p, *dropout.rng);
        h = add(h, attn_out);

        Tensor ln2 = layer_norm(h, l.norm2_gamma, l.norm2_beta);
        Tensor mid = gelu(add_rowvec(matmul(ln2, l.mlp_w1), l.mlp_b1));
        Tensor mlp_out = add_rowvec(matmul(mid, l.mlp_w2), l.mlp_b2);
        if (dropout.on()) mlp_out = fomox::dropout(mlp_out, dropout.p, *dropout.rng);
        h = add(h, mlp_out);
    }
    return slice_rows(h, n_ctx, n_q);
}

Tensor od_logits_graph(const Checkpoint& ckpt, const Tensor& z) {
    Tensor hidden = gelu(add_rowvec(matmul(z, ckpt.od_w1), ckpt.od_b1));
    return add_rowvec(matmul(hidden, ckpt.od_w2), ckpt.od_b2);
}

Matrix encode(const Checkpoint& ckpt, const Matrix& context, const Matrix& queries) {
    return tensor_to_matrix(encode_graph(ckpt, context, queries, {}));
}

Matrix encode_stochastic(const Checkpoint& ckpt, const Matrix& context, const Matrix& queries,
                         double p, RandomSource& rng) {
    DropoutSpec spec{p, &rng};
    return tensor_to_matrix(encode_graph(ckpt, context, queries, spec));
}

OdResult od_score(const Checkpoint& ckpt, const Matrix& z) {
    if (z.cols != ckpt.config.token_dim)
        throw ContractError("od_score: embedding width " + std::to_string(z.cols) +
                            " does not match token_dim " +
                            std::to_string(ckpt.config.token_dim));
    Tensor logits_t = od_logits_graph(ckpt, matrix_to_tensor(z));
    OdResult out;
    out.logits = tensor_to_matrix(logits_t);
    out.p_outlier.resize(z.rows);
    for (std::size_t i = 0; i < z.rows; ++i) {
        double l0 = out.logits.at(i, 0), l1 = out.logits.at(i, 1);
        double m = std::max(l0, l1);
        double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        out.p_outlier[i] = e1 / (e0 + e1);
    }
    return out;
}

std::vector<double> score_p_outlier(const Checkpoint& ckpt, const Matrix& context,
                                    const Matrix& queries) {
    return od_score(ckpt, encode(ckpt, context, queries)).p_outlier;
}

std::vector<double> mc_dropout_std(const Checkpoint& ckpt, const Matrix& context,
                                   const Matrix& queries, std::size_t M, double p,
                                   RandomSource& rng) {
    if (M < 2) throw DomainError("mc_dropout_std: need at least 2 passes, got " +
                                 std::to_string(M));
    if (!(p > 0.0 && p < 1.0))
        throw DomainError("mc_dropout_std: dropout probability must lie in (0,1)");
    std::size_t n = queries.rows;
    std::vector<std::vector<double>> passes(M);
    for (std::size_t t = 0; t < M; ++t) {
        RandomSource pass_rng = rng.substream(t);
        Matrix z = encode_stochastic(ckpt, context, queries, p, pass_rng);
        passes[t] = od_score(ckpt, z).p_outlier;
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (std::size_t t = 0; t < M; ++t) mean += passes[t][i];
        mean /= static_cast<double>(M);
        double ss = 0.0;
        for (std::size_t t = 0; t < M; ++t) {
            double diff = passes[t][i] - mean;
            ss += diff * diff;
        }
        out[i] = std::sqrt(ss / static_cast<double>(M - 1));
    }
    return out;
}

PretrainResult pretrain(const BackboneConfig& cfg, const sim::SimulatorConfig& sim_cfg,
                        const PretrainSchedule& schedule, std::uint64_t seed) {
    cfg.validate();
    sim_cfg.validate();
    if (sim_cfg.d_max != cfg.d_max)
        throw DomainError("pretrain: simulator d_max " + std::to_string(sim_cfg.d_max) +
                          " does not match backbone d_max " + std::to_string(cfg.d_max));
    if (schedule.tasks_per_batch < 1 || schedule.decay_every < 1)
        throw DomainError("pretrain: schedule sizes must be >= 1");

    RandomSource init_rng(seed, 0x1A17);
    Checkpoint ckpt = init_checkpoint(cfg, init_rng);
    std::vector<Tensor> params = ckpt.parameters();
    AdamState state(params, schedule.lr);
    RandomSource dropout_rng(seed, 0xD409);
    bool use_dropout = cfg.train_dropout && cfg.dropout_p > 0.0;

    PretrainResult result;
    std::uint64_t task_id = 0;
    for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
        double lr = schedule.lr *
                    std::pow(schedule.lr_decay, static_cast<double>(epoch / schedule.decay_every));
        state.lr = lr;
        double loss_sum = 0.0;
        for (std::size_t batch = 0; batch < schedule.batches_per_epoch; ++batch) {
            Tensor batch_loss;
            std::uint64_t first_id = task_id;
            for (std::size_t t = 0; t < schedule.tasks_per_batch; ++t) {
                sim::GeneratedTask gt = sim::generate_task(sim_cfg, seed, task_id++);
                DropoutSpec spec;
                if (use_dropout) spec = DropoutSpec{cfg.dropout_p, &dropout_rng};
                Tensor z = encode_graph(ckpt, gt.task.context, gt.task.queries, spec);
                Tensor task_loss = cross_entropy_mean(od_logits_graph(ckpt, z), gt.task.labels);
                batch_loss = batch_loss.defined() ? add(batch_loss, task_loss) : task_loss;
            }
            batch_loss = scale(batch_loss, 1.0 / static_cast<double>(schedule.tasks_per_batch));
            double loss_value = batch_loss.value();
            if (!std::isfinite(loss_value))
                throw NumericalError(
                    "pretrain: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(batch) + " (task seed " + std::to_string(seed) +
                    ", task ids [" + std::to_string(first_id) + ", " + std::to_string(task_id) +
                    "))");
            backward(batch_loss);
            adam_step(params, state);
            loss_sum += loss_value;
        }
        result.log.push_back(
            {epoch, loss_sum / static_cast<double>(schedule.batches_per_epoch), lr});
    }
    result.checkpoint = std::move(ckpt);
    return result;
}

// --- persistence ---------------------------------------------------------------

namespace {

void save_to_stream(const Checkpoint& ckpt, std::ostream& out) {
    fmx::write_bytes(out, kMagic, 4);
    fmx::write_u32(out, ckpt.version);
    fmx::write_string(out, config_to_json(ckpt.config).dump());
    for (const auto& [name, tensor] : ckpt.named_parameters()) {
        auto span = tensor.data();
        fmx::write_tensor(out, name, tensor.shape(),
                          std::vector<double>(span.begin(), span.end()));
    }
}

} // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::ostringstream out(std::ios::binary);
    save_to_stream(ckpt, out);
    return std::move(out).str();
}

std::uint64_t checkpoint_hash(const Checkpoint& ckpt) {
    return fmx::fnv1a(serialize_checkpoint(ckpt));
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("save_checkpoint: cannot open " + path.string());
    save_to_stream(ckpt, out);
    if (!out) throw Error("save_checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("load_checkpoint: cannot open " + path.string());
    char magic[4];
    if (!in.read(magic, 4)) throw LoadError("load_checkpoint: truncated file (no magic)");
    if (!std::equal(magic, magic + 4, kMagic))
        throw LoadError("load_checkpoint: bad magic in " + path.string());
    std::uint32_t version = fmx::read_u32(in, "format version");
    if (version != kCheckpointVersion)
        throw LoadError("load_checkpoint: unsupported format version " +
                        std::to_string(version));
    BackboneConfig cfg = config_from_json(fmx::read_string(in, "config block"));

    Checkpoint ckpt;
    ckpt.version = version;
    ckpt.config = cfg;
    std::vector<Tensor> loaded;
    for (const auto& [name, shape] : expected_tensors(cfg)) {
        fmx::NamedTensor t = fmx::read_tensor(in);
        if (t.name != name)
            throw LoadError("load_checkpoint: expected tensor '" + name + "', found '" +
                            t.name + "'");
        if (t.shape != shape)
            throw LoadError("load_checkpoint: tensor '" + name +
                            "' has a shape inconsistent with the stored config");
        loaded.push_back(Tensor::from_data(t.shape, std::move(t.data), /*requires_grad=*/true));
    }
    if (!fmx::at_eof(in)) throw LoadError("load_checkpoint: trailing data after tensors");

    std::size_t idx = 0;
    auto next = [&]() { return loaded[idx++]; };
    ckpt.embed_w = next();
    ckpt.embed_b = next();
    ckpt.layers.resize(cfg.n_layers);
    for (auto& l : ckpt.layers) {
        l.norm1_gamma = next();
        l.norm1_beta = next();
        l.wq = next();
        l.bq = next();
        l.wk = next();
        l.bk = next();
        l.wv = next();
        l.bv = next();
        l.wo = next();
        l.bo = next();
        l.norm2_gamma = next();
        l.norm2_beta = next();
        l.mlp_w1 = next();
        l.mlp_b1 = next();
        l.mlp_w2 = next();
        l.mlp_b2 = next();
    }
    ckpt.od_w1 = next();
    ckpt.od_b1 = next();
    ckpt.od_w2 = next();
    ckpt.od_b2 = next();
    return ckpt;
}

void write_loss_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path);
    if (!out) throw Error("write_loss_log_csv: cannot open " + path.string());
    out << "epoch,mean_loss,lr\n";
    for (const EpochLog& e : log)
        out << e.epoch << "," << csv::format_double(e.mean_loss) << ","
            << csv::format_double(e.lr) << "\n";
    if (!out) throw Error("write_loss_log_csv: write failed for " + path.string());
}

std::vector<double> CheckpointScorer::score(const Matrix& context,
                                            const Matrix& queries) const {
    return score_p_outlier(ckpt_, context, queries);
}

std::vector<double> CheckpointScorer::mc_log_u(const Matrix& context, const Matrix& queries,
                                               RandomSource& rng) const {
    std::vector<double> u = mc_dropout_std(ckpt_, context, queries, mc_passes_, dropout_p_, rng);
    for (double& v : u) v = std::log(v + eps_);
    return u;
}

} // namespace fomox::bb
