#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "fomox/backbone.hpp"
#include "fomox/errors.hpp"
#include "fomox/heads.hpp"
#include "fomox/kernels.hpp"
#include "fomox/matrix.hpp"
#include "fomox/metrics.hpp"
#include "fomox/random.hpp"
#include "fomox/simulator.hpp"
#include "fomox/special.hpp"
#include "gradcheck.hpp"

using namespace fomox;
using namespace fomox::heads;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, RandomSource& rng) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = rng.normal();
    return m;
}

bb::BackboneConfig micro_config() {
    bb::BackboneConfig cfg;
    cfg.d_max = 3;
    cfg.token_dim = 8;
    cfg.n_layers = 1;
    cfg.n_attn_heads = 2;
    return cfg;
}

sim::SimulatorConfig micro_sim_config() {
    sim::SimulatorConfig cfg;
    cfg.d_range = {2, 3};
    cfg.m_range = {1, 2};
    cfg.d_max = 3;
    cfg.n_inlier_pool = 60;
    cfg.n_outlier_pool = 40;
    cfg.n_context = 16;
    cfg.n_query = 16;
    return cfg;
}

bb::Checkpoint micro_checkpoint(std::uint64_t seed = 7) {
    RandomSource rng(seed, 0);
    return bb::init_checkpoint(micro_config(), rng);
}

HeadParams zeroed_head(const HeadSpec& spec, std::size_t token_dim) {
    RandomSource rng(1, 1);
    HeadParams hp = init_head(spec, token_dim, rng);
    for (Tensor& p : hp.parameters()) {
        auto data = p.data_mut();
        std::fill(data.begin(), data.end(), 0.0);
    }
    return hp;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    auto da = a.data(), db = b.data();
    return da.size() == db.size() && std::equal(da.begin(), da.end(), db.begin());
}

} // namespace

TEST_CASE("head specs fix the name/output_dim/level table") {
    CHECK(HeadSpec{HeadKind::severity}.name() == "severity");
    CHECK(HeadSpec{HeadKind::severity}.output_dim() == 4);
    CHECK_FALSE(HeadSpec{HeadKind::severity}.dataset_level());
    CHECK_FALSE(HeadSpec{HeadKind::severity}.needs_teacher());

    CHECK(HeadSpec{HeadKind::uncertainty}.name() == "uncertainty");
    CHECK(HeadSpec{HeadKind::uncertainty}.output_dim() == 1);
    CHECK(HeadSpec{HeadKind::uncertainty}.needs_teacher());
    CHECK_FALSE(HeadSpec{HeadKind::uncertainty}.dataset_level());

    for (const char* name : {"auroc", "threshold"}) {
        HeadSpec spec = head_spec_from_name(name);
        CHECK(spec.name() == name);
        CHECK(spec.output_dim() == 1);
        CHECK(spec.dataset_level());
        CHECK_FALSE(spec.needs_teacher());
    }
    CHECK(head_spec_from_name("severity").kind == HeadKind::severity);
    CHECK_THROWS_AS(head_spec_from_name("attribution"), DomainError);
}

TEST_CASE("init_head draws the projection weights and zeroes the biases") {
    RandomSource rng(11, 3);
    HeadParams hp = init_head({HeadKind::severity}, 8, rng);
    CHECK(hp.w1.shape() == std::vector<std::size_t>{8, 16});
    CHECK(hp.b1.shape() == std::vector<std::size_t>{16});
    CHECK(hp.w2.shape() == std::vector<std::size_t>{16, 4});
    CHECK(hp.b2.shape() == std::vector<std::size_t>{4});
    for (double v : hp.b1.data()) CHECK(v == 0.0);
    for (double v : hp.b2.data()) CHECK(v == 0.0);

    // Same stream, replayed by hand in declaration order: w1 then w2.
    RandomSource replay(11, 3);
    Tensor w1 = Tensor::randn({8, 16}, 0.02, replay);
    Tensor w2 = Tensor::randn({16, 4}, 0.02, replay);
    CHECK(bitwise_equal(hp.w1, w1));
    CHECK(bitwise_equal(hp.w2, w2));
}

TEST_CASE("head_forward on all-zero parameters is identically zero") {
    HeadParams hp = zeroed_head({HeadKind::severity}, 8);
    RandomSource rng(5, 5);
    Matrix z = random_matrix(6, 8, rng);
    Matrix out = head_forward(hp, z);
    REQUIRE(out.rows == 6);
    REQUIRE(out.cols == 4);
    for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("head_forward unit construction is hand-computable") {
    // W1 embeds the token identity into the doubled hidden space, W2 reads
    // hidden coordinate 0 back out; on z = e1 the output is gelu(1).
    std::size_t t = 4;
    HeadParams hp = zeroed_head({HeadKind::uncertainty}, t);
    {
        auto w1 = hp.w1.data_mut(); // t x 2t
        for (std::size_t i = 0; i < t; ++i) w1[i * 2 * t + i] = 1.0;
        auto w2 = hp.w2.data_mut(); // 2t x 1
        w2[0] = 1.0;
    }
    Matrix z(1, t);
    z.at(0, 0) = 1.0;
    Matrix out = head_forward(hp, z);
    REQUIRE(out.rows == 1);
    REQUIRE(out.cols == 1);
    CHECK(out.at(0, 0) == doctest::Approx(gelu_scalar(1.0)).epsilon(1e-15));

    // A bias on the second layer shifts the readout additively.
    hp.b2.data_mut()[0] = 2.5;
    CHECK(head_forward(hp, z).at(0, 0) ==
          doctest::Approx(gelu_scalar(1.0) + 2.5).epsilon(1e-15));
}

TEST_CASE("head_forward matches the two-step matmul/gelu oracle") {
    std::size_t t = 8, n = 5;
    RandomSource rng(21, 0);
    HeadParams hp = init_head({HeadKind::severity}, t, rng);
    Matrix z = random_matrix(n, t, rng);

    Matrix out = head_forward(hp, z);

    // Oracle: explicit affine -> gelu -> affine with the serial kernel.
    std::size_t hidden = 2 * t;
    std::vector<double> h1(n * hidden);
    kernels::matmul_serial(z.data.data(), hp.w1.data().data(), h1.data(), n, t, hidden);
    auto b1 = hp.b1.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hidden; ++j)
            h1[i * hidden + j] = gelu_scalar(h1[i * hidden + j] + b1[j]);
    std::vector<double> h2(n * 4);
    kernels::matmul_serial(h1.data(), hp.w2.data().data(), h2.data(), n, hidden, 4);
    auto b2 = hp.b2.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(out.at(i, j) == doctest::Approx(h2[i * 4 + j] + b2[j]).epsilon(1e-12));

    Matrix bad(n, t + 1);
    CHECK_THROWS_AS(head_forward(hp, bad), ContractError);
}

TEST_CASE("severity_loss closed forms and shift invariance") {
    std::vector<double> uniform{0.3, 0.3, 0.3, 0.3};
    CHECK(severity_loss(uniform, Tier::SN) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(severity_loss(uniform, Tier::SO) == doctest::Approx(1.386294).epsilon(1e-6));

    // Driving the true logit 20 nats above the rest sends the loss to zero.
    std::vector<double> margin{0.0, 20.0, 0.0, 0.0};
    CHECK(severity_loss(margin, Tier::LN) < 1e-6);

    RandomSource rng(31, 0);
    std::vector<double> logits(4), shifted(4);
    for (int rep = 0; rep < 10; ++rep) {
        for (std::size_t k = 0; k < 4; ++k) {
            logits[k] = rng.normal() * 3.0;
            shifted[k] = logits[k] + 17.25;
        }
        Tier tier = tier_from_int(static_cast<int>(rng.uniform_int(0, 3)));
        CHECK(severity_loss(logits, tier) ==
              doctest::Approx(severity_loss(shifted, tier)).epsilon(1e-12));
    }

    std::vector<double> three{0.1, 0.2, 0.3};
    CHECK_THROWS_AS(severity_loss(three, Tier::SN), ContractError);
}

TEST_CASE("severity_loss gradient matches finite differences") {
    RandomSource rng(32, 0);
    std::vector<double> logits(4);
    for (double& l : logits) l = rng.normal() * 2.0;
    Tier tier = Tier::LO;

    // Analytic gradient of -log softmax(l)[tier] is softmax(l) - onehot.
    double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double l : logits) denom += std::exp(l - mx);
    const double h = 1e-6;
    for (std::size_t k = 0; k < 4; ++k) {
        double analytic =
            std::exp(logits[k] - mx) / denom - (k == static_cast<std::size_t>(tier) ? 1.0 : 0.0);
        std::vector<double> lp = logits, lm = logits;
        lp[k] += h;
        lm[k] -= h;
        double fd = (severity_loss(lp, tier) - severity_loss(lm, tier)) / (2.0 * h);
        CHECK(analytic == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("uncertainty target and loss closed forms") {
    CHECK(uncertainty_target(0.0, 1e-6) == doctest::Approx(-13.8155).epsilon(1e-4));
    CHECK(uncertainty_target(0.0, 1e-6) == std::log(1e-6));
    CHECK(uncertainty_target(0.141421, 1e-6) ==
          doctest::Approx(std::log(0.141422)).epsilon(1e-12));
    CHECK(uncertainty_target(0.141421, 1e-6) == doctest::Approx(-1.95600).epsilon(1e-5));
    CHECK(uncertainty_loss(-1.956, -1.956) == 0.0);
    CHECK(uncertainty_loss(1.0, -2.0) == doctest::Approx(3.0));
    CHECK_THROWS_AS(uncertainty_target(-0.1, 1e-6), DomainError);
    CHECK_THROWS_AS(uncertainty_target(0.5, 0.0), DomainError);
}

TEST_CASE("dataset_head_targets equals the frozen-scorer metric pipeline") {
    bb::Checkpoint ckpt = micro_checkpoint();
    sim::GeneratedTask gt = sim::generate_task(micro_sim_config(), 404, 0);

    DatasetTargets targets = dataset_head_targets(gt.task, ckpt);
    REQUIRE(targets.auroc.has_value());
    REQUIRE(targets.threshold.has_value());

    std::vector<double> scores = bb::score_p_outlier(ckpt, gt.task.context, gt.task.queries);
    CHECK(*targets.auroc == metrics::auroc(scores, gt.task.labels));
    CHECK(*targets.threshold ==
          std::clamp(metrics::f1_optimal_threshold(scores, gt.task.labels).threshold, 0.0, 1.0));
    CHECK(std::isfinite(*targets.threshold)); // the scan's sentinels never leak out

    // Perfect and reversed orderings pin the auroc target's endpoints.
    std::vector<double> ordered{0.1, 0.2, 0.8, 0.9};
    std::vector<int> labels{0, 0, 1, 1};
    CHECK(metrics::auroc(ordered, labels) == 1.0);
    std::vector<double> reversed{0.9, 0.8, 0.2, 0.1};
    CHECK(metrics::auroc(reversed, labels) == 0.0);
}

TEST_CASE("dataset_head_targets is undefined on a single-class task") {
    bb::Checkpoint ckpt = micro_checkpoint();
    sim::GeneratedTask gt = sim::generate_task(micro_sim_config(), 404, 1);
    sim::Task task = gt.task;
    std::fill(task.labels.begin(), task.labels.end(), 0);
    DatasetTargets targets = dataset_head_targets(task, ckpt);
    CHECK_FALSE(targets.auroc.has_value());
    CHECK_FALSE(targets.threshold.has_value());
}

TEST_CASE("head gradcheck: cross-entropy through the readout MLP") {
    std::size_t t = 6, n = 5;
    RandomSource zrng(77, 0);
    Matrix z = random_matrix(n, t, zrng);
    std::vector<int> tiers{0, 3, 1, 2, 0};

    auto res = gradcheck::check(
        {{t, 2 * t}, {2 * t}, {2 * t, 4}, {4}},
        [&](const std::vector<Tensor>& p) {
            Tensor zt = Tensor::from_data({n, t}, z.data);
            Tensor hidden = gelu(add_rowvec(matmul(zt, p[0]), p[1]));
            Tensor logits = add_rowvec(matmul(hidden, p[2]), p[3]);
            return cross_entropy_mean(logits, tiers);
        },
        900);
    INFO(res.what);
    CHECK(res.ok);
}

TEST_CASE("train_head with epochs=0 returns the initialization untouched") {
    bb::Checkpoint ckpt = micro_checkpoint();
    std::uint64_t hash_before = bb::checkpoint_hash(ckpt);

    HeadTrainConfig tc;
    tc.epochs = 0;
    TrainedHead trained = train_head({HeadKind::severity}, ckpt, micro_sim_config(), tc, 99);

    CHECK(trained.log.empty());
    CHECK(trained.skipped_tasks == 0);
    CHECK(bb::checkpoint_hash(ckpt) == hash_before);

    RandomSource init_rng(99, 0x4EAD);
    HeadParams expected = init_head({HeadKind::severity}, ckpt.config.token_dim, init_rng);
    CHECK(bitwise_equal(trained.params.w1, expected.w1));
    CHECK(bitwise_equal(trained.params.b1, expected.b1));
    CHECK(bitwise_equal(trained.params.w2, expected.w2));
    CHECK(bitwise_equal(trained.params.b2, expected.b2));
}

TEST_CASE("train_head rejects a simulator/backbone width mismatch") {
    bb::Checkpoint ckpt = micro_checkpoint();
    sim::SimulatorConfig sim_cfg = micro_sim_config();
    sim_cfg.d_max = 5;
    sim_cfg.d_range = {2, 3};
    HeadTrainConfig tc;
    tc.epochs = 1;
    CHECK_THROWS_AS(train_head({HeadKind::severity}, ckpt, sim_cfg, tc, 1), DomainError);
}

TEST_CASE("train_head is deterministic in the seed and leaves the backbone frozen") {
    bb::Checkpoint ckpt = micro_checkpoint();
    std::uint64_t hash_before = bb::checkpoint_hash(ckpt);

    HeadTrainConfig tc;
    tc.epochs = 2;
    tc.batches_per_epoch = 3;
    tc.datasets_per_batch = 2;

    TrainedHead a = train_head({HeadKind::severity}, ckpt, micro_sim_config(), tc, 2024);
    TrainedHead b = train_head({HeadKind::severity}, ckpt, micro_sim_config(), tc, 2024);
    CHECK(bb::checkpoint_hash(ckpt) == hash_before);

    CHECK(bitwise_equal(a.params.w1, b.params.w1));
    CHECK(bitwise_equal(a.params.b1, b.params.b1));
    CHECK(bitwise_equal(a.params.w2, b.params.w2));
    CHECK(bitwise_equal(a.params.b2, b.params.b2));
    REQUIRE(a.log.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
        CHECK(a.log[e].epoch == e);
        CHECK(a.log[e].loss == b.log[e].loss);
        CHECK(std::isfinite(a.log[e].loss));
        CHECK(a.log[e].lr == tc.lr); // decay_every = 10 not yet reached
    }

    TrainedHead c = train_head({HeadKind::severity}, ckpt, micro_sim_config(), tc, 2025);
    bool all_equal = bitwise_equal(a.params.w1, c.params.w1) &&
                     bitwise_equal(a.params.w2, c.params.w2);
    CHECK_FALSE(all_equal);
}

TEST_CASE("train_head learning rate follows the stepwise decay schedule") {
    bb::Checkpoint ckpt = micro_checkpoint();
    HeadTrainConfig tc;
    tc.epochs = 4;
    tc.batches_per_epoch = 1;
    tc.datasets_per_batch = 1;
    tc.lr = 0.01;
    tc.lr_decay = 0.5;
    tc.decay_every = 2;
    TrainedHead trained = train_head({HeadKind::uncertainty}, ckpt, micro_sim_config(), tc, 5);
    REQUIRE(trained.log.size() == 4);
    CHECK(trained.log[0].lr == 0.01);
    CHECK(trained.log[1].lr == 0.01);
    CHECK(trained.log[2].lr == 0.005);
    CHECK(trained.log[3].lr == 0.005);
}

TEST_CASE("severity head trained on a random backbone beats chance on held-out tasks") {
    bb::Checkpoint ckpt = micro_checkpoint(3);
    sim::SimulatorConfig sim_cfg = micro_sim_config();

    HeadTrainConfig tc;
    tc.epochs = 8;
    tc.batches_per_epoch = 8;
    tc.datasets_per_batch = 2;
    tc.lr = 0.01;
    TrainedHead trained = train_head({HeadKind::severity}, ckpt, sim_cfg, tc, 314);

    REQUIRE(trained.log.size() == tc.epochs);
    CHECK(trained.log.back().loss < trained.log.front().loss);

    // Pool predictions over fresh tasks far outside the training id range.
    std::vector<int> pred, truth;
    for (std::uint64_t id = 50000; id < 50010; ++id) {
        sim::GeneratedTask gt = sim::generate_task(sim_cfg, 314, id);
        Matrix z = bb::encode(ckpt, gt.task.context, gt.task.queries);
        Matrix out = head_forward(trained.params, z);
        for (std::size_t i = 0; i < out.rows; ++i) {
            const double* row = out.row(i);
            pred.push_back(static_cast<int>(std::max_element(row, row + 4) - row));
            truth.push_back(static_cast<int>(gt.task.tiers[i]));
        }
    }
    double ba = metrics::balanced_accuracy(pred, truth, 4);
    INFO("balanced accuracy ", ba);
    CHECK(ba > 0.25);
}

TEST_CASE("uncertainty head caches teacher targets and trains to finite losses") {
    bb::Checkpoint ckpt = micro_checkpoint();
    HeadTrainConfig tc;
    tc.epochs = 2;
    tc.batches_per_epoch = 2;
    tc.datasets_per_batch = 2;
    tc.mc_passes = 4;
    TrainedHead trained = train_head({HeadKind::uncertainty}, ckpt, micro_sim_config(), tc, 8);
    REQUIRE(trained.log.size() == 2);
    for (const HeadEpochLog& e : trained.log) CHECK(std::isfinite(e.loss));
    CHECK(trained.skipped_tasks == 0);
}

TEST_CASE("dataset heads train toward replicated targets") {
    bb::Checkpoint ckpt = micro_checkpoint();
    HeadTrainConfig tc;
    tc.epochs = 3;
    tc.batches_per_epoch = 4;
    tc.datasets_per_batch = 2;
    tc.lr = 0.01;

    // The untrained backbone's auroc targets are spread over (0,1), so the
    // zero-initialized head has plenty to learn and the loss must fall.
    TrainedHead auroc_head = train_head({HeadKind::auroc}, ckpt, micro_sim_config(), tc, 99);
    REQUIRE(auroc_head.log.size() == 3);
    CHECK(auroc_head.log.back().loss < auroc_head.log.front().loss);
    CHECK(auroc_head.skipped_tasks == 0);

    // Threshold targets here cluster at the clamp boundary, which the
    // zero-initialized head already predicts, so the loss starts near its
    // floor; the contract is just that training stays finite and bounded.
    TrainedHead thr_head = train_head({HeadKind::threshold}, ckpt, micro_sim_config(), tc, 99);
    REQUIRE(thr_head.log.size() == 3);
    for (const HeadEpochLog& e : thr_head.log) {
        CHECK(std::isfinite(e.loss));
        CHECK(e.loss < 1.0); // targets live in [0,1]
    }
    CHECK(thr_head.skipped_tasks == 0);
}

TEST_CASE("head log CSV renders NaN validation metrics as an em dash") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() / "fomox_head_log_test.csv";
    std::vector<HeadEpochLog> log{
        {0, 1.25, std::numeric_limits<double>::quiet_NaN(), 0.001},
        {1, 0.5, 0.75, 0.0008},
    };
    write_head_log_csv(path, log);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,loss,val_metric,lr");
    std::getline(in, line);
    CHECK(line == "0,1.25,—,0.001");
    std::getline(in, line);
    CHECK(line == "1,0.5,0.75,0.00080000000000000004");
    fs::remove(path);
}

TEST_CASE("head checkpoint round-trips bitwise through FMXH") {
    namespace fs = std::filesystem;
    RandomSource rng(61, 0);
    HeadParams hp = init_head({HeadKind::severity}, 8, rng);
    hp.b1.data_mut()[3] = -0.75; // make the biases non-trivial
    hp.b2.data_mut()[1] = 2.0;

    fs::path path = fs::temp_directory_path() / "fomox_head_roundtrip.fmx";
    save_head(hp, path);
    HeadParams back = load_head(path);
    CHECK(back.spec.kind == HeadKind::severity);
    CHECK(back.token_dim == 8);
    CHECK(bitwise_equal(back.w1, hp.w1));
    CHECK(bitwise_equal(back.b1, hp.b1));
    CHECK(bitwise_equal(back.w2, hp.w2));
    CHECK(bitwise_equal(back.b2, hp.b2));

    // Loaded parameters participate in autodiff (they are trainable).
    Tensor z = Tensor::from_data({1, 8}, std::vector<double>(8, 0.5));
    Tensor loss = cross_entropy_mean(head_forward_graph(back, z), std::vector<int>{2});
    backward(loss);
    CHECK(back.w1.grad().size() == back.w1.size());
    fs::remove(path);
}

TEST_CASE("load_head rejects corrupted containers") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() / "fomox_head_corrupt.fmx";
    RandomSource rng(62, 0);
    HeadParams hp = init_head({HeadKind::uncertainty}, 4, rng);
    save_head(hp, path);

    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        bytes = ss.str();
    }
    auto write_bytes = [&](const std::string& b) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(b.data(), static_cast<std::streamsize>(b.size()));
    };

    SUBCASE("bad magic") {
        std::string b = bytes;
        b[3] = 'Q';
        write_bytes(b);
        CHECK_THROWS_WITH_AS(load_head(path), doctest::Contains("bad magic"), LoadError);
    }
    SUBCASE("unsupported version") {
        std::string b = bytes;
        b[4] = 9;
        write_bytes(b);
        CHECK_THROWS_WITH_AS(load_head(path), doctest::Contains("version"), LoadError);
    }
    SUBCASE("unknown head name in the config block") {
        std::string b = bytes;
        auto pos = b.find("uncertainty");
        REQUIRE(pos != std::string::npos);
        b.replace(pos, 11, "uncertainly"); // same length, unknown name
        write_bytes(b);
        CHECK_THROWS_WITH_AS(load_head(path), doctest::Contains("unknown head"), LoadError);
    }
    SUBCASE("truncated tensor payload") {
        write_bytes(bytes.substr(0, bytes.size() - 9));
        CHECK_THROWS_AS(load_head(path), LoadError);
    }
    SUBCASE("trailing data") {
        write_bytes(bytes + "x");
        CHECK_THROWS_WITH_AS(load_head(path), doctest::Contains("trailing"), LoadError);
    }
    SUBCASE("missing file") {
        fs::remove(path);
        CHECK_THROWS_AS(load_head(fs::temp_directory_path() / "fomox_no_such_head.fmx"),
                        LoadError);
    }
    fs::remove(path);
}

TEST_CASE("load_head rejects a shape inconsistent with the stored config") {
    namespace fs = std::filesystem;
    fs::path a = fs::temp_directory_path() / "fomox_head_shape_a.fmx";
    RandomSource rng(63, 0);
    HeadParams hp = init_head({HeadKind::auroc}, 4, rng);
    save_head(hp, a);

    // Patch token_dim in the JSON config without touching the tensors.
    std::string bytes;
    {
        std::ifstream in(a, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        bytes = ss.str();
    }
    auto pos = bytes.find("\"token_dim\":4");
    REQUIRE(pos != std::string::npos);
    bytes.replace(pos, 13, "\"token_dim\":5");
    {
        std::ofstream out(a, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_WITH_AS(load_head(a), doctest::Contains("head.w1"), LoadError);
    fs::remove(a);
}

TEST_CASE("diagnose with no heads yields only outlier probabilities") {
    bb::Checkpoint ckpt = micro_checkpoint();
    sim::GeneratedTask gt = sim::generate_task(micro_sim_config(), 17, 0);

    DiagnoseResult res = diagnose(ckpt, {}, gt.task.context, gt.task.queries);
    CHECK(res.p_outlier.size() == gt.task.queries.rows);
    CHECK_FALSE(res.has_severity());
    CHECK_FALSE(res.has_uncertainty());
    CHECK_FALSE(res.auroc_estimate.has_value());
    CHECK_FALSE(res.threshold_estimate.has_value());

    std::vector<double> direct = bb::score_p_outlier(ckpt, gt.task.context, gt.task.queries);
    REQUIRE(direct.size() == res.p_outlier.size());
    for (std::size_t i = 0; i < direct.size(); ++i) CHECK(res.p_outlier[i] == direct[i]);
}

TEST_CASE("diagnose shares one encode pass and leaves OD output bitwise unchanged") {
    bb::Checkpoint ckpt = micro_checkpoint();
    sim::GeneratedTask gt = sim::generate_task(micro_sim_config(), 18, 0);

    RandomSource rng(71, 0);
    std::vector<HeadParams> attached{
        init_head({HeadKind::severity}, ckpt.config.token_dim, rng),
        init_head({HeadKind::uncertainty}, ckpt.config.token_dim, rng),
        init_head({HeadKind::auroc}, ckpt.config.token_dim, rng),
        init_head({HeadKind::threshold}, ckpt.config.token_dim, rng),
    };

    DiagnoseResult bare = diagnose(ckpt, {}, gt.task.context, gt.task.queries);

    std::uint64_t before = bb::encode_invocations();
    DiagnoseResult full = diagnose(ckpt, attached, gt.task.context, gt.task.queries);
    CHECK(bb::encode_invocations() - before == 1); // one pass feeds all heads

    REQUIRE(full.p_outlier.size() == bare.p_outlier.size());
    for (std::size_t i = 0; i < bare.p_outlier.size(); ++i)
        CHECK(full.p_outlier[i] == bare.p_outlier[i]); // bitwise

    // Severity: probabilities normalized, tier = argmax.
    REQUIRE(full.has_severity());
    REQUIRE(full.tier_probs.rows == full.p_outlier.size());
    for (std::size_t i = 0; i < full.tier_probs.rows; ++i) {
        double sum = 0.0;
        std::size_t argmax = 0;
        for (std::size_t c = 0; c < 4; ++c) {
            sum += full.tier_probs.at(i, c);
            if (full.tier_probs.at(i, c) > full.tier_probs.at(i, argmax)) argmax = c;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(static_cast<std::size_t>(full.tiers[i]) == argmax);
    }

    // Uncertainty and dataset heads agree with direct readouts of z.
    Matrix z = bb::encode(ckpt, gt.task.context, gt.task.queries);
    Matrix log_u = head_forward(attached[1], z);
    REQUIRE(full.has_uncertainty());
    for (std::size_t i = 0; i < log_u.rows; ++i) CHECK(full.log_u[i] == log_u.at(i, 0));

    for (std::size_t h : {std::size_t{2}, std::size_t{3}}) {
        Matrix out = head_forward(attached[h], z);
        double mean = 0.0;
        for (std::size_t i = 0; i < out.rows; ++i) mean += out.at(i, 0);
        mean /= static_cast<double>(out.rows);
        double got = h == 2 ? *full.auroc_estimate : *full.threshold_estimate;
        CHECK(got == mean); // arithmetic mean, exactly
    }
}

TEST_CASE("diagnose rejects duplicate heads and width mismatches") {
    bb::Checkpoint ckpt = micro_checkpoint();
    RandomSource rng(72, 0);
    HeadParams sev1 = init_head({HeadKind::severity}, ckpt.config.token_dim, rng);
    HeadParams sev2 = init_head({HeadKind::severity}, ckpt.config.token_dim, rng);
    Matrix ctx = random_matrix(4, ckpt.config.d_max, rng);
    Matrix q = random_matrix(2, ckpt.config.d_max, rng);
    CHECK_THROWS_WITH_AS(diagnose(ckpt, {sev1, sev2}, ctx, q), doctest::Contains("duplicate"),
                         ContractError);

    HeadParams wide = init_head({HeadKind::uncertainty}, ckpt.config.token_dim + 1, rng);
    CHECK_THROWS_WITH_AS(diagnose(ckpt, {wide}, ctx, q), doctest::Contains("token_dim"),
                         ContractError);
}

TEST_CASE("diagnose CSV and summary JSON render absent heads as em dashes") {
    namespace fs = std::filesystem;
    bb::Checkpoint ckpt = micro_checkpoint();
    sim::GeneratedTask gt = sim::generate_task(micro_sim_config(), 19, 0);

    fs::path csv_path = fs::temp_directory_path() / "fomox_diagnose_test.csv";
    fs::path json_path = fs::temp_directory_path() / "fomox_diagnose_test.json";

    SUBCASE("no heads attached") {
        DiagnoseResult res = diagnose(ckpt, {}, gt.task.context, gt.task.queries);
        write_diagnose_csv(csv_path, res);
        std::ifstream in(csv_path);
        std::string line;
        std::getline(in, line);
        CHECK(line == "p_outlier,tier,sn,ln,lo,so,log_u");
        std::size_t rows = 0;
        while (std::getline(in, line)) {
            ++rows;
            CHECK(line.find("—,—,—,—,—,—") != std::string::npos);
        }
        CHECK(rows == gt.task.queries.rows);

        write_diagnose_summary_json(json_path, res);
        std::ifstream jin(json_path);
        nlohmann::json j = nlohmann::json::parse(jin);
        CHECK(j.at("n_queries").get<std::size_t>() == gt.task.queries.rows);
        CHECK(j.at("auroc_estimate").get<std::string>() == "—");
        CHECK(j.at("threshold_estimate").get<std::string>() == "—");
        CHECK_FALSE(j.contains("tier_counts"));
    }

    SUBCASE("severity and auroc heads attached") {
        RandomSource rng(73, 0);
        std::vector<HeadParams> attached{
            init_head({HeadKind::severity}, ckpt.config.token_dim, rng),
            init_head({HeadKind::auroc}, ckpt.config.token_dim, rng),
        };
        DiagnoseResult res = diagnose(ckpt, attached, gt.task.context, gt.task.queries);
        write_diagnose_csv(csv_path, res);
        std::ifstream in(csv_path);
        std::string line;
        std::getline(in, line); // header
        std::getline(in, line);
        // First data row names a tier and still dashes out the absent log_u.
        bool has_tier = line.find(",SN,") != std::string::npos ||
                        line.find(",LN,") != std::string::npos ||
                        line.find(",LO,") != std::string::npos ||
                        line.find(",SO,") != std::string::npos;
        CHECK(has_tier);
        CHECK(line.rfind(",—") == line.size() - std::string(",—").size());

        write_diagnose_summary_json(json_path, res);
        std::ifstream jin(json_path);
        nlohmann::json j = nlohmann::json::parse(jin);
        CHECK(j.at("auroc_estimate").is_number());
        CHECK(j.at("threshold_estimate").get<std::string>() == "—");
        std::size_t total = 0;
        for (const auto& [key, value] : j.at("tier_counts").items())
            total += value.get<std::size_t>();
        CHECK(total == gt.task.queries.rows);
    }

    fs::remove(csv_path);
    fs::remove(json_path);
}
