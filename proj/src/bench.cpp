#include "fomox/bench.hpp"

#include <algorithm>
#include <chrono>

#include "fomox/errors.hpp"

namespace fomox::bench {

namespace {

using clock_type = std::chrono::steady_clock;

// Volatile sink: writing each sweep's output here makes the timed work
// observable, so the optimizer cannot drop it.
volatile double g_sink = 0.0;

std::size_t total_queries(const std::vector<sim::Task>& tasks) {
    std::size_t n = 0;
    for (const sim::Task& t : tasks) n += t.queries.rows;
    return n;
}

void validate(const std::vector<sim::Task>& tasks, std::size_t reps) {
    if (reps < 10) throw DomainError("bench: reps must be >= 10");
    if (tasks.empty() || total_queries(tasks) == 0)
        throw DomainError("bench: need at least one task with queries");
}

// One full pass of diagnose over every task.
double sweep_seconds(const bb::Checkpoint& ckpt, const std::vector<heads::HeadParams>& attached,
                     const std::vector<sim::Task>& tasks) {
    auto start = clock_type::now();
    for (const sim::Task& t : tasks) {
        heads::DiagnoseResult res = heads::diagnose(ckpt, attached, t.context, t.queries);
        g_sink = g_sink + res.p_outlier.back();
    }
    return std::chrono::duration<double>(clock_type::now() - start).count();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

std::vector<double> sweep_ns_per_sample(const bb::Checkpoint& ckpt,
                                        const std::vector<heads::HeadParams>& attached,
                                        const std::vector<sim::Task>& tasks, std::size_t reps) {
    validate(tasks, reps);
    double per_sample = 1e9 / static_cast<double>(total_queries(tasks));
    sweep_seconds(ckpt, attached, tasks); // warmup
    std::vector<double> out(reps);
    for (std::size_t r = 0; r < reps; ++r)
        out[r] = sweep_seconds(ckpt, attached, tasks) * per_sample;
    return out;
}

metrics::TimingStats bench_inference(const bb::Checkpoint& ckpt,
                                     const std::vector<heads::HeadParams>& attached,
                                     const std::vector<sim::Task>& tasks, std::size_t reps) {
    validate(tasks, reps);
    double per_sample = 1e9 / static_cast<double>(total_queries(tasks));
    const std::vector<heads::HeadParams> none;

    sweep_seconds(ckpt, none, tasks); // warmup both configurations
    sweep_seconds(ckpt, attached, tasks);

    std::vector<double> bare(reps), with_heads(reps);
    for (std::size_t r = 0; r < reps; ++r) {
        bare[r] = sweep_seconds(ckpt, none, tasks) * per_sample;
        with_heads[r] = sweep_seconds(ckpt, attached, tasks) * per_sample;
    }
    metrics::TimingStats stats;
    stats.backbone_ns_per_sample = median(bare);
    stats.with_heads_ns_per_sample = median(with_heads);
    stats.overhead_fraction =
        (stats.with_heads_ns_per_sample - stats.backbone_ns_per_sample) /
        stats.backbone_ns_per_sample;
    return stats;
}

} // namespace fomox::bench
