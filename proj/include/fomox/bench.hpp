#pragma once

#include <cstddef>
#include <vector>

#include "fomox/backbone.hpp"
#include "fomox/heads.hpp"
#include "fomox/metrics.hpp"
#include "fomox/simulator.hpp"

namespace fomox::bench {

// One timed sweep runs diagnose over every task; the result is wall time in
// nanoseconds divided by the total number of queries. Returns one entry per
// repetition (after an untimed warmup sweep). Throws DomainError when reps
// < 10 or tasks are empty.
std::vector<double> sweep_ns_per_sample(const bb::Checkpoint& ckpt,
                                        const std::vector<heads::HeadParams>& attached,
                                        const std::vector<sim::Task>& tasks, std::size_t reps);

// Median ns/sample with heads detached vs attached, interleaved to cancel
// slow drift, plus the relative overhead of the attached run.
metrics::TimingStats bench_inference(const bb::Checkpoint& ckpt,
                                     const std::vector<heads::HeadParams>& attached,
                                     const std::vector<sim::Task>& tasks, std::size_t reps);

} // namespace fomox::bench
