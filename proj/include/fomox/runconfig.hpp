#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "fomox/backbone.hpp"
#include "fomox/heads.hpp"
#include "fomox/simulator.hpp"

namespace fomox {

// Settings for the eval command: how the MC-dropout teacher is recomputed
// and how CSV datasets are split.
struct EvalConfig {
    std::size_t mc_passes = 10;
    double dropout_p = 0.1;
    double eps = 1e-6;
    std::string label_column = "y";
    double context_fraction = 0.5;
    void validate() const; // throws DomainError
};

// The complete run configuration. Every JSON field is optional and defaults
// to the toy-scale value; unknown keys are rejected so typos cannot
// silently fall back to defaults.
struct RunConfig {
    sim::SimulatorConfig simulator;
    bb::BackboneConfig backbone;
    bb::PretrainSchedule schedule; // lives in the "backbone" section
    heads::HeadTrainConfig head_training;
    EvalConfig eval;
    std::optional<std::uint64_t> seed;
};

// Parses and validates (nested validate() calls run here). Throws
// ParseError for structural problems (unknown key, wrong type) and
// DomainError for value constraint violations.
RunConfig run_config_from_json(const nlohmann::json& j);

// Reads a JSON file. Throws LoadError when the file cannot be opened and
// ParseError when it is not valid JSON.
RunConfig load_run_config(const std::filesystem::path& path);

// The fully resolved document: defaults filled in, seed included (null when
// unset). Keys are emitted sorted, so the dump is canonical.
nlohmann::json run_config_to_json(const RunConfig& cfg);

// FNV-1a hash of the canonical dump; stamped into run manifests.
std::uint64_t run_config_hash(const RunConfig& cfg);

} // namespace fomox
