#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kvpacket/distill.hpp"
#include "kvpacket/eval.hpp"
#include "kvpacket/pretrain.hpp"

namespace kvp {

// One run artifact: every command reads the same file, so (config, seed)
// pins every emitted byte except wall-clock timing fields.
struct RunConfig {
    ModelConfig model;
    TaskParams task; // benchmark geometry, shared by eval and pretrain gates
    PretrainConfig pretrain;
    TrainConfig train; // its seed field is always run from `seed` below
    int n_header = 8;
    int n_trailer = 8;

    std::filesystem::path model_path = "out/model.kvpw";
    std::filesystem::path adapters_path = "out/adapters.kvpa";
    std::filesystem::path store_dir = "out/store";
    std::filesystem::path out_dir = "out";

    std::vector<Domain> domains{kAllDomains[0], kAllDomains[1], kAllDomains[2]};
    std::vector<EvalStrategy> strategies{EvalStrategy::packet(),
                                         EvalStrategy::recompute(RecomputePolicy::full()),
                                         EvalStrategy::recompute(RecomputePolicy::none())};
    int instances_per_domain = 100;
    int ttft_reps = 5;
    double bandwidth_gb_s = 8.0;
    int corpus_docs = 8;
    uint64_t seed = 0;

    // Per-train-domain adapter checkpoints (keys: the three domain names plus
    // "mixture"). All four present => bench also emits the cross-domain
    // matrix; empty => the matrix is skipped.
    std::map<std::string, std::filesystem::path> matrix_adapters;
    int matrix_instances = 25;

    void validate() const; // ConfigError on out-of-range values
};

// Parse JSON text. Unknown keys at any level are ConfigError, as are wrongly
// typed values; absent keys keep their defaults.
RunConfig parse_run_config(const std::string& text);

// parse_run_config over the file's contents, then the KVP_STORE environment
// variable (when set and non-empty) overrides store_dir. Missing or
// unreadable file is ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);

} // namespace kvp
