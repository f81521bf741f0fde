#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kvpacket/config.hpp"

namespace kvp {

// Flag-level overrides applied on top of the parsed config file.
struct CliOptions {
    std::optional<uint64_t> seed;
    std::optional<std::filesystem::path> out;
    std::vector<std::string> strategies;
    std::vector<std::string> domains;
    bool overwrite = false;
};

// load_run_config + overrides + validate, in that order.
RunConfig resolve_config(const std::filesystem::path& config_path, const CliOptions& opt);

// Commands return 0 on success and signal failure by throwing; cli_main maps
// Error subtypes to exit codes (ConfigError 2, InvariantError 3,
// TrainingError 4, anything else 1).
int cmd_pretrain(const RunConfig& run);
int cmd_build_cache(const RunConfig& run, bool overwrite);
int cmd_train_adapters(const RunConfig& run);
int cmd_bench(const RunConfig& run);
int cmd_attn_report(const RunConfig& run);

// Golden probe emitted next to the model checkpoint: a fixed input and the
// logits the freshly trained model produced on it.
struct GoldenProbe {
    std::vector<int> ids;
    std::vector<float> logits; // last-row logits, |V| wide
};
void save_probe(const GoldenProbe& p, const std::filesystem::path& path);
GoldenProbe load_probe(const std::filesystem::path& path);

// Replays the probe input through w; true iff every logit matches within tol.
bool probe_matches(const ModelWeightsT<float>& w, const GoldenProbe& p, float tol = 1e-6f);

int cli_main(int argc, const char* const* argv);

} // namespace kvp
