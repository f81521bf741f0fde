#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvpacket/baselines.hpp"
#include "kvpacket/packet.hpp"
#include "kvpacket/tasks.hpp"

namespace kvp {

// Token-level bag-overlap F1 over multisets. Both empty scores 1, one empty 0.
double f1_score(std::span<const int> prediction, std::span<const int> gold);

struct FlopsReport {
    uint64_t realign_ops = 0;
    uint64_t forward_flops = 0;
    uint64_t selection_flops = 0;
    uint64_t total = 0;
    double relative_to_full = 0; // against a full-recompute run on the same instance
};

FlopsReport make_flops_report(const FlopsSnapshot& s, uint64_t full_total);

struct TtftReport {
    double load_s = 0;  // serialized bytes / configured bandwidth
    double prep_s = 0;  // wall-clock median: realign / select / recompute
    double query_s = 0; // wall-clock median: query prefill to first-token logits
    double ttft_s = 0;  // sum of the three
};

// A benchmark column: the packet pipeline, a recompute policy over stale
// caches, or the empty-context control.
struct EvalStrategy {
    enum class Kind { packet, no_cache, recompute };
    Kind kind = Kind::packet;
    RecomputePolicy policy; // recompute rows only

    static EvalStrategy packet() { return {Kind::packet, {}}; }
    static EvalStrategy no_cache() { return {Kind::no_cache, {}}; }
    static EvalStrategy recompute(RecomputePolicy p) { return {Kind::recompute, p}; }
};

EvalStrategy parse_strategy(std::string_view text); // "packet", "no_cache", or policy syntax
std::string strategy_name(const EvalStrategy& s);   // CSV strategy column
std::string strategy_params(const EvalStrategy& s); // CSV policy_params column
std::string strategy_label(const EvalStrategy& s);  // name(params) display form

struct BenchConfig {
    std::vector<EvalStrategy> strategies;
    std::vector<Domain> domains{Domain::needle, Domain::kv_biography, Domain::multihop};
    int instances_per_domain = 100;
    TaskParams params;
    double bandwidth_gb_s = 8.0; // simulated cache transfer
    int ttft_reps = 5;
    uint64_t seed = 0;

    void validate() const;
};

struct EvalRow {
    std::string strategy;
    std::string policy_params;
    std::string domain;
    int instance_id = 0;
    double f1 = 0;
    FlopsReport flops;
    TtftReport ttft;
};

struct DomainInstances {
    Domain domain = Domain::needle;
    std::vector<TaskInstance> instances;
};

// One row per (strategy, domain, instance). Instances come from gen_tasks,
// so every gold answer is achievable under full attention. adapters may be
// null unless a packet strategy is listed; store holds the per-instance
// packet entries the packet strategy composes from.
std::vector<EvalRow> run_suite(const ModelWeightsT<float>& w, const AdapterParams* adapters,
                               CacheStore& store, const BenchConfig& cfg);

// Same measurement over a caller-supplied task set; cfg.domains is ignored.
std::vector<EvalRow> run_suite(const ModelWeightsT<float>& w, const AdapterParams* adapters,
                               CacheStore& store, const BenchConfig& cfg,
                               std::span<const DomainInstances> tasks);

struct SummaryRow {
    std::string strategy; // label form, distinct per parameterization
    std::string domain;
    int n = 0;
    double mean_f1 = 0;
    double mean_total_flops = 0;
    double mean_relative_flops = 0;
    double mean_load_s = 0, mean_prep_s = 0, mean_query_s = 0, mean_ttft_s = 0;
};

std::vector<SummaryRow> summarize(std::span<const EvalRow> rows);

void write_results_csv(const std::filesystem::path& path, std::span<const EvalRow> rows);
void write_summary_json(const std::filesystem::path& path, std::span<const SummaryRow> rows);

// Query-to-context attention, averaged over layers, heads, query tokens, and
// instances. Positions sit on the packet coordinate line so the two
// strategies plot against each other; the none strategy has no rows at
// header/trailer positions.
struct AttnProfile {
    std::string strategy;             // "none" | "packet"
    std::vector<int64_t> position;
    std::vector<std::string> region;  // prompt | header | document | trailer
    std::vector<uint8_t> block_first; // first document token of its block
    std::vector<double> mean_score;
};

// strategy "none" or "packet"; adapters required for packet. All instances
// must share one geometry (doc count, doc lengths, query length).
AttnProfile attn_profile(const ModelWeightsT<float>& w, std::string_view strategy,
                         const AdapterParams* adapters,
                         std::span<const TaskInstance> instances);

struct AttnSummary {
    double doc_first_mean = 0;    // first token of each document block
    double doc_interior_mean = 0; // remaining document tokens
    double header_mean = 0;
    double trailer_mean = 0;
    double document_mean = 0;
    double prompt_mean = 0;
};

AttnSummary summarize_profile(const AttnProfile& p);

void write_attn_csv(const std::filesystem::path& path, std::span<const AttnProfile> profiles);

// Packet-strategy mean F1 for each adapter set on each domain; instances per
// domain are shared across sets. Returns [set][domain].
struct AdapterSet {
    std::string name;
    AdapterParams adapters;
};

std::vector<std::vector<double>> cross_domain_f1(const ModelWeightsT<float>& w,
                                                 std::span<const AdapterSet> sets,
                                                 std::span<const Domain> domains, int n,
                                                 const TaskParams& params, uint64_t seed);

} // namespace kvp
