#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvpacket/flops.hpp"
#include "kvpacket/model.hpp"
#include "kvpacket/rng.hpp"

namespace kvp {

enum class PolicyKind { full, none, random_ratio, boundary_anchor, deviation, attention_topk };

// Reference strategies: documents are cached in isolation, realigned and
// concatenated, and a policy picks which stale tokens to recompute.
struct RecomputePolicy {
    PolicyKind kind = PolicyKind::full;
    double ratio = 0.0;    // fraction recomputed per document
    int anchor_tokens = 0; // boundary_anchor: leading tokens per document

    void validate() const; // ConfigError on out-of-range parameters

    static RecomputePolicy full() { return {PolicyKind::full, 0, 0}; }
    static RecomputePolicy none() { return {PolicyKind::none, 0, 0}; }
    static RecomputePolicy random(double r) { return {PolicyKind::random_ratio, r, 0}; }
    static RecomputePolicy boundary(int k) { return {PolicyKind::boundary_anchor, 0, k}; }
    static RecomputePolicy deviation(double r) { return {PolicyKind::deviation, r, 0}; }
    static RecomputePolicy attention_topk(double r) { return {PolicyKind::attention_topk, r, 0}; }
};

std::string_view policy_kind_name(PolicyKind k);
std::string policy_label(const RecomputePolicy& p); // e.g. "random_ratio(0.3)"
RecomputePolicy parse_policy(std::string_view text); // "name" or "name:param"

struct SelectionResult {
    // Per document, ascending unique indices into that document.
    std::vector<std::vector<int64_t>> doc_indices;

    int64_t total() const;
};

// ceil(r * L_i) uniform picks per document.
SelectionResult select_random(std::span<const int64_t> doc_lengths, double r, Rng& rng);

// First min(k, L_i) tokens of each document.
SelectionResult select_boundary(std::span<const int64_t> doc_lengths, int k);

// Probe the first layers of a fresh full-prefix pass and rank tokens by the
// L2 gap between its K/V and the stale entries. Probe compute is billed to
// the selection channel; the stale side already exists.
SelectionResult select_deviation(const ModelWeightsT<float>& w,
                                 std::span<const std::vector<int>> documents,
                                 const KVCache& stale_context, double r);

// Score stale tokens by first-layer query attention, averaged over heads and
// query rows; top ceil(r * L_i) per document.
SelectionResult select_attention_topk(const ModelWeightsT<float>& w,
                                      std::span<const std::vector<int>> documents,
                                      std::span<const int> query,
                                      const KVCache& stale_context, double r);

// Offline artifact: each document prefilled alone at base position 0.
std::vector<KVCache> build_document_caches(const ModelWeightsT<float>& w,
                                           std::span<const std::vector<int>> documents);

// Realign every document cache onto the shared position line and concatenate.
KVCache compose_stale(const ModelConfig& config, const std::vector<KVCache>& caches);

// One-shot repair: forward the selected tokens with visibility of the full
// realigned prefix; their fresh K/V replace the stale rows.
KVCache repair_context(const ModelWeightsT<float>& w,
                       std::span<const std::vector<int>> documents,
                       const KVCache& stale_context, const SelectionResult& selection);

struct BaselineRun {
    std::vector<int> ids; // greedy answer, stop token included when hit
    FlopsSnapshot flops;
    SelectionResult selection;
};

// Full pipeline under one meter: cache build (unbilled, offline in the
// serving story), realignment, selection probes, repair, then an unbilled
// query. rng feeds the random_ratio policy only.
BaselineRun run_baseline(const ModelWeightsT<float>& w, const RecomputePolicy& policy,
                         std::span<const std::vector<int>> documents,
                         std::span<const int> query, int max_new_tokens, Rng& rng,
                         int stop_token = -1);

} // namespace kvp
