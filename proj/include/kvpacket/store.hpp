#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "kvpacket/model.hpp"
#include "kvpacket/rng.hpp"

namespace kvp {

// Rotate every cached key by delta positions (composition of rotations; keys
// are stored post-rotation). Values untouched. Cost is billed to the meter as
// one rotation op per key element.
KVCache realign(const KVCache& cache, int64_t delta, const ModelConfig& config);

// Token-axis concatenation of caches whose position spans tile exactly:
// each base_position must equal the previous base_position + n_tokens.
// ContiguityError names the first gap.
KVCache concat(const std::vector<KVCache>& caches);

struct CacheEntry {
    std::string doc_id;
    KVCache cache;
    int64_t token_count = 0;          // == cache.n_tokens
    std::string created_with = "none"; // adapter fingerprint hex, or "none"
    uint32_t format_version = 1;
};

// One .kvpc file per doc_id plus an index of (doc_id, token_count,
// fingerprint). Reads are concurrent; writes are last-wins per file.
class CacheStore {
public:
    explicit CacheStore(std::filesystem::path root);

    void put(const CacheEntry& entry, bool overwrite = false);
    CacheEntry get(const std::string& doc_id) const;
    bool contains(const std::string& doc_id) const;
    std::vector<std::string> doc_ids() const;
    const std::filesystem::path& root() const { return root_; }

private:
    std::filesystem::path entry_path(const std::string& doc_id) const;
    void rewrite_index() const;

    std::filesystem::path root_;
};

void save_cache_entry(const CacheEntry& entry, const std::filesystem::path& path);
CacheEntry load_cache_entry(const std::filesystem::path& path);

// Serialized size without touching disk; feeds simulated transfer times.
uint64_t cache_entry_bytes(const CacheEntry& entry);

enum class PruneMethod { random, key_norm };
PruneMethod parse_prune_method(std::string_view name); // ConfigError on unknown

struct PruneMask {
    std::vector<std::vector<uint8_t>> keep; // per layer, pre-prune row count
};

struct PruneResult {
    KVCache cache; // kept rows only; positions and span preserved
    PruneMask mask;
};

// Per-layer unstructured pruning: `rate` is the dropped fraction. random
// drops uniformly; key_norm drops the smallest-L2-norm keys (ties broken by
// ascending position). At least one token survives per layer. Positions in
// protect_positions are never dropped and do not consume drop budget.
PruneResult prune(const KVCache& cache, double rate, PruneMethod method, Rng& rng,
                  std::span<const int64_t> protect_positions = {});

// Query forward over a possibly gapped prefix; attention covers exactly the
// kept entries. InvalidCacheError if any prefix layer is empty.
ForwardResultT<float> attend_with_gaps(const ModelWeightsT<float>& w,
                                       const TensorT<float>& query_embeddings,
                                       std::span<const int64_t> query_positions,
                                       const KVCache& pruned,
                                       const ForwardOptions& opt = {});

} // namespace kvp
