#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kvpacket/model.hpp"
#include "kvpacket/store.hpp"

namespace kvp {

// Boundary adapters: one global pair serves every document. Rows are soft
// token embeddings, never vocabulary ids.
template <class S>
struct AdapterParamsT {
    TensorT<S> header;  // [N_h x d]
    TensorT<S> trailer; // [N_t x d]

    int64_t n_header() const { return header.rows(); }
    int64_t n_trailer() const { return trailer.rows(); }
    int64_t d_model() const;
    std::vector<TensorT<S>> parameters() const; // trainable handles, both matrices
    void set_requires_grad(bool on);
    void validate(const ModelConfig& config) const; // ConfigError on d mismatch
};

using AdapterParams = AdapterParamsT<float>;

// Rows drawn from the token-embedding table's empirical per-dimension
// mean/stddev, so untrained packets start in-distribution.
template <class S>
AdapterParamsT<S> init_adapters(const ModelWeightsT<S>& w, int n_header, int n_trailer,
                                Rng& rng);

// Hash over adapter geometry + data + the model checkpoint hash; packets
// built under different adapter generations never mix.
Sha256 adapter_fingerprint(const AdapterParams& a, const Sha256& model_hash);

void save_adapters(const AdapterParams& a, const Sha256& model_hash,
                   const std::filesystem::path& path);

struct LoadedAdapters {
    AdapterParams adapters;
    Sha256 model_hash;
};
LoadedAdapters load_adapters(const std::filesystem::path& path);

struct Packet {
    std::string doc_id;
    KVCache cache; // [header, document, trailer] built at base position 0
    int64_t doc_token_count = 0;
    std::string fingerprint; // hex
};

// Prefill over [H; embed(doc); T] from an empty prefix. Records on an active
// tape when adapters require grad (the distillation path); serving callers
// run it tapeless.
template <class S>
KVCacheT<S> wrap_cache(const ModelWeightsT<S>& w, const AdapterParamsT<S>& a,
                       std::span<const int> doc_tokens);

Packet wrap(const ModelWeightsT<float>& w, const AdapterParams& a, const Sha256& model_hash,
            std::string doc_id, std::span<const int> doc_tokens);

CacheEntry to_cache_entry(const Packet& p);

struct RegionSpan {
    int64_t begin = 0, end = 0; // [begin, end)
};

struct PacketBounds {
    std::string doc_id;
    RegionSpan header, document, trailer;
};

struct ComposedContext {
    std::vector<std::string> packet_ids;
    KVCache cache;
    std::vector<PacketBounds> bounds;
    std::string fingerprint; // hex
};

// Realign every packet onto a shared position line (packet i shifted by the
// nominal lengths before it) and concatenate. Zero forward-pass work; the
// meter sees only rotation ops. CompositionError on fingerprint mismatch.
ComposedContext compose(const CacheStore& store, std::span<const std::string> packet_ids,
                        const AdapterParams& a, const Sha256& model_hash,
                        const ModelConfig& config, int64_t base_position = 0);

// Query prefill over the composed cache, then greedy decoding.
GenerateResultT<float> answer(const ModelWeightsT<float>& w, const ComposedContext& ctx,
                              std::span<const int> query_ids, int max_new_tokens,
                              int stop_token = -1);

} // namespace kvp
