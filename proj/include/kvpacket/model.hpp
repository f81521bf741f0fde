#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "kvpacket/hash.hpp"
#include "kvpacket/rng.hpp"
#include "kvpacket/tensor.hpp"

namespace kvp {

struct ModelConfig {
    int vocab_size = 512;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int head_dim = 32;
    int ffn_dim = 512;
    float rope_theta = 10000.0f;
    int max_position = 2048;

    void validate() const; // ConfigError on violation

    bool operator==(const ModelConfig&) const = default;
};

inline constexpr float kRmsEps = 1e-5f;

template <class S>
struct LayerWeightsT {
    TensorT<S> wq, wk, wv, wo;       // [d×d], applied as x·Wᵀ
    TensorT<S> w_gate, w_up, w_down; // [ffn×d], [ffn×d], [d×ffn]
    TensorT<S> attn_norm, ffn_norm;  // [d]
};

template <class S>
struct ModelWeightsT {
    ModelConfig config;
    TensorT<S> embedding;  // [V×d]
    std::vector<LayerWeightsT<S>> layers;
    TensorT<S> final_norm; // [d]
    TensorT<S> output;     // [V×d], untied head

    std::vector<TensorT<S>> parameters() const;
    void set_requires_grad(bool on);
};

// Per-layer cached K/V with explicit per-token absolute positions.
// Positions are what make realigned, concatenated, and pruned caches
// (which may keep different token subsets per layer) attendable through
// one causal rule: key_pos <= query_pos.
template <class S>
struct LayerKVT {
    TensorT<S> keys;   // [n×d_model], post-RoPE at the recorded positions
    TensorT<S> values; // [n×d_model]
    std::vector<int64_t> positions;
};

template <class S>
struct KVCacheT {
    std::vector<LayerKVT<S>> layers;
    int64_t base_position = 0;
    int64_t n_tokens = 0; // position span; equals every layer's row count until pruned

    bool empty() const { return layers.empty() || n_tokens == 0; }
    // True when every layer holds the same contiguous position run
    // [base_position, base_position + n_tokens).
    bool contiguous() const;
    void validate() const;
};

template <class S>
struct AttentionRecordT {
    // probs[layer][head]: softmax rows [n_query × n_keys]
    std::vector<std::vector<Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>> probs;
    std::vector<std::vector<int64_t>> key_positions; // per layer
    std::vector<int64_t> query_positions;
};

struct ForwardOptions {
    bool want_logits = true;
    bool logits_last_only = false; // decode path: head matmul over the final row only
    bool want_attn = false;
    int max_layers = 0; // probe depth cap; 0 runs every layer, capped runs carry no logits
};

template <class S>
struct ForwardResultT {
    KVCacheT<S> cache; // K/V of the new tokens only
    TensorT<S> logits;
    std::optional<AttentionRecordT<S>> attn;
};

// Core forward: new tokens at explicit absolute positions (strictly
// increasing), attending causally over an optional prefix cache plus
// themselves. Serves dense prefill, selective repair at interior positions,
// and attention over pruned caches alike.
template <class S>
ForwardResultT<S> forward_tokens(const ModelWeightsT<S>& w, const TensorT<S>& embeddings,
                                 std::span<const int64_t> positions, const KVCacheT<std::type_identity_t<S>>* prefix,
                                 const ForwardOptions& opt = {});

// Spec stance of prefill: contiguous continuation of the prefix.
template <class S>
ForwardResultT<S> prefill(const ModelWeightsT<S>& w, const TensorT<S>& embeddings,
                          int64_t start_position, const KVCacheT<std::type_identity_t<S>>* prefix = nullptr,
                          const ForwardOptions& opt = {});

// Tape-free append of freshly produced K/V onto a running cache.
template <class S>
void append_cache(KVCacheT<S>& cache, const KVCacheT<S>& tail);

template <class S>
struct GenerateResultT {
    std::vector<int> ids;
    TensorT<S> dists; // [|G|×|V|] full softmax at each emitted step
};

// Greedy continuation from an already-prefilled context. context_cache is
// consumed and grown internally. stop_token < 0 disables early stop; when
// hit, the stop token is the final emitted step.
template <class S>
GenerateResultT<S> greedy_decode(const ModelWeightsT<S>& w, KVCacheT<S> context_cache,
                                 const TensorT<S>& last_logits_row, int max_new_tokens,
                                 int stop_token = -1);

template <class S>
GenerateResultT<S> generate(const ModelWeightsT<S>& w, std::span<const int> context_token_ids,
                            int max_new_tokens, int stop_token = -1);

template <class S>
ModelWeightsT<S> init_model(const ModelConfig& config, Rng& rng);

// KVPW checkpoint container; bit-exact round-trip.
void save_model(const ModelWeightsT<float>& w, const std::filesystem::path& path);
ModelWeightsT<float> load_model(const std::filesystem::path& path); // loaded frozen
std::string serialize_model(const ModelWeightsT<float>& w);
Sha256 model_hash(const ModelWeightsT<float>& w);

using ModelWeights = ModelWeightsT<float>;
using LayerKV = LayerKVT<float>;
using KVCache = KVCacheT<float>;
using AttentionRecord = AttentionRecordT<float>;
using ForwardResult = ForwardResultT<float>;
using GenerateResult = GenerateResultT<float>;

extern template struct ModelWeightsT<float>;
extern template struct ModelWeightsT<double>;
extern template struct KVCacheT<float>;
extern template struct KVCacheT<double>;

} // namespace kvp
