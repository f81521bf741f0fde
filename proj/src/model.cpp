#include "kvpacket/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "kvpacket/io.hpp"

namespace kvp {

void ModelConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
    if (head_dim < 2 || head_dim % 2 != 0)
        throw ConfigError("head_dim must be even and >= 2 (RoPE pairs dimensions), have " + std::to_string(head_dim));
    if (d_model != n_heads * head_dim)
        throw ConfigError("d_model (" + std::to_string(d_model) + ") != n_heads*head_dim (" +
                          std::to_string(n_heads * head_dim) + ")");
    if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
    if (rope_theta <= 0) throw ConfigError("rope_theta must be positive");
    if (max_position < 1) throw ConfigError("max_position must be >= 1");
}

template <class S>
std::vector<TensorT<S>> ModelWeightsT<S>::parameters() const {
    std::vector<TensorT<S>> out{embedding};
    for (const auto& l : layers)
        for (const auto& t : {l.wq, l.wk, l.wv, l.wo, l.w_gate, l.w_up, l.w_down, l.attn_norm, l.ffn_norm})
            out.push_back(t);
    out.push_back(final_norm);
    out.push_back(output);
    return out;
}

template <class S>
void ModelWeightsT<S>::set_requires_grad(bool on) {
    for (auto& t : parameters()) t.set_requires_grad(on);
}

template <class S>
bool KVCacheT<S>::contiguous() const {
    for (const auto& l : layers) {
        if (static_cast<int64_t>(l.positions.size()) != n_tokens) return false;
        for (int64_t i = 0; i < n_tokens; ++i)
            if (l.positions[i] != base_position + i) return false;
    }
    return true;
}

template <class S>
void KVCacheT<S>::validate() const {
    if (base_position < 0) throw InvalidCacheError("negative base_position");
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& lk = layers[l];
        if (lk.keys.rows() != lk.values.rows())
            throw InvalidCacheError("layer " + std::to_string(l) + ": key/value token counts differ");
        if (static_cast<int64_t>(lk.positions.size()) != lk.keys.rows())
            throw InvalidCacheError("layer " + std::to_string(l) + ": positions do not match token count");
    }
}

template <class S>
ModelWeightsT<S> init_model(const ModelConfig& config, Rng& rng) {
    config.validate();
    const int64_t d = config.d_model, V = config.vocab_size, f = config.ffn_dim;
    auto randn = [&rng](Shape shape, float stddev) {
        std::vector<S> data(static_cast<size_t>(shape_numel(shape)));
        for (auto& v : data) v = static_cast<S>(rng.normal(0.0f, stddev));
        return tensor_from<S>(std::move(data), std::move(shape), true);
    };
    auto ones = [](Shape shape) {
        std::vector<S> data(static_cast<size_t>(shape_numel(shape)), S(1));
        return tensor_from<S>(std::move(data), std::move(shape), true);
    };
    ModelWeightsT<S> w;
    w.config = config;
    w.embedding = randn({V, d}, 0.02f);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeightsT<S> lw;
        lw.wq = randn({d, d}, 0.02f);
        lw.wk = randn({d, d}, 0.02f);
        lw.wv = randn({d, d}, 0.02f);
        lw.wo = randn({d, d}, 0.02f);
        lw.w_gate = randn({f, d}, 0.02f);
        lw.w_up = randn({f, d}, 0.02f);
        lw.w_down = randn({d, f}, 0.02f);
        lw.attn_norm = ones({d});
        lw.ffn_norm = ones({d});
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = ones({d});
    w.output = randn({V, d}, 0.02f);
    return w;
}

namespace {

template <class S>
TensorT<S> causal_mask(std::span<const int64_t> qpos, std::span<const int64_t> kpos) {
    const int64_t L = static_cast<int64_t>(qpos.size());
    const int64_t T = static_cast<int64_t>(kpos.size());
    std::vector<S> m(static_cast<size_t>(L * T));
    for (int64_t i = 0; i < L; ++i)
        for (int64_t j = 0; j < T; ++j)
            m[i * T + j] = kpos[j] <= qpos[i] ? S(0) : S(-1e9);
    return tensor_from<S>(std::move(m), {L, T});
}

} // namespace

template <class S>
ForwardResultT<S> forward_tokens(const ModelWeightsT<S>& w, const TensorT<S>& embeddings,
                                 std::span<const int64_t> positions, const KVCacheT<std::type_identity_t<S>>* prefix,
                                 const ForwardOptions& opt) {
    const ModelConfig& cfg = w.config;
    if (embeddings.rank() != 2 || embeddings.cols() != cfg.d_model)
        throw ShapeError("forward_tokens: embeddings must be [n x d_model], have " + shape_str(embeddings.shape()));
    const int64_t L = embeddings.rows();
    if (L < 1) throw ShapeError("forward_tokens: no tokens");
    if (static_cast<int64_t>(positions.size()) != L)
        throw ShapeError("forward_tokens: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(L) + " tokens");
    for (int64_t i = 0; i < L; ++i) {
        if (positions[i] < 0) throw RangeError("forward_tokens: negative position");
        if (i > 0 && positions[i] <= positions[i - 1])
            throw RangeError("forward_tokens: positions must be strictly increasing");
        if (positions[i] >= cfg.max_position)
            throw RangeError("forward_tokens: position " + std::to_string(positions[i]) +
                             " overflows max_position " + std::to_string(cfg.max_position));
    }
    if (prefix && prefix->empty()) prefix = nullptr;
    if (prefix && static_cast<int>(prefix->layers.size()) != cfg.n_layers)
        throw InvalidCacheError("forward_tokens: prefix has " + std::to_string(prefix->layers.size()) +
                                " layers, model has " + std::to_string(cfg.n_layers));

    const int n_run = opt.max_layers > 0 ? std::min(opt.max_layers, cfg.n_layers) : cfg.n_layers;
    if (n_run < cfg.n_layers && opt.want_logits)
        throw ConfigError("forward_tokens: depth-capped runs cannot produce logits");

    const int H = cfg.n_heads;
    const int64_t hd = cfg.head_dim;
    const S inv_sqrt_hd = S(1) / std::sqrt(static_cast<S>(hd));
    std::vector<int64_t> posv(positions.begin(), positions.end());

    ForwardResultT<S> out;
    out.cache.base_position = posv.front();
    out.cache.n_tokens = L;
    out.cache.layers.reserve(static_cast<size_t>(n_run));
    if (opt.want_attn) {
        out.attn.emplace();
        out.attn->probs.resize(static_cast<size_t>(n_run));
        out.attn->key_positions.resize(static_cast<size_t>(n_run));
        out.attn->query_positions = posv;
    }

    TensorT<S> x = embeddings;
    for (int l = 0; l < n_run; ++l) {
        const auto& lw = w.layers[l];
        auto xa = rowwise_mul(rms_normalize(x, S(kRmsEps)), lw.attn_norm);
        auto q = rope_rows(matmul_nt(xa, lw.wq), posv, H, S(cfg.rope_theta));
        auto k_new = rope_rows(matmul_nt(xa, lw.wk), posv, H, S(cfg.rope_theta));
        auto v_new = matmul_nt(xa, lw.wv);

        TensorT<S> K = k_new, V = v_new;
        std::vector<int64_t> kpos = posv;
        if (prefix) {
            const auto& pl = prefix->layers[l];
            if (pl.keys.rows() == 0) throw InvalidCacheError("forward_tokens: empty prefix layer " + std::to_string(l));
            std::vector<TensorT<S>> kparts{pl.keys, k_new}, vparts{pl.values, v_new};
            K = concat_rows<S>(kparts);
            V = concat_rows<S>(vparts);
            kpos = pl.positions;
            kpos.insert(kpos.end(), posv.begin(), posv.end());
        }
        auto mask = causal_mask<S>(posv, kpos);

        std::vector<TensorT<S>> head_outs;
        head_outs.reserve(H);
        if (opt.want_attn) out.attn->key_positions[l] = kpos;
        for (int h = 0; h < H; ++h) {
            auto qh = slice_cols(q, h * hd, hd);
            auto kh = slice_cols(K, h * hd, hd);
            auto vh = slice_cols(V, h * hd, hd);
            auto probs = softmax_rows(add(scale(matmul_nt(qh, kh), inv_sqrt_hd), mask));
            if (opt.want_attn) {
                Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rec(L, kpos.size());
                std::copy(probs.value().data(), probs.value().data() + probs.numel(), rec.data());
                out.attn->probs[l].push_back(std::move(rec));
            }
            head_outs.push_back(matmul(probs, vh));
        }
        x = add(x, matmul_nt(concat_cols<S>(head_outs), lw.wo));

        auto xf = rowwise_mul(rms_normalize(x, S(kRmsEps)), lw.ffn_norm);
        auto gated = mul(silu(matmul_nt(xf, lw.w_gate)), matmul_nt(xf, lw.w_up));
        x = add(x, matmul_nt(gated, lw.w_down));

        out.cache.layers.push_back(LayerKVT<S>{k_new, v_new, posv});
    }

    if (opt.want_logits) {
        auto xfin = rowwise_mul(rms_normalize(x, S(kRmsEps)), w.final_norm);
        if (opt.logits_last_only) xfin = slice_rows(xfin, L - 1, 1);
        out.logits = matmul_nt(xfin, w.output);
    }
    return out;
}

template <class S>
ForwardResultT<S> prefill(const ModelWeightsT<S>& w, const TensorT<S>& embeddings,
                          int64_t start_position, const KVCacheT<std::type_identity_t<S>>* prefix, const ForwardOptions& opt) {
    if (prefix && !prefix->empty() && start_position != prefix->base_position + prefix->n_tokens)
        throw RangeError("prefill: start_position " + std::to_string(start_position) +
                         " does not continue prefix ending at " +
                         std::to_string(prefix->base_position + prefix->n_tokens));
    std::vector<int64_t> positions(static_cast<size_t>(embeddings.rows()));
    for (size_t i = 0; i < positions.size(); ++i) positions[i] = start_position + static_cast<int64_t>(i);
    return forward_tokens(w, embeddings, positions, prefix, opt);
}

template <class S>
void append_cache(KVCacheT<S>& cache, const KVCacheT<S>& tail) {
    if (cache.empty()) {
        cache = tail;
        return;
    }
    if (cache.layers.size() != tail.layers.size())
        throw InvalidCacheError("append_cache: layer count mismatch");
    using Arr = typename TensorNodeT<S>::Array;
    for (size_t l = 0; l < cache.layers.size(); ++l) {
        auto& dst = cache.layers[l];
        const auto& src = tail.layers[l];
        auto join = [](const TensorT<S>& a, const TensorT<S>& b) {
            Arr merged(a.numel() + b.numel());
            merged.head(a.numel()) = a.value();
            merged.tail(b.numel()) = b.value();
            return tensor_from_array<S>(std::move(merged), {a.rows() + b.rows(), a.cols()});
        };
        dst.keys = join(dst.keys, src.keys);
        dst.values = join(dst.values, src.values);
        dst.positions.insert(dst.positions.end(), src.positions.begin(), src.positions.end());
    }
    cache.n_tokens += tail.n_tokens;
}

template <class S>
GenerateResultT<S> greedy_decode(const ModelWeightsT<S>& w, KVCacheT<S> cache,
                                 const TensorT<S>& last_logits_row, int max_new_tokens, int stop_token) {
    const int64_t V = w.config.vocab_size;
    GenerateResultT<S> res;
    std::vector<S> dist_rows;
    TensorT<S> logits = last_logits_row;
    int64_t next_pos = 0;
    for (const auto& l : cache.layers)
        for (int64_t p : l.positions) next_pos = std::max(next_pos, p + 1);

    for (int step = 0; step < max_new_tokens; ++step) {
        auto row = logits.rows() == 1 ? logits : slice_rows(logits, logits.rows() - 1, 1);
        auto probs = softmax_rows(row);
        int next = 0;
        S best = probs.at(0, 0);
        for (int64_t v = 1; v < V; ++v)
            if (probs.at(0, v) > best) { best = probs.at(0, v); next = static_cast<int>(v); }
        res.ids.push_back(next);
        dist_rows.insert(dist_rows.end(), probs.value().data(), probs.value().data() + V);
        if (next == stop_token) break;
        if (step + 1 == max_new_tokens) break;

        std::vector<int> id{next};
        auto emb = embedding_rows(w.embedding, id);
        std::vector<int64_t> pos{next_pos};
        auto fwd = forward_tokens(w, emb, pos, &cache, ForwardOptions{true, true, false});
        append_cache(cache, fwd.cache);
        logits = fwd.logits;
        ++next_pos;
    }
    res.dists = tensor_from<S>(std::move(dist_rows), {static_cast<int64_t>(res.ids.size()), V});
    return res;
}

template <class S>
GenerateResultT<S> generate(const ModelWeightsT<S>& w, std::span<const int> context_token_ids,
                            int max_new_tokens, int stop_token) {
    if (context_token_ids.empty()) throw ShapeError("generate: empty context");
    auto emb = embedding_rows(w.embedding, context_token_ids);
    auto fwd = prefill(w, emb, 0, nullptr, ForwardOptions{true, true, false});
    return greedy_decode(w, std::move(fwd.cache), fwd.logits, max_new_tokens, stop_token);
}

// ---- KVPW checkpoint ----

namespace {

constexpr uint32_t kWeightsVersion = 1;

void write_tensor(ByteWriter& bw, const std::string& name, const Tensor& t) {
    bw.str(name);
    bw.u32(static_cast<uint32_t>(t.shape().size()));
    for (int64_t d : t.shape()) bw.u64(static_cast<uint64_t>(d));
    bw.f32_array(std::span<const float>(t.value().data(), static_cast<size_t>(t.numel())));
}

ModelWeightsT<float> zeros_model(const ModelConfig& cfg) {
    const int64_t d = cfg.d_model, V = cfg.vocab_size, f = cfg.ffn_dim;
    ModelWeightsT<float> w;
    w.config = cfg;
    w.embedding = tensor_zeros<float>({V, d});
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeightsT<float> lw;
        lw.wq = tensor_zeros<float>({d, d});
        lw.wk = tensor_zeros<float>({d, d});
        lw.wv = tensor_zeros<float>({d, d});
        lw.wo = tensor_zeros<float>({d, d});
        lw.w_gate = tensor_zeros<float>({f, d});
        lw.w_up = tensor_zeros<float>({f, d});
        lw.w_down = tensor_zeros<float>({d, f});
        lw.attn_norm = tensor_zeros<float>({d});
        lw.ffn_norm = tensor_zeros<float>({d});
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = tensor_zeros<float>({d});
    w.output = tensor_zeros<float>({V, d});
    return w;
}

std::vector<std::pair<std::string, Tensor>> named_tensors(const ModelWeightsT<float>& w) {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding", w.embedding);
    for (size_t l = 0; l < w.layers.size(); ++l) {
        const auto& lw = w.layers[l];
        std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "wq", lw.wq);
        out.emplace_back(p + "wk", lw.wk);
        out.emplace_back(p + "wv", lw.wv);
        out.emplace_back(p + "wo", lw.wo);
        out.emplace_back(p + "w_gate", lw.w_gate);
        out.emplace_back(p + "w_up", lw.w_up);
        out.emplace_back(p + "w_down", lw.w_down);
        out.emplace_back(p + "attn_norm", lw.attn_norm);
        out.emplace_back(p + "ffn_norm", lw.ffn_norm);
    }
    out.emplace_back("final_norm", w.final_norm);
    out.emplace_back("output", w.output);
    return out;
}

} // namespace

std::string serialize_model(const ModelWeightsT<float>& w) {
    ByteWriter bw;
    bw.magic("KVPW");
    bw.u32(kWeightsVersion);
    bw.u32(static_cast<uint32_t>(w.config.vocab_size));
    bw.u32(static_cast<uint32_t>(w.config.d_model));
    bw.u32(static_cast<uint32_t>(w.config.n_layers));
    bw.u32(static_cast<uint32_t>(w.config.n_heads));
    bw.u32(static_cast<uint32_t>(w.config.head_dim));
    bw.u32(static_cast<uint32_t>(w.config.ffn_dim));
    bw.f32(w.config.rope_theta);
    bw.u32(static_cast<uint32_t>(w.config.max_position));
    auto named = named_tensors(w);
    bw.u32(static_cast<uint32_t>(named.size()));
    for (const auto& [name, t] : named) write_tensor(bw, name, t);
    return bw.buffer();
}

void save_model(const ModelWeightsT<float>& w, const std::filesystem::path& path) {
    std::string body = serialize_model(w);
    ByteWriter full;
    full.bytes(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(body.data()), body.size()));
    full.write_file(path);
}

ModelWeightsT<float> load_model(const std::filesystem::path& path) {
    ByteReader br = ByteReader::from_file(path);
    br.expect_magic("KVPW");
    uint32_t version = br.u32();
    if (version != kWeightsVersion)
        throw FormatError("KVPW version " + std::to_string(version) + " unsupported");
    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(br.u32());
    cfg.d_model = static_cast<int>(br.u32());
    cfg.n_layers = static_cast<int>(br.u32());
    cfg.n_heads = static_cast<int>(br.u32());
    cfg.head_dim = static_cast<int>(br.u32());
    cfg.ffn_dim = static_cast<int>(br.u32());
    cfg.rope_theta = br.f32();
    cfg.max_position = static_cast<int>(br.u32());
    cfg.validate();

    ModelWeightsT<float> w = zeros_model(cfg);
    std::map<std::string, Tensor> slots;
    for (auto& [name, t] : named_tensors(w)) slots.emplace(name, t);

    uint32_t count = br.u32();
    if (count != slots.size())
        throw FormatError("KVPW holds " + std::to_string(count) + " tensors, expected " + std::to_string(slots.size()));
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = br.str();
        auto it = slots.find(name);
        if (it == slots.end()) throw FormatError("KVPW unknown tensor '" + name + "'");
        uint32_t rank = br.u32();
        Shape shape(rank);
        for (uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<int64_t>(br.u64());
        if (shape != it->second.shape())
            throw FormatError("KVPW tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                              shape_str(it->second.shape()));
        auto data = br.f32_array(static_cast<size_t>(it->second.numel()));
        std::copy(data.begin(), data.end(), it->second.mutable_value().data());
    }
    w.set_requires_grad(false);
    return w;
}

Sha256 model_hash(const ModelWeightsT<float>& w) { return sha256(serialize_model(w)); }

// ---- instantiations ----

template struct ModelWeightsT<float>;
template struct ModelWeightsT<double>;
template struct KVCacheT<float>;
template struct KVCacheT<double>;

#define KVP_INSTANTIATE_MODEL(S)                                                                     \
    template ModelWeightsT<S> init_model<S>(const ModelConfig&, Rng&);                               \
    template ForwardResultT<S> forward_tokens<S>(const ModelWeightsT<S>&, const TensorT<S>&,        \
                                                 std::span<const int64_t>, const KVCacheT<S>*,      \
                                                 const ForwardOptions&);                             \
    template ForwardResultT<S> prefill<S>(const ModelWeightsT<S>&, const TensorT<S>&, int64_t,      \
                                          const KVCacheT<S>*, const ForwardOptions&);                \
    template void append_cache<S>(KVCacheT<S>&, const KVCacheT<S>&);                                 \
    template GenerateResultT<S> greedy_decode<S>(const ModelWeightsT<S>&, KVCacheT<S>,               \
                                                 const TensorT<S>&, int, int);                       \
    template GenerateResultT<S> generate<S>(const ModelWeightsT<S>&, std::span<const int>, int, int);

KVP_INSTANTIATE_MODEL(float)
KVP_INSTANTIATE_MODEL(double)

#undef KVP_INSTANTIATE_MODEL

} // namespace kvp
