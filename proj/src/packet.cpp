#include "kvpacket/packet.hpp"

#include <cmath>

#include "kvpacket/error.hpp"
#include "kvpacket/io.hpp"

namespace kvp {

namespace {

constexpr uint32_t kAdapterVersion = 1;

void serialize_adapter_body(ByteWriter& bw, const AdapterParams& a, const Sha256& model_hash) {
    bw.u32(kAdapterVersion);
    bw.u32(static_cast<uint32_t>(a.n_header()));
    bw.u32(static_cast<uint32_t>(a.n_trailer()));
    bw.u32(static_cast<uint32_t>(a.d_model()));
    bw.f32_array({a.header.value().data(), static_cast<size_t>(a.header.numel())});
    bw.f32_array({a.trailer.value().data(), static_cast<size_t>(a.trailer.numel())});
    bw.bytes(model_hash);
}

} // namespace

template <class S>
int64_t AdapterParamsT<S>::d_model() const {
    if (header.rank() != 2 || trailer.rank() != 2)
        throw ShapeError("adapters must be rank-2");
    if (header.rows() > 0 && trailer.rows() > 0 && header.cols() != trailer.cols())
        throw ShapeError("header and trailer widths differ");
    return header.rows() > 0 ? header.cols() : trailer.cols();
}

template <class S>
std::vector<TensorT<S>> AdapterParamsT<S>::parameters() const {
    return {header, trailer};
}

template <class S>
void AdapterParamsT<S>::set_requires_grad(bool on) {
    header.set_requires_grad(on);
    trailer.set_requires_grad(on);
}

template <class S>
void AdapterParamsT<S>::validate(const ModelConfig& config) const {
    if ((n_header() > 0 || n_trailer() > 0) && d_model() != config.d_model)
        throw ConfigError("adapter width " + std::to_string(d_model()) +
                          " does not match d_model " + std::to_string(config.d_model));
}

template <class S>
AdapterParamsT<S> init_adapters(const ModelWeightsT<S>& w, int n_header, int n_trailer,
                                Rng& rng) {
    if (n_header < 0 || n_trailer < 0) throw ConfigError("adapter counts must be >= 0");
    const int64_t V = w.embedding.rows(), d = w.embedding.cols();

    std::vector<S> mean(static_cast<size_t>(d), S(0)), sd(static_cast<size_t>(d), S(0));
    for (int64_t j = 0; j < d; ++j) {
        S m = 0;
        for (int64_t i = 0; i < V; ++i) m += w.embedding.at(i, j);
        m /= static_cast<S>(V);
        S var = 0;
        for (int64_t i = 0; i < V; ++i) {
            S del = w.embedding.at(i, j) - m;
            var += del * del;
        }
        mean[static_cast<size_t>(j)] = m;
        sd[static_cast<size_t>(j)] = std::sqrt(var / static_cast<S>(V));
    }

    auto draw = [&](int n) {
        std::vector<S> data(static_cast<size_t>(n) * static_cast<size_t>(d));
        for (int i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j)
                data[static_cast<size_t>(i * d + j)] =
                    mean[static_cast<size_t>(j)] +
                    sd[static_cast<size_t>(j)] * static_cast<S>(rng.normal());
        return tensor_from<S>(std::move(data), {n, d}, true);
    };

    AdapterParamsT<S> a;
    a.header = draw(n_header);
    a.trailer = draw(n_trailer);
    return a;
}

Sha256 adapter_fingerprint(const AdapterParams& a, const Sha256& model_hash) {
    ByteWriter bw;
    serialize_adapter_body(bw, a, model_hash);
    return sha256(bw.buffer());
}

void save_adapters(const AdapterParams& a, const Sha256& model_hash,
                   const std::filesystem::path& path) {
    ByteWriter bw;
    bw.magic("KVPA");
    serialize_adapter_body(bw, a, model_hash);
    bw.write_file(path);
}

LoadedAdapters load_adapters(const std::filesystem::path& path) {
    auto br = ByteReader::from_file(path);
    br.expect_magic("KVPA");
    uint32_t version = br.u32();
    if (version != kAdapterVersion)
        throw FormatError("adapters " + path.string() + ": version " + std::to_string(version));
    int64_t nh = br.u32(), nt = br.u32(), d = br.u32();
    LoadedAdapters out;
    out.adapters.header =
        tensor_from<float>(br.f32_array(static_cast<size_t>(nh * d)), {nh, d});
    out.adapters.trailer =
        tensor_from<float>(br.f32_array(static_cast<size_t>(nt * d)), {nt, d});
    auto hb = br.bytes(out.model_hash.size());
    std::copy(hb.begin(), hb.end(), out.model_hash.begin());
    if (!br.at_end()) throw FormatError("adapters " + path.string() + ": trailing bytes");
    return out;
}

template <class S>
KVCacheT<S> wrap_cache(const ModelWeightsT<S>& w, const AdapterParamsT<S>& a,
                       std::span<const int> doc_tokens) {
    if (doc_tokens.empty()) throw ShapeError("wrap: empty document");
    a.validate(w.config);

    std::vector<TensorT<S>> parts;
    if (a.n_header() > 0) parts.push_back(a.header);
    parts.push_back(embedding_rows(w.embedding, doc_tokens));
    if (a.n_trailer() > 0) parts.push_back(a.trailer);
    auto emb = parts.size() == 1 ? parts[0] : concat_rows<S>(parts);

    std::vector<int64_t> positions(static_cast<size_t>(emb.rows()));
    for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int64_t>(i);

    ForwardOptions opt;
    opt.want_logits = false;
    return forward_tokens(w, emb, positions, nullptr, opt).cache;
}

Packet wrap(const ModelWeightsT<float>& w, const AdapterParams& a, const Sha256& model_hash,
            std::string doc_id, std::span<const int> doc_tokens) {
    Packet p;
    p.doc_id = std::move(doc_id);
    p.cache = wrap_cache(w, a, doc_tokens);
    p.doc_token_count = static_cast<int64_t>(doc_tokens.size());
    p.fingerprint = hex(adapter_fingerprint(a, model_hash));
    return p;
}

CacheEntry to_cache_entry(const Packet& p) {
    CacheEntry e;
    e.doc_id = p.doc_id;
    e.cache = p.cache;
    e.token_count = p.cache.n_tokens;
    e.created_with = p.fingerprint;
    return e;
}

ComposedContext compose(const CacheStore& store, std::span<const std::string> packet_ids,
                        const AdapterParams& a, const Sha256& model_hash,
                        const ModelConfig& config, int64_t base_position) {
    if (packet_ids.empty()) throw ConfigError("compose: no packets");
    if (base_position < 0) throw RangeError("compose: negative base position");
    a.validate(config);

    ComposedContext ctx;
    ctx.fingerprint = hex(adapter_fingerprint(a, model_hash));

    std::vector<KVCache> parts;
    int64_t offset = base_position;
    for (const auto& id : packet_ids) {
        auto entry = store.get(id);
        if (entry.created_with != ctx.fingerprint)
            throw CompositionError("packet '" + id + "' was built with fingerprint " +
                                   entry.created_with + ", composing under " + ctx.fingerprint);
        parts.push_back(realign(entry.cache, offset - entry.cache.base_position, config));

        PacketBounds b;
        b.doc_id = id;
        int64_t span = entry.cache.n_tokens;
        b.header = {offset, offset + a.n_header()};
        b.document = {offset + a.n_header(), offset + span - a.n_trailer()};
        b.trailer = {offset + span - a.n_trailer(), offset + span};
        ctx.bounds.push_back(std::move(b));
        ctx.packet_ids.push_back(id);
        offset += span;
    }
    ctx.cache = concat(parts);
    return ctx;
}

GenerateResultT<float> answer(const ModelWeightsT<float>& w, const ComposedContext& ctx,
                              std::span<const int> query_ids, int max_new_tokens,
                              int stop_token) {
    if (query_ids.empty()) throw ShapeError("answer: empty query");
    std::vector<int64_t> positions(query_ids.size());
    int64_t start = ctx.cache.base_position + ctx.cache.n_tokens;
    for (size_t i = 0; i < positions.size(); ++i)
        positions[i] = start + static_cast<int64_t>(i);

    ForwardOptions opt;
    opt.want_logits = true;
    opt.logits_last_only = true;
    auto emb = embedding_rows(w.embedding, query_ids);
    auto res = forward_tokens(w, emb, positions, &ctx.cache, opt);

    KVCache full = ctx.cache;
    append_cache(full, res.cache);
    return greedy_decode(w, std::move(full), res.logits, max_new_tokens, stop_token);
}

#define KVP_INSTANTIATE_PACKET(S)                                                           \
    template struct AdapterParamsT<S>;                                                      \
    template AdapterParamsT<S> init_adapters<S>(const ModelWeightsT<S>&, int, int, Rng&);   \
    template KVCacheT<S> wrap_cache<S>(const ModelWeightsT<S>&, const AdapterParamsT<S>&,   \
                                       std::span<const int>);

KVP_INSTANTIATE_PACKET(float)
KVP_INSTANTIATE_PACKET(double)

} // namespace kvp
