#include "kvpacket/store.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "kvpacket/error.hpp"
#include "kvpacket/flops.hpp"
#include "kvpacket/hash.hpp"
#include "kvpacket/io.hpp"

#include <json.hpp>

namespace kvp {

namespace {

constexpr uint32_t kCacheVersion = 1;

TensorT<float> gather_rows(const TensorT<float>& t, const std::vector<int64_t>& rows) {
    const int64_t c = t.cols();
    Tensor::Array out(static_cast<int64_t>(rows.size()) * c);
    for (size_t i = 0; i < rows.size(); ++i)
        out.segment(static_cast<int64_t>(i) * c, c) = t.value().segment(rows[i] * c, c);
    return tensor_from_array<float>(std::move(out), {static_cast<int64_t>(rows.size()), c});
}

std::string sanitized(const std::string& doc_id) {
    std::string s;
    for (char ch : doc_id)
        s.push_back((std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '_' ||
                     ch == '-')
                        ? ch
                        : '_');
    if (s.size() > 64) s.resize(64);
    auto h = hex(sha256(doc_id));
    return s + "-" + h.substr(0, 8);
}

} // namespace

KVCache realign(const KVCache& cache, int64_t delta, const ModelConfig& config) {
    cache.validate();
    if (cache.base_position + delta < 0)
        throw RangeError("realign: base_position " + std::to_string(cache.base_position) +
                         " + delta " + std::to_string(delta) + " is negative");

    const int64_t hd = config.head_dim, pairs = hd / 2, H = config.n_heads;
    std::vector<float> cosv(static_cast<size_t>(pairs)), sinv(static_cast<size_t>(pairs));
    for (int64_t j = 0; j < pairs; ++j) {
        double ang = static_cast<double>(delta) *
                     std::pow(static_cast<double>(config.rope_theta),
                              -2.0 * static_cast<double>(j) / static_cast<double>(hd));
        cosv[static_cast<size_t>(j)] = static_cast<float>(std::cos(ang));
        sinv[static_cast<size_t>(j)] = static_cast<float>(std::sin(ang));
    }

    KVCache out;
    out.base_position = cache.base_position + delta;
    out.n_tokens = cache.n_tokens;
    for (const auto& l : cache.layers) {
        const int64_t rows = l.keys.rows(), D = l.keys.cols();
        if (D != H * hd) throw InvalidCacheError("realign: cache width does not match config");
        Tensor::Array k = l.keys.value();
        for (int64_t i = 0; i < rows; ++i) {
            float* row = k.data() + i * D;
            for (int64_t h = 0; h < H; ++h)
                for (int64_t j = 0; j < pairs; ++j) {
                    float c = cosv[static_cast<size_t>(j)], s = sinv[static_cast<size_t>(j)];
                    float a = row[h * hd + 2 * j], b = row[h * hd + 2 * j + 1];
                    row[h * hd + 2 * j] = c * a - s * b;
                    row[h * hd + 2 * j + 1] = s * a + c * b;
                }
        }
        meter_rotations(rows * D);

        LayerKVT<float> nl;
        nl.keys = tensor_from_array<float>(std::move(k), {rows, D});
        nl.values = l.values; // untouched, safe to share
        nl.positions.reserve(l.positions.size());
        for (int64_t p : l.positions) nl.positions.push_back(p + delta);
        out.layers.push_back(std::move(nl));
    }
    return out;
}

KVCache concat(const std::vector<KVCache>& caches) {
    if (caches.empty()) throw ShapeError("concat: no caches");
    const size_t L = caches[0].layers.size();
    int64_t expected = caches[0].base_position;
    for (size_t i = 0; i < caches.size(); ++i) {
        caches[i].validate();
        if (caches[i].layers.size() != L)
            throw InvalidCacheError("concat: cache " + std::to_string(i) + " has " +
                                    std::to_string(caches[i].layers.size()) + " layers, expected " +
                                    std::to_string(L));
        if (caches[i].base_position != expected)
            throw ContiguityError("concat: cache " + std::to_string(i) + " starts at " +
                                  std::to_string(caches[i].base_position) + ", expected " +
                                  std::to_string(expected) + " (gap of " +
                                  std::to_string(caches[i].base_position - expected) + ")");
        expected += caches[i].n_tokens;
    }

    KVCache out;
    out.base_position = caches[0].base_position;
    out.n_tokens = expected - caches[0].base_position;
    for (size_t l = 0; l < L; ++l) {
        std::vector<Tensor> ks, vs;
        LayerKVT<float> nl;
        for (const auto& c : caches) {
            ks.push_back(c.layers[l].keys);
            vs.push_back(c.layers[l].values);
            nl.positions.insert(nl.positions.end(), c.layers[l].positions.begin(),
                                c.layers[l].positions.end());
        }
        nl.keys = concat_rows<float>(ks);
        nl.values = concat_rows<float>(vs);
        out.layers.push_back(std::move(nl));
    }
    return out;
}

namespace {

ByteWriter encode_cache_entry(const CacheEntry& entry) {
    entry.cache.validate();
    ByteWriter bw;
    bw.magic("KVPC");
    bw.u32(kCacheVersion);
    bw.str(entry.doc_id);
    bw.str(entry.created_with);
    bw.i64(entry.cache.base_position);
    bw.u32(static_cast<uint32_t>(entry.cache.layers.size()));
    bw.u64(static_cast<uint64_t>(entry.cache.n_tokens));
    for (const auto& l : entry.cache.layers) {
        bw.u64(static_cast<uint64_t>(l.keys.rows()));
        bw.u64(static_cast<uint64_t>(l.keys.cols()));
        bw.i64_array(l.positions);
        bw.f32_array({l.keys.value().data(), static_cast<size_t>(l.keys.numel())});
        bw.f32_array({l.values.value().data(), static_cast<size_t>(l.values.numel())});
    }
    return bw;
}

} // namespace

void save_cache_entry(const CacheEntry& entry, const std::filesystem::path& path) {
    encode_cache_entry(entry).write_file(path);
}

uint64_t cache_entry_bytes(const CacheEntry& entry) {
    return encode_cache_entry(entry).buffer().size();
}

CacheEntry load_cache_entry(const std::filesystem::path& path) {
    auto br = ByteReader::from_file(path);
    br.expect_magic("KVPC");
    uint32_t version = br.u32();
    if (version != kCacheVersion)
        throw FormatError("cache " + path.string() + ": version " + std::to_string(version) +
                          ", expected " + std::to_string(kCacheVersion));
    CacheEntry e;
    e.format_version = version;
    e.doc_id = br.str();
    e.created_with = br.str();
    e.cache.base_position = br.i64();
    uint32_t n_layers = br.u32();
    e.cache.n_tokens = static_cast<int64_t>(br.u64());
    for (uint32_t l = 0; l < n_layers; ++l) {
        int64_t rows = static_cast<int64_t>(br.u64());
        int64_t cols = static_cast<int64_t>(br.u64());
        LayerKVT<float> lk;
        lk.positions = br.i64_array();
        if (static_cast<int64_t>(lk.positions.size()) != rows)
            throw FormatError("cache " + path.string() + ": layer " + std::to_string(l) +
                              " position count mismatch");
        lk.keys = tensor_from<float>(br.f32_array(static_cast<size_t>(rows * cols)), {rows, cols});
        lk.values = tensor_from<float>(br.f32_array(static_cast<size_t>(rows * cols)), {rows, cols});
        e.cache.layers.push_back(std::move(lk));
    }
    if (!br.at_end()) throw FormatError("cache " + path.string() + ": trailing bytes");
    e.token_count = e.cache.n_tokens;
    e.cache.validate();
    return e;
}

CacheStore::CacheStore(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
}

std::filesystem::path CacheStore::entry_path(const std::string& doc_id) const {
    return root_ / (sanitized(doc_id) + ".kvpc");
}

bool CacheStore::contains(const std::string& doc_id) const {
    return std::filesystem::exists(entry_path(doc_id));
}

void CacheStore::put(const CacheEntry& entry, bool overwrite) {
    if (entry.doc_id.empty()) throw ConfigError("store: empty doc_id");
    if (!overwrite && contains(entry.doc_id))
        throw StateError("store: doc_id '" + entry.doc_id + "' already present");
    save_cache_entry(entry, entry_path(entry.doc_id));
    rewrite_index();
}

CacheEntry CacheStore::get(const std::string& doc_id) const {
    auto path = entry_path(doc_id);
    if (!std::filesystem::exists(path))
        throw NotFoundError("store: no cache for doc_id '" + doc_id + "'");
    auto e = load_cache_entry(path);
    if (e.doc_id != doc_id)
        throw FormatError("store: file for '" + doc_id + "' holds doc_id '" + e.doc_id + "'");
    return e;
}

std::vector<std::string> CacheStore::doc_ids() const {
    std::vector<std::string> ids;
    for (const auto& f : std::filesystem::directory_iterator(root_))
        if (f.path().extension() == ".kvpc") ids.push_back(load_cache_entry(f.path()).doc_id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

void CacheStore::rewrite_index() const {
    nlohmann::json idx;
    idx["entries"] = nlohmann::json::array();
    for (const auto& f : std::filesystem::directory_iterator(root_)) {
        if (f.path().extension() != ".kvpc") continue;
        auto e = load_cache_entry(f.path());
        idx["entries"].push_back({{"doc_id", e.doc_id},
                                  {"token_count", e.token_count},
                                  {"fingerprint", e.created_with},
                                  {"file", f.path().filename().string()}});
    }
    ByteWriter bw;
    auto text = idx.dump(2);
    bw.bytes(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
    bw.write_file(root_ / "index.json");
}

PruneMethod parse_prune_method(std::string_view name) {
    if (name == "random") return PruneMethod::random;
    if (name == "key_norm") return PruneMethod::key_norm;
    throw ConfigError("unknown prune method: " + std::string(name));
}

PruneResult prune(const KVCache& cache, double rate, PruneMethod method, Rng& rng,
                  std::span<const int64_t> protect_positions) {
    cache.validate();
    if (rate < 0.0 || rate >= 1.0) throw RangeError("prune: rate must be in [0, 1)");
    std::unordered_set<int64_t> protect(protect_positions.begin(), protect_positions.end());

    PruneResult res;
    res.cache.base_position = cache.base_position;
    res.cache.n_tokens = cache.n_tokens;
    for (const auto& l : cache.layers) {
        const int64_t rows = l.keys.rows();
        std::vector<int64_t> candidates;
        for (int64_t i = 0; i < rows; ++i)
            if (!protect.count(l.positions[static_cast<size_t>(i)])) candidates.push_back(i);

        auto n_drop = static_cast<int64_t>(
            std::llround(rate * static_cast<double>(candidates.size())));
        // never empty a layer
        if (rows - n_drop < 1) n_drop = rows - 1;

        std::vector<int64_t> dropped;
        if (method == PruneMethod::random) {
            auto pick = rng.sample_without_replacement(static_cast<int>(candidates.size()),
                                                       static_cast<int>(n_drop));
            for (int i : pick) dropped.push_back(candidates[static_cast<size_t>(i)]);
        } else {
            std::vector<std::pair<float, int64_t>> scored; // (norm, row)
            for (int64_t i : candidates) {
                auto row = l.keys.value().segment(i * l.keys.cols(), l.keys.cols());
                scored.emplace_back(std::sqrt(row.square().sum()), i);
            }
            std::sort(scored.begin(), scored.end());
            for (int64_t i = 0; i < n_drop; ++i) dropped.push_back(scored[static_cast<size_t>(i)].second);
        }
        std::vector<uint8_t> keep(static_cast<size_t>(rows), 1);
        for (int64_t i : dropped) keep[static_cast<size_t>(i)] = 0;

        std::vector<int64_t> kept_rows;
        LayerKVT<float> nl;
        for (int64_t i = 0; i < rows; ++i)
            if (keep[static_cast<size_t>(i)]) {
                kept_rows.push_back(i);
                nl.positions.push_back(l.positions[static_cast<size_t>(i)]);
            }
        nl.keys = gather_rows(l.keys, kept_rows);
        nl.values = gather_rows(l.values, kept_rows);
        res.cache.layers.push_back(std::move(nl));
        res.mask.keep.push_back(std::move(keep));
    }
    return res;
}

ForwardResultT<float> attend_with_gaps(const ModelWeightsT<float>& w,
                                       const TensorT<float>& query_embeddings,
                                       std::span<const int64_t> query_positions,
                                       const KVCache& pruned, const ForwardOptions& opt) {
    for (size_t l = 0; l < pruned.layers.size(); ++l)
        if (pruned.layers[l].keys.rows() == 0)
            throw InvalidCacheError("attend_with_gaps: layer " + std::to_string(l) + " is empty");
    return forward_tokens(w, query_embeddings, query_positions, &pruned, opt);
}

} // namespace kvp
