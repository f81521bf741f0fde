#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "kvpacket/error.hpp"
#include "kvpacket/flops.hpp"
#include "kvpacket/model.hpp"
#include "kvpacket/store.hpp"

using namespace kvp;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 64;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 4;
    c.head_dim = 8;
    c.ffn_dim = 64;
    c.max_position = 256;
    return c;
}

ModelWeights tiny_model(uint64_t seed) {
    auto rng = Rng(seed).stream("init");
    return init_model<float>(tiny_config(), rng);
}

std::vector<int> random_ids(int n, uint64_t seed) {
    auto rng = Rng(seed).stream("ids");
    std::vector<int> ids(static_cast<size_t>(n));
    for (auto& t : ids) t = rng.uniform_int(0, 63);
    return ids;
}

KVCache prefill_cache(const ModelWeights& w, const std::vector<int>& ids, int64_t start) {
    ForwardOptions opt;
    opt.want_logits = false;
    return prefill(w, embedding_rows(w.embedding, ids), start, nullptr, opt).cache;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    return (a.value() - b.value()).abs().maxCoeff();
}

float max_cache_diff(const KVCache& a, const KVCache& b) {
    REQUIRE(a.layers.size() == b.layers.size());
    float m = 0;
    for (size_t l = 0; l < a.layers.size(); ++l) {
        REQUIRE(a.layers[l].positions == b.layers[l].positions);
        m = std::max(m, max_abs_diff(a.layers[l].keys, b.layers[l].keys));
        m = std::max(m, max_abs_diff(a.layers[l].values, b.layers[l].values));
    }
    return m;
}

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("kvp_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("realign by zero is the identity") {
    auto w = tiny_model(1);
    auto cache = prefill_cache(w, random_ids(10, 2), 0);
    auto out = realign(cache, 0, w.config);
    CHECK(out.base_position == 0);
    CHECK(out.n_tokens == cache.n_tokens);
    for (size_t l = 0; l < cache.layers.size(); ++l) {
        CHECK(max_abs_diff(out.layers[l].keys, cache.layers[l].keys) == 0.0f);
        CHECK(out.layers[l].positions == cache.layers[l].positions);
    }
}

TEST_CASE("realign shares value tensors") {
    auto w = tiny_model(1);
    auto cache = prefill_cache(w, random_ids(6, 3), 0);
    auto out = realign(cache, 11, w.config);
    for (size_t l = 0; l < cache.layers.size(); ++l)
        CHECK(out.layers[l].values.value().data() == cache.layers[l].values.value().data());
}

TEST_CASE("realign inverts and composes") {
    auto w = tiny_model(4);
    auto cache = prefill_cache(w, random_ids(12, 5), 0);

    auto back = realign(realign(cache, 7, w.config), -7, w.config);
    CHECK(max_cache_diff(back, cache) < 1e-6f);

    auto once = realign(cache, 7, w.config);
    auto twice = realign(realign(cache, 3, w.config), 4, w.config);
    CHECK(max_cache_diff(twice, once) < 1e-6f);
}

TEST_CASE("realigned cache matches direct prefill at the target offset") {
    auto w = tiny_model(6);
    auto ids = random_ids(14, 7);
    auto at_zero = prefill_cache(w, ids, 0);
    auto at_delta = prefill_cache(w, ids, 23);

    auto moved = realign(at_zero, 23, w.config);
    CHECK(moved.base_position == 23);
    CHECK(max_cache_diff(moved, at_delta) < 1e-5f);
}

TEST_CASE("realign refuses negative target positions") {
    auto w = tiny_model(1);
    auto cache = prefill_cache(w, random_ids(4, 8), 0);
    CHECK_THROWS_AS(realign(cache, -1, w.config), RangeError);
}

TEST_CASE("realign bills one rotation op per key element") {
    auto w = tiny_model(1);
    auto cache = prefill_cache(w, random_ids(9, 9), 0);

    FlopsMeter meter;
    {
        MeterScope scope(meter);
        realign(cache, 5, w.config);
    }
    auto c = tiny_config();
    uint64_t expect = 9ull * c.n_layers * c.n_heads * c.head_dim;
    CHECK(meter.snapshot().realign_ops == expect);
    CHECK(meter.snapshot().forward_flops == 0);
}

TEST_CASE("concat of split prefill matches whole prefill") {
    auto w = tiny_model(10);
    auto ids = random_ids(16, 11);
    std::vector<int> head(ids.begin(), ids.begin() + 9);
    std::vector<int> tail(ids.begin() + 9, ids.end());

    auto c1 = prefill_cache(w, head, 0);
    ForwardOptions opt;
    opt.want_logits = false;
    auto c2 = prefill(w, embedding_rows(w.embedding, tail), 9, &c1, opt).cache;

    auto joined = concat({c1, c2});
    CHECK(joined.base_position == 0);
    CHECK(joined.n_tokens == 16);

    auto whole = prefill_cache(w, ids, 0);
    CHECK(max_cache_diff(joined, whole) < 1e-4f);
}

TEST_CASE("concat rejects gaps, overlaps, and mismatched layers") {
    auto w = tiny_model(12);
    auto c1 = prefill_cache(w, random_ids(5, 13), 0);
    auto c2 = prefill_cache(w, random_ids(5, 14), 5);

    CHECK_THROWS_AS(concat({}), ShapeError);
    CHECK_NOTHROW(concat({c1, c2}));

    auto gapped = realign(c2, 1, tiny_config());
    CHECK_THROWS_AS(concat({c1, gapped}), ContiguityError);
    auto overlapped = realign(c2, -1, tiny_config());
    CHECK_THROWS_AS(concat({c1, overlapped}), ContiguityError);

    auto short_cache = c2;
    short_cache.layers.pop_back();
    CHECK_THROWS_AS(concat({c1, short_cache}), InvalidCacheError);
}

TEST_CASE("cache entries round-trip bit-exactly") {
    auto w = tiny_model(15);
    auto dir = fresh_dir("entry");

    CacheEntry e;
    e.doc_id = "doc-00";
    e.cache = prefill_cache(w, random_ids(7, 16), 0);
    e.token_count = e.cache.n_tokens;
    e.created_with = "abc123";
    save_cache_entry(e, dir / "e.kvpc");

    auto r = load_cache_entry(dir / "e.kvpc");
    CHECK(r.doc_id == e.doc_id);
    CHECK(r.token_count == 7);
    CHECK(r.created_with == "abc123");
    CHECK(r.format_version == 1);
    CHECK(r.cache.base_position == 0);
    CHECK(max_cache_diff(r.cache, e.cache) == 0.0f);
}

TEST_CASE("truncated or corrupt entry files fail to parse") {
    auto w = tiny_model(15);
    auto dir = fresh_dir("corrupt");
    CacheEntry e;
    e.doc_id = "doc";
    e.cache = prefill_cache(w, random_ids(5, 17), 0);
    e.token_count = e.cache.n_tokens;
    auto path = dir / "e.kvpc";
    save_cache_entry(e, path);

    auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 8);
    CHECK_THROWS_AS(load_cache_entry(path), FormatError);

    std::ofstream out(dir / "bad.kvpc", std::ios::binary);
    out << "KVPX";
    out.close();
    CHECK_THROWS_AS(load_cache_entry(dir / "bad.kvpc"), FormatError);
    CHECK_THROWS_AS(load_cache_entry(dir / "missing.kvpc"), NotFoundError);
}

TEST_CASE("store puts, gets, lists, and guards overwrites") {
    auto w = tiny_model(18);
    auto dir = fresh_dir("store");
    CacheStore store(dir);

    CacheEntry e;
    e.doc_id = "b-doc";
    e.cache = prefill_cache(w, random_ids(6, 19), 0);
    e.token_count = e.cache.n_tokens;
    store.put(e);

    CHECK(store.contains("b-doc"));
    CHECK(!store.contains("other"));
    auto r = store.get("b-doc");
    CHECK(max_cache_diff(r.cache, e.cache) == 0.0f);

    CHECK_THROWS_AS(store.put(e), StateError);
    CHECK_NOTHROW(store.put(e, true));

    CacheEntry a = e;
    a.doc_id = "a-doc";
    store.put(a);
    CHECK(store.doc_ids() == std::vector<std::string>{"a-doc", "b-doc"});

    CHECK_THROWS_AS(store.get("missing"), NotFoundError);
    CacheEntry blank = e;
    blank.doc_id = "";
    CHECK_THROWS_AS(store.put(blank), ConfigError);

    CHECK(std::filesystem::exists(dir / "index.json"));
}

TEST_CASE("prune drops the requested fraction per layer") {
    auto w = tiny_model(20);
    auto cache = prefill_cache(w, random_ids(10, 21), 0);
    auto rng = Rng(22).stream("prune");

    auto res = prune(cache, 0.5, PruneMethod::random, rng);
    CHECK(res.cache.n_tokens == 10);
    for (size_t l = 0; l < res.cache.layers.size(); ++l) {
        const auto& kept = res.cache.layers[l];
        CHECK(kept.keys.rows() == 5);
        CHECK(kept.values.rows() == 5);
        CHECK(kept.positions.size() == 5);
        REQUIRE(res.mask.keep[l].size() == 10);

        // Kept rows are the original rows, in position order.
        size_t row = 0;
        for (size_t i = 0; i < 10; ++i)
            if (res.mask.keep[l][i]) {
                CHECK(kept.positions[row] == static_cast<int64_t>(i));
                auto orig = slice_rows(cache.layers[l].keys, static_cast<int64_t>(i), 1);
                auto got = slice_rows(kept.keys, static_cast<int64_t>(row), 1);
                CHECK(max_abs_diff(got, orig) == 0.0f);
                ++row;
            }
        CHECK(row == 5);
    }
}

TEST_CASE("prune rate zero keeps everything") {
    auto w = tiny_model(23);
    auto cache = prefill_cache(w, random_ids(8, 24), 0);
    auto rng = Rng(25).stream("prune");
    auto res = prune(cache, 0.0, PruneMethod::key_norm, rng);
    CHECK(max_cache_diff(res.cache, cache) == 0.0f);
}

TEST_CASE("prune key_norm drops the smallest keys first") {
    auto w = tiny_model(26);
    auto cache = prefill_cache(w, random_ids(12, 27), 0);
    auto rng = Rng(28).stream("prune");
    auto res = prune(cache, 0.25, PruneMethod::key_norm, rng);

    for (size_t l = 0; l < cache.layers.size(); ++l) {
        const auto& keys = cache.layers[l].keys;
        std::vector<std::pair<float, int64_t>> norms;
        for (int64_t i = 0; i < keys.rows(); ++i)
            norms.emplace_back(
                std::sqrt(keys.value().segment(i * keys.cols(), keys.cols()).square().sum()),
                i);
        std::sort(norms.begin(), norms.end());
        for (int64_t i = 0; i < 3; ++i)
            CHECK(res.mask.keep[l][static_cast<size_t>(norms[static_cast<size_t>(i)].second)] == 0);
        for (int64_t i = 3; i < 12; ++i)
            CHECK(res.mask.keep[l][static_cast<size_t>(norms[static_cast<size_t>(i)].second)] == 1);
    }
}

TEST_CASE("prune never drops protected positions") {
    auto w = tiny_model(29);
    auto cache = prefill_cache(w, random_ids(10, 30), 0);
    std::vector<int64_t> protect{0, 4};
    for (auto method : {PruneMethod::random, PruneMethod::key_norm}) {
        auto rng = Rng(31).stream("prune");
        auto res = prune(cache, 0.5, method, rng, protect);
        for (size_t l = 0; l < res.cache.layers.size(); ++l) {
            const auto& pos = res.cache.layers[l].positions;
            CHECK(std::count(pos.begin(), pos.end(), 0) == 1);
            CHECK(std::count(pos.begin(), pos.end(), 4) == 1);
            // 8 candidates at rate .5 -> 4 dropped, 6 kept.
            CHECK(pos.size() == 6);
        }
    }
}

TEST_CASE("prune leaves at least one row per layer") {
    auto w = tiny_model(32);
    auto cache = prefill_cache(w, random_ids(2, 33), 0);
    auto rng = Rng(34).stream("prune");
    auto res = prune(cache, 0.99, PruneMethod::random, rng);
    for (const auto& l : res.cache.layers) CHECK(l.keys.rows() == 1);
}

TEST_CASE("prune validates rate and method names") {
    auto w = tiny_model(35);
    auto cache = prefill_cache(w, random_ids(4, 36), 0);
    auto rng = Rng(37).stream("prune");
    CHECK_THROWS_AS(prune(cache, 1.0, PruneMethod::random, rng), RangeError);
    CHECK_THROWS_AS(prune(cache, -0.1, PruneMethod::random, rng), RangeError);

    CHECK(parse_prune_method("random") == PruneMethod::random);
    CHECK(parse_prune_method("key_norm") == PruneMethod::key_norm);
    CHECK_THROWS_AS(parse_prune_method("tova"), ConfigError);
}

TEST_CASE("attention over an unpruned result matches dense prefill") {
    auto w = tiny_model(38);
    auto prefix_ids = random_ids(9, 39);
    auto query_ids = random_ids(3, 40);
    auto prefix = prefill_cache(w, prefix_ids, 0);

    auto rng = Rng(41).stream("prune");
    auto res = prune(prefix, 0.0, PruneMethod::random, rng);

    std::vector<int64_t> qpos{9, 10, 11};
    auto gapped = attend_with_gaps(w, embedding_rows(w.embedding, query_ids), qpos, res.cache);
    auto dense = prefill(w, embedding_rows(w.embedding, query_ids), 9, &prefix);
    CHECK(max_abs_diff(gapped.logits, dense.logits) < 1e-5f);
}

TEST_CASE("attention over a gapped prefix differs from dense but stays finite") {
    auto w = tiny_model(42);
    auto prefix = prefill_cache(w, random_ids(10, 43), 0);
    auto rng = Rng(44).stream("prune");
    auto res = prune(prefix, 0.4, PruneMethod::key_norm, rng);

    auto query_ids = random_ids(2, 45);
    std::vector<int64_t> qpos{10, 11};
    auto emb = embedding_rows(w.embedding, query_ids);
    auto gapped = attend_with_gaps(w, emb, qpos, res.cache);
    auto dense = prefill(w, emb, 10, &prefix);
    CHECK(gapped.logits.shape() == dense.logits.shape());
    CHECK(gapped.logits.value().isFinite().all());
    CHECK(max_abs_diff(gapped.logits, dense.logits) > 0.0f);
}

TEST_CASE("attention refuses an empty prefix layer") {
    auto w = tiny_model(46);
    auto prefix = prefill_cache(w, random_ids(4, 47), 0);
    prefix.layers[1].keys = tensor_zeros<float>({0, 32});
    prefix.layers[1].values = tensor_zeros<float>({0, 32});
    prefix.layers[1].positions.clear();
    std::vector<int64_t> qpos{4};
    auto emb = embedding_rows(w.embedding, std::vector<int>{1});
    CHECK_THROWS_AS(attend_with_gaps(w, emb, qpos, prefix), InvalidCacheError);
}
