#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <vector>

#include "kvpacket/error.hpp"
#include "kvpacket/flops.hpp"
#include "kvpacket/packet.hpp"

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

float max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    return (a.value() - b.value()).abs().maxCoeff();
}

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("kvp_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("adapter init is seeded, trainable, and sized") {
    auto w = tiny_model(1);
    auto r1 = Rng(2).stream("adapters");
    auto r2 = Rng(2).stream("adapters");
    auto a = init_adapters(w, 8, 8, r1);
    auto b = init_adapters(w, 8, 8, r2);

    CHECK(a.n_header() == 8);
    CHECK(a.n_trailer() == 8);
    CHECK(a.d_model() == 32);
    CHECK(a.header.requires_grad());
    CHECK(a.trailer.requires_grad());
    CHECK(max_abs_diff(a.header, b.header) == 0.0f);
    CHECK(max_abs_diff(a.trailer, b.trailer) == 0.0f);
    CHECK(a.header.value().isFinite().all());

    auto r3 = Rng(2).stream("adapters");
    CHECK_THROWS_AS(init_adapters(w, -1, 8, r3), ConfigError);
    CHECK(a.parameters().size() == 2);
}

TEST_CASE("adapter validation rejects a width mismatch") {
    AdapterParams a;
    a.header = tensor_zeros<float>({2, 16});
    a.trailer = tensor_zeros<float>({2, 16});
    CHECK_THROWS_AS(a.validate(tiny_config()), ConfigError);
}

TEST_CASE("zero-width adapters wrap to a plain prefill cache") {
    auto w = tiny_model(3);
    auto rng = Rng(4).stream("adapters");
    auto a = init_adapters(w, 0, 0, rng);
    auto doc = random_ids(10, 5);

    auto wrapped = wrap_cache(w, a, doc);
    ForwardOptions opt;
    opt.want_logits = false;
    auto plain = prefill(w, embedding_rows(w.embedding, doc), 0, nullptr, opt).cache;

    REQUIRE(wrapped.n_tokens == 10);
    for (size_t l = 0; l < wrapped.layers.size(); ++l) {
        CHECK(max_abs_diff(wrapped.layers[l].keys, plain.layers[l].keys) == 0.0f);
        CHECK(max_abs_diff(wrapped.layers[l].values, plain.layers[l].values) == 0.0f);
        CHECK(wrapped.layers[l].positions == plain.layers[l].positions);
    }
}

TEST_CASE("packets span header, document, and trailer") {
    auto w = tiny_model(6);
    auto rng = Rng(7).stream("adapters");
    auto a = init_adapters(w, 8, 8, rng);
    auto mh = model_hash(w);
    auto doc = random_ids(12, 8);

    auto p = wrap(w, a, mh, "doc-0", doc);
    CHECK(p.doc_id == "doc-0");
    CHECK(p.doc_token_count == 12);
    CHECK(p.cache.n_tokens == 8 + 12 + 8);
    CHECK(p.cache.base_position == 0);
    for (const auto& l : p.cache.layers) {
        REQUIRE(l.positions.size() == 28);
        CHECK(l.positions.front() == 0);
        CHECK(l.positions.back() == 27);
    }
    CHECK(p.fingerprint == hex(adapter_fingerprint(a, mh)));

    auto p2 = wrap(w, a, mh, "doc-0", doc);
    for (size_t l = 0; l < p.cache.layers.size(); ++l)
        CHECK(max_abs_diff(p2.cache.layers[l].keys, p.cache.layers[l].keys) == 0.0f);

    auto entry = to_cache_entry(p);
    CHECK(entry.doc_id == "doc-0");
    CHECK(entry.token_count == 28);
    CHECK(entry.created_with == p.fingerprint);
}

TEST_CASE("wrapping works in double precision") {
    auto rng = Rng(9).stream("init");
    auto w = init_model<double>(tiny_config(), rng);
    auto arng = Rng(10).stream("adapters");
    auto a = init_adapters(w, 2, 2, arng);
    auto doc = random_ids(5, 11);
    auto c = wrap_cache(w, a, doc);
    CHECK(c.n_tokens == 9);
    CHECK(c.layers.size() == 2);
}

TEST_CASE("adapter checkpoints round-trip with their model hash") {
    auto w = tiny_model(12);
    auto rng = Rng(13).stream("adapters");
    auto a = init_adapters(w, 8, 4, rng);
    auto mh = model_hash(w);
    auto dir = fresh_dir("adapters");

    save_adapters(a, mh, dir / "a.kvpa");
    auto loaded = load_adapters(dir / "a.kvpa");
    CHECK(loaded.model_hash == mh);
    CHECK(max_abs_diff(loaded.adapters.header, a.header) == 0.0f);
    CHECK(max_abs_diff(loaded.adapters.trailer, a.trailer) == 0.0f);
    CHECK(hex(adapter_fingerprint(loaded.adapters, loaded.model_hash)) ==
          hex(adapter_fingerprint(a, mh)));

    auto size = std::filesystem::file_size(dir / "a.kvpa");
    std::filesystem::resize_file(dir / "a.kvpa", size - 4);
    CHECK_THROWS_AS(load_adapters(dir / "a.kvpa"), FormatError);
}

TEST_CASE("fingerprints separate adapter generations") {
    auto w = tiny_model(14);
    auto r1 = Rng(15).stream("adapters");
    auto r2 = Rng(16).stream("adapters");
    auto a = init_adapters(w, 8, 8, r1);
    auto b = init_adapters(w, 8, 8, r2);
    auto mh = model_hash(w);
    CHECK(hex(adapter_fingerprint(a, mh)) != hex(adapter_fingerprint(b, mh)));

    auto other = model_hash(tiny_model(15));
    CHECK(hex(adapter_fingerprint(a, mh)) != hex(adapter_fingerprint(a, other)));
}

TEST_CASE("compose tiles packets onto one position line") {
    auto w = tiny_model(17);
    auto rng = Rng(18).stream("adapters");
    auto a = init_adapters(w, 2, 2, rng);
    auto mh = model_hash(w);
    auto dir = fresh_dir("compose");
    CacheStore store(dir);

    std::vector<std::string> ids{"d0", "d1", "d2"};
    for (int i = 0; i < 3; ++i)
        store.put(to_cache_entry(wrap(w, a, mh, ids[static_cast<size_t>(i)],
                                      random_ids(4, 19 + static_cast<uint64_t>(i)))));

    FlopsMeter meter;
    ComposedContext ctx;
    {
        MeterScope scope(meter);
        ctx = compose(store, ids, a, mh, w.config);
    }

    CHECK(ctx.packet_ids == ids);
    CHECK(ctx.cache.n_tokens == 24);
    CHECK(ctx.cache.base_position == 0);
    CHECK(ctx.cache.contiguous());
    REQUIRE(ctx.bounds.size() == 3);
    for (int i = 0; i < 3; ++i) {
        const auto& b = ctx.bounds[static_cast<size_t>(i)];
        int64_t off = 8 * i;
        CHECK(b.doc_id == ids[static_cast<size_t>(i)]);
        CHECK(b.header.begin == off);
        CHECK(b.header.end == off + 2);
        CHECK(b.document.begin == off + 2);
        CHECK(b.document.end == off + 6);
        CHECK(b.trailer.begin == off + 6);
        CHECK(b.trailer.end == off + 8);
    }

    // Composition is pure reuse: rotations only, zero forward compute.
    CHECK(meter.snapshot().forward_flops == 0);
    CHECK(meter.snapshot().selection_flops == 0);
    auto c = tiny_config();
    CHECK(meter.snapshot().realign_ops == 24ull * c.n_layers * c.n_heads * c.head_dim);

    // The second packet's realigned keys match wrapping at offset directly.
    auto p1 = wrap(w, a, mh, "d1", random_ids(4, 20));
    auto moved = realign(p1.cache, 8, w.config);
    for (size_t l = 0; l < moved.layers.size(); ++l) {
        auto got = slice_rows(ctx.cache.layers[l].keys, 8, 8);
        CHECK(max_abs_diff(got, moved.layers[l].keys) < 1e-6f);
    }
}

TEST_CASE("compose rejects foreign and missing fingerprints") {
    auto w = tiny_model(21);
    auto rng = Rng(22).stream("adapters");
    auto a = init_adapters(w, 2, 2, rng);
    auto mh = model_hash(w);
    auto dir = fresh_dir("compose_fp");
    CacheStore store(dir);

    store.put(to_cache_entry(wrap(w, a, mh, "ok", random_ids(4, 23))));

    CacheEntry plain;
    plain.doc_id = "plain";
    ForwardOptions opt;
    opt.want_logits = false;
    plain.cache = prefill(w, embedding_rows(w.embedding, random_ids(4, 24)), 0, nullptr, opt).cache;
    plain.token_count = plain.cache.n_tokens;
    store.put(plain);

    std::vector<std::string> bad{"ok", "plain"};
    CHECK_THROWS_AS(compose(store, bad, a, mh, w.config), CompositionError);

    std::vector<std::string> none;
    CHECK_THROWS_AS(compose(store, none, a, mh, w.config), ConfigError);
    std::vector<std::string> ok{"ok"};
    CHECK_THROWS_AS(compose(store, ok, a, mh, w.config, -1), RangeError);
}

TEST_CASE("single degenerate packet answers like full prefill") {
    auto w = tiny_model(25);
    auto rng = Rng(26).stream("adapters");
    auto a = init_adapters(w, 0, 0, rng);
    auto mh = model_hash(w);
    auto dir = fresh_dir("degenerate");
    CacheStore store(dir);

    auto doc = random_ids(9, 27);
    store.put(to_cache_entry(wrap(w, a, mh, "solo", doc)));
    std::vector<std::string> ids{"solo"};
    auto ctx = compose(store, ids, a, mh, w.config);

    auto query = random_ids(3, 28);
    auto got = answer(w, ctx, query, 4);

    std::vector<int> full(doc);
    full.insert(full.end(), query.begin(), query.end());
    auto want = generate(w, full, 4);

    CHECK(got.ids == want.ids);
    CHECK(max_abs_diff(got.dists, want.dists) < 1e-4f);
}

TEST_CASE("answer validates the query") {
    auto w = tiny_model(29);
    auto rng = Rng(30).stream("adapters");
    auto a = init_adapters(w, 2, 2, rng);
    auto mh = model_hash(w);
    auto dir = fresh_dir("answer");
    CacheStore store(dir);
    store.put(to_cache_entry(wrap(w, a, mh, "doc", random_ids(4, 31))));
    std::vector<std::string> ids{"doc"};
    auto ctx = compose(store, ids, a, mh, w.config);
    CHECK_THROWS_AS(answer(w, ctx, std::vector<int>{}, 4), ShapeError);
}

TEST_CASE("gradients reach the adapters through a wrapped cache") {
    auto w = tiny_model(32);
    w.set_requires_grad(false);
    auto rng = Rng(33).stream("adapters");
    auto a = init_adapters(w, 2, 2, rng);
    auto doc = random_ids(6, 34);

    Tape tape;
    TapeScope scope(tape);
    auto c = wrap_cache(w, a, doc);
    auto loss = sum_all(c.layers.back().keys);
    tape.backward(loss);

    CHECK(a.header.grad().abs().maxCoeff() > 0.0f);
    CHECK(a.trailer.grad().abs().maxCoeff() > 0.0f);
    CHECK(!w.embedding.has_grad());
}
