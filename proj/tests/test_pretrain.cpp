#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kvpacket/error.hpp"
#include "kvpacket/pretrain.hpp"

using namespace kvp;

namespace {

ModelConfig task_config() {
    ModelConfig c;
    c.vocab_size = vocab::kSize;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 4;
    c.head_dim = 8;
    c.ffn_dim = 64;
    c.max_position = 128;
    return c;
}

// Small geometry so a budget-exhaustion run stays cheap.
PretrainConfig tiny_run() {
    PretrainConfig pc;
    pc.max_steps = 3;
    pc.batch_size = 2;
    pc.warmup_steps = 1;
    pc.eval_every = 2;
    pc.eval_instances = 2;
    pc.eval_params.n_docs = 2;
    pc.eval_params.doc_tokens = 21;
    pc.min_doc_tokens = 16;
    pc.max_doc_tokens = 24;
    return pc;
}

} // namespace

TEST_CASE("pretrain config validation") {
    PretrainConfig pc;
    CHECK_NOTHROW(pc.validate());
    pc.max_steps = 0;
    CHECK_THROWS_AS(pc.validate(), ConfigError);
    pc = PretrainConfig{};
    pc.lr = -1;
    CHECK_THROWS_AS(pc.validate(), ConfigError);
    pc = PretrainConfig{};
    pc.min_doc_tokens = 3;
    CHECK_THROWS_AS(pc.validate(), ConfigError);
    pc = PretrainConfig{};
    pc.max_doc_tokens = pc.min_doc_tokens - 1;
    CHECK_THROWS_AS(pc.validate(), ConfigError);
}

TEST_CASE("domain accuracy of an untrained model is near zero") {
    auto rng = Rng(1).stream("init");
    auto w = init_model<float>(task_config(), rng);
    TaskParams p;
    p.n_docs = 2;
    p.doc_tokens = 21;
    auto eval_rng = Rng(2).stream("eval");
    float acc = domain_accuracy(w, Domain::needle, p, 10, eval_rng);
    CHECK(acc >= 0.0f);
    CHECK(acc <= 0.2f);
}

TEST_CASE("an exhausted step budget reports the reached accuracies") {
    PretrainLog log;
    CHECK_THROWS_AS(pretrain_toy_model(task_config(), tiny_run(), 11, &log), TrainingError);
    CHECK(log.loss.size() == 3);
    CHECK(log.lr.size() == 3);
    REQUIRE(log.eval_steps.size() == 1);
    CHECK(log.eval_steps[0] == 2);
    CHECK(log.stopped_at == -1);
    for (float l : log.loss) CHECK(l > 0.0f);
}

TEST_CASE("training steps are deterministic per seed") {
    PretrainLog a, b;
    CHECK_THROWS_AS(pretrain_toy_model(task_config(), tiny_run(), 12, &a), TrainingError);
    CHECK_THROWS_AS(pretrain_toy_model(task_config(), tiny_run(), 12, &b), TrainingError);
    REQUIRE(a.loss.size() == b.loss.size());
    for (size_t i = 0; i < a.loss.size(); ++i) CHECK(a.loss[i] == b.loss[i]);

    PretrainLog c;
    CHECK_THROWS_AS(pretrain_toy_model(task_config(), tiny_run(), 13, &c), TrainingError);
    CHECK(a.loss[0] != c.loss[0]);
}
