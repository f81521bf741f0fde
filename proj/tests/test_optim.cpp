#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kvpacket/error.hpp"
#include "kvpacket/optim.hpp"

using namespace kvp;

TEST_CASE("lr schedule ramps up then decays to zero") {
    CHECK(lr_schedule(1.0f, 0, 10, 4) == doctest::Approx(0.25f));
    CHECK(lr_schedule(1.0f, 3, 10, 4) == doctest::Approx(1.0f));
    CHECK(lr_schedule(1.0f, 4, 10, 4) == doctest::Approx(1.0f));
    CHECK(lr_schedule(1.0f, 7, 10, 4) == doctest::Approx(0.5f));
    CHECK(lr_schedule(1.0f, 9, 10, 4) == doctest::Approx(1.0f / 6.0f));

    CHECK(lr_schedule(2.0f, 0, 5) == doctest::Approx(2.0f));
    CHECK(lr_schedule(2.0f, 4, 5) == doctest::Approx(0.4f));
    for (int64_t s = 0; s < 12; ++s) CHECK(lr_schedule(1.0f, s, 10, 2) >= 0.0f);

    CHECK_THROWS_AS(lr_schedule(1.0f, 0, 0, 0), ConfigError);
}

TEST_CASE("optimizer construction validates its inputs") {
    auto x = tensor_from<float>({1.0f, 2.0f}, {2});
    CHECK_THROWS_AS(AdamW({x}, AdamWConfig{}), StateError);

    x.set_requires_grad(true);
    AdamWConfig bad;
    bad.lr = 0;
    CHECK_THROWS_AS(AdamW({x}, bad), ConfigError);
}

TEST_CASE("first step moves by about lr in the gradient direction") {
    auto x = tensor_from<float>({1.0f}, {1});
    x.set_requires_grad(true);
    AdamWConfig cfg;
    cfg.lr = 0.1f;
    cfg.weight_decay = 0;
    AdamW opt({x}, cfg);

    Tape tape;
    {
        TapeScope scope(tape);
        auto loss = sum_all(scale(x, 3.0f));
        tape.backward(loss);
    }
    opt.step();
    CHECK(x.item() == doctest::Approx(0.9f).epsilon(1e-4));
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("weight decay is decoupled from the gradient") {
    auto x = tensor_from<float>({2.0f}, {1});
    x.set_requires_grad(true);
    AdamWConfig cfg;
    cfg.lr = 0.1f;
    cfg.weight_decay = 0.5f;
    AdamW opt({x}, cfg);

    Tape tape;
    {
        TapeScope scope(tape);
        auto loss = sum_all(scale(x, 0.0f));
        tape.backward(loss);
    }
    opt.step();
    // zero gradient -> only the decay term applies
    CHECK(x.item() == doctest::Approx(2.0f * (1.0f - 0.05f)).epsilon(1e-5));
}

TEST_CASE("a quadratic bowl is minimized") {
    auto x = tensor_from<float>({2.0f, -1.0f, 0.5f}, {3});
    x.set_requires_grad(true);
    auto target = tensor_from<float>({-0.3f, 0.7f, 1.2f}, {3});

    AdamWConfig cfg;
    cfg.lr = 0.05f;
    cfg.weight_decay = 0;
    AdamW opt({x}, cfg);

    for (int i = 0; i < 300; ++i) {
        opt.zero_grad();
        Tape tape;
        {
            TapeScope scope(tape);
            auto d = sub(x, target);
            tape.backward(sum_all(mul(d, d)));
        }
        opt.step();
    }
    CHECK((x.value() - target.value()).abs().maxCoeff() < 0.02f);
}

TEST_CASE("zero_grad clears accumulated gradients") {
    auto x = tensor_from<float>({1.0f, 1.0f}, {2});
    x.set_requires_grad(true);
    AdamW opt({x}, AdamWConfig{});

    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum_all(x));
    }
    CHECK(x.has_grad());
    opt.zero_grad();
    CHECK(!x.has_grad());
}
