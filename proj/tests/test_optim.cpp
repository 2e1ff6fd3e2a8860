#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ctf/optim.hpp"
#include "ctf/tensor.hpp"

using ctf::AdamWState;
using ctf::Tensor;

TEST_CASE("adamw decay-only update when gradient is zero") {
    Tensor w({3}, {1.0f, -2.0f, 0.5f});
    std::vector<std::vector<float>> grads = {{0.f, 0.f, 0.f}};
    AdamWState state;
    const float lr = 1e-4f;
    ctf::adamw_step<float>({&w}, grads, state, lr);
    const float factor = 1.0f - lr * 0.05f;
    REQUIRE(w[0] == Catch::Approx(1.0f * factor).margin(1e-9));
    REQUIRE(w[1] == Catch::Approx(-2.0f * factor).margin(1e-9));
    REQUIRE(w[2] == Catch::Approx(0.5f * factor).margin(1e-9));
    REQUIRE(state.step == 1);
}

TEST_CASE("adamw first step matches closed form") {
    // single scalar, g=1 (inside the clip norm): m_hat=g, v_hat=g^2, so the
    // update is w*(1-lr*wd) - lr*g/(|g|+eps)
    Tensor w({1}, {0.7f});
    std::vector<std::vector<float>> grads = {{1.0f}};
    AdamWState state;
    const float lr = 3e-3f;
    ctf::adamw_step<float>({&w}, grads, state, lr);
    const double expect =
        0.7 * (1.0 - static_cast<double>(lr) * 0.05) - static_cast<double>(lr) * 1.0 / (1.0 + 1e-8);
    REQUIRE(std::abs(static_cast<double>(w[0]) - expect) < 1e-7);
}

TEST_CASE("gradient clipping rescales global norm to the cap") {
    Tensor w1({2}, {0.f, 0.f});
    Tensor w2({2}, {0.f, 0.f});
    // norm = sqrt(9 + 16) = 5
    std::vector<std::vector<float>> grads = {{3.f, 0.f}, {0.f, 4.f}};
    AdamWState state;
    const float reported = ctf::adamw_step<float>({&w1, &w2}, grads, state, 1e-4f);
    REQUIRE(reported == Catch::Approx(5.0f).margin(1e-5));
    REQUIRE(ctf::global_grad_norm(grads) == Catch::Approx(1.0f).margin(1e-6));
}

TEST_CASE("adamw rejects mismatched shapes") {
    Tensor w({3});
    std::vector<std::vector<float>> grads = {{1.f, 2.f}};
    AdamWState state;
    REQUIRE_THROWS_AS(ctf::adamw_step<float>({&w}, grads, state, 1e-4f), ctf::Error);
}

TEST_CASE("adamw step counter increases by one per update") {
    Tensor w({1}, {1.f});
    AdamWState state;
    for (int i = 1; i <= 5; ++i) {
        std::vector<std::vector<float>> grads = {{0.1f}};
        ctf::adamw_step<float>({&w}, grads, state, 1e-3f);
        REQUIRE(state.step == i);
    }
}

TEST_CASE("cosine schedule hits endpoints and midpoint") {
    REQUIRE(ctf::cosine_lr(0, 1000, 1e-4, 1e-5) == Catch::Approx(1e-4).margin(1e-12));
    REQUIRE(ctf::cosine_lr(1000, 1000, 1e-4, 1e-5) == Catch::Approx(1e-5).margin(1e-12));
    REQUIRE(ctf::cosine_lr(500, 1000, 1e-4, 1e-5) == Catch::Approx((1e-4 + 1e-5) / 2.0).margin(1e-12));
    // past the horizon: clamp
    REQUIRE(ctf::cosine_lr(2000, 1000, 1e-4, 1e-5) == Catch::Approx(1e-5).margin(1e-15));
}

TEST_CASE("cosine schedule is monotonically non-increasing") {
    double prev = ctf::cosine_lr(0, 275, 1e-4, 1e-5);
    for (int64_t s = 1; s <= 275; ++s) {
        const double cur = ctf::cosine_lr(s, 275, 1e-4, 1e-5);
        REQUIRE(cur <= prev + 1e-15);
        prev = cur;
    }
}
