#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ctf/autograd.hpp"
#include "ctf/tensor.hpp"
#include "helpers.hpp"

using ctf::Tape;
using ctf::TapeT;
using ctf::Tensor;
using ctf::TensorT;

namespace {

Tensor identity2() { return Tensor({2, 2}, {1.f, 0.f, 0.f, 1.f}); }

}  // namespace

TEST_CASE("matmul identity and dot product") {
    Tape tape(false);
    Tensor b({2, 2}, {3.f, 4.f, 5.f, 6.f});
    Tensor c = ctf::matmul(tape, identity2(), b);
    REQUIRE(c.at(0, 0) == 3.f);
    REQUIRE(c.at(0, 1) == 4.f);
    REQUIRE(c.at(1, 0) == 5.f);
    REQUIRE(c.at(1, 1) == 6.f);

    Tensor row({1, 2}, {1.f, 2.f});
    Tensor col({2, 1}, {3.f, 4.f});
    Tensor dot = ctf::matmul(tape, row, col);
    REQUIRE(dot.item() == 11.f);
}

TEST_CASE("matmul matches triple-loop oracle") {
    ctf::Rng rng(42);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({4, 2}, rng);
    Tape tape(false);
    Tensor c = ctf::matmul(tape, a, b);
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < 4; ++k) {
                acc += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(k, j));
            }
            REQUIRE(std::abs(acc - static_cast<double>(c.at(i, j))) < 1e-6);
        }
    }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    Tape tape(false);
    Tensor a({2, 3});
    Tensor b({2, 2});
    REQUIRE_THROWS_AS(ctf::matmul(tape, a, b), ctf::Error);
}

TEST_CASE("large matmul agrees with direct kernel") {
    // blocked and direct paths must produce identical sums; the kernels only
    // differ in traversal order of bit-identical per-element reductions
    ctf::Rng rng(9);
    Tensor a = Tensor::randn({16, 64}, rng);
    Tensor b = Tensor::randn({64, 1024}, rng);
    Tensor got({16, 1024});
    ctf::gemm(a.ptr(), b.ptr(), got.ptr(), 16, 64, 1024);
    for (int64_t i = 0; i < 16; ++i) {
        for (int64_t j = 0; j < 1024; j += 97) {
            double acc = 0.0;
            for (int64_t k = 0; k < 64; ++k)
                acc += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(k, j));
            REQUIRE(std::abs(acc - static_cast<double>(got.at(i, j))) < 1e-4);
        }
    }
}

TEST_CASE("softmax uniform and low-temperature behavior") {
    Tape tape(false);
    Tensor v({4}, {0.f, 0.f, 0.f, 0.f});
    Tensor p = ctf::softmax_rows(tape, v, 1.0f);
    for (int64_t i = 0; i < 4; ++i) REQUIRE(p[i] == Catch::Approx(0.25).margin(1e-7));

    Tensor sharp({2}, {10.f, 0.f});
    Tensor q = ctf::softmax_rows(tape, sharp, 0.01f);
    REQUIRE(q[0] > 1.0f - 1e-6f);
}

TEST_CASE("softmax matches scalar oracle and sums to one") {
    Tape tape(false);
    Tensor v({3}, {1.f, 2.f, 3.f});
    Tensor p = ctf::softmax_rows(tape, v, 1.0f);
    double denom = 0.0;
    for (int i = 0; i < 3; ++i) denom += std::exp(static_cast<double>(v[i]) - 3.0);
    double sum = 0.0;
    for (int i = 0; i < 3; ++i) {
        const double expect = std::exp(static_cast<double>(v[i]) - 3.0) / denom;
        REQUIRE(std::abs(expect - static_cast<double>(p[i])) < 1e-6);
        sum += static_cast<double>(p[i]);
    }
    REQUIRE(std::abs(sum - 1.0) < 1e-6);
}

TEST_CASE("softmax rejects non-positive temperature") {
    Tape tape(false);
    Tensor v({2}, {1.f, 2.f});
    REQUIRE_THROWS_AS(ctf::softmax_rows(tape, v, 0.0f), ctf::Error);
    REQUIRE_THROWS_AS(ctf::softmax_rows(tape, v, -1.0f), ctf::Error);
}

TEST_CASE("softmax is invariant to constant logit shifts") {
    ctf::Rng rng(7);
    Tape tape(false);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor v = Tensor::randn({8}, rng, 3.0f);
        Tensor shifted(v.shape);
        const float c = static_cast<float>(rng.uniform_range(-50.0, 50.0));
        for (int64_t i = 0; i < v.numel(); ++i) shifted[i] = v[i] + c;
        Tensor p0 = ctf::softmax_rows(tape, v, 1.0f);
        Tensor p1 = ctf::softmax_rows(tape, shifted, 1.0f);
        for (int64_t i = 0; i < v.numel(); ++i) {
            REQUIRE(std::abs(static_cast<double>(p0[i]) - static_cast<double>(p1[i])) < 1e-6);
        }
    }
}

TEST_CASE("cross entropy of uniform logits equals log vocab") {
    Tape tape(false);
    for (int64_t vocab : {2LL, 512LL, 16384LL}) {
        Tensor logits({1, vocab});
        Tensor loss = ctf::cross_entropy(tape, logits, {0});
        REQUIRE(std::abs(static_cast<double>(loss.item()) - std::log(static_cast<double>(vocab))) <
                1e-4);
    }
}

TEST_CASE("cross entropy of confident logits is near zero") {
    Tape tape(false);
    Tensor logits({1, 8});
    logits.at(0, 0) = 100.f;
    Tensor loss = ctf::cross_entropy(tape, logits, {0});
    REQUIRE(loss.item() < 1e-6f);
}

TEST_CASE("cross entropy matches per-row scalar oracle") {
    ctf::Rng rng(3);
    Tensor logits = Tensor::randn({4, 8}, rng, 2.0f);
    std::vector<int32_t> targets = {3, 0, 7, 2};
    Tape tape(false);
    Tensor loss = ctf::cross_entropy(tape, logits, targets);

    double total = 0.0;
    for (int64_t r = 0; r < 4; ++r) {
        double mx = logits.at(r, 0);
        for (int64_t j = 1; j < 8; ++j) mx = std::max(mx, static_cast<double>(logits.at(r, j)));
        double denom = 0.0;
        for (int64_t j = 0; j < 8; ++j) denom += std::exp(static_cast<double>(logits.at(r, j)) - mx);
        total -= static_cast<double>(logits.at(r, targets[static_cast<size_t>(r)])) - mx -
                 std::log(denom);
    }
    REQUIRE(std::abs(total / 4.0 - static_cast<double>(loss.item())) < 1e-5);
}

TEST_CASE("cross entropy honors ignore_index and rejects bad targets") {
    Tensor logits({3, 4}, {1.f, 0.f, 0.f, 0.f, 0.f, 9.f, 0.f, 0.f, 0.f, 0.f, 0.f, 0.f});
    {
        Tape tape(false);
        Tensor with_all = ctf::cross_entropy(tape, logits, {0, 1, 2});
        Tape tape2(false);
        Tensor skip_last = ctf::cross_entropy(tape2, logits, {0, 1, 3}, 3);
        // dropping the uniform row must change the mean
        REQUIRE(with_all.item() != skip_last.item());
    }
    Tape tape(false);
    REQUIRE_THROWS_AS(ctf::cross_entropy(tape, logits, {0, 1, 4}), ctf::Error);
}

TEST_CASE("backward of sum is all ones; of sum of squares is 2x") {
    ctf::Rng rng(11);
    Tensor x = Tensor::randn({3, 5}, rng);
    {
        Tape tape;
        tape.watch(x);
        Tensor loss = ctf::sum_all(tape, x);
        tape.backward(loss);
        for (float g : tape.grad(x)) REQUIRE(g == 1.0f);
    }
    {
        Tape tape;
        tape.watch(x);
        Tensor loss = ctf::sum_all(tape, ctf::mul(tape, x, x));
        tape.backward(loss);
        auto g = tape.grad(x);
        for (int64_t i = 0; i < x.numel(); ++i) {
            REQUIRE(g[static_cast<size_t>(i)] == Catch::Approx(2.0f * x[i]).margin(1e-6));
        }
    }
}

TEST_CASE("backward rejects non-scalar losses and gives unused leaves zero grad") {
    Tensor x({2, 2}, {1.f, 2.f, 3.f, 4.f});
    Tensor unused({3}, {1.f, 1.f, 1.f});
    Tape tape;
    tape.watch(x);
    tape.watch(unused);
    Tensor y = ctf::mul(tape, x, x);
    REQUIRE_THROWS_AS(tape.backward(y), ctf::Error);
    Tensor loss = ctf::sum_all(tape, y);
    tape.backward(loss);
    for (float g : tape.grad(unused)) REQUIRE(g == 0.0f);
}

TEST_CASE("finite differences validate every primitive op") {
    using S = double;
    ctf::Rng rng(1234);
    const S eps = 1e-5;

    SECTION("matmul") {
        TensorT<S> a = TensorT<S>::randn({3, 4}, rng);
        TensorT<S> b = TensorT<S>::randn({4, 5}, rng);
        auto rep = ctf_test::fd_check<S>(
            {&a, &b},
            [&](TapeT<S>& t) {
                auto m = ctf::matmul(t, a, b);
                return ctf::sum_all(t, ctf::mul(t, m, m));
            },
            eps);
        REQUIRE(rep.max_rel_err < 1e-7);
    }
    SECTION("add_bias, scale, sub") {
        TensorT<S> x = TensorT<S>::randn({4, 6}, rng);
        TensorT<S> b = TensorT<S>::randn({6}, rng);
        auto rep = ctf_test::fd_check<S>(
            {&x, &b},
            [&](TapeT<S>& t) {
                auto y = ctf::add_bias(t, x, b);
                auto z = ctf::sub(t, ctf::scale(t, y, S(1.7)), x);
                return ctf::mean_all(t, ctf::mul(t, z, z));
            },
            eps);
        REQUIRE(rep.max_rel_err < 1e-7);
    }
    SECTION("gelu") {
        TensorT<S> x = TensorT<S>::randn({5, 5}, rng, S(2));
        auto rep = ctf_test::fd_check<S>(
            {&x}, [&](TapeT<S>& t) { return ctf::sum_all(t, ctf::gelu(t, x)); }, eps);
        REQUIRE(rep.max_rel_err < 1e-6);
    }
    SECTION("rmsnorm") {
        TensorT<S> x = TensorT<S>::randn({4, 8}, rng);
        TensorT<S> g = TensorT<S>::randn({8}, rng);
        auto rep = ctf_test::fd_check<S>(
            {&x, &g},
            [&](TapeT<S>& t) {
                auto y = ctf::rmsnorm(t, x, g);
                return ctf::sum_all(t, ctf::mul(t, y, y));
            },
            eps);
        REQUIRE(rep.max_rel_err < 1e-6);
    }
    SECTION("embed") {
        TensorT<S> table = TensorT<S>::randn({6, 4}, rng);
        std::vector<int32_t> idx = {0, 3, 3, 5};
        auto rep = ctf_test::fd_check<S>(
            {&table},
            [&](TapeT<S>& t) {
                auto e = ctf::embed(t, table, idx);
                return ctf::sum_all(t, ctf::mul(t, e, e));
            },
            eps);
        REQUIRE(rep.max_rel_err < 1e-7);
    }
    SECTION("attention causal and full") {
        for (bool causal : {true, false}) {
            TensorT<S> q = TensorT<S>::randn({5, 8}, rng);
            TensorT<S> k = TensorT<S>::randn({5, 8}, rng);
            TensorT<S> v = TensorT<S>::randn({5, 8}, rng);
            auto rep = ctf_test::fd_check<S>(
                {&q, &k, &v},
                [&](TapeT<S>& t) {
                    auto o = ctf::attention(t, q, k, v, 2, causal);
                    return ctf::sum_all(t, ctf::mul(t, o, o));
                },
                eps);
            REQUIRE(rep.max_rel_err < 1e-6);
        }
    }
    SECTION("softmax_rows") {
        TensorT<S> x = TensorT<S>::randn({3, 7}, rng, S(2));
        TensorT<S> w = TensorT<S>::randn({3, 7}, rng);
        auto rep = ctf_test::fd_check<S>(
            {&x},
            [&](TapeT<S>& t) {
                auto p = ctf::softmax_rows(t, x, S(1.3));
                return ctf::sum_all(t, ctf::mul(t, p, w));
            },
            eps);
        REQUIRE(rep.max_rel_err < 1e-6);
    }
    SECTION("cross_entropy") {
        TensorT<S> logits = TensorT<S>::randn({4, 6}, rng, S(2));
        std::vector<int32_t> targets = {1, 5, 0, 2};
        auto rep = ctf_test::fd_check<S>(
            {&logits}, [&](TapeT<S>& t) { return ctf::cross_entropy(t, logits, targets); }, eps);
        REQUIRE(rep.max_rel_err < 1e-6);
    }
    SECTION("concat and slice") {
        TensorT<S> a = TensorT<S>::randn({2, 3}, rng);
        TensorT<S> b = TensorT<S>::randn({4, 3}, rng);
        auto rep = ctf_test::fd_check<S>(
            {&a, &b},
            [&](TapeT<S>& t) {
                auto cat = ctf::concat_rows(t, a, b);
                auto s = ctf::slice_rows(t, cat, 1, 4);
                return ctf::sum_all(t, ctf::mul(t, s, s));
            },
            eps);
        REQUIRE(rep.max_rel_err < 1e-7);
    }
}

TEST_CASE("operations are deterministic across repeated runs") {
    auto run = [] {
        ctf::Rng rng(77);
        Tape tape;
        Tensor a = Tensor::randn({6, 6}, rng);
        Tensor b = Tensor::randn({6, 6}, rng);
        tape.watch(a);
        tape.watch(b);
        Tensor out = ctf::gelu(tape, ctf::matmul(tape, a, b));
        Tensor loss = ctf::mean_all(tape, ctf::mul(tape, out, out));
        tape.backward(loss);
        std::vector<float> fingerprint(out.ptr(), out.ptr() + out.numel());
        auto g = tape.grad(a);
        fingerprint.insert(fingerprint.end(), g.begin(), g.end());
        fingerprint.push_back(loss.item());
        return fingerprint;
    };
    REQUIRE(run() == run());
}
