#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "neglab/errors.hpp"
#include "neglab/rng.hpp"
#include "neglab/tensor.hpp"

using namespace neglab;

namespace {

// independent triple-loop reference, plain i/j/k order
Tensor matmul_reference(const Tensor& a, const Tensor& b) {
    Tensor c({a.shape[0], b.shape[1]});
    for (size_t i = 0; i < a.shape[0]; ++i) {
        for (size_t j = 0; j < b.shape[1]; ++j) {
            float acc = 0.0f;
            for (size_t k = 0; k < a.shape[1]; ++k) {
                acc += a.at(i, k) * b.at(k, j);
            }
            c.at(i, j) = acc;
        }
    }
    return c;
}

Tensor random_tensor(std::vector<size_t> shape, uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    t.data = rng.gaussian_vector(t.numel(), 0.0f, 1.0f);
    return t;
}

}  // namespace

TEST_CASE("matmul identity and zero") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor b({2, 2}, {3, 4, 5, 6});
    const Tensor prod = ops::matmul(eye, b);
    CHECK(prod.data == b.data);  // exact

    Tensor row({1, 2}, {1, 2});
    Tensor zeros({2, 1}, {0, 0});
    const Tensor z = ops::matmul(row, zeros);
    CHECK(z.at(0) == 0.0f);
}

TEST_CASE("matmul matches triple-loop oracle on seeded 64x64") {
    const Tensor a = random_tensor({64, 64}, 11);
    const Tensor b = random_tensor({64, 64}, 12);
    const Tensor fast = ops::matmul(a, b);
    const Tensor ref = matmul_reference(a, b);
    double max_diff = 0.0;
    for (size_t i = 0; i < fast.data.size(); ++i) {
        max_diff = std::max(max_diff, static_cast<double>(std::fabs(fast.data[i] - ref.data[i])));
    }
    CHECK(max_diff < 1e-5);
}

TEST_CASE("matmul shape mismatch") {
    CHECK_THROWS_AS(ops::matmul(Tensor({2, 3}), Tensor({2, 2})), ShapeError);
}

TEST_CASE("masked softmax rows") {
    SUBCASE("two equal scores over two allowed keys") {
        Tensor s({2, 2}, {0, 0, 0, 0});
        const Tensor p = ops::masked_softmax_rows(s);
        CHECK(p.at(1, 0) == doctest::Approx(0.5));
        CHECK(p.at(1, 1) == doctest::Approx(0.5));
    }
    SUBCASE("single allowed key gets weight 1") {
        Tensor s({2, 2}, {7, -3, 1, 2});
        const Tensor p = ops::masked_softmax_rows(s);
        CHECK(p.at(0, 0) == 1.0f);
        CHECK(p.at(0, 1) == 0.0f);  // masked exactly
    }
    SUBCASE("row [1,2,3] at t=2 matches the scalar exp oracle") {
        Tensor s({3, 3}, {0, 0, 0, 0, 0, 0, 1, 2, 3});
        const Tensor p = ops::masked_softmax_rows(s);
        const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
        const double z = e1 + e2 + e3;
        CHECK(p.at(2, 0) == doctest::Approx(e1 / z).epsilon(1e-4));
        CHECK(p.at(2, 1) == doctest::Approx(e2 / z).epsilon(1e-4));
        CHECK(p.at(2, 2) == doctest::Approx(e3 / z).epsilon(1e-4));
        CHECK(p.at(2, 0) == doctest::Approx(0.0900).epsilon(1e-2));
        CHECK(p.at(2, 1) == doctest::Approx(0.2447).epsilon(1e-2));
        CHECK(p.at(2, 2) == doctest::Approx(0.6652).epsilon(1e-2));
    }
    SUBCASE("rows sum to 1 and masked entries are exactly zero on random input") {
        Rng rng(99);
        for (int trial = 0; trial < 20; ++trial) {
            const size_t t = 2 + rng.below(10);
            Tensor s({t, t});
            s.data = rng.gaussian_vector(t * t, 0.0f, 5.0f);
            const Tensor p = ops::masked_softmax_rows(s);
            for (size_t q = 0; q < t; ++q) {
                float sum = 0.0f;
                for (size_t kk = 0; kk < t; ++kk) {
                    if (kk > q) CHECK(p.at(q, kk) == 0.0f);
                    sum += p.at(q, kk);
                }
                CHECK(std::fabs(sum - 1.0f) < 1e-6f);
            }
        }
    }
}

TEST_CASE("rms_norm") {
    SUBCASE("all-ones with tiny eps is identity") {
        Tensor x({4}, {1, 1, 1, 1});
        Tensor gamma({4}, {1, 1, 1, 1});
        const Tensor out = ops::rms_norm(x, gamma, 1e-12f);
        for (float v : out.data) CHECK(v == doctest::Approx(1.0f));
    }
    SUBCASE("scalar oracle for [3,4]") {
        Tensor x({2}, {3, 4});
        Tensor gamma({2}, {1, 1});
        const Tensor out = ops::rms_norm(x, gamma, 0.0f);
        const double scale = std::sqrt((9.0 + 16.0) / 2.0);  // sqrt(12.5)
        CHECK(out.at(0) == doctest::Approx(3.0 / scale).epsilon(1e-5));
        CHECK(out.at(1) == doctest::Approx(4.0 / scale).epsilon(1e-5));
        CHECK(out.at(0) == doctest::Approx(0.8485).epsilon(1e-3));
        CHECK(out.at(1) == doctest::Approx(1.1314).epsilon(1e-3));
    }
    SUBCASE("positive-scale invariance") {
        Rng rng(5);
        Tensor x({16});
        x.data = rng.gaussian_vector(16, 0.0f, 2.0f);
        Tensor gamma({16});
        gamma.data = rng.gaussian_vector(16, 1.0f, 0.1f);
        const Tensor base = ops::rms_norm(x, gamma, 0.0f);
        for (float c : {0.5f, 2.0f, 10.0f}) {
            Tensor xc = x;
            for (auto& v : xc.data) v *= c;
            const Tensor scaled = ops::rms_norm(xc, gamma, 0.0f);
            for (size_t i = 0; i < base.data.size(); ++i) {
                CHECK(std::fabs(scaled.data[i] - base.data[i]) < 1e-6f);
            }
        }
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(ops::rms_norm(Tensor({3}), Tensor({4}), 1e-5f), ShapeError);
    }
}

TEST_CASE("layer_norm zero-means and unit-scales") {
    Tensor x({4}, {1, 2, 3, 4});
    Tensor gamma({4}, {1, 1, 1, 1});
    Tensor beta({4}, {0, 0, 0, 0});
    const Tensor out = ops::layer_norm(x, gamma, beta, 0.0f);
    float mean = 0.0f;
    for (float v : out.data) mean += v;
    CHECK(std::fabs(mean) < 1e-5f);
    float var = 0.0f;
    for (float v : out.data) var += v * v;
    CHECK(var / 4.0f == doctest::Approx(1.0f).epsilon(1e-4));
}

TEST_CASE("activations") {
    CHECK(ops::gelu(0.0f) == 0.0f);
    CHECK(ops::silu(0.0f) == 0.0f);
    CHECK(ops::gelu(3.0f) == doctest::Approx(3.0f).epsilon(1e-2));
    CHECK(ops::gelu(-10.0f) == doctest::Approx(0.0f).epsilon(1e-3));
    CHECK(ops::silu(5.0f) == doctest::Approx(5.0f / (1.0f + std::exp(-5.0f))));
}

TEST_CASE("rotary_apply") {
    SUBCASE("position 0 is the identity") {
        Tensor x({1, 8});
        Rng rng(2);
        x.data = rng.gaussian_vector(8, 0.0f, 1.0f);
        const Tensor out = ops::rotary_apply(x, 10000.0f);
        CHECK(out.data == x.data);
    }
    SUBCASE("rotation preserves pair norms") {
        Tensor x({4, 8});
        Rng rng(3);
        x.data = rng.gaussian_vector(32, 0.0f, 1.0f);
        const Tensor out = ops::rotary_apply(x, 10000.0f);
        for (size_t t = 0; t < 4; ++t) {
            for (size_t i = 0; i < 4; ++i) {
                const float n0 = x.at(t, 2 * i) * x.at(t, 2 * i) +
                                 x.at(t, 2 * i + 1) * x.at(t, 2 * i + 1);
                const float n1 = out.at(t, 2 * i) * out.at(t, 2 * i) +
                                 out.at(t, 2 * i + 1) * out.at(t, 2 * i + 1);
                CHECK(n0 == doctest::Approx(n1).epsilon(1e-4));
            }
        }
    }
}

TEST_CASE("topk and bottomk") {
    const std::vector<float> v = {1, 5, 5, 2};
    SUBCASE("ties break toward the lower index") {
        const auto top = ops::topk(v, 2);
        CHECK(top.indices == std::vector<size_t>{1, 2});
        CHECK(top.values == std::vector<float>{5, 5});
    }
    SUBCASE("bottomk ascends") {
        const auto bot = ops::bottomk(v, 3);
        CHECK(bot.indices == std::vector<size_t>{0, 3, 1});
    }
    SUBCASE("k greater than n errors") {
        CHECK_THROWS_AS(ops::topk(v, 5), ShapeError);
        CHECK_THROWS_AS(ops::bottomk(v, 5), ShapeError);
    }
    SUBCASE("full-length top is the reverse of bottom for distinct values") {
        const std::vector<float> w = {3, -1, 7, 0};
        const auto top = ops::topk(w, 4);
        auto bot = ops::bottomk(w, 4);
        std::reverse(bot.indices.begin(), bot.indices.end());
        CHECK(top.indices == bot.indices);
    }
}

TEST_CASE("kernel determinism across runs") {
    const Tensor a = random_tensor({32, 48}, 21);
    const Tensor b = random_tensor({48, 16}, 22);
    CHECK(ops::matmul(a, b).data == ops::matmul(a, b).data);  // bit-identical

    Tensor s = random_tensor({9, 9}, 23);
    CHECK(ops::masked_softmax_rows(s).data == ops::masked_softmax_rows(s).data);
}

TEST_CASE("non-finite values raise instead of spreading") {
    Tensor a({1, 1}, {std::numeric_limits<float>::infinity()});
    Tensor b({1, 1}, {0.0f});
    CHECK_THROWS_AS(ops::matmul(a, b), NumericError);
}
