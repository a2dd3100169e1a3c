// Tensor core: forward oracles for the primitives, finite-difference checks
// for every backward rule, tape semantics, and determinism.
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "sdas/gradcheck.hpp"
#include "sdas/nn.hpp"
#include "sdas/tensor.hpp"

using namespace sdas;
using T = Tensor<double>;

namespace {

T rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
              bool requires_grad = true) {
    std::uniform_real_distribution<double> ud(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = ud(rng);
    return T::from_data(std::move(shape), std::move(v), requires_grad);
}

bool bitwise_equal(const T& a, const T& b) {
    if (a.shape() != b.shape()) return false;
    auto ad = a.data();
    auto bd = b.data();
    for (index_t i = 0; i < a.size(); ++i)
        if (ad[i] != bd[i]) return false;
    return true;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("relu forward and subgradient at zero") {
    T x = T::from_data({1, 1, 1, 1, 3}, {-1.0, 0.0, 2.0}, true);
    Tape<double> tape;
    T y = relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == 2.0);
    tape.backward(sum(y));
    // The kink at exactly zero takes the zero branch.
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[2] == 1.0);
}

TEST_CASE("sigmoid range and midpoint") {
    T x = T::from_data({5}, {-35.0, -1.0, 0.0, 1.0, 35.0}, false);
    T y = sigmoid(x);
    for (index_t i = 0; i < y.size(); ++i) {
        CHECK(y.data()[i] > 0.0);
        CHECK(y.data()[i] < 1.0);
    }
    CHECK(y.data()[2] == 0.5);  // sigmoid(0) is exactly one half
    CHECK(y.data()[0] == doctest::Approx(std::exp(-35.0)).epsilon(1e-12));
}

TEST_CASE("softmax normalizes, stays positive, and survives large logits") {
    std::mt19937_64 rng(7);
    for (int s = 0; s < 20; ++s) {
        T x = rand_tensor({9}, rng, -30.0, 30.0, false);
        T p = softmax_vec(x);
        double total = 0.0;
        for (index_t i = 0; i < p.size(); ++i) {
            CHECK(p.data()[i] > 0.0);
            total += p.data()[i];
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
    }
    T huge = T::from_data({3}, {1000.0, 999.0, -1000.0}, false);
    T p = softmax_vec(huge);
    for (index_t i = 0; i < 3; ++i) CHECK(std::isfinite(p.data()[i]));
    CHECK(p.data()[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
}

TEST_CASE("average pool same-padding oracle on a 3x3 plane of ones") {
    T x = T::filled({1, 1, 1, 3, 3}, 1.0);
    T y = avg_pool(x, ConvGeom{1, 3, 3, 1, 1, 1});
    REQUIRE(y.shape() == Shape{1, 1, 1, 3, 3});
    auto at = [&](index_t r, index_t c) { return y.data()[r * 3 + c]; };
    CHECK(at(1, 1) == doctest::Approx(1.0).epsilon(1e-15));        // full window
    CHECK(at(0, 1) == doctest::Approx(6.0 / 9.0).epsilon(1e-15));  // edge: 3 rows padded
    CHECK(at(0, 0) == doctest::Approx(4.0 / 9.0).epsilon(1e-15));  // corner: 5 cells padded
}

TEST_CASE("max pool routes gradient to the winner only") {
    T x = T::from_data({1, 1, 1, 2, 2}, {1.0, 5.0, 3.0, 2.0}, true);
    Tape<double> tape;
    T y = max_pool(x, ConvGeom{1, 2, 2, 2, 2, 2});
    REQUIRE(y.size() == 1);
    CHECK(y.data()[0] == 5.0);
    tape.backward(sum(y));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 0.0);
    CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("cross entropy matches the log-sum-exp closed form") {
    T logits = T::from_data({2, 3}, {0.0, 0.0, 0.0, 1.0, 2.0, 3.0}, false);
    T loss = cross_entropy_logits(logits, {0, 2});
    const double expected =
        (std::log(3.0) + std::log(1.0 + std::exp(-1.0) + std::exp(-2.0))) / 2.0;
    CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-15));
    CHECK(loss.item() == doctest::Approx(0.75310912655624518).epsilon(1e-14));
}

TEST_CASE("cross entropy is shift invariant and stable for huge logits") {
    T a = T::from_data({1, 3}, {1.0, 2.0, 3.0}, false);
    T b = T::from_data({1, 3}, {1001.0, 1002.0, 1003.0}, false);
    const double la = cross_entropy_logits(a, {1}).item();
    const double lb = cross_entropy_logits(b, {1}).item();
    CHECK(std::isfinite(lb));
    CHECK(la == doctest::Approx(lb).epsilon(1e-12));
}

TEST_CASE("conv and pool obey the same-padding shape law") {
    std::mt19937_64 rng(3);
    for (index_t in : {1, 2, 5, 7, 9}) {
        for (index_t stride : {1, 2, 3}) {
            for (index_t k : {1, 3, 5}) {
                T x = rand_tensor({1, 2, 1, in, in}, rng, -1, 1, false);
                T w = rand_tensor({2, 1, k, k}, rng, -1, 1, false);
                T y = conv_depthwise(x, w, ConvGeom{1, k, k, 1, stride, stride});
                const index_t expect = same_out_extent(in, stride);
                CHECK(y.shape() == Shape{1, 2, 1, expect, expect});
                T p = max_pool(x, ConvGeom{1, 3, 3, 1, stride, stride});
                CHECK(p.shape() == Shape{1, 2, 1, expect, expect});
            }
        }
    }
}

TEST_CASE("pointwise conv equals a per-position matrix product") {
    std::mt19937_64 rng(11);
    T x = rand_tensor({1, 3, 1, 2, 2}, rng, -1, 1, false);
    T w = rand_tensor({2, 3}, rng, -1, 1, false);
    T y = conv_pointwise(x, w, ConvGeom{});
    for (index_t p = 0; p < 4; ++p)
        for (index_t co = 0; co < 2; ++co) {
            double acc = 0.0;
            for (index_t ci = 0; ci < 3; ++ci) acc += w.data()[co * 3 + ci] * x.data()[ci * 4 + p];
            CHECK(y.data()[co * 4 + p] == doctest::Approx(acc).epsilon(1e-14));
        }
}

TEST_CASE("batch norm training mode standardizes each channel") {
    std::mt19937_64 rng(5);
    T x = rand_tensor({4, 3, 1, 5, 5}, rng, -2.0, 3.0, false);
    T gamma = T::filled({3}, 1.0);
    T beta = T::zeros({3});
    T rm = T::zeros({3});
    T rv = T::filled({3}, 1.0);
    T y = batch_norm(x, gamma, beta, rm, rv, /*training=*/true);
    const index_t P = 25, N = 4;
    for (index_t c = 0; c < 3; ++c) {
        double mu = 0.0, var = 0.0;
        for (index_t n = 0; n < N; ++n)
            for (index_t i = 0; i < P; ++i) mu += y.data()[(n * 3 + c) * P + i];
        mu /= static_cast<double>(N * P);
        for (index_t n = 0; n < N; ++n)
            for (index_t i = 0; i < P; ++i) {
                const double d = y.data()[(n * 3 + c) * P + i] - mu;
                var += d * d;
            }
        var /= static_cast<double>(N * P);
        CHECK(std::abs(mu) <= 1e-10);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps in the denominator biases slightly
    }
    // Running buffers folded with momentum 0.1 from their (0, 1) init.
    double batch_mu = 0.0;
    for (index_t n = 0; n < N; ++n)
        for (index_t i = 0; i < P; ++i) batch_mu += x.data()[(n * 3 + 0) * P + i];
    batch_mu /= static_cast<double>(N * P);
    CHECK(rm.data()[0] == doctest::Approx(0.1 * batch_mu).epsilon(1e-12));
}

TEST_CASE("batch norm eval mode uses the running buffers") {
    T x = T::from_data({1, 1, 1, 1, 2}, {3.0, 5.0}, false);
    T gamma = T::filled({1}, 2.0);
    T beta = T::filled({1}, 0.25);
    T rm = T::filled({1}, 1.0);
    T rv = T::filled({1}, 4.0);
    T y = batch_norm(x, gamma, beta, rm, rv, /*training=*/false);
    const double is = 1.0 / std::sqrt(4.0 + 1e-5);
    CHECK(y.data()[0] == doctest::Approx(2.0 * (3.0 - 1.0) * is + 0.25).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(2.0 * (5.0 - 1.0) * is + 0.25).epsilon(1e-12));
    // Eval mode must not move the buffers.
    CHECK(rm.data()[0] == 1.0);
    CHECK(rv.data()[0] == 4.0);
}

TEST_CASE("global average pool and channel broadcast oracles") {
    T x = T::from_data({1, 2, 1, 1, 2}, {1.0, 3.0, 10.0, 30.0}, false);
    T g = global_avg_pool(x);
    REQUIRE(g.shape() == Shape{1, 2});
    CHECK(g.data()[0] == doctest::Approx(2.0));
    CHECK(g.data()[1] == doctest::Approx(20.0));
    T w = T::from_data({1, 2}, {2.0, -1.0}, false);
    T m = channel_mul(x, w);
    CHECK(m.data()[0] == 2.0);
    CHECK(m.data()[3] == -30.0);
    T a = channel_add(x, w);
    CHECK(a.data()[1] == 5.0);
    CHECK(a.data()[2] == 9.0);
}

TEST_CASE("concat stacks along the channel axis in argument order") {
    T a = T::from_data({1, 1, 1, 1, 2}, {1.0, 2.0}, false);
    T b = T::from_data({1, 2, 1, 1, 2}, {3.0, 4.0, 5.0, 6.0}, false);
    T c = concat_channels(std::vector<T>{a, b});
    REQUIRE(c.shape() == Shape{1, 3, 1, 1, 2});
    CHECK(c.data()[0] == 1.0);
    CHECK(c.data()[2] == 3.0);
    CHECK(c.data()[5] == 6.0);
}

TEST_CASE("weighted sum matches a hand-computed combination") {
    T a = T::from_data({2}, {1.0, 2.0}, false);
    T b = T::from_data({2}, {10.0, 20.0}, false);
    T w = T::from_data({2}, {0.25, 0.5}, false);
    T y = weighted_sum({a, b}, w);
    CHECK(y.data()[0] == doctest::Approx(5.25));
    CHECK(y.data()[1] == doctest::Approx(10.5));
}

TEST_CASE("gradient accumulates when a tensor is reused") {
    T x = T::from_data({3}, {1.0, -2.0, 3.0}, true);
    Tape<double> tape;
    T y = add(x, x);
    tape.backward(sum(y));
    for (index_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0);
}

TEST_CASE("backward rejects non-scalar losses") {
    T x = T::from_data({2}, {1.0, 2.0}, true);
    Tape<double> tape;
    T y = add(x, x);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("pause suspends tracing") {
    T x = T::from_data({2}, {1.0, 2.0}, true);
    Tape<double> tape;
    {
        Tape<double>::Pause pause;
        T y = relu(x);
        CHECK_FALSE(y.on_path());
    }
    CHECK(tape.size() == 0);
    T y = relu(x);
    CHECK(y.on_path());
    CHECK(tape.size() == 1);
}

TEST_CASE("mismatched shapes raise errors that name the offending axes") {
    T a = T::zeros({2, 3});
    T b = T::zeros({3, 2});
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(T::from_data({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
    T x = T::zeros({1, 2, 3});  // conv primitives require rank 5
    CHECK_THROWS_AS(max_pool(x, ConvGeom{}), ShapeError);
    try {
        linear(T::zeros({2, 3}), T::zeros({4, 5}));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("3") != std::string::npos);
        CHECK(std::string(e.what()).find("5") != std::string::npos);
    }
}

TEST_CASE("every primitive backward agrees with central differences") {
    std::mt19937_64 rng(2024);
    const double tol = 1e-6;
    for (int s = 0; s < 20; ++s) {
        // relu: keep probes away from the kink.
        {
            T x = rand_tensor({1, 2, 1, 3, 3}, rng);
            for (auto& v : x.data_mut())
                if (std::abs(v) < 1e-3) v += 0.1;
            auto r = grad_check<double>([&] { return sum(relu(x)); }, {x});
            CHECK(r.pass(tol));
        }
        {
            T x = rand_tensor({7}, rng);
            auto r = grad_check<double>([&] { return sum(sigmoid(x)); }, {x});
            CHECK(r.pass(tol));
        }
        {
            T a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng);
            auto r = grad_check<double>([&] { return sum(add(a, b)); }, {a, b});
            CHECK(r.pass(tol));
        }
        {
            T x = rand_tensor({2, 3}, rng);
            T w = rand_tensor({1}, rng);
            auto r = grad_check<double>([&] { return sum(scale(x, w)); }, {x, w});
            CHECK(r.pass(tol));
        }
        {
            T a = rand_tensor({4}, rng), b = rand_tensor({4}, rng), c = rand_tensor({4}, rng);
            T w = rand_tensor({3}, rng);
            auto r = grad_check<double>([&] { return sum(weighted_sum({a, b, c}, w)); }, {a, b, c, w});
            CHECK(r.pass(tol));
        }
        {
            T x = rand_tensor({3, 4}, rng, -2.0, 2.0);
            auto r = grad_check<double>([&] { return cross_entropy_logits(x, {0, 3, 1}); }, {x});
            CHECK(r.pass(tol));
        }
        {
            T x = rand_tensor({2, 3}, rng);
            T w = rand_tensor({4, 3}, rng);
            T b = rand_tensor({4}, rng);
            auto r = grad_check<double>(
                [&] { return cross_entropy_logits(linear(x, w, b), {1, 2}); }, {x, w, b});
            CHECK(r.pass(tol));
        }
        {
            T x = rand_tensor({2, 3, 1, 4, 4}, rng);
            auto r = grad_check<double>(
                [&] { return cross_entropy_logits(global_avg_pool(x), {0, 2}); }, {x});
            CHECK(r.pass(tol));
        }
        {
            T x = rand_tensor({1, 2, 1, 4, 4}, rng);
            T w = rand_tensor({2, 1, 3, 3}, rng);
            auto r = grad_check<double>(
                [&] { return sum(conv_depthwise(x, w, ConvGeom{1, 3, 3, 1, 2, 2})); }, {x, w});
            CHECK(r.pass(tol));
        }
        {
            T x = rand_tensor({1, 3, 1, 3, 3}, rng);
            T w = rand_tensor({2, 3}, rng);
            auto r = grad_check<double>([&] { return sum(conv_pointwise(x, w, ConvGeom{})); }, {x, w});
            CHECK(r.pass(tol));
        }
        {
            T x = rand_tensor({1, 2, 1, 5, 5}, rng);
            // Shift values apart so finite differences never cross a max-pool tie.
            auto xd = x.data_mut();
            for (index_t i = 0; i < x.size(); ++i) xd[i] += 0.01 * static_cast<double>(i % 17);
            auto r = grad_check<double>(
                [&] { return sum(max_pool(x, ConvGeom{1, 3, 3, 1, 2, 2})); }, {x});
            CHECK(r.pass(tol));
        }
        {
            T x = rand_tensor({1, 2, 1, 5, 5}, rng);
            auto r = grad_check<double>(
                [&] { return sum(avg_pool(x, ConvGeom{1, 3, 3, 1, 2, 2})); }, {x});
            CHECK(r.pass(tol));
        }
        {
            T x = rand_tensor({3, 2, 1, 3, 3}, rng);
            T gamma = rand_tensor({2}, rng, 0.5, 1.5);
            T beta = rand_tensor({2}, rng);
            // Plain sum of a batch-normalized tensor is constant in x, so
            // weight per (item, channel) with a fixed probe to keep the check
            // sensitive to the normalization internals.
            T probe = rand_tensor({3, 2}, rng, 0.5, 2.0, false);
            auto check_bn = [&](bool training) {
                T rm = T::zeros({2});
                T rv = T::filled({2}, 1.0);
                return grad_check<double>(
                    [&] {
                        // Reset buffers so repeated probe evaluations see identical state.
                        std::fill(rm.data_mut().begin(), rm.data_mut().end(), 0.0);
                        std::fill(rv.data_mut().begin(), rv.data_mut().end(), 1.0);
                        return sum(channel_mul(batch_norm(x, gamma, beta, rm, rv, training), probe));
                    },
                    {x, gamma, beta});
            };
            CHECK(check_bn(true).pass(tol));
            CHECK(check_bn(false).pass(tol));
        }
        {
            T x = rand_tensor({2, 3, 1, 2, 2}, rng);
            T w = rand_tensor({3, 3}, rng);
            auto r = grad_check<double>(
                [&] { return sum(channel_mul(x, sigmoid(linear(global_avg_pool(x), w)))); }, {x, w});
            CHECK(r.pass(tol));
        }
        {
            T a = rand_tensor({1, 2, 1, 2, 2}, rng);
            T b = rand_tensor({1, 3, 1, 2, 2}, rng);
            auto r = grad_check<double>(
                [&] { return sum(sigmoid(concat_channels(std::vector<T>{a, b}))); }, {a, b});
            CHECK(r.pass(tol));
        }
    }
}

TEST_CASE("softmax jacobian transposed against a random probe") {
    // weighted_sum(xs, softmax(a)) is how mixed edges consume the softmax, so
    // check J^T v for random v: seed the output gradient manually, then close
    // the tape with a scalar that contributes nothing.
    std::mt19937_64 rng(77);
    for (int s = 0; s < 20; ++s) {
        T x = rand_tensor({6}, rng, -2.0, 2.0);
        T probe = rand_tensor({6}, rng, -1.0, 1.0, false);
        std::vector<double> analytic(6, 0.0);
        {
            Tape<double> tape;
            T p = softmax_vec(x);
            auto pg = p.grad_mut();
            for (index_t i = 0; i < 6; ++i) pg[i] = probe.data()[i];
            T dummy = sum(scale(p, T::zeros({1})));  // zero contribution, keeps backward legal
            tape.backward(dummy);
            for (index_t i = 0; i < 6; ++i) analytic[static_cast<std::size_t>(i)] = x.grad()[i];
        }
        const double h = 1e-6;
        for (index_t i = 0; i < 6; ++i) {
            auto xd = x.data_mut();
            const double saved = xd[i];
            xd[i] = saved + h;
            T pp = softmax_vec(x);
            xd[i] = saved - h;
            T pm = softmax_vec(x);
            xd[i] = saved;
            double numeric = 0.0;
            for (index_t j = 0; j < 6; ++j)
                numeric += probe.data()[j] * (pp.data()[j] - pm.data()[j]) / (2 * h);
            CHECK(std::abs(analytic[static_cast<std::size_t>(i)] - numeric) <= 1e-6);
        }
    }
}

TEST_CASE("forward passes are bit-deterministic") {
    auto run = [] {
        std::mt19937_64 rng(99);
        T x = rand_tensor({2, 3, 1, 6, 6}, rng, -1, 1, false);
        T w = rand_tensor({3, 1, 3, 3}, rng, -1, 1, false);
        T pw = rand_tensor({4, 3}, rng, -1, 1, false);
        T y = conv_pointwise(conv_depthwise(x, w, ConvGeom{1, 3, 3, 1, 2, 2}), pw);
        return y;
    };
    CHECK(bitwise_equal(run(), run()));
}

}  // TEST_SUITE
