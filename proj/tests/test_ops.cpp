// Operation catalog: declared sets and order, parameter accounting, stride
// behavior, seeded reproducibility, and per-operation gradient checks.
#include <doctest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "sdas/gradcheck.hpp"
#include "sdas/op_catalog.hpp"

using namespace sdas;
using T = Tensor<double>;

namespace {

T rand_input(Shape shape, std::uint64_t seed, bool requires_grad = true) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = ud(rng);
    return T::from_data(std::move(shape), std::move(v), requires_grad);
}

std::vector<std::string> ids(OpSetId set, bool video) {
    std::vector<std::string> out;
    for (const auto& s : catalog(set, video)) out.push_back(s.id());
    return out;
}

bool bitwise_equal(const T& a, const T& b) {
    if (a.shape() != b.shape()) return false;
    for (index_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace

TEST_SUITE("ops") {

TEST_CASE("the three sets contain the declared operations in order") {
    CHECK(ids(OpSetId::O2D, false) ==
          std::vector<std::string>{"identity", "avg_pool_3x3", "max_pool_3x3", "sep_conv_3x3",
                                   "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5"});
    CHECK(ids(OpSetId::O3D, true) ==
          std::vector<std::string>{"identity", "max_pool_3x3", "sep_conv_3x3", "sep_conv_5x5",
                                   "dil_conv_3x3", "max_pool_3x3x3", "sep_conv_3d_3x3x3",
                                   "sep_conv_3d_3x5x5", "dil_conv_3d_3x3x3"});
    CHECK(ids(OpSetId::OAdv, true) ==
          std::vector<std::string>{"identity", "max_pool_3x3", "sep_conv_3x3", "sep_conv_5x5",
                                   "max_pool_3x3x3", "sep_conv_3d_3x3x3", "sep_conv_3d_3x5x5",
                                   "channel_scale", "channel_bias"});
    CHECK(catalog(OpSetId::O2D, false).size() == 7);
    CHECK(catalog(OpSetId::O3D, true).size() == 9);
    CHECK(catalog(OpSetId::OAdv, true).size() == 9);
    // The planar set is also usable on clips, frame-wise.
    CHECK(ids(OpSetId::O2D, true) == ids(OpSetId::O2D, false));
    CHECK_THROWS_AS(catalog(OpSetId::O3D, false), ConfigError);
    CHECK_THROWS_AS(catalog(OpSetId::OAdv, false), ConfigError);
}

TEST_CASE("separable 3x3 at four channels costs 120 scalars per application pair") {
    const auto spec = spec_by_id(OpSetId::O2D, false, "sep_conv_3x3");
    CHECK(param_count(spec, Stride{}, 4) == 120);  // 2 * (4*9 + 16 + 8)
}

TEST_CASE("declared parameter counts equal the built instances") {
    struct Combo {
        OpSetId set;
        bool video;
        std::vector<Stride> strides;
    };
    const std::vector<Combo> combos = {
        {OpSetId::O2D, false, {Stride{}, Stride{1, 2, 2}}},
        {OpSetId::O3D, true, {Stride{}, Stride{1, 2, 2}, Stride{2, 2, 2}}},
        {OpSetId::OAdv, true, {Stride{}, Stride{1, 2, 2}, Stride{2, 2, 2}}},
    };
    for (const auto& combo : combos)
        for (const auto& spec : catalog(combo.set, combo.video))
            for (const auto& stride : combo.strides) {
                if (!stride.unit() && !stride_capable(spec)) {
                    CHECK_THROWS_AS(build_operation<double>(spec, stride, 3, 1), ConfigError);
                    continue;
                }
                auto inst = build_operation<double>(spec, stride, 3, 1);
                CHECK(inst.learnable_count() == param_count(spec, stride, 3));
            }
}

TEST_CASE("identical seeds build bit-identical parameters") {
    const auto spec = spec_by_id(OpSetId::O2D, false, "sep_conv_5x5");
    auto a = build_operation<double>(spec, Stride{}, 4, 42);
    auto b = build_operation<double>(spec, Stride{}, 4, 42);
    auto c = build_operation<double>(spec, Stride{}, 4, 43);
    const auto pa = a.params(), pb = b.params(), pc = c.params();
    REQUIRE(pa.size() == pb.size());
    bool all_equal = true, any_diff_seed = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        if (!bitwise_equal(pa[i].tensor, pb[i].tensor)) all_equal = false;
        if (!bitwise_equal(pa[i].tensor, pc[i].tensor)) any_diff_seed = true;
    }
    CHECK(all_equal);
    CHECK(any_diff_seed);
}

TEST_CASE("identity with unit stride is a bit-exact pass-through") {
    auto inst = build_operation<double>(spec_by_id(OpSetId::O2D, false, "identity"), Stride{}, 3, 1);
    T x = rand_input({2, 3, 1, 4, 4}, 5, false);
    T y = inst.forward(x, false);
    CHECK(bitwise_equal(x, y));
    CHECK(inst.learnable_count() == 0);
}

TEST_CASE("strided identity projects through a learned pointwise map") {
    auto inst =
        build_operation<double>(spec_by_id(OpSetId::O2D, false, "identity"), Stride{1, 2, 2}, 3, 1);
    CHECK(inst.learnable_count() == 9);
    T x = rand_input({1, 3, 1, 6, 6}, 5, false);
    T y = inst.forward(x, false);
    CHECK(y.shape() == Shape{1, 3, 1, 3, 3});
}

TEST_CASE("every operation obeys the ceil shape law under stride") {
    for (bool video : {false, true}) {
        const OpSetId set = video ? OpSetId::OAdv : OpSetId::O2D;
        const Shape in = video ? Shape{1, 3, 6, 7, 9} : Shape{1, 3, 1, 7, 9};
        for (const auto& spec : catalog(set, video)) {
            for (const Stride stride : {Stride{}, Stride{1, 2, 2}, Stride{2, 2, 2}}) {
                if (!video && stride.t > 1) continue;
                if (!stride.unit() && !stride_capable(spec)) continue;
                auto inst = build_operation<double>(spec, stride, 3, 7);
                T x = rand_input(in, 9, false);
                T y = inst.forward(x, false);
                CHECK(y.shape() == Shape{in[0], in[1], same_out_extent(in[2], stride.t),
                                         same_out_extent(in[3], stride.h),
                                         same_out_extent(in[4], stride.w)});
            }
        }
    }
}

TEST_CASE("separable-3d with zeroed temporal branch matches the planar separable conv") {
    const auto spec2d = spec_by_id(OpSetId::OAdv, true, "sep_conv_3x3");
    const auto spec3d = spec_by_id(OpSetId::OAdv, true, "sep_conv_3d_3x3x3");
    auto op2d = build_operation<double>(spec2d, Stride{}, 3, 7);
    auto op3d = build_operation<double>(spec3d, Stride{}, 3, 7);
    REQUIRE(op2d.apps.size() == 2);
    REQUIRE(op3d.apps.size() == 2);
    for (std::size_t a = 0; a < 2; ++a) {
        auto copy_into = [](const T& src, T dst) {
            REQUIRE(src.size() == dst.size());
            for (index_t i = 0; i < src.size(); ++i) dst.data_mut()[i] = src.data()[i];
        };
        copy_into(op2d.apps[a].dw_spatial, op3d.apps[a].dw_spatial);
        for (auto& v : op3d.apps[a].dw_temporal.data_mut()) v = 0.0;
        copy_into(op2d.apps[a].pw, op3d.apps[a].pw);
        copy_into(op2d.apps[a].bn.gamma, op3d.apps[a].bn.gamma);
        copy_into(op2d.apps[a].bn.beta, op3d.apps[a].bn.beta);
    }
    T x = rand_input({2, 3, 4, 5, 5}, 13, false);
    T y2 = op2d.forward(x, true);
    T y3 = op3d.forward(x, true);
    CHECK(bitwise_equal(y2, y3));
}

TEST_CASE("channel scale with zero weights halves the input exactly") {
    auto inst =
        build_operation<double>(spec_by_id(OpSetId::OAdv, true, "channel_scale"), Stride{}, 3, 1);
    for (auto& v : inst.chan_w.data_mut()) v = 0.0;  // builder zero-initializes; make it explicit
    T x = rand_input({2, 3, 2, 3, 3}, 21, false);
    T y = inst.forward(x, false);
    for (index_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == 0.5 * x.data()[i]);
}

TEST_CASE("channel bias with zero weights is an exact identity") {
    auto inst =
        build_operation<double>(spec_by_id(OpSetId::OAdv, true, "channel_bias"), Stride{}, 3, 1);
    for (auto& v : inst.chan_w.data_mut()) v = 0.0;
    T x = rand_input({2, 3, 2, 3, 3}, 22, false);
    T y = inst.forward(x, false);
    CHECK(bitwise_equal(x, y));
}

TEST_CASE("channel-wise operations are omitted from stride and reject it") {
    for (const char* id : {"channel_scale", "channel_bias"}) {
        const auto spec = spec_by_id(OpSetId::OAdv, true, id);
        CHECK_FALSE(stride_capable(spec));
        CHECK_THROWS_AS(build_operation<double>(spec, Stride{1, 2, 2}, 3, 1), ConfigError);
    }
}

TEST_CASE("separable-3d convs refuse planar input") {
    auto inst = build_operation<double>(spec_by_id(OpSetId::O3D, true, "sep_conv_3d_3x3x3"),
                                        Stride{}, 3, 1);
    T planar = rand_input({1, 3, 1, 4, 4}, 2, false);
    CHECK_THROWS_AS(inst.forward(planar, false), ShapeError);
    T clip = rand_input({1, 3, 2, 4, 4}, 2, false);
    CHECK_NOTHROW(inst.forward(clip, false));
}

TEST_CASE("pools carry no parameters and dilated convs run one application") {
    for (const char* id : {"avg_pool_3x3", "max_pool_3x3"}) {
        auto inst = build_operation<double>(spec_by_id(OpSetId::O2D, false, id), Stride{}, 3, 1);
        CHECK(inst.learnable_count() == 0);
    }
    auto dil = build_operation<double>(spec_by_id(OpSetId::O2D, false, "dil_conv_3x3"), Stride{}, 3, 1);
    CHECK(dil.apps.size() == 1);
    auto sep = build_operation<double>(spec_by_id(OpSetId::O2D, false, "sep_conv_3x3"), Stride{}, 3, 1);
    CHECK(sep.apps.size() == 2);
}

TEST_CASE("dilated conv reaches cells two steps away") {
    const auto spec = spec_by_id(OpSetId::O2D, false, "dil_conv_3x3");
    auto inst = build_operation<double>(spec, Stride{}, 1, 3);
    // Single-channel impulse: with dilation 2 the depthwise window spans +-2.
    T x = T::zeros({1, 1, 1, 7, 7});
    x.data_mut()[3 * 7 + 3] = 1.0;
    // Bypass BN/relu nonlinearities: probe the depthwise kernel footprint directly.
    T dw = inst.apps[0].dw_spatial;
    T y = conv_depthwise(x, dw, ConvGeom{1, 3, 3, 1, 1, 1, 1, 2, 2});
    // Output at (1,3) sees the impulse through kernel tap (kh=2): offset 2·1 - 2 = ...
    // The footprint of the impulse response must extend to distance 2, not 1.
    bool reaches_two = std::abs(y.data()[1 * 7 + 3]) > 0.0 || std::abs(y.data()[5 * 7 + 3]) > 0.0 ||
                       std::abs(y.data()[3 * 7 + 1]) > 0.0 || std::abs(y.data()[3 * 7 + 5]) > 0.0;
    bool skips_one = y.data()[2 * 7 + 3] == 0.0 && y.data()[4 * 7 + 3] == 0.0 &&
                     y.data()[3 * 7 + 2] == 0.0 && y.data()[3 * 7 + 4] == 0.0;
    CHECK(reaches_two);
    CHECK(skips_one);
}

TEST_CASE("unknown operation ids are rejected with the set name") {
    try {
        spec_by_id(OpSetId::O2D, false, "conv_7x7");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("conv_7x7") != std::string::npos);
        CHECK(msg.find("o2d") != std::string::npos);
    }
}

TEST_CASE("forward under the same parameters is bit-deterministic") {
    const auto spec = spec_by_id(OpSetId::O3D, true, "sep_conv_3d_3x5x5");
    auto inst = build_operation<double>(spec, Stride{1, 2, 2}, 3, 77);
    T x = rand_input({1, 3, 4, 6, 6}, 31, false);
    CHECK(bitwise_equal(inst.forward(x, false), inst.forward(x, false)));
}

TEST_CASE("spot gradient check per operation at small scale") {
    // The exhaustive sweep (all sets, C in {2,4}, 20 seeds) runs in the
    // acceptance gate; here two seeds per operation keep the suite quick.
    for (bool video : {false, true}) {
        const OpSetId set = video ? OpSetId::O3D : OpSetId::O2D;
        for (const auto& spec : catalog(set, video)) {
            for (std::uint64_t seed : {1ull, 2ull}) {
                auto inst = build_operation<double>(spec, Stride{}, 2, seed);
                T x = rand_input(video ? Shape{1, 2, 3, 4, 4} : Shape{1, 2, 1, 4, 4}, seed * 7 + 1);
                if (spec.kind == OpKind::MaxPool) {
                    auto xd = x.data_mut();
                    for (index_t i = 0; i < x.size(); ++i) xd[i] += 0.01 * static_cast<double>(i % 13);
                }
                std::vector<T> inputs{x};
                for (const auto& p : inst.params())
                    if (p.learnable) inputs.push_back(p.tensor);
                if (spec.kind == OpKind::ChannelScale || spec.kind == OpKind::ChannelBias) {
                    std::mt19937_64 rng(seed + 99);
                    std::uniform_real_distribution<double> ud(-0.3, 0.3);
                    for (auto& v : inst.chan_w.data_mut()) v = ud(rng);  // leave the zero saddle
                }
                auto r = grad_check<double>(
                    [&] { return sum(sigmoid(inst.forward(x, true))); }, inputs, 1e-5);
                INFO(spec.id(), " seed ", seed);
                CHECK(r.pass(1e-5));
            }
        }
    }
}

}  // TEST_SUITE
