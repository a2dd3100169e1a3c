// Candidate-operation catalog: the three declared operation sets and builders
// that materialize each entry as a parameterized composite of nn.hpp
// primitives.
//
// Conventions
//   - Convolutional composites use ReLU -> conv -> BN ordering.
//   - Separable convs run the (depthwise -> pointwise) pair twice, with any
//     stride in the first application only; dilated variants (dilation 2) run
//     once.
//   - Separable-3d convs replace the depthwise stage by parallel spatial
//     (1 x ks x ks) and temporal (kt x 1 x 1) depthwise convs, summed; both
//     branches carry the application's full stride.
//   - Pools are bare; identity is a pass-through, or a bare strided 1x1(x1)
//     projection when the edge carries stride.
//   - Channel-wise scale/bias: global average pool -> zero-initialized C->C
//     linear -> (sigmoid ->) broadcast multiply/add; stride is rejected since
//     these cannot change resolution.
#pragma once

#include <random>
#include <string>
#include <vector>

#include "sdas/common.hpp"
#include "sdas/nn.hpp"
#include "sdas/tensor.hpp"

namespace sdas {

enum class OpSetId { O2D, O3D, OAdv };

inline std::string opset_name(OpSetId s) {
    switch (s) {
        case OpSetId::O2D: return "o2d";
        case OpSetId::O3D: return "o3d";
        case OpSetId::OAdv: return "oadv";
    }
    throw ConfigError("unknown op set");
}

inline OpSetId parse_opset(const std::string& s) {
    if (s == "o2d") return OpSetId::O2D;
    if (s == "o3d") return OpSetId::O3D;
    if (s == "oadv") return OpSetId::OAdv;
    throw ConfigError("unknown op set '" + s + "' (expected o2d, o3d, or oadv)");
}

enum class OpKind { Identity, MaxPool, AvgPool, SepConv, SepConv3d, ChannelScale, ChannelBias };

// Per-axis stride an edge imposes on its operations.
struct Stride {
    index_t t = 1, h = 1, w = 1;
    bool unit() const { return t == 1 && h == 1 && w == 1; }
    bool operator==(const Stride&) const = default;
};

struct OperationSpec {
    OpKind kind = OpKind::Identity;
    index_t ks = 1;        // spatial window
    index_t kt = 1;        // temporal window (1 = frame-wise)
    index_t dilation = 1;  // 1 or 2
    bool video = false;    // built for clips (temporal axis meaningful)

    // Stable snake_case identifier used in genotype files.
    std::string id() const {
        auto sxs = [&] { return std::to_string(ks) + "x" + std::to_string(ks); };
        auto sxsxs = [&] { return std::to_string(kt) + "x" + std::to_string(ks) + "x" + std::to_string(ks); };
        switch (kind) {
            case OpKind::Identity: return "identity";
            case OpKind::MaxPool: return kt > 1 ? "max_pool_" + sxsxs() : "max_pool_" + sxs();
            case OpKind::AvgPool: return kt > 1 ? "avg_pool_" + sxsxs() : "avg_pool_" + sxs();
            case OpKind::SepConv:
                return (dilation > 1 ? "dil_conv_" : "sep_conv_") + sxs();
            case OpKind::SepConv3d:
                return (dilation > 1 ? "dil_conv_3d_" : "sep_conv_3d_") + sxsxs();
            case OpKind::ChannelScale: return "channel_scale";
            case OpKind::ChannelBias: return "channel_bias";
        }
        throw ConfigError("unknown op kind");
    }

    // Number of (dw -> pw -> BN) applications for conv composites.
    index_t applications() const { return dilation > 1 ? 1 : 2; }

    bool operator==(const OperationSpec&) const = default;
};

// The declared operation lists, in their published order.
inline std::vector<OperationSpec> catalog(OpSetId set, bool video) {
    auto sep = [&](index_t ks, index_t d) {
        return OperationSpec{OpKind::SepConv, ks, 1, d, video};
    };
    auto sep3d = [&](index_t ks, index_t d) {
        return OperationSpec{OpKind::SepConv3d, ks, 3, d, true};
    };
    switch (set) {
        case OpSetId::O2D:
            return {
                OperationSpec{OpKind::Identity, 1, 1, 1, video},
                OperationSpec{OpKind::AvgPool, 3, 1, 1, video},
                OperationSpec{OpKind::MaxPool, 3, 1, 1, video},
                sep(3, 1),
                sep(5, 1),
                sep(3, 2),
                sep(5, 2),
            };
        case OpSetId::O3D:
            if (!video) throw ConfigError("op set o3d requires video mode");
            return {
                OperationSpec{OpKind::Identity, 1, 1, 1, true},
                OperationSpec{OpKind::MaxPool, 3, 1, 1, true},
                sep(3, 1),
                sep(5, 1),
                sep(3, 2),
                OperationSpec{OpKind::MaxPool, 3, 3, 1, true},
                sep3d(3, 1),
                sep3d(5, 1),
                sep3d(3, 2),
            };
        case OpSetId::OAdv:
            if (!video) throw ConfigError("op set oadv requires video mode");
            return {
                OperationSpec{OpKind::Identity, 1, 1, 1, true},
                OperationSpec{OpKind::MaxPool, 3, 1, 1, true},
                sep(3, 1),
                sep(5, 1),
                OperationSpec{OpKind::MaxPool, 3, 3, 1, true},
                sep3d(3, 1),
                sep3d(5, 1),
                OperationSpec{OpKind::ChannelScale, 1, 1, 1, true},
                OperationSpec{OpKind::ChannelBias, 1, 1, 1, true},
            };
    }
    throw ConfigError("unknown op set");
}

inline OperationSpec spec_by_id(OpSetId set, bool video, const std::string& id) {
    for (const auto& s : catalog(set, video))
        if (s.id() == id) return s;
    throw ConfigError("operation '" + id + "' is not in set " + opset_name(set));
}

// Whether this operation can realize a non-unit stride (channel-wise ops are
// shape-preserving and are simply omitted from stride-carrying edges).
inline bool stride_capable(const OperationSpec& s) {
    return s.kind != OpKind::ChannelScale && s.kind != OpKind::ChannelBias;
}

// Learnable-scalar count, derivable from (spec, stride, C) alone.
inline index_t param_count(const OperationSpec& spec, const Stride& stride, index_t C) {
    switch (spec.kind) {
        case OpKind::Identity: return stride.unit() ? 0 : C * C;
        case OpKind::MaxPool:
        case OpKind::AvgPool: return 0;
        case OpKind::SepConv:
            return spec.applications() * (C * spec.ks * spec.ks + C * C + 2 * C);
        case OpKind::SepConv3d:
            return spec.applications() * (C * spec.ks * spec.ks + C * spec.kt + C * C + 2 * C);
        case OpKind::ChannelScale:
        case OpKind::ChannelBias: return C * C;
    }
    throw ConfigError("unknown op kind");
}

// ---------------------------------------------------------------------------
// Instances
// ---------------------------------------------------------------------------

template <typename S>
struct BatchNormState {
    Tensor<S> gamma, beta, running_mean, running_var;

    static BatchNormState make(index_t C) {
        return {Tensor<S>::filled({C}, S(1), true), Tensor<S>::zeros({C}, true),
                Tensor<S>::zeros({C}), Tensor<S>::filled({C}, S(1))};
    }
};

// One (ReLU -> depthwise -> pointwise -> BN) application of a separable conv;
// separable-3d applications carry both depthwise branches.
template <typename S>
struct SepApplication {
    Tensor<S> dw_spatial;   // (C, 1, ks, ks)
    Tensor<S> dw_temporal;  // (C, kt, 1, 1); undefined for 2-D composites
    Tensor<S> pw;           // (C, C)
    BatchNormState<S> bn;
    Stride stride;          // full stride on the first application only
};

// Reference to one named parameter of an instance. `learnable` distinguishes
// trainable tensors from tracked state (BN running statistics).
template <typename S>
struct ParamRef {
    std::string name;
    Tensor<S> tensor;
    bool learnable;
};

template <typename S>
class OperationInstance {
  public:
    OperationSpec spec;
    Stride stride;
    index_t channels = 0;

    std::vector<SepApplication<S>> apps;  // conv composites
    Tensor<S> proj;                       // strided identity projection (C, C)
    Tensor<S> chan_w;                     // channel-wise linear (C, C)

    Tensor<S> forward(const Tensor<S>& x, bool training) const {
        switch (spec.kind) {
            case OpKind::Identity:
                if (stride.unit()) return x;
                return conv_pointwise(x, proj, ConvGeom{1, 1, 1, stride.t, stride.h, stride.w});
            case OpKind::MaxPool:
                return max_pool(x, pool_geom());
            case OpKind::AvgPool:
                return avg_pool(x, pool_geom());
            case OpKind::SepConv:
                return sep_forward(x, training);
            case OpKind::SepConv3d:
                if (x.dim() == 5 && x.shape()[2] == 1)
                    throw ShapeError("separable-3d conv: temporal axis required, got planar input " +
                                     shape_str(x.shape()));
                return sep_forward(x, training);
            case OpKind::ChannelScale: {
                Tensor<S> w = linear(global_avg_pool(x), chan_w);
                return channel_mul(x, sigmoid(w));
            }
            case OpKind::ChannelBias: {
                Tensor<S> w = linear(global_avg_pool(x), chan_w);
                return channel_add(x, w);
            }
        }
        throw ConfigError("unknown op kind");
    }

    // Deterministic parameter enumeration (checkpoint and optimizer order).
    std::vector<ParamRef<S>> params() const {
        std::vector<ParamRef<S>> out;
        for (std::size_t a = 0; a < apps.size(); ++a) {
            const std::string p = "app" + std::to_string(a) + ".";
            const auto& app = apps[a];
            if (app.dw_spatial.defined()) out.push_back({p + "dw_s", app.dw_spatial, true});
            if (app.dw_temporal.defined()) out.push_back({p + "dw_t", app.dw_temporal, true});
            out.push_back({p + "pw", app.pw, true});
            out.push_back({p + "bn.gamma", app.bn.gamma, true});
            out.push_back({p + "bn.beta", app.bn.beta, true});
            out.push_back({p + "bn.rmean", app.bn.running_mean, false});
            out.push_back({p + "bn.rvar", app.bn.running_var, false});
        }
        if (proj.defined()) out.push_back({"proj", proj, true});
        if (chan_w.defined()) out.push_back({"linear", chan_w, true});
        return out;
    }

    index_t learnable_count() const {
        index_t n = 0;
        for (const auto& p : params())
            if (p.learnable) n += p.tensor.size();
        return n;
    }

  private:
    ConvGeom pool_geom() const {
        return ConvGeom{spec.kt, spec.ks, spec.ks, stride.t, stride.h, stride.w};
    }

    Tensor<S> sep_forward(const Tensor<S>& x, bool training) const {
        Tensor<S> h = x;
        for (const auto& app : apps) {
            h = relu(h);
            const index_t d = spec.dilation;
            if (spec.kind == OpKind::SepConv) {
                // Frame-wise window 1 x ks x ks; temporal stride still applies.
                ConvGeom g{1, spec.ks, spec.ks, app.stride.t, app.stride.h, app.stride.w, 1, d, d};
                h = conv_depthwise(h, app.dw_spatial, g);
            } else {
                ConvGeom gs{1, spec.ks, spec.ks, app.stride.t, app.stride.h, app.stride.w, 1, d, d};
                ConvGeom gt{spec.kt, 1, 1, app.stride.t, app.stride.h, app.stride.w, d, 1, 1};
                h = add(conv_depthwise(h, app.dw_spatial, gs), conv_depthwise(h, app.dw_temporal, gt));
            }
            h = conv_pointwise(h, app.pw);
            h = batch_norm(h, app.bn.gamma, app.bn.beta, app.bn.running_mean, app.bn.running_var,
                           training);
        }
        return h;
    }
};

namespace detail {

// Fan-in-scaled zero-mean normal (He scaling for the ReLU composites).
template <typename S>
void init_normal(Tensor<S>& t, index_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : t.data_mut()) v = static_cast<S>(nd(rng));
}

}  // namespace detail

// Materialize one catalog entry at the given channel count. Identical seeds
// give bit-identical parameters.
template <typename S>
OperationInstance<S> build_operation(const OperationSpec& spec, const Stride& stride, index_t channels,
                                     std::uint64_t seed) {
    if (channels < 1) throw ConfigError("build_operation: channels must be >= 1");
    if (!stride.unit() && !stride_capable(spec))
        throw ConfigError("build_operation: " + spec.id() + " cannot carry stride");
    if (spec.kind == OpKind::SepConv3d && !spec.video)
        throw ConfigError("build_operation: separable-3d conv requires video mode");

    OperationInstance<S> inst;
    inst.spec = spec;
    inst.stride = stride;
    inst.channels = channels;
    std::mt19937_64 rng(seed);

    const index_t C = channels;
    switch (spec.kind) {
        case OpKind::Identity:
            if (!stride.unit()) {
                inst.proj = Tensor<S>::zeros({C, C}, true);
                detail::init_normal(inst.proj, C, rng);
            }
            break;
        case OpKind::MaxPool:
        case OpKind::AvgPool:
            break;
        case OpKind::SepConv:
        case OpKind::SepConv3d:
            for (index_t a = 0; a < spec.applications(); ++a) {
                SepApplication<S> app;
                app.stride = a == 0 ? stride : Stride{};
                app.dw_spatial = Tensor<S>::zeros({C, 1, spec.ks, spec.ks}, true);
                detail::init_normal(app.dw_spatial, spec.ks * spec.ks, rng);
                if (spec.kind == OpKind::SepConv3d) {
                    app.dw_temporal = Tensor<S>::zeros({C, spec.kt, 1, 1}, true);
                    detail::init_normal(app.dw_temporal, spec.kt, rng);
                }
                app.pw = Tensor<S>::zeros({C, C}, true);
                detail::init_normal(app.pw, C, rng);
                app.bn = BatchNormState<S>::make(C);
                inst.apps.push_back(std::move(app));
            }
            break;
        case OpKind::ChannelScale:
        case OpKind::ChannelBias:
            // Zero start: scale acts as 0.5*x (sigmoid(0)), bias as identity.
            inst.chan_w = Tensor<S>::zeros({C, C}, true);
            break;
    }
    return inst;
}

}  // namespace sdas
