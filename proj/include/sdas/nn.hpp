// Convolution, pooling, and batch-norm primitives with autodiff closures.
//
// Feature maps use a single dense layout (N, C, T, H, W); planar 2-D data is
// the T == 1 special case, which makes every operation below serve both the
// image and the video path. All windowed primitives use the "same" padding
// rule: out = ceil(in / stride) per axis, padding split with the smaller half
// first. Scan order over windows is (t, h, w) ascending everywhere, which
// pins down tie-breaking (max pool takes the first maximal element) and keeps
// accumulation order reproducible.
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>

#include "sdas/common.hpp"
#include "sdas/tensor.hpp"

namespace sdas {

// Window geometry for one application of a conv/pool primitive.
struct ConvGeom {
    index_t kt = 1, kh = 1, kw = 1;  // window extents
    index_t st = 1, sh = 1, sw = 1;  // strides
    index_t dt = 1, dh = 1, dw = 1;  // dilations

    void validate() const {
        for (index_t v : {kt, kh, kw, st, sh, sw, dt, dh, dw})
            if (v < 1) throw ShapeError("conv: window/stride/dilation values must be positive");
    }
};

namespace detail {

struct AxisPad {
    index_t out;
    index_t pad_begin;
};

inline AxisPad same_axis(index_t in, index_t k, index_t s, index_t d) {
    const index_t out = same_out_extent(in, s);
    const index_t eff_k = (k - 1) * d + 1;
    const index_t pad_total = std::max<index_t>((out - 1) * s + eff_k - in, 0);
    return {out, pad_total / 2};
}

template <typename S>
void require_5d(const char* prim, const Tensor<S>& x) {
    if (x.dim() != 5)
        throw ShapeError(std::string(prim) + ": expected (batch, channels, t, h, w) input, got " +
                         shape_str(x.shape()));
}

}  // namespace detail

// Output shape of any same-padded windowed primitive.
template <typename S>
Shape conv_out_shape(const Tensor<S>& x, index_t out_channels, const ConvGeom& g) {
    detail::require_5d("conv", x);
    return {x.shape()[0], out_channels, same_out_extent(x.shape()[2], g.st),
            same_out_extent(x.shape()[3], g.sh), same_out_extent(x.shape()[4], g.sw)};
}

// ---------------------------------------------------------------------------
// Depthwise convolution: w has shape (C, kt, kh, kw), one filter per channel.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> conv_depthwise(const Tensor<S>& x, const Tensor<S>& w, const ConvGeom& g) {
    detail::require_5d("depthwise-conv", x);
    g.validate();
    const index_t N = x.shape()[0], C = x.shape()[1], T = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    if (w.dim() != 4 || w.shape()[0] != C || w.shape()[1] != g.kt || w.shape()[2] != g.kh ||
        w.shape()[3] != g.kw)
        throw ShapeError("depthwise-conv: weight " + shape_str(w.shape()) + " != (" + std::to_string(C) +
                         ", " + std::to_string(g.kt) + ", " + std::to_string(g.kh) + ", " +
                         std::to_string(g.kw) + ")");
    const auto [OT, pt] = detail::same_axis(T, g.kt, g.st, g.dt);
    const auto [OH, ph] = detail::same_axis(H, g.kh, g.sh, g.dh);
    const auto [OW, pw] = detail::same_axis(W, g.kw, g.sw, g.dw);

    Tensor<S> out = Tensor<S>::zeros({N, C, OT, OH, OW});
    {
        auto xd = x.data();
        auto wd = w.data();
        auto od = out.data_mut();
        const index_t kvol = g.kt * g.kh * g.kw;
        for (index_t n = 0; n < N; ++n)
            for (index_t c = 0; c < C; ++c) {
                const S* xb = xd.data() + (n * C + c) * T * H * W;
                const S* wb = wd.data() + c * kvol;
                S* ob = od.data() + (n * C + c) * OT * OH * OW;
                for (index_t ot = 0; ot < OT; ++ot)
                    for (index_t oh = 0; oh < OH; ++oh)
                        for (index_t ow = 0; ow < OW; ++ow) {
                            S acc = S(0);
                            for (index_t kt = 0; kt < g.kt; ++kt) {
                                const index_t it = ot * g.st - pt + kt * g.dt;
                                if (it < 0 || it >= T) continue;
                                for (index_t kh = 0; kh < g.kh; ++kh) {
                                    const index_t ih = oh * g.sh - ph + kh * g.dh;
                                    if (ih < 0 || ih >= H) continue;
                                    for (index_t kw = 0; kw < g.kw; ++kw) {
                                        const index_t iw = ow * g.sw - pw + kw * g.dw;
                                        if (iw < 0 || iw >= W) continue;
                                        acc += xb[(it * H + ih) * W + iw] * wb[(kt * g.kh + kh) * g.kw + kw];
                                    }
                                }
                            }
                            ob[(ot * OH + oh) * OW + ow] = acc;
                        }
            }
    }
    if (detail::tracing<S>({&x, &w})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, w, out, g, N, C, T, H, W, OT, OH, OW, pt, ph, pw]() mutable {
            if (!detail::has_grad(out)) return;
            auto og = out.grad();
            auto xd = x.data();
            auto wd = w.data();
            const bool need_x = x.on_path();
            const bool need_w = w.on_path();
            auto xg = need_x ? x.grad_mut() : std::span<S>();
            auto wg = need_w ? w.grad_mut() : std::span<S>();
            const index_t kvol = g.kt * g.kh * g.kw;
            for (index_t n = 0; n < N; ++n)
                for (index_t c = 0; c < C; ++c) {
                    const S* gb = og.data() + (n * C + c) * OT * OH * OW;
                    const S* xb = xd.data() + (n * C + c) * T * H * W;
                    const S* wb = wd.data() + c * kvol;
                    S* xgb = need_x ? xg.data() + (n * C + c) * T * H * W : nullptr;
                    S* wgb = need_w ? wg.data() + c * kvol : nullptr;
                    for (index_t ot = 0; ot < OT; ++ot)
                        for (index_t oh = 0; oh < OH; ++oh)
                            for (index_t ow = 0; ow < OW; ++ow) {
                                const S gv = gb[(ot * OH + oh) * OW + ow];
                                if (gv == S(0)) continue;
                                for (index_t kt = 0; kt < g.kt; ++kt) {
                                    const index_t it = ot * g.st - pt + kt * g.dt;
                                    if (it < 0 || it >= T) continue;
                                    for (index_t kh = 0; kh < g.kh; ++kh) {
                                        const index_t ih = oh * g.sh - ph + kh * g.dh;
                                        if (ih < 0 || ih >= H) continue;
                                        for (index_t kw = 0; kw < g.kw; ++kw) {
                                            const index_t iw = ow * g.sw - pw + kw * g.dw;
                                            if (iw < 0 || iw >= W) continue;
                                            const index_t xi = (it * H + ih) * W + iw;
                                            const index_t wi = (kt * g.kh + kh) * g.kw + kw;
                                            if (need_x) xgb[xi] += gv * wb[wi];
                                            if (need_w) wgb[wi] += gv * xb[xi];
                                        }
                                    }
                                }
                            }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pointwise (1x1x1) convolution: w has shape (Cout, Cin); optional stride
// subsamples positions (a 1-wide window never needs padding).
// ---------------------------------------------------------------------------

namespace detail {

// Gather x[n] positions hit by the stride into a (C, OT*OH*OW) matrix.
template <typename S>
void gather_strided(const S* xb, S* colb, index_t C, index_t T, index_t H, index_t W, index_t OT,
                    index_t OH, index_t OW, const ConvGeom& g) {
    for (index_t c = 0; c < C; ++c) {
        const S* src = xb + c * T * H * W;
        S* dst = colb + c * OT * OH * OW;
        for (index_t ot = 0; ot < OT; ++ot)
            for (index_t oh = 0; oh < OH; ++oh)
                for (index_t ow = 0; ow < OW; ++ow)
                    dst[(ot * OH + oh) * OW + ow] = src[(ot * g.st * H + oh * g.sh) * W + ow * g.sw];
    }
}

template <typename S>
void scatter_strided_add(const S* colb, S* xb, index_t C, index_t T, index_t H, index_t W, index_t OT,
                         index_t OH, index_t OW, const ConvGeom& g) {
    for (index_t c = 0; c < C; ++c) {
        const S* src = colb + c * OT * OH * OW;
        S* dst = xb + c * T * H * W;
        for (index_t ot = 0; ot < OT; ++ot)
            for (index_t oh = 0; oh < OH; ++oh)
                for (index_t ow = 0; ow < OW; ++ow)
                    dst[(ot * g.st * H + oh * g.sh) * W + ow * g.sw] += src[(ot * OH + oh) * OW + ow];
    }
}

}  // namespace detail

template <typename S>
Tensor<S> conv_pointwise(const Tensor<S>& x, const Tensor<S>& w, const ConvGeom& g = {}) {
    detail::require_5d("pointwise-conv", x);
    g.validate();
    if (g.kt != 1 || g.kh != 1 || g.kw != 1)
        throw ShapeError("pointwise-conv: window must be 1x1x1");
    const index_t N = x.shape()[0], C = x.shape()[1], T = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    if (w.dim() != 2 || w.shape()[1] != C)
        throw ShapeError("pointwise-conv: weight " + shape_str(w.shape()) + " incompatible with " +
                         std::to_string(C) + " input channels (axis 1)");
    const index_t Cout = w.shape()[0];
    const index_t OT = same_out_extent(T, g.st), OH = same_out_extent(H, g.sh), OW = same_out_extent(W, g.sw);
    const index_t P = OT * OH * OW;
    const bool strided = g.st != 1 || g.sh != 1 || g.sw != 1;

    Tensor<S> out = Tensor<S>::zeros({N, Cout, OT, OH, OW});
    {
        detail::ConstMatrixMap<S> Wm(w.data().data(), Cout, C);
        std::vector<S> col;
        if (strided) col.resize(static_cast<std::size_t>(C * P));
        for (index_t n = 0; n < N; ++n) {
            const S* xb = x.data().data() + n * C * T * H * W;
            if (strided) {
                detail::gather_strided(xb, col.data(), C, T, H, W, OT, OH, OW, g);
                xb = col.data();
            }
            detail::ConstMatrixMap<S> Xm(xb, C, P);
            detail::MatrixMap<S> Om(out.data_mut().data() + n * Cout * P, Cout, P);
            Om.noalias() = Wm * Xm;
        }
    }
    if (detail::tracing<S>({&x, &w})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, w, out, g, N, C, T, H, W, Cout, OT, OH, OW, P, strided]() mutable {
            if (!detail::has_grad(out)) return;
            detail::ConstMatrixMap<S> Wm(w.data().data(), Cout, C);
            std::vector<S> col(strided ? static_cast<std::size_t>(C * P) : 0);
            for (index_t n = 0; n < N; ++n) {
                detail::ConstMatrixMap<S> OGm(out.grad().data() + n * Cout * P, Cout, P);
                if (x.on_path()) {
                    if (strided) {
                        detail::MatrixMap<S> Cm(col.data(), C, P);
                        Cm.noalias() = Wm.transpose() * OGm;
                        detail::scatter_strided_add(col.data(), x.grad_mut().data() + n * C * T * H * W, C,
                                                    T, H, W, OT, OH, OW, g);
                    } else {
                        detail::MatrixMap<S> XGm(x.grad_mut().data() + n * C * T * H * W, C, P);
                        XGm.noalias() += Wm.transpose() * OGm;
                    }
                }
                if (w.on_path()) {
                    const S* xb = x.data().data() + n * C * T * H * W;
                    if (strided) {
                        detail::gather_strided(xb, col.data(), C, T, H, W, OT, OH, OW, g);
                        xb = col.data();
                    }
                    detail::ConstMatrixMap<S> Xm(xb, C, P);
                    detail::MatrixMap<S> WGm(w.grad_mut().data(), Cout, C);
                    WGm.noalias() += OGm * Xm.transpose();
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dense convolution (stems): w has shape (Cout, Cin, kt, kh, kw).
// Implemented by unfolding windows into a (Cin*kvol, P) matrix per item.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
struct Unfold {
    index_t T, H, W, OT, OH, OW, pt, ph, pw;
    ConvGeom g;

    // Columns of x[n] -> (Cin*kvol, OT*OH*OW), zero where the window leaves
    // the input.
    void im2col(const S* xb, S* colb, index_t Cin) const {
        const index_t P = OT * OH * OW;
        for (index_t c = 0; c < Cin; ++c)
            for (index_t kt = 0; kt < g.kt; ++kt)
                for (index_t kh = 0; kh < g.kh; ++kh)
                    for (index_t kw = 0; kw < g.kw; ++kw) {
                        S* dst = colb + (((c * g.kt + kt) * g.kh + kh) * g.kw + kw) * P;
                        const S* src = xb + c * T * H * W;
                        for (index_t ot = 0; ot < OT; ++ot) {
                            const index_t it = ot * g.st - pt + kt * g.dt;
                            for (index_t oh = 0; oh < OH; ++oh) {
                                const index_t ih = oh * g.sh - ph + kh * g.dh;
                                for (index_t ow = 0; ow < OW; ++ow) {
                                    const index_t iw = ow * g.sw - pw + kw * g.dw;
                                    const bool in = it >= 0 && it < T && ih >= 0 && ih < H && iw >= 0 && iw < W;
                                    dst[(ot * OH + oh) * OW + ow] = in ? src[(it * H + ih) * W + iw] : S(0);
                                }
                            }
                        }
                    }
    }

    void col2im_add(const S* colb, S* xb, index_t Cin) const {
        const index_t P = OT * OH * OW;
        for (index_t c = 0; c < Cin; ++c)
            for (index_t kt = 0; kt < g.kt; ++kt)
                for (index_t kh = 0; kh < g.kh; ++kh)
                    for (index_t kw = 0; kw < g.kw; ++kw) {
                        const S* src = colb + (((c * g.kt + kt) * g.kh + kh) * g.kw + kw) * P;
                        S* dst = xb + c * T * H * W;
                        for (index_t ot = 0; ot < OT; ++ot) {
                            const index_t it = ot * g.st - pt + kt * g.dt;
                            if (it < 0 || it >= T) continue;
                            for (index_t oh = 0; oh < OH; ++oh) {
                                const index_t ih = oh * g.sh - ph + kh * g.dh;
                                if (ih < 0 || ih >= H) continue;
                                for (index_t ow = 0; ow < OW; ++ow) {
                                    const index_t iw = ow * g.sw - pw + kw * g.dw;
                                    if (iw < 0 || iw >= W) continue;
                                    dst[(it * H + ih) * W + iw] += src[(ot * OH + oh) * OW + ow];
                                }
                            }
                        }
                    }
    }
};

}  // namespace detail

template <typename S>
Tensor<S> conv_dense(const Tensor<S>& x, const Tensor<S>& w, const ConvGeom& g) {
    detail::require_5d("dense-conv", x);
    g.validate();
    const index_t N = x.shape()[0], C = x.shape()[1], T = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    if (w.dim() != 5 || w.shape()[1] != C || w.shape()[2] != g.kt || w.shape()[3] != g.kh ||
        w.shape()[4] != g.kw)
        throw ShapeError("dense-conv: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()) + " and window (" + std::to_string(g.kt) + ", " +
                         std::to_string(g.kh) + ", " + std::to_string(g.kw) + ")");
    const index_t Cout = w.shape()[0];
    const auto [OT, pt] = detail::same_axis(T, g.kt, g.st, g.dt);
    const auto [OH, ph] = detail::same_axis(H, g.kh, g.sh, g.dh);
    const auto [OW, pw] = detail::same_axis(W, g.kw, g.sw, g.dw);
    const detail::Unfold<S> uf{T, H, W, OT, OH, OW, pt, ph, pw, g};
    const index_t kvol = g.kt * g.kh * g.kw;
    const index_t P = OT * OH * OW;

    Tensor<S> out = Tensor<S>::zeros({N, Cout, OT, OH, OW});
    {
        std::vector<S> col(static_cast<std::size_t>(C * kvol * P));
        detail::ConstMatrixMap<S> Wm(w.data().data(), Cout, C * kvol);
        for (index_t n = 0; n < N; ++n) {
            uf.im2col(x.data().data() + n * C * T * H * W, col.data(), C);
            detail::ConstMatrixMap<S> Cm(col.data(), C * kvol, P);
            detail::MatrixMap<S> Om(out.data_mut().data() + n * Cout * P, Cout, P);
            Om.noalias() = Wm * Cm;
        }
    }
    if (detail::tracing<S>({&x, &w})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, w, out, uf, N, C, Cout, kvol, P]() mutable {
            if (!detail::has_grad(out)) return;
            std::vector<S> col(static_cast<std::size_t>(C * kvol * P));
            detail::ConstMatrixMap<S> Wm(w.data().data(), Cout, C * kvol);
            for (index_t n = 0; n < N; ++n) {
                detail::ConstMatrixMap<S> OGm(out.grad().data() + n * Cout * P, Cout, P);
                if (x.on_path()) {
                    detail::MatrixMap<S> Cm(col.data(), C * kvol, P);
                    Cm.noalias() = Wm.transpose() * OGm;
                    uf.col2im_add(col.data(), x.grad_mut().data() + n * C * uf.T * uf.H * uf.W, C);
                }
                if (w.on_path()) {
                    uf.im2col(x.data().data() + n * C * uf.T * uf.H * uf.W, col.data(), C);
                    detail::ConstMatrixMap<S> Cm(col.data(), C * kvol, P);
                    detail::MatrixMap<S> WGm(w.grad_mut().data(), Cout, C * kvol);
                    WGm.noalias() += OGm * Cm.transpose();
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

// Max over each window; padding never wins (a same-padded window always
// overlaps the input). Ties resolve to the first element in (t, h, w) order.
template <typename S>
Tensor<S> max_pool(const Tensor<S>& x, const ConvGeom& g) {
    detail::require_5d("max-pool", x);
    g.validate();
    const index_t N = x.shape()[0], C = x.shape()[1], T = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    const auto [OT, pt] = detail::same_axis(T, g.kt, g.st, g.dt);
    const auto [OH, ph] = detail::same_axis(H, g.kh, g.sh, g.dh);
    const auto [OW, pw] = detail::same_axis(W, g.kw, g.sw, g.dw);
    Tensor<S> out = Tensor<S>::zeros({N, C, OT, OH, OW});
    // Winner index within each (n, c) plane, for gradient routing.
    auto argmax = std::make_shared<std::vector<index_t>>(static_cast<std::size_t>(out.size()));
    {
        auto xd = x.data();
        auto od = out.data_mut();
        index_t oi = 0;
        for (index_t nc = 0; nc < N * C; ++nc) {
            const S* xb = xd.data() + nc * T * H * W;
            for (index_t ot = 0; ot < OT; ++ot)
                for (index_t oh = 0; oh < OH; ++oh)
                    for (index_t ow = 0; ow < OW; ++ow, ++oi) {
                        S best = -std::numeric_limits<S>::infinity();
                        index_t best_i = -1;
                        for (index_t kt = 0; kt < g.kt; ++kt) {
                            const index_t it = ot * g.st - pt + kt * g.dt;
                            if (it < 0 || it >= T) continue;
                            for (index_t kh = 0; kh < g.kh; ++kh) {
                                const index_t ih = oh * g.sh - ph + kh * g.dh;
                                if (ih < 0 || ih >= H) continue;
                                for (index_t kw = 0; kw < g.kw; ++kw) {
                                    const index_t iw = ow * g.sw - pw + kw * g.dw;
                                    if (iw < 0 || iw >= W) continue;
                                    const index_t xi = (it * H + ih) * W + iw;
                                    if (xb[xi] > best) {
                                        best = xb[xi];
                                        best_i = xi;
                                    }
                                }
                            }
                        }
                        // A same-padded undilated window always overlaps the
                        // input; a dilated one may not, in which case the
                        // window reads all zeros.
                        od[oi] = best_i < 0 ? S(0) : best;
                        (*argmax)[static_cast<std::size_t>(oi)] = best_i;
                    }
        }
    }
    if (detail::tracing<S>({&x})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, out, argmax, N, C, T, H, W]() mutable {
            if (!detail::has_grad(out)) return;
            auto og = out.grad();
            auto xg = x.grad_mut();
            const index_t P = out.size() / (N * C);
            for (index_t nc = 0; nc < N * C; ++nc) {
                S* xb = xg.data() + nc * T * H * W;
                const S* gb = og.data() + nc * P;
                const index_t* ab = argmax->data() + nc * P;
                for (index_t i = 0; i < P; ++i)
                    if (ab[i] >= 0) xb[ab[i]] += gb[i];
            }
        });
    }
    return out;
}

// Average over each window, always dividing by the full window volume
// (padded positions count as zeros).
template <typename S>
Tensor<S> avg_pool(const Tensor<S>& x, const ConvGeom& g) {
    detail::require_5d("avg-pool", x);
    g.validate();
    const index_t N = x.shape()[0], C = x.shape()[1], T = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    const auto [OT, pt] = detail::same_axis(T, g.kt, g.st, g.dt);
    const auto [OH, ph] = detail::same_axis(H, g.kh, g.sh, g.dh);
    const auto [OW, pw] = detail::same_axis(W, g.kw, g.sw, g.dw);
    const S inv_vol = S(1) / static_cast<S>(g.kt * g.kh * g.kw);
    Tensor<S> out = Tensor<S>::zeros({N, C, OT, OH, OW});
    {
        auto xd = x.data();
        auto od = out.data_mut();
        index_t oi = 0;
        for (index_t nc = 0; nc < N * C; ++nc) {
            const S* xb = xd.data() + nc * T * H * W;
            for (index_t ot = 0; ot < OT; ++ot)
                for (index_t oh = 0; oh < OH; ++oh)
                    for (index_t ow = 0; ow < OW; ++ow, ++oi) {
                        S acc = S(0);
                        for (index_t kt = 0; kt < g.kt; ++kt) {
                            const index_t it = ot * g.st - pt + kt * g.dt;
                            if (it < 0 || it >= T) continue;
                            for (index_t kh = 0; kh < g.kh; ++kh) {
                                const index_t ih = oh * g.sh - ph + kh * g.dh;
                                if (ih < 0 || ih >= H) continue;
                                for (index_t kw = 0; kw < g.kw; ++kw) {
                                    const index_t iw = ow * g.sw - pw + kw * g.dw;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += xb[(it * H + ih) * W + iw];
                                }
                            }
                        }
                        od[oi] = acc * inv_vol;
                    }
        }
    }
    if (detail::tracing<S>({&x})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, out, g, N, C, T, H, W, OT, OH, OW, pt, ph, pw, inv_vol]() mutable {
            if (!detail::has_grad(out)) return;
            auto og = out.grad();
            auto xg = x.grad_mut();
            for (index_t nc = 0; nc < N * C; ++nc) {
                S* xb = xg.data() + nc * T * H * W;
                const S* gb = og.data() + nc * OT * OH * OW;
                for (index_t ot = 0; ot < OT; ++ot)
                    for (index_t oh = 0; oh < OH; ++oh)
                        for (index_t ow = 0; ow < OW; ++ow) {
                            const S gv = gb[(ot * OH + oh) * OW + ow] * inv_vol;
                            if (gv == S(0)) continue;
                            for (index_t kt = 0; kt < g.kt; ++kt) {
                                const index_t it = ot * g.st - pt + kt * g.dt;
                                if (it < 0 || it >= T) continue;
                                for (index_t kh = 0; kh < g.kh; ++kh) {
                                    const index_t ih = oh * g.sh - ph + kh * g.dh;
                                    if (ih < 0 || ih >= H) continue;
                                    for (index_t kw = 0; kw < g.kw; ++kw) {
                                        const index_t iw = ow * g.sw - pw + kw * g.dw;
                                        if (iw < 0 || iw >= W) continue;
                                        xb[(it * H + ih) * W + iw] += gv;
                                    }
                                }
                            }
                        }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, T, H, W) per channel.
// ---------------------------------------------------------------------------

// Training mode normalizes with the batch statistics (biased variance) and
// folds them into the running buffers in place:
//   running = (1 - momentum) * running + momentum * batch.
// Eval mode normalizes with the running buffers. The backward pass in
// training mode differentiates through the batch statistics.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     const Tensor<S>& running_mean, const Tensor<S>& running_var, bool training,
                     S momentum = S(0.1), S eps = S(1e-5)) {
    detail::require_5d("batch-norm", x);
    const index_t N = x.shape()[0], C = x.shape()[1];
    const index_t P = x.size() / (N * C);  // positions per channel per item
    const index_t m = N * P;               // reduction count per channel
    const Tensor<S>* per_channel[] = {&gamma, &beta, &running_mean, &running_var};
    for (const Tensor<S>* t : per_channel)
        if (t->dim() != 1 || t->shape()[0] != C)
            throw ShapeError("batch-norm: per-channel buffer " + shape_str(t->shape()) + " != (" +
                             std::to_string(C) + ")");

    auto mean = std::make_shared<std::vector<S>>(static_cast<std::size_t>(C));
    auto invstd = std::make_shared<std::vector<S>>(static_cast<std::size_t>(C));
    {
        auto xd = x.data();
        if (training) {
            for (index_t c = 0; c < C; ++c) {
                S mu = S(0);
                for (index_t n = 0; n < N; ++n) {
                    const S* xb = xd.data() + (n * C + c) * P;
                    for (index_t i = 0; i < P; ++i) mu += xb[i];
                }
                mu /= static_cast<S>(m);
                S var = S(0);
                for (index_t n = 0; n < N; ++n) {
                    const S* xb = xd.data() + (n * C + c) * P;
                    for (index_t i = 0; i < P; ++i) {
                        const S d = xb[i] - mu;
                        var += d * d;
                    }
                }
                var /= static_cast<S>(m);
                (*mean)[static_cast<std::size_t>(c)] = mu;
                (*invstd)[static_cast<std::size_t>(c)] = S(1) / std::sqrt(var + eps);
                auto rm = running_mean.data_mut();
                auto rv = running_var.data_mut();
                rm[c] = (S(1) - momentum) * rm[c] + momentum * mu;
                rv[c] = (S(1) - momentum) * rv[c] + momentum * var;
            }
        } else {
            auto rm = running_mean.data();
            auto rv = running_var.data();
            for (index_t c = 0; c < C; ++c) {
                (*mean)[static_cast<std::size_t>(c)] = rm[c];
                (*invstd)[static_cast<std::size_t>(c)] = S(1) / std::sqrt(rv[c] + eps);
            }
        }
    }
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    {
        auto xd = x.data();
        auto od = out.data_mut();
        auto gd = gamma.data();
        auto bd = beta.data();
        for (index_t n = 0; n < N; ++n)
            for (index_t c = 0; c < C; ++c) {
                const S mu = (*mean)[static_cast<std::size_t>(c)];
                const S is = (*invstd)[static_cast<std::size_t>(c)];
                const S gm = gd[c], bt = bd[c];
                const S* xb = xd.data() + (n * C + c) * P;
                S* ob = od.data() + (n * C + c) * P;
                for (index_t i = 0; i < P; ++i) ob[i] = gm * (xb[i] - mu) * is + bt;
            }
    }
    if (detail::tracing<S>({&x, &gamma, &beta})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, gamma, beta, out, mean, invstd, training, N, C, P, m]() mutable {
            if (!detail::has_grad(out)) return;
            auto og = out.grad();
            auto xd = x.data();
            auto gd = gamma.data();
            for (index_t c = 0; c < C; ++c) {
                const S mu = (*mean)[static_cast<std::size_t>(c)];
                const S is = (*invstd)[static_cast<std::size_t>(c)];
                // Accumulate the channel sums needed by every output.
                S sum_g = S(0), sum_gx = S(0);  // sum of grad, grad * xhat
                for (index_t n = 0; n < N; ++n) {
                    const S* gb = og.data() + (n * C + c) * P;
                    const S* xb = xd.data() + (n * C + c) * P;
                    for (index_t i = 0; i < P; ++i) {
                        sum_g += gb[i];
                        sum_gx += gb[i] * (xb[i] - mu) * is;
                    }
                }
                if (gamma.on_path()) gamma.grad_mut()[c] += sum_gx;
                if (beta.on_path()) beta.grad_mut()[c] += sum_g;
                if (x.on_path()) {
                    auto xg = x.grad_mut();
                    const S gm = gd[c];
                    if (training) {
                        const S inv_m = S(1) / static_cast<S>(m);
                        for (index_t n = 0; n < N; ++n) {
                            const S* gb = og.data() + (n * C + c) * P;
                            const S* xb = xd.data() + (n * C + c) * P;
                            S* xgb = xg.data() + (n * C + c) * P;
                            for (index_t i = 0; i < P; ++i) {
                                const S xhat = (xb[i] - mu) * is;
                                xgb[i] += gm * is * (gb[i] - inv_m * sum_g - xhat * inv_m * sum_gx);
                            }
                        }
                    } else {
                        for (index_t n = 0; n < N; ++n) {
                            const S* gb = og.data() + (n * C + c) * P;
                            S* xgb = xg.data() + (n * C + c) * P;
                            for (index_t i = 0; i < P; ++i) xgb[i] += gm * is * gb[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Reshape helper: reinterpret a 4-D (N, C, H, W) tensor as 5-D (N, C, 1, H, W)
// sharing the same storage semantics (fresh node, copied metadata, shared
// value vector is avoided -- tensors are value buffers, so this copies; used
// only at ingestion boundaries).
template <typename S>
Tensor<S> as_nct_hw(const Tensor<S>& x) {
    if (x.dim() == 5) return x;
    if (x.dim() != 4)
        throw ShapeError("as_nct_hw: expected 4-D or 5-D input, got " + shape_str(x.shape()));
    std::vector<S> data(x.data().begin(), x.data().end());
    return Tensor<S>::from_data({x.shape()[0], x.shape()[1], 1, x.shape()[2], x.shape()[3]},
                                std::move(data));
}

}  // namespace sdas
