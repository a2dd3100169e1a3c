// Dense tensor with reverse-mode autodiff on an explicit tape.
//
// A Tensor<S> is a cheap handle to a heap node holding the value buffer and,
// once gradients flow, a same-shape grad buffer. Primitives are free functions
// that compute the output eagerly and, when a tape is active and an input is on
// the gradient path, push a backward closure. backward() replays the closures
// in reverse recording order (reverse topological by construction) and then
// clears the tape. All accumulation loops are fixed row-major order, so runs
// are bit-reproducible within one build.
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "sdas/common.hpp"

namespace sdas {

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;        // empty until first accumulation
    bool requires_grad = false; // leaf parameter flag
    bool on_path = false;       // gradient must flow through this node

    std::vector<S>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), S(0));
        return grad;
    }
};

template <typename S>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }

    static Tensor filled(Shape shape, S v, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<TensorNode<S>>();
        t.n_->shape = std::move(shape);
        t.n_->value.assign(static_cast<std::size_t>(numel(t.n_->shape)), v);
        t.n_->requires_grad = requires_grad;
        t.n_->on_path = requires_grad;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (numel(shape) != static_cast<index_t>(data.size()))
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<TensorNode<S>>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        t.n_->requires_grad = requires_grad;
        t.n_->on_path = requires_grad;
        return t;
    }

    static Tensor scalar(S v, bool requires_grad = false) {
        return filled({1}, v, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    index_t size() const { return static_cast<index_t>(n_->value.size()); }
    index_t dim() const { return static_cast<index_t>(n_->shape.size()); }

    // Tensors are handles: a const Tensor still designates mutable storage
    // (shared_ptr shallow constness), so the mutators below are const.
    std::span<const S> data() const { return n_->value; }
    std::span<S> data_mut() const { return n_->value; }

    bool requires_grad() const { return n_->requires_grad; }
    bool on_path() const { return n_ && n_->on_path; }

    std::span<const S> grad() const { return n_->grad; }
    std::span<S> grad_mut() const { return n_->ensure_grad(); }
    void zero_grad() const {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
    }

    S item() const {
        if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
        return n_->value[0];
    }

    std::shared_ptr<TensorNode<S>> node() const { return n_; }

    bool same_storage(const Tensor& other) const { return n_ == other.n_; }

  private:
    std::shared_ptr<TensorNode<S>> n_;
};

// Recording context. Construction activates the tape for the current thread
// (nesting restores the previous one on destruction), matching the one-graph-
// per-worker confinement rule.
template <typename S>
class Tape {
  public:
    Tape() : prev_(current_) { current_ = this; }
    ~Tape() {
        if (current_ == this) current_ = prev_;
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_; }

    void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates grads in reverse recording
    // order; the tape is cleared afterwards.
    void backward(const Tensor<S>& loss) {
        if (loss.size() != 1)
            throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        if (entries_.empty()) throw Error("backward: tape is empty");
        loss.node()->ensure_grad()[0] += S(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
        entries_.clear();
    }

    // Scoped suppression of recording (inference passes, finite differences).
    struct Pause {
        Pause() : saved_(current_) { current_ = nullptr; }
        ~Pause() { current_ = saved_; }
        Pause(const Pause&) = delete;
        Pause& operator=(const Pause&) = delete;

      private:
        Tape* saved_;
    };

  private:
    static thread_local Tape* current_;
    Tape* prev_;
    std::vector<std::function<void()>> entries_;
};

template <typename S>
thread_local Tape<S>* Tape<S>::current_ = nullptr;

namespace detail {

template <typename S>
bool tracing(std::initializer_list<const Tensor<S>*> inputs) {
    if (Tape<S>::current() == nullptr) return false;
    for (const Tensor<S>* t : inputs)
        if (t->on_path()) return true;
    return false;
}

template <typename S>
void mark_out(Tensor<S>& out) {
    out.node()->on_path = true;
}

// Skip backward work when no gradient reached the output.
template <typename S>
bool has_grad(const Tensor<S>& t) {
    return !t.node()->grad.empty();
}

template <typename S>
using ArrayMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstArrayMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatrixMap = Eigen::Map<MatrixRM<S>>;
template <typename S>
using ConstMatrixMap = Eigen::Map<const MatrixRM<S>>;

template <typename S>
ConstArrayMap<S> carr(const Tensor<S>& t) {
    return ConstArrayMap<S>(t.data().data(), t.size());
}
template <typename S>
ArrayMap<S> arr(Tensor<S>& t) {
    return ArrayMap<S>(t.data_mut().data(), t.size());
}
template <typename S>
ArrayMap<S> garr(Tensor<S>& t) {
    return ArrayMap<S>(t.grad_mut().data(), t.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    detail::arr(out) = detail::carr(x).max(S(0));
    if (detail::tracing<S>({&x})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, out]() mutable {
            if (!detail::has_grad(out)) return;
            auto xd = x.data();
            auto og = out.grad();
            auto xg = x.grad_mut();
            // Subgradient 0 at x == 0.
            for (index_t i = 0; i < x.size(); ++i)
                if (xd[i] > S(0)) xg[i] += og[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    {
        auto xd = x.data();
        auto od = out.data_mut();
        for (index_t i = 0; i < x.size(); ++i) od[i] = S(1) / (S(1) + std::exp(-xd[i]));
    }
    if (detail::tracing<S>({&x})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, out]() mutable {
            if (!detail::has_grad(out)) return;
            auto od = out.data();
            auto og = out.grad();
            auto xg = x.grad_mut();
            for (index_t i = 0; i < x.size(); ++i) xg[i] += og[i] * od[i] * (S(1) - od[i]);
        });
    }
    return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    detail::arr(out) = detail::carr(a) + detail::carr(b);
    if (detail::tracing<S>({&a, &b})) {
        detail::mark_out(out);
        Tape<S>::current()->record([a, b, out]() mutable {
            if (!detail::has_grad(out)) return;
            auto og = out.grad();
            if (a.on_path()) {
                auto ag = a.grad_mut();
                for (index_t i = 0; i < a.size(); ++i) ag[i] += og[i];
            }
            if (b.on_path()) {
                auto bg = b.grad_mut();
                for (index_t i = 0; i < b.size(); ++i) bg[i] += og[i];
            }
        });
    }
    return out;
}

// out = s * x with s a one-element tensor; gradient flows into both.
template <typename S>
Tensor<S> scale(const Tensor<S>& x, const Tensor<S>& s) {
    if (s.size() != 1)
        throw ShapeError("scale: weight must be a single element, got " + shape_str(s.shape()));
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    detail::arr(out) = detail::carr(x) * s.data()[0];
    if (detail::tracing<S>({&x, &s})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, s, out]() mutable {
            if (!detail::has_grad(out)) return;
            auto og = out.grad();
            auto xd = x.data();
            const S sv = s.data()[0];
            if (x.on_path()) {
                auto xg = x.grad_mut();
                for (index_t i = 0; i < x.size(); ++i) xg[i] += og[i] * sv;
            }
            if (s.on_path()) {
                S acc = S(0);
                for (index_t i = 0; i < x.size(); ++i) acc += og[i] * xd[i];
                s.grad_mut()[0] += acc;
            }
        });
    }
    return out;
}

// out = sum_i w[i] * xs[i]; w is a vector tensor with one entry per input.
template <typename S>
Tensor<S> weighted_sum(const std::vector<Tensor<S>>& xs, const Tensor<S>& w) {
    if (xs.empty()) throw ShapeError("weighted_sum: no inputs");
    if (w.size() != static_cast<index_t>(xs.size()))
        throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " inputs but " +
                         std::to_string(w.size()) + " weights");
    for (const auto& x : xs)
        if (x.shape() != xs[0].shape())
            throw ShapeError("weighted_sum: input shape mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(xs[0].shape()));
    Tensor<S> out = Tensor<S>::zeros(xs[0].shape());
    {
        auto od = out.data_mut();
        auto wd = w.data();
        for (std::size_t k = 0; k < xs.size(); ++k) {
            auto xd = xs[k].data();
            const S wk = wd[k];
            for (index_t i = 0; i < out.size(); ++i) od[i] += wk * xd[i];
        }
    }
    bool trace = w.on_path();
    for (const auto& x : xs) trace = trace || x.on_path();
    if (Tape<S>::current() && trace) {
        detail::mark_out(out);
        Tape<S>::current()->record([xs, w, out]() mutable {
            if (!detail::has_grad(out)) return;
            auto og = out.grad();
            auto wd = w.data();
            for (std::size_t k = 0; k < xs.size(); ++k) {
                if (xs[k].on_path()) {
                    auto xg = xs[k].grad_mut();
                    const S wk = wd[k];
                    for (index_t i = 0; i < out.size(); ++i) xg[i] += og[i] * wk;
                }
            }
            if (w.on_path()) {
                auto wg = w.grad_mut();
                for (std::size_t k = 0; k < xs.size(); ++k) {
                    auto xd = xs[k].data();
                    S acc = S(0);
                    for (index_t i = 0; i < out.size(); ++i) acc += og[i] * xd[i];
                    wg[k] += acc;
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::scalar(detail::carr(x).sum());
    if (detail::tracing<S>({&x})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, out]() mutable {
            if (!detail::has_grad(out)) return;
            const S g = out.grad()[0];
            auto xg = x.grad_mut();
            for (index_t i = 0; i < x.size(); ++i) xg[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Vector softmax, losses, linear
// ---------------------------------------------------------------------------

// Softmax over a 1-D tensor (operation-mixing weights).
template <typename S>
Tensor<S> softmax_vec(const Tensor<S>& x) {
    if (x.dim() != 1) throw ShapeError("softmax: expected 1-D input, got " + shape_str(x.shape()));
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    {
        auto xd = x.data();
        auto od = out.data_mut();
        S mx = xd[0];
        for (index_t i = 1; i < x.size(); ++i) mx = std::max(mx, xd[i]);
        S tot = S(0);
        for (index_t i = 0; i < x.size(); ++i) {
            od[i] = std::exp(xd[i] - mx);
            tot += od[i];
        }
        for (index_t i = 0; i < x.size(); ++i) od[i] /= tot;
    }
    if (detail::tracing<S>({&x})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, out]() mutable {
            if (!detail::has_grad(out)) return;
            auto p = out.data();
            auto og = out.grad();
            auto xg = x.grad_mut();
            S dot = S(0);
            for (index_t i = 0; i < x.size(); ++i) dot += og[i] * p[i];
            for (index_t i = 0; i < x.size(); ++i) xg[i] += p[i] * (og[i] - dot);
        });
    }
    return out;
}

// Mean cross-entropy of softmax(logits) against integer labels. logits: (N, K).
template <typename S>
Tensor<S> cross_entropy_logits(const Tensor<S>& logits, const std::vector<int>& labels) {
    if (logits.dim() != 2)
        throw ShapeError("cross_entropy: expected (batch, classes) logits, got " + shape_str(logits.shape()));
    const index_t n = logits.shape()[0];
    const index_t k = logits.shape()[1];
    if (static_cast<index_t>(labels.size()) != n)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(n));
    for (int y : labels)
        if (y < 0 || y >= k) throw Error("cross_entropy: label " + std::to_string(y) + " out of range");

    // Stash softmax probabilities for the backward pass.
    auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n * k));
    S loss = S(0);
    {
        auto ld = logits.data();
        for (index_t i = 0; i < n; ++i) {
            const S* row = ld.data() + i * k;
            S mx = row[0];
            for (index_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            S tot = S(0);
            for (index_t j = 0; j < k; ++j) tot += std::exp(row[j] - mx);
            const S lse = mx + std::log(tot);
            loss += lse - row[labels[static_cast<std::size_t>(i)]];
            for (index_t j = 0; j < k; ++j)
                (*probs)[static_cast<std::size_t>(i * k + j)] = std::exp(row[j] - lse);
        }
        loss /= static_cast<S>(n);
    }
    Tensor<S> out = Tensor<S>::scalar(loss);
    if (detail::tracing<S>({&logits})) {
        detail::mark_out(out);
        Tape<S>::current()->record([logits, out, probs, labels, n, k]() mutable {
            if (!detail::has_grad(out)) return;
            const S g = out.grad()[0] / static_cast<S>(n);
            auto lg = logits.grad_mut();
            for (index_t i = 0; i < n; ++i)
                for (index_t j = 0; j < k; ++j) {
                    S p = (*probs)[static_cast<std::size_t>(i * k + j)];
                    if (j == labels[static_cast<std::size_t>(i)]) p -= S(1);
                    lg[i * k + j] += g * p;
                }
        });
    }
    return out;
}

// x: (N, Cin), w: (Cout, Cin), b: (Cout) or undefined for bias-free.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b = {}) {
    if (x.dim() != 2 || w.dim() != 2)
        throw ShapeError("linear: expected 2-D input and weight, got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
    const index_t n = x.shape()[0], cin = x.shape()[1], cout = w.shape()[0];
    if (w.shape()[1] != cin)
        throw ShapeError("linear: input features " + std::to_string(cin) + " != weight columns " +
                         std::to_string(w.shape()[1]) + " (axis 1)");
    if (b.defined() && (b.dim() != 1 || b.shape()[0] != cout))
        throw ShapeError("linear: bias shape " + shape_str(b.shape()) + " != (" + std::to_string(cout) + ")");

    Tensor<S> out = Tensor<S>::zeros({n, cout});
    {
        detail::ConstMatrixMap<S> X(x.data().data(), n, cin);
        detail::ConstMatrixMap<S> W(w.data().data(), cout, cin);
        detail::MatrixMap<S> O(out.data_mut().data(), n, cout);
        O.noalias() = X * W.transpose();
        if (b.defined()) {
            auto bd = b.data();
            auto od = out.data_mut();
            for (index_t i = 0; i < n; ++i)
                for (index_t j = 0; j < cout; ++j) od[i * cout + j] += bd[j];
        }
    }
    bool trace = b.defined() ? detail::tracing<S>({&x, &w, &b}) : detail::tracing<S>({&x, &w});
    if (trace) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, w, b, out, n, cin, cout]() mutable {
            if (!detail::has_grad(out)) return;
            detail::ConstMatrixMap<S> OG(out.grad().data(), n, cout);
            if (x.on_path()) {
                detail::ConstMatrixMap<S> W(w.data().data(), cout, cin);
                detail::MatrixMap<S> XG(x.grad_mut().data(), n, cin);
                XG.noalias() += OG * W;
            }
            if (w.on_path()) {
                detail::ConstMatrixMap<S> X(x.data().data(), n, cin);
                detail::MatrixMap<S> WG(w.grad_mut().data(), cout, cin);
                WG.noalias() += OG.transpose() * X;
            }
            if (b.defined() && b.on_path()) {
                auto bg = b.grad_mut();
                auto og = out.grad();
                for (index_t i = 0; i < n; ++i)
                    for (index_t j = 0; j < cout; ++j) bg[j] += og[i * cout + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel-structured primitives (x laid out as (N, C, spatial...))
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
void check_channel_layout(const char* prim, const Tensor<S>& x) {
    if (x.dim() < 3)
        throw ShapeError(std::string(prim) + ": expected (batch, channels, spatial...) input, got " +
                         shape_str(x.shape()));
}
}  // namespace detail

// (N, C, spatial...) -> (N, C) mean over every spatial position.
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    detail::check_channel_layout("global_avg_pool", x);
    const index_t n = x.shape()[0], c = x.shape()[1];
    const index_t p = x.size() / (n * c);
    Tensor<S> out = Tensor<S>::zeros({n, c});
    {
        auto xd = x.data();
        auto od = out.data_mut();
        for (index_t i = 0; i < n * c; ++i) {
            S acc = S(0);
            const S* base = xd.data() + i * p;
            for (index_t j = 0; j < p; ++j) acc += base[j];
            od[i] = acc / static_cast<S>(p);
        }
    }
    if (detail::tracing<S>({&x})) {
        detail::mark_out(out);
        Tape<S>::current()->record([x, out, n, c, p]() mutable {
            if (!detail::has_grad(out)) return;
            auto og = out.grad();
            auto xg = x.grad_mut();
            for (index_t i = 0; i < n * c; ++i) {
                const S g = og[i] / static_cast<S>(p);
                S* base = xg.data() + i * p;
                for (index_t j = 0; j < p; ++j) base[j] += g;
            }
        });
    }
    return out;
}

namespace detail {
enum class ChannelBroadcast { Multiply, Add };

template <typename S>
Tensor<S> channel_broadcast(const Tensor<S>& x, const Tensor<S>& w, ChannelBroadcast mode) {
    const char* prim = mode == ChannelBroadcast::Multiply ? "channel_mul" : "channel_add";
    check_channel_layout(prim, x);
    const index_t n = x.shape()[0], c = x.shape()[1];
    if (w.dim() != 2 || w.shape()[0] != n || w.shape()[1] != c)
        throw ShapeError(std::string(prim) + ": per-channel term " + shape_str(w.shape()) +
                         " does not match input " + shape_str(x.shape()) + " on axes 0,1");
    const index_t p = x.size() / (n * c);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    {
        auto xd = x.data();
        auto wd = w.data();
        auto od = out.data_mut();
        for (index_t i = 0; i < n * c; ++i) {
            const S wv = wd[i];
            const S* xb = xd.data() + i * p;
            S* ob = od.data() + i * p;
            if (mode == ChannelBroadcast::Multiply)
                for (index_t j = 0; j < p; ++j) ob[j] = xb[j] * wv;
            else
                for (index_t j = 0; j < p; ++j) ob[j] = xb[j] + wv;
        }
    }
    if (tracing<S>({&x, &w})) {
        mark_out(out);
        Tape<S>::current()->record([x, w, out, n, c, p, mode]() mutable {
            if (!has_grad(out)) return;
            auto og = out.grad();
            if (x.on_path()) {
                auto xg = x.grad_mut();
                auto wd = w.data();
                for (index_t i = 0; i < n * c; ++i) {
                    const S wv = mode == ChannelBroadcast::Multiply ? wd[i] : S(1);
                    const S* gb = og.data() + i * p;
                    S* xb = xg.data() + i * p;
                    for (index_t j = 0; j < p; ++j) xb[j] += gb[j] * wv;
                }
            }
            if (w.on_path()) {
                auto wg = w.grad_mut();
                auto xd = x.data();
                for (index_t i = 0; i < n * c; ++i) {
                    const S* gb = og.data() + i * p;
                    S acc = S(0);
                    if (mode == ChannelBroadcast::Multiply) {
                        const S* xb = xd.data() + i * p;
                        for (index_t j = 0; j < p; ++j) acc += gb[j] * xb[j];
                    } else {
                        for (index_t j = 0; j < p; ++j) acc += gb[j];
                    }
                    wg[i] += acc;
                }
            }
        });
    }
    return out;
}
}  // namespace detail

// out[n,c,*] = x[n,c,*] * w[n,c]
template <typename S>
Tensor<S> channel_mul(const Tensor<S>& x, const Tensor<S>& w) {
    return detail::channel_broadcast(x, w, detail::ChannelBroadcast::Multiply);
}

// out[n,c,*] = x[n,c,*] + w[n,c]
template <typename S>
Tensor<S> channel_add(const Tensor<S>& x, const Tensor<S>& w) {
    return detail::channel_broadcast(x, w, detail::ChannelBroadcast::Add);
}

// Concatenate along the channel axis; all other axes must agree.
template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& xs) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    detail::check_channel_layout("concat", xs[0]);
    Shape out_shape = xs[0].shape();
    index_t total_c = 0;
    for (const auto& x : xs) {
        if (x.dim() != xs[0].dim())
            throw ShapeError("concat: rank mismatch " + shape_str(x.shape()) + " vs " + shape_str(xs[0].shape()));
        for (index_t a = 0; a < x.dim(); ++a)
            if (a != 1 && x.shape()[a] != xs[0].shape()[a])
                throw ShapeError("concat: mismatch on axis " + std::to_string(a) + ": " + shape_str(x.shape()) +
                                 " vs " + shape_str(xs[0].shape()));
        total_c += x.shape()[1];
    }
    out_shape[1] = total_c;
    const index_t n = out_shape[0];
    const index_t p = numel(out_shape) / (n * total_c);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    {
        auto od = out.data_mut();
        index_t c_off = 0;
        for (const auto& x : xs) {
            const index_t c = x.shape()[1];
            auto xd = x.data();
            for (index_t i = 0; i < n; ++i)
                std::copy(xd.data() + i * c * p, xd.data() + (i + 1) * c * p,
                          od.data() + (i * total_c + c_off) * p);
            c_off += c;
        }
    }
    bool trace = false;
    for (const auto& x : xs) trace = trace || x.on_path();
    if (Tape<S>::current() && trace) {
        detail::mark_out(out);
        Tape<S>::current()->record([xs, out, n, p, total_c]() mutable {
            if (!detail::has_grad(out)) return;
            auto og = out.grad();
            index_t c_off = 0;
            for (auto& x : xs) {
                const index_t c = x.shape()[1];
                if (x.on_path()) {
                    auto xg = x.grad_mut();
                    for (index_t i = 0; i < n; ++i) {
                        const S* gb = og.data() + (i * total_c + c_off) * p;
                        S* xb = xg.data() + i * c * p;
                        for (index_t j = 0; j < c * p; ++j) xb[j] += gb[j];
                    }
                }
                c_off += c;
            }
        });
    }
    return out;
}

}  // namespace sdas
