// Optimizers for the bilevel loop: momentum SGD (operation weights) and Adam
// (architecture parameters). State is keyed by parameter node identity and
// updated in the caller-supplied order, so updates are deterministic; state
// for parameters discarded by discretization can be pruned.
#pragma once

#include <cmath>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sdas/common.hpp"
#include "sdas/tensor.hpp"

namespace sdas {

// v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
template <typename S>
class SgdMomentum {
  public:
    SgdMomentum(S momentum, S weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

    void step(const std::vector<Tensor<S>>& params, S lr) {
        for (const auto& p : params) {
            auto g = p.grad();
            if (g.empty()) continue;  // no gradient reached this parameter
            auto& v = vel_[p.node().get()];
            if (v.empty()) v.assign(static_cast<std::size_t>(p.size()), S(0));
            auto w = p.data_mut();
            for (index_t i = 0; i < p.size(); ++i) {
                v[static_cast<std::size_t>(i)] =
                    momentum_ * v[static_cast<std::size_t>(i)] + (g[i] + weight_decay_ * w[i]);
                w[i] -= lr * v[static_cast<std::size_t>(i)];
            }
        }
    }

    void prune(const std::vector<Tensor<S>>& live) {
        std::unordered_set<const TensorNode<S>*> keep;
        for (const auto& p : live) keep.insert(p.node().get());
        for (auto it = vel_.begin(); it != vel_.end();)
            it = keep.count(it->first) ? std::next(it) : vel_.erase(it);
    }

    // Velocity buffer for checkpointing (created on demand).
    std::vector<S>& velocity(const Tensor<S>& p) {
        auto& v = vel_[p.node().get()];
        if (v.empty()) v.assign(static_cast<std::size_t>(p.size()), S(0));
        return v;
    }

  private:
    S momentum_, weight_decay_;
    std::unordered_map<const TensorNode<S>*, std::vector<S>> vel_;
};

// Fixed-rate Adam with bias correction; no weight decay.
template <typename S>
class Adam {
  public:
    explicit Adam(S lr, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<Tensor<S>>& params) {
        ++t_;
        const S bc1 = S(1) - std::pow(beta1_, static_cast<S>(t_));
        const S bc2 = S(1) - std::pow(beta2_, static_cast<S>(t_));
        for (const auto& p : params) {
            auto g = p.grad();
            if (g.empty()) continue;
            auto& st = states_[p.node().get()];
            if (st.m.empty()) {
                st.m.assign(static_cast<std::size_t>(p.size()), S(0));
                st.v.assign(static_cast<std::size_t>(p.size()), S(0));
            }
            auto w = p.data_mut();
            for (index_t i = 0; i < p.size(); ++i) {
                auto& m = st.m[static_cast<std::size_t>(i)];
                auto& v = st.v[static_cast<std::size_t>(i)];
                m = beta1_ * m + (S(1) - beta1_) * g[i];
                v = beta2_ * v + (S(1) - beta2_) * g[i] * g[i];
                w[i] -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
            }
        }
    }

    void prune(const std::vector<Tensor<S>>& live) {
        std::unordered_set<const TensorNode<S>*> keep;
        for (const auto& p : live) keep.insert(p.node().get());
        for (auto it = states_.begin(); it != states_.end();)
            it = keep.count(it->first) ? std::next(it) : states_.erase(it);
    }

    struct State {
        std::vector<S> m, v;
    };

    index_t step_count() const { return t_; }
    void set_step_count(index_t t) { t_ = t; }

    State& state(const Tensor<S>& p) {
        auto& st = states_[p.node().get()];
        if (st.m.empty()) {
            st.m.assign(static_cast<std::size_t>(p.size()), S(0));
            st.v.assign(static_cast<std::size_t>(p.size()), S(0));
        }
        return st;
    }

  private:
    S lr_, beta1_, beta2_, eps_;
    index_t t_ = 0;
    std::unordered_map<const TensorNode<S>*, State> states_;
};

// Cosine-annealed learning rate: eta1 * 0.5 * (1 + cos(pi * t / T)).
template <typename S>
S cosine_lr(S eta1, index_t t, index_t T) {
    if (t < 0 || t > T)
        throw ConfigError("cosine_lr: t=" + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return eta1 * S(0.5) * (S(1) + std::cos(S(M_PI) * static_cast<S>(t) / static_cast<S>(T)));
}

}  // namespace sdas
