// Whole-network assembly: stems, the relaxed search network, the discrete
// evaluation network, analytic parameter and multiply counts, and the
// train-then-score loop for discrete architectures.
//
// Stage layouts (K = cells per stage, N = normal, R = spatial reduction,
// SR/STR = spatial-only / spatio-temporal reduction):
//   image:  [N*K, R,  N*K, R,  N*K]
//   video:  [N*K, STR, N*K, STR, N*K, SR, N*K]
// Every reduction-type cell doubles the per-node channel count (the
// reduction cell itself already runs at the doubled width). Architecture
// parameters are shared by all cells of one type; weights are per repeat.
#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "sdas/cell.hpp"
#include "sdas/data.hpp"
#include "sdas/genotype.hpp"
#include "sdas/nn.hpp"
#include "sdas/op_catalog.hpp"
#include "sdas/optim.hpp"
#include "sdas/scheduler.hpp"
#include "sdas/tensor.hpp"

namespace sdas {

enum class NetworkTarget { Image, Video };
enum class StemKind { Lowres, Highres, Video };

inline std::string stem_kind_name(StemKind k) {
    switch (k) {
        case StemKind::Lowres: return "lowres";
        case StemKind::Highres: return "highres";
        case StemKind::Video: return "video";
    }
    throw ConfigError("unknown stem kind");
}

inline StemKind parse_stem_kind(const std::string& s) {
    if (s == "lowres") return StemKind::Lowres;
    if (s == "highres") return StemKind::Highres;
    if (s == "video") return StemKind::Video;
    throw ConfigError("unknown stem kind '" + s + "'");
}

struct NetworkPlan {
    NetworkTarget target = NetworkTarget::Image;
    OpSetId op_set = OpSetId::O2D;
    StemKind stem = StemKind::Lowres;
    index_t K = 2;            // normal cells per stage
    index_t C1 = 48;          // stem output channels
    index_t C2 = 64;          // first-stage cell output channels
    index_t n_int = 4;
    index_t k = 2;
    index_t num_classes = 10;
    index_t in_channels = 3;

    bool video() const { return target == NetworkTarget::Video; }

    void validate() const {
        if (K < 1) throw ConfigError("plan: K must be >= 1");
        if (C1 < 1 || C2 < 1) throw ConfigError("plan: channel counts must be >= 1");
        if (n_int < 1) throw ConfigError("plan: n_int must be >= 1");
        if (C2 % n_int != 0)
            throw ConfigError("plan: C2 = " + std::to_string(C2) + " not divisible by n_int = " +
                              std::to_string(n_int));
        if (num_classes < 2) throw ConfigError("plan: need at least two classes");
        if (stem == StemKind::Highres && C1 % 2 != 0)
            throw ConfigError("plan: highres stem needs even C1");
        if (video() != (stem == StemKind::Video))
            throw ConfigError("plan: video targets use the video stem and image targets do not");
    }
};

// Distinct cell types of the plan, in arch-list order.
inline std::vector<CellType> plan_cell_types(const NetworkPlan& p) {
    if (p.target == NetworkTarget::Image) return {CellType::Normal, CellType::Reduction};
    return {CellType::Normal, CellType::STReduction, CellType::SReduction};
}

// The full cell sequence.
inline std::vector<CellType> plan_layout(const NetworkPlan& p) {
    std::vector<CellType> seq;
    auto stage = [&] {
        for (index_t i = 0; i < p.K; ++i) seq.push_back(CellType::Normal);
    };
    if (p.target == NetworkTarget::Image) {
        stage();
        seq.push_back(CellType::Reduction);
        stage();
        seq.push_back(CellType::Reduction);
        stage();
    } else {
        stage();
        seq.push_back(CellType::STReduction);
        stage();
        seq.push_back(CellType::STReduction);
        stage();
        seq.push_back(CellType::SReduction);
        stage();
    }
    return seq;
}

// Channel/stride bookkeeping for one cell position.
struct CellSlot {
    CellType type = CellType::Normal;
    index_t arch_idx = 0;   // into plan_cell_types(p)
    index_t node_ch = 0;    // channels of each intermediate node
    index_t out_ch = 0;     // n_int * node_ch
    index_t in0_ch = 0, in1_ch = 0;
    Stride pre0_stride;     // aligns the skip input when the previous cell reduced
};

inline index_t stem_out_channels(const NetworkPlan& p) { return p.C1; }

inline std::vector<CellSlot> plan_slots(const NetworkPlan& p) {
    p.validate();
    const auto types = plan_cell_types(p);
    auto arch_of = [&](CellType t) {
        for (std::size_t i = 0; i < types.size(); ++i)
            if (types[i] == t) return static_cast<index_t>(i);
        throw Error("plan_slots: type not in plan");
    };
    std::vector<CellSlot> slots;
    index_t mult = 1;
    index_t in0 = stem_out_channels(p), in1 = stem_out_channels(p);
    Stride carry;  // reduction stride of the previous cell
    for (CellType t : plan_layout(p)) {
        if (t != CellType::Normal) mult *= 2;
        CellSlot s;
        s.type = t;
        s.arch_idx = arch_of(t);
        s.node_ch = (p.C2 / p.n_int) * mult;
        s.out_ch = s.node_ch * p.n_int;
        s.in0_ch = in0;
        s.in1_ch = in1;
        s.pre0_stride = carry;
        carry = reduction_stride(t);
        in0 = in1;
        in1 = s.out_ch;
        slots.push_back(s);
    }
    return slots;
}

// ---------------------------------------------------------------------------
// Stems
// ---------------------------------------------------------------------------

template <typename S>
struct Stem {
    StemKind kind = StemKind::Lowres;
    Tensor<S> w0;  // dense conv weights (C_out, C_in, 1, 3, 3)
    BatchNormState<S> bn0;
    Tensor<S> w1;  // highres only
    BatchNormState<S> bn1;

    Tensor<S> forward(const Tensor<S>& x, bool training) const {
        switch (kind) {
            case StemKind::Lowres: {
                Tensor<S> h = conv_dense(x, w0, ConvGeom{1, 3, 3, 1, 1, 1, 1, 1, 1});
                return batch_norm(h, bn0.gamma, bn0.beta, bn0.running_mean, bn0.running_var, training);
            }
            case StemKind::Highres: {
                Tensor<S> h = conv_dense(x, w0, ConvGeom{1, 3, 3, 1, 2, 2, 1, 1, 1});
                h = batch_norm(h, bn0.gamma, bn0.beta, bn0.running_mean, bn0.running_var, training);
                h = conv_dense(relu(h), w1, ConvGeom{1, 3, 3, 1, 2, 2, 1, 1, 1});
                return batch_norm(h, bn1.gamma, bn1.beta, bn1.running_mean, bn1.running_var, training);
            }
            case StemKind::Video: {
                Tensor<S> h = conv_dense(x, w0, ConvGeom{1, 3, 3, 1, 2, 2, 1, 1, 1});
                h = batch_norm(h, bn0.gamma, bn0.beta, bn0.running_mean, bn0.running_var, training);
                return max_pool(h, ConvGeom{1, 3, 3, 1, 2, 2, 1, 1, 1});
            }
        }
        throw Error("unreachable");
    }

    std::vector<ParamRef<S>> params() const {
        std::vector<ParamRef<S>> out;
        auto bn_params = [&](const BatchNormState<S>& bn, const std::string& tag) {
            out.push_back({tag + ".gamma", bn.gamma, true});
            out.push_back({tag + ".beta", bn.beta, true});
            out.push_back({tag + ".rmean", bn.running_mean, false});
            out.push_back({tag + ".rvar", bn.running_var, false});
        };
        out.push_back({"stem.w0", w0, true});
        bn_params(bn0, "stem.bn0");
        if (kind == StemKind::Highres) {
            out.push_back({"stem.w1", w1, true});
            bn_params(bn1, "stem.bn1");
        }
        return out;
    }
};

template <typename S>
Stem<S> build_stem(const NetworkPlan& p, std::uint64_t seed) {
    Stem<S> st;
    st.kind = p.stem;
    std::mt19937_64 rng(mix64(seed));
    auto dense = [&](index_t co, index_t ci) {
        Tensor<S> w = Tensor<S>::zeros({co, ci, 1, 3, 3}, true);
        detail::init_normal(w, ci * 9, rng);
        return w;
    };
    if (p.stem == StemKind::Highres) {
        st.w0 = dense(p.C1 / 2, p.in_channels);
        st.bn0 = BatchNormState<S>::make(p.C1 / 2);
        st.w1 = dense(p.C1, p.C1 / 2);
        st.bn1 = BatchNormState<S>::make(p.C1);
    } else {
        st.w0 = dense(p.C1, p.in_channels);
        st.bn0 = BatchNormState<S>::make(p.C1);
    }
    return st;
}

using Extent = std::array<index_t, 3>;  // (T, H, W)

inline index_t extent_voxels(const Extent& e) { return e[0] * e[1] * e[2]; }

inline Extent apply_stride(const Extent& e, const Stride& s) {
    return {same_out_extent(e[0], s.t), same_out_extent(e[1], s.h), same_out_extent(e[2], s.w)};
}

inline Extent stem_out_extent(const NetworkPlan& p, const Extent& in) {
    switch (p.stem) {
        case StemKind::Lowres: return in;
        case StemKind::Highres:
            return apply_stride(apply_stride(in, Stride{1, 2, 2}), Stride{1, 2, 2});
        case StemKind::Video:
            return apply_stride(apply_stride(in, Stride{1, 2, 2}), Stride{1, 2, 2});
    }
    throw Error("unreachable");
}

// Learnable parameters in the stem (conv weights + batch-norm affine).
inline index_t stem_learnable_params(const NetworkPlan& p) {
    if (p.stem == StemKind::Highres)
        return (p.C1 / 2) * p.in_channels * 9 + 2 * (p.C1 / 2) + p.C1 * (p.C1 / 2) * 9 + 2 * p.C1;
    return p.C1 * p.in_channels * 9 + 2 * p.C1;
}

// Multiplies in one stem forward, per sample.
inline index_t stem_macs(const NetworkPlan& p, const Extent& in) {
    if (p.stem == StemKind::Highres) {
        const Extent e1 = apply_stride(in, Stride{1, 2, 2});
        const Extent e2 = apply_stride(e1, Stride{1, 2, 2});
        return (p.C1 / 2) * p.in_channels * 9 * extent_voxels(e1) +
               p.C1 * (p.C1 / 2) * 9 * extent_voxels(e2);
    }
    const Extent e = p.stem == StemKind::Video ? apply_stride(in, Stride{1, 2, 2}) : in;
    return p.C1 * p.in_channels * 9 * extent_voxels(e);
}

// ---------------------------------------------------------------------------
// Multiply counts
// ---------------------------------------------------------------------------

// Multiplies of one operation producing the given output extent, per sample.
// Pooling, activation, and normalization multiplies are not counted.
inline index_t operation_macs(const OperationSpec& spec, const Stride& stride, index_t C,
                              const Extent& out) {
    const index_t vox = extent_voxels(out);
    switch (spec.kind) {
        case OpKind::Identity: return stride.unit() ? 0 : C * C * vox;
        case OpKind::MaxPool:
        case OpKind::AvgPool: return 0;
        case OpKind::SepConv:
            return spec.applications() * (C * spec.ks * spec.ks + C * C) * vox;
        case OpKind::SepConv3d:
            return spec.applications() * (C * spec.ks * spec.ks + C * spec.kt + C * C) * vox;
        case OpKind::ChannelScale:
        case OpKind::ChannelBias: return C * C;
    }
    throw Error("unreachable");
}

// Multiplies of one forward pass (per sample) of the search network in its
// current discretization state. Relaxed edges pay for every live candidate;
// fixed edges pay for the surviving operation; removed edges are free.
template <typename S>
index_t search_network_macs(const NetworkPlan& plan, const std::vector<CellArch<S>>& arches,
                            const Shape& sample) {
    if (sample.size() != 4) throw ShapeError("search_network_macs: sample shape must be (C,T,H,W)");
    Extent ext{sample[1], sample[2], sample[3]};
    Extent e1 = stem_out_extent(plan, ext);
    index_t total = stem_macs(plan, ext);
    const auto slots = plan_slots(plan);
    for (const CellSlot& slot : slots) {
        const Extent in_ext = e1;
        const Extent out_ext = apply_stride(in_ext, reduction_stride(slot.type));
        total += slot.in0_ch * slot.node_ch * extent_voxels(in_ext);  // pre0 (strided to in_ext)
        total += slot.in1_ch * slot.node_ch * extent_voxels(in_ext);  // pre1
        const CellArch<S>& arch = arches.at(static_cast<std::size_t>(slot.arch_idx));
        for (const auto& e : arch.edges) {
            if (e.state == EdgeState::Removed) continue;
            if (e.state == EdgeState::EdgeFixed) {
                total += operation_macs(e.fixed_spec(), e.stride, slot.node_ch, out_ext);
            } else {
                for (const auto& spec : e.op_list)
                    total += operation_macs(spec, e.stride, slot.node_ch, out_ext);
            }
        }
        e1 = out_ext;
    }
    total += slots.back().out_ch * plan.num_classes;  // classifier
    return total;
}

// Per-iteration forward multiplies over a whole search run: entry t is the
// cost of the forward at iteration t, i.e. with every discretization from
// iterations < t applied. `arches` must be in the fresh (t = 0) state.
template <typename S>
std::vector<index_t> mac_trajectory(const NetworkPlan& plan, std::vector<CellArch<S>> arches,
                                    const std::vector<DiscRecord>& log, index_t T,
                                    const Shape& sample) {
    std::vector<index_t> out;
    std::size_t next = 0;
    for (index_t t = 0; t < T; ++t) {
        while (next < log.size() && log[next].t < t) {
            replay_log(std::vector<DiscRecord>{log[next]}, arches, DiscHook<S>{});
            ++next;
        }
        out.push_back(search_network_macs(plan, arches, sample));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Search network
// ---------------------------------------------------------------------------

template <typename S>
struct SearchNetwork {
    NetworkPlan plan;
    std::vector<CellArch<S>> arches;     // one per cell type; alpha/beta shared
    std::vector<CellSlot> slots;
    std::vector<CellInstance<S>> cells;  // one per layout position
    Stem<S> stem;
    Tensor<S> fc_w, fc_b;

    Tensor<S> forward(const Tensor<S>& x, bool training) {
        if (x.dim() != 5) throw ShapeError("network: expected (N,C,T,H,W), got " + shape_str(x.shape()));
        Tensor<S> s = stem.forward(x, training);
        Tensor<S> s0 = s, s1 = s;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            Tensor<S> out = cell_forward(arches[static_cast<std::size_t>(slots[i].arch_idx)], cells[i],
                                         s0, s1, training);
            s0 = s1;
            s1 = out;
        }
        return linear(global_avg_pool(s1), fc_w, fc_b);
    }

    std::vector<ParamRef<S>> weight_param_refs() const {
        std::vector<ParamRef<S>> out = stem.params();
        for (std::size_t i = 0; i < cells.size(); ++i) {
            auto ps = cells[i].params("cell" + std::to_string(i));
            out.insert(out.end(), ps.begin(), ps.end());
        }
        out.push_back({"fc.w", fc_w, true});
        out.push_back({"fc.b", fc_b, true});
        return out;
    }

    std::vector<Tensor<S>> weight_params() const {
        std::vector<Tensor<S>> out;
        for (const auto& p : weight_param_refs())
            if (p.learnable) out.push_back(p.tensor);
        return out;
    }

    std::vector<ParamRef<S>> arch_param_refs() const {
        std::vector<ParamRef<S>> out;
        for (const auto& a : arches) {
            auto ps = a.arch_params();
            out.insert(out.end(), ps.begin(), ps.end());
        }
        return out;
    }

    std::vector<Tensor<S>> arch_params() const {
        std::vector<Tensor<S>> out;
        for (const auto& p : arch_param_refs()) out.push_back(p.tensor);
        return out;
    }

    // Mirror one discretization event into every affected repeat's weights.
    void on_event(const DiscEvent& ev) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (slots[i].arch_idx != ev.arch_index) continue;
            if (ev.is_edge) {
                cells[i].collapse_edge(ev.edge_index, ev.winner_live);
            } else {
                for (index_t e : ev.removed) cells[i].drop_edge(e);
            }
        }
    }

    DiscHook<S> hook() {
        return [this](const DiscEvent& ev) { this->on_event(ev); };
    }
};

template <typename S>
SearchNetwork<S> build_search_network(const NetworkPlan& plan, std::uint64_t seed) {
    plan.validate();
    SearchNetwork<S> net;
    net.plan = plan;
    net.slots = plan_slots(plan);
    for (CellType t : plan_cell_types(plan))
        net.arches.push_back(make_cell_arch<S>(t, plan.op_set, plan.video(), plan.n_int, plan.k));
    net.stem = build_stem<S>(plan, derive_seed(seed, 0));
    std::uint64_t stream = 1;
    for (const CellSlot& s : net.slots)
        net.cells.push_back(build_cell_instance<S>(net.arches[static_cast<std::size_t>(s.arch_idx)],
                                                   s.node_ch, s.in0_ch, s.in1_ch, s.pre0_stride,
                                                   derive_seed(seed, stream++)));
    const index_t c_last = net.slots.back().out_ch;
    net.fc_w = Tensor<S>::zeros({plan.num_classes, c_last}, true);
    std::mt19937_64 rng(mix64(derive_seed(seed, stream++)));
    detail::init_normal(net.fc_w, c_last, rng);
    net.fc_b = Tensor<S>::zeros({plan.num_classes}, true);
    return net;
}

// Genotype of a fully discretized search network.
template <typename S>
Genotype extract_genotype(const SearchNetwork<S>& net, std::uint64_t seed,
                          const std::string& schedule) {
    Genotype g;
    g.op_set = opset_name(net.plan.op_set);
    g.n_int = net.plan.n_int;
    g.k = net.plan.k;
    g.seed = seed;
    g.schedule = schedule;
    for (const auto& a : net.arches) g.cells[cell_type_name(a.type)] = extract_genotype_cell(a);
    g.validate();
    return g;
}

// ---------------------------------------------------------------------------
// Evaluation network
// ---------------------------------------------------------------------------

template <typename S>
struct EvalNetwork {
    NetworkPlan plan;
    std::vector<CellSlot> slots;
    std::vector<DiscreteCell<S>> cells;
    Stem<S> stem;
    Tensor<S> fc_w, fc_b;

    Tensor<S> forward(const Tensor<S>& x, bool training) const {
        if (x.dim() != 5) throw ShapeError("network: expected (N,C,T,H,W), got " + shape_str(x.shape()));
        Tensor<S> s = stem.forward(x, training);
        Tensor<S> s0 = s, s1 = s;
        for (const auto& cell : cells) {
            Tensor<S> out = cell.forward(s0, s1, training);
            s0 = s1;
            s1 = out;
        }
        return linear(global_avg_pool(s1), fc_w, fc_b);
    }

    std::vector<ParamRef<S>> param_refs() const {
        std::vector<ParamRef<S>> out = stem.params();
        for (std::size_t i = 0; i < cells.size(); ++i) {
            auto ps = cells[i].params("cell" + std::to_string(i));
            out.insert(out.end(), ps.begin(), ps.end());
        }
        out.push_back({"fc.w", fc_w, true});
        out.push_back({"fc.b", fc_b, true});
        return out;
    }

    std::vector<Tensor<S>> learnable_params() const {
        std::vector<Tensor<S>> out;
        for (const auto& p : param_refs())
            if (p.learnable) out.push_back(p.tensor);
        return out;
    }

    index_t learnable_count() const {
        index_t n = 0;
        for (const auto& p : param_refs())
            if (p.learnable) n += p.tensor.size();
        return n;
    }
};

template <typename S>
EvalNetwork<S> build_eval_network(const NetworkPlan& plan, const Genotype& g, std::uint64_t seed) {
    plan.validate();
    g.validate();
    if (parse_opset(g.op_set) != plan.op_set)
        throw ConfigError("eval network: genotype op set '" + g.op_set + "' != plan op set '" +
                          opset_name(plan.op_set) + "'");
    if (g.n_int != plan.n_int || g.k != plan.k)
        throw ConfigError("eval network: genotype n_int/k disagree with the plan");
    EvalNetwork<S> net;
    net.plan = plan;
    net.slots = plan_slots(plan);
    net.stem = build_stem<S>(plan, derive_seed(seed, 0));
    std::uint64_t stream = 1;
    for (const CellSlot& s : net.slots) {
        const std::string name = cell_type_name(s.type);
        auto it = g.cells.find(name);
        if (it == g.cells.end())
            throw ConfigError("eval network: genotype lacks a '" + name + "' cell");
        net.cells.push_back(build_discrete_cell<S>(it->second, s.type, plan.op_set, plan.video(),
                                                   s.node_ch, s.in0_ch, s.in1_ch, s.pre0_stride,
                                                   derive_seed(seed, stream++)));
    }
    const index_t c_last = net.slots.back().out_ch;
    net.fc_w = Tensor<S>::zeros({plan.num_classes, c_last}, true);
    std::mt19937_64 rng(mix64(derive_seed(seed, stream++)));
    detail::init_normal(net.fc_w, c_last, rng);
    net.fc_b = Tensor<S>::zeros({plan.num_classes}, true);
    return net;
}

// Discrete network sharing the surviving weights of a fully discretized
// search network (no re-initialization; forwards agree bit for bit).
template <typename S>
EvalNetwork<S> adopt_eval_network(const SearchNetwork<S>& sn) {
    EvalNetwork<S> en;
    en.plan = sn.plan;
    en.slots = sn.slots;
    en.stem = sn.stem;
    for (std::size_t i = 0; i < sn.cells.size(); ++i)
        en.cells.push_back(
            adopt_discrete_cell(sn.arches[static_cast<std::size_t>(sn.slots[i].arch_idx)], sn.cells[i]));
    en.fc_w = sn.fc_w;
    en.fc_b = sn.fc_b;
    return en;
}

// Closed-form learnable parameter count of the evaluation network built from
// a genotype (convolution kernels, batch-norm affine pairs, classifier).
inline index_t count_genotype_params(const NetworkPlan& plan, const Genotype& g) {
    plan.validate();
    g.validate();
    index_t total = stem_learnable_params(plan);
    for (const CellSlot& s : plan_slots(plan)) {
        total += s.in0_ch * s.node_ch + 2 * s.node_ch;  // pre0
        total += s.in1_ch * s.node_ch + 2 * s.node_ch;  // pre1
        const GenotypeCell& cell = g.cells.at(cell_type_name(s.type));
        for (const auto& pairs : cell.nodes)
            for (const auto& p : pairs)
                total += param_count(spec_by_id(plan.op_set, plan.video(), p.op_id),
                                     edge_stride(s.type, p.src), s.node_ch);
    }
    total += plan_slots(plan).back().out_ch * plan.num_classes + plan.num_classes;
    return total;
}

// ---------------------------------------------------------------------------
// Discrete-network training / scoring
// ---------------------------------------------------------------------------

template <typename S>
double top1_accuracy(const Tensor<S>& logits, const std::vector<int>& labels) {
    const index_t n = logits.shape()[0], k = logits.shape()[1];
    if (n != static_cast<index_t>(labels.size())) throw ShapeError("accuracy: label count mismatch");
    auto d = logits.data();
    index_t hits = 0;
    for (index_t i = 0; i < n; ++i) {
        index_t best = 0;
        for (index_t j = 1; j < k; ++j)
            if (d[i * k + j] > d[i * k + best]) best = j;
        if (best == labels[static_cast<std::size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

struct TrainEvalConfig {
    index_t epochs = 20;
    index_t batch = 64;
    double lr = 0.025;
    double momentum = 0.9;
    double weight_decay = 3e-4;
    AugmentSpec aug;
    std::uint64_t seed = 1;
    index_t workers = 1;
};

template <typename S>
struct TrainEvalResult {
    std::vector<double> epoch_loss;
    double test_accuracy = 0.0;
    index_t params = 0;
    index_t steps = 0;
};

// Accuracy of a trained network on the given samples (eval-mode forward,
// deterministic eval augmentation). Optionally shuffles the frames of every
// clip after augmentation, to probe order sensitivity.
template <typename S>
double evaluate_accuracy(const EvalNetwork<S>& net, const Dataset<S>& ds,
                         const std::vector<index_t>& indices, const AugmentSpec& aug, index_t batch,
                         bool shuffle = false, std::uint64_t shuffle_seed = 0) {
    typename Tape<S>::Pause pause;
    double hits = 0, total = 0;
    std::mt19937_64 srng(mix64(shuffle_seed));
    for (std::size_t at = 0; at < indices.size(); at += static_cast<std::size_t>(batch)) {
        std::vector<index_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(at),
                                   indices.begin() +
                                       static_cast<std::ptrdiff_t>(std::min(
                                           at + static_cast<std::size_t>(batch), indices.size())));
        std::vector<Tensor<S>> samples;
        std::vector<int> labels;
        for (index_t idx : chunk) {
            Tensor<S> s = augment_sample(ds.sample(idx), ds.kind, Phase::Eval, aug, 0);
            if (shuffle) s = shuffle_frames(s, srng);
            samples.push_back(std::move(s));
            labels.push_back(ds.labels[static_cast<std::size_t>(idx)]);
        }
        const Shape& ss = samples[0].shape();
        Tensor<S> xb = Tensor<S>::zeros(
            {static_cast<index_t>(samples.size()), ss[0], ss[1], ss[2], ss[3]});
        for (std::size_t i = 0; i < samples.size(); ++i)
            std::copy(samples[i].data().begin(), samples[i].data().end(),
                      xb.data_mut().begin() + static_cast<index_t>(i) * numel(ss));
        Tensor<S> logits = net.forward(xb, false);
        hits += top1_accuracy(logits, labels) * static_cast<double>(labels.size());
        total += static_cast<double>(labels.size());
    }
    return hits / total;
}

// Train a discrete architecture from scratch on the dataset's train split
// and score top-1 accuracy on its test split, returning the trained network
// as well (for order-sensitivity probes on the same weights). Deterministic
// for a fixed config.
template <typename S>
std::pair<TrainEvalResult<S>, EvalNetwork<S>> train_eval_net(const NetworkPlan& plan,
                                                             const Genotype& g, const Dataset<S>& ds,
                                                             const TrainEvalConfig& cfg) {
    EvalNetwork<S> net = build_eval_network<S>(plan, g, derive_seed(cfg.seed, 0));
    TrainEvalResult<S> res;
    res.params = net.learnable_count();
    auto params = net.learnable_params();
    SgdMomentum<S> opt(static_cast<S>(cfg.momentum), static_cast<S>(cfg.weight_decay));
    auto train_idx = ds.train_indices();
    const index_t per_epoch =
        (static_cast<index_t>(train_idx.size()) + cfg.batch - 1) / cfg.batch;
    const index_t total_iters = cfg.epochs * per_epoch;
    index_t iter = 0;
    for (index_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(mix64(derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(epoch))));
        std::shuffle(train_idx.begin(), train_idx.end(), rng);
        double loss_sum = 0;
        index_t batches = 0;
        for (std::size_t at = 0; at < train_idx.size(); at += static_cast<std::size_t>(cfg.batch)) {
            std::vector<index_t> chunk(
                train_idx.begin() + static_cast<std::ptrdiff_t>(at),
                train_idx.begin() + static_cast<std::ptrdiff_t>(std::min(
                                        at + static_cast<std::size_t>(cfg.batch), train_idx.size())));
            auto [xb, yb] = make_batch(ds, chunk, Phase::Train, cfg.aug,
                                       derive_seed(cfg.seed, 5000 + static_cast<std::uint64_t>(iter)),
                                       cfg.workers);
            Tape<S> tape;
            Tensor<S> loss = cross_entropy_logits(net.forward(xb, true), yb);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
                throw DivergenceError("training diverged at iteration " + std::to_string(iter) +
                                      " (loss not finite)");
            tape.backward(loss);
            opt.step(params, static_cast<S>(cosine_lr(cfg.lr, static_cast<index_t>(iter), total_iters)));
            for (auto& p : params) p.zero_grad();
            loss_sum += lv;
            ++batches;
            ++iter;
        }
        res.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }
    res.steps = iter;
    res.test_accuracy = evaluate_accuracy(net, ds, ds.test_indices(), cfg.aug, cfg.batch);
    return {std::move(res), std::move(net)};
}

template <typename S>
TrainEvalResult<S> train_eval(const NetworkPlan& plan, const Genotype& g, const Dataset<S>& ds,
                              const TrainEvalConfig& cfg) {
    return train_eval_net<S>(plan, g, ds, cfg).first;
}

}  // namespace sdas
