// Relaxed / partially-discrete cell DAG.
//
// A cell has two input nodes (0, 1) and n_int intermediate nodes (2 ..
// n_int+1); every intermediate node starts with one candidate edge from each
// earlier node. Architecture state (per-edge alpha/beta, edge and node
// discretization) lives in CellArch and is shared by every repeat of that
// cell type in a network; operation weights live in CellInstance, one per
// repeat.
//
// Edge forward follows the mixing rule: a relaxed edge computes
// sigmoid(beta) * sum_o softmax(alpha)_o * o(x); once its operation is fixed
// it computes sigmoid(beta) * o*(x); once its destination node is fixed the
// beta factor disappears and the edge contributes o*(x) to the plain node
// sum. Node output is the unweighted sum of its live incoming edges; cell
// output concatenates all intermediate nodes along channels.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sdas/common.hpp"
#include "sdas/op_catalog.hpp"
#include "sdas/tensor.hpp"

namespace sdas {

enum class CellType { Normal, Reduction, SReduction, STReduction };

inline std::string cell_type_name(CellType t) {
    switch (t) {
        case CellType::Normal: return "normal";
        case CellType::Reduction: return "reduction";
        case CellType::SReduction: return "s_reduction";
        case CellType::STReduction: return "st_reduction";
    }
    throw ConfigError("unknown cell type");
}

inline CellType parse_cell_type(const std::string& s) {
    if (s == "normal") return CellType::Normal;
    if (s == "reduction") return CellType::Reduction;
    if (s == "s_reduction") return CellType::SReduction;
    if (s == "st_reduction") return CellType::STReduction;
    throw ConfigError("unknown cell type '" + s + "'");
}

// Stride carried by edges leaving the input nodes of a reduction-type cell.
inline Stride reduction_stride(CellType t) {
    switch (t) {
        case CellType::Normal: return {};
        case CellType::Reduction:
        case CellType::SReduction: return {1, 2, 2};
        case CellType::STReduction: return {2, 2, 2};
    }
    throw ConfigError("unknown cell type");
}

inline Stride edge_stride(CellType t, index_t src) {
    return src < 2 ? reduction_stride(t) : Stride{};
}

enum class EdgeState { Relaxed, EdgeFixed, Removed };
enum class NodeState { Relaxed, NodeFixed };

template <typename S>
struct ArchEdge {
    index_t src = 0, dst = 0;  // dst >= 2 (intermediate), src < dst
    Stride stride;
    std::vector<OperationSpec> op_list;  // candidates on this edge
    EdgeState state = EdgeState::Relaxed;
    Tensor<S> alpha;          // (|op_list|); defined while Relaxed
    Tensor<S> beta;           // (1); defined until dst node is fixed
    index_t fixed_op = -1;    // index into original op_list once EdgeFixed

    const OperationSpec& fixed_spec() const {
        if (state != EdgeState::EdgeFixed) throw Error("edge has no fixed operation");
        return op_list[static_cast<std::size_t>(fixed_op)];
    }
};

struct ArchNode {
    NodeState state = NodeState::Relaxed;
    std::vector<index_t> retained;  // kept srcs, ascending, once NodeFixed
};

template <typename S>
struct CellArch {
    CellType type = CellType::Normal;
    OpSetId op_set = OpSetId::O2D;
    bool video = false;
    index_t n_int = 4;
    index_t k = 2;
    std::vector<ArchEdge<S>> edges;  // ordered by (dst, src)
    std::vector<ArchNode> nodes;     // one per intermediate

    index_t num_nodes() const { return n_int + 2; }

    index_t edge_index(index_t src, index_t dst) const {
        for (std::size_t i = 0; i < edges.size(); ++i)
            if (edges[i].src == src && edges[i].dst == dst) return static_cast<index_t>(i);
        throw Error("no edge " + std::to_string(src) + "->" + std::to_string(dst));
    }

    bool fully_discrete() const {
        for (const auto& nd : nodes)
            if (nd.state != NodeState::NodeFixed) return false;
        return true;
    }

    // All architecture parameters currently live, in deterministic order.
    std::vector<ParamRef<S>> arch_params() const {
        std::vector<ParamRef<S>> out;
        for (const auto& e : edges) {
            const std::string tag =
                cell_type_name(type) + ".e" + std::to_string(e.src) + "_" + std::to_string(e.dst);
            if (e.alpha.defined()) out.push_back({tag + ".alpha", e.alpha, true});
            if (e.beta.defined()) out.push_back({tag + ".beta", e.beta, true});
        }
        return out;
    }
};

// Fresh fully-relaxed arch: every intermediate node connected to all earlier
// nodes, alpha and beta initialized to zero (uniform mixture, importance 0.5).
template <typename S>
CellArch<S> make_cell_arch(CellType type, OpSetId op_set, bool video, index_t n_int, index_t k) {
    if (n_int < 1) throw ConfigError("cell: need at least one intermediate node");
    // The first intermediate node has exactly two predecessors, so more than
    // two retained edges per node can never be satisfied.
    if (k < 1 || k > 2) throw ConfigError("cell: k must be 1 or 2");
    CellArch<S> arch;
    arch.type = type;
    arch.op_set = op_set;
    arch.video = video;
    arch.n_int = n_int;
    arch.k = k;
    arch.nodes.resize(static_cast<std::size_t>(n_int));
    const auto full = catalog(op_set, video);
    for (index_t i = 0; i < n_int; ++i) {
        const index_t dst = i + 2;
        for (index_t src = 0; src < dst; ++src) {
            ArchEdge<S> e;
            e.src = src;
            e.dst = dst;
            e.stride = edge_stride(type, src);
            for (const auto& spec : full)
                if (e.stride.unit() || stride_capable(spec)) e.op_list.push_back(spec);
            e.alpha = Tensor<S>::zeros({static_cast<index_t>(e.op_list.size())}, true);
            e.beta = Tensor<S>::zeros({1}, true);
            arch.edges.push_back(std::move(e));
        }
    }
    return arch;
}

// ---------------------------------------------------------------------------
// Per-repeat weights
// ---------------------------------------------------------------------------

// ReLU -> 1x1 conv -> BN projection applied to each cell input.
template <typename S>
struct Preprocessor {
    Tensor<S> w;  // (C, C_in)
    BatchNormState<S> bn;
    Stride stride;

    Tensor<S> forward(const Tensor<S>& x, bool training) const {
        Tensor<S> h = conv_pointwise(relu(x), w, ConvGeom{1, 1, 1, stride.t, stride.h, stride.w});
        return batch_norm(h, bn.gamma, bn.beta, bn.running_mean, bn.running_var, training);
    }

    std::vector<ParamRef<S>> params(const std::string& tag) const {
        return {{tag + ".w", w, true},
                {tag + ".bn.gamma", bn.gamma, true},
                {tag + ".bn.beta", bn.beta, true},
                {tag + ".bn.rmean", bn.running_mean, false},
                {tag + ".bn.rvar", bn.running_var, false}};
    }
};

template <typename S>
Preprocessor<S> make_preprocessor(index_t c_in, index_t c_out, Stride stride, std::uint64_t seed) {
    Preprocessor<S> p;
    p.stride = stride;
    p.w = Tensor<S>::zeros({c_out, c_in}, true);
    std::mt19937_64 rng(seed);
    detail::init_normal(p.w, c_in, rng);
    p.bn = BatchNormState<S>::make(c_out);
    return p;
}

// Operation weights for one repeat of a cell. edge_ops[i] is aligned with
// arch.edges[i].op_list while relaxed and collapses with it on
// discretization; removed edges hold no instances.
template <typename S>
struct CellInstance {
    index_t channels = 0;
    Preprocessor<S> pre0, pre1;
    std::vector<std::vector<OperationInstance<S>>> edge_ops;

    // Mirror an edge discretization: keep only the winning instance.
    // live_index refers to the edge's current (live) candidate list.
    void collapse_edge(index_t edge_idx, index_t live_index) {
        auto& ops = edge_ops[static_cast<std::size_t>(edge_idx)];
        OperationInstance<S> winner = std::move(ops[static_cast<std::size_t>(live_index)]);
        ops.clear();
        ops.push_back(std::move(winner));
    }

    void drop_edge(index_t edge_idx) { edge_ops[static_cast<std::size_t>(edge_idx)].clear(); }

    std::vector<ParamRef<S>> params(const std::string& tag) const {
        std::vector<ParamRef<S>> out = pre0.params(tag + ".pre0");
        auto p1 = pre1.params(tag + ".pre1");
        out.insert(out.end(), p1.begin(), p1.end());
        for (std::size_t e = 0; e < edge_ops.size(); ++e)
            for (std::size_t o = 0; o < edge_ops[e].size(); ++o)
                for (auto& pr : edge_ops[e][o].params())
                    out.push_back({tag + ".edge" + std::to_string(e) + ".op" + std::to_string(o) + "." +
                                       pr.name,
                                   pr.tensor, pr.learnable});
        return out;
    }
};

// Build weights for one repeat. The instance matches the arch's current
// state: relaxed edges get one OperationInstance per live candidate, fixed
// edges exactly one, removed edges none.
template <typename S>
CellInstance<S> build_cell_instance(const CellArch<S>& arch, index_t channels, index_t c_prev_prev,
                                    index_t c_prev, Stride skip_stride, std::uint64_t seed) {
    CellInstance<S> inst;
    inst.channels = channels;
    std::uint64_t stream = 0;
    inst.pre0 = make_preprocessor<S>(c_prev_prev, channels, skip_stride, derive_seed(seed, stream++));
    inst.pre1 = make_preprocessor<S>(c_prev, channels, Stride{}, derive_seed(seed, stream++));
    for (const auto& e : arch.edges) {
        std::vector<OperationInstance<S>> ops;
        if (e.state == EdgeState::Relaxed) {
            for (const auto& spec : e.op_list)
                ops.push_back(build_operation<S>(spec, e.stride, channels, derive_seed(seed, stream++)));
        } else if (e.state == EdgeState::EdgeFixed) {
            ops.push_back(build_operation<S>(e.fixed_spec(), e.stride, channels, derive_seed(seed, stream++)));
        }
        inst.edge_ops.push_back(std::move(ops));
    }
    return inst;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> mixed_edge_forward(const ArchEdge<S>& edge, const std::vector<OperationInstance<S>>& ops,
                             const Tensor<S>& x, bool training) {
    switch (edge.state) {
        case EdgeState::Removed:
            throw Error("mixed_edge_forward: edge " + std::to_string(edge.src) + "->" +
                        std::to_string(edge.dst) + " was removed");
        case EdgeState::Relaxed: {
            if (ops.size() != edge.op_list.size())
                throw Error("mixed_edge_forward: instance/arch candidate count mismatch");
            std::vector<Tensor<S>> outs;
            outs.reserve(ops.size());
            for (const auto& op : ops) outs.push_back(op.forward(x, training));
            Tensor<S> mix = weighted_sum(outs, softmax_vec(edge.alpha));
            return scale(mix, sigmoid(edge.beta));
        }
        case EdgeState::EdgeFixed: {
            Tensor<S> y = ops.at(0).forward(x, training);
            if (edge.beta.defined()) return scale(y, sigmoid(edge.beta));
            return y;  // destination node fixed: plain Eq-1 contribution
        }
    }
    throw Error("unreachable");
}

// Sum of live incoming edges of one intermediate node (0-based node index
// counts intermediates; predecessor states indexed by graph node id).
template <typename S>
Tensor<S> node_forward(const CellArch<S>& arch, const CellInstance<S>& inst, index_t node,
                       const std::vector<Tensor<S>>& states, bool training) {
    Tensor<S> acc;
    const index_t dst = node + 2;
    for (std::size_t ei = 0; ei < arch.edges.size(); ++ei) {
        const auto& e = arch.edges[ei];
        if (e.dst != dst || e.state == EdgeState::Removed) continue;
        Tensor<S> c = mixed_edge_forward(e, inst.edge_ops[ei], states.at(static_cast<std::size_t>(e.src)),
                                         training);
        acc = acc.defined() ? add(acc, c) : c;
    }
    if (!acc.defined())
        throw Error("node_forward: node " + std::to_string(dst) + " has no live incoming edges");
    return acc;
}

template <typename S>
Tensor<S> cell_forward(const CellArch<S>& arch, const CellInstance<S>& inst, const Tensor<S>& prev_prev,
                       const Tensor<S>& prev, bool training) {
    Tensor<S> s0 = inst.pre0.forward(prev_prev, training);
    Tensor<S> s1 = inst.pre1.forward(prev, training);
    if (s0.shape() != s1.shape())
        throw ShapeError("cell_forward: preprocessed inputs disagree: " + shape_str(s0.shape()) +
                         " vs " + shape_str(s1.shape()));
    std::vector<Tensor<S>> states = {s0, s1};
    for (index_t i = 0; i < arch.n_int; ++i)
        states.push_back(node_forward(arch, inst, i, states, training));
    return concat_channels(std::vector<Tensor<S>>(states.begin() + 2, states.end()));
}

}  // namespace sdas
