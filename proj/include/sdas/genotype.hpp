// Genotype: the fully discrete architecture, its JSON serialization, DOT
// export, extraction from a discretized arch, and the plain discrete cell
// used by evaluation networks.
//
// JSON schema:
//   { "meta":  { "op_set": .., "n_int": .., "k": .., "seed": .., "schedule": .. },
//     "cells": { "<type>": { "nodes": [ [ [src, "op_id"], ... k pairs ], ... ],
//                            "concat": [ .. ] }, ... } }
#pragma once

#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "sdas/cell.hpp"
#include "sdas/common.hpp"
#include "sdas/op_catalog.hpp"

namespace sdas {

struct GenotypePair {
    index_t src = 0;
    std::string op_id;
    bool operator==(const GenotypePair&) const = default;
};

struct GenotypeCell {
    std::vector<std::vector<GenotypePair>> nodes;  // one list of k pairs per intermediate
    std::vector<index_t> concat;
    bool operator==(const GenotypeCell&) const = default;
};

struct Genotype {
    std::string op_set = "o2d";
    index_t n_int = 4;
    index_t k = 2;
    std::uint64_t seed = 0;
    std::string schedule = "C";
    std::map<std::string, GenotypeCell> cells;  // keyed by cell type name
    bool operator==(const Genotype&) const = default;

    bool video() const {
        for (const auto& [name, cell] : cells)
            if (name == "s_reduction" || name == "st_reduction") return true;
        return false;
    }

    void validate() const {
        if (cells.empty()) throw ParseError("genotype: no cells");
        const auto set = parse_opset(op_set);
        const bool vid = video();
        for (const auto& [name, cell] : cells) {
            parse_cell_type(name);
            if (static_cast<index_t>(cell.nodes.size()) != n_int)
                throw ParseError("genotype cell '" + name + "': " + std::to_string(cell.nodes.size()) +
                                 " nodes, expected " + std::to_string(n_int));
            for (std::size_t i = 0; i < cell.nodes.size(); ++i) {
                const auto& pairs = cell.nodes[i];
                if (static_cast<index_t>(pairs.size()) != k)
                    throw ParseError("genotype cell '" + name + "' node " + std::to_string(i + 2) +
                                     ": " + std::to_string(pairs.size()) + " pairs, expected " +
                                     std::to_string(k));
                for (const auto& p : pairs) {
                    if (p.src < 0 || p.src >= static_cast<index_t>(i) + 2)
                        throw ParseError("genotype cell '" + name + "' node " + std::to_string(i + 2) +
                                         ": source " + std::to_string(p.src) + " does not precede it");
                    spec_by_id(set, vid, p.op_id);  // throws for unknown ids
                }
            }
            if (cell.concat.empty()) throw ParseError("genotype cell '" + name + "': empty concat");
            for (index_t c : cell.concat)
                if (c < 2 || c >= n_int + 2)
                    throw ParseError("genotype cell '" + name + "': concat index " + std::to_string(c) +
                                     " is not an intermediate node");
        }
    }
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json genotype_to_json(const Genotype& g) {
    nlohmann::json j;
    j["meta"] = {{"op_set", g.op_set},
                 {"n_int", g.n_int},
                 {"k", g.k},
                 {"seed", g.seed},
                 {"schedule", g.schedule}};
    nlohmann::json cells = nlohmann::json::object();
    for (const auto& [name, cell] : g.cells) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& pairs : cell.nodes) {
            nlohmann::json np = nlohmann::json::array();
            for (const auto& p : pairs) np.push_back({p.src, p.op_id});
            nodes.push_back(np);
        }
        cells[name] = {{"nodes", nodes}, {"concat", cell.concat}};
    }
    j["cells"] = cells;
    return j;
}

inline Genotype genotype_from_json(const nlohmann::json& j) {
    Genotype g;
    try {
        const auto& meta = j.at("meta");
        g.op_set = meta.at("op_set").get<std::string>();
        g.n_int = meta.at("n_int").get<index_t>();
        g.k = meta.at("k").get<index_t>();
        g.seed = meta.at("seed").get<std::uint64_t>();
        g.schedule = meta.at("schedule").get<std::string>();
        for (const auto& [name, cell] : j.at("cells").items()) {
            GenotypeCell gc;
            for (const auto& node : cell.at("nodes")) {
                std::vector<GenotypePair> pairs;
                for (const auto& p : node) {
                    if (!p.is_array() || p.size() != 2)
                        throw ParseError("genotype: node pair must be [src, op_id]");
                    pairs.push_back({p.at(0).get<index_t>(), p.at(1).get<std::string>()});
                }
                gc.nodes.push_back(std::move(pairs));
            }
            gc.concat = cell.at("concat").get<std::vector<index_t>>();
            g.cells[name] = std::move(gc);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("genotype: malformed JSON: ") + e.what());
    }
    g.validate();
    return g;
}

inline std::string genotype_to_string(const Genotype& g) { return genotype_to_json(g).dump(2) + "\n"; }

inline Genotype genotype_from_string(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError("genotype: invalid JSON text");
    return genotype_from_json(j);
}

// ---------------------------------------------------------------------------
// DOT export: one digraph per cell; input nodes labeled c_{k-2} / c_{k-1},
// one labeled edge per genotype pair, intermediates feeding a concat sink.
// ---------------------------------------------------------------------------

inline std::string cell_to_dot(const std::string& cell_name, const GenotypeCell& cell) {
    std::ostringstream os;
    os << "digraph " << cell_name << " {\n";
    os << "  rankdir=LR;\n";
    os << "  in0 [label=\"c_{k-2}\", shape=box];\n";
    os << "  in1 [label=\"c_{k-1}\", shape=box];\n";
    for (std::size_t i = 0; i < cell.nodes.size(); ++i)
        os << "  n" << i + 2 << " [label=\"" << i + 2 << "\"];\n";
    os << "  out [label=\"concat\", shape=box];\n";
    auto node_ref = [](index_t id) {
        return id < 2 ? "in" + std::to_string(id) : "n" + std::to_string(id);
    };
    for (std::size_t i = 0; i < cell.nodes.size(); ++i)
        for (const auto& p : cell.nodes[i])
            os << "  " << node_ref(p.src) << " -> n" << i + 2 << " [label=\"" << p.op_id << "\"];\n";
    for (index_t c : cell.concat) os << "  n" << c << " -> out;\n";
    os << "}\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Extraction from a discretized arch
// ---------------------------------------------------------------------------

template <typename S>
GenotypeCell extract_genotype_cell(const CellArch<S>& arch) {
    std::vector<std::string> unresolved;
    for (std::size_t i = 0; i < arch.nodes.size(); ++i)
        if (arch.nodes[i].state != NodeState::NodeFixed)
            unresolved.push_back("node " + std::to_string(i + 2));
    for (const auto& e : arch.edges)
        if (e.state == EdgeState::Relaxed)
            unresolved.push_back("edge " + std::to_string(e.src) + "->" + std::to_string(e.dst));
    if (!unresolved.empty()) {
        std::string msg = "extract_genotype: unresolved items in " + cell_type_name(arch.type) + ":";
        for (const auto& u : unresolved) msg += " " + u;
        throw Error(msg);
    }
    GenotypeCell cell;
    for (index_t i = 0; i < arch.n_int; ++i) {
        std::vector<GenotypePair> pairs;
        for (const auto& e : arch.edges)  // edge order is (dst, src asc)
            if (e.dst == i + 2 && e.state == EdgeState::EdgeFixed)
                pairs.push_back({e.src, e.fixed_spec().id()});
        if (static_cast<index_t>(pairs.size()) != arch.k)
            throw Error("extract_genotype: node " + std::to_string(i + 2) + " kept " +
                        std::to_string(pairs.size()) + " edges, expected " + std::to_string(arch.k));
        cell.nodes.push_back(std::move(pairs));
        cell.concat.push_back(i + 2);
    }
    return cell;
}

// ---------------------------------------------------------------------------
// Discrete cell (evaluation networks): plain node sums, no architecture
// parameters anywhere.
// ---------------------------------------------------------------------------

template <typename S>
struct DiscreteCell {
    struct Pair {
        index_t src = 0;
        OperationInstance<S> op;
    };
    index_t channels = 0;
    Preprocessor<S> pre0, pre1;
    std::vector<std::vector<Pair>> nodes;  // per intermediate, k pairs ordered by src
    std::vector<index_t> concat;

    Tensor<S> forward(const Tensor<S>& prev_prev, const Tensor<S>& prev, bool training) const {
        Tensor<S> s0 = pre0.forward(prev_prev, training);
        Tensor<S> s1 = pre1.forward(prev, training);
        if (s0.shape() != s1.shape())
            throw ShapeError("discrete cell: preprocessed inputs disagree: " + shape_str(s0.shape()) +
                             " vs " + shape_str(s1.shape()));
        std::vector<Tensor<S>> states = {s0, s1};
        for (const auto& pairs : nodes) {
            Tensor<S> acc;
            for (const auto& p : pairs) {
                Tensor<S> c = p.op.forward(states.at(static_cast<std::size_t>(p.src)), training);
                acc = acc.defined() ? add(acc, c) : c;
            }
            states.push_back(acc);
        }
        std::vector<Tensor<S>> outs;
        for (index_t c : concat) outs.push_back(states.at(static_cast<std::size_t>(c)));
        return concat_channels(outs);
    }

    std::vector<ParamRef<S>> params(const std::string& tag) const {
        std::vector<ParamRef<S>> out = pre0.params(tag + ".pre0");
        auto p1 = pre1.params(tag + ".pre1");
        out.insert(out.end(), p1.begin(), p1.end());
        for (std::size_t i = 0; i < nodes.size(); ++i)
            for (std::size_t j = 0; j < nodes[i].size(); ++j)
                for (auto& pr : nodes[i][j].op.params())
                    out.push_back({tag + ".n" + std::to_string(i + 2) + ".p" + std::to_string(j) + "." +
                                       pr.name,
                                   pr.tensor, pr.learnable});
        return out;
    }
};

// Fresh-weight discrete cell from a genotype cell.
template <typename S>
DiscreteCell<S> build_discrete_cell(const GenotypeCell& cell, CellType type, OpSetId op_set, bool video,
                                    index_t channels, index_t c_prev_prev, index_t c_prev,
                                    Stride skip_stride, std::uint64_t seed) {
    DiscreteCell<S> dc;
    dc.channels = channels;
    std::uint64_t stream = 0;
    dc.pre0 = make_preprocessor<S>(c_prev_prev, channels, skip_stride, derive_seed(seed, stream++));
    dc.pre1 = make_preprocessor<S>(c_prev, channels, Stride{}, derive_seed(seed, stream++));
    for (std::size_t i = 0; i < cell.nodes.size(); ++i) {
        std::vector<typename DiscreteCell<S>::Pair> pairs;
        for (const auto& p : cell.nodes[i]) {
            OperationSpec spec = spec_by_id(op_set, video, p.op_id);
            Stride st = edge_stride(type, p.src);
            pairs.push_back({p.src, build_operation<S>(spec, st, channels, derive_seed(seed, stream++))});
        }
        dc.nodes.push_back(std::move(pairs));
    }
    dc.concat = cell.concat;
    return dc;
}

// Discrete cell that adopts the surviving OperationInstances (and
// preprocessors) of a fully discretized search cell, sharing their parameter
// tensors. Forward is then the plain-sum path over the very same weights.
template <typename S>
DiscreteCell<S> adopt_discrete_cell(const CellArch<S>& arch, const CellInstance<S>& inst) {
    if (!arch.fully_discrete()) throw Error("adopt_discrete_cell: arch is not fully discretized");
    DiscreteCell<S> dc;
    dc.channels = inst.channels;
    dc.pre0 = inst.pre0;
    dc.pre1 = inst.pre1;
    for (index_t i = 0; i < arch.n_int; ++i) {
        std::vector<typename DiscreteCell<S>::Pair> pairs;
        for (std::size_t ei = 0; ei < arch.edges.size(); ++ei) {
            const auto& e = arch.edges[ei];
            if (e.dst != i + 2 || e.state != EdgeState::EdgeFixed) continue;
            pairs.push_back({e.src, inst.edge_ops[ei].at(0)});
        }
        dc.nodes.push_back(std::move(pairs));
        dc.concat.push_back(i + 2);
    }
    return dc;
}

}  // namespace sdas
