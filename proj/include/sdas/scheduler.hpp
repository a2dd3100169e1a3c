// Scheduled discretization: the three schedule curves, priority ranking,
// one-step edge/node discretization, the replayable log, and exact counting
// of reachable discrete architectures.
#pragma once

#include <algorithm>
#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "sdas/cell.hpp"
#include "sdas/common.hpp"

namespace sdas {

using BigInt = boost::multiprecision::cpp_int;

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

enum class ScheduleId { A, B, C };

inline std::string schedule_name(ScheduleId id) {
    switch (id) {
        case ScheduleId::A: return "A";
        case ScheduleId::B: return "B";
        case ScheduleId::C: return "C";
    }
    throw ConfigError("unknown schedule");
}

inline ScheduleId parse_schedule(const std::string& s) {
    if (s == "A" || s == "a") return ScheduleId::A;
    if (s == "B" || s == "b") return ScheduleId::B;
    if (s == "C" || s == "c") return ScheduleId::C;
    throw ConfigError("unknown schedule '" + s + "' (expected A, B, or C)");
}

struct Schedule {
    ScheduleId id = ScheduleId::C;
    index_t M = 0;  // total one-step discretization count
    index_t T = 1;  // final iteration
};

// Number of one-step discretizations scheduled by iteration t:
//   A: floor(M * (t/T))          -- linear
//   B: floor(M * (t/T)^4)        -- quartic ramp-up
//   C: floor(M * (1-(1-t/T)^4))  -- quartic ramp-down (front-loaded)
// Evaluated in exact integer arithmetic so the floor never suffers from
// floating-point dust at rational breakpoints.
inline index_t schedule_value(const Schedule& s, index_t t) {
    if (t < 0 || t > s.T)
        throw ConfigError("schedule_value: t=" + std::to_string(t) + " outside [0, " +
                          std::to_string(s.T) + "]");
    const BigInt M = s.M, T = s.T, ti = t;
    BigInt num;
    BigInt den;
    switch (s.id) {
        case ScheduleId::A:
            num = M * ti;
            den = T;
            break;
        case ScheduleId::B:
            num = M * ti * ti * ti * ti;
            den = T * T * T * T;
            break;
        case ScheduleId::C: {
            const BigInt r = T - ti;
            num = M * (T * T * T * T - r * r * r * r);
            den = T * T * T * T;
            break;
        }
    }
    return static_cast<index_t>(num / den);  // floor for non-negative operands
}

// Total one-step count for a set of cell arches: edges plus intermediate
// nodes, summed over cell types.
template <typename S>
index_t total_steps(const std::vector<CellArch<S>>& arches) {
    index_t m = 0;
    for (const auto& a : arches) m += static_cast<index_t>(a.edges.size()) + a.n_int;
    return m;
}

// ---------------------------------------------------------------------------
// Reachable-architecture counting
// ---------------------------------------------------------------------------

// Exact number of distinct final genotypes consistent with the current
// partial state. Per intermediate node: a fixed node contributes the product
// over its kept edges of (1 if the op is fixed, else the candidate count); a
// relaxed node sums that product over every k-subset of its live incoming
// edges -- the k-th elementary symmetric polynomial of the per-edge factors,
// computed by polynomial DP.
template <typename S>
BigInt count_reachable(const std::vector<CellArch<S>>& arches) {
    BigInt total = 1;
    for (const auto& arch : arches) {
        for (index_t i = 0; i < arch.n_int; ++i) {
            const index_t dst = i + 2;
            std::vector<BigInt> factors;
            for (const auto& e : arch.edges) {
                if (e.dst != dst || e.state == EdgeState::Removed) continue;
                factors.push_back(e.state == EdgeState::EdgeFixed
                                      ? BigInt(1)
                                      : BigInt(static_cast<index_t>(e.op_list.size())));
            }
            if (arch.nodes[static_cast<std::size_t>(i)].state == NodeState::NodeFixed) {
                BigInt prod = 1;
                for (const auto& f : factors) prod *= f;
                total *= prod;
            } else {
                // esym[j] after processing a prefix of factors = sum over
                // j-subsets of the prefix of their product.
                std::vector<BigInt> esym(static_cast<std::size_t>(arch.k) + 1, 0);
                esym[0] = 1;
                for (const auto& f : factors)
                    for (index_t j = arch.k; j >= 1; --j)
                        esym[static_cast<std::size_t>(j)] +=
                            esym[static_cast<std::size_t>(j - 1)] * f;
                total *= esym[static_cast<std::size_t>(arch.k)];
            }
        }
    }
    return total;
}

// Scientific rendering of a big integer at `sig` significant figures, e.g.
// 1076746950455072400 -> "1.08e18".
inline std::string scientific_string(const BigInt& v, int sig = 3) {
    std::string digits = v.str();
    if (digits == "0") return "0";
    const int exp10 = static_cast<int>(digits.size()) - 1;
    std::string mant = digits.substr(0, static_cast<std::size_t>(sig) + 1);
    while (static_cast<int>(mant.size()) < sig + 1) mant += '0';
    // Round the sig-digit mantissa by the following digit, with carry.
    bool round_up = mant.back() >= '5';
    mant.pop_back();
    int carry_exp = 0;
    if (round_up) {
        int i = static_cast<int>(mant.size()) - 1;
        while (i >= 0) {
            if (mant[static_cast<std::size_t>(i)] != '9') {
                mant[static_cast<std::size_t>(i)]++;
                break;
            }
            mant[static_cast<std::size_t>(i)] = '0';
            --i;
        }
        if (i < 0) {
            mant.insert(mant.begin(), '1');
            mant.pop_back();
            carry_exp = 1;
        }
    }
    std::string out;
    out += mant[0];
    if (sig > 1) out += "." + mant.substr(1);
    out += "e" + std::to_string(exp10 + carry_exp);
    return out;
}

// ---------------------------------------------------------------------------
// Priorities
// ---------------------------------------------------------------------------

// One discretizable item: a relaxed edge, or a node whose incoming edges are
// all fixed.
struct DiscItem {
    bool is_edge = true;
    index_t arch_index = 0;
    std::string cell;        // cell type name, for ordering and logging
    index_t src = -1;        // -1 for node items
    index_t dst = 0;         // edge destination, or the node id itself
    double priority = 0.0;
};

namespace detail {

inline bool item_before(const DiscItem& a, const DiscItem& b) {
    if (a.priority != b.priority) return a.priority > b.priority;
    if (a.is_edge != b.is_edge) return a.is_edge;  // edges before nodes
    if (a.cell != b.cell) return a.cell < b.cell;
    if (a.src != b.src) return a.src < b.src;
    return a.dst < b.dst;
}

template <typename S>
std::vector<double> sigmoided(const Tensor<S>& t) {
    std::vector<double> out;
    for (S v : t.data()) out.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
    return out;
}

}  // namespace detail

// All currently eligible items, highest priority first. Edge priority is the
// gap between the top two softmaxed alpha entries; node priority is the gap
// between the rank-k and rank-(k+1) sigmoided betas of its incoming edges
// (taken as the rank-k value itself when exactly k edges remain). A node
// becomes eligible only once every incoming edge is fixed.
template <typename S>
std::vector<DiscItem> compute_priorities(const std::vector<CellArch<S>>& arches) {
    std::vector<DiscItem> items;
    for (std::size_t ai = 0; ai < arches.size(); ++ai) {
        const auto& arch = arches[ai];
        const std::string cname = cell_type_name(arch.type);
        for (const auto& e : arch.edges) {
            if (e.state != EdgeState::Relaxed) continue;
            std::vector<double> abar;
            {
                // softmax in double for priority purposes
                double mx = -std::numeric_limits<double>::infinity();
                for (S v : e.alpha.data()) mx = std::max(mx, static_cast<double>(v));
                double tot = 0;
                for (S v : e.alpha.data()) tot += std::exp(static_cast<double>(v) - mx);
                for (S v : e.alpha.data()) abar.push_back(std::exp(static_cast<double>(v) - mx) / tot);
            }
            std::sort(abar.begin(), abar.end(), std::greater<>());
            const double top2 = abar.size() > 1 ? abar[1] : 0.0;
            items.push_back({true, static_cast<index_t>(ai), cname, e.src, e.dst, abar[0] - top2});
        }
        for (index_t i = 0; i < arch.n_int; ++i) {
            if (arch.nodes[static_cast<std::size_t>(i)].state != NodeState::Relaxed) continue;
            const index_t dst = i + 2;
            bool eligible = true;
            std::vector<double> betas;
            for (const auto& e : arch.edges) {
                if (e.dst != dst || e.state == EdgeState::Removed) continue;
                if (e.state != EdgeState::EdgeFixed) {
                    eligible = false;
                    break;
                }
                betas.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(e.beta.data()[0]))));
            }
            if (!eligible) continue;
            std::sort(betas.begin(), betas.end(), std::greater<>());
            const double rank_k = betas.at(static_cast<std::size_t>(arch.k) - 1);
            const double rank_k1 =
                static_cast<index_t>(betas.size()) > arch.k ? betas[static_cast<std::size_t>(arch.k)]
                                                            : 0.0;
            items.push_back({false, static_cast<index_t>(ai), cname, -1, dst, rank_k - rank_k1});
        }
    }
    std::sort(items.begin(), items.end(), detail::item_before);
    return items;
}

// ---------------------------------------------------------------------------
// One-step discretization
// ---------------------------------------------------------------------------

// Structural change applied to an arch, mirrored to every repeat's weights by
// the caller-provided hook.
struct DiscEvent {
    index_t arch_index = 0;
    bool is_edge = true;
    index_t edge_index = 0;       // edge events: index into arch.edges
    index_t winner_live = 0;      // edge events: index into the live candidate list
    index_t node = 0;             // node events: 0-based intermediate index
    std::vector<index_t> removed; // node events: removed edge indices
};

template <typename S>
using DiscHook = std::function<void(const DiscEvent&)>;

// Applies one edge or node discretization. Edge: fix the argmax operation,
// drop alpha, keep beta. Node: keep the top-k incoming edges by sigmoided
// beta (ties to the smaller source), remove the rest, drop every beta of the
// node, mark the node fixed.
template <typename S>
std::string one_step_discretize(std::vector<CellArch<S>>& arches, const DiscItem& item,
                                const DiscHook<S>& hook = {}) {
    auto& arch = arches.at(static_cast<std::size_t>(item.arch_index));
    if (item.is_edge) {
        const index_t ei = arch.edge_index(item.src, item.dst);
        auto& e = arch.edges[static_cast<std::size_t>(ei)];
        if (e.state != EdgeState::Relaxed) throw Error("one_step_discretize: edge is not relaxed");
        auto ad = e.alpha.data();
        index_t winner = 0;
        for (index_t o = 1; o < static_cast<index_t>(ad.size()); ++o)
            if (ad[o] > ad[winner]) winner = o;
        e.state = EdgeState::EdgeFixed;
        e.fixed_op = winner;
        e.alpha = Tensor<S>();
        if (hook) hook({item.arch_index, true, ei, winner, 0, {}});
        return e.fixed_spec().id();
    }
    const index_t node = item.dst - 2;
    auto& nd = arch.nodes.at(static_cast<std::size_t>(node));
    if (nd.state != NodeState::Relaxed) throw Error("one_step_discretize: node already fixed");
    struct Cand {
        index_t edge_index;
        index_t src;
        double beta_bar;
    };
    std::vector<Cand> cands;
    for (std::size_t ei = 0; ei < arch.edges.size(); ++ei) {
        auto& e = arch.edges[ei];
        if (e.dst != item.dst || e.state == EdgeState::Removed) continue;
        if (e.state != EdgeState::EdgeFixed)
            throw Error("one_step_discretize: node " + std::to_string(item.dst) +
                        " has an unresolved edge");
        cands.push_back({static_cast<index_t>(ei), e.src,
                         1.0 / (1.0 + std::exp(-static_cast<double>(e.beta.data()[0])))});
    }
    if (static_cast<index_t>(cands.size()) < arch.k)
        throw Error("one_step_discretize: node has fewer live edges than k");
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.beta_bar != b.beta_bar) return a.beta_bar > b.beta_bar;
        return a.src < b.src;
    });
    DiscEvent ev{item.arch_index, false, 0, 0, node, {}};
    std::vector<index_t> kept;
    for (std::size_t c = 0; c < cands.size(); ++c) {
        auto& e = arch.edges[static_cast<std::size_t>(cands[c].edge_index)];
        if (static_cast<index_t>(c) < arch.k) {
            kept.push_back(cands[c].src);
        } else {
            e.state = EdgeState::Removed;
            ev.removed.push_back(cands[c].edge_index);
        }
        e.beta = Tensor<S>();  // Eq-1 semantics from here on
    }
    std::sort(kept.begin(), kept.end());
    nd.state = NodeState::NodeFixed;
    nd.retained = kept;
    if (hook) hook(ev);
    std::string decision = "keep(";
    for (std::size_t i = 0; i < kept.size(); ++i)
        decision += (i ? "," : "") + std::to_string(kept[i]);
    return decision + ")";
}

// ---------------------------------------------------------------------------
// Log
// ---------------------------------------------------------------------------

struct DiscRecord {
    index_t t = 0;
    bool is_edge = true;
    std::string cell;
    index_t src = -1, dst = 0;
    double priority = 0.0;
    std::string decision;   // op id, or keep(src,..)
    std::string reachable;  // decimal count after this step
};

inline std::string disc_log_to_string(const std::vector<DiscRecord>& log) {
    std::ostringstream os;
    os << "# t item priority decision reachable\n";
    for (const auto& r : log) {
        os << r.t << ' ';
        if (r.is_edge)
            os << "edge(" << r.cell << ',' << r.src << ',' << r.dst << ')';
        else
            os << "node(" << r.cell << ',' << r.dst << ')';
        os.precision(17);
        os << ' ' << r.priority << ' ' << r.decision << ' ' << r.reachable << '\n';
    }
    return os.str();
}

inline std::vector<DiscRecord> disc_log_from_string(const std::string& text) {
    std::vector<DiscRecord> log;
    std::istringstream is(text);
    std::string line;
    index_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        DiscRecord r;
        std::string item;
        if (!(ls >> r.t >> item >> r.priority >> r.decision >> r.reachable))
            throw ParseError("discretization log line " + std::to_string(lineno) + ": expected 5 fields");
        auto parse_item = [&](const std::string& s) {
            const auto open = s.find('('), close = s.rfind(')');
            if (open == std::string::npos || close == std::string::npos || close < open)
                throw ParseError("discretization log line " + std::to_string(lineno) + ": bad item '" +
                                 s + "'");
            const std::string kind = s.substr(0, open);
            std::vector<std::string> parts;
            std::string cur;
            for (char ch : s.substr(open + 1, close - open - 1)) {
                if (ch == ',') {
                    parts.push_back(cur);
                    cur.clear();
                } else
                    cur += ch;
            }
            parts.push_back(cur);
            if (kind == "edge" && parts.size() == 3) {
                r.is_edge = true;
                r.cell = parts[0];
                r.src = std::stoll(parts[1]);
                r.dst = std::stoll(parts[2]);
            } else if (kind == "node" && parts.size() == 2) {
                r.is_edge = false;
                r.cell = parts[0];
                r.src = -1;
                r.dst = std::stoll(parts[1]);
            } else {
                throw ParseError("discretization log line " + std::to_string(lineno) +
                                 ": unknown item '" + s + "'");
            }
        };
        parse_item(item);
        log.push_back(std::move(r));
    }
    return log;
}

// Re-apply a recorded trajectory to fresh arches (same construction
// parameters). Decisions are taken from the log, not recomputed, so the final
// structure is reproduced regardless of parameter values.
template <typename S>
void replay_log(const std::vector<DiscRecord>& log, std::vector<CellArch<S>>& arches,
                const DiscHook<S>& hook = {}) {
    for (const auto& r : log) {
        index_t ai = -1;
        for (std::size_t a = 0; a < arches.size(); ++a)
            if (cell_type_name(arches[a].type) == r.cell) ai = static_cast<index_t>(a);
        if (ai < 0) throw ParseError("replay: unknown cell type '" + r.cell + "'");
        auto& arch = arches[static_cast<std::size_t>(ai)];
        if (r.is_edge) {
            const index_t ei = arch.edge_index(r.src, r.dst);
            auto& e = arch.edges[static_cast<std::size_t>(ei)];
            if (e.state != EdgeState::Relaxed) throw Error("replay: edge already resolved");
            index_t winner = -1;
            for (std::size_t o = 0; o < e.op_list.size(); ++o)
                if (e.op_list[o].id() == r.decision) winner = static_cast<index_t>(o);
            if (winner < 0)
                throw ParseError("replay: op '" + r.decision + "' not on edge " +
                                 std::to_string(r.src) + "->" + std::to_string(r.dst));
            e.state = EdgeState::EdgeFixed;
            e.fixed_op = winner;
            e.alpha = Tensor<S>();
            if (hook) hook({ai, true, ei, winner, 0, {}});
        } else {
            // decision looks like keep(a,b)
            const auto open = r.decision.find('('), close = r.decision.rfind(')');
            if (r.decision.substr(0, open) != "keep" || close == std::string::npos)
                throw ParseError("replay: bad node decision '" + r.decision + "'");
            std::vector<index_t> kept;
            std::string cur;
            for (char ch : r.decision.substr(open + 1, close - open - 1)) {
                if (ch == ',') {
                    kept.push_back(std::stoll(cur));
                    cur.clear();
                } else
                    cur += ch;
            }
            if (!cur.empty()) kept.push_back(std::stoll(cur));
            const index_t node = r.dst - 2;
            auto& nd = arch.nodes.at(static_cast<std::size_t>(node));
            if (nd.state != NodeState::Relaxed) throw Error("replay: node already fixed");
            DiscEvent ev{ai, false, 0, 0, node, {}};
            for (std::size_t ei = 0; ei < arch.edges.size(); ++ei) {
                auto& e = arch.edges[ei];
                if (e.dst != r.dst || e.state == EdgeState::Removed) continue;
                if (std::find(kept.begin(), kept.end(), e.src) == kept.end()) {
                    e.state = EdgeState::Removed;
                    ev.removed.push_back(static_cast<index_t>(ei));
                }
                e.beta = Tensor<S>();
            }
            nd.state = NodeState::NodeFixed;
            nd.retained = kept;
            if (hook) hook(ev);
        }
    }
}

// ---------------------------------------------------------------------------
// Per-iteration driver
// ---------------------------------------------------------------------------

struct SchedulerState {
    Schedule sched;
    std::vector<DiscRecord> log;
    index_t performed = 0;
};

// Bring the number of performed one-step discretizations up to the schedule
// value for iteration t (several steps when the floor jumps), recording each.
template <typename S>
void scheduler_step(std::vector<CellArch<S>>& arches, SchedulerState& st, index_t t,
                    const DiscHook<S>& hook = {}) {
    const index_t target = schedule_value(st.sched, t);
    while (st.performed < target) {
        auto items = compute_priorities(arches);
        if (items.empty())
            throw Error("scheduler_step: schedule demands more steps but nothing is eligible");
        const DiscItem& top = items.front();
        const std::string decision = one_step_discretize(arches, top, hook);
        DiscRecord rec;
        rec.t = t;
        rec.is_edge = top.is_edge;
        rec.cell = top.cell;
        rec.src = top.src;
        rec.dst = top.dst;
        rec.priority = top.priority;
        rec.decision = decision;
        rec.reachable = count_reachable(arches).str();
        st.log.push_back(std::move(rec));
        ++st.performed;
    }
}

// Baseline mode: no scheduling during search; at t = T every edge is fixed by
// argmax and every node pruned to top-k in one pass, logged as one block.
template <typename S>
void discretize_all_at_once(std::vector<CellArch<S>>& arches, SchedulerState& st, index_t t,
                            const DiscHook<S>& hook = {}) {
    for (std::size_t ai = 0; ai < arches.size(); ++ai) {
        auto& arch = arches[ai];
        const std::string cname = cell_type_name(arch.type);
        for (const auto& e : arch.edges) {
            if (e.state != EdgeState::Relaxed) continue;
            DiscItem item{true, static_cast<index_t>(ai), cname, e.src, e.dst, 0.0};
            const std::string decision = one_step_discretize(arches, item, hook);
            st.log.push_back({t, true, cname, item.src, item.dst, 0.0, decision,
                              count_reachable(arches).str()});
            ++st.performed;
        }
        for (index_t i = 0; i < arch.n_int; ++i) {
            if (arch.nodes[static_cast<std::size_t>(i)].state != NodeState::Relaxed) continue;
            DiscItem item{false, static_cast<index_t>(ai), cname, -1, i + 2, 0.0};
            const std::string decision = one_step_discretize(arches, item, hook);
            st.log.push_back({t, false, cname, -1, i + 2, 0.0, decision,
                              count_reachable(arches).str()});
            ++st.performed;
        }
    }
}

}  // namespace sdas
