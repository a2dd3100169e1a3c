// Reachable-architecture counting, checked against exhaustive enumeration.
//
// The brute force is deliberately naive: for every relaxed node it walks all
// k-subsets of the live incoming edges and, inside each subset, an explicit
// odometer over the free operation choices, incrementing a counter one
// genotype at a time. A global odometer across nodes then counts complete
// genotypes individually. No symmetric-polynomial shortcut appears anywhere
// in this file.
#include <doctest.h>

#include <random>
#include <vector>

#include "sdas/scheduler.hpp"

using namespace sdas;

namespace {

using Arches = std::vector<CellArch<double>>;

void randomize(Arches& arches, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> ud(-2.0, 2.0);
    for (auto& a : arches)
        for (auto& e : a.edges) {
            if (e.alpha.defined())
                for (auto& v : e.alpha.data_mut()) v = ud(rng);
            if (e.beta.defined()) e.beta.data_mut()[0] = ud(rng);
        }
}

// Options for one node, enumerated exhaustively. Fixed nodes have exactly the
// assignments of their kept free edges; relaxed nodes walk subsets.
long long enumerate_node(const CellArch<double>& arch, index_t node) {
    const index_t dst = node + 2;
    struct Live {
        index_t factor;  // op choices if still open, 1 if already fixed
    };
    std::vector<Live> live;
    for (const auto& e : arch.edges) {
        if (e.dst != dst || e.state == EdgeState::Removed) continue;
        live.push_back({e.state == EdgeState::EdgeFixed
                            ? index_t{1}
                            : static_cast<index_t>(e.op_list.size())});
    }
    const auto& nd = arch.nodes[static_cast<std::size_t>(node)];
    long long count = 0;
    auto count_assignments = [&](const std::vector<std::size_t>& chosen) {
        // Odometer over the op choice of every chosen edge.
        std::vector<index_t> digit(chosen.size(), 0);
        while (true) {
            ++count;
            std::size_t i = 0;
            for (; i < digit.size(); ++i) {
                if (++digit[i] < live[chosen[i]].factor) break;
                digit[i] = 0;
            }
            if (i == digit.size()) break;
        }
    };
    if (nd.state == NodeState::NodeFixed) {
        std::vector<std::size_t> all(live.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        count_assignments(all);
        return count;
    }
    // Relaxed: every k-subset of the live edges.
    const std::size_t n = live.size();
    REQUIRE(n >= static_cast<std::size_t>(arch.k));
    std::vector<std::size_t> pick(static_cast<std::size_t>(arch.k));
    // Walk subsets in lexicographic order.
    for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = i;
    while (true) {
        count_assignments(pick);
        // Advance to the next combination.
        std::size_t i = pick.size();
        while (i > 0) {
            --i;
            if (pick[i] != i + n - pick.size()) {
                ++pick[i];
                for (std::size_t j = i + 1; j < pick.size(); ++j) pick[j] = pick[j - 1] + 1;
                break;
            }
            if (i == 0) return count;
        }
        if (pick.empty()) break;
    }
    return count;
}

// Count complete genotypes one at a time with a global odometer whose digit
// ranges come from the per-node enumerations above.
long long brute_force(const Arches& arches) {
    std::vector<long long> node_options;
    for (const auto& a : arches)
        for (index_t i = 0; i < a.n_int; ++i) node_options.push_back(enumerate_node(a, i));
    std::vector<long long> digit(node_options.size(), 0);
    long long total = 0;
    while (true) {
        ++total;
        std::size_t i = 0;
        for (; i < digit.size(); ++i) {
            if (++digit[i] < node_options[i]) break;
            digit[i] = 0;
        }
        if (i == digit.size()) break;
    }
    return total;
}

void take_random_steps(Arches& arches, index_t steps, std::mt19937_64& rng) {
    for (index_t s = 0; s < steps; ++s) {
        auto items = compute_priorities(arches);
        if (items.empty()) return;
        std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
        one_step_discretize(arches, items[pick(rng)]);
    }
}

}  // namespace

TEST_SUITE("counting") {

TEST_CASE("fresh single-node cell with k=2 over seven candidates reaches 49") {
    Arches arches{make_cell_arch<double>(CellType::Normal, OpSetId::O2D, false, 1, 2)};
    CHECK(count_reachable(arches) == 49);
    CHECK(brute_force(arches) == 49);
}

TEST_CASE("node with three live inputs, one already fixed, k=2 reaches 63") {
    auto arch = make_cell_arch<double>(CellType::Normal, OpSetId::O2D, false, 2, 2);
    // Resolve node 2 completely so only node 3 contributes.
    for (index_t src = 0; src < 2; ++src) {
        auto& e = arch.edges[static_cast<std::size_t>(arch.edge_index(src, 2))];
        e.state = EdgeState::EdgeFixed;
        e.fixed_op = 0;
        e.alpha = Tensor<double>();
        e.beta = Tensor<double>();
    }
    arch.nodes[0].state = NodeState::NodeFixed;
    arch.nodes[0].retained = {0, 1};
    // Fix one of node 3's edges; the other two stay open with 7 candidates.
    auto& e03 = arch.edges[static_cast<std::size_t>(arch.edge_index(0, 3))];
    e03.state = EdgeState::EdgeFixed;
    e03.fixed_op = 3;
    e03.alpha = Tensor<double>();
    Arches arches{arch};
    CHECK(count_reachable(arches) == 63);  // 7 + 7 + 49
    CHECK(brute_force(arches) == 63);
}

TEST_CASE("the fresh image search space is 1,037,664,180 squared") {
    Arches arches{make_cell_arch<double>(CellType::Normal, OpSetId::O2D, false, 4, 2),
                  make_cell_arch<double>(CellType::Reduction, OpSetId::O2D, false, 4, 2)};
    const BigInt per_cell("1037664180");
    CHECK(count_reachable(Arches{arches[0]}) == per_cell);
    CHECK(count_reachable(arches) == per_cell * per_cell);
    CHECK(count_reachable(arches) == BigInt("1076746950455072400"));
    CHECK(scientific_string(count_reachable(arches)) == "1.08e18");
}

TEST_CASE("a fully discrete state counts exactly one architecture") {
    Arches arches{make_cell_arch<double>(CellType::Normal, OpSetId::O2D, false, 2, 2)};
    std::mt19937_64 rng(3);
    randomize(arches, rng);
    SchedulerState st;
    st.sched = Schedule{ScheduleId::A, total_steps(arches), 1};
    scheduler_step<double>(arches, st, 1, {});
    CHECK(count_reachable(arches) == 1);
    CHECK(brute_force(arches) == 1);
}

TEST_CASE("counting matches exhaustive enumeration on 50 random partial states") {
    std::mt19937_64 rng(20240817);
    int checked = 0, nontrivial = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const index_t n_int = 1 + static_cast<index_t>(rng() % 3);
        const index_t k = 1 + static_cast<index_t>(rng() % 2);
        Arches arches{make_cell_arch<double>(CellType::Normal, OpSetId::O2D, false, n_int, k)};
        if (rng() % 2)
            arches.push_back(make_cell_arch<double>(CellType::Reduction, OpSetId::O2D, false, n_int, k));
        randomize(arches, rng);
        // Randomly discretize until the space is small enough to enumerate.
        std::uniform_int_distribution<index_t> extra(0, total_steps(arches));
        take_random_steps(arches, extra(rng), rng);
        while (count_reachable(arches) > 100000) take_random_steps(arches, 1, rng);
        const BigInt counted = count_reachable(arches);
        REQUIRE(counted <= 100000);
        CHECK(counted == brute_force(arches));
        ++checked;
        if (counted > 1) ++nontrivial;
    }
    CHECK(checked == 50);
    CHECK(nontrivial >= 20);  // the sample must not collapse to trivial states
}

TEST_CASE("one-step discretization never increases the reachable count") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        Arches arches{make_cell_arch<double>(CellType::Normal, OpSetId::O2D, false, 2, 2),
                      make_cell_arch<double>(CellType::Reduction, OpSetId::O2D, false, 2, 2)};
        randomize(arches, rng);
        BigInt prev = count_reachable(arches);
        while (true) {
            auto items = compute_priorities(arches);
            if (items.empty()) break;
            std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
            one_step_discretize(arches, items[pick(rng)]);
            const BigInt now = count_reachable(arches);
            CHECK(now <= prev);
            prev = now;
        }
        CHECK(prev == 1);
    }
}

}  // TEST_SUITE
