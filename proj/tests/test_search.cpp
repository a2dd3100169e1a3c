// Bilevel search loop: batch slicing, the two optimizer channels, run
// determinism, metrics, the one-shot baseline mode, and bit-exact
// checkpoint/resume.
#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "sdas/search.hpp"

using namespace sdas;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("sdas_search_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

NetworkPlan tiny_plan() {
    NetworkPlan p;
    p.target = NetworkTarget::Image;
    p.op_set = OpSetId::O2D;
    p.stem = StemKind::Lowres;
    p.K = 1;
    p.C1 = 4;
    p.C2 = 4;
    p.n_int = 2;
    p.k = 2;
    p.num_classes = 4;
    return p;
}

SearchConfig tiny_cfg(index_t epochs, bool das = false) {
    SearchConfig c;
    c.epochs = epochs;
    c.batch = 16;  // equals the half-split pool, so one iteration per epoch
    c.eta1 = 0.05;
    c.eta2 = 1e-3;
    c.das = das;
    c.seed = 7;
    c.aug.pad = 1;
    return c;
}

Dataset<double> tiny_dataset() { return synth_images<double>(4, 32, 8, {3, 12, 12}, 0.1, 3); }

using Snapshot = std::map<std::string, std::vector<double>>;

Snapshot snapshot(const std::vector<ParamRef<double>>& refs, bool learnable_only) {
    Snapshot m;
    for (const auto& r : refs) {
        if (learnable_only && !r.learnable) continue;
        auto d = r.tensor.data();
        m[r.name] = std::vector<double>(d.begin(), d.end());
    }
    return m;
}

// Names whose stored values differ bit-for-bit from the snapshot.
std::set<std::string> changed_names(const Snapshot& before, const Snapshot& after) {
    std::set<std::string> out;
    for (const auto& [name, vals] : before) {
        auto it = after.find(name);
        if (it == after.end() || it->second != vals) out.insert(name);
    }
    return out;
}

}  // namespace

TEST_SUITE("search") {

TEST_CASE("epoch slices partition the pool once per epoch, reshuffled between epochs") {
    std::vector<index_t> pool{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    const index_t batch = 4, per = 3;
    auto epoch_order = [&](index_t epoch) {
        std::vector<index_t> all;
        for (index_t pos = 0; pos < per; ++pos) {
            auto s = epoch_slice(pool, batch, epoch * per + pos, 5, 11);
            all.insert(all.end(), s.begin(), s.end());
        }
        return all;
    };
    auto e0 = epoch_order(0), e1 = epoch_order(1);
    REQUIRE(e0.size() == pool.size());
    REQUIRE(e1.size() == pool.size());
    auto sorted0 = e0, sorted1 = e1;
    std::sort(sorted0.begin(), sorted0.end());
    std::sort(sorted1.begin(), sorted1.end());
    CHECK(sorted0 == pool);
    CHECK(sorted1 == pool);
    CHECK(e0 != e1);  // reshuffled
    CHECK(epoch_slice(pool, batch, 4, 5, 11) == epoch_slice(pool, batch, 4, 5, 11));
    CHECK(epoch_slice(pool, batch, 4, 5, 11) != epoch_slice(pool, batch, 4, 6, 11));
    CHECK(epoch_slice(pool, batch, 2, 5, 11).size() == 2);  // tail slice
}

TEST_CASE("sessions derive their horizon and schedule from the data and config") {
    auto ds = tiny_dataset();
    auto s = make_search_session<double>(tiny_plan(), tiny_cfg(6), ds);
    CHECK(s.train_idx.size() == 16);
    CHECK(s.val_idx.size() == 16);
    CHECK(s.T == 6);  // one iteration per epoch at batch 16
    CHECK(s.sched.sched.M == 14);  // 2 cell types x (5 edges + 2 nodes)
    CHECK(s.sched.sched.T == 6);
    CHECK(s.t == 0);
    // Train and validation pools are disjoint halves of the train split.
    std::set<index_t> seen(s.train_idx.begin(), s.train_idx.end());
    for (index_t i : s.val_idx) CHECK(!seen.count(i));

    SearchConfig bad = tiny_cfg(6);
    bad.epochs = 0;
    CHECK_THROWS_AS(make_search_session<double>(tiny_plan(), bad, ds), ConfigError);
    Dataset<double> empty;
    empty.n_train = 1;
    CHECK_THROWS_AS(make_search_session<double>(tiny_plan(), tiny_cfg(6), empty), ConfigError);
}

TEST_CASE("zeroed learning rates isolate the two optimization channels") {
    auto ds = tiny_dataset();
    SUBCASE("frozen weights still move the architecture") {
        SearchConfig cfg = tiny_cfg(5, true);  // baseline mode: no mid-run discretization
        cfg.eta1 = 0.0;
        auto s = make_search_session<double>(tiny_plan(), cfg, ds);
        auto w0 = snapshot(s.net.weight_param_refs(), true);
        auto b0 = snapshot(s.net.weight_param_refs(), false);  // includes BN buffers
        auto a0 = snapshot(s.net.arch_param_refs(), false);
        for (int i = 0; i < 3; ++i) search_step(s, ds);
        CHECK(changed_names(w0, snapshot(s.net.weight_param_refs(), true)).empty());
        CHECK(!changed_names(a0, snapshot(s.net.arch_param_refs(), false)).empty());
        // Training-mode forwards still fold batch statistics into BN buffers.
        CHECK(!changed_names(b0, snapshot(s.net.weight_param_refs(), false)).empty());
    }
    SUBCASE("frozen architecture still moves the weights") {
        SearchConfig cfg = tiny_cfg(5, true);
        cfg.eta2 = 0.0;
        auto s = make_search_session<double>(tiny_plan(), cfg, ds);
        auto w0 = snapshot(s.net.weight_param_refs(), true);
        auto a0 = snapshot(s.net.arch_param_refs(), false);
        for (int i = 0; i < 3; ++i) search_step(s, ds);
        CHECK(changed_names(a0, snapshot(s.net.arch_param_refs(), false)).empty());
        CHECK(!changed_names(w0, snapshot(s.net.weight_param_refs(), true)).empty());
    }
}

TEST_CASE("identical configurations reproduce the run bit for bit") {
    auto ds = tiny_dataset();
    auto r1 = run_search<double>(tiny_plan(), tiny_cfg(6), ds);
    auto r2 = run_search<double>(tiny_plan(), tiny_cfg(6), ds);
    CHECK(r1.genotype == r2.genotype);
    CHECK(disc_log_to_string(r1.log) == disc_log_to_string(r2.log));
    CHECK(metrics_to_csv(r1.metrics) == metrics_to_csv(r2.metrics));
    SearchConfig other = tiny_cfg(6);
    other.seed = 8;
    auto r3 = run_search<double>(tiny_plan(), other, ds);
    CHECK(metrics_to_csv(r3.metrics) != metrics_to_csv(r1.metrics));
}

TEST_CASE("metrics trace the schedule down to a single reachable architecture") {
    auto ds = tiny_dataset();
    auto r = run_search<double>(tiny_plan(), tiny_cfg(6), ds);
    REQUIRE(r.metrics.size() == 6);
    const std::string csv = metrics_to_csv(r.metrics);
    CHECK(csv.rfind("iteration,train_loss,val_loss,lr,M_t,reachable_count\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    BigInt prev("51883209");  // 7203^2: untouched relaxed space of this plan
    index_t prev_m = 0;
    for (std::size_t i = 0; i < r.metrics.size(); ++i) {
        const auto& row = r.metrics[i];
        CHECK(row.iteration == static_cast<index_t>(i));
        CHECK(row.m_t >= prev_m);
        BigInt reach(row.reachable);
        CHECK(reach <= prev);
        prev = reach;
        prev_m = row.m_t;
        CHECK(row.lr > 0.0);
        CHECK(row.lr <= tiny_cfg(6).eta1);
    }
    CHECK(r.metrics.back().reachable == "1");
    CHECK(r.metrics.back().m_t == 14);
    // The discovered genotype validates and names this run's settings.
    CHECK(r.genotype.schedule == "C");
    CHECK(r.genotype.seed == 7);
    CHECK(r.genotype.n_int == 2);
}

TEST_CASE("the one-shot baseline defers every decision to the final iteration") {
    auto ds = tiny_dataset();
    auto r = run_search<double>(tiny_plan(), tiny_cfg(3, true), ds);
    REQUIRE(r.metrics.size() == 3);
    CHECK(r.metrics[0].m_t == 0);
    CHECK(r.metrics[0].reachable == "51883209");
    CHECK(r.metrics[1].m_t == 0);
    CHECK(r.metrics.back().m_t == 14);
    CHECK(r.metrics.back().reachable == "1");
    REQUIRE(r.log.size() == 14);
    for (const auto& rec : r.log) CHECK(rec.t == 3);
    CHECK(r.genotype.schedule == "das");
}

TEST_CASE("stepping past the horizon or finishing early is an error") {
    auto ds = tiny_dataset();
    auto s = make_search_session<double>(tiny_plan(), tiny_cfg(1), ds);
    CHECK_THROWS_AS(finish_search(s), Error);
    search_step(s, ds);
    CHECK(s.t == 1);
    CHECK_THROWS_AS(search_step(s, ds), Error);
    auto r = finish_search(s);
    CHECK(r.T == 1);
}

TEST_CASE("a resumed checkpoint finishes exactly like the uninterrupted run") {
    auto ds = tiny_dataset();
    const NetworkPlan plan = tiny_plan();
    const SearchConfig cfg = tiny_cfg(6);
    TempDir tmp;
    const std::string ck = tmp.file("run.ckpt");

    // Uninterrupted reference run.
    auto full = make_search_session<double>(plan, cfg, ds);
    while (full.t < full.T) search_step(full, ds);
    auto full_result = finish_search(full);

    // Interrupted run: three steps, save, drop the session, reload, finish.
    {
        auto s = make_search_session<double>(plan, cfg, ds);
        for (int i = 0; i < 3; ++i) search_step(s, ds);
        save_checkpoint(s, ck, "cfg-fingerprint");
    }
    auto head = read_checkpoint_head(ck);
    CHECK(head.config_text == "cfg-fingerprint");
    CHECK(head.t == 3);
    CHECK(head.T == 6);
    CHECK(head.performed == head.log.size());

    auto resumed = load_checkpoint<double>(plan, cfg, ds, ck, "cfg-fingerprint");
    CHECK(resumed.t == 3);
    CHECK(resumed.metrics.size() == 3);
    while (resumed.t < resumed.T) search_step(resumed, ds);
    auto resumed_result = finish_search(resumed);

    CHECK(resumed_result.genotype == full_result.genotype);
    CHECK(disc_log_to_string(resumed_result.log) == disc_log_to_string(full_result.log));
    CHECK(metrics_to_csv(resumed_result.metrics) == metrics_to_csv(full_result.metrics));
    // Parameter bytes agree too, not just the decisions.
    auto fw = snapshot(full.net.weight_param_refs(), false);
    auto rw = snapshot(resumed.net.weight_param_refs(), false);
    CHECK(fw == rw);
    CHECK(snapshot(full.net.arch_param_refs(), false) ==
          snapshot(resumed.net.arch_param_refs(), false));
}

TEST_CASE("checkpoints refuse mismatched configurations and damaged files") {
    auto ds = tiny_dataset();
    const NetworkPlan plan = tiny_plan();
    const SearchConfig cfg = tiny_cfg(6);
    TempDir tmp;
    const std::string ck = tmp.file("run.ckpt");
    auto s = make_search_session<double>(plan, cfg, ds);
    search_step(s, ds);
    save_checkpoint(s, ck, "fingerprint-a");

    CHECK_THROWS_AS(load_checkpoint<double>(plan, cfg, ds, ck, "fingerprint-b"), ConfigError);

    SearchConfig longer = cfg;
    longer.epochs = 7;  // different horizon under the same fingerprint
    CHECK_THROWS_AS(load_checkpoint<double>(plan, longer, ds, ck, "fingerprint-a"), ParseError);

    std::ifstream in(ck, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    REQUIRE(bytes.size() > 64);
    const std::string cut = tmp.file("cut.ckpt");
    std::ofstream(cut, std::ios::binary).write(bytes.data(), bytes.size() / 2);
    CHECK_THROWS_AS(load_checkpoint<double>(plan, cfg, ds, cut, "fingerprint-a"), ParseError);

    const std::string junk = tmp.file("junk.ckpt");
    std::ofstream(junk, std::ios::binary) << "this is not a checkpoint";
    CHECK_THROWS_AS(read_checkpoint_head(junk), ParseError);
    CHECK_THROWS_AS(load_checkpoint<double>(plan, cfg, ds, junk, "fingerprint-a"), ParseError);
    CHECK_THROWS_AS(read_checkpoint_head(tmp.file("absent.ckpt")), ParseError);
}

TEST_CASE("cosine annealing spans the run from the base rate toward zero") {
    CHECK(cosine_lr(0.05, 0, 10) == doctest::Approx(0.05));
    CHECK(cosine_lr(0.05, 5, 10) > cosine_lr(0.05, 9, 10));
    CHECK(cosine_lr(0.05, 9, 10) > 0.0);
    for (index_t t = 1; t < 10; ++t) CHECK(cosine_lr(0.05, t, 10) < cosine_lr(0.05, t - 1, 10));
}

}  // TEST_SUITE
