// End-to-end coverage of the command-line driver: every subcommand is run as
// a real subprocess against the built binary, checking outputs, artifacts,
// and exit codes (0 success, 1 runtime failure, 2 usage/config error).
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "sdas/config.hpp"
#include "sdas/genotype.hpp"
#include "sdas/scheduler.hpp"

using namespace sdas;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;  // stdout and stderr interleaved
};

CliResult run_cli(const std::string& args) {
    CliResult r;
    const std::string cmd = std::string(SDAS_CLI_PATH) + " " + args + " 2>&1";
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    char buf[4096];
    std::size_t n;
    while ((n = ::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    const int status = ::pclose(p);
    if (WIFEXITED(status)) r.code = WEXITSTATUS(status);
    return r;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("sdas_cli_" + std::to_string(::getpid()) + "_" +
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

void put_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool contains(const std::string& hay, const std::string& needle) {
    return hay.find(needle) != std::string::npos;
}

const char* kToyConfig = R"({
  "dataset": {"kind": "synthetic_image", "num_classes": 4, "n_train": 32, "n_test": 8,
              "shape": [3, 12, 12], "noise": 0.1, "seed": 3},
  "network": {"K": 1, "C1": 4, "C2": 4, "n_int": 2, "k": 2},
  "search": {"epochs": 4, "batch": 16, "eta1": 0.05, "eta2": 0.001, "seed": 5},
  "eval": {"epochs": 0, "batch": 8, "K": 1, "C1": 8, "C2": 8},
  "augment": {"pad": 1}
})";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("count-space prints the untouched image search space exactly") {
    auto r = run_cli("count-space");
    CHECK(r.code == 0);
    CHECK(contains(r.out, "1076746950455072400 (1.08e18)"));
}

TEST_CASE("count-space handles small custom spaces") {
    auto r = run_cli("count-space --n-int 1 --k 2 --cell-types normal");
    CHECK(r.code == 0);
    CHECK(contains(r.out, "49 (4.90e1)"));
    // The fresh video space matches an in-process count of the same setup.
    std::vector<CellArch<double>> arches;
    for (const char* name : {"normal", "st_reduction", "s_reduction"})
        arches.push_back(make_cell_arch<double>(parse_cell_type(name), OpSetId::O3D, true, 4, 2));
    auto rv = run_cli("count-space --opset o3d --video");
    CHECK(rv.code == 0);
    CHECK(rv.out.rfind(count_reachable(arches).str() + " (", 0) == 0);
}

TEST_CASE("usage problems exit with code 2") {
    CHECK(run_cli("definitely-not-a-subcommand").code == 2);
    CHECK(run_cli("search").code == 2);  // missing required --config
    CHECK(run_cli("count-space --state foo.bin").code == 2);
    CHECK(contains(run_cli("count-space --state foo.bin").out, "--config"));
    auto help = run_cli("--help");
    CHECK(help.code == 0);
    CHECK(contains(help.out, "count-space"));
    CHECK(contains(help.out, "gradcheck"));
}

TEST_CASE("configuration problems exit with code 2 and name the offender") {
    TempDir tmp;
    auto missing = run_cli("search --config " + tmp.file("absent.json"));
    CHECK(missing.code == 2);
    CHECK(contains(missing.out, "absent.json"));

    put_file(tmp.file("bad.json"), R"({"search": {"banana": 1}})");
    auto bad = run_cli("search --config " + tmp.file("bad.json"));
    CHECK(bad.code == 2);
    CHECK(contains(bad.out, "banana"));

    put_file(tmp.file("ok.json"), kToyConfig);
    auto sched = run_cli("search --config " + tmp.file("ok.json") + " --schedule Z");
    CHECK(sched.code == 2);

    put_file(tmp.file("notjson.json"), "{nope");
    CHECK(run_cli("search --config " + tmp.file("notjson.json")).code == 2);
}

TEST_CASE("the search pipeline writes its artifacts and downstream commands consume them") {
    TempDir tmp;
    const std::string cfg = tmp.file("cfg.json");
    put_file(cfg, kToyConfig);
    const std::string dir = tmp.file("run1");

    auto r = run_cli("search --config " + cfg + " --out " + dir);
    CHECK(r.code == 0);
    CHECK(contains(r.out, "search: T=4 iterations, M=14"));
    CHECK(contains(r.out, "mode=sdas"));

    // Resolved config: a fixed point of parse -> serialize.
    const std::string resolved = slurp(dir + "/resolved_config.json");
    RunConfig parsed = config_from_string(resolved);
    CHECK(config_to_string(parsed) == resolved);
    CHECK(parsed.search.seed == 5);
    CHECK(parsed.out_dir == dir);

    // Metrics: header plus one row per iteration.
    const std::string csv = slurp(dir + "/metrics.csv");
    CHECK(csv.rfind("iteration,train_loss,val_loss,lr,M_t,reachable_count\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

    // Decision log: every item resolved within the horizon.
    auto log = disc_log_from_string(slurp(dir + "/disc_log.txt"));
    CHECK(log.size() == 14);
    for (std::size_t i = 1; i < log.size(); ++i) CHECK(log[i].t >= log[i - 1].t);
    CHECK(log.back().t <= 4);

    // Genotype: valid, and tagged with this run's settings.
    Genotype g = genotype_from_string(slurp(dir + "/genotype.json"));
    g.validate();
    CHECK(g.schedule == "C");
    CHECK(g.seed == 5);
    CHECK(g.n_int == 2);

    SUBCASE("resuming a finished run is idempotent") {
        const std::string before = slurp(dir + "/genotype.json");
        auto rr = run_cli("search --config " + cfg + " --out " + dir + " --resume " + dir +
                          "/checkpoint.bin");
        CHECK(rr.code == 0);
        CHECK(slurp(dir + "/genotype.json") == before);
    }

    SUBCASE("resuming under a different configuration is refused") {
        auto rr = run_cli("search --config " + cfg + " --out " + dir + " --seed 9 --resume " + dir +
                          "/checkpoint.bin");
        CHECK(rr.code == 2);
        CHECK(contains(rr.out, "configuration"));
    }

    SUBCASE("count-space reads the mid-run state from a checkpoint") {
        auto rc = run_cli("count-space --state " + dir + "/checkpoint.bin --config " + cfg);
        CHECK(rc.code == 0);
        CHECK(contains(rc.out, "state after iteration 4 (14 discretizations)"));
        CHECK(contains(rc.out, "1 (1.00e0)"));
    }

    SUBCASE("export renders JSON to stdout as a normalization fixed point") {
        auto re = run_cli("export --genotype " + dir + "/genotype.json --format json --out -");
        CHECK(re.code == 0);
        CHECK(re.out == slurp(dir + "/genotype.json"));
    }

    SUBCASE("export writes one DOT file per cell type") {
        const std::string dots = tmp.file("dots");
        auto re = run_cli("export --genotype " + dir + "/genotype.json --format dot --out " + dots);
        CHECK(re.code == 0);
        for (const std::string cell : {"normal", "reduction"}) {
            const std::string text = slurp(dots + "/" + cell + ".dot");
            CHECK(contains(text, "digraph"));
            CHECK(contains(re.out, cell + ".dot"));
        }
        auto rs = run_cli("export --genotype " + dir + "/genotype.json --format dot --out -");
        CHECK(rs.code == 0);
        CHECK(std::count(rs.out.begin(), rs.out.end(), '{') >= 2);  // both cells concatenated
    }

    SUBCASE("evaluate trains the genotype under the eval section") {
        const std::string ev = tmp.file("eval");
        auto re = run_cli("evaluate --config " + cfg + " --genotype " + dir +
                          "/genotype.json --out " + ev);
        CHECK(re.code == 0);
        CHECK(contains(re.out, "test_accuracy "));
        json j = json::parse(slurp(ev + "/eval_result.json"));
        CHECK(j.at("steps").get<int>() == 0);  // epochs = 0 in the toy config
        CHECK(j.at("params").get<long long>() > 0);
        const double acc = j.at("test_accuracy").get<double>();
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
        CHECK(j.at("epoch_loss").empty());
    }

    SUBCASE("the one-shot mode stamps every decision with the final iteration") {
        const std::string dir2 = tmp.file("run2");
        auto rd = run_cli("search --config " + cfg + " --mode das --out " + dir2);
        CHECK(rd.code == 0);
        CHECK(contains(rd.out, "mode=das"));
        auto dlog = disc_log_from_string(slurp(dir2 + "/disc_log.txt"));
        CHECK(dlog.size() == 14);
        for (const auto& rec : dlog) CHECK(rec.t == 4);
        CHECK(genotype_from_string(slurp(dir2 + "/genotype.json")).schedule == "das");
    }
}

TEST_CASE("export rejects bad formats and missing inputs") {
    TempDir tmp;
    put_file(tmp.file("g.json"), "{}");
    CHECK(run_cli("export --genotype " + tmp.file("nope.json") + " --format json").code == 2);
    CHECK(run_cli("export --genotype " + tmp.file("g.json") + " --format yaml").code == 2);
    CHECK(run_cli("export --genotype " + tmp.file("g.json") + " --format json").code == 2);  // invalid genotype
}

TEST_CASE("gradcheck audits a catalog and reports per-operation results") {
    auto r = run_cli("gradcheck --opset o2d --channels 2 --seed 1");
    CHECK(r.code == 0);
    CHECK(contains(r.out, "sep_conv_5x5"));
    CHECK(contains(r.out, "relaxed_edge"));
    CHECK(contains(r.out, "pass"));
    CHECK(!contains(r.out, "FAIL"));
    // The planar-input audit of a clip catalog is a configuration error.
    CHECK(run_cli("gradcheck --opset o3d").code == 2);
}

}  // TEST_SUITE
