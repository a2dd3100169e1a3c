// Command-line driver.
//
//   search       run the scheduled (or one-shot) bilevel search
//   evaluate     train a discrete genotype from scratch and report accuracy
//   count-space  exact reachable-architecture count (fresh or mid-run)
//   export       render a genotype as DOT or normalized JSON
//   gradcheck    finite-difference audit of every operation's gradients
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "sdas/config.hpp"
#include "sdas/gradcheck.hpp"
#include "sdas/network.hpp"
#include "sdas/scheduler.hpp"
#include "sdas/search.hpp"

namespace fs = std::filesystem;
using namespace sdas;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path + "'");
    out << text;
    if (!out) throw Error("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

struct SearchArgs {
    std::string config;
    std::string mode, schedule, opset, out_dir, resume;
    std::uint64_t seed = 0;
    bool seed_set = false;
    index_t checkpoint_every = 0;  // 0 = once per epoch
};

int cmd_search(const SearchArgs& a) {
    RunConfig cfg = load_run_config(a.config);
    if (!a.mode.empty()) {
        if (a.mode != "sdas" && a.mode != "das") throw ConfigError("--mode must be sdas or das");
        cfg.search.das = a.mode == "das";
    }
    if (!a.schedule.empty()) cfg.search.schedule = parse_schedule(a.schedule);
    if (!a.opset.empty()) cfg.network.op_set = parse_opset(a.opset);
    if (a.seed_set) cfg.search.seed = a.seed;
    if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
    cfg.network.validate();

    const std::string resolved = config_to_string(cfg);
    fs::create_directories(cfg.out_dir);
    write_file((fs::path(cfg.out_dir) / "resolved_config.json").string(), resolved);

    Dataset<float> ds = build_dataset<float>(cfg.dataset);
    SearchSession<float> session =
        a.resume.empty() ? make_search_session<float>(cfg.network, cfg.search, ds)
                         : load_checkpoint<float>(cfg.network, cfg.search, ds, a.resume, resolved);
    const std::string ck_path = (fs::path(cfg.out_dir) / "checkpoint.bin").string();
    const index_t per_epoch = session.T / cfg.search.epochs;
    const index_t every = a.checkpoint_every > 0 ? a.checkpoint_every : per_epoch;

    std::cout << "search: T=" << session.T << " iterations, M=" << session.sched.sched.M
              << " discretizations, space=" << scientific_string(count_reachable(session.net.arches))
              << ", mode=" << (cfg.search.das ? "das" : "sdas") << "\n";
    while (session.t < session.T) {
        search_step(session, ds);
        const bool boundary = session.t % every == 0 || session.t == session.T;
        if (boundary) save_checkpoint(session, ck_path, resolved);
        if (session.t % per_epoch == 0) {
            const auto& m = session.metrics.back();
            std::cout << "iter " << session.t << "/" << session.T << "  train " << m.train_loss
                      << "  val " << m.val_loss << "  lr " << m.lr << "  fixed " << m.m_t << "/"
                      << session.sched.sched.M << "  space " << scientific_string(BigInt(m.reachable))
                      << "\n";
        }
    }
    SearchResult<float> res = finish_search(session);
    write_file((fs::path(cfg.out_dir) / "genotype.json").string(), genotype_to_string(res.genotype));
    write_file((fs::path(cfg.out_dir) / "disc_log.txt").string(), disc_log_to_string(res.log));
    write_file((fs::path(cfg.out_dir) / "metrics.csv").string(), metrics_to_csv(res.metrics));
    std::cout << "wrote " << cfg.out_dir << "/{genotype.json, disc_log.txt, metrics.csv, "
              << "checkpoint.bin, resolved_config.json}\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

int cmd_evaluate(const std::string& config_path, const std::string& genotype_path,
                 const std::string& out_dir) {
    RunConfig cfg = load_run_config(config_path);
    Genotype g = genotype_from_string(read_file(genotype_path));
    NetworkPlan plan = eval_plan(cfg);
    // The genotype's own structural metadata wins over the config's.
    plan.op_set = parse_opset(g.op_set);
    plan.n_int = g.n_int;
    plan.k = g.k;
    plan.validate();
    Dataset<float> ds = build_dataset<float>(cfg.dataset);
    TrainEvalConfig tc = eval_train_config(cfg);
    std::cout << "evaluate: params=" << count_genotype_params(plan, g) << ", epochs=" << tc.epochs
              << "\n";
    auto res = train_eval<float>(plan, g, ds, tc);
    for (std::size_t e = 0; e < res.epoch_loss.size(); ++e)
        std::cout << "epoch " << e + 1 << "  train_loss " << res.epoch_loss[e] << "\n";
    std::cout << "test_accuracy " << res.test_accuracy << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        json j = {{"epoch_loss", res.epoch_loss},
                  {"test_accuracy", res.test_accuracy},
                  {"params", res.params},
                  {"steps", res.steps}};
        write_file((fs::path(out_dir) / "eval_result.json").string(), j.dump(2) + "\n");
    }
    return 0;
}

// ---------------------------------------------------------------------------
// count-space
// ---------------------------------------------------------------------------

int cmd_count_space(const std::string& opset, index_t n_int, index_t k, bool video,
                    std::string cell_types, const std::string& state_path,
                    const std::string& config_path) {
    std::vector<CellArch<double>> arches;
    if (!state_path.empty()) {
        if (config_path.empty())
            throw ConfigError("count-space: --state needs --config to rebuild the architecture");
        RunConfig cfg = load_run_config(config_path);
        for (CellType t : plan_cell_types(cfg.network))
            arches.push_back(make_cell_arch<double>(t, cfg.network.op_set, cfg.network.video(),
                                                    cfg.network.n_int, cfg.network.k));
        CheckpointHead head = read_checkpoint_head(state_path);
        replay_log(head.log, arches);
        std::cout << "state after iteration " << head.t << " (" << head.performed
                  << " discretizations)\n";
    } else {
        if (cell_types.empty()) cell_types = video ? "normal,st_reduction,s_reduction" : "normal,reduction";
        const OpSetId set = parse_opset(opset);
        std::stringstream ss(cell_types);
        std::string name;
        while (std::getline(ss, name, ','))
            arches.push_back(make_cell_arch<double>(parse_cell_type(name), set, video, n_int, k));
        if (arches.empty()) throw ConfigError("count-space: no cell types given");
    }
    const BigInt n = count_reachable(arches);
    std::cout << n.str() << " (" << scientific_string(n) << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

int cmd_export(const std::string& genotype_path, const std::string& format,
               const std::string& out_path) {
    Genotype g = genotype_from_string(read_file(genotype_path));
    if (format == "json") {
        const std::string text = genotype_to_string(g);
        if (out_path.empty() || out_path == "-")
            std::cout << text;
        else
            write_file(out_path, text);
        return 0;
    }
    if (format != "dot") throw ConfigError("export: --format must be dot or json");
    if (out_path.empty() || out_path == "-") {
        for (const auto& [name, cell] : g.cells) std::cout << cell_to_dot(name, cell);
        return 0;
    }
    // One DOT file per cell type, named <out>/<cell>.dot.
    fs::create_directories(out_path);
    for (const auto& [name, cell] : g.cells) {
        const std::string p = (fs::path(out_path) / (name + ".dot")).string();
        write_file(p, cell_to_dot(name, cell));
        std::cout << "wrote " << p << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

int cmd_gradcheck(const std::string& opset, bool video, index_t channels, double tol,
                  std::uint64_t seed) {
    const OpSetId set = parse_opset(opset);
    const index_t T = video ? 4 : 1, H = 6, W = 6;
    std::mt19937_64 rng(mix64(seed));
    std::normal_distribution<double> nd;
    auto randomize = [&](const Tensor<double>& t, double s) {
        for (auto& v : t.data_mut()) v = s * nd(rng);
    };
    bool all_ok = true;
    std::cout << "op                    worst_rel_err   result\n";
    for (const auto& spec : catalog(set, video)) {
        auto op = build_operation<double>(spec, Stride{}, channels, derive_seed(seed, 1));
        Tensor<double> x = Tensor<double>::zeros({2, channels, T, H, W}, true);
        randomize(x, 0.5);
        std::vector<Tensor<double>> inputs = {x};
        for (const auto& p : op.params())
            if (p.learnable) {
                if (p.tensor.size() > 0 && p.tensor.data()[0] == 0.0 &&
                    (spec.kind == OpKind::ChannelScale || spec.kind == OpKind::ChannelBias))
                    randomize(p.tensor, 0.2);  // move off the zero-init saddle
                inputs.push_back(p.tensor);
            }
        auto report = grad_check<double>(
            [&] { return sum(op.forward(x, true)); }, inputs);
        const bool ok = report.pass(tol);
        all_ok = all_ok && ok;
        std::printf("%-22s %13.3e   %s\n", spec.id().c_str(), report.worst, ok ? "pass" : "FAIL");
    }
    // Relaxed-edge mixture: gradients through alpha and beta.
    {
        CellArch<double> arch = make_cell_arch<double>(CellType::Normal, set, video, 1, 2);
        auto inst = build_cell_instance(arch, channels, channels, channels, Stride{}, derive_seed(seed, 2));
        Tensor<double> x = Tensor<double>::zeros({2, channels, T, H, W}, true);
        randomize(x, 0.5);
        auto& e = arch.edges[0];
        randomize(e.alpha, 0.3);
        randomize(e.beta, 0.3);
        auto report = grad_check<double>(
            [&] { return sum(mixed_edge_forward(e, inst.edge_ops[0], x, true)); },
            {x, e.alpha, e.beta});
        const bool ok = report.pass(tol);
        all_ok = all_ok && ok;
        std::printf("%-22s %13.3e   %s\n", "relaxed_edge(a,b,x)", report.worst, ok ? "pass" : "FAIL");
    }
    if (!all_ok) {
        std::cerr << "gradcheck: at least one operation exceeded tolerance " << tol << "\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cell-based differentiable architecture search with scheduled discretization"};
    app.require_subcommand(1);
    std::function<int()> action;

    SearchArgs sa;
    auto* search = app.add_subcommand("search", "run the bilevel architecture search");
    search->add_option("--config", sa.config, "run configuration JSON")->required();
    search->add_option("--mode", sa.mode, "sdas (scheduled) or das (one-shot)");
    search->add_option("--schedule", sa.schedule, "discretization schedule: A, B, or C");
    search->add_option("--opset", sa.opset, "operation catalog: o2d, o3d, or oadv");
    auto* seed_opt = search->add_option("--seed", sa.seed, "search seed override");
    search->add_option("--out", sa.out_dir, "output directory override");
    search->add_option("--resume", sa.resume, "checkpoint file to resume from");
    search->add_option("--checkpoint-every", sa.checkpoint_every,
                       "iterations between checkpoints (default: one epoch)");
    search->callback([&] {
        sa.seed_set = seed_opt->count() > 0;
        action = [&] { return cmd_search(sa); };
    });

    std::string ev_config, ev_genotype, ev_out;
    auto* ev = app.add_subcommand("evaluate", "train a discrete genotype and report accuracy");
    ev->add_option("--config", ev_config, "run configuration JSON")->required();
    ev->add_option("--genotype", ev_genotype, "genotype JSON file")->required();
    ev->add_option("--out", ev_out, "directory for eval_result.json");
    ev->callback([&] { action = [&] { return cmd_evaluate(ev_config, ev_genotype, ev_out); }; });

    std::string cs_opset = "o2d", cs_types, cs_state, cs_config;
    index_t cs_nint = 4, cs_k = 2;
    bool cs_video = false;
    auto* cs = app.add_subcommand("count-space", "exact reachable-architecture count");
    cs->add_option("--opset", cs_opset, "operation catalog (fresh count)");
    cs->add_option("--n-int", cs_nint, "intermediate nodes per cell");
    cs->add_option("--k", cs_k, "retained inputs per node");
    cs->add_flag("--video", cs_video, "use video strides/catalogs");
    cs->add_option("--cell-types", cs_types, "comma-separated cell types");
    cs->add_option("--state", cs_state, "checkpoint file: count the mid-run space");
    cs->add_option("--config", cs_config, "run configuration (with --state)");
    cs->callback([&] {
        action = [&] {
            return cmd_count_space(cs_opset, cs_nint, cs_k, cs_video, cs_types, cs_state, cs_config);
        };
    });

    std::string ex_genotype, ex_format = "dot", ex_out;
    auto* ex = app.add_subcommand("export", "render a genotype as DOT or JSON");
    ex->add_option("--genotype", ex_genotype, "genotype JSON file")->required();
    ex->add_option("--format", ex_format, "dot or json");
    ex->add_option("--out", ex_out, "output file ('-' = stdout)");
    ex->callback([&] { action = [&] { return cmd_export(ex_genotype, ex_format, ex_out); }; });

    std::string gc_opset = "o2d";
    bool gc_video = false;
    index_t gc_channels = 4;
    double gc_tol = 1e-5;
    std::uint64_t gc_seed = 1;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of operation gradients");
    gc->add_option("--opset", gc_opset, "operation catalog");
    gc->add_flag("--video", gc_video, "check with a temporal extent");
    gc->add_option("--channels", gc_channels, "channel count");
    gc->add_option("--tol", gc_tol, "relative-error tolerance");
    gc->add_option("--seed", gc_seed, "input seed");
    gc->callback([&] {
        action = [&] { return cmd_gradcheck(gc_opset, gc_video, gc_channels, gc_tol, gc_seed); };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    try {
        return action();
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
