// The bilevel search loop and its checkpointing.
//
// Each iteration takes one momentum-SGD step on the operation weights using
// a train-half batch (cosine-annealed rate), then one Adam step on the
// architecture parameters using a validation-half batch, then lets the
// discretization scheduler fix as many items as the schedule demands. In the
// one-shot baseline mode the scheduler is skipped and the whole architecture
// is discretized in a single block after the final iteration.
//
// Every per-iteration random choice (batch composition, augmentation) is a
// pure function of (seed, iteration), so a run can be checkpointed and
// resumed bit-exactly without serializing generator state: a checkpoint is
// the parameter bytes, optimizer state, decision log, and metrics.
#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "sdas/data.hpp"
#include "sdas/network.hpp"
#include "sdas/optim.hpp"
#include "sdas/scheduler.hpp"

namespace sdas {

struct SearchConfig {
    index_t epochs = 10;
    index_t batch = 64;
    double eta1 = 0.025;        // weight learning rate (cosine annealed)
    double momentum = 0.9;
    double weight_decay = 3e-4;
    double eta2 = 3e-4;         // architecture learning rate (Adam, fixed)
    ScheduleId schedule = ScheduleId::C;
    bool das = false;           // one-shot baseline: discretize everything at T
    std::uint64_t seed = 1;
    index_t workers = 1;
    AugmentSpec aug;

    void validate() const {
        if (epochs < 1) throw ConfigError("search: epochs must be >= 1");
        if (batch < 1) throw ConfigError("search: batch must be >= 1");
        if (eta1 < 0 || eta2 < 0) throw ConfigError("search: learning rates must be non-negative");
    }
};

struct MetricsRow {
    index_t iteration = 0;
    double train_loss = 0, val_loss = 0, lr = 0;
    index_t m_t = 0;            // discretizations performed so far
    std::string reachable;      // decimal architecture count after this iteration
};

inline std::string metrics_to_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "iteration,train_loss,val_loss,lr,M_t,reachable_count\n";
    for (const auto& r : rows)
        os << r.iteration << ',' << r.train_loss << ',' << r.val_loss << ',' << r.lr << ',' << r.m_t
           << ',' << r.reachable << '\n';
    return os.str();
}

template <typename S>
struct SearchSession {
    NetworkPlan plan;
    SearchConfig cfg;
    SearchNetwork<S> net;
    SgdMomentum<S> opt_w;
    Adam<S> opt_a;
    SchedulerState sched;
    std::vector<index_t> train_idx, val_idx;
    index_t t = 0;  // completed iterations
    index_t T = 0;
    std::vector<MetricsRow> metrics;

    SearchSession(const NetworkPlan& p, const SearchConfig& c)
        : plan(p),
          cfg(c),
          opt_w(static_cast<S>(c.momentum), static_cast<S>(c.weight_decay)),
          opt_a(static_cast<S>(c.eta2)) {}
};

// The batch of iteration t from a pool that is reshuffled every epoch.
// Purely a function of (pool, batch, t, seed, tag).
inline std::vector<index_t> epoch_slice(const std::vector<index_t>& pool, index_t batch, index_t t,
                                        std::uint64_t seed, std::uint64_t tag) {
    const index_t n = static_cast<index_t>(pool.size());
    const index_t per = (n + batch - 1) / batch;
    const index_t epoch = t / per, pos = t % per;
    std::vector<index_t> sh = pool;
    std::mt19937_64 rng(mix64(derive_seed(seed, tag * 1000003ULL + static_cast<std::uint64_t>(epoch))));
    std::shuffle(sh.begin(), sh.end(), rng);
    const index_t lo = pos * batch, hi = std::min(n, lo + batch);
    return std::vector<index_t>(sh.begin() + lo, sh.begin() + hi);
}

template <typename S>
SearchSession<S> make_search_session(const NetworkPlan& plan, const SearchConfig& cfg,
                                     const Dataset<S>& ds) {
    plan.validate();
    cfg.validate();
    if (ds.n_train < 2) throw ConfigError("search: dataset train split too small to halve");
    SearchSession<S> s(plan, cfg);
    std::tie(s.train_idx, s.val_idx) = half_split(ds.n_train, cfg.seed);
    const index_t per =
        (static_cast<index_t>(s.train_idx.size()) + cfg.batch - 1) / cfg.batch;
    s.T = cfg.epochs * per;
    s.net = build_search_network<S>(plan, derive_seed(cfg.seed, 0));
    s.sched = SchedulerState{Schedule{cfg.schedule, total_steps(s.net.arches), s.T}, {}, 0};
    return s;
}

// One bilevel iteration (weights, then architecture, then the scheduler).
template <typename S>
void search_step(SearchSession<S>& s, const Dataset<S>& ds) {
    if (s.t >= s.T) throw Error("search_step: run already finished");
    const index_t t = s.t;
    auto wp = s.net.weight_params();
    auto ap = s.net.arch_params();
    auto zero_all = [&] {
        for (auto& p : wp) p.zero_grad();
        for (auto& p : ap) p.zero_grad();
    };

    auto tb = epoch_slice(s.train_idx, s.cfg.batch, t, s.cfg.seed, 11);
    auto [tx, ty] = make_batch(ds, tb, Phase::Train, s.cfg.aug,
                               derive_seed(s.cfg.seed, 0xB0000 + static_cast<std::uint64_t>(t)),
                               s.cfg.workers);
    double train_loss;
    {
        Tape<S> tape;
        Tensor<S> loss = cross_entropy_logits(s.net.forward(tx, true), ty);
        train_loss = static_cast<double>(loss.item());
        if (!std::isfinite(train_loss))
            throw DivergenceError("search diverged at iteration " + std::to_string(t) +
                                  " (train loss not finite)");
        tape.backward(loss);
    }
    const double lr_t = cosine_lr(s.cfg.eta1, t, s.T);
    s.opt_w.step(wp, static_cast<S>(lr_t));
    zero_all();  // the train pass also reached alpha/beta; discard those gradients

    auto vb = epoch_slice(s.val_idx, s.cfg.batch, t, s.cfg.seed, 13);
    auto [vx, vy] = make_batch(ds, vb, Phase::Train, s.cfg.aug,
                               derive_seed(s.cfg.seed, 0xC0000 + static_cast<std::uint64_t>(t)),
                               s.cfg.workers);
    double val_loss;
    {
        Tape<S> tape;
        Tensor<S> loss = cross_entropy_logits(s.net.forward(vx, true), vy);
        val_loss = static_cast<double>(loss.item());
        if (!std::isfinite(val_loss))
            throw DivergenceError("search diverged at iteration " + std::to_string(t) +
                                  " (validation loss not finite)");
        tape.backward(loss);
    }
    s.opt_a.step(ap);
    zero_all();

    bool changed = false;
    if (!s.cfg.das) {
        const std::size_t before = s.sched.log.size();
        scheduler_step(s.net.arches, s.sched, t + 1, s.net.hook());
        changed = s.sched.log.size() != before;
    } else if (t + 1 == s.T) {
        discretize_all_at_once(s.net.arches, s.sched, s.T, s.net.hook());
        changed = true;
    }
    if (changed) {
        s.opt_w.prune(s.net.weight_params());
        s.opt_a.prune(s.net.arch_params());
    }

    s.metrics.push_back({t, train_loss, val_loss, lr_t, s.sched.performed,
                         count_reachable(s.net.arches).str()});
    s.t = t + 1;
}

template <typename S>
struct SearchResult {
    Genotype genotype;
    std::vector<DiscRecord> log;
    std::vector<MetricsRow> metrics;
    index_t T = 0;
};

template <typename S>
SearchResult<S> finish_search(SearchSession<S>& s) {
    if (s.t != s.T) throw Error("finish_search: run has not reached T");
    for (const auto& a : s.net.arches)
        if (!a.fully_discrete()) throw Error("finish_search: architecture not fully discretized");
    SearchResult<S> r;
    r.genotype = extract_genotype(s.net, s.cfg.seed,
                                  s.cfg.das ? "das" : schedule_name(s.cfg.schedule));
    r.log = s.sched.log;
    r.metrics = s.metrics;
    r.T = s.T;
    return r;
}

template <typename S>
SearchResult<S> run_search(const NetworkPlan& plan, const SearchConfig& cfg, const Dataset<S>& ds,
                           const std::function<void(SearchSession<S>&)>& per_iter = {}) {
    auto s = make_search_session<S>(plan, cfg, ds);
    while (s.t < s.T) {
        search_step(s, ds);
        if (per_iter) per_iter(s);
    }
    SearchResult<S> r = finish_search(s);
    return r;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

namespace detail {

inline void ck_write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint64_t ck_read_u64(std::istream& is) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
        throw ParseError("checkpoint: truncated (while reading a 64-bit field)");
    return v;
}

inline void ck_write_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline double ck_read_f64(std::istream& is) {
    double v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
        throw ParseError("checkpoint: truncated (while reading a float field)");
    return v;
}

inline void ck_write_str(std::ostream& os, const std::string& s) {
    ck_write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string ck_read_str(std::istream& is) {
    const std::uint64_t n = ck_read_u64(is);
    std::string s(n, '\0');
    if (!is.read(s.data(), static_cast<std::streamsize>(n)))
        throw ParseError("checkpoint: truncated (while reading a string)");
    return s;
}

template <typename S>
void ck_write_vec(std::ostream& os, const std::vector<S>& v) {
    ck_write_u64(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(S)));
}

template <typename S>
std::vector<S> ck_read_vec(std::istream& is) {
    const std::uint64_t n = ck_read_u64(is);
    std::vector<S> v(n);
    if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(S))))
        throw ParseError("checkpoint: truncated (while reading tensor data)");
    return v;
}

template <typename S>
void ck_write_params(std::ostream& os, const std::vector<ParamRef<S>>& refs) {
    ck_write_u64(os, refs.size());
    for (const auto& p : refs) {
        ck_write_str(os, p.name);
        auto d = p.tensor.data();
        ck_write_u64(os, d.size());
        os.write(reinterpret_cast<const char*>(d.data()),
                 static_cast<std::streamsize>(d.size() * sizeof(S)));
    }
}

template <typename S>
void ck_read_params(std::istream& is, const std::vector<ParamRef<S>>& refs) {
    const std::uint64_t n = ck_read_u64(is);
    if (n != refs.size())
        throw ParseError("checkpoint: expected " + std::to_string(refs.size()) +
                         " parameters, file has " + std::to_string(n));
    for (const auto& p : refs) {
        const std::string name = ck_read_str(is);
        if (name != p.name)
            throw ParseError("checkpoint: parameter order mismatch: file has '" + name +
                             "', expected '" + p.name + "'");
        const std::uint64_t count = ck_read_u64(is);
        auto d = p.tensor.data_mut();
        if (count != static_cast<std::uint64_t>(d.size()))
            throw ParseError("checkpoint: parameter '" + name + "' has " + std::to_string(count) +
                             " values, expected " + std::to_string(d.size()));
        if (!is.read(reinterpret_cast<char*>(d.data()),
                     static_cast<std::streamsize>(d.size() * sizeof(S))))
            throw ParseError("checkpoint: truncated inside parameter '" + name + "'");
    }
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "SDASCKP1";

// Serialize a mid-run session. `config_text` is an opaque fingerprint (the
// resolved run configuration); resuming verifies it matches.
template <typename S>
void save_checkpoint(SearchSession<S>& s, const std::string& path, const std::string& config_text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("checkpoint: cannot write '" + path + "'");
    os.write(kCheckpointMagic, 8);
    detail::ck_write_str(os, config_text);
    detail::ck_write_u64(os, static_cast<std::uint64_t>(s.t));
    detail::ck_write_u64(os, static_cast<std::uint64_t>(s.T));
    detail::ck_write_u64(os, static_cast<std::uint64_t>(s.sched.performed));
    detail::ck_write_str(os, disc_log_to_string(s.sched.log));
    detail::ck_write_params(os, s.net.arch_param_refs());
    detail::ck_write_params(os, s.net.weight_param_refs());
    // SGD velocity per learnable weight, Adam state per architecture param.
    std::vector<ParamRef<S>> learnable;
    for (const auto& p : s.net.weight_param_refs())
        if (p.learnable) learnable.push_back(p);
    detail::ck_write_u64(os, learnable.size());
    for (const auto& p : learnable) {
        detail::ck_write_str(os, p.name);
        detail::ck_write_vec(os, s.opt_w.velocity(p.tensor));
    }
    detail::ck_write_u64(os, static_cast<std::uint64_t>(s.opt_a.step_count()));
    const auto arefs = s.net.arch_param_refs();
    detail::ck_write_u64(os, arefs.size());
    for (const auto& p : arefs) {
        detail::ck_write_str(os, p.name);
        auto& st = s.opt_a.state(p.tensor);
        detail::ck_write_vec(os, st.m);
        detail::ck_write_vec(os, st.v);
    }
    detail::ck_write_u64(os, s.metrics.size());
    for (const auto& r : s.metrics) {
        detail::ck_write_u64(os, static_cast<std::uint64_t>(r.iteration));
        detail::ck_write_f64(os, r.train_loss);
        detail::ck_write_f64(os, r.val_loss);
        detail::ck_write_f64(os, r.lr);
        detail::ck_write_u64(os, static_cast<std::uint64_t>(r.m_t));
        detail::ck_write_str(os, r.reachable);
    }
    if (!os) throw Error("checkpoint: write to '" + path + "' failed");
}

// The cheap-to-read prefix of a checkpoint: enough to inspect progress and
// replay the structural state without touching parameter bytes.
struct CheckpointHead {
    std::string config_text;
    index_t t = 0, T = 0, performed = 0;
    std::vector<DiscRecord> log;
};

inline CheckpointHead read_checkpoint_head(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw ParseError("checkpoint: '" + path + "' is not a checkpoint file");
    CheckpointHead h;
    h.config_text = detail::ck_read_str(is);
    h.t = static_cast<index_t>(detail::ck_read_u64(is));
    h.T = static_cast<index_t>(detail::ck_read_u64(is));
    h.performed = static_cast<index_t>(detail::ck_read_u64(is));
    h.log = disc_log_from_string(detail::ck_read_str(is));
    return h;
}

// Rebuild a session from a checkpoint. Plan, config, and dataset must be the
// ones the checkpoint was produced with (the config text is verified; the
// network is rebuilt, structurally replayed from the decision log, and then
// overwritten with the stored parameter bytes).
template <typename S>
SearchSession<S> load_checkpoint(const NetworkPlan& plan, const SearchConfig& cfg,
                                 const Dataset<S>& ds, const std::string& path,
                                 const std::string& config_text) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw ParseError("checkpoint: '" + path + "' is not a checkpoint file");
    const std::string stored_cfg = detail::ck_read_str(is);
    if (stored_cfg != config_text)
        throw ConfigError("checkpoint: stored configuration differs from the current one");

    SearchSession<S> s = make_search_session<S>(plan, cfg, ds);
    s.t = static_cast<index_t>(detail::ck_read_u64(is));
    const index_t T = static_cast<index_t>(detail::ck_read_u64(is));
    if (T != s.T)
        throw ParseError("checkpoint: horizon " + std::to_string(T) + " != expected " +
                         std::to_string(s.T));
    s.sched.performed = static_cast<index_t>(detail::ck_read_u64(is));
    s.sched.log = disc_log_from_string(detail::ck_read_str(is));
    replay_log(s.sched.log, s.net.arches, s.net.hook());
    detail::ck_read_params(is, s.net.arch_param_refs());
    detail::ck_read_params(is, s.net.weight_param_refs());
    const std::uint64_t nvel = detail::ck_read_u64(is);
    std::vector<ParamRef<S>> learnable;
    for (const auto& p : s.net.weight_param_refs())
        if (p.learnable) learnable.push_back(p);
    if (nvel != learnable.size()) throw ParseError("checkpoint: velocity count mismatch");
    for (const auto& p : learnable) {
        const std::string name = detail::ck_read_str(is);
        if (name != p.name)
            throw ParseError("checkpoint: velocity order mismatch at '" + name + "'");
        auto vel = detail::ck_read_vec<S>(is);
        if (vel.size() != static_cast<std::size_t>(p.tensor.size()))
            throw ParseError("checkpoint: velocity size mismatch at '" + name + "'");
        s.opt_w.velocity(p.tensor) = std::move(vel);
    }
    s.opt_a.set_step_count(static_cast<index_t>(detail::ck_read_u64(is)));
    const std::uint64_t nadam = detail::ck_read_u64(is);
    const auto arefs = s.net.arch_param_refs();
    if (nadam != arefs.size()) throw ParseError("checkpoint: Adam state count mismatch");
    for (const auto& p : arefs) {
        const std::string name = detail::ck_read_str(is);
        if (name != p.name)
            throw ParseError("checkpoint: Adam state order mismatch at '" + name + "'");
        auto m = detail::ck_read_vec<S>(is);
        auto v = detail::ck_read_vec<S>(is);
        if (m.size() != static_cast<std::size_t>(p.tensor.size()) || v.size() != m.size())
            throw ParseError("checkpoint: Adam state size mismatch at '" + name + "'");
        auto& st = s.opt_a.state(p.tensor);
        st.m = std::move(m);
        st.v = std::move(v);
    }
    const std::uint64_t nrows = detail::ck_read_u64(is);
    s.metrics.clear();
    for (std::uint64_t i = 0; i < nrows; ++i) {
        MetricsRow r;
        r.iteration = static_cast<index_t>(detail::ck_read_u64(is));
        r.train_loss = detail::ck_read_f64(is);
        r.val_loss = detail::ck_read_f64(is);
        r.lr = detail::ck_read_f64(is);
        r.m_t = static_cast<index_t>(detail::ck_read_u64(is));
        r.reachable = detail::ck_read_str(is);
        s.metrics.push_back(std::move(r));
    }
    return s;
}

}  // namespace sdas
