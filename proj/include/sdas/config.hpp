// Run configuration: a single JSON document describing the dataset, the
// network plans for search and final training, the search hyperparameters,
// and augmentation. Every field has a default (some depend on the target);
// unknown keys are rejected with the offending key and section named. The
// fully resolved configuration (all defaults materialized) can be serialized
// back out, and that text doubles as the checkpoint compatibility
// fingerprint.
#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdas/data.hpp"
#include "sdas/network.hpp"
#include "sdas/search.hpp"

namespace sdas {

using json = nlohmann::json;

struct DatasetConfig {
    DatasetKind kind = DatasetKind::SynthImage;
    std::string dir;            // cifar10 only
    index_t num_classes = 10;
    index_t n_train = 256;      // synthetic only
    index_t n_test = 128;
    std::vector<index_t> shape;  // synthetic sample shape (C,H,W) or (C,T,H,W)
    double noise = 0.1;
    std::uint64_t seed = 1;
};

struct EvalSection {
    index_t epochs = 20;
    index_t batch = 64;
    double lr = 0.025;
    double momentum = 0.9;
    double weight_decay = 3e-4;
    std::uint64_t seed = 1;
    index_t workers = 1;
    index_t K = 0, C1 = 0, C2 = 0;  // final-training plan overrides
};

struct RunConfig {
    DatasetConfig dataset;
    NetworkPlan network;  // search-time plan (num_classes/in_channels filled from dataset)
    SearchConfig search;
    EvalSection eval;
    AugmentSpec augment;
    std::string out_dir = "run";
};

namespace detail {

inline void check_keys(const json& j, const std::string& section,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                ok = true;
                break;
            }
        if (!ok)
            throw ConfigError("config: unknown key '" + it.key() + "' in section '" + section + "'");
    }
}

template <typename T>
T get_field(const json& j, const char* key, T def, const std::string& section) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config: bad value for '" + section + "." + key + "': " + e.what());
    }
}

}  // namespace detail

// Parse (with defaults) and validate. Target-dependent defaults: image runs
// use the o2d catalog, the lowres stem, C1=48/C2=64 for search and
// K=6/C1=108/C2=144 for final training; video runs use the o3d catalog, the
// video stem, C1=16/C2=64 for search and K=2/C1=32/C2=128 for final
// training.
inline RunConfig config_from_json(const json& j) {
    detail::check_keys(j, "(root)",
                       {"dataset", "network", "search", "eval", "augment", "out_dir"});
    RunConfig cfg;

    const json jd = j.value("dataset", json::object());
    detail::check_keys(jd, "dataset",
                       {"kind", "dir", "num_classes", "n_train", "n_test", "shape", "noise", "seed"});
    cfg.dataset.kind =
        parse_dataset_kind(detail::get_field<std::string>(jd, "kind", "synthetic_image", "dataset"));
    cfg.dataset.dir = detail::get_field<std::string>(jd, "dir", "data/cifar-10-batches-bin", "dataset");
    cfg.dataset.num_classes = detail::get_field<index_t>(jd, "num_classes", 10, "dataset");
    cfg.dataset.n_train = detail::get_field<index_t>(jd, "n_train", 256, "dataset");
    cfg.dataset.n_test = detail::get_field<index_t>(jd, "n_test", 128, "dataset");
    const bool video = cfg.dataset.kind == DatasetKind::SynthClip;
    const std::vector<index_t> default_shape =
        video ? std::vector<index_t>{3, 8, 16, 16} : std::vector<index_t>{3, 20, 20};
    cfg.dataset.shape = detail::get_field<std::vector<index_t>>(jd, "shape", default_shape, "dataset");
    cfg.dataset.noise = detail::get_field<double>(jd, "noise", 0.1, "dataset");
    cfg.dataset.seed = detail::get_field<std::uint64_t>(jd, "seed", 1, "dataset");
    if (cfg.dataset.kind == DatasetKind::Cifar10) cfg.dataset.shape = {3, 32, 32};
    if (video && cfg.dataset.shape.size() != 4)
        throw ConfigError("config: dataset.shape must be (C,T,H,W) for clips");
    if (!video && cfg.dataset.shape.size() != 3)
        throw ConfigError("config: dataset.shape must be (C,H,W) for images");

    const json jn = j.value("network", json::object());
    detail::check_keys(jn, "network", {"op_set", "stem", "K", "C1", "C2", "n_int", "k"});
    cfg.network.target = video ? NetworkTarget::Video : NetworkTarget::Image;
    cfg.network.op_set =
        parse_opset(detail::get_field<std::string>(jn, "op_set", video ? "o3d" : "o2d", "network"));
    cfg.network.stem = parse_stem_kind(
        detail::get_field<std::string>(jn, "stem", video ? "video" : "lowres", "network"));
    cfg.network.K = detail::get_field<index_t>(jn, "K", 2, "network");
    cfg.network.C1 = detail::get_field<index_t>(jn, "C1", video ? 16 : 48, "network");
    cfg.network.C2 = detail::get_field<index_t>(jn, "C2", 64, "network");
    cfg.network.n_int = detail::get_field<index_t>(jn, "n_int", 4, "network");
    cfg.network.k = detail::get_field<index_t>(jn, "k", 2, "network");
    cfg.network.num_classes = cfg.dataset.num_classes;
    cfg.network.in_channels = cfg.dataset.shape[0];
    if (!video && cfg.network.op_set != OpSetId::O2D)
        throw ConfigError("config: image runs use the o2d catalog");
    if (video && cfg.network.op_set == OpSetId::O2D)
        throw ConfigError("config: video runs use the o3d or oadv catalog");

    const json js = j.value("search", json::object());
    detail::check_keys(js, "search",
                       {"mode", "schedule", "epochs", "batch", "eta1", "momentum", "weight_decay",
                        "eta2", "seed", "workers"});
    const std::string mode = detail::get_field<std::string>(js, "mode", "sdas", "search");
    if (mode != "sdas" && mode != "das")
        throw ConfigError("config: search.mode must be 'sdas' or 'das'");
    cfg.search.das = mode == "das";
    cfg.search.schedule =
        parse_schedule(detail::get_field<std::string>(js, "schedule", "C", "search"));
    cfg.search.epochs = detail::get_field<index_t>(js, "epochs", 10, "search");
    cfg.search.batch = detail::get_field<index_t>(js, "batch", 64, "search");
    cfg.search.eta1 = detail::get_field<double>(js, "eta1", 0.025, "search");
    cfg.search.momentum = detail::get_field<double>(js, "momentum", 0.9, "search");
    cfg.search.weight_decay = detail::get_field<double>(js, "weight_decay", 3e-4, "search");
    cfg.search.eta2 = detail::get_field<double>(js, "eta2", 3e-4, "search");
    cfg.search.seed = detail::get_field<std::uint64_t>(js, "seed", 1, "search");
    cfg.search.workers = detail::get_field<index_t>(js, "workers", 1, "search");

    const json je = j.value("eval", json::object());
    detail::check_keys(je, "eval",
                       {"epochs", "batch", "lr", "momentum", "weight_decay", "seed", "workers", "K",
                        "C1", "C2"});
    cfg.eval.epochs = detail::get_field<index_t>(je, "epochs", 20, "eval");
    cfg.eval.batch = detail::get_field<index_t>(je, "batch", 64, "eval");
    cfg.eval.lr = detail::get_field<double>(je, "lr", 0.025, "eval");
    cfg.eval.momentum = detail::get_field<double>(je, "momentum", 0.9, "eval");
    cfg.eval.weight_decay = detail::get_field<double>(je, "weight_decay", 3e-4, "eval");
    cfg.eval.seed = detail::get_field<std::uint64_t>(je, "seed", 1, "eval");
    cfg.eval.workers = detail::get_field<index_t>(je, "workers", 1, "eval");
    cfg.eval.K = detail::get_field<index_t>(je, "K", video ? 2 : 6, "eval");
    cfg.eval.C1 = detail::get_field<index_t>(je, "C1", video ? 32 : 108, "eval");
    cfg.eval.C2 = detail::get_field<index_t>(je, "C2", video ? 128 : 144, "eval");

    const json ja = j.value("augment", json::object());
    detail::check_keys(ja, "augment", {"pad", "crop", "resize_short", "window_t", "flip"});
    cfg.augment.pad = detail::get_field<index_t>(ja, "pad", video ? 0 : 4, "augment");
    std::vector<index_t> crop =
        detail::get_field<std::vector<index_t>>(ja, "crop", std::vector<index_t>{}, "augment");
    if (crop.size() == 2) {
        cfg.augment.crop_h = crop[0];
        cfg.augment.crop_w = crop[1];
    } else if (!crop.empty()) {
        throw ConfigError("config: augment.crop must be [h, w]");
    }
    cfg.augment.resize_short = detail::get_field<index_t>(ja, "resize_short", 0, "augment");
    cfg.augment.window_t = detail::get_field<index_t>(ja, "window_t", 0, "augment");
    cfg.augment.flip = detail::get_field<bool>(ja, "flip", true, "augment");
    cfg.search.aug = cfg.augment;

    cfg.out_dir = detail::get_field<std::string>(j, "out_dir", "run", "(root)");

    cfg.network.validate();
    cfg.search.validate();
    return cfg;
}

// Serialize with every field explicit.
inline json config_to_json(const RunConfig& cfg) {
    json j;
    j["dataset"] = {{"kind", dataset_kind_name(cfg.dataset.kind)},
                    {"dir", cfg.dataset.dir},
                    {"num_classes", cfg.dataset.num_classes},
                    {"n_train", cfg.dataset.n_train},
                    {"n_test", cfg.dataset.n_test},
                    {"shape", cfg.dataset.shape},
                    {"noise", cfg.dataset.noise},
                    {"seed", cfg.dataset.seed}};
    j["network"] = {{"op_set", opset_name(cfg.network.op_set)},
                    {"stem", stem_kind_name(cfg.network.stem)},
                    {"K", cfg.network.K},
                    {"C1", cfg.network.C1},
                    {"C2", cfg.network.C2},
                    {"n_int", cfg.network.n_int},
                    {"k", cfg.network.k}};
    j["search"] = {{"mode", cfg.search.das ? "das" : "sdas"},
                   {"schedule", schedule_name(cfg.search.schedule)},
                   {"epochs", cfg.search.epochs},
                   {"batch", cfg.search.batch},
                   {"eta1", cfg.search.eta1},
                   {"momentum", cfg.search.momentum},
                   {"weight_decay", cfg.search.weight_decay},
                   {"eta2", cfg.search.eta2},
                   {"seed", cfg.search.seed},
                   {"workers", cfg.search.workers}};
    j["eval"] = {{"epochs", cfg.eval.epochs},
                 {"batch", cfg.eval.batch},
                 {"lr", cfg.eval.lr},
                 {"momentum", cfg.eval.momentum},
                 {"weight_decay", cfg.eval.weight_decay},
                 {"seed", cfg.eval.seed},
                 {"workers", cfg.eval.workers},
                 {"K", cfg.eval.K},
                 {"C1", cfg.eval.C1},
                 {"C2", cfg.eval.C2}};
    j["augment"] = {{"pad", cfg.augment.pad},
                    {"crop", std::vector<index_t>{cfg.augment.crop_h, cfg.augment.crop_w}},
                    {"resize_short", cfg.augment.resize_short},
                    {"window_t", cfg.augment.window_t},
                    {"flip", cfg.augment.flip}};
    j["out_dir"] = cfg.out_dir;
    return j;
}

inline std::string config_to_string(const RunConfig& cfg) { return config_to_json(cfg).dump(2) + "\n"; }

inline RunConfig config_from_string(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config: invalid JSON text");
    return config_from_json(j);
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_string(ss.str());
}

// Materialize the dataset the config describes.
template <typename S>
Dataset<S> build_dataset(const DatasetConfig& d) {
    switch (d.kind) {
        case DatasetKind::Cifar10: return load_cifar10<S>(d.dir);
        case DatasetKind::SynthImage:
            return synth_images<S>(d.num_classes, d.n_train, d.n_test,
                                   Shape(d.shape.begin(), d.shape.end()), d.noise, d.seed);
        case DatasetKind::SynthClip:
            return synth_clips<S>(d.num_classes, d.n_train, d.n_test,
                                  Shape(d.shape.begin(), d.shape.end()), d.noise, d.seed);
    }
    throw ConfigError("unknown dataset kind");
}

inline NetworkPlan search_plan(const RunConfig& cfg) { return cfg.network; }

// Final-training plan: the searched cell structure at evaluation width/depth.
inline NetworkPlan eval_plan(const RunConfig& cfg) {
    NetworkPlan p = cfg.network;
    p.K = cfg.eval.K;
    p.C1 = cfg.eval.C1;
    p.C2 = cfg.eval.C2;
    return p;
}

inline TrainEvalConfig eval_train_config(const RunConfig& cfg) {
    TrainEvalConfig t;
    t.epochs = cfg.eval.epochs;
    t.batch = cfg.eval.batch;
    t.lr = cfg.eval.lr;
    t.momentum = cfg.eval.momentum;
    t.weight_decay = cfg.eval.weight_decay;
    t.aug = cfg.augment;
    t.seed = cfg.eval.seed;
    t.workers = cfg.eval.workers;
    return t;
}

}  // namespace sdas
