// Dataset ingestion and synthesis.
//
//   - CIFAR-10 binary batches: fixed 3073-byte records (label byte + three
//     1024-byte row-major channel planes), stored as raw bytes and normalized
//     on materialization with train-split statistics.
//   - Synthetic images: per-class Gaussian-blob templates on a grid chosen so
//     classes stay linearly separable after 4x spatial pooling; additive
//     noise on top.
//   - Synthetic clips: the same kind of blob translating horizontally with
//     toroidal wrap. Classes combine a per-frame-visible pattern (vertical
//     band) with a motion direction; a clip and its opposite-direction twin
//     at the same phase contain the same frames in a different order, so any
//     frame-order-insensitive classifier cannot separate directions.
//   - Augmentation: image training pads by 4 and random-crops back with
//     random horizontal flip; clip training short-edge-resizes, random-crops
//     spatially, and random-windows temporally; eval uses the deterministic
//     center crop/window. Augmentation is pure given a per-sample seed.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "sdas/common.hpp"
#include "sdas/tensor.hpp"

namespace sdas {

constexpr index_t kCifarRecordBytes = 3073;  // 1 label + 3 * 32 * 32
constexpr index_t kCifarPlane = 1024;

struct CifarRecord {
    std::uint8_t label = 0;
    std::array<std::uint8_t, 3 * kCifarPlane> pixels{};  // R, G, B planes
};

// Parse one file of packed 3073-byte records.
inline std::vector<CifarRecord> read_cifar_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cifar: cannot open '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % static_cast<std::size_t>(kCifarRecordBytes) != 0) {
        const std::size_t full = bytes.size() / static_cast<std::size_t>(kCifarRecordBytes);
        throw ParseError("cifar: '" + path + "' truncated: record starting at byte offset " +
                         std::to_string(full * static_cast<std::size_t>(kCifarRecordBytes)) +
                         " has only " +
                         std::to_string(bytes.size() - full * static_cast<std::size_t>(kCifarRecordBytes)) +
                         " of " + std::to_string(kCifarRecordBytes) + " bytes");
    }
    std::vector<CifarRecord> out(bytes.size() / static_cast<std::size_t>(kCifarRecordBytes));
    for (std::size_t r = 0; r < out.size(); ++r) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data()) + r * kCifarRecordBytes;
        if (p[0] > 9)
            throw ParseError("cifar: '" + path + "': label byte " + std::to_string(int(p[0])) +
                             " out of range at byte offset " +
                             std::to_string(r * static_cast<std::size_t>(kCifarRecordBytes)));
        out[r].label = p[0];
        std::copy(p + 1, p + kCifarRecordBytes, out[r].pixels.begin());
    }
    return out;
}

inline void write_cifar_file(const std::string& path, const std::vector<CifarRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cifar: cannot write '" + path + "'");
    for (const auto& r : records) {
        out.put(static_cast<char>(r.label));
        out.write(reinterpret_cast<const char*>(r.pixels.data()),
                  static_cast<std::streamsize>(r.pixels.size()));
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

enum class DatasetKind { Cifar10, SynthImage, SynthClip };

inline std::string dataset_kind_name(DatasetKind k) {
    switch (k) {
        case DatasetKind::Cifar10: return "cifar10";
        case DatasetKind::SynthImage: return "synthetic_image";
        case DatasetKind::SynthClip: return "synthetic_clip";
    }
    throw ConfigError("unknown dataset kind");
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
    if (s == "cifar10") return DatasetKind::Cifar10;
    if (s == "synthetic_image") return DatasetKind::SynthImage;
    if (s == "synthetic_clip") return DatasetKind::SynthClip;
    throw ConfigError("unknown dataset kind '" + s + "'");
}

template <typename S>
struct Dataset {
    DatasetKind kind = DatasetKind::SynthImage;
    index_t num_classes = 10;
    Shape sample_shape;  // (C, T, H, W); T = 1 for images
    std::vector<std::uint8_t> pixels_u8;  // CIFAR storage (per-sample planes)
    std::vector<S> pixels;                // synthetic storage
    std::vector<int> labels;
    index_t n_train = 0;  // samples [0, n_train) are train, rest test
    std::array<S, 3> norm_mean{S(0), S(0), S(0)};
    std::array<S, 3> norm_std{S(1), S(1), S(1)};
    bool standardize = false;

    index_t size() const { return static_cast<index_t>(labels.size()); }
    index_t n_test() const { return size() - n_train; }
    index_t sample_numel() const { return numel(sample_shape); }

    // Materialize one sample as (C, T, H, W), normalized for CIFAR.
    Tensor<S> sample(index_t i) const {
        if (i < 0 || i >= size()) throw Error("dataset: sample index out of range");
        std::vector<S> buf(static_cast<std::size_t>(sample_numel()));
        if (!pixels_u8.empty()) {
            const std::uint8_t* src = pixels_u8.data() + i * sample_numel();
            const index_t per_channel = sample_numel() / sample_shape[0];
            for (index_t c = 0; c < sample_shape[0]; ++c) {
                const S mu = standardize ? norm_mean[static_cast<std::size_t>(c % 3)] : S(0);
                const S sd = standardize ? norm_std[static_cast<std::size_t>(c % 3)] : S(1);
                for (index_t j = 0; j < per_channel; ++j) {
                    const index_t idx = c * per_channel + j;
                    buf[static_cast<std::size_t>(idx)] =
                        (static_cast<S>(src[idx]) / S(255) - mu) / sd;
                }
            }
        } else {
            const S* src = pixels.data() + i * sample_numel();
            std::copy(src, src + sample_numel(), buf.begin());
        }
        return Tensor<S>::from_data(sample_shape, std::move(buf));
    }

    std::vector<index_t> train_indices() const {
        std::vector<index_t> idx(static_cast<std::size_t>(n_train));
        for (index_t i = 0; i < n_train; ++i) idx[static_cast<std::size_t>(i)] = i;
        return idx;
    }
    std::vector<index_t> test_indices() const {
        std::vector<index_t> idx;
        for (index_t i = n_train; i < size(); ++i) idx.push_back(i);
        return idx;
    }
};

// Load the standard binary batches: data_batch_1..5.bin (train) and
// test_batch.bin. Pixels stay as raw bytes; per-channel standardization
// statistics are computed from the train split only.
template <typename S>
Dataset<S> load_cifar10(const std::string& dir) {
    Dataset<S> ds;
    ds.kind = DatasetKind::Cifar10;
    ds.num_classes = 10;
    ds.sample_shape = {3, 1, 32, 32};
    ds.standardize = true;
    auto append = [&](const std::string& file) {
        for (const auto& r : read_cifar_file((std::filesystem::path(dir) / file).string())) {
            ds.labels.push_back(r.label);
            ds.pixels_u8.insert(ds.pixels_u8.end(), r.pixels.begin(), r.pixels.end());
        }
    };
    for (int b = 1; b <= 5; ++b) append("data_batch_" + std::to_string(b) + ".bin");
    ds.n_train = ds.size();
    append("test_batch.bin");

    // Train-split statistics, cached on the dataset (biased std).
    for (index_t c = 0; c < 3; ++c) {
        double sum = 0, sum2 = 0;
        const index_t n = ds.n_train * kCifarPlane;
        for (index_t i = 0; i < ds.n_train; ++i) {
            const std::uint8_t* p = ds.pixels_u8.data() + i * 3 * kCifarPlane + c * kCifarPlane;
            for (index_t j = 0; j < kCifarPlane; ++j) {
                const double v = static_cast<double>(p[j]) / 255.0;
                sum += v;
                sum2 += v * v;
            }
        }
        const double mu = sum / static_cast<double>(n);
        ds.norm_mean[static_cast<std::size_t>(c)] = static_cast<S>(mu);
        ds.norm_std[static_cast<std::size_t>(c)] =
            static_cast<S>(std::sqrt(std::max(sum2 / static_cast<double>(n) - mu * mu, 1e-12)));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

namespace detail {

// Class-template blob geometry. Images: 10 classes on a 5-column x 2-row
// grid (4-pixel column spacing at the default 20x20 keeps pooled cells
// distinct). Clips: pattern index = vertical band, direction = +-1.
template <typename S>
void add_blob(S* frame, index_t C, index_t H, index_t W, double cy, double cx, double sigma,
              const std::array<double, 3>& amp, bool wrap_x) {
    for (index_t c = 0; c < C; ++c)
        for (index_t y = 0; y < H; ++y)
            for (index_t x = 0; x < W; ++x) {
                double dx = static_cast<double>(x) - cx;
                if (wrap_x) {
                    const double w = static_cast<double>(W);
                    dx = std::fmod(std::fmod(dx, w) + w + w / 2, w) - w / 2;
                }
                const double dy = static_cast<double>(y) - cy;
                const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                frame[(c * H + y) * W + x] +=
                    static_cast<S>(amp[static_cast<std::size_t>(c % 3)] * v);
            }
}

inline std::array<double, 3> class_amplitudes(index_t cls) {
    return {1.0, 0.55 + 0.04 * static_cast<double>(cls), 1.0 - 0.05 * static_cast<double>(cls)};
}

}  // namespace detail

// Noise-free class template for images (the nearest-centroid oracle target).
template <typename S>
std::vector<S> synth_image_template(index_t cls, index_t C, index_t H, index_t W) {
    std::vector<S> img(static_cast<std::size_t>(C * H * W), S(0));
    const index_t col = cls % 5, row = cls / 5;
    const double cx = (static_cast<double>(col) + 0.5) / 5.0 * static_cast<double>(W);
    const double cy = (static_cast<double>(row) + 0.5) / 2.0 * static_cast<double>(H);
    detail::add_blob(img.data(), C, H, W, cy, cx, static_cast<double>(std::min(H, W)) / 10.0,
                     detail::class_amplitudes(cls), false);
    return img;
}

// Balanced synthetic image dataset: template(class) + Gaussian noise.
template <typename S>
Dataset<S> synth_images(index_t num_classes, index_t n_train, index_t n_test, Shape chw, double noise,
                        std::uint64_t seed) {
    if (chw.size() != 3) throw ConfigError("synth_images: shape must be (C, H, W)");
    if (num_classes > 10) throw ConfigError("synth_images: at most 10 classes");
    const index_t C = chw[0], H = chw[1], W = chw[2];
    Dataset<S> ds;
    ds.kind = DatasetKind::SynthImage;
    ds.num_classes = num_classes;
    ds.sample_shape = {C, 1, H, W};
    ds.n_train = n_train;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    const index_t total = n_train + n_test;
    if (total < num_classes) throw ConfigError("synth_images: need at least one sample per class");
    for (index_t i = 0; i < total; ++i) {
        const index_t cls = i % num_classes;  // round-robin: balanced within +-1
        auto img = synth_image_template<S>(cls, C, H, W);
        for (auto& v : img) v += static_cast<S>(noise * nd(rng));
        ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
        ds.labels.push_back(static_cast<int>(cls));
    }
    return ds;
}

// Noise-free clip for (pattern, direction) at a given phase. Pattern sets the
// vertical band (visible in every frame); direction only affects frame order:
// a +1 and a -1 clip at the same phase traverse the same position set.
template <typename S>
std::vector<S> synth_clip_frames(index_t pattern, int direction, double phase, index_t C, index_t T,
                                 index_t H, index_t W, index_t speed, index_t patterns) {
    std::vector<S> clip(static_cast<std::size_t>(C * T * H * W), S(0));
    const double cy =
        (static_cast<double>(pattern) + 0.5) / static_cast<double>(patterns) * static_cast<double>(H);
    const double sigma = static_cast<double>(std::min(H, W)) / 12.0;
    const auto amp = detail::class_amplitudes(pattern);
    for (index_t t = 0; t < T; ++t) {
        const double cx = std::fmod(
            phase + static_cast<double>(direction) * static_cast<double>(speed * t) +
                16.0 * static_cast<double>(W),
            static_cast<double>(W));
        // frame (C, H, W) slice at time t within (C, T, H, W) layout
        for (index_t c = 0; c < C; ++c) {
            S* fr = clip.data() + (c * T + t) * H * W;
            detail::add_blob(fr, 1, H, W, cy, cx, sigma, {amp[static_cast<std::size_t>(c % 3)], 0, 0},
                             true);
        }
    }
    return clip;
}

// Balanced synthetic clip dataset. Classes: pattern p in [0, patterns) with
// direction +1, then the same patterns with direction -1.
template <typename S>
Dataset<S> synth_clips(index_t num_classes, index_t n_train, index_t n_test, Shape cthw, double noise,
                       std::uint64_t seed, index_t speed = 2) {
    if (cthw.size() != 4) throw ConfigError("synth_clips: shape must be (C, T, H, W)");
    if (num_classes % 2 != 0) throw ConfigError("synth_clips: class count must be even");
    const index_t patterns = num_classes / 2;
    const index_t C = cthw[0], T = cthw[1], H = cthw[2], W = cthw[3];
    Dataset<S> ds;
    ds.kind = DatasetKind::SynthClip;
    ds.num_classes = num_classes;
    ds.sample_shape = {C, T, H, W};
    ds.n_train = n_train;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(0.0, static_cast<double>(W));
    const index_t total = n_train + n_test;
    if (total < num_classes) throw ConfigError("synth_clips: need at least one sample per class");
    for (index_t i = 0; i < total; ++i) {
        const index_t cls = i % num_classes;
        const index_t pattern = cls % patterns;
        const int direction = cls < patterns ? 1 : -1;
        auto clip = synth_clip_frames<S>(pattern, direction, ud(rng), C, T, H, W, speed, patterns);
        for (auto& v : clip) v += static_cast<S>(noise * nd(rng));
        ds.pixels.insert(ds.pixels.end(), clip.begin(), clip.end());
        ds.labels.push_back(static_cast<int>(cls));
    }
    return ds;
}

// Permute the frames of a (C, T, H, W) clip.
template <typename S>
Tensor<S> shuffle_frames(const Tensor<S>& clip, std::mt19937_64& rng) {
    if (clip.dim() != 4) throw ShapeError("shuffle_frames: expected (C, T, H, W)");
    const index_t C = clip.shape()[0], T = clip.shape()[1], HW = clip.shape()[2] * clip.shape()[3];
    std::vector<index_t> perm(static_cast<std::size_t>(T));
    for (index_t t = 0; t < T; ++t) perm[static_cast<std::size_t>(t)] = t;
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<S> out = Tensor<S>::zeros(clip.shape());
    auto src = clip.data();
    auto dst = out.data_mut();
    for (index_t c = 0; c < C; ++c)
        for (index_t t = 0; t < T; ++t)
            std::copy(src.data() + (c * T + perm[static_cast<std::size_t>(t)]) * HW,
                      src.data() + (c * T + perm[static_cast<std::size_t>(t)] + 1) * HW,
                      dst.data() + (c * T + t) * HW);
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentSpec {
    index_t pad = 4;           // image: zero padding per side before cropping
    index_t crop_h = 0;        // 0 = keep input extent
    index_t crop_w = 0;
    index_t resize_short = 0;  // video: 0 = no resize
    index_t window_t = 0;      // video: 0 = keep all frames
    bool flip = true;
};

namespace detail {

// Bilinear spatial resize of (C, T, H, W); sample centers aligned
// (src = (dst + 0.5) * scale - 0.5).
template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& x, index_t out_h, index_t out_w) {
    const index_t C = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    Tensor<S> out = Tensor<S>::zeros({C, T, out_h, out_w});
    auto src = x.data();
    auto dst = out.data_mut();
    const double sh = static_cast<double>(H) / static_cast<double>(out_h);
    const double sw = static_cast<double>(W) / static_cast<double>(out_w);
    for (index_t ct = 0; ct < C * T; ++ct) {
        const S* sp = src.data() + ct * H * W;
        S* dp = dst.data() + ct * out_h * out_w;
        for (index_t y = 0; y < out_h; ++y) {
            double fy = (static_cast<double>(y) + 0.5) * sh - 0.5;
            fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
            const index_t y0 = static_cast<index_t>(fy);
            const index_t y1 = std::min(y0 + 1, H - 1);
            const double wy = fy - static_cast<double>(y0);
            for (index_t xo = 0; xo < out_w; ++xo) {
                double fx = (static_cast<double>(xo) + 0.5) * sw - 0.5;
                fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
                const index_t x0 = static_cast<index_t>(fx);
                const index_t x1 = std::min(x0 + 1, W - 1);
                const double wx = fx - static_cast<double>(x0);
                const double v = (1 - wy) * ((1 - wx) * static_cast<double>(sp[y0 * W + x0]) +
                                             wx * static_cast<double>(sp[y0 * W + x1])) +
                                 wy * ((1 - wx) * static_cast<double>(sp[y1 * W + x0]) +
                                       wx * static_cast<double>(sp[y1 * W + x1]));
                dp[y * out_w + xo] = static_cast<S>(v);
            }
        }
    }
    return out;
}

template <typename S>
Tensor<S> pad_spatial(const Tensor<S>& x, index_t pad) {
    const index_t C = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    Tensor<S> out = Tensor<S>::zeros({C, T, H + 2 * pad, W + 2 * pad});
    auto src = x.data();
    auto dst = out.data_mut();
    const index_t OH = H + 2 * pad, OW = W + 2 * pad;
    for (index_t ct = 0; ct < C * T; ++ct)
        for (index_t y = 0; y < H; ++y)
            std::copy(src.data() + (ct * H + y) * W, src.data() + (ct * H + y + 1) * W,
                      dst.data() + (ct * OH + y + pad) * OW + pad);
    return out;
}

template <typename S>
Tensor<S> crop(const Tensor<S>& x, index_t y0, index_t x0, index_t h, index_t w) {
    const index_t C = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (y0 < 0 || x0 < 0 || y0 + h > H || x0 + w > W)
        throw ShapeError("crop: window (" + std::to_string(y0) + "," + std::to_string(x0) + "," +
                         std::to_string(h) + "," + std::to_string(w) + ") exceeds input " +
                         shape_str(x.shape()));
    Tensor<S> out = Tensor<S>::zeros({C, T, h, w});
    auto src = x.data();
    auto dst = out.data_mut();
    for (index_t ct = 0; ct < C * T; ++ct)
        for (index_t y = 0; y < h; ++y)
            std::copy(src.data() + (ct * H + y0 + y) * W + x0,
                      src.data() + (ct * H + y0 + y) * W + x0 + w, dst.data() + (ct * h + y) * w);
    return out;
}

template <typename S>
Tensor<S> window_t(const Tensor<S>& x, index_t t0, index_t len) {
    const index_t C = x.shape()[0], T = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    if (t0 < 0 || t0 + len > T) throw ShapeError("window: frame range exceeds clip length");
    Tensor<S> out = Tensor<S>::zeros({C, len, x.shape()[2], x.shape()[3]});
    auto src = x.data();
    auto dst = out.data_mut();
    for (index_t c = 0; c < C; ++c)
        std::copy(src.data() + (c * T + t0) * HW, src.data() + (c * T + t0 + len) * HW,
                  dst.data() + c * len * HW);
    return out;
}

template <typename S>
Tensor<S> flip_w(const Tensor<S>& x) {
    const index_t C = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto src = x.data();
    auto dst = out.data_mut();
    for (index_t ct = 0; ct < C * T; ++ct)
        for (index_t y = 0; y < H; ++y)
            for (index_t xo = 0; xo < W; ++xo)
                dst[(ct * H + y) * W + xo] = src[(ct * H + y) * W + (W - 1 - xo)];
    return out;
}

}  // namespace detail

enum class Phase { Train, Eval };

// Deterministic augmentation of one (C, T, H, W) sample. Draw order is fixed
// (crop y, crop x, window start, flip), so a given seed fully determines the
// result.
template <typename S>
Tensor<S> augment_sample(const Tensor<S>& x, DatasetKind kind, Phase phase, const AugmentSpec& spec,
                         std::uint64_t seed) {
    if (x.dim() != 4) throw ShapeError("augment: expected (C, T, H, W) sample");
    std::mt19937_64 rng(mix64(seed));
    Tensor<S> cur = x;
    const bool video = kind == DatasetKind::SynthClip;
    if (video && spec.resize_short > 0) {
        const index_t H = cur.shape()[2], W = cur.shape()[3];
        const index_t short_edge = std::min(H, W);
        if (short_edge != spec.resize_short) {
            const double scale =
                static_cast<double>(spec.resize_short) / static_cast<double>(short_edge);
            const index_t nh = std::max<index_t>(
                1, static_cast<index_t>(std::lround(static_cast<double>(H) * scale)));
            const index_t nw = std::max<index_t>(
                1, static_cast<index_t>(std::lround(static_cast<double>(W) * scale)));
            cur = detail::resize_bilinear(cur, nh, nw);
        }
    }
    if (!video && phase == Phase::Train && spec.pad > 0) cur = detail::pad_spatial(cur, spec.pad);

    const index_t ch = spec.crop_h > 0 ? spec.crop_h : x.shape()[2];
    const index_t cw = spec.crop_w > 0 ? spec.crop_w : x.shape()[3];
    const index_t range_y = cur.shape()[2] - ch, range_x = cur.shape()[3] - cw;
    if (range_y < 0 || range_x < 0)
        throw ShapeError("augment: crop " + std::to_string(ch) + "x" + std::to_string(cw) +
                         " larger than source " + shape_str(cur.shape()));
    index_t y0, x0;
    if (phase == Phase::Train) {
        y0 = std::uniform_int_distribution<index_t>(0, range_y)(rng);
        x0 = std::uniform_int_distribution<index_t>(0, range_x)(rng);
    } else {
        y0 = range_y / 2;
        x0 = range_x / 2;
    }
    if (y0 != 0 || x0 != 0 || ch != cur.shape()[2] || cw != cur.shape()[3])
        cur = detail::crop(cur, y0, x0, ch, cw);

    if (spec.window_t > 0 && cur.shape()[1] > spec.window_t) {
        const index_t range_t = cur.shape()[1] - spec.window_t;
        const index_t t0 = phase == Phase::Train
                               ? std::uniform_int_distribution<index_t>(0, range_t)(rng)
                               : range_t / 2;
        cur = detail::window_t(cur, t0, spec.window_t);
    }
    if (phase == Phase::Train && spec.flip &&
        std::uniform_int_distribution<int>(0, 1)(rng) == 1)
        cur = detail::flip_w(cur);
    return cur;
}

// The (crop y, crop x) offsets augment_sample would draw -- exposed for
// distributional tests.
inline std::pair<index_t, index_t> augment_crop_offsets(index_t range_y, index_t range_x,
                                                        std::uint64_t seed) {
    std::mt19937_64 rng(mix64(seed));
    const index_t y0 = std::uniform_int_distribution<index_t>(0, range_y)(rng);
    const index_t x0 = std::uniform_int_distribution<index_t>(0, range_x)(rng);
    return {y0, x0};
}

// ---------------------------------------------------------------------------
// Batching and splits
// ---------------------------------------------------------------------------

// Stack samples into a (N, C, T, H, W) batch, augmenting each with seed
// derive_seed(base_seed, slot). Workers split the slots; every slot writes a
// disjoint slice, and the result is identical for any worker count.
template <typename S>
std::pair<Tensor<S>, std::vector<int>> make_batch(const Dataset<S>& ds,
                                                  const std::vector<index_t>& indices, Phase phase,
                                                  const AugmentSpec& spec, std::uint64_t base_seed,
                                                  index_t workers = 1);

template <typename S>
std::pair<Tensor<S>, std::vector<int>> make_batch(const Dataset<S>& ds,
                                                  const std::vector<index_t>& indices, Phase phase,
                                                  const AugmentSpec& spec, std::uint64_t base_seed,
                                                  index_t workers) {
    if (indices.empty()) throw Error("make_batch: empty index list");
    // Shape probe from slot 0.
    Tensor<S> first = augment_sample(ds.sample(indices[0]), ds.kind, phase, spec,
                                     derive_seed(base_seed, 0));
    const Shape ss = first.shape();
    const index_t n = static_cast<index_t>(indices.size());
    Tensor<S> batch = Tensor<S>::zeros({n, ss[0], ss[1], ss[2], ss[3]});
    std::vector<int> labels(static_cast<std::size_t>(n));
    const index_t per = numel(ss);
    auto fill = [&](index_t slot) {
        Tensor<S> s = slot == 0 ? first
                                : augment_sample(ds.sample(indices[static_cast<std::size_t>(slot)]),
                                                 ds.kind, phase, spec, derive_seed(base_seed, slot));
        if (s.shape() != ss)
            throw ShapeError("make_batch: sample " + std::to_string(slot) + " shape " +
                             shape_str(s.shape()) + " != " + shape_str(ss));
        std::copy(s.data().begin(), s.data().end(), batch.data_mut().begin() + slot * per);
        labels[static_cast<std::size_t>(slot)] = ds.labels[static_cast<std::size_t>(
            indices[static_cast<std::size_t>(slot)])];
    };
    if (workers <= 1 || n <= 1) {
        for (index_t i = 0; i < n; ++i) fill(i);
    } else {
        std::vector<std::thread> pool;
        const index_t nw = std::min<index_t>(workers, n);
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nw));
        for (index_t w = 0; w < nw; ++w)
            pool.emplace_back([&, w]() {
                try {
                    for (index_t i = w; i < n; i += nw) fill(i);
                } catch (...) {
                    errors[static_cast<std::size_t>(w)] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    return {std::move(batch), std::move(labels)};
}

// Disjoint 50/50 split of [0, n) by seeded shuffle; first half is the search
// train set, second half the search validation set.
inline std::pair<std::vector<index_t>, std::vector<index_t>> half_split(index_t n,
                                                                        std::uint64_t seed) {
    std::vector<index_t> idx(static_cast<std::size_t>(n));
    for (index_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(mix64(seed ^ 0x51e55b1175e7ULL));
    std::shuffle(idx.begin(), idx.end(), rng);
    const index_t half = n / 2;
    return {std::vector<index_t>(idx.begin(), idx.begin() + half),
            std::vector<index_t>(idx.begin() + half, idx.end())};
}

// Mean of per-clip logits -- the video-level aggregation rule over uniformly
// sampled clips.
template <typename S>
std::vector<S> aggregate_clip_logits(const std::vector<std::vector<S>>& clip_logits) {
    if (clip_logits.empty()) throw Error("aggregate: no clip logits");
    std::vector<S> mean(clip_logits[0].size(), S(0));
    for (const auto& l : clip_logits) {
        if (l.size() != mean.size()) throw ShapeError("aggregate: logit size mismatch");
        for (std::size_t i = 0; i < l.size(); ++i) mean[i] += l[i];
    }
    for (auto& v : mean) v /= static_cast<S>(clip_logits.size());
    return mean;
}

// Nearest-centroid classification against the noise-free image templates (an
// independent oracle for the synthetic image construction).
template <typename S>
int nearest_centroid_class(const Tensor<S>& sample, index_t num_classes) {
    const Shape& s = sample.shape();  // (C, 1, H, W)
    int best = -1;
    double best_d = 0;
    for (index_t cls = 0; cls < num_classes; ++cls) {
        auto tpl = synth_image_template<S>(cls, s[0], s[2], s[3]);
        double d = 0;
        auto xd = sample.data();
        for (std::size_t i = 0; i < tpl.size(); ++i) {
            const double diff = static_cast<double>(xd[static_cast<index_t>(i)]) -
                                static_cast<double>(tpl[i]);
            d += diff * diff;
        }
        if (best < 0 || d < best_d) {
            best = static_cast<int>(cls);
            best_d = d;
        }
    }
    return best;
}

}  // namespace sdas
