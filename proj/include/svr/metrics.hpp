#pragma once

// Evaluation metrics: bidirectional patch similarity, deep-feature distance
// and the disparity distortion ratio.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "svr/disparity.hpp"
#include "svr/losses.hpp"
#include "svr/shift_warp.hpp"

namespace svr {

// ---------------------------------------------------------------------------
// Bidirectional similarity

struct BdsParams {
    std::size_t patch = 7;
    std::size_t stride = 2;     // between query patches
    std::size_t threads = 0;    // 0 = hardware concurrency
};

namespace detail {

// Frame stored pixel-major ([H][W][3]) in double so one patch row is one
// contiguous run of 3p values.
struct PatchImage {
    std::size_t H, W;
    std::vector<double> px;

    explicit PatchImage(const Tensor& f) : H(f.dim(1)), W(f.dim(2)), px(3 * H * W) {
        if (f.rank() != 3 || f.dim(0) != 3) throw DimensionError("bds expects RGB frames [3,H,W]");
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                for (std::size_t c = 0; c < 3; ++c) px[(y * W + x) * 3 + c] = f.at(c, y, x);
    }
    const double* at(std::size_t y, std::size_t x) const { return px.data() + (y * W + x) * 3; }
};

// Patch SSD accumulated row by row, pixel by pixel, channel by channel.
// Stops once the partial sum reaches `bound`; sums below the bound are exact.
inline double patch_ssd(const PatchImage& a, std::size_t ay, std::size_t ax, const PatchImage& b,
                        std::size_t by, std::size_t bx, std::size_t p, double bound) {
    double s = 0;
    for (std::size_t r = 0; r < p; ++r) {
        const double* pa = a.at(ay + r, ax);
        const double* pb = b.at(by + r, bx);
        for (std::size_t k = 0; k < 3 * p; ++k) {
            const double d = pa[k] - pb[k];
            s += d * d;
        }
        if (s >= bound) return s;
    }
    return s;
}

// Mean over query patches (stride-spaced) of the minimum normalized SSD to
// any patch of `pool` (every position).
inline double directed_patch_distance(const PatchImage& query, const PatchImage& pool, const BdsParams& p) {
    const std::size_t P = p.patch;
    std::vector<std::pair<std::size_t, std::size_t>> qs;
    for (std::size_t y = 0; y + P <= query.H; y += p.stride)
        for (std::size_t x = 0; x + P <= query.W; x += p.stride) qs.emplace_back(y, x);
    std::vector<double> best(qs.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            double b = std::numeric_limits<double>::infinity();
            for (std::size_t y = 0; y + P <= pool.H; ++y)
                for (std::size_t x = 0; x + P <= pool.W; ++x)
                    b = std::min(b, patch_ssd(query, qs[i].first, qs[i].second, pool, y, x, P, b));
            best[i] = b;
        }
    };
    std::size_t nt = p.threads ? p.threads : std::max(1u, std::thread::hardware_concurrency());
    nt = std::min(nt, qs.size());
    if (nt <= 1) {
        work(0, qs.size());
    } else {
        std::vector<std::jthread> pool_threads;
        const std::size_t chunk = (qs.size() + nt - 1) / nt;
        for (std::size_t t = 0; t < nt; ++t)
            pool_threads.emplace_back(work, std::min(qs.size(), t * chunk), std::min(qs.size(), (t + 1) * chunk));
    }
    const double norm = static_cast<double>(P * P * 3);
    double acc = 0;
    for (double b : best) acc += b / norm;
    return acc / static_cast<double>(qs.size());
}

}  // namespace detail

/// completeness + coherence for one frame pair.
inline double bds_frame(const Tensor& source, const Tensor& retargeted, const BdsParams& p = {}) {
    if (p.patch == 0 || p.stride == 0) throw ContractError("bds: patch and stride must be positive");
    for (const Tensor* f : {&source, &retargeted})
        if (f->rank() != 3 || p.patch > std::min(f->dim(1), f->dim(2)))
            throw ContractError("bds: patch " + std::to_string(p.patch) + " larger than frame " +
                                shape_string(f->shape()));
    const detail::PatchImage s(source), r(retargeted);
    return detail::directed_patch_distance(s, r, p) + detail::directed_patch_distance(r, s, p);
}

/// Per-frame values for paired frame lists (views concatenated by the caller).
inline std::vector<double> bds_per_frame(const std::vector<Tensor>& source, const std::vector<Tensor>& retargeted,
                                         const BdsParams& p = {}) {
    if (source.size() != retargeted.size() || source.empty())
        throw ContractError("bds: source and retargeted frame counts differ or are zero");
    std::vector<double> out;
    for (std::size_t i = 0; i < source.size(); ++i) out.push_back(bds_frame(source[i], retargeted[i], p));
    return out;
}

// ---------------------------------------------------------------------------
// Feature distance

/// Mean over the three taps of the feature MSE, with `retargeted` resized
/// to the source extents.
template <class T>
double feature_distance_frame(FeatureExtractor<T>& fx, const BasicTensor<T>& source,
                              const BasicTensor<T>& retargeted) {
    Tape<T> tape;
    auto r = resize_bilinear(tape.constant(retargeted), source.dim(1), source.dim(2));
    return static_cast<double>(fx.distance(tape, tape.constant(source), r).value().item()) / 3.0;
}

template <class T>
std::vector<double> feature_distance_per_frame(FeatureExtractor<T>& fx, const std::vector<BasicTensor<T>>& source,
                                               const std::vector<BasicTensor<T>>& retargeted) {
    if (source.size() != retargeted.size() || source.empty())
        throw ContractError("feature_distance: source and retargeted frame counts differ or are zero");
    std::vector<double> out;
    for (std::size_t i = 0; i < source.size(); ++i)
        out.push_back(feature_distance_frame(fx, source[i], retargeted[i]));
    return out;
}

// ---------------------------------------------------------------------------
// Disparity distortion ratio

struct DdrResult {
    double signed_ratio = 0;
    double abs_ratio = 0;
    std::size_t count = 0;  // valid target pixels summed over frames
};

namespace detail {

// Linear interpolation of a disparity row at continuous x; nullopt when a
// contributing sample is invalid or x falls outside the row.
inline std::optional<double> sample_disparity(const DisparityMap& d, std::size_t y, double x) {
    const std::size_t W = d.width();
    if (!(x >= 0) || x > static_cast<double>(W - 1)) return std::nullopt;
    const auto x0 = std::min(static_cast<std::size_t>(x), W - 1);
    const double f = x - static_cast<double>(x0);
    if (!d.is_valid(y, x0)) return std::nullopt;
    double v = d.values.at(y, x0);
    if (f > 0) {
        if (!d.is_valid(y, x0 + 1)) return std::nullopt;
        v += f * (static_cast<double>(d.values.at(y, x0 + 1)) - v);
    }
    return v;
}

}  // namespace detail

/// Transports each frame's source disparity through both views' mappings
/// and compares it to the source disparity resampled on the target grid.
/// One mapping pair may be shared by all frames, or one pair per frame.
inline DdrResult ddr(const std::vector<DisparityMap>& disparity, const std::vector<ColumnMapping>& mapping_l,
                     const std::vector<ColumnMapping>& mapping_r) {
    const std::size_t T = disparity.size();
    if (T == 0) throw ContractError("ddr: no disparity frames");
    auto pick = [T](const std::vector<ColumnMapping>& m, std::size_t t) -> const ColumnMapping& {
        if (m.size() != 1 && m.size() != T) throw ContractError("ddr: need one mapping or one per frame");
        return m.size() == 1 ? m[0] : m[t];
    };
    double d_max = 0;
    for (const auto& d : disparity)
        for (std::size_t i = 0; i < d.values.size(); ++i)
            if (d.valid[i]) d_max = std::max(d_max, std::abs(static_cast<double>(d.values[i])));
    if (d_max == 0) throw ContractError("ddr: disparity range is zero");

    double s = 0, a = 0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < T; ++t) {
        const auto& d = disparity[t];
        const auto& ml = pick(mapping_l, t);
        const auto& mr = pick(mapping_r, t);
        if (ml.source_width != d.width() || mr.source_width != d.width())
            throw DimensionError("ddr: mapping width differs from disparity width");
        for (std::size_t y = 0; y < d.height(); ++y)
            for (std::size_t u = 0; u < ml.target_width; ++u) {
                const double src = ml.target_to_source(static_cast<double>(u));
                const auto dg = detail::sample_disparity(d, y, src);
                if (!dg) continue;
                const double dt = mr.source_to_target(src + *dg) - static_cast<double>(u);
                s += *dg - dt;
                a += std::abs(*dg - dt);
                ++n;
            }
    }
    if (n == 0) throw ContractError("ddr: no valid target pixels");
    const double norm = d_max * static_cast<double>(n);
    return {s / norm, a / norm, n};
}

// ---------------------------------------------------------------------------
// Report

struct MetricsReport {
    std::optional<double> bds, feature_distance, ddr_signed, ddr_abs;
    std::vector<double> bds_per_frame, feature_distance_per_frame;

    nlohmann::json to_json() const {
        auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
        return {{"bds", opt(bds)},
                {"feature_distance", opt(feature_distance)},
                {"ddr_signed", opt(ddr_signed)},
                {"ddr_abs", opt(ddr_abs)},
                {"per_frame", {{"bds", bds_per_frame}, {"feature_distance", feature_distance_per_frame}}}};
    }
};

inline double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace svr
