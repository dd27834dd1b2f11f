#pragma once

// Salient-object mask construction: co-saliency x depth re-weighting,
// clipped to detector boxes, then blurred and dilated for warping.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "svr/disparity.hpp"
#include "svr/tensor.hpp"

namespace svr {

struct SaliencyMap {
    Tensor values;  // [H,W] in [0,1]
    std::string frame_id;
};

struct DetectionBox {
    double x = 0, y = 0, w = 0, h = 0;
    std::string label;
    double conf = 1.0;
};

using DetectionBoxSet = std::vector<DetectionBox>;

/// Per-pixel salient-object mask in [0,1]: [H,W], or [C,H,W] after
/// per-channel processing.
struct FusedMask {
    Tensor values;

    std::size_t height() const { return values.dim(-2); }
    std::size_t width() const { return values.dim(-1); }
};

struct FuseParams {
    double min_confidence = 0.25;
};

struct DilateParams {
    double blur_sigma = 3.0;
    int kernel = 11;
};

inline DetectionBoxSet parse_boxes(const nlohmann::json& doc) {
    if (!doc.is_array()) throw IngestionError("box document must be a JSON array");
    DetectionBoxSet boxes;
    for (const auto& o : doc) {
        DetectionBox b;
        try {
            b.x = o.at("x").get<double>();
            b.y = o.at("y").get<double>();
            b.w = o.at("w").get<double>();
            b.h = o.at("h").get<double>();
            b.label = o.value("label", std::string{});
            b.conf = o.value("conf", 1.0);
        } catch (const nlohmann::json::exception& e) {
            throw IngestionError(std::string("malformed box entry: ") + e.what());
        }
        if (!(b.w > 0) || !(b.h > 0)) throw IngestionError("box with non-positive extent");
        if (!(b.conf >= 0 && b.conf <= 1)) throw IngestionError("box confidence outside [0,1]");
        boxes.push_back(std::move(b));
    }
    return boxes;
}

inline DetectionBoxSet load_boxes(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IngestionError("cannot open box file: " + path);
    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError("invalid JSON in " + path + ": " + e.what());
    }
    return parse_boxes(doc);
}

inline nlohmann::json boxes_to_json(const DetectionBoxSet& boxes) {
    auto arr = nlohmann::json::array();
    for (const auto& b : boxes)
        arr.push_back({{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}, {"label", b.label},
                       {"conf", b.conf}});
    return arr;
}

/// True when pixel (x,y)'s center lies inside the box.
inline bool box_contains(const DetectionBox& b, std::size_t x, std::size_t y) {
    const double cx = static_cast<double>(x) + 0.5, cy = static_cast<double>(y) + 0.5;
    return cx >= b.x && cx <= b.x + b.w && cy >= b.y && cy <= b.y + b.h;
}

/// Fuse co-saliency with disparity and detector boxes.
///
/// Valid disparities are normalized to w in [0,1] over the frame (near = 1);
/// invalid pixels get the neutral weight 0.5, and a frame whose valid
/// disparities are all equal gets weight 1 everywhere valid. The product
/// saliency * (0.5 + 0.5 w) is kept only inside boxes with
/// conf >= min_confidence and rescaled to peak 1.
inline FusedMask fuse(const SaliencyMap& saliency, const DisparityMap& disparity,
                      const DetectionBoxSet& boxes, FuseParams params = {}) {
    const auto& s = saliency.values;
    if (s.rank() != 2 || disparity.values.shape() != s.shape())
        throw DimensionError("fuse: saliency " + shape_string(s.shape()) + " vs disparity " +
                             shape_string(disparity.values.shape()));
    const std::size_t H = s.dim(0), W = s.dim(1);

    float dmin = std::numeric_limits<float>::infinity();
    float dmax = -std::numeric_limits<float>::infinity();
    for (std::size_t p = 0; p < H * W; ++p)
        if (disparity.valid[p]) {
            dmin = std::min(dmin, disparity.values[p]);
            dmax = std::max(dmax, disparity.values[p]);
        }
    const double range = static_cast<double>(dmax) - static_cast<double>(dmin);

    std::vector<const DetectionBox*> accepted;
    for (const auto& b : boxes)
        if (b.conf >= params.min_confidence) accepted.push_back(&b);

    FusedMask out{Tensor({H, W})};
    float peak = 0;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t p = y * W + x;
            const bool inside = std::any_of(accepted.begin(), accepted.end(),
                                            [&](const DetectionBox* b) { return box_contains(*b, x, y); });
            if (!inside) continue;
            double w = 0.5;
            if (disparity.valid[p])
                w = range > 0 ? (disparity.values[p] - dmin) / range : 1.0;
            const double v = std::clamp<double>(s[p], 0.0, 1.0) * (0.5 + 0.5 * w);
            out.values[p] = static_cast<float>(v);
            peak = std::max(peak, out.values[p]);
        }
    if (peak > 0)
        for (auto& v : out.values.data()) v /= peak;
    return out;
}

namespace detail {

// Separable filter with replicated borders over one [H,W] plane.
inline void separable_filter(std::vector<float>& plane, std::size_t H, std::size_t W,
                             const std::vector<double>& taps) {
    const auto r = static_cast<std::ptrdiff_t>(taps.size() / 2);
    std::vector<float> tmp(plane.size());
    auto clampi = [](std::ptrdiff_t i, std::size_t n) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
    };
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (std::ptrdiff_t k = -r; k <= r; ++k)
                acc += taps[static_cast<std::size_t>(k + r)] *
                       plane[y * W + clampi(static_cast<std::ptrdiff_t>(x) + k, W)];
            tmp[y * W + x] = static_cast<float>(acc);
        }
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (std::ptrdiff_t k = -r; k <= r; ++k)
                acc += taps[static_cast<std::size_t>(k + r)] *
                       tmp[clampi(static_cast<std::ptrdiff_t>(y) + k, H) * W + x];
            plane[y * W + x] = static_cast<float>(acc);
        }
}

// k x k all-ones box sum with zero padding, clamped to [0,1].
inline void box_dilate(std::vector<float>& plane, std::size_t H, std::size_t W, std::size_t k) {
    const auto r = static_cast<std::ptrdiff_t>(k / 2);
    std::vector<double> rows(plane.size());
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (std::ptrdiff_t d = -r; d <= r; ++d) {
                const auto xx = static_cast<std::ptrdiff_t>(x) + d;
                if (xx >= 0 && xx < static_cast<std::ptrdiff_t>(W))
                    acc += plane[y * W + static_cast<std::size_t>(xx)];
            }
            rows[y * W + x] = acc;
        }
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (std::ptrdiff_t d = -r; d <= r; ++d) {
                const auto yy = static_cast<std::ptrdiff_t>(y) + d;
                if (yy >= 0 && yy < static_cast<std::ptrdiff_t>(H))
                    acc += rows[static_cast<std::size_t>(yy) * W + x];
            }
            plane[y * W + x] = static_cast<float>(std::clamp(acc, 0.0, 1.0));
        }
}

}  // namespace detail

inline std::vector<double> gaussian_taps(double sigma, int kernel) {
    std::vector<double> taps(static_cast<std::size_t>(kernel));
    const int r = kernel / 2;
    double total = 0;
    for (int i = -r; i <= r; ++i) {
        const double v = sigma > 0 ? std::exp(-0.5 * i * i / (sigma * sigma)) : (i == 0 ? 1.0 : 0.0);
        taps[static_cast<std::size_t>(i + r)] = v;
        total += v;
    }
    for (auto& t : taps) t /= total;
    return taps;
}

/// Gaussian blur then kernel x kernel all-ones dilation, per channel.
inline FusedMask dilate(const FusedMask& mask, DilateParams params = {}) {
    if (params.kernel <= 0 || params.kernel % 2 == 0)
        throw ContractError("dilate: kernel must be a positive odd integer, got " +
                            std::to_string(params.kernel));
    const std::size_t H = mask.height(), W = mask.width();
    const std::size_t planes = mask.values.size() / (H * W);
    const auto taps = gaussian_taps(params.blur_sigma, params.kernel);
    FusedMask out{mask.values};
    std::vector<float> plane(H * W);
    for (std::size_t c = 0; c < planes; ++c) {
        auto dst = out.values.data().subspan(c * H * W, H * W);
        std::copy(dst.begin(), dst.end(), plane.begin());
        detail::separable_filter(plane, H, W, taps);
        detail::box_dilate(plane, H, W, static_cast<std::size_t>(params.kernel));
        std::copy(plane.begin(), plane.end(), dst.begin());
    }
    return out;
}

/// A mask that marks the whole frame salient (uniform saliency, full box).
inline FusedMask uniform_mask(std::size_t H, std::size_t W) { return FusedMask{Tensor({H, W}, 1.0f)}; }

}  // namespace svr
