#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "svr/image_io.hpp"

namespace svr {

/// Left-referenced horizontal disparity in pixels. Invalid pixels carry 0.
struct DisparityMap {
    Tensor values;                    // [H,W]
    std::vector<std::uint8_t> valid;  // H*W flags

    DisparityMap() = default;
    DisparityMap(std::size_t H, std::size_t W) : values({H, W}), valid(H * W, 0) {}

    /// Every pixel valid with the same disparity.
    static DisparityMap constant(std::size_t H, std::size_t W, float d) {
        DisparityMap m(H, W);
        m.values.fill(d);
        std::fill(m.valid.begin(), m.valid.end(), std::uint8_t{1});
        return m;
    }

    std::size_t height() const { return values.dim(0); }
    std::size_t width() const { return values.dim(1); }
    bool is_valid(std::size_t y, std::size_t x) const { return valid[y * width() + x] != 0; }

    std::size_t valid_count() const {
        return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
    }
};

/// KITTI 16-bit disparity PNG: disparity = value / 256, value 0 = invalid.
inline DisparityMap load_disparity(const std::string& path) {
    const auto img = read_png(path);
    if (img.bit_depth != 16 || img.channels != 1)
        throw IngestionError("expected 16-bit grayscale disparity: " + path);
    DisparityMap m(img.height, img.width);
    for (std::size_t p = 0; p < m.valid.size(); ++p) {
        const std::uint16_t v = img.samples[p];
        m.valid[p] = v != 0;
        m.values[p] = v == 0 ? 0.0f : static_cast<float>(v / 256.0);
    }
    return m;
}

inline void save_disparity(const std::string& path, const DisparityMap& m) {
    RawImage img{m.width(), m.height(), 1, 16, {}};
    img.samples.resize(m.valid.size());
    for (std::size_t p = 0; p < m.valid.size(); ++p) {
        if (!m.valid[p]) continue;
        const double q = std::round(static_cast<double>(m.values[p]) * 256.0);
        img.samples[p] = static_cast<std::uint16_t>(std::clamp(q, 1.0, 65535.0));
    }
    write_png(path, img);
}

}  // namespace svr
