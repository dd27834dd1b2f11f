#pragma once

// Column-consistent retargeting geometry.
//
// A saliency mask is reduced to one importance value per source column
// (column average plus a global floor term). Importance is normalized into
// per-column target widths whose prefix sums form a monotone source->target
// column map; its inverse gives the per-target-column shift used to warp
// frames. Every row shares the same shift, so vertical structures stay
// upright.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <string>
#include <vector>

#include "svr/ops.hpp"
#include "svr/saliency.hpp"

namespace svr {

struct ShiftParams {
    double alpha = 1.9;  // weight of the per-column term
    double beta = 1.0;   // weight of the global term
    double target_ratio = 1.0;

    void validate() const {
        if (!(alpha >= 0) || !(beta >= 0) || (alpha == 0 && beta == 0))
            throw ContractError("shift params: alpha, beta must be >= 0 and not both zero");
        if (!(target_ratio > 0)) throw ContractError("shift params: target_ratio must be > 0");
    }
};

inline constexpr double kMinColumnWidth = 1e-3;

/// floor(ratio * W), guarded against representation error (0.7 * 10).
inline std::size_t target_width_for(std::size_t W, double ratio) {
    const double w = std::floor(ratio * static_cast<double>(W) + 1e-9);
    if (w < 1) throw ContractError("target width below 1 pixel");
    return static_cast<std::size_t>(w);
}

/// Monotone map from source column boundaries to target coordinates.
struct ColumnMapping {
    std::size_t source_width = 0;
    std::size_t target_width = 0;
    std::vector<double> tgt;  // W+1 entries, tgt[0] = 0, tgt[W] = W'

    double width_of(std::size_t x) const { return tgt[x + 1] - tgt[x]; }

    /// Boundary coordinate -> target boundary coordinate; linear beyond
    /// [0, W] with the end column slopes.
    double boundary_to_target(double xb) const {
        const std::size_t W = source_width;
        if (xb <= 0) return xb * width_of(0);
        if (xb >= static_cast<double>(W)) return tgt[W] + (xb - static_cast<double>(W)) * width_of(W - 1);
        const auto j = std::min(static_cast<std::size_t>(xb), W - 1);
        return tgt[j] + (xb - static_cast<double>(j)) * width_of(j);
    }

    /// Target boundary coordinate -> source boundary coordinate.
    double target_to_boundary(double v) const {
        const std::size_t W = source_width;
        if (v <= 0) return v / width_of(0);
        if (v >= tgt[W]) return static_cast<double>(W) + (v - tgt[W]) / width_of(W - 1);
        const auto it = std::upper_bound(tgt.begin(), tgt.end(), v);
        const auto j = std::min(static_cast<std::size_t>(it - tgt.begin()) - 1, W - 1);
        return static_cast<double>(j) + (v - tgt[j]) / width_of(j);
    }

    /// Source pixel-center coordinate -> target pixel-center coordinate.
    double source_to_target(double x) const { return boundary_to_target(x + 0.5) - 0.5; }
    /// Target pixel-center coordinate -> source pixel-center coordinate.
    double target_to_source(double u) const { return target_to_boundary(u + 0.5) - 0.5; }

    /// Check the mapping invariants; throws ContractError on violation.
    void validate() const {
        if (source_width == 0 || tgt.size() != source_width + 1)
            throw ContractError("column mapping: tgt must have W+1 entries");
        if (tgt[0] != 0.0) throw ContractError("column mapping: tgt[0] must be 0");
        if (std::abs(tgt.back() - static_cast<double>(target_width)) > 1e-4)
            throw ContractError("column mapping: tgt[W] must equal the target width");
        for (std::size_t x = 0; x < source_width; ++x)
            if (!(tgt[x + 1] > tgt[x])) throw ContractError("column mapping: tgt not increasing");
    }

    static ColumnMapping uniform(std::size_t W, std::size_t Wt) {
        ColumnMapping m{W, Wt, std::vector<double>(W + 1)};
        for (std::size_t x = 0; x <= W; ++x)
            m.tgt[x] = static_cast<double>(x) * static_cast<double>(Wt) / static_cast<double>(W);
        m.tgt[W] = static_cast<double>(Wt);
        return m;
    }
};

/// Per-target-column horizontal offset s(u) - u; identical for every row.
struct ShiftMap {
    std::vector<double> shift;

    std::size_t target_width() const { return shift.size(); }
    double source_position(std::size_t u) const { return static_cast<double>(u) + shift[u]; }
    std::vector<double> source_positions() const {
        std::vector<double> p(shift.size());
        for (std::size_t u = 0; u < p.size(); ++u) p[u] = source_position(u);
        return p;
    }
};

/// Column average of the mask computed with an all-ones (H,1) kernel
/// normalized by H (and by the channel count for multi-channel masks).
inline std::vector<double> column_saliency(const FusedMask& mask) {
    const auto& m = mask.values;
    const std::size_t H = mask.height(), W = mask.width();
    const std::size_t C = m.size() / (H * W);
    Tape<double> tape;
    auto x = tape.constant(m.cast<double>().reshaped({C, H, W}));
    auto k = tape.constant(TensorD({1, C, H, 1}, 1.0 / static_cast<double>(H * C)));
    const auto& s1 = column_conv(x, k).value();  // [1,1,W]
    return std::vector<double>(s1.data().begin(), s1.data().end());
}

/// Per-column importance alpha * S1[x] + beta * S2, where S2 is the mean of
/// S1 over all columns (summed, then tiled back across x).
inline std::vector<double> raw_shift_field(const FusedMask& mask, const ShiftParams& params) {
    params.validate();
    auto s1 = column_saliency(mask);
    const double s2 = std::accumulate(s1.begin(), s1.end(), 0.0) / static_cast<double>(s1.size());
    std::vector<double> r(s1.size());
    for (std::size_t x = 0; x < s1.size(); ++x) r[x] = params.alpha * s1[x] + params.beta * s2;
    return r;
}

/// Normalize importance into per-column target widths that sum to exactly
/// W'. Widths are floored at kMinColumnWidth, re-spreading the remaining
/// mass over unfloored columns.
inline ColumnMapping build_mapping(const std::vector<double>& importance, std::size_t W,
                                   std::size_t Wt) {
    if (Wt < 1) throw ContractError("build_mapping: target width must be >= 1");
    if (W < 1 || importance.size() != W)
        throw DimensionError("build_mapping: importance length " + std::to_string(importance.size()) +
                             " does not match W = " + std::to_string(W));
    const double target = static_cast<double>(Wt);
    const double total = std::accumulate(importance.begin(), importance.end(), 0.0);
    const bool degenerate = !(total > 1e-9) || !std::isfinite(total) ||
                            static_cast<double>(W) * kMinColumnWidth >= target;
    const bool flat = std::all_of(importance.begin(), importance.end(),
                                  [&](double v) { return v == importance.front(); });
    if (degenerate || flat) return ColumnMapping::uniform(W, Wt);

    std::vector<double> rho(W);
    for (std::size_t x = 0; x < W; ++x) rho[x] = target * std::max(importance[x], 0.0) / total;
    std::vector<bool> floored(W, false);
    for (;;) {
        double free_mass = target, free_imp = 0;
        for (std::size_t x = 0; x < W; ++x) {
            if (floored[x]) free_mass -= kMinColumnWidth;
            else free_imp += rho[x];
        }
        bool changed = false;
        for (std::size_t x = 0; x < W; ++x) {
            if (floored[x]) continue;
            rho[x] *= free_mass / free_imp;
            if (rho[x] < kMinColumnWidth) {
                floored[x] = true;
                changed = true;
            }
        }
        for (std::size_t x = 0; x < W; ++x)
            if (floored[x]) rho[x] = kMinColumnWidth;
        if (!changed) break;
    }
    ColumnMapping m{W, Wt, std::vector<double>(W + 1, 0.0)};
    for (std::size_t x = 0; x < W; ++x) m.tgt[x + 1] = m.tgt[x] + rho[x];
    m.tgt[W] = target;
    return m;
}

/// Sample the inverse mapping at target pixel centers.
inline ShiftMap shift_map(const ColumnMapping& mapping) {
    ShiftMap s{std::vector<double>(mapping.target_width)};
    for (std::size_t u = 0; u < s.shift.size(); ++u) {
        const double uu = static_cast<double>(u);
        s.shift[u] = mapping.target_to_source(uu) - uu;
    }
    return s;
}

/// F_trg(u, y) = F_src(u + shift[u], y), linear between adjacent columns.
template <class T>
Var<T> warp(Var<T> frame, const ShiftMap& shift) {
    return resample_axis(frame, -1, shift.source_positions());
}

/// Restore source width: sample a retargeted [C,H,W'] at tgt(x) per source
/// column x.
template <class T>
Var<T> inverse_warp(Var<T> frame, const ColumnMapping& mapping) {
    if (frame.shape().back() != mapping.target_width)
        throw DimensionError("inverse_warp: frame width does not match mapping target width");
    std::vector<double> pos(mapping.source_width);
    for (std::size_t x = 0; x < pos.size(); ++x)
        pos[x] = mapping.source_to_target(static_cast<double>(x));
    return resample_axis(frame, -1, pos);
}

inline Tensor warp(const Tensor& frame, const ShiftMap& shift) {
    Tape<float> tape;
    return warp(tape.constant(frame), shift).value();
}

inline Tensor inverse_warp(const Tensor& frame, const ColumnMapping& mapping) {
    Tape<float> tape;
    return inverse_warp(tape.constant(frame), mapping).value();
}

/// Mask -> importance -> mapping for one view.
inline ColumnMapping mapping_from_mask(const FusedMask& mask, const ShiftParams& params) {
    const std::size_t W = mask.width();
    return build_mapping(raw_shift_field(mask, params), W, target_width_for(W, params.target_ratio));
}

/// Text export: one value per line.
inline void write_values(const std::string& path, const std::vector<double>& values) {
    std::ofstream os(path);
    if (!os) throw IngestionError("cannot write " + path);
    os << std::setprecision(17);
    for (double v : values) os << v << '\n';
}

inline std::vector<double> read_values(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IngestionError("cannot open " + path);
    std::vector<double> v;
    double x;
    while (is >> x) v.push_back(x);
    if (!is.eof()) throw IngestionError("malformed numeric file " + path);
    return v;
}

inline void save_shift_map(const std::string& path, const ShiftMap& s) { write_values(path, s.shift); }

inline void save_mapping(const std::string& path, const ColumnMapping& m) { write_values(path, m.tgt); }

inline ColumnMapping load_mapping(const std::string& path) {
    auto tgt = read_values(path);
    if (tgt.size() < 2) throw IngestionError("mapping file too short: " + path);
    ColumnMapping m{tgt.size() - 1, static_cast<std::size_t>(std::llround(tgt.back())), std::move(tgt)};
    try {
        m.validate();
    } catch (const ContractError& e) {
        throw IngestionError(path + ": " + e.what());
    }
    return m;
}

}  // namespace svr
