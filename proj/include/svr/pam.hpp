#pragma once

// Parallax attention: per-row soft correspondence between left and right
// feature maps along the epipolar line, cross-view fusion, an expected
// disparity, and a cycle-consistency validity mask.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "svr/module.hpp"

namespace svr {

/// A_r->l and A_l->r, each [H, W, W]; rows are distributions over the
/// other view's columns.
template <class T>
struct AttentionPair {
    Var<T> right_to_left;
    Var<T> left_to_right;
};

struct ValidMask {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> flags;
    std::size_t count = 0;

    bool at(std::size_t y, std::size_t x) const { return flags[y * width + x] != 0; }
};

inline constexpr std::size_t kPamOutChannels = 64;

template <class T>
class ParallaxAttention {
public:
    ParallaxAttention(std::size_t channels, std::uint64_t seed) : C_(channels) {
        if (channels == 0) throw ContractError("pam: channel count must be positive");
        Rng rng(seed);
        add_conv(store, rng, "pam.query", C_, C_, 1);
        add_conv(store, rng, "pam.key", C_, C_, 1);
        const std::size_t chain[] = {2 * C_, 128, 128, kPamOutChannels};
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string p = "pam.fuse" + std::to_string(i);
            add_conv(store, rng, p, chain[i], chain[i + 1], 3);
            store.add(p + ".bn.gamma", BasicTensor<T>({chain[i + 1]}, T(1)));
            store.add(p + ".bn.beta", BasicTensor<T>({chain[i + 1]}));
            bn_[i] = &store.add_bn(p + ".bn", chain[i + 1]);
        }
    }

    std::size_t channels() const { return C_; }

    /// BN uses batch statistics while training and stored statistics otherwise.
    bool training = true;

    AttentionPair<T> attention(Tape<T>& tape, Var<T> left, Var<T> right) {
        check_pair(left, right);
        auto q = permute(apply_conv(tape, store, "pam.query", left), {1, 2, 0});  // [H,W,C]
        auto k = permute(apply_conv(tape, store, "pam.key", right), {1, 0, 2});   // [H,C,W]
        const T inv = T(1) / static_cast<T>(std::sqrt(static_cast<double>(C_)));
        auto logits = scale(matmul(q, k), inv);  // [H, W_left, W_right]
        return {softmax_lastdim(logits), softmax_lastdim(permute(logits, {0, 2, 1}))};
    }

    /// T[c,y,u] = sum_v A[y,u,v] feat[c,y,v]
    static Var<T> transport(Var<T> attention, Var<T> feat) {
        const auto& fs = feat.shape();
        const auto& as = attention.shape();
        if (fs.size() != 3 || as.size() != 3 || as[0] != fs[1] || as[2] != fs[2])
            throw DimensionError("pam transport: attention " + shape_string(as) + " vs features " +
                                 shape_string(fs));
        return permute(matmul(attention, permute(feat, {1, 2, 0})), {2, 0, 1});
    }

    /// Concatenate left features with transported right features and run
    /// three conv(3x3) -> ReLU -> BN blocks (128, 128, 64 channels).
    Var<T> fuse(Tape<T>& tape, Var<T> left, Var<T> right, Var<T> right_to_left) {
        check_pair(left, right);
        auto x = concat(std::vector<Var<T>>{left, transport(right_to_left, right)}, 0);
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string p = "pam.fuse" + std::to_string(i);
            x = relu(apply_conv(tape, store, p, x));
            x = batch_norm(x, tape.param(store[p + ".bn.gamma"]), tape.param(store[p + ".bn.beta"]),
                           bn_[i], training);
        }
        return x;
    }

    /// Expected offset d(y,u) = sum_v A[y,u,v] (u - v).
    static Var<T> disparity(Var<T> attention) {
        const auto& as = attention.shape();
        const std::size_t H = as[0], W = as[1], Wr = as[2];
        Tape<T>& tape = *attention.tape;
        BasicTensor<T> cols({Wr, 1});
        for (std::size_t v = 0; v < Wr; ++v) cols[v] = static_cast<T>(v);
        BasicTensor<T> u({H, W});
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = static_cast<T>(i % W);
        auto expected = reshape(matmul(attention, tape.constant(cols)), {H, W});
        return sub(tape.constant(std::move(u)), expected);
    }

    ParamStore<T> store;

private:
    void check_pair(Var<T> left, Var<T> right) const {
        if (left.shape() != right.shape() || left.shape().size() != 3 || left.shape()[0] != C_)
            throw DimensionError("pam: left " + shape_string(left.shape()) + " and right " +
                                 shape_string(right.shape()) + " must both be [" +
                                 std::to_string(C_) + ",H,W]");
    }

    std::size_t C_;
    BatchNormStats<T>* bn_[3] = {};
};

namespace detail {

template <class T>
std::size_t row_argmax(const T* row, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

}  // namespace detail

/// Pixel (y,u) is valid when following the strongest match to the right
/// view and back lands within `tau` columns of u.
template <class T>
ValidMask valid_mask(const BasicTensor<T>& right_to_left, const BasicTensor<T>& left_to_right,
                     double tau = 1.0) {
    if (right_to_left.shape() != left_to_right.shape() || right_to_left.rank() != 3)
        throw DimensionError("valid_mask: attention volumes must share [H,W,W] extents");
    const std::size_t H = right_to_left.dim(0), W = right_to_left.dim(1);
    ValidMask m{H, W, std::vector<std::uint8_t>(H * W, 0), 0};
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t u = 0; u < W; ++u) {
            const std::size_t v = detail::row_argmax(right_to_left.data().data() + (y * W + u) * W, W);
            const std::size_t back = detail::row_argmax(left_to_right.data().data() + (y * W + v) * W, W);
            const double dist = std::abs(static_cast<double>(back) - static_cast<double>(u));
            if (dist <= tau) {
                m.flags[y * W + u] = 1;
                ++m.count;
            }
        }
    return m;
}

}  // namespace svr
