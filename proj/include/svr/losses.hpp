#pragma once

// Training objectives: perceptual feature loss (whole frame and salient
// crop), Haar wavelet loss, SSIM + L1 photometric loss over valid pixels,
// and edge-aware disparity smoothness.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "svr/module.hpp"
#include "svr/pam.hpp"
#include "svr/saliency.hpp"
#include "svr/weights_io.hpp"

namespace svr {

// ---------------------------------------------------------------------------
// Feature extractor

inline constexpr std::array<std::size_t, 3> kFeatureChannels{64, 128, 256};

/// Three two-conv stages (64/128/256 channels) tapped before the second
/// conv's activation, with 2x max pooling between stages. Weights are
/// frozen: they enter the tape as constants.
template <class T>
class FeatureExtractor {
public:
    explicit FeatureExtractor(std::uint64_t seed) {
        Rng rng(seed);
        std::size_t in = 3;
        for (std::size_t s = 0; s < 3; ++s) {
            const std::string p = "feat.s" + std::to_string(s);
            add_conv(store, rng, p + ".conv0", in, kFeatureChannels[s], 3);
            add_conv(store, rng, p + ".conv1", kFeatureChannels[s], kFeatureChannels[s], 3);
            in = kFeatureChannels[s];
        }
    }

    /// Smallest frame extent the three stages accept.
    static constexpr std::size_t kMinExtent = 4;

    void load(const std::string& path) { store.load(load_weight_map(path)); }
    void save(const std::string& path) { save_weights(path, store.named_tensors()); }

    std::vector<Var<T>> taps(Tape<T>& tape, Var<T> x) {
        const auto& xs = x.shape();
        if (xs.size() != 3 || xs[0] != 3) throw DimensionError("feature extractor expects [3,H,W]");
        if (xs[1] < kMinExtent || xs[2] < kMinExtent)
            throw DimensionError("feature extractor needs frames of at least 4x4");
        std::vector<Var<T>> out;
        for (std::size_t s = 0; s < 3; ++s) {
            const std::string p = "feat.s" + std::to_string(s);
            if (s > 0) x = maxpool2(relu(x));
            x = conv(tape, p + ".conv1", relu(conv(tape, p + ".conv0", x)));
            out.push_back(x);
        }
        return out;
    }

    /// Sum over the three taps of the MSE between feature maps.
    Var<T> distance(Tape<T>& tape, Var<T> a, Var<T> b) {
        auto fa = taps(tape, a), fb = taps(tape, b);
        Var<T> acc = mse(fa[0], fb[0]);
        for (std::size_t i = 1; i < 3; ++i) acc = add(acc, mse(fa[i], fb[i]));
        return acc;
    }

    ParamStore<T> store;

private:
    Var<T> conv(Tape<T>& tape, const std::string& name, Var<T> x) {
        const auto& w = store[name + ".weight"].value;
        return conv2d(x, tape.constant(w), tape.constant(store[name + ".bias"].value),
                      Conv2dOptions{{1, 1}, {1, 1}});
    }
};

// ---------------------------------------------------------------------------
// Perceptual loss

template <class T>
struct PerceptualTerms {
    Var<T> entire, salient, total;
};

/// Inclusive pixel bounds of the non-zero mask region.
struct PixelBox {
    std::size_t y0, y1, x0, x1;
};

inline std::optional<PixelBox> mask_bounds(const FusedMask& mask) {
    const std::size_t H = mask.height(), W = mask.width();
    const std::size_t planes = mask.values.size() / (H * W);
    PixelBox b{H, 0, W, 0};
    bool any = false;
    for (std::size_t c = 0; c < planes; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                if (mask.values[(c * H + y) * W + x] > 0) {
                    any = true;
                    b.y0 = std::min(b.y0, y);
                    b.y1 = std::max(b.y1, y);
                    b.x0 = std::min(b.x0, x);
                    b.x1 = std::max(b.x1, x);
                }
    if (!any) return std::nullopt;
    return b;
}

namespace detail {

// Grow [lo, hi] symmetrically (clamped) to at least `need` samples of n.
inline void widen(std::size_t& lo, std::size_t& hi, std::size_t need, std::size_t n) {
    while (hi - lo + 1 < need && hi - lo + 1 < n) {
        if (lo > 0) --lo;
        if (hi - lo + 1 < need && hi + 1 < n) ++hi;
    }
}

template <class T>
Var<T> crop(Var<T> x, const PixelBox& b) {
    return slice(slice(x, -2, b.y0, b.y1 - b.y0 + 1), -1, b.x0, b.x1 - b.x0 + 1);
}

}  // namespace detail

/// `ret` is bilinearly resized to the source extents first. The salient term
/// compares the crops inside the mask's bounding box (grown to the
/// extractor's minimum extent); an empty mask contributes 0.
template <class T>
PerceptualTerms<T> perceptual_loss(Tape<T>& tape, FeatureExtractor<T>& fx, Var<T> src, Var<T> ret,
                                   const FusedMask& src_mask) {
    const std::size_t H = src.dim(-2), W = src.dim(-1);
    if (src_mask.height() != H || src_mask.width() != W)
        throw DimensionError("perceptual_loss: mask extents differ from the source frame");
    ret = resize_bilinear(ret, H, W);
    PerceptualTerms<T> t;
    t.entire = fx.distance(tape, src, ret);
    if (auto b = mask_bounds(src_mask)) {
        detail::widen(b->y0, b->y1, FeatureExtractor<T>::kMinExtent, H);
        detail::widen(b->x0, b->x1, FeatureExtractor<T>::kMinExtent, W);
        t.salient = fx.distance(tape, detail::crop(src, *b), detail::crop(ret, *b));
    } else {
        t.salient = tape.constant(BasicTensor<T>::scalar(T(0)));
    }
    t.total = add(t.entire, t.salient);
    return t;
}

// ---------------------------------------------------------------------------
// Haar wavelets

namespace detail {

// One orthonormal 2x2 Haar butterfly. The matrix is symmetric and its own
// inverse, so the same routine maps pixels->subbands and subbands->pixels.
template <class T>
inline void haar4(T a, T b, T c, T d, T& o0, T& o1, T& o2, T& o3) {
    o0 = (a + b + c + d) / 2;
    o1 = (a + b - c - d) / 2;
    o2 = (a - b + c - d) / 2;
    o3 = (a - b - c + d) / 2;
}

// Pixels [C,2h,2w] <-> subbands [C,4,h,w] (order LL, LH, HL, HH).
template <class T>
void haar_analysis(const T* x, T* s, std::size_t C, std::size_t h, std::size_t w) {
    const std::size_t W = 2 * w, plane = h * w;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const T* r0 = x + (c * 2 * h + 2 * i) * W + 2 * j;
                const T* r1 = r0 + W;
                T* o = s + c * 4 * plane + i * w + j;
                haar4(r0[0], r0[1], r1[0], r1[1], o[0], o[plane], o[2 * plane], o[3 * plane]);
            }
}

template <class T>
void haar_synthesis(const T* s, T* x, std::size_t C, std::size_t h, std::size_t w) {
    const std::size_t W = 2 * w, plane = h * w;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const T* in = s + c * 4 * plane + i * w + j;
                T* r0 = x + (c * 2 * h + 2 * i) * W + 2 * j;
                T* r1 = r0 + W;
                haar4(in[0], in[plane], in[2 * plane], in[3 * plane], r0[0], r0[1], r1[0], r1[1]);
            }
}

}  // namespace detail

/// Reflect-pad one trailing row and/or column so both extents are even.
template <class T>
Var<T> pad_even(Var<T> x) {
    const auto& xs = x.shape();
    const std::size_t H = xs[xs.size() - 2], W = xs.back();
    if (H % 2 == 0 && W % 2 == 0) return x;
    if ((H % 2 && H < 2) || (W % 2 && W < 2)) throw DimensionError("pad_even: extent 1 cannot be reflected");
    const std::size_t Hp = H + H % 2, Wp = W + W % 2;
    const std::size_t outer = x.value().size() / (H * W);
    Shape os = xs;
    os[xs.size() - 2] = Hp;
    os.back() = Wp;
    std::vector<std::size_t> idx;
    idx.reserve(outer * Hp * Wp);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t y = 0; y < Hp; ++y)
            for (std::size_t xx = 0; xx < Wp; ++xx)
                idx.push_back((o * H + (y < H ? y : H - 2)) * W + (xx < W ? xx : W - 2));
    return take(x, std::move(os), std::move(idx));
}

/// Single-level orthonormal Haar analysis of [C,H,W] (even extents) into
/// [C,4,H/2,W/2] with subbands ordered LL, LH, HL, HH.
template <class T>
Var<T> dwt2(Var<T> x) {
    const auto& xs = x.shape();
    if (xs.size() != 3 || xs[1] % 2 || xs[2] % 2) throw DimensionError("dwt2 expects [C,H,W] with even H, W");
    const std::size_t C = xs[0], h = xs[1] / 2, w = xs[2] / 2;
    BasicTensor<T> out({C, 4, h, w});
    detail::haar_analysis(x.value().data().data(), out.data().data(), C, h, w);
    return x.tape->record(std::move(out), {x}, [C, h, w](const BasicTensor<T>& g, auto gi) {
        BasicTensor<T> dx(gi[0]->shape());
        detail::haar_synthesis(g.data().data(), dx.data().data(), C, h, w);
        detail::add_into(gi[0], dx);
    });
}

/// Inverse of dwt2.
template <class T>
Var<T> idwt2(Var<T> s) {
    const auto& ss = s.shape();
    if (ss.size() != 4 || ss[1] != 4) throw DimensionError("idwt2 expects [C,4,h,w]");
    const std::size_t C = ss[0], h = ss[2], w = ss[3];
    BasicTensor<T> out({C, 2 * h, 2 * w});
    detail::haar_synthesis(s.value().data().data(), out.data().data(), C, h, w);
    return s.tape->record(std::move(out), {s}, [C, h, w](const BasicTensor<T>& g, auto gi) {
        BasicTensor<T> ds(gi[0]->shape());
        detail::haar_analysis(g.data().data(), ds.data().data(), C, h, w);
        detail::add_into(gi[0], ds);
    });
}

/// Per view: MSE between subband stacks plus MSE between the synthesized
/// frames, with `ret` resized to the source extents; averaged over views.
template <class T>
Var<T> dwt_loss(Var<T> src_l, Var<T> src_r, Var<T> ret_l, Var<T> ret_r) {
    auto view = [](Var<T> src, Var<T> ret) {
        ret = resize_bilinear(ret, src.dim(-2), src.dim(-1));
        auto s = dwt2(pad_even(src)), r = dwt2(pad_even(ret));
        return add(mse(s, r), mse(idwt2(s), idwt2(r)));
    };
    return scale(add(view(src_l, ret_l), view(src_r, ret_r)), T(0.5));
}

// ---------------------------------------------------------------------------
// Photometric and smoothness losses

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Per-pixel SSIM over 3x3 windows (replicated borders), per channel.
template <class T>
Var<T> ssim_map(Var<T> x, Var<T> y) {
    auto mx = box_mean3(x), my = box_mean3(y);
    auto sxx = sub(box_mean3(square(x)), square(mx));
    auto syy = sub(box_mean3(square(y)), square(my));
    auto sxy = sub(box_mean3(mul(x, y)), mul(mx, my));
    auto num = mul(add_scalar(scale(mul(mx, my), T(2)), T(kSsimC1)), add_scalar(scale(sxy, T(2)), T(kSsimC2)));
    auto den = mul(add_scalar(add(square(mx), square(my)), T(kSsimC1)), add_scalar(add(sxx, syy), T(kSsimC2)));
    return div(num, den);
}

/// (1/N) sum over valid pixels of gamma (1 - SSIM)/2 + (1 - gamma) |l - r|,
/// both terms averaged over channels.
template <class T>
Var<T> photometric_loss(Var<T> left, Var<T> warped_right, const ValidMask& mask, double gamma) {
    const auto& ls = left.shape();
    if (ls != warped_right.shape() || ls.size() != 3 || ls[1] != mask.height || ls[2] != mask.width)
        throw DimensionError("photometric_loss: frame/mask extents disagree");
    if (mask.count == 0) throw ContractError("photometric_loss: valid mask is empty");
    if (!(gamma >= 0 && gamma <= 1)) throw ContractError("photometric_loss: gamma must lie in [0,1]");
    const std::size_t C = ls[0], HW = ls[1] * ls[2];
    BasicTensor<T> m(ls);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < HW; ++p) m[c * HW + p] = mask.flags[p] ? T(1) : T(0);
    auto dssim = scale(add_scalar(scale(ssim_map(left, warped_right), T(-1)), T(1)), T(0.5));
    auto l1 = abs(sub(left, warped_right));
    auto per = add(scale(dssim, static_cast<T>(gamma)), scale(l1, static_cast<T>(1 - gamma)));
    auto masked = mul(per, left.tape->constant(std::move(m)));
    return scale(sum(masked), T(1) / static_cast<T>(C * mask.count));
}

/// Mean |dD/dx| exp(-|dI/dx|) over horizontal neighbours plus the vertical
/// counterpart; image gradients are summed over channels and not
/// differentiated.
template <class T>
Var<T> smoothness_loss(Var<T> disparity, const BasicTensor<T>& image) {
    const auto& ds = disparity.shape();
    if (ds.size() != 2 || image.rank() != 3 || image.dim(1) != ds[0] || image.dim(2) != ds[1])
        throw DimensionError("smoothness_loss: disparity [H,W] and image [C,H,W] disagree");
    const std::size_t H = ds[0], W = ds[1], C = image.dim(0);
    Tape<T>& tape = *disparity.tape;
    Var<T> total = tape.constant(BasicTensor<T>::scalar(T(0)));
    if (W > 1) {
        BasicTensor<T> wx({H, W - 1});
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x + 1 < W; ++x) {
                T g = 0;
                for (std::size_t c = 0; c < C; ++c) g += std::abs(image.at(c, y, x + 1) - image.at(c, y, x));
                wx.at(y, x) = std::exp(-g);
            }
        auto dx = abs(sub(slice(disparity, 1, 1, W - 1), slice(disparity, 1, 0, W - 1)));
        total = add(total, mean(mul(dx, tape.constant(std::move(wx)))));
    }
    if (H > 1) {
        BasicTensor<T> wy({H - 1, W});
        for (std::size_t y = 0; y + 1 < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                T g = 0;
                for (std::size_t c = 0; c < C; ++c) g += std::abs(image.at(c, y + 1, x) - image.at(c, y, x));
                wy.at(y, x) = std::exp(-g);
            }
        auto dy = abs(sub(slice(disparity, 0, 1, H - 1), slice(disparity, 0, 0, H - 1)));
        total = add(total, mean(mul(dy, tape.constant(std::move(wy)))));
    }
    return total;
}

// ---------------------------------------------------------------------------
// Combination

struct LossWeights {
    double alpha_reg = 0.05;  // weight of the wavelet term
    double gamma = 0.85;      // SSIM / L1 balance of the photometric term

    void validate() const {
        if (!(alpha_reg >= 0)) throw ContractError("alpha_reg must be >= 0");
        if (!(gamma >= 0 && gamma <= 1)) throw ContractError("gamma must lie in [0,1]");
    }
};

struct LossReport {
    double l_vgg_entire = 0, l_vgg_salient = 0, l_vgg_total = 0;
    double l_dwt = 0, l_photo = 0, l_smooth = 0, total = 0;

    static constexpr std::array<const char*, 7> kFields{"l_vgg_entire", "l_vgg_salient", "l_vgg_total",
                                                        "l_dwt",        "l_photo",       "l_smooth",
                                                        "total"};
    std::array<double, 7> values() const {
        return {l_vgg_entire, l_vgg_salient, l_vgg_total, l_dwt, l_photo, l_smooth, total};
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        const auto v = values();
        for (std::size_t i = 0; i < v.size(); ++i) j[kFields[i]] = v[i];
        return j;
    }
};

/// Differentiable terms of one step.
template <class T>
struct LossTerms {
    Var<T> vgg_entire, vgg_salient, dwt, photo, smooth;
};

/// total = vgg_entire + vgg_salient + alpha_reg * dwt + smooth + photo
template <class T>
Var<T> total_loss(const LossTerms<T>& t, const LossWeights& w, LossReport* report = nullptr) {
    w.validate();
    auto vgg = add(t.vgg_entire, t.vgg_salient);
    auto total = add(add(add(vgg, scale(t.dwt, static_cast<T>(w.alpha_reg))), t.smooth), t.photo);
    if (report) {
        report->l_vgg_entire = t.vgg_entire.value().item();
        report->l_vgg_salient = t.vgg_salient.value().item();
        report->l_vgg_total = vgg.value().item();
        report->l_dwt = t.dwt.value().item();
        report->l_photo = t.photo.value().item();
        report->l_smooth = t.smooth.value().item();
        report->total = total.value().item();
    }
    return total;
}

}  // namespace svr
