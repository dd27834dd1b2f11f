#pragma once

// Stereo video transformer: a clip window plus the middle frame's disparity
// is cut into t x h x w patches, embedded, and run through pre-norm encoder
// layers whose heads each attend along one token axis (spatial, temporal,
// or disparity). The middle temporal slice is projected back to a
// frame-aligned feature map.

#include <cmath>
#include <string>
#include <vector>

#include "svr/module.hpp"

namespace svr {

enum class HeadAxis { spatial, temporal, disparity };

inline const char* axis_name(HeadAxis a) {
    switch (a) {
        case HeadAxis::spatial: return "spatial";
        case HeadAxis::temporal: return "temporal";
        default: return "disparity";
    }
}

struct SVTConfig {
    std::size_t t = 2, h = 16, w = 16;
    std::size_t d = 96;
    std::size_t layers = 2;
    std::size_t heads = 3;
    std::size_t mlp_dim = 192;
    std::size_t in_channels = 3;
    std::size_t out_channels = 3;
    std::vector<HeadAxis> head_axes;  // empty: round-robin spatial, temporal, disparity

    std::vector<HeadAxis> axes() const {
        if (!head_axes.empty()) return head_axes;
        std::vector<HeadAxis> a(heads);
        for (std::size_t i = 0; i < heads; ++i) a[i] = static_cast<HeadAxis>(i % 3);
        return a;
    }

    void validate() const {
        if (t == 0 || h == 0 || w == 0 || d == 0 || heads == 0 || mlp_dim == 0)
            throw ContractError("svt config: extents must be positive");
        if (d % heads != 0) throw ContractError("svt config: d must be divisible by heads");
        if (!head_axes.empty() && head_axes.size() != heads)
            throw ContractError("svt config: head axis assignment must cover every head");
    }
};

struct TokenCounts {
    std::size_t n_t = 0, n_h = 0, n_w = 0;
    std::size_t spatial() const { return n_h * n_w; }
    bool operator==(const TokenCounts&) const = default;
};

inline TokenCounts token_counts(const SVTConfig& cfg, std::size_t T, std::size_t H, std::size_t W) {
    if (T < cfg.t || H < cfg.h || W < cfg.w)
        throw DimensionError("svt: clip " + std::to_string(T) + "x" + std::to_string(H) + "x" +
                             std::to_string(W) + " smaller than one patch");
    return {T / cfg.t, H / cfg.h, W / cfg.w};
}

/// Spatio-temporal tokens [n_t, n_h*n_w, d] and the disparity token planes
/// [n_d, n_h*n_w, d] used as keys/values by disparity heads.
template <class T>
struct TokenGrid {
    Var<T> tokens;
    Var<T> disparity;
    TokenCounts counts;
};

/// Optional capture of attention internals for inspection and tests.
template <class T>
struct AttentionTrace {
    struct Head {
        std::size_t layer, head;
        HeadAxis axis;
        BasicTensor<T> weights;  // [groups, queries, keys]
        BasicTensor<T> output;   // [n_t, n_hw, d_k], before the output projection
    };
    std::vector<Head> heads;
};

template <class T>
class StereoVideoTransformer {
public:
    /// Parameters depend on the frame extents through the positional
    /// embedding ([n_h*n_w, d], shared by every temporal index).
    StereoVideoTransformer(SVTConfig cfg, std::size_t H, std::size_t W, std::uint64_t seed)
        : cfg_(std::move(cfg)), H_(H), W_(W) {
        cfg_.validate();
        if (H < cfg_.h || W < cfg_.w) throw DimensionError("svt: frame smaller than one patch");
        Rng rng(seed);
        const std::size_t n_hw = (H / cfg_.h) * (W / cfg_.w);
        const std::size_t patch = cfg_.t * cfg_.in_channels * cfg_.h * cfg_.w;
        const std::size_t dk = cfg_.d / cfg_.heads;
        add_linear(store, rng, "svt.patch", patch, cfg_.d);
        add_linear(store, rng, "svt.disp", cfg_.h * cfg_.w, cfg_.d);
        add_fan_in(store, rng, "svt.pos", {n_hw, cfg_.d}, cfg_.d);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const std::string p = "svt.l" + std::to_string(l);
            add_norm(p + ".ln1");
            for (std::size_t hd = 0; hd < cfg_.heads; ++hd)
                for (const char* m : {"wq", "wk", "wv"})
                    add_fan_in(store, rng, p + ".h" + std::to_string(hd) + "." + m, {cfg_.d, dk}, cfg_.d);
            add_linear(store, rng, p + ".proj", cfg_.d, cfg_.d);
            add_norm(p + ".ln2");
            add_linear(store, rng, p + ".mlp1", cfg_.d, cfg_.mlp_dim);
            add_linear(store, rng, p + ".mlp2", cfg_.mlp_dim, cfg_.d);
        }
        add_linear(store, rng, "svt.depatch", cfg_.d, cfg_.h * cfg_.w * cfg_.out_channels);
    }

    const SVTConfig& config() const { return cfg_; }

    /// `clip` is [T,C,H,W]; `disparity` is the middle frame's map [H,W].
    TokenGrid<T> embed(Tape<T>& tape, Var<T> clip, Var<T> disparity) {
        const auto& cs = clip.shape();
        if (cs.size() != 4 || cs[1] != cfg_.in_channels)
            throw DimensionError("svt: clip must be [T," + std::to_string(cfg_.in_channels) + ",H,W]");
        if (cs[2] != H_ || cs[3] != W_)
            throw DimensionError("svt: clip extents differ from the configured frame size");
        if (disparity.shape() != Shape{H_, W_}) throw DimensionError("svt: disparity must be [H,W]");
        const auto n = token_counts(cfg_, cs[0], cs[2], cs[3]);
        const std::size_t C = cs[1], h = cfg_.h, w = cfg_.w, t = cfg_.t;
        const std::size_t patch = t * C * h * w;

        std::vector<std::size_t> idx;
        idx.reserve(n.n_t * n.spatial() * patch);
        for (std::size_t it = 0; it < n.n_t; ++it)
            for (std::size_t ih = 0; ih < n.n_h; ++ih)
                for (std::size_t iw = 0; iw < n.n_w; ++iw)
                    for (std::size_t dt = 0; dt < t; ++dt)
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t dy = 0; dy < h; ++dy)
                                for (std::size_t dx = 0; dx < w; ++dx)
                                    idx.push_back((((it * t + dt) * C + c) * H_ + ih * h + dy) * W_ +
                                                  iw * w + dx);
        auto patches = take(clip, {n.n_t, n.spatial(), patch}, std::move(idx));
        auto tokens = apply_linear(tape, store, "svt.patch", patches);

        std::vector<std::size_t> didx;
        didx.reserve(n.spatial() * h * w);
        for (std::size_t ih = 0; ih < n.n_h; ++ih)
            for (std::size_t iw = 0; iw < n.n_w; ++iw)
                for (std::size_t dy = 0; dy < h; ++dy)
                    for (std::size_t dx = 0; dx < w; ++dx)
                        didx.push_back((ih * h + dy) * W_ + iw * w + dx);
        auto dpatch = take(disparity, {1, n.spatial(), h * w}, std::move(didx));
        auto dtok = apply_linear(tape, store, "svt.disp", dpatch);

        // Disparity is fused before the encoder; the positional embedding is
        // defined for one frame and repeated over time.
        tokens = add_trailing(tokens, reshape(dtok, {n.spatial(), cfg_.d}));
        tokens = add_trailing(tokens, tape.param(store["svt.pos"]));
        return {tokens, dtok, n};
    }

    /// Multi-head factorized attention over already-normalized tokens.
    Var<T> attention(Tape<T>& tape, std::size_t layer, Var<T> x, Var<T> disp,
                     AttentionTrace<T>* trace = nullptr) {
        const auto axes = cfg_.axes();
        const std::string p = "svt.l" + std::to_string(layer);
        const T inv = T(1) / static_cast<T>(std::sqrt(static_cast<double>(cfg_.d / cfg_.heads)));
        const std::vector<std::size_t> swap01{1, 0, 2}, swap12{0, 2, 1};
        std::vector<Var<T>> outs;
        for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
            const std::string hp = p + ".h" + std::to_string(hd);
            auto proj = [&](Var<T> v, const char* m) { return matmul(v, tape.param(store[hp + "." + m])); };
            auto q = proj(x, "wq");  // [n_t, n_hw, dk]
            Var<T> k, v;
            bool grouped_by_space = false;
            switch (axes[hd]) {
                case HeadAxis::spatial:
                    k = proj(x, "wk");
                    v = proj(x, "wv");
                    break;
                case HeadAxis::temporal:
                    q = permute(q, swap01);
                    k = permute(proj(x, "wk"), swap01);
                    v = permute(proj(x, "wv"), swap01);
                    grouped_by_space = true;
                    break;
                case HeadAxis::disparity:
                    q = permute(q, swap01);
                    k = permute(proj(disp, "wk"), swap01);
                    v = permute(proj(disp, "wv"), swap01);
                    grouped_by_space = true;
                    break;
            }
            auto a = softmax_lastdim(scale(matmul(q, permute(k, swap12)), inv));
            auto o = matmul(a, v);
            if (grouped_by_space) o = permute(o, swap01);
            if (trace) trace->heads.push_back({layer, hd, axes[hd], a.value(), o.value()});
            outs.push_back(o);
        }
        return apply_linear(tape, store, p + ".proj", concat(outs, -1));
    }

    /// Pre-norm residual layers: x += MHDPA(LN x); x += MLP(LN x).
    TokenGrid<T> encode(Tape<T>& tape, TokenGrid<T> g, AttentionTrace<T>* trace = nullptr) {
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const std::string p = "svt.l" + std::to_string(l);
            auto norm1 = [&](Var<T> v) {
                return layer_norm(v, tape.param(store[p + ".ln1.gamma"]), tape.param(store[p + ".ln1.beta"]));
            };
            g.tokens = add(g.tokens, attention(tape, l, norm1(g.tokens), norm1(g.disparity), trace));
            auto y = layer_norm(g.tokens, tape.param(store[p + ".ln2.gamma"]),
                                tape.param(store[p + ".ln2.beta"]));
            y = apply_linear(tape, store, p + ".mlp2", relu(apply_linear(tape, store, p + ".mlp1", y)));
            g.tokens = add(g.tokens, y);
        }
        return g;
    }

    /// Temporal index holding frame `center` (clamped to the last full patch).
    std::size_t middle_index(const TokenCounts& n, std::size_t center) const {
        return std::min(center / cfg_.t, n.n_t - 1);
    }

    /// Project one temporal slice of tokens to [C_out, n_h*h, n_w*w].
    Var<T> feature_map(Tape<T>& tape, const TokenGrid<T>& g, std::size_t center) {
        const auto& n = g.counts;
        const std::size_t h = cfg_.h, w = cfg_.w, C = cfg_.out_channels;
        auto mid = reshape(slice(g.tokens, 0, middle_index(n, center), 1), {n.spatial(), cfg_.d});
        auto blocks = apply_linear(tape, store, "svt.depatch", mid);  // [n_hw, C*h*w]
        const std::size_t Ho = n.n_h * h, Wo = n.n_w * w;
        std::vector<std::size_t> idx(C * Ho * Wo);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t x = 0; x < Wo; ++x)
                    idx[(c * Ho + y) * Wo + x] =
                        ((y / h) * n.n_w + x / w) * (C * h * w) + (c * h + y % h) * w + x % w;
        return take(blocks, {C, Ho, Wo}, std::move(idx));
    }

    /// Clip [T,C,H,W] + middle disparity [H,W] -> feature map at the frame
    /// size (bilinearly resized when the extents are not patch multiples).
    Var<T> forward(Tape<T>& tape, Var<T> clip, Var<T> disparity, std::size_t center,
                   AttentionTrace<T>* trace = nullptr) {
        auto g = encode(tape, embed(tape, clip, disparity), trace);
        auto fm = feature_map(tape, g, center);
        return resize_bilinear(fm, H_, W_);
    }

    ParamStore<T> store;

private:
    void add_norm(const std::string& name) {
        store.add(name + ".gamma", BasicTensor<T>({cfg_.d}, T(1)));
        store.add(name + ".beta", BasicTensor<T>({cfg_.d}));
    }

    SVTConfig cfg_;
    std::size_t H_, W_;
};

}  // namespace svr
