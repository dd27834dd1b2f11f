#pragma once

// Finite-difference checks for every differentiable op, loss and block,
// each on three randomly drawn shapes.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "svr/gradcheck.hpp"
#include "svr/losses.hpp"
#include "svr/pam.hpp"
#include "svr/reconstruction.hpp"
#include "svr/svt.hpp"

namespace svr {

struct SuiteCase {
    std::string name;
    std::size_t shapes = 0;
    GradCheckResult worst;  // the draw with the largest error
    bool passed = true;
};

struct SuiteReport {
    std::vector<SuiteCase> cases;
    double seconds = 0;
    bool passed() const {
        for (const auto& c : cases)
            if (!c.passed) return false;
        return true;
    }
};

namespace detail {

// Weighted sum with fixed random weights so every output coordinate
// contributes a distinct amount to the scalar.
inline Var<double> probe(Var<double> x, std::uint64_t seed) {
    return sum(mul(x, x.tape->constant(Rng(seed).uniform_tensor<double>(x.shape(), -1, 1))));
}

inline std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng.next() % (hi - lo + 1));
}

using VarFn = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

struct Draw {
    VarFn f;
    std::vector<TensorD> inputs;
    std::vector<Parameter<double>*> params = {};
    GradCheckOptions opt = {};
};

using CaseFn = std::function<GradCheckResult(Rng&)>;

inline GradCheckResult run(Draw d) { return gradcheck(d.f, std::move(d.inputs), d.params, d.opt); }

inline TensorD uni(Rng& rng, Shape s, double lo = -1, double hi = 1) { return rng.uniform_tensor<double>(s, lo, hi); }

// Values bounded away from zero, for division and abs.
inline TensorD away_from_zero(Rng& rng, Shape s) {
    auto t = uni(rng, s, 0.3, 1.5);
    for (std::size_t i = 0; i < t.size(); ++i)
        if (rng.next() % 2) t[i] = -t[i];
    return t;
}

inline std::vector<std::pair<std::string, CaseFn>> suite_cases() {
    std::vector<std::pair<std::string, CaseFn>> c;
    auto shape3 = [](Rng& r) { return Shape{draw(r, 1, 3), draw(r, 2, 5), draw(r, 2, 5)}; };

    // Elementwise
    c.emplace_back("add/sub/mul", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[](auto&, auto& v) { return add(probe(add(v[0], v[1]), 1), probe(mul(sub(v[0], v[1]), v[1]), 2)); },
                    {uni(r, s), uni(r, s)}});
    });
    c.emplace_back("div", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[](auto&, auto& v) { return probe(div(v[0], v[1]), 3); }, {uni(r, s), away_from_zero(r, s)}});
    });
    c.emplace_back("scale/add_scalar/square", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[](auto&, auto& v) { return probe(square(add_scalar(scale(v[0], 1.7), 0.3)), 4); }, {uni(r, s)}});
    });
    c.emplace_back("relu/abs", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[](auto&, auto& v) { return add(probe(relu(v[0]), 5), probe(abs(v[0]), 6)); },
                    {away_from_zero(r, s)}});
    });
    c.emplace_back("add_trailing", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[](auto&, auto& v) { return probe(add_trailing(v[0], v[1]), 7); },
                    {uni(r, s), uni(r, {s[1], s[2]})}});
    });
    // Reductions
    c.emplace_back("sum/mean/mse/sum_lastdim", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[](auto&, auto& v) {
                        return add(add(scale(sum(square(v[0])), 0.5), mean(v[1])),
                                   add(mse(v[0], v[1]), probe(sum_lastdim(v[0]), 8)));
                    },
                    {uni(r, s), uni(r, s)}});
    });
    // Shape
    c.emplace_back("reshape/permute", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[s](auto&, auto& v) {
                        return probe(permute(reshape(v[0], {s[0] * s[1], s[2]}), {1, 0}), 9);
                    },
                    {uni(r, s)}});
    });
    c.emplace_back("concat/gather/slice/take", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[s](auto&, auto& v) {
                        auto cat = concat(std::vector{v[0], v[1]}, 1);
                        auto g = gather(cat, 1, {0, 2 * s[1] - 1, 0});
                        auto sl = slice(cat, -1, 1, s[2] - 1);
                        std::vector<std::size_t> idx{0, v[0].value().size() - 1, 0};
                        auto t = take(v[0], {3}, idx);
                        return add(add(probe(g, 10), probe(sl, 11)), probe(t, 12));
                    },
                    {uni(r, s), uni(r, s)}});
    });
    // Linear algebra and normalization
    c.emplace_back("matmul", [=](Rng& r) {
        const std::size_t b = draw(r, 1, 3), m = draw(r, 1, 4), k = draw(r, 1, 4), n = draw(r, 1, 4);
        return run({[](auto&, auto& v) { return add(probe(matmul(v[0], v[1]), 13), probe(matmul(v[0], v[2]), 14)); },
                    {uni(r, {b, m, k}), uni(r, {b, k, n}), uni(r, {k, n})}});
    });
    c.emplace_back("softmax_lastdim", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[](auto&, auto& v) { return probe(softmax_lastdim(scale(v[0], 2.0)), 15); }, {uni(r, s)}});
    });
    c.emplace_back("layer_norm", [=](Rng& r) {
        const std::size_t n = draw(r, 1, 4), d = draw(r, 2, 6);
        return run({[](auto&, auto& v) { return probe(layer_norm(v[0], v[1], v[2]), 16); },
                    {uni(r, {n, d}), uni(r, {d}), uni(r, {d})}});
    });
    c.emplace_back("batch_norm", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[](auto&, auto& v) {
                        BatchNormStats<double> st{TensorD({v[0].dim(0)}), TensorD({v[0].dim(0)}, 1.0), 0.1};
                        return probe(batch_norm(v[0], v[1], v[2], &st, true), 17);
                    },
                    {uni(r, s), uni(r, {s[0]}), uni(r, {s[0]})}});
    });
    // Convolution, pooling, resampling
    c.emplace_back("conv2d", [=](Rng& r) {
        const auto s = shape3(r);
        const std::size_t co = draw(r, 1, 3), k = draw(r, 0, 1) * 2 + 1, st = draw(r, 1, 2);
        return run({[k, st](auto&, auto& v) {
                        return probe(conv2d(v[0], v[1], v[2], Conv2dOptions{{st, st}, {k / 2, k / 2}}), 18);
                    },
                    {uni(r, s), uni(r, {co, s[0], k, k}), uni(r, {co})}});
    });
    c.emplace_back("column_conv", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[](auto&, auto& v) { return probe(column_conv(v[0], v[1]), 19); },
                    {uni(r, s), uni(r, {2, s[0], s[1], 1})}});
    });
    c.emplace_back("maxpool2", [=](Rng& r) {
        const auto s = shape3(r);
        // Distinct values keep the argmax away from ties.
        auto x = uni(r, s);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += 0.05 * double(i);
        return run({[](auto&, auto& v) { return probe(maxpool2(v[0]), 20); }, {x}});
    });
    c.emplace_back("resample/resize_bilinear", [=](Rng& r) {
        const auto s = shape3(r);
        const std::size_t Ho = draw(r, 1, 7), Wo = draw(r, 1, 7);
        return run({[Ho, Wo](auto&, auto& v) {
                        return add(probe(resize_bilinear(v[0], Ho, Wo), 21),
                                   probe(resample_axis(v[0], -1, {-0.5, 0.3, 1.25, 9.0}), 22));
                    },
                    {uni(r, s)}});
    });
    c.emplace_back("box_mean3", [=](Rng& r) {
        const auto s = shape3(r);
        return run({[](auto&, auto& v) { return probe(box_mean3(v[0]), 23); }, {uni(r, s)}});
    });
    // Warping
    c.emplace_back("warp/inverse_warp", [=](Rng& r) {
        const auto s = shape3(r);
        const std::size_t W = s[2] + 3, Wt = draw(r, 2, 2 * W);
        std::vector<double> imp(W);
        for (auto& x : imp) x = r.uniform(0.1, 2);
        const auto m = build_mapping(imp, W, Wt);
        return run({[m](auto&, auto& v) {
                        return add(probe(warp(v[0], shift_map(m)), 24), probe(inverse_warp(v[1], m), 25));
                    },
                    {uni(r, {s[0], s[1], W}), uni(r, {s[0], s[1], Wt})}});
    });
    // Wavelets and losses
    c.emplace_back("dwt2/idwt2/pad_even", [=](Rng& r) {
        const Shape s{draw(r, 1, 3), draw(r, 2, 7), draw(r, 2, 7)};
        return run({[](auto&, auto& v) {
                        auto d = dwt2(pad_even(v[0]));
                        return add(probe(d, 26), probe(idwt2(scale(d, 0.5)), 27));
                    },
                    {uni(r, s)}});
    });
    c.emplace_back("perceptual_loss", [=](Rng& r) {
        const std::size_t H = draw(r, 4, 7), W = draw(r, 4, 7), Wr = draw(r, 3, 8);
        FusedMask m{Tensor({H, W})};
        m.values.at(draw(r, 0, H - 1), draw(r, 0, W - 1)) = 1.f;
        auto fx = std::make_shared<FeatureExtractor<double>>(r.next());
        return run({[fx, m](auto& tape, auto& v) { return perceptual_loss(tape, *fx, v[0], v[1], m).total; },
                    {uni(r, {3, H, W}, 0, 1), uni(r, {3, H, Wr}, 0, 1)},
                    {},
                    {.max_coords = 10}});
    });
    c.emplace_back("dwt_loss", [=](Rng& r) {
        const std::size_t H = draw(r, 2, 6), W = draw(r, 2, 6), Wr = draw(r, 2, 8);
        return run({[](auto&, auto& v) { return dwt_loss(v[0], v[1], v[2], v[3]); },
                    {uni(r, {3, H, W}), uni(r, {3, H, W}), uni(r, {3, H, Wr}), uni(r, {3, H, Wr})}});
    });
    c.emplace_back("photometric_loss", [=](Rng& r) {
        const std::size_t H = draw(r, 2, 5), W = draw(r, 2, 5);
        ValidMask m{H, W, std::vector<std::uint8_t>(H * W, 1), H * W};
        m.flags[0] = 0;
        --m.count;
        const double gamma = r.uniform(0, 1);
        return run({[m, gamma](auto&, auto& v) { return photometric_loss(v[0], v[1], m, gamma); },
                    {uni(r, {3, H, W}, 0, 1), uni(r, {3, H, W}, 0, 1)}});
    });
    c.emplace_back("smoothness_loss", [=](Rng& r) {
        const std::size_t H = draw(r, 1, 5), W = draw(r, 2, 6);
        const auto img = uni(r, {3, H, W}, 0, 1);
        return run({[img](auto&, auto& v) { return smoothness_loss(v[0], img); }, {uni(r, {H, W}, 0, 4)}});
    });
    c.emplace_back("total_loss", [=](Rng& r) {
        const double alpha = r.uniform(0, 1);
        return run({[alpha](auto&, auto& v) {
                        LossTerms<double> t{square(v[0]), square(v[1]), square(v[2]), square(v[3]), square(v[4])};
                        return total_loss(t, LossWeights{.alpha_reg = alpha});
                    },
                    {uni(r, {}), uni(r, {}), uni(r, {}), uni(r, {}), uni(r, {})}});
    });
    // Blocks
    c.emplace_back("svt_block", [=](Rng& r) {
        SVTConfig cfg{.t = 1, .h = 2, .w = 2, .d = 6, .layers = 1, .heads = 3, .mlp_dim = 4, .head_axes = {}};
        const std::size_t T = draw(r, 1, 3), H = 2 * draw(r, 1, 2), W = 2 * draw(r, 1, 2);
        auto svt = std::make_shared<StereoVideoTransformer<double>>(cfg, H, W, r.next());
        return run({[svt, T](auto& tape, auto& v) { return probe(svt->forward(tape, v[0], v[1], T / 2), 28); },
                    {uni(r, {T, 3, H, W}), uni(r, {H, W})},
                    svt->store.parameters(),
                    {.max_coords = 4}});
    });
    c.emplace_back("pam_block", [=](Rng& r) {
        const std::size_t C = draw(r, 1, 3), H = draw(r, 1, 3), W = draw(r, 2, 4);
        auto pam = std::make_shared<ParallaxAttention<double>>(C, r.next());
        return run({[pam](auto& tape, auto& v) {
                        auto a = pam->attention(tape, v[0], v[1]);
                        auto fused = pam->fuse(tape, v[0], v[1], a.right_to_left);
                        return add(probe(fused, 29), probe(ParallaxAttention<double>::disparity(a.left_to_right), 30));
                    },
                    {uni(r, {C, H, W}), uni(r, {C, H, W})},
                    pam->store.parameters(),
                    {.max_coords = 4}});
    });
    c.emplace_back("reconstruction_block", [=](Rng& r) {
        const std::size_t H = draw(r, 1, 2), W = draw(r, 2, 4), Wt = draw(r, 2, 3);
        auto rec = std::make_shared<Reconstruction<double>>(3, r.next());
        std::vector<double> imp(W);
        for (auto& x : imp) x = r.uniform(0.1, 2);
        const auto m = build_mapping(imp, W, Wt);
        return run({[rec, m](auto& tape, auto& v) { return probe(rec->forward(tape, v[0], v[1], m), 31); },
                    {uni(r, {kPamOutChannels, H, Wt}), uni(r, {3, H, Wt})},
                    rec->store.parameters(),
                    {.max_coords = 4}});
    });
    return c;
}

}  // namespace detail

/// Every case runs on three independent random draws.
inline SuiteReport run_gradcheck_suite(std::uint64_t seed = 0, std::size_t draws = 3) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteReport rep;
    Rng rng(seed);
    for (auto& [name, fn] : detail::suite_cases()) {
        SuiteCase sc{name, 0, {}, true};
        for (std::size_t i = 0; i < draws; ++i) {
            Rng local(rng.next());
            auto r = fn(local);
            ++sc.shapes;
            sc.passed = sc.passed && r.passed;
            if (i == 0 || !r.passed || r.max_rel_error > sc.worst.max_rel_error) sc.worst = r;
        }
        rep.cases.push_back(std::move(sc));
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace svr
