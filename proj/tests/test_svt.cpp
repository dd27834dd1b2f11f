#include <gtest/gtest.h>

#include "svr/gradcheck.hpp"
#include "svr/svt.hpp"

using namespace svr;

namespace {

SVTConfig toy_config() {
    SVTConfig c;
    c.t = 1;
    c.h = c.w = 2;
    c.d = 6;
    c.layers = 1;
    c.heads = 3;
    c.mlp_dim = 8;
    return c;
}

template <class T>
void zero_param(StereoVideoTransformer<T>& m, const std::string& name) {
    m.store[name].value.fill(T(0));
}

// Permute spatial positions of a [n_t, n_hw, d] tensor: out[:, i] = in[:, perm[i]].
TensorD permute_spatial(const TensorD& x, const std::vector<std::size_t>& perm) {
    TensorD out(x.shape());
    const std::size_t nt = x.dim(0), ns = x.dim(1), d = x.dim(2);
    for (std::size_t a = 0; a < nt; ++a)
        for (std::size_t i = 0; i < ns; ++i)
            for (std::size_t k = 0; k < d; ++k) out.at(a, i, k) = x.at(a, perm[i], k);
    return out;
}

}  // namespace

TEST(SVTTokens, CountsFollowFloorFormulas) {
    SVTConfig c;
    EXPECT_EQ(token_counts(c, 4, 224, 224), (TokenCounts{2, 14, 14}));
    EXPECT_EQ(token_counts(c, 5, 230, 250), (TokenCounts{2, 14, 15}));
    EXPECT_THROW(token_counts(c, 1, 224, 224), DimensionError);
    EXPECT_THROW(token_counts(c, 4, 15, 224), DimensionError);
}

TEST(SVTTokens, EmbedFullScaleGrid) {
    SVTConfig c;
    c.layers = 0;
    StereoVideoTransformer<float> m(c, 224, 224, 1);
    Tape<float> tape;
    Rng rng(2);
    auto clip = tape.constant(rng.uniform_tensor<float>({4, 3, 224, 224}, 0, 1));
    auto disp = tape.constant(Tensor({224, 224}, 3.f));
    auto g = m.embed(tape, clip, disp);
    EXPECT_EQ(g.counts, (TokenCounts{2, 14, 14}));
    EXPECT_EQ(g.tokens.shape(), (Shape{2, 196, 96}));
    EXPECT_EQ(g.tokens.value().size() / 96, 392u);
}

TEST(SVTTokens, ZeroInputsGiveZeroTokens) {
    auto c = toy_config();
    StereoVideoTransformer<double> m(c, 4, 4, 3);
    for (const char* n : {"svt.pos", "svt.patch.bias", "svt.disp.bias"}) zero_param(m, n);
    Tape<double> tape;
    auto g = m.embed(tape, tape.constant(TensorD({2, 3, 4, 4})), tape.constant(TensorD({4, 4})));
    for (double v : g.tokens.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(SVTTokens, OnePatchChangeTouchesOneToken) {
    auto c = toy_config();
    StereoVideoTransformer<double> m(c, 6, 8, 4);
    zero_param(m, "svt.pos");
    Rng rng(5);
    const auto clip = rng.uniform_tensor<double>({3, 3, 6, 8}, 0, 1);
    auto changed = clip;
    // frame 1, rows 2..3, cols 4..5 is the patch at (n_t=1, n_h=1, n_w=2)
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t y = 2; y < 4; ++y)
            for (std::size_t x = 4; x < 6; ++x) changed.at(1, ch, y, x) += 0.5;
    const auto disp = rng.uniform_tensor<double>({6, 8}, 0, 1);
    Tape<double> tape;
    const auto a = m.embed(tape, tape.constant(clip), tape.constant(disp)).tokens.value();
    const auto b = m.embed(tape, tape.constant(changed), tape.constant(disp)).tokens.value();
    for (std::size_t it = 0; it < 3; ++it)
        for (std::size_t s = 0; s < 12; ++s) {
            bool differs = false;
            for (std::size_t k = 0; k < c.d; ++k) differs |= a.at(it, s, k) != b.at(it, s, k);
            EXPECT_EQ(differs, it == 1 && s == 1 * 4 + 2) << it << "," << s;
        }
}

TEST(SVTAttention, RowsAreStochastic) {
    SVTConfig c = toy_config();
    c.layers = 2;
    StereoVideoTransformer<float> m(c, 6, 8, 6);
    Rng rng(7);
    Tape<float> tape;
    AttentionTrace<float> trace;
    m.forward(tape, tape.constant(rng.uniform_tensor<float>({4, 3, 6, 8}, 0, 1)),
              tape.constant(rng.uniform_tensor<float>({6, 8}, 0, 30)), 2, &trace);
    ASSERT_EQ(trace.heads.size(), 6u);
    for (const auto& h : trace.heads) {
        const std::size_t n = h.weights.shape().back();
        for (std::size_t r = 0; r < h.weights.size() / n; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < n; ++j) {
                EXPECT_GE(h.weights[r * n + j], 0.f);
                s += h.weights[r * n + j];
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(SVTAttention, TemporalHeadOverEqualValuesReturnsThatValue) {
    auto c = toy_config();
    c.head_axes = {HeadAxis::temporal, HeadAxis::temporal, HeadAxis::temporal};
    StereoVideoTransformer<double> m(c, 4, 4, 8);
    Rng rng(9);
    // Tokens constant along time for every spatial index.
    TensorD tok({3, 4, c.d});
    const auto base = rng.uniform_tensor<double>({4, c.d}, -1, 1);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t i = 0; i < base.size(); ++i) tok[t * base.size() + i] = base[i];
    Tape<double> tape;
    AttentionTrace<double> trace;
    auto x = tape.constant(tok);
    m.attention(tape, 0, x, tape.constant(rng.uniform_tensor<double>({1, 4, c.d}, -1, 1)), &trace);
    for (const auto& h : trace.heads) {
        const auto v = matmul(x, tape.param(m.store["svt.l0.h" + std::to_string(h.head) + ".wv"])).value();
        for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(h.output[i], v[i], 1e-12);
    }
}

TEST(SVTAttention, SingleTemporalTokenIsIdentityOnValues) {
    auto c = toy_config();
    StereoVideoTransformer<double> m(c, 4, 4, 10);
    Rng rng(11);
    Tape<double> tape;
    AttentionTrace<double> trace;
    auto x = tape.constant(rng.uniform_tensor<double>({1, 4, c.d}, -1, 1));
    m.attention(tape, 0, x, tape.constant(rng.uniform_tensor<double>({1, 4, c.d}, -1, 1)), &trace);
    const auto& h = trace.heads[1];
    ASSERT_EQ(h.axis, HeadAxis::temporal);
    const auto v = matmul(x, tape.param(m.store["svt.l0.h1.wv"])).value();
    EXPECT_EQ(h.output, v);
}

TEST(SVTAttention, HeadsOnlySeeTheirGroup) {
    auto c = toy_config();
    StereoVideoTransformer<double> m(c, 4, 4, 12);
    Rng rng(13);
    const auto x0 = rng.uniform_tensor<double>({3, 4, c.d}, -1, 1);
    const auto d0 = rng.uniform_tensor<double>({1, 4, c.d}, -1, 1);
    auto run = [&](const TensorD& x, const TensorD& d) {
        Tape<double> tape;
        AttentionTrace<double> tr;
        m.attention(tape, 0, tape.constant(x), tape.constant(d), &tr);
        return tr;
    };
    const auto ref = run(x0, d0);
    // Query (t=0, s=0). Spatial group: t=0. Temporal group: s=0.
    // Disparity group: disparity token s=0.
    auto x_other = x0;
    for (std::size_t k = 0; k < c.d; ++k) x_other.at(1, 3, k) += 1.0;  // outside both groups
    auto d_other = d0;
    for (std::size_t k = 0; k < c.d; ++k) d_other.at(0, 2, k) += 1.0;
    const auto moved = run(x_other, d_other);
    for (std::size_t hd = 0; hd < 3; ++hd)
        for (std::size_t k = 0; k < c.d / 3; ++k)
            EXPECT_EQ(moved.heads[hd].output.at(0, 0, k), ref.heads[hd].output.at(0, 0, k));

    // In-group changes do move the output.
    auto x_same_t = x0;
    for (std::size_t k = 0; k < c.d; ++k) x_same_t.at(0, 2, k) += 1.0;
    EXPECT_NE(run(x_same_t, d0).heads[0].output.at(0, 0, 0), ref.heads[0].output.at(0, 0, 0));
    auto x_same_s = x0;
    for (std::size_t k = 0; k < c.d; ++k) x_same_s.at(2, 0, k) += 1.0;
    EXPECT_NE(run(x_same_s, d0).heads[1].output.at(0, 0, 0), ref.heads[1].output.at(0, 0, 0));
}

TEST(SVTAttention, SpatialPermutationEquivarianceWithZeroPositions) {
    auto c = toy_config();
    c.layers = 2;
    StereoVideoTransformer<double> m(c, 4, 6, 14);
    Rng rng(15);
    const auto x = rng.uniform_tensor<double>({2, 6, c.d}, -1, 1);
    const auto d = rng.uniform_tensor<double>({1, 6, c.d}, -1, 1);
    const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    auto run = [&](const TensorD& xx, const TensorD& dd) {
        Tape<double> tape;
        TokenGrid<double> g{tape.constant(xx), tape.constant(dd), {2, 2, 3}};
        return m.encode(tape, g).tokens.value();
    };
    const auto out = run(x, d);
    const auto out_p = run(permute_spatial(x, perm), permute_spatial(d, perm));
    const auto expected = permute_spatial(out, perm);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out_p[i], expected[i], 1e-12);
}

TEST(SVTAttention, InvalidHeadAssignmentRejected) {
    auto c = toy_config();
    c.head_axes = {HeadAxis::spatial};
    EXPECT_THROW(StereoVideoTransformer<float>(c, 4, 4, 1), ContractError);
    c.head_axes.clear();
    c.d = 7;
    EXPECT_THROW(StereoVideoTransformer<float>(c, 4, 4, 1), ContractError);
}

TEST(SVTEncoder, ZeroLayersIsIdentity) {
    auto c = toy_config();
    c.layers = 0;
    StereoVideoTransformer<double> m(c, 4, 4, 16);
    Rng rng(17);
    const auto x = rng.uniform_tensor<double>({2, 4, c.d}, -1, 1);
    Tape<double> tape;
    TokenGrid<double> g{tape.constant(x), tape.constant(TensorD({1, 4, c.d})), {2, 2, 2}};
    EXPECT_EQ(m.encode(tape, g).tokens.value(), x);
}

TEST(SVTEncoder, ShapePreservedForAnyDepth) {
    for (std::size_t L : {1u, 2u, 3u}) {
        auto c = toy_config();
        c.layers = L;
        StereoVideoTransformer<float> m(c, 4, 6, L);
        Rng rng(18);
        Tape<float> tape;
        TokenGrid<float> g{tape.constant(rng.uniform_tensor<float>({3, 6, c.d}, -1, 1)),
                           tape.constant(rng.uniform_tensor<float>({1, 6, c.d}, -1, 1)),
                           {3, 2, 3}};
        EXPECT_EQ(m.encode(tape, g).tokens.shape(), (Shape{3, 6, c.d}));
    }
}

TEST(SVTEncoder, FullLayerGradientCheck) {
    // 2x2x2 token grid: T=2, t=1, 4x4 frames with 2x2 patches.
    auto c = toy_config();
    StereoVideoTransformer<double> m(c, 4, 4, 19);
    Rng rng(20);
    auto params = m.store.parameters();
    auto r = gradcheck(
        [&](Tape<double>& tape, std::vector<Var<double>>& v) {
            auto fm = m.forward(tape, v[0], v[1], 1);
            auto w = tape.constant(Rng(21).uniform_tensor<double>(fm.shape(), -1, 1));
            return sum(mul(fm, w));
        },
        {rng.uniform_tensor<double>({2, 3, 4, 4}, 0, 1), rng.uniform_tensor<double>({4, 4}, 0, 2)},
        params, {.max_coords = 8});
    EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst;
    EXPECT_GT(r.checked, 100u);
}

TEST(SVTFeatureMap, ZeroTokensZeroBias) {
    auto c = toy_config();
    StereoVideoTransformer<double> m(c, 4, 6, 22);
    zero_param(m, "svt.depatch.bias");
    Tape<double> tape;
    TokenGrid<double> g{tape.constant(TensorD({2, 6, c.d})), tape.constant(TensorD({1, 6, c.d})),
                        {2, 2, 3}};
    const auto fm = m.feature_map(tape, g, 1);
    EXPECT_EQ(fm.shape(), (Shape{3, 4, 6}));
    for (double v : fm.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(SVTFeatureMap, ExtentsAreWholePatches) {
    SVTConfig c = toy_config();
    c.h = 3;
    c.w = 4;
    StereoVideoTransformer<float> m(c, 10, 13, 23);
    Rng rng(24);
    Tape<float> tape;
    auto g = m.embed(tape, tape.constant(rng.uniform_tensor<float>({2, 3, 10, 13}, 0, 1)),
                     tape.constant(Tensor({10, 13})));
    EXPECT_EQ(m.feature_map(tape, g, 1).shape(), (Shape{3, 9, 12}));
}

TEST(SVTFeatureMap, SwappingTokensSwapsBlocks) {
    auto c = toy_config();
    StereoVideoTransformer<double> m(c, 4, 6, 25);
    Rng rng(26);
    const auto x = rng.uniform_tensor<double>({1, 6, c.d}, -1, 1);
    const auto xs = permute_spatial(x, {4, 1, 2, 3, 0, 5});  // swap tokens 0 and 4
    auto run = [&](const TensorD& t) {
        Tape<double> tape;
        TokenGrid<double> g{tape.constant(t), tape.constant(TensorD({1, 6, c.d})), {1, 2, 3}};
        return m.feature_map(tape, g, 0).value();
    };
    const auto a = run(x), b = run(xs);
    // token 0 -> block rows 0..1, cols 0..1; token 4 -> rows 2..3, cols 2..3
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
                EXPECT_EQ(b.at(ch, dy, dx), a.at(ch, 2 + dy, 2 + dx));
                EXPECT_EQ(b.at(ch, 2 + dy, 2 + dx), a.at(ch, dy, dx));
                EXPECT_EQ(b.at(ch, dy, 4 + dx), a.at(ch, dy, 4 + dx));
            }
}

TEST(SVTInit, SeedDeterminesWeights) {
    auto c = toy_config();
    StereoVideoTransformer<float> a(c, 4, 4, 99), b(c, 4, 4, 99), d(c, 4, 4, 100);
    EXPECT_EQ(a.store["svt.l0.h0.wq"].value, b.store["svt.l0.h0.wq"].value);
    EXPECT_NE(a.store["svt.l0.h0.wq"].value, d.store["svt.l0.h0.wq"].value);
    const double bound = 1.0 / std::sqrt(6.0);
    for (float v : a.store["svt.l0.h0.wq"].value.data()) EXPECT_LE(std::abs(v), bound);
}
