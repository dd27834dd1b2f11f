#include <cmath>

#include <gtest/gtest.h>

#include "svr/gradcheck.hpp"
#include "svr/pam.hpp"

using namespace svr;

namespace {

template <class T>
void set_identity_1x1(ParallaxAttention<T>& pam) {
    for (const char* n : {"pam.query", "pam.key"}) {
        auto& w = pam.store[std::string(n) + ".weight"].value;
        w.fill(T(0));
        for (std::size_t c = 0; c < pam.channels(); ++c) w.at(c, c, 0, 0) = T(1);
        pam.store[std::string(n) + ".bias"].value.fill(T(0));
    }
}

TensorD identity_attention(std::size_t H, std::size_t W) {
    TensorD a({H, W, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t u = 0; u < W; ++u) a.at(y, u, u) = 1;
    return a;
}

// A[y,u,(u+shift) mod W] = 1
TensorD shifted_attention(std::size_t H, std::size_t W, std::size_t shift) {
    TensorD a({H, W, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t u = 0; u < W; ++u) a.at(y, u, (u + shift) % W) = 1;
    return a;
}

void expect_rows_stochastic(const TensorD& a) {
    const std::size_t n = a.shape().back();
    for (std::size_t r = 0; r < a.size() / n; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) {
            EXPECT_GE(a[r * n + j], 0.0);
            s += a[r * n + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

}  // namespace

TEST(PamAttention, RowsAreDistributions) {
    ParallaxAttention<double> pam(4, 1);
    Rng rng(2);
    Tape<double> tape;
    auto att = pam.attention(tape, tape.constant(rng.uniform_tensor<double>({4, 3, 7}, -2, 2)),
                             tape.constant(rng.uniform_tensor<double>({4, 3, 7}, -2, 2)));
    EXPECT_EQ(att.right_to_left.shape(), (Shape{3, 7, 7}));
    expect_rows_stochastic(att.right_to_left.value());
    expect_rows_stochastic(att.left_to_right.value());
}

TEST(PamAttention, DominantDiagonalSaturatesToIdentity) {
    const std::size_t W = 5, H = 2, C = W;
    ParallaxAttention<double> pam(C, 3);
    set_identity_1x1(pam);
    // One-hot features with amplitude a: logits = a^2 / sqrt(C) on the diagonal.
    const double a = std::sqrt(100.0 * std::sqrt(double(C)));
    TensorD f({C, H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t u = 0; u < W; ++u) f.at(u, y, u) = a;
    Tape<double> tape;
    auto att = pam.attention(tape, tape.constant(f), tape.constant(f));
    const auto id = identity_attention(H, W);
    for (std::size_t i = 0; i < id.size(); ++i) {
        EXPECT_NEAR(att.right_to_left.value()[i], id[i], 1e-6);
        EXPECT_NEAR(att.left_to_right.value()[i], id[i], 1e-6);
    }
}

TEST(PamAttention, ConstantFeaturesGiveUniformRows) {
    ParallaxAttention<double> pam(3, 4);
    Tape<double> tape;
    auto f = tape.constant(TensorD({3, 2, 6}, 0.7));
    auto att = pam.attention(tape, f, f);
    for (double v : att.right_to_left.value().data()) EXPECT_NEAR(v, 1.0 / 6, 1e-12);
}

TEST(PamAttention, ExtentMismatch) {
    ParallaxAttention<double> pam(3, 4);
    Tape<double> tape;
    EXPECT_THROW(pam.attention(tape, tape.constant(TensorD({3, 2, 6})), tape.constant(TensorD({3, 2, 5}))),
                 DimensionError);
    EXPECT_THROW(pam.attention(tape, tape.constant(TensorD({2, 2, 6})), tape.constant(TensorD({2, 2, 6}))),
                 DimensionError);
}

TEST(PamFuse, IdentityAttentionTransportsRightExactly) {
    Rng rng(5);
    Tape<double> tape;
    auto right = tape.constant(rng.uniform_tensor<double>({4, 3, 6}, -1, 1));
    auto t = ParallaxAttention<double>::transport(tape.constant(identity_attention(3, 6)), right);
    EXPECT_EQ(t.value(), right.value());
}

TEST(PamFuse, UniformAttentionAveragesRows) {
    Rng rng(6);
    const auto r = rng.uniform_tensor<double>({2, 3, 5}, -1, 1);
    Tape<double> tape;
    auto t = ParallaxAttention<double>::transport(tape.constant(TensorD({3, 5, 5}, 0.2)),
                                                  tape.constant(r))
                 .value();
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 3; ++y) {
            double mean = 0;
            for (std::size_t v = 0; v < 5; ++v) mean += r.at(c, y, v) / 5;
            for (std::size_t u = 0; u < 5; ++u) EXPECT_NEAR(t.at(c, y, u), mean, 1e-12);
        }
}

TEST(PamFuse, OutputHas64Channels) {
    for (auto [C, H, W] : {std::tuple{2u, 3u, 4u}, std::tuple{5u, 2u, 7u}}) {
        ParallaxAttention<float> pam(C, 7);
        Rng rng(8);
        Tape<float> tape;
        auto l = tape.constant(rng.uniform_tensor<float>({C, H, W}, -1, 1));
        auto r = tape.constant(rng.uniform_tensor<float>({C, H, W}, -1, 1));
        auto att = pam.attention(tape, l, r);
        EXPECT_EQ(pam.fuse(tape, l, r, att.right_to_left).shape(), (Shape{64, H, W}));
        pam.training = false;
        EXPECT_EQ(pam.fuse(tape, l, r, att.right_to_left).shape(), (Shape{64, H, W}));
    }
}

TEST(PamDisparity, IdentityIsZero) {
    Tape<double> tape;
    for (double v : ParallaxAttention<double>::disparity(tape.constant(identity_attention(2, 5))).value().data())
        EXPECT_EQ(v, 0.0);
}

TEST(PamDisparity, OneColumnShiftIsOne) {
    // A[y,u,u-1] = 1 for u >= 1
    const std::size_t W = 6;
    auto a = shifted_attention(2, W, W - 1);
    Tape<double> tape;
    const auto d = ParallaxAttention<double>::disparity(tape.constant(a)).value();
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t u = 1; u < W; ++u) EXPECT_DOUBLE_EQ(d.at(y, u), 1.0);
}

TEST(PamDisparity, UniformThreeColumnsCenterIsZero) {
    Tape<double> tape;
    const auto d = ParallaxAttention<double>::disparity(tape.constant(TensorD({1, 3, 3}, 1.0 / 3))).value();
    EXPECT_NEAR(d.at(0, 1), 0.0, 1e-15);
    EXPECT_NEAR(d.at(0, 0), -1.0, 1e-15);
}

TEST(PamDisparity, BoundedByWidthProperty) {
    Rng rng(9);
    ParallaxAttention<double> pam(3, 10);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t W = 2 + rng.next() % 9;
        Tape<double> tape;
        auto att = pam.attention(tape, tape.constant(rng.uniform_tensor<double>({3, 2, W}, -5, 5)),
                                 tape.constant(rng.uniform_tensor<double>({3, 2, W}, -5, 5)));
        for (double v : ParallaxAttention<double>::disparity(att.right_to_left).value().data()) {
            EXPECT_LE(v, double(W - 1));
            EXPECT_GE(v, -double(W - 1));
        }
    }
}

TEST(PamValidMask, IdentityAllValid) {
    const auto id = identity_attention(3, 5);
    const auto m = valid_mask(id, id);
    EXPECT_EQ(m.count, 15u);
}

TEST(PamValidMask, ShiftedReturnInvalid) {
    const auto m = valid_mask(identity_attention(3, 8), shifted_attention(3, 8, 3), 1.0);
    EXPECT_EQ(m.count, 0u);
}

TEST(PamValidMask, VacuousThreshold) {
    const auto m = valid_mask(identity_attention(3, 8), shifted_attention(3, 8, 3), 8.0);
    EXPECT_EQ(m.count, 24u);
    for (std::size_t y = 0; y < 3; ++y)
        for (std::size_t x = 0; x < 8; ++x) EXPECT_TRUE(m.at(y, x));
}

TEST(PamGrad, FullForwardGradientCheck) {
    ParallaxAttention<double> pam(4, 11);
    Rng rng(12);
    auto params = pam.store.parameters();
    auto r = gradcheck(
        [&](Tape<double>& tape, std::vector<Var<double>>& v) {
            auto att = pam.attention(tape, v[0], v[1]);
            auto out = pam.fuse(tape, v[0], v[1], att.right_to_left);
            auto disp = ParallaxAttention<double>::disparity(att.right_to_left);
            Rng w(13);
            auto w1 = tape.constant(w.uniform_tensor<double>(out.shape(), -1, 1));
            auto w2 = tape.constant(w.uniform_tensor<double>(disp.shape(), -1, 1));
            auto w3 = tape.constant(w.uniform_tensor<double>(att.left_to_right.shape(), -1, 1));
            return add(add(sum(mul(out, w1)), sum(mul(disp, w2))), sum(mul(att.left_to_right, w3)));
        },
        {rng.uniform_tensor<double>({4, 3, 5}, -1, 1), rng.uniform_tensor<double>({4, 3, 5}, -1, 1)},
        params, {.max_coords = 6});
    EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst;
}
