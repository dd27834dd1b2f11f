#include <filesystem>

#include <gtest/gtest.h>

#include "svr/random.hpp"
#include "svr/saliency.hpp"

using namespace svr;

namespace {

SaliencyMap uniform_saliency(std::size_t H, std::size_t W, float v = 1.f) {
    return {Tensor({H, W}, v), "f"};
}

}  // namespace

TEST(Fuse, AllZeroSaliencyGivesZeroMask) {
    auto m = fuse(uniform_saliency(6, 8, 0.f), DisparityMap::constant(6, 8, 3.f),
                  {{0, 0, 8, 6, "car", 0.9}});
    for (auto v : m.values.data()) EXPECT_EQ(v, 0.f);
}

TEST(Fuse, BoxOverLeftHalf) {
    auto m = fuse(uniform_saliency(4, 8), DisparityMap::constant(4, 8, 5.f),
                  {{0, 0, 4, 4, "person", 0.8}});
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 8; ++x) EXPECT_EQ(m.values.at(y, x), x < 4 ? 1.f : 0.f);
}

TEST(Fuse, DisparityReweightingHandExample) {
    // Two pixels in the box: d_min gets weight 0 -> 0.5, d_max gets 1 -> 1.0.
    DisparityMap d(1, 3);
    d.values = Tensor({1, 3}, {2.f, 10.f, 6.f});
    d.valid = {1, 1, 1};
    auto m = fuse(uniform_saliency(1, 3), d, {{0, 0, 2, 1, "x", 1.0}});
    EXPECT_FLOAT_EQ(m.values[0], 0.5f);
    EXPECT_FLOAT_EQ(m.values[1], 1.0f);
    EXPECT_FLOAT_EQ(m.values[2], 0.0f);
}

TEST(Fuse, InvalidDisparityIsNeutral) {
    DisparityMap d(1, 3);
    d.values = Tensor({1, 3}, {0.f, 10.f, 2.f});
    d.valid = {0, 1, 1};
    auto m = fuse(uniform_saliency(1, 3), d, {{0, 0, 3, 1, "x", 1.0}});
    EXPECT_FLOAT_EQ(m.values[0], 0.75f);  // 0.5 + 0.5 * 0.5
    EXPECT_FLOAT_EQ(m.values[1], 1.0f);
    EXPECT_FLOAT_EQ(m.values[2], 0.5f);
}

TEST(Fuse, LowConfidenceBoxesIgnored) {
    auto m = fuse(uniform_saliency(4, 4), DisparityMap::constant(4, 4, 1.f),
                  {{0, 0, 4, 4, "x", 0.1}}, {.min_confidence = 0.25});
    for (auto v : m.values.data()) EXPECT_EQ(v, 0.f);
}

TEST(Fuse, ExtentMismatch) {
    EXPECT_THROW(fuse(uniform_saliency(4, 4), DisparityMap::constant(4, 5, 1.f), {}),
                 DimensionError);
}

TEST(Fuse, OutputInsideBoxUnionProperty) {
    Rng rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t H = 5 + rng.next() % 10, W = 5 + rng.next() % 10;
        SaliencyMap s{rng.uniform_tensor<float>({H, W}, 0, 1), "f"};
        DisparityMap d(H, W);
        for (std::size_t p = 0; p < H * W; ++p) {
            d.valid[p] = rng.uniform() < 0.8;
            d.values[p] = d.valid[p] ? static_cast<float>(rng.uniform(0, 40)) : 0.f;
        }
        DetectionBoxSet boxes;
        for (int b = 0; b < 3; ++b)
            boxes.push_back({rng.uniform(0, W), rng.uniform(0, H), rng.uniform(1, W),
                             rng.uniform(1, H), "o", rng.uniform()});
        auto m = fuse(s, d, boxes);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const float v = m.values.at(y, x);
                EXPECT_GE(v, 0.f);
                EXPECT_LE(v, 1.f);
                if (v == 0.f) continue;
                const bool inside = std::any_of(boxes.begin(), boxes.end(), [&](const auto& b) {
                    return b.conf >= 0.25 && box_contains(b, x, y);
                });
                EXPECT_TRUE(inside);
            }
    }
}

TEST(Fuse, MonotoneInSaliencyProperty) {
    // Raising one saliency value never lowers the fused value there.
    Rng rng(32);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t H = 6, W = 7;
        SaliencyMap s{rng.uniform_tensor<float>({H, W}, 0, 1), "f"};
        DisparityMap d(H, W);
        for (std::size_t p = 0; p < H * W; ++p) {
            d.valid[p] = 1;
            d.values[p] = static_cast<float>(rng.uniform(1, 20));
        }
        DetectionBoxSet boxes{{0, 0, 7, 6, "o", 1.0}};
        const std::size_t p = rng.next() % (H * W);
        const auto before = fuse(s, d, boxes);
        s.values[p] = std::min(1.f, s.values[p] + static_cast<float>(rng.uniform(0, 0.5)));
        const auto after = fuse(s, d, boxes);
        EXPECT_GE(after.values[p], before.values[p] - 1e-7f);
    }
}

TEST(Dilate, ZeroAndOnesFixedPoints) {
    FusedMask zero{Tensor({12, 12})};
    const auto dz = dilate(zero);
    for (auto v : dz.values.data()) EXPECT_EQ(v, 0.f);
    FusedMask ones{Tensor({12, 12}, 1.f)};
    const auto d1 = dilate(ones);
    for (auto v : d1.values.data()) EXPECT_FLOAT_EQ(v, 1.f);
}

TEST(Dilate, SinglePixelGrowsToAtLeastKernelSupport) {
    FusedMask m{Tensor({33, 33})};
    m.values.at(16, 16) = 1.f;
    const auto d = dilate(m);
    for (std::size_t y = 11; y <= 21; ++y)
        for (std::size_t x = 11; x <= 21; ++x) EXPECT_GT(d.values.at(y, x), 0.f);
}

TEST(Dilate, EvenKernelRejected) {
    FusedMask m{Tensor({5, 5})};
    EXPECT_THROW(dilate(m, {.blur_sigma = 3, .kernel = 10}), ContractError);
}

TEST(Dilate, NeverShrinksSupportProperty) {
    Rng rng(33);
    for (int trial = 0; trial < 20; ++trial) {
        FusedMask m{Tensor({3, 14, 16})};  // multi-channel: processed per channel
        for (auto& v : m.values.data()) v = rng.uniform() < 0.1 ? static_cast<float>(rng.uniform()) : 0.f;
        const auto d = dilate(m);
        for (std::size_t i = 0; i < m.values.size(); ++i)
            if (m.values[i] > 0) EXPECT_GT(d.values[i], 0.f);
    }
}

TEST(Boxes, ParseAndValidate) {
    auto boxes = parse_boxes(nlohmann::json::parse(
        R"([{"x":1,"y":2,"w":3,"h":4,"label":"car","conf":0.5}])"));
    ASSERT_EQ(boxes.size(), 1u);
    EXPECT_EQ(boxes[0].label, "car");
    EXPECT_DOUBLE_EQ(boxes[0].h, 4);
    EXPECT_THROW(parse_boxes(nlohmann::json::parse(R"([{"x":1,"y":2,"w":0,"h":4}])")),
                 IngestionError);
    EXPECT_THROW(parse_boxes(nlohmann::json::parse(R"({"x":1})")), IngestionError);
    EXPECT_THROW(parse_boxes(nlohmann::json::parse(R"([{"x":1,"y":2,"w":3,"h":4,"conf":2}])")),
                 IngestionError);
}

TEST(Disparity, KittiEncodingRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "svr_disp_test";
    std::filesystem::create_directories(dir);
    DisparityMap d(2, 2);
    d.values = Tensor({2, 2}, {100.f, 0.f, 3.5f, 0.25f});
    d.valid = {1, 0, 1, 1};
    const auto path = (dir / "d.png").string();
    save_disparity(path, d);
    const auto raw = read_png(path);
    EXPECT_EQ(raw.bit_depth, 16);
    EXPECT_EQ(raw.samples[0], 25600);
    const auto back = load_disparity(path);
    EXPECT_FLOAT_EQ(back.values[0], 100.f);
    EXPECT_FALSE(back.is_valid(0, 1));
    EXPECT_FLOAT_EQ(back.values[2], 3.5f);
    EXPECT_FLOAT_EQ(back.values[3], 0.25f);
    std::filesystem::remove_all(dir);
}
