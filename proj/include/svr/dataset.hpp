#pragma once

// Stereo clip ingestion from frame directories, plus the synthetic clip used
// for smoke training.

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "svr/config.hpp"
#include "svr/disparity.hpp"
#include "svr/image_io.hpp"
#include "svr/saliency.hpp"

namespace svr {

struct StereoClip {
    std::string scene;
    std::vector<std::string> frame_ids;  // relative path without extension, per frame
    std::vector<Tensor> left, right;     // [3,H,W] in [0,1]
    std::vector<DisparityMap> disparity;
    std::size_t center = 0;

    std::size_t length() const { return left.size(); }
    std::size_t height() const { return left.at(0).dim(1); }
    std::size_t width() const { return left.at(0).dim(2); }
    const std::string& center_id() const { return frame_ids.at(center); }

    void validate() const {
        const std::size_t T = left.size();
        if (T == 0 || right.size() != T || disparity.size() != T || frame_ids.size() != T)
            throw ContractError("clip: per-frame lists must be non-empty and equally long");
        if (center >= T) throw ContractError("clip: center index out of range");
        for (std::size_t t = 0; t < T; ++t)
            if (left[t].shape() != left[0].shape() || right[t].shape() != left[0].shape() ||
                disparity[t].values.shape() != Shape{height(), width()})
                throw DimensionError("clip: frame " + frame_ids[t] + " has different extents");
    }
};

/// Saliency inputs for the center frame of one clip.
struct ViewInputs {
    SaliencyMap saliency;
    DetectionBoxSet boxes;
    bool uniform = false;
};

struct ClipInputs {
    ViewInputs left, right;
};

inline std::size_t window_count(std::size_t frames, std::size_t T) { return frames >= T ? frames - T + 1 : 0; }

/// `sliding`: every run of T consecutive frames, centered at T/2.
/// `per_frame`: one window per frame containing it, as centered as the scene
/// edges allow; the clip's center is that frame.
enum class Windowing { sliding, per_frame };

namespace detail {

namespace fs = std::filesystem;

// Scene -> sorted frame ids ("scene/frame" or "scene_frame").
inline std::map<std::string, std::vector<std::string>> list_scenes(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IngestionError("missing frame directory: " + dir.string());
    std::map<std::string, std::vector<std::string>> scenes;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory()) {
            const auto scene = e.path().filename().string();
            for (const auto& f : fs::directory_iterator(e.path()))
                if (f.is_regular_file() && f.path().extension() == ".png")
                    scenes[scene].push_back(scene + "/" + f.path().stem().string());
        } else if (e.is_regular_file() && e.path().extension() == ".png") {
            const auto stem = e.path().stem().string();
            const auto cut = stem.rfind('_');
            scenes[cut == std::string::npos ? std::string() : stem.substr(0, cut)].push_back(stem);
        }
    }
    for (auto& [_, ids] : scenes) std::sort(ids.begin(), ids.end());
    return scenes;
}

inline DisparityMap load_disparity_or_invalid(const fs::path& path, std::size_t H, std::size_t W) {
    if (!fs::exists(path)) return DisparityMap(H, W);
    auto d = load_disparity(path.string());
    if (d.height() != H || d.width() != W) throw IngestionError("disparity extents differ from frame: " + path.string());
    return d;
}

}  // namespace detail

/// Sliding windows of `cfg.window` frames per scene, ordered by scene then
/// frame. A missing right frame is an ingestion error; a missing disparity
/// file yields an all-invalid map. Scenes shorter than the window are
/// skipped and reported in `warnings`.
inline std::vector<StereoClip> load_dataset(const std::string& root, const RunConfig& cfg,
                                            std::vector<std::string>* warnings = nullptr,
                                            Windowing mode = Windowing::sliding) {
    namespace fs = std::filesystem;
    const fs::path base(root);
    const auto& L = cfg.layout;
    const std::size_t T = cfg.window;
    std::vector<StereoClip> clips;
    for (const auto& [scene, ids] : detail::list_scenes(base / L.left)) {
        if (ids.size() < T) {
            if (warnings)
                warnings->push_back("scene '" + scene + "' has " + std::to_string(ids.size()) +
                                    " frames, fewer than the window of " + std::to_string(T) + "; skipped");
            continue;
        }
        std::vector<Tensor> left, right;
        std::vector<DisparityMap> disp;
        for (const auto& id : ids) {
            left.push_back(load_rgb((base / L.left / (id + ".png")).string()));
            const auto rp = base / L.right / (id + ".png");
            if (!fs::exists(rp)) throw IngestionError("missing right frame: " + rp.string());
            right.push_back(load_rgb(rp.string()));
            if (right.back().shape() != left.back().shape())
                throw IngestionError("left/right extents differ: " + rp.string());
            disp.push_back(detail::load_disparity_or_invalid(base / L.disparity / (id + ".png"),
                                                             left.back().dim(1), left.back().dim(2)));
        }
        const std::size_t n = mode == Windowing::sliding ? window_count(ids.size(), T) : ids.size();
        for (std::size_t k = 0; k < n; ++k) {
            std::size_t s = k;
            StereoClip c;
            c.scene = scene;
            c.center = T / 2;
            if (mode == Windowing::per_frame) {
                s = std::min(k - std::min(k, T / 2), ids.size() - T);
                c.center = k - s;
            }
            for (std::size_t t = s; t < s + T; ++t) {
                c.frame_ids.push_back(ids[t]);
                c.left.push_back(left[t]);
                c.right.push_back(right[t]);
                c.disparity.push_back(disp[t]);
            }
            c.validate();
            clips.push_back(std::move(c));
        }
    }
    return clips;
}

/// Saliency maps and boxes for the clip's center frame.
inline ClipInputs load_clip_inputs(const std::string& root, const RunConfig& cfg, const StereoClip& clip) {
    namespace fs = std::filesystem;
    ClipInputs in;
    if (cfg.layout.uniform_saliency) {
        in.left.uniform = in.right.uniform = true;
        return in;
    }
    const fs::path base(root);
    const auto& id = clip.center_id();
    auto view = [&](const std::string& sal_dir, const std::string& box_dir) {
        ViewInputs v;
        const auto sp = base / sal_dir / (id + ".png");
        const auto bp = base / box_dir / (id + ".json");
        if (!fs::exists(sp)) throw IngestionError("missing saliency map: " + sp.string());
        if (!fs::exists(bp)) throw IngestionError("missing detection boxes: " + bp.string());
        v.saliency = SaliencyMap{load_gray(sp.string()), id};
        if (v.saliency.values.shape() != Shape{clip.height(), clip.width()})
            throw IngestionError("saliency extents differ from frame: " + sp.string());
        v.boxes = load_boxes(bp.string());
        return v;
    };
    in.left = view(cfg.layout.saliency_left, cfg.layout.boxes_left);
    in.right = view(cfg.layout.saliency_right, cfg.layout.boxes_right);
    return in;
}

struct SyntheticClip {
    StereoClip clip;
    ClipInputs inputs;
};

/// A bright 4x4 square moving right by one pixel per frame over a
/// horizontal gradient. The square has disparity 2 and the background 1, so
/// the right view shows the square two columns left of its left-view position.
inline SyntheticClip make_synthetic_clip(std::size_t T = 8, std::size_t H = 16, std::size_t W = 32) {
    if (H < 8 || W < 12) throw ContractError("synthetic clip needs at least 8x12 frames");
    const std::size_t side = 4, y0 = H / 2 - 2;
    SyntheticClip s;
    auto& c = s.clip;
    c.scene = "synthetic";
    c.center = T / 2;
    auto background = [&](std::size_t ch, std::size_t y, double x) {
        return 0.15 + 0.45 * x / double(W) + 0.05 * double(ch) * double(y) / double(H);
    };
    auto square_x = [&](std::size_t t) { return 3 + t % (W - side - 5); };
    for (std::size_t t = 0; t < T; ++t) {
        Tensor l({3, H, W}), r({3, H, W});
        DisparityMap d = DisparityMap::constant(H, W, 1.f);
        const std::size_t xl = square_x(t) + 2, xr = square_x(t);
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    const bool in_y = y >= y0 && y < y0 + side;
                    const float sq = 0.9f - 0.1f * float(ch);
                    l.at(ch, y, x) = in_y && x >= xl && x < xl + side ? sq : float(background(ch, y, double(x)));
                    r.at(ch, y, x) = in_y && x >= xr && x < xr + side ? sq : float(background(ch, y, double(x) + 1));
                }
        for (std::size_t y = y0; y < y0 + side; ++y)
            for (std::size_t x = xl; x < xl + side; ++x) d.values.at(y, x) = 2.f;
        c.frame_ids.push_back("synthetic/" + std::to_string(t));
        c.left.push_back(std::move(l));
        c.right.push_back(std::move(r));
        c.disparity.push_back(std::move(d));
    }
    const std::size_t xl = square_x(c.center) + 2;
    for (auto* v : {&s.inputs.left, &s.inputs.right}) {
        const std::size_t x0 = v == &s.inputs.left ? xl : xl - 2;
        Tensor sal({H, W}, 0.1f);
        for (std::size_t y = y0; y < y0 + side; ++y)
            for (std::size_t x = x0; x < x0 + side; ++x) sal.at(y, x) = 1.f;
        v->saliency = SaliencyMap{sal, c.center_id()};
        v->boxes = {DetectionBox{double(x0) - 1, double(y0) - 1, double(side) + 2, double(side) + 2, "square", 1.0}};
    }
    c.validate();
    return s;
}

}  // namespace svr
