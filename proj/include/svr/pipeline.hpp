#pragma once

// End-to-end wiring: saliency -> column mapping -> warp for both views, the
// trainable SVT/PAM/reconstruction model, Adam, and the training step.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <unordered_map>

#include "svr/config.hpp"
#include "svr/dataset.hpp"
#include "svr/losses.hpp"
#include "svr/pam.hpp"
#include "svr/reconstruction.hpp"
#include "svr/shift_warp.hpp"
#include "svr/svt.hpp"

namespace svr {

// ---------------------------------------------------------------------------
// Retargeting (no learned parameters)

struct ViewRetarget {
    FusedMask mask;  // fused and dilated
    ColumnMapping mapping;
    ShiftMap shift;
    Tensor frame;  // warped center frame [3,H,W']
};

struct RetargetResult {
    ViewRetarget left, right;
};

inline FusedMask view_mask(const ViewInputs& in, const DisparityMap& disparity, const RunConfig& cfg) {
    if (in.uniform) return uniform_mask(disparity.height(), disparity.width());
    return dilate(fuse(in.saliency, disparity, in.boxes, cfg.fuse), cfg.dilate);
}

/// Per view: fuse -> dilate -> importance -> mapping -> shift map -> warp.
/// Views are mapped independently; the left-referenced disparity feeds both
/// fusions.
inline RetargetResult retarget_clip(const StereoClip& clip, const ClipInputs& inputs, const RunConfig& cfg) {
    cfg.shift.validate();
    clip.validate();
    const auto& disp = clip.disparity[clip.center];
    auto view = [&](const ViewInputs& in, const Tensor& frame) {
        ViewRetarget v;
        v.mask = view_mask(in, disp, cfg);
        v.mapping = mapping_from_mask(v.mask, cfg.shift);
        v.shift = shift_map(v.mapping);
        v.frame = warp(frame, v.shift);
        return v;
    };
    return {view(inputs.left, clip.left[clip.center]), view(inputs.right, clip.right[clip.center])};
}

// ---------------------------------------------------------------------------
// Model

/// Channels of the joined stream: warped frame + warped SVT map.
inline constexpr std::size_t kStreamChannels = 6;

template <class T>
class RetargetModel {
public:
    RetargetModel(const RunConfig& cfg, std::size_t H, std::size_t W, std::uint64_t seed)
        : svt(svt_config(cfg), H, W, seed + 1), pam(cfg.pam_channels, seed + 2),
          recon(kStreamChannels, seed + 3) {
        Rng rng(seed + 4);
        add_conv(join, rng, "join", kStreamChannels, cfg.pam_channels, 1);
    }

    static SVTConfig svt_config(const RunConfig& cfg) {
        SVTConfig c = cfg.svt;
        c.in_channels = 3;
        c.out_channels = 3;
        return c;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto* s : stores())
            for (auto* p : s->parameters()) out.push_back(p);
        return out;
    }

    std::vector<NamedTensor<T>> named_tensors() {
        std::vector<NamedTensor<T>> out;
        for (auto* s : stores())
            for (auto& n : s->named_tensors()) out.push_back(n);
        return out;
    }

    void zero_grad() {
        for (auto* s : stores()) s->zero_grad();
    }

    void save(const std::string& path) { save_weights(path, named_tensors()); }
    void load(const std::string& path) { assign_weights(load_weight_map(path), named_tensors()); }

    /// Warped frame stacked with the warped SVT feature map: [6,H,W'].
    Var<T> stream(Tape<T>& tape, const std::vector<Tensor>& frames, const DisparityMap& disp, std::size_t center,
                  const ViewRetarget& view) {
        const std::size_t Tn = frames.size(), H = frames[0].dim(1), W = frames[0].dim(2);
        BasicTensor<T> clip({Tn, 3, H, W});
        for (std::size_t t = 0; t < Tn; ++t)
            for (std::size_t i = 0; i < 3 * H * W; ++i) clip[t * 3 * H * W + i] = static_cast<T>(frames[t][i]);
        // Disparity enters the transformer in frame-width units.
        BasicTensor<T> d({H, W});
        for (std::size_t i = 0; i < d.size(); ++i)
            d[i] = disp.valid[i] ? static_cast<T>(disp.values[i] / static_cast<float>(W)) : T(0);
        auto fm = svt.forward(tape, tape.constant(std::move(clip)), tape.constant(std::move(d)), center);
        return concat(std::vector<Var<T>>{tape.constant(cast<T>(view.frame)), warp(fm, view.shift)}, 0);
    }

    StereoVideoTransformer<T> svt;
    ParamStore<T> join;
    ParallaxAttention<T> pam;
    Reconstruction<T> recon;

private:
    std::vector<ParamStore<T>*> stores() { return {&svt.store, &join, &pam.store, &recon.store}; }

    template <class U>
    static BasicTensor<U> cast(const Tensor& t) {
        if constexpr (std::is_same_v<U, float>) {
            return t;
        } else {
            BasicTensor<U> o(t.shape());
            for (std::size_t i = 0; i < t.size(); ++i) o[i] = static_cast<U>(t[i]);
            return o;
        }
    }
};

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
class Adam {
public:
    explicit Adam(OptimizerConfig cfg) : cfg_(cfg) {}

    void step(const std::vector<Parameter<T>*>& params) {
        ++t_;
        const double c1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto* p : params) {
            const double lr = cfg_.lr * p->lr_scale;
            auto& st = state_[p];
            if (st.m.size() != p->value.size()) {
                st.m = BasicTensor<T>(p->value.shape());
                st.v = BasicTensor<T>(p->value.shape());
            }
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const double g = p->grad[i];
                st.m[i] = static_cast<T>(cfg_.beta1 * st.m[i] + (1 - cfg_.beta1) * g);
                st.v[i] = static_cast<T>(cfg_.beta2 * st.v[i] + (1 - cfg_.beta2) * g * g);
                const double mh = st.m[i] / c1, vh = st.v[i] / c2;
                p->value[i] = static_cast<T>(p->value[i] - lr * mh / (std::sqrt(vh) + cfg_.epsilon));
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    struct Moments {
        BasicTensor<T> m, v;
    };
    OptimizerConfig cfg_;
    std::size_t t_ = 0;
    std::unordered_map<const Parameter<T>*, Moments> state_;
};

// ---------------------------------------------------------------------------
// Training

/// Forward pass of both views on one tape; the returned terms are ready for
/// total_loss.
template <class T>
struct ForwardPass {
    Var<T> recon_left, recon_right;
    AttentionPair<T> attention;
    Var<T> disparity;  // expected disparity from the right-to-left attention
    ValidMask valid;
    LossTerms<T> terms;
};

template <class T>
ForwardPass<T> forward_losses(Tape<T>& tape, RetargetModel<T>& model, FeatureExtractor<T>& fx, const StereoClip& clip,
                              const RetargetResult& rt, const RunConfig& cfg) {
    const auto& disp = clip.disparity[clip.center];
    auto sl = model.stream(tape, clip.left, disp, clip.center, rt.left);
    auto sr = model.stream(tape, clip.right, disp, clip.center, rt.right);
    auto fl = apply_conv(tape, model.join, "join", sl);
    auto fr = apply_conv(tape, model.join, "join", sr);

    ForwardPass<T> out;
    out.attention = model.pam.attention(tape, fl, fr);
    auto pl = model.pam.fuse(tape, fl, fr, out.attention.right_to_left);
    auto pr = model.pam.fuse(tape, fr, fl, out.attention.left_to_right);
    out.recon_left = model.recon.forward(tape, pl, sl, rt.left.mapping);
    out.recon_right = model.recon.forward(tape, pr, sr, rt.right.mapping);

    auto c = [&](const Tensor& t) { return tape.constant(BasicTensor<T>(t.shape(), std::vector<T>(t.vec().begin(), t.vec().end()))); };
    auto src_l = c(clip.left[clip.center]), src_r = c(clip.right[clip.center]);
    auto wl = c(rt.left.frame), wr = c(rt.right.frame);

    // Perceptual terms: warped and reconstructed frames, averaged over views.
    auto pw_l = perceptual_loss(tape, fx, src_l, wl, rt.left.mask);
    auto pw_r = perceptual_loss(tape, fx, src_r, wr, rt.right.mask);
    auto pc_l = perceptual_loss(tape, fx, src_l, out.recon_left, rt.left.mask);
    auto pc_r = perceptual_loss(tape, fx, src_r, out.recon_right, rt.right.mask);
    const T half = T(0.5);
    out.terms.vgg_entire = scale(add(add(pw_l.entire, pw_r.entire), add(pc_l.entire, pc_r.entire)), half);
    out.terms.vgg_salient = scale(add(add(pw_l.salient, pw_r.salient), add(pc_l.salient, pc_r.salient)), half);
    out.terms.dwt = add(dwt_loss(src_l, src_r, wl, wr), dwt_loss(src_l, src_r, out.recon_left, out.recon_right));

    // Photometric: warped left against the attention-transported warped right.
    out.valid = valid_mask(out.attention.right_to_left.value(), out.attention.left_to_right.value(), cfg.cycle_tau);
    auto transported = ParallaxAttention<T>::transport(out.attention.right_to_left, wr);
    out.terms.photo = out.valid.count > 0 ? photometric_loss(wl, transported, out.valid, cfg.loss.gamma)
                                          : tape.constant(BasicTensor<T>::scalar(T(0)));

    out.disparity = ParallaxAttention<T>::disparity(out.attention.right_to_left);
    BasicTensor<T> img(rt.left.frame.shape());
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<T>(rt.left.frame[i]);
    out.terms.smooth = smoothness_loss(out.disparity, img);
    return out;
}

inline void check_finite(const LossReport& r) {
    const auto v = r.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!std::isfinite(v[i]))
            throw TrainingError(LossReport::kFields[i],
                                std::string("non-finite loss term ") + LossReport::kFields[i]);
}

/// One forward/backward/Adam update.
template <class T>
LossReport train_step(RetargetModel<T>& model, FeatureExtractor<T>& fx, Adam<T>& adam, const StereoClip& clip,
                      const RetargetResult& rt, const RunConfig& cfg) {
    Tape<T> tape;
    model.pam.training = true;
    auto pass = forward_losses(tape, model, fx, clip, rt, cfg);
    LossReport rep;
    auto total = total_loss(pass.terms, cfg.loss, &rep);
    check_finite(rep);
    model.zero_grad();
    tape.backward(total);
    adam.step(model.parameters());
    return rep;
}

/// CSV header plus one row per iteration, values at full precision.
inline std::string loss_csv_header() {
    std::string h = "iteration";
    for (const char* f : LossReport::kFields) h += std::string(",") + f;
    return h;
}

inline std::string loss_csv_row(std::size_t it, const LossReport& r) {
    std::ostringstream os;
    os << it << std::setprecision(17);
    for (double v : r.values()) os << ',' << v;
    return os.str();
}

/// A training run over a list of clips, visited cyclically.
struct TrainingRun {
    std::vector<StereoClip> clips;
    std::vector<RetargetResult> retargeted;
    RunConfig cfg;
    std::unique_ptr<RetargetModel<float>> model;
    std::unique_ptr<FeatureExtractor<float>> extractor;
    std::unique_ptr<Adam<float>> adam;
    std::vector<LossReport> history;

    TrainingRun(std::vector<StereoClip> cs, const std::vector<ClipInputs>& inputs, RunConfig c)
        : clips(std::move(cs)), cfg(std::move(c)) {
        cfg.validate();
        if (clips.empty()) throw IngestionError("training: no clips");
        if (inputs.size() != clips.size()) throw ContractError("training: one input set per clip");
        for (std::size_t i = 0; i < clips.size(); ++i) {
            if (clips[i].left[0].shape() != clips[0].left[0].shape())
                throw DimensionError("training: all clips must share frame extents");
            retargeted.push_back(retarget_clip(clips[i], inputs[i], cfg));
        }
        model = std::make_unique<RetargetModel<float>>(cfg, clips[0].height(), clips[0].width(), cfg.seed);
        extractor = std::make_unique<FeatureExtractor<float>>(cfg.seed + 100);
        if (!cfg.extractor.empty()) extractor->load(cfg.extractor);
        adam = std::make_unique<Adam<float>>(cfg.optim);
    }

    const LossReport& step() {
        const std::size_t i = history.size() % clips.size();
        history.push_back(train_step(*model, *extractor, *adam, clips[i], retargeted[i], cfg));
        return history.back();
    }

    void write_csv(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw IngestionError("cannot write loss curve: " + path);
        os << loss_csv_header() << '\n';
        for (std::size_t i = 0; i < history.size(); ++i) os << loss_csv_row(i, history[i]) << '\n';
    }
};

}  // namespace svr
