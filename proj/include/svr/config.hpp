#pragma once

// Run configuration: INI file with sections mirroring the fields below.
// Unknown keys are rejected so typos do not silently fall back to defaults.

#include <cstdint>
#include <set>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "svr/losses.hpp"
#include "svr/saliency.hpp"
#include "svr/shift_warp.hpp"
#include "svr/svt.hpp"

namespace svr {

struct OptimizerConfig {
    double lr = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Directory names under the dataset root. Frames inside a view directory
/// are either grouped in per-scene subdirectories or named
/// `<scene>_<frame>.png`.
struct DatasetLayout {
    std::string left = "left";
    std::string right = "right";
    std::string disparity = "disparity";
    std::string saliency_left = "saliency_left";
    std::string saliency_right = "saliency_right";
    std::string boxes_left = "boxes_left";
    std::string boxes_right = "boxes_right";
    bool uniform_saliency = false;  // skip saliency/boxes and use a uniform mask
};

struct RunConfig {
    ShiftParams shift;  // includes target_ratio
    FuseParams fuse;
    DilateParams dilate;
    // Desk-scale transformer; SVTConfig's own defaults are the full-size ones.
    SVTConfig svt{.t = 2, .h = 8, .w = 8, .d = 24, .layers = 1, .heads = 3, .mlp_dim = 48, .head_axes = {}};
    std::size_t pam_channels = 16;
    double cycle_tau = 1.0;
    LossWeights loss;
    OptimizerConfig optim;
    std::size_t iterations = 200;
    std::uint64_t seed = 0;
    std::size_t window = 4;
    DatasetLayout layout;
    bool synthetic = false;  // train/retarget on the built-in synthetic clip
    std::string root, weights = "weights.bin", output = "out", extractor;

    void validate() const {
        shift.validate();
        svt.validate();
        loss.validate();
        if (!(optim.lr >= 0)) throw ContractError("config: learning rate must be >= 0");
        if (!(optim.beta1 >= 0 && optim.beta1 < 1 && optim.beta2 >= 0 && optim.beta2 < 1))
            throw ContractError("config: Adam betas must lie in [0,1)");
        if (!(optim.epsilon > 0)) throw ContractError("config: Adam epsilon must be > 0");
        if (window == 0) throw ContractError("config: window must be >= 1");
        if (pam_channels == 0) throw ContractError("config: pam_channels must be >= 1");
        if (dilate.kernel < 1 || dilate.kernel % 2 == 0) throw ContractError("config: dilate kernel must be odd");
    }
};

namespace detail {

// Reads `key` into `field` when present and records it as known.
struct IniReader {
    const boost::property_tree::ptree& tree;
    std::set<std::string> known;

    template <class V>
    void get(const std::string& key, V& field) {
        known.insert(key);
        const auto child = tree.get_child_optional(key);
        if (!child) return;
        const auto v = child->template get_value_optional<V>();
        if (!v) throw IngestionError("config: bad value for " + key + ": '" + child->data() + "'");
        field = *v;
    }
};

}  // namespace detail

inline void apply_config(const boost::property_tree::ptree& tree, RunConfig& c) {
    detail::IniReader r{tree, {}};
    r.get("retarget.target_ratio", c.shift.target_ratio);
    r.get("retarget.alpha", c.shift.alpha);
    r.get("retarget.beta", c.shift.beta);
    r.get("retarget.min_confidence", c.fuse.min_confidence);
    r.get("retarget.blur_sigma", c.dilate.blur_sigma);
    r.get("retarget.dilate_kernel", c.dilate.kernel);
    r.get("svt.t", c.svt.t);
    r.get("svt.h", c.svt.h);
    r.get("svt.w", c.svt.w);
    r.get("svt.d", c.svt.d);
    r.get("svt.layers", c.svt.layers);
    r.get("svt.heads", c.svt.heads);
    r.get("svt.mlp_dim", c.svt.mlp_dim);
    r.get("model.pam_channels", c.pam_channels);
    r.get("model.cycle_tau", c.cycle_tau);
    r.get("loss.alpha_reg", c.loss.alpha_reg);
    r.get("loss.gamma", c.loss.gamma);
    r.get("optim.lr", c.optim.lr);
    r.get("optim.beta1", c.optim.beta1);
    r.get("optim.beta2", c.optim.beta2);
    r.get("optim.epsilon", c.optim.epsilon);
    r.get("train.iterations", c.iterations);
    r.get("train.seed", c.seed);
    r.get("data.window", c.window);
    r.get("data.synthetic", c.synthetic);
    r.get("data.root", c.root);
    r.get("data.left", c.layout.left);
    r.get("data.right", c.layout.right);
    r.get("data.disparity", c.layout.disparity);
    r.get("data.saliency_left", c.layout.saliency_left);
    r.get("data.saliency_right", c.layout.saliency_right);
    r.get("data.boxes_left", c.layout.boxes_left);
    r.get("data.boxes_right", c.layout.boxes_right);
    r.get("data.uniform_saliency", c.layout.uniform_saliency);
    r.get("paths.weights", c.weights);
    r.get("paths.output", c.output);
    r.get("paths.extractor", c.extractor);
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw IngestionError("config: key outside a section: " + section);
        for (const auto& [key, _] : body)
            if (!r.known.count(section + "." + key))
                throw IngestionError("config: unknown key " + section + "." + key);
    }
}

inline RunConfig load_config(const std::string& path) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(path, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw IngestionError("config: " + std::string(e.what()));
    }
    RunConfig c;
    apply_config(tree, c);
    c.validate();
    return c;
}

}  // namespace svr
