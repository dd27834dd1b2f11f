#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "svr/autodiff.hpp"

namespace svr {

struct GradCheckOptions {
    double step = 1e-4;
    double tolerance = 1e-4;
    // Coordinates probed per tensor; tensors smaller than this are probed fully.
    std::size_t max_coords = 24;
    std::uint64_t seed = 0;
    // A failing probe is re-run with steps /10, /100, /1000; if one of them
    // agrees, the +-step interval straddled a ReLU/abs/max kink and the probe
    // is counted as skipped. More than max_skip_fraction skips still fails.
    bool skip_kinks = true;
    double max_skip_fraction = 0.25;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // probes straddling a non-differentiable point
    std::string worst;  // e.g. "param svt.l0.wq [3] analytic 0.5 numeric 0.49"
    bool passed = true;
};

/// Relative error used by every gradient check. The 1e-6 floor keeps
/// gradients that are analytically zero from dividing by zero.
inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

/// Central finite-difference check of `f`'s reverse-mode gradients.
///
/// `f(tape, vars)` must return a scalar Var built from `vars` (leaves made
/// from `inputs`, all requiring grad) and from any `params` it binds with
/// tape.param(). It is re-run on a fresh tape for every probe.
template <class F>
GradCheckResult gradcheck(F&& f, std::vector<TensorD> inputs,
                          std::vector<Parameter<double>*> params = {},
                          GradCheckOptions opt = {}) {
    auto evaluate = [&]() {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (auto& in : inputs) vars.push_back(tape.constant(in));
        return f(tape, vars).value().item();
    };

    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto in : inputs) vars.push_back(tape.leaf(in.set_requires_grad(true)));
    for (auto* p : params) p->zero_grad();
    auto out = f(tape, vars);
    tape.backward(out);

    auto straddles_kink = [&](std::vector<double>& data, std::size_t c, double analytic) {
        const double orig = data[c];
        bool agrees = false;
        for (double h : {opt.step / 10, opt.step / 100, opt.step / 1000}) {
            data[c] = orig + h;
            const double fp = evaluate();
            data[c] = orig - h;
            const double fm = evaluate();
            agrees = agrees || relative_error(analytic, (fp - fm) / (2 * h)) < opt.tolerance;
        }
        data[c] = orig;
        return agrees;
    };

    std::mt19937_64 rng(opt.seed);
    GradCheckResult res;
    auto probe = [&](std::vector<double>& data, const BasicTensor<double>& analytic,
                     const std::string& label) {
        std::vector<std::size_t> coords(data.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > opt.max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opt.max_coords);
            std::sort(coords.begin(), coords.end());
        }
        for (auto c : coords) {
            const double orig = data[c];
            data[c] = orig + opt.step;
            const double fp = evaluate();
            data[c] = orig - opt.step;
            const double fm = evaluate();
            data[c] = orig;
            const double numeric = (fp - fm) / (2 * opt.step);
            const double err = relative_error(analytic[c], numeric);
            if (opt.skip_kinks && err >= opt.tolerance && straddles_kink(data, c, analytic[c])) {
                ++res.skipped;
                continue;
            }
            ++res.checked;
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst = label + " [" + std::to_string(c) + "] analytic " +
                            std::to_string(analytic[c]) + " numeric " + std::to_string(numeric);
            }
        }
    };
    for (std::size_t i = 0; i < inputs.size(); ++i)
        probe(inputs[i].vec(), tape.grad(vars[i]), "input " + std::to_string(i));
    for (auto* p : params) {
        const auto analytic = p->grad;
        probe(p->value.vec(), analytic, "param " + p->name);
    }
    const auto total = static_cast<double>(res.checked + res.skipped);
    res.passed = res.max_rel_error < opt.tolerance &&
                 static_cast<double>(res.skipped) <= opt.max_skip_fraction * total;
    return res;
}

}  // namespace svr
