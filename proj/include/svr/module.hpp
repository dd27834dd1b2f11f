#pragma once

// Named parameter storage shared by the learned blocks, plus the small
// layer helpers they are built from.

#include <cmath>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "svr/ops.hpp"
#include "svr/random.hpp"
#include "svr/weights_io.hpp"

namespace svr {

/// Owns trainable parameters and non-trainable buffers (batch-norm running
/// statistics) under stable addresses, in registration order.
template <class T>
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;
    ParamStore(ParamStore&&) = default;
    ParamStore& operator=(ParamStore&&) = default;

    Parameter<T>& add(const std::string& name, BasicTensor<T> init) {
        if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
        params_.emplace_back(name, std::move(init));
        index_[name] = &params_.back();
        return params_.back();
    }

    BatchNormStats<T>& add_bn(const std::string& prefix, std::size_t channels) {
        bn_.push_back({BasicTensor<T>({channels}), BasicTensor<T>({channels}, T(1)), T(0.1)});
        buffers_.push_back({prefix + ".running_mean", &bn_.back().mean});
        buffers_.push_back({prefix + ".running_var", &bn_.back().var});
        return bn_.back();
    }

    Parameter<T>& operator[](const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter " + name);
        return *it->second;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& p : params_) out.push_back(&p);
        return out;
    }

    /// Parameters then buffers; the order used in weight files.
    std::vector<NamedTensor<T>> named_tensors() {
        std::vector<NamedTensor<T>> out;
        for (auto& p : params_) out.emplace_back(p.name, &p.value);
        out.insert(out.end(), buffers_.begin(), buffers_.end());
        return out;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    void load(const std::map<std::string, Tensor>& records) { assign_weights(records, named_tensors()); }

private:
    std::deque<Parameter<T>> params_;
    std::deque<BatchNormStats<T>> bn_;
    std::vector<NamedTensor<T>> buffers_;
    std::map<std::string, Parameter<T>*> index_;
};

/// x[..., in] @ w[in, out] + b[out]
template <class T>
Var<T> linear(Tape<T>& tape, Var<T> x, Parameter<T>& w, Parameter<T>& b) {
    const auto& xs = x.shape();
    const std::size_t in = xs.back();
    const std::size_t rows = x.value().size() / in;
    auto y = matmul(reshape(x, {rows, in}), tape.param(w));
    Shape os = xs;
    os.back() = w.value.dim(1);
    return reshape(add_trailing(y, tape.param(b)), os);
}

/// Fan-in uniform init whose optimizer step is scaled by the init bound.
template <class T>
Parameter<T>& add_fan_in(ParamStore<T>& store, Rng& rng, const std::string& name, Shape shape,
                         std::size_t fan_in) {
    auto& p = store.add(name, rng.fan_in_tensor<T>(std::move(shape), fan_in));
    p.lr_scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return p;
}

/// Register a dense layer "<name>.weight" [in,out] and "<name>.bias" [out].
template <class T>
void add_linear(ParamStore<T>& store, Rng& rng, const std::string& name, std::size_t in,
                std::size_t out) {
    add_fan_in(store, rng, name + ".weight", {in, out}, in);
    add_fan_in(store, rng, name + ".bias", {out}, in);
}

/// Register a conv layer "<name>.weight" [co,ci,k,k] and "<name>.bias" [co].
template <class T>
void add_conv(ParamStore<T>& store, Rng& rng, const std::string& name, std::size_t ci,
              std::size_t co, std::size_t k) {
    add_fan_in(store, rng, name + ".weight", {co, ci, k, k}, ci * k * k);
    add_fan_in(store, rng, name + ".bias", {co}, ci * k * k);
}

template <class T>
Var<T> apply_linear(Tape<T>& tape, ParamStore<T>& store, const std::string& name, Var<T> x) {
    return linear(tape, x, store[name + ".weight"], store[name + ".bias"]);
}

/// Same-size convolution (odd kernel, stride 1).
template <class T>
Var<T> apply_conv(Tape<T>& tape, ParamStore<T>& store, const std::string& name, Var<T> x) {
    auto& w = store[name + ".weight"];
    const std::size_t pad = w.value.dim(-1) / 2;
    return conv2d(x, tape.param(w), tape.param(store[name + ".bias"]),
                  Conv2dOptions{{1, 1}, {pad, pad}});
}

}  // namespace svr
