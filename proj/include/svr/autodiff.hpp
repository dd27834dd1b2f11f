#pragma once

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "svr/tensor.hpp"

namespace svr {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const BasicTensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::ptrdiff_t axis) const { return value().dim(axis); }
    bool requires_grad() const { return tape->requires_grad(*this); }
};

/// A named trainable tensor plus its accumulated gradient.
template <class T>
struct Parameter {
    Parameter() = default;
    Parameter(std::string n, BasicTensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    std::string name;
    BasicTensor<T> value;
    BasicTensor<T> grad;
    // Multiplier on the optimizer step; fan-in initialized tensors use their
    // init bound so one base learning rate suits every layer width.
    double lr_scale = 1.0;

    void zero_grad() { grad = BasicTensor<T>(value.shape()); }
};

/// Define-by-run record of differentiable operations.
///
/// Records are appended in execution order, so every operand of record i
/// has an id < i. Backward walks the records in reverse and accumulates
/// into operand gradients. A tape is not thread-safe; build a fresh one per
/// training step.
template <class T>
class Tape {
public:
    using Grads = std::span<BasicTensor<T>* const>;
    using BackwardFn = std::function<void(const BasicTensor<T>& grad_out, Grads grad_in)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(BasicTensor<T> value) {
        const bool rg = value.requires_grad();
        return push(std::move(value), rg, {}, nullptr, nullptr);
    }

    Var<T> constant(BasicTensor<T> value) {
        value.set_requires_grad(false);
        return push(std::move(value), false, {}, nullptr, nullptr);
    }

    /// Leaf bound to a parameter; backward adds into `p.grad`.
    Var<T> param(Parameter<T>& p) {
        if (p.grad.shape() != p.value.shape()) p.zero_grad();
        return push(p.value, true, {}, nullptr, &p);
    }

    /// Append an op result. `fn` is dropped when no operand needs a gradient.
    Var<T> record(BasicTensor<T> value, std::vector<Var<T>> inputs, BackwardFn fn) {
        bool rg = false;
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const auto& v : inputs) {
            if (v.tape != this) throw ContractError("operand recorded on a different tape");
            ids.push_back(v.id);
            rg = rg || records_[v.id].requires_grad;
        }
        return push(std::move(value), rg, std::move(ids), rg ? std::move(fn) : nullptr, nullptr);
    }

    const BasicTensor<T>& value(Var<T> v) const { return records_.at(v.id).value; }
    bool requires_grad(Var<T> v) const { return records_.at(v.id).requires_grad; }
    std::size_t size() const noexcept { return records_.size(); }
    std::span<const std::size_t> inputs_of(std::size_t id) const { return records_.at(id).inputs; }

    /// Gradient of the last backward root with respect to `v`.
    const BasicTensor<T>& grad(Var<T> v) const {
        const auto& r = records_.at(v.id);
        if (!r.has_grad) throw ContractError("no gradient recorded for this value");
        return r.grad;
    }

    void backward(Var<T> root) {
        if (root.tape != this) throw ContractError("backward root belongs to another tape");
        auto& rr = records_.at(root.id);
        if (rr.value.size() != 1)
            throw ContractError("backward requires a scalar result, got shape " +
                                shape_string(rr.value.shape()));
        for (auto& r : records_) {
            r.grad = BasicTensor<T>();
            r.has_grad = false;
        }
        ensure_grad(root.id)[0] = T{1};

        std::vector<BasicTensor<T>*> slots;
        for (std::size_t i = root.id + 1; i-- > 0;) {
            auto& r = records_[i];
            if (!r.has_grad || !r.backward) continue;
            slots.assign(r.inputs.size(), nullptr);
            for (std::size_t k = 0; k < r.inputs.size(); ++k)
                if (records_[r.inputs[k]].requires_grad) slots[k] = &ensure_grad(r.inputs[k]);
            r.backward(r.grad, slots);
        }

        for (std::size_t i = 0; i < records_.size(); ++i) {
            auto& r = records_[i];
            if (!r.requires_grad || !r.inputs.empty()) continue;
            auto& g = ensure_grad(i);
            if (r.param) {
                auto& pg = r.param->grad;
                for (std::size_t k = 0; k < g.size(); ++k) pg[k] += g[k];
            }
        }
    }

private:
    struct Record {
        BasicTensor<T> value;
        BasicTensor<T> grad;
        bool requires_grad = false;
        bool has_grad = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
    };

    Var<T> push(BasicTensor<T> value, bool rg, std::vector<std::size_t> inputs, BackwardFn fn,
                Parameter<T>* p) {
        Record r;
        r.value = std::move(value);
        r.requires_grad = rg;
        r.inputs = std::move(inputs);
        r.backward = std::move(fn);
        r.param = p;
        records_.push_back(std::move(r));
        return Var<T>{this, records_.size() - 1};
    }

    BasicTensor<T>& ensure_grad(std::size_t id) {
        auto& r = records_[id];
        if (!r.has_grad) {
            r.grad = BasicTensor<T>(r.value.shape());
            r.has_grad = true;
        }
        return r.grad;
    }

    // deque keeps element addresses stable, so op closures may hold
    // pointers to operand values.
    std::deque<Record> records_;
};

}  // namespace svr
