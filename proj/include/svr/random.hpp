#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "svr/tensor.hpp"

namespace svr {

/// Seeded generator whose real draws do not depend on the standard
/// library's distribution implementations, so runs reproduce across
/// toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t next() { return engine_(); }

    template <class T>
    BasicTensor<T> uniform_tensor(Shape shape, double lo, double hi) {
        BasicTensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
        return t;
    }

    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    template <class T>
    BasicTensor<T> fan_in_tensor(Shape shape, std::size_t fan_in) {
        const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
        return uniform_tensor<T>(std::move(shape), -b, b);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace svr
