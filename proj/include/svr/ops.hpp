#pragma once

// Differentiable primitives recorded on a Tape. Every op takes and returns
// Var handles; backward closures hold pointers to operand values, which
// the tape keeps alive and address-stable.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "svr/autodiff.hpp"

namespace svr {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct AxisSplit {
    std::size_t outer, n, inner;
};

inline std::size_t norm_axis(std::ptrdiff_t axis, std::size_t rank) {
    const auto r = static_cast<std::ptrdiff_t>(rank);
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimensionError("axis out of range");
    return static_cast<std::size_t>(axis);
}

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit a{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                             shape_string(b));
}

template <class T>
void add_into(BasicTensor<T>* dst, const BasicTensor<T>& src) {
    if (!dst) return;
    auto d = dst->data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    const auto& av = a.value();
    const auto& bv = b.value();
    BasicTensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return a.tape->record(std::move(out), {a, b}, [](const BasicTensor<T>& g, auto gi) {
        detail::add_into(gi[0], g);
        detail::add_into(gi[1], g);
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    const auto& av = a.value();
    const auto& bv = b.value();
    BasicTensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return a.tape->record(std::move(out), {a, b}, [](const BasicTensor<T>& g, auto gi) {
        detail::add_into(gi[0], g);
        if (gi[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    const auto* av = &a.value();
    const auto* bv = &b.value();
    BasicTensor<T> out(av->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*av)[i] * (*bv)[i];
    return a.tape->record(std::move(out), {a, b}, [av, bv](const BasicTensor<T>& g, auto gi) {
        if (gi[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * (*bv)[i];
        if (gi[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * (*av)[i];
    });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
    detail::require_same_shape(a.shape(), b.shape(), "div");
    const auto* av = &a.value();
    const auto* bv = &b.value();
    BasicTensor<T> out(av->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*av)[i] / (*bv)[i];
    return a.tape->record(std::move(out), {a, b}, [av, bv](const BasicTensor<T>& g, auto gi) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T inv = T{1} / (*bv)[i];
            if (gi[0]) (*gi[0])[i] += g[i] * inv;
            if (gi[1]) (*gi[1])[i] -= g[i] * (*av)[i] * inv * inv;
        }
    });
}

/// x + y where y's shape equals the trailing axes of x (bias, positional
/// embedding, per-frame broadcast).
template <class T>
Var<T> add_trailing(Var<T> x, Var<T> y) {
    const auto& xs = x.shape();
    const auto& ys = y.shape();
    if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin()))
        throw DimensionError("add_trailing: " + shape_string(ys) + " is not a suffix of " +
                             shape_string(xs));
    const auto& xv = x.value();
    const auto& yv = y.value();
    const std::size_t m = yv.size();
    BasicTensor<T> out(xs);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + yv[i % m];
    return x.tape->record(std::move(out), {x, y}, [m](const BasicTensor<T>& g, auto gi) {
        detail::add_into(gi[0], g);
        if (gi[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i % m] += g[i];
    });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
    const auto& xv = x.value();
    BasicTensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
    return x.tape->record(std::move(out), {x}, [c](const BasicTensor<T>& g, auto gi) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * c;
    });
}

template <class T>
Var<T> add_scalar(Var<T> x, T c) {
    const auto& xv = x.value();
    BasicTensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
    return x.tape->record(std::move(out), {x},
                          [](const BasicTensor<T>& g, auto gi) { detail::add_into(gi[0], g); });
}

template <class T>
Var<T> relu(Var<T> x) {
    const auto* xv = &x.value();
    BasicTensor<T> out(xv->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*xv)[i] > T{0} ? (*xv)[i] : T{0};
    return x.tape->record(std::move(out), {x}, [xv](const BasicTensor<T>& g, auto gi) {
        for (std::size_t i = 0; i < g.size(); ++i)
            if ((*xv)[i] > T{0}) (*gi[0])[i] += g[i];
    });
}

template <class T>
Var<T> abs(Var<T> x) {
    const auto* xv = &x.value();
    BasicTensor<T> out(xv->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs((*xv)[i]);
    return x.tape->record(std::move(out), {x}, [xv](const BasicTensor<T>& g, auto gi) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = (*xv)[i];
            (*gi[0])[i] += v > T{0} ? g[i] : (v < T{0} ? -g[i] : T{0});
        }
    });
}

template <class T>
Var<T> square(Var<T> x) {
    const auto* xv = &x.value();
    BasicTensor<T> out(xv->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*xv)[i] * (*xv)[i];
    return x.tape->record(std::move(out), {x}, [xv](const BasicTensor<T>& g, auto gi) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += T{2} * (*xv)[i] * g[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(Var<T> x) {
    const auto& xv = x.value();
    T s{0};
    for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
    return x.tape->record(BasicTensor<T>::scalar(s), {x}, [](const BasicTensor<T>& g, auto gi) {
        const T gv = g[0];
        for (auto& v : gi[0]->data()) v += gv;
    });
}

template <class T>
Var<T> mean(Var<T> x) {
    return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Mean squared difference of two same-shaped values.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
    return mean(square(sub(a, b)));
}

/// Sum over the last axis; output drops that axis.
template <class T>
Var<T> sum_lastdim(Var<T> x) {
    const auto& xs = x.shape();
    if (xs.empty()) throw DimensionError("sum_lastdim on rank-0 tensor");
    const std::size_t n = xs.back();
    Shape os(xs.begin(), xs.end() - 1);
    const auto& xv = x.value();
    BasicTensor<T> out(os);
    for (std::size_t r = 0; r < out.size(); ++r) {
        T s{0};
        for (std::size_t k = 0; k < n; ++k) s += xv[r * n + k];
        out[r] = s;
    }
    return x.tape->record(std::move(out), {x}, [n](const BasicTensor<T>& g, auto gi) {
        for (std::size_t r = 0; r < g.size(); ++r)
            for (std::size_t k = 0; k < n; ++k) (*gi[0])[r * n + k] += g[r];
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
    auto out = x.value().reshaped(std::move(shape));
    return x.tape->record(std::move(out), {x}, [](const BasicTensor<T>& g, auto gi) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
    });
}

/// Axis permutation: out.shape[i] = x.shape[axes[i]].
template <class T>
Var<T> permute(Var<T> x, std::vector<std::size_t> axes) {
    const auto& xs = x.shape();
    const std::size_t r = xs.size();
    if (axes.size() != r) throw DimensionError("permute: axis count mismatch");
    std::vector<bool> seen(r, false);
    for (auto a : axes) {
        if (a >= r || seen[a]) throw DimensionError("permute: invalid axis list");
        seen[a] = true;
    }
    Shape os(r);
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * xs[i];
    for (std::size_t i = 0; i < r; ++i) os[i] = xs[axes[i]];

    // map[i] = flat input offset of output element i
    const std::size_t total = shape_size(os);
    std::vector<std::size_t> map(total);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t i = 0; i < total; ++i) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < r; ++k) off += idx[k] * in_stride[axes[k]];
        map[i] = off;
        for (std::size_t k = r; k-- > 0;) {
            if (++idx[k] < os[k]) break;
            idx[k] = 0;
        }
    }
    const auto& xv = x.value();
    BasicTensor<T> out(os);
    for (std::size_t i = 0; i < total; ++i) out[i] = xv[map[i]];
    return x.tape->record(std::move(out), {x},
                          [map = std::move(map)](const BasicTensor<T>& g, auto gi) {
                              for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[map[i]] += g[i];
                          });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::ptrdiff_t axis_in) {
    if (xs.empty()) throw ContractError("concat of zero tensors");
    const auto& s0 = xs[0].shape();
    const std::size_t axis = detail::norm_axis(axis_in, s0.size());
    Shape os = s0;
    os[axis] = 0;
    std::vector<std::size_t> widths;
    for (const auto& v : xs) {
        const auto& s = v.shape();
        if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != s0[i])
                throw DimensionError("concat: extent mismatch " + shape_string(s) + " vs " +
                                     shape_string(s0));
        os[axis] += s[axis];
        widths.push_back(s[axis]);
    }
    const auto sp = detail::split_at(os, axis);
    BasicTensor<T> out(os);
    std::size_t base = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const auto& v = xs[k].value();
        const std::size_t w = widths[k] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(v.data().begin() + o * w, w,
                        out.data().begin() + o * sp.n * sp.inner + base);
        base += w;
    }
    return xs[0].tape->record(
        std::move(out), xs, [sp, widths](const BasicTensor<T>& g, auto gi) {
            std::size_t b = 0;
            for (std::size_t k = 0; k < widths.size(); ++k) {
                const std::size_t w = widths[k] * sp.inner;
                if (gi[k])
                    for (std::size_t o = 0; o < sp.outer; ++o)
                        for (std::size_t j = 0; j < w; ++j)
                            (*gi[k])[o * w + j] += g[o * sp.n * sp.inner + b + j];
                b += w;
            }
        });
}

/// Select `indices` along `axis` (repeats allowed); backward scatter-adds.
template <class T>
Var<T> gather(Var<T> x, std::ptrdiff_t axis_in, std::vector<std::size_t> indices) {
    const auto& xs = x.shape();
    const std::size_t axis = detail::norm_axis(axis_in, xs.size());
    const auto sp = detail::split_at(xs, axis);
    if (indices.empty()) throw DimensionError("gather: empty index list");
    for (auto i : indices)
        if (i >= sp.n) throw DimensionError("gather: index out of range");
    Shape os = xs;
    os[axis] = indices.size();
    const std::size_t m = indices.size();
    const auto& xv = x.value();
    BasicTensor<T> out(os);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < m; ++j)
            std::copy_n(xv.data().begin() + (o * sp.n + indices[j]) * sp.inner, sp.inner,
                        out.data().begin() + (o * m + j) * sp.inner);
    return x.tape->record(std::move(out), {x},
                          [sp, m, indices = std::move(indices)](const BasicTensor<T>& g, auto gi) {
                              for (std::size_t o = 0; o < sp.outer; ++o)
                                  for (std::size_t j = 0; j < m; ++j)
                                      for (std::size_t k = 0; k < sp.inner; ++k)
                                          (*gi[0])[(o * sp.n + indices[j]) * sp.inner + k] +=
                                              g[(o * m + j) * sp.inner + k];
                          });
}

/// out[i] = x.flat[index[i]], reshaped to `shape`. Backward scatter-adds, so
/// repeated indices are fine.
template <class T>
Var<T> take(Var<T> x, Shape shape, std::vector<std::size_t> index) {
    if (shape_size(shape) != index.size())
        throw DimensionError("take: index count does not match " + shape_string(shape));
    const auto& xv = x.value();
    for (auto i : index)
        if (i >= xv.size()) throw DimensionError("take: flat index out of range");
    BasicTensor<T> out(std::move(shape));
    for (std::size_t i = 0; i < index.size(); ++i) out[i] = xv[index[i]];
    return x.tape->record(std::move(out), {x},
                          [index = std::move(index)](const BasicTensor<T>& g, auto gi) {
                              for (std::size_t i = 0; i < index.size(); ++i) (*gi[0])[index[i]] += g[i];
                          });
}

template <class T>
Var<T> slice(Var<T> x, std::ptrdiff_t axis, std::size_t start, std::size_t length,
             std::size_t step = 1) {
    std::vector<std::size_t> idx(length);
    for (std::size_t i = 0; i < length; ++i) idx[i] = start + i * step;
    return gather(x, axis, std::move(idx));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product. `a` is [..., m, k]; `b` is [..., k, n] with equal
/// leading extents, or a plain [k, n] matrix shared by every batch.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2) throw DimensionError("matmul needs rank >= 2 operands");
    const std::size_t m = as[as.size() - 2], k = as.back();
    const std::size_t k2 = bs[bs.size() - 2], n = bs.back();
    if (k != k2)
        throw DimensionError("matmul inner extent mismatch " + shape_string(as) + " x " +
                             shape_string(bs));
    const bool shared_b = bs.size() == 2;
    if (!shared_b &&
        (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())))
        throw DimensionError("matmul batch extent mismatch " + shape_string(as) + " x " +
                             shape_string(bs));
    const std::size_t batch = shape_size(Shape(as.begin(), as.end() - 2));
    Shape os(as.begin(), as.end() - 2);
    os.push_back(m);
    os.push_back(n);
    const auto* av = &a.value();
    const auto* bv = &b.value();
    BasicTensor<T> out(os);
    using CM = detail::ConstMatMap<T>;
    using MM = detail::MatMap<T>;
    for (std::size_t i = 0; i < batch; ++i) {
        CM A(av->data().data() + i * m * k, m, k);
        CM B(bv->data().data() + (shared_b ? 0 : i * k * n), k, n);
        MM C(out.data().data() + i * m * n, m, n);
        C.noalias() = A * B;
    }
    return a.tape->record(
        std::move(out), {a, b}, [=](const BasicTensor<T>& g, auto gi) {
            for (std::size_t i = 0; i < batch; ++i) {
                CM G(g.data().data() + i * m * n, m, n);
                CM A(av->data().data() + i * m * k, m, k);
                CM B(bv->data().data() + (shared_b ? 0 : i * k * n), k, n);
                if (gi[0]) {
                    MM dA(gi[0]->data().data() + i * m * k, m, k);
                    dA.noalias() += G * B.transpose();
                }
                if (gi[1]) {
                    MM dB(gi[1]->data().data() + (shared_b ? 0 : i * k * n), k, n);
                    dB.noalias() += A.transpose() * G;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization and attention helpers

/// Softmax over the last axis with max subtraction.
template <class T>
Var<T> softmax_lastdim(Var<T> x) {
    const auto& xv = x.value();
    if (xv.rank() == 0) throw DimensionError("softmax on rank-0 tensor");
    const std::size_t n = xv.shape().back();
    const std::size_t rows = xv.size() / n;
    BasicTensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data().data() + r * n;
        T* o = out.data().data() + r * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t k = 0; k < n; ++k) {
            if (!std::isfinite(in[k])) throw NumericError("softmax: non-finite logit");
            mx = std::max(mx, in[k]);
        }
        T s{0};
        for (std::size_t k = 0; k < n; ++k) s += (o[k] = std::exp(in[k] - mx));
        for (std::size_t k = 0; k < n; ++k) o[k] /= s;
    }
    auto yv = std::make_shared<const BasicTensor<T>>(out);
    return x.tape->record(std::move(out), {x}, [yv, n](const BasicTensor<T>& g, auto gi) {
        const std::size_t rows = g.size() / n;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = yv->data().data() + r * n;
            const T* gr = g.data().data() + r * n;
            T dot{0};
            for (std::size_t k = 0; k < n; ++k) dot += gr[k] * y[k];
            T* d = gi[0]->data().data() + r * n;
            for (std::size_t k = 0; k < n; ++k) d[k] += y[k] * (gr[k] - dot);
        }
    });
}

namespace detail {

// Normalize groups of `count` values (strided by `stride`, starting at
// base offsets) and apply an affine per-group-channel scale/shift.
// Shared by layer and batch normalization.
template <class T>
struct NormCache {
    std::vector<T> xhat;
    std::vector<T> inv_std;
};

}  // namespace detail

/// Layer normalization over the last axis with affine `gamma`, `beta` ([d]).
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    const auto& xv = x.value();
    const std::size_t d = xv.shape().back();
    if (gamma.value().size() != d || beta.value().size() != d)
        throw DimensionError("layer_norm: affine extent mismatch");
    const std::size_t rows = xv.size() / d;
    const auto* gv = &gamma.value();
    const auto* bv = &beta.value();
    auto cache = std::make_shared<detail::NormCache<T>>();
    cache->xhat.resize(xv.size());
    cache->inv_std.resize(rows);
    BasicTensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data().data() + r * d;
        T mu{0};
        for (std::size_t k = 0; k < d; ++k) mu += in[k];
        mu /= static_cast<T>(d);
        T var{0};
        for (std::size_t k = 0; k < d; ++k) var += (in[k] - mu) * (in[k] - mu);
        var /= static_cast<T>(d);
        const T is = T{1} / std::sqrt(var + eps);
        cache->inv_std[r] = is;
        for (std::size_t k = 0; k < d; ++k) {
            const T xh = (in[k] - mu) * is;
            cache->xhat[r * d + k] = xh;
            out[r * d + k] = xh * (*gv)[k] + (*bv)[k];
        }
    }
    return x.tape->record(
        std::move(out), {x, gamma, beta},
        [cache, gv, rows, d](const BasicTensor<T>& g, auto gi) {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = g.data().data() + r * d;
                const T* xh = cache->xhat.data() + r * d;
                T m1{0}, m2{0};
                for (std::size_t k = 0; k < d; ++k) {
                    const T dxh = gr[k] * (*gv)[k];
                    m1 += dxh;
                    m2 += dxh * xh[k];
                    if (gi[1]) (*gi[1])[k] += gr[k] * xh[k];
                    if (gi[2]) (*gi[2])[k] += gr[k];
                }
                if (!gi[0]) continue;
                m1 /= static_cast<T>(d);
                m2 /= static_cast<T>(d);
                for (std::size_t k = 0; k < d; ++k)
                    (*gi[0])[r * d + k] +=
                        cache->inv_std[r] * (gr[k] * (*gv)[k] - m1 - xh[k] * m2);
            }
        });
}

/// Running statistics for batch normalization.
template <class T>
struct BatchNormStats {
    BasicTensor<T> mean;
    BasicTensor<T> var;
    T momentum = T(0.1);
};

/// Batch normalization over [C,H,W] or [N,C,H,W].
///
/// Training mode normalizes with per-batch statistics (biased variance) and
/// folds them into `stats` with its momentum. Inference mode uses `stats`.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>* stats, bool training,
                  T eps = T(1e-5)) {
    const auto& xs = x.shape();
    if (xs.size() != 3 && xs.size() != 4) throw DimensionError("batch_norm expects rank 3 or 4");
    const std::size_t N = xs.size() == 4 ? xs[0] : 1;
    const std::size_t C = xs[xs.size() - 3];
    const std::size_t HW = xs[xs.size() - 2] * xs.back();
    if (gamma.value().size() != C || beta.value().size() != C)
        throw DimensionError("batch_norm: affine extent mismatch");
    const auto& xv = x.value();
    const auto* gv = &gamma.value();
    const auto* bv = &beta.value();
    const std::size_t cnt = N * HW;
    auto cache = std::make_shared<detail::NormCache<T>>();
    cache->xhat.resize(xv.size());
    cache->inv_std.resize(C);
    BasicTensor<T> out(xs);
    for (std::size_t c = 0; c < C; ++c) {
        T mu, var;
        if (training || !stats) {
            mu = 0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t p = 0; p < HW; ++p) mu += xv[(n * C + c) * HW + p];
            mu /= static_cast<T>(cnt);
            var = 0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t p = 0; p < HW; ++p) {
                    const T dv = xv[(n * C + c) * HW + p] - mu;
                    var += dv * dv;
                }
            var /= static_cast<T>(cnt);
            if (stats && training) {
                stats->mean[c] = (T{1} - stats->momentum) * stats->mean[c] + stats->momentum * mu;
                stats->var[c] = (T{1} - stats->momentum) * stats->var[c] + stats->momentum * var;
            }
        } else {
            mu = stats->mean[c];
            var = stats->var[c];
        }
        const T is = T{1} / std::sqrt(var + eps);
        cache->inv_std[c] = is;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
                const std::size_t i = (n * C + c) * HW + p;
                cache->xhat[i] = (xv[i] - mu) * is;
                out[i] = cache->xhat[i] * (*gv)[c] + (*bv)[c];
            }
    }
    const bool batch_stats = training || !stats;
    return x.tape->record(
        std::move(out), {x, gamma, beta},
        [cache, gv, N, C, HW, cnt, batch_stats](const BasicTensor<T>& g, auto gi) {
            for (std::size_t c = 0; c < C; ++c) {
                T m1{0}, m2{0};
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t p = 0; p < HW; ++p) {
                        const std::size_t i = (n * C + c) * HW + p;
                        const T dxh = g[i] * (*gv)[c];
                        m1 += dxh;
                        m2 += dxh * cache->xhat[i];
                        if (gi[1]) (*gi[1])[c] += g[i] * cache->xhat[i];
                        if (gi[2]) (*gi[2])[c] += g[i];
                    }
                if (!gi[0]) continue;
                m1 /= static_cast<T>(cnt);
                m2 /= static_cast<T>(cnt);
                const T is = cache->inv_std[c];
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t p = 0; p < HW; ++p) {
                        const std::size_t i = (n * C + c) * HW + p;
                        const T dxh = g[i] * (*gv)[c];
                        (*gi[0])[i] += batch_stats ? is * (dxh - m1 - cache->xhat[i] * m2)
                                                   : is * dxh;
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

struct Conv2dOptions {
    std::array<std::size_t, 2> stride{1, 1};
    std::array<std::size_t, 2> padding{0, 0};
};

namespace detail {

struct ConvGeom {
    std::size_t N, Ci, H, W, Co, kh, kw, sh, sw, ph, pw, Ho, Wo;
    std::size_t K() const { return Ci * kh * kw; }
    std::size_t P() const { return Ho * Wo; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
    const std::size_t P = g.P();
    for (std::size_t ci = 0; ci < g.Ci; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.Ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.sh + ky) -
                                    static_cast<std::ptrdiff_t>(g.ph);
                    T* r = row + oy * g.Wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.H)) {
                        std::fill_n(r, g.Wo, T{0});
                        continue;
                    }
                    const T* src = x + (ci * g.H + static_cast<std::size_t>(iy)) * g.W;
                    for (std::size_t ox = 0; ox < g.Wo; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.sw + kx) -
                                        static_cast<std::ptrdiff_t>(g.pw);
                        r[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.W))
                                    ? T{0}
                                    : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
    const std::size_t P = g.P();
    for (std::size_t ci = 0; ci < g.Ci; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.Ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.sh + ky) -
                                    static_cast<std::ptrdiff_t>(g.ph);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.H)) continue;
                    T* dst = dx + (ci * g.H + static_cast<std::size_t>(iy)) * g.W;
                    const T* r = row + oy * g.Wo;
                    for (std::size_t ox = 0; ox < g.Wo; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.sw + kx) -
                                        static_cast<std::ptrdiff_t>(g.pw);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.W))
                            dst[static_cast<std::size_t>(ix)] += r[ox];
                    }
                }
            }
}

}  // namespace detail

/// 2D cross-correlation. `input` is [C,H,W] or [N,C,H,W]; `kernel` is
/// [Co,Ci,kh,kw]; optional `bias` is [Co].
template <class T>
Var<T> conv2d(Var<T> input, Var<T> kernel,
              std::optional<std::type_identity_t<Var<T>>> bias = std::nullopt,
              Conv2dOptions opt = {}) {
    const auto& xs = input.shape();
    const auto& ks = kernel.shape();
    if (xs.size() != 3 && xs.size() != 4) throw DimensionError("conv2d: input must be rank 3 or 4");
    if (ks.size() != 4) throw DimensionError("conv2d: kernel must be rank 4");
    detail::ConvGeom g{};
    g.N = xs.size() == 4 ? xs[0] : 1;
    g.Ci = xs[xs.size() - 3];
    g.H = xs[xs.size() - 2];
    g.W = xs.back();
    g.Co = ks[0];
    g.kh = ks[2];
    g.kw = ks[3];
    g.sh = opt.stride[0];
    g.sw = opt.stride[1];
    g.ph = opt.padding[0];
    g.pw = opt.padding[1];
    if (ks[1] != g.Ci)
        throw DimensionError("conv2d: input channels " + std::to_string(g.Ci) +
                             " do not match kernel " + shape_string(ks));
    if (g.sh == 0 || g.sw == 0) throw ContractError("conv2d: zero stride");
    if (g.kh > g.H + 2 * g.ph || g.kw > g.W + 2 * g.pw)
        throw DimensionError("conv2d: kernel larger than padded input");
    if (bias && bias->value().size() != g.Co) throw DimensionError("conv2d: bias extent mismatch");
    g.Ho = (g.H + 2 * g.ph - g.kh) / g.sh + 1;
    g.Wo = (g.W + 2 * g.pw - g.kw) / g.sw + 1;

    Shape os = xs.size() == 4 ? Shape{g.N, g.Co, g.Ho, g.Wo} : Shape{g.Co, g.Ho, g.Wo};
    const auto* xv = &input.value();
    const auto* kv = &kernel.value();
    BasicTensor<T> out(os);
    std::vector<T> cols(g.K() * g.P());
    using CM = detail::ConstMatMap<T>;
    using MM = detail::MatMap<T>;
    CM Kmat(kv->data().data(), g.Co, g.K());
    for (std::size_t n = 0; n < g.N; ++n) {
        detail::im2col(xv->data().data() + n * g.Ci * g.H * g.W, g, cols.data());
        MM O(out.data().data() + n * g.Co * g.P(), g.Co, g.P());
        O.noalias() = Kmat * CM(cols.data(), g.K(), g.P());
        if (bias) {
            const auto& bv = bias->value();
            for (std::size_t c = 0; c < g.Co; ++c) O.row(c).array() += bv[c];
        }
    }
    std::vector<Var<T>> ins{input, kernel};
    if (bias) ins.push_back(*bias);
    const bool has_bias = bias.has_value();
    return input.tape->record(
        std::move(out), ins, [g, xv, kv, has_bias](const BasicTensor<T>& grad, auto gi) {
            std::vector<T> cols(g.K() * g.P());
            std::vector<T> dcols(gi[0] ? g.K() * g.P() : 0);
            CM Kmat(kv->data().data(), g.Co, g.K());
            for (std::size_t n = 0; n < g.N; ++n) {
                CM G(grad.data().data() + n * g.Co * g.P(), g.Co, g.P());
                if (gi[1]) {
                    detail::im2col(xv->data().data() + n * g.Ci * g.H * g.W, g, cols.data());
                    MM dK(gi[1]->data().data(), g.Co, g.K());
                    dK.noalias() += G * CM(cols.data(), g.K(), g.P()).transpose();
                }
                if (gi[0]) {
                    MM(dcols.data(), g.K(), g.P()).noalias() = Kmat.transpose() * G;
                    detail::col2im(dcols.data(), g,
                                   gi[0]->data().data() + n * g.Ci * g.H * g.W);
                }
                if (has_bias && gi[2])
                    for (std::size_t c = 0; c < g.Co; ++c) (*gi[2])[c] += G.row(c).sum();
            }
        });
}

/// 1D convolution along the height axis: kernel [Co,Ci,kh,1], no padding.
/// With kh equal to the frame height every output column summarizes one
/// full input column.
template <class T>
Var<T> column_conv(Var<T> input, Var<T> kernel) {
    if (kernel.shape().size() != 4 || kernel.shape()[3] != 1)
        throw DimensionError("column_conv: kernel must be [Co,Ci,kh,1]");
    return conv2d(input, kernel);
}

/// 2x2 max pooling with stride 2 over the last two axes (floor extents).
template <class T>
Var<T> maxpool2(Var<T> x) {
    const auto& xs = x.shape();
    if (xs.size() < 2) throw DimensionError("maxpool2 needs rank >= 2");
    const std::size_t H = xs[xs.size() - 2], W = xs.back();
    const std::size_t Ho = H / 2, Wo = W / 2;
    if (Ho == 0 || Wo == 0) throw DimensionError("maxpool2: input smaller than 2x2");
    const std::size_t planes = x.value().size() / (H * W);
    Shape os = xs;
    os[os.size() - 2] = Ho;
    os.back() = Wo;
    const auto& xv = x.value();
    BasicTensor<T> out(os);
    std::vector<std::size_t> arg(out.size());
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                std::size_t best = p * H * W + (2 * oy) * W + 2 * ox;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t i = p * H * W + (2 * oy + dy) * W + 2 * ox + dx;
                        if (xv[i] > xv[best]) best = i;
                    }
                const std::size_t o = (p * Ho + oy) * Wo + ox;
                out[o] = xv[best];
                arg[o] = best;
            }
    return x.tape->record(std::move(out), {x},
                          [arg = std::move(arg)](const BasicTensor<T>& g, auto gi) {
                              for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[arg[i]] += g[i];
                          });
}

// ---------------------------------------------------------------------------
// Resampling

/// Linear interpolation along `axis` at continuous positions, clamped to
/// [0, n-1]. Output extent along the axis equals positions.size().
template <class T>
Var<T> resample_axis(Var<T> x, std::ptrdiff_t axis_in, const std::vector<double>& positions) {
    const auto& xs = x.shape();
    const std::size_t axis = detail::norm_axis(axis_in, xs.size());
    const auto sp = detail::split_at(xs, axis);
    const std::size_t m = positions.size();
    if (m == 0) throw DimensionError("resample_axis: no sample positions");
    struct Tap {
        std::size_t i0, i1;
        T w0, w1;
    };
    std::vector<Tap> taps(m);
    const double hi = static_cast<double>(sp.n - 1);
    for (std::size_t j = 0; j < m; ++j) {
        const double p = std::clamp(positions[j], 0.0, hi);
        const auto i0 = static_cast<std::size_t>(std::floor(p));
        const std::size_t i1 = std::min(i0 + 1, sp.n - 1);
        const double f = p - static_cast<double>(i0);
        taps[j] = {i0, i1, static_cast<T>(1.0 - f), static_cast<T>(f)};
    }
    Shape os = xs;
    os[axis] = m;
    const auto& xv = x.value();
    BasicTensor<T> out(os);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < m; ++j) {
            const T* a = xv.data().data() + (o * sp.n + taps[j].i0) * sp.inner;
            const T* b = xv.data().data() + (o * sp.n + taps[j].i1) * sp.inner;
            T* d = out.data().data() + (o * m + j) * sp.inner;
            for (std::size_t k = 0; k < sp.inner; ++k) d[k] = taps[j].w0 * a[k] + taps[j].w1 * b[k];
        }
    return x.tape->record(
        std::move(out), {x}, [sp, m, taps = std::move(taps)](const BasicTensor<T>& g, auto gi) {
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t j = 0; j < m; ++j) {
                    const T* gs = g.data().data() + (o * m + j) * sp.inner;
                    T* a = gi[0]->data().data() + (o * sp.n + taps[j].i0) * sp.inner;
                    T* b = gi[0]->data().data() + (o * sp.n + taps[j].i1) * sp.inner;
                    for (std::size_t k = 0; k < sp.inner; ++k) {
                        a[k] += taps[j].w0 * gs[k];
                        b[k] += taps[j].w1 * gs[k];
                    }
                }
        });
}

/// Pixel-center sample positions for resizing n samples to m samples.
inline std::vector<double> resize_positions(std::size_t n, std::size_t m) {
    std::vector<double> pos(m);
    const double s = static_cast<double>(n) / static_cast<double>(m);
    for (std::size_t j = 0; j < m; ++j) pos[j] = (static_cast<double>(j) + 0.5) * s - 0.5;
    return pos;
}

/// Bilinear resize of the last two axes (pixel-center convention, clamped).
template <class T>
Var<T> resize_bilinear(Var<T> x, std::size_t H, std::size_t W) {
    const auto& xs = x.shape();
    if (xs.size() < 2) throw DimensionError("resize_bilinear needs rank >= 2");
    if (xs.back() != W) x = resample_axis(x, -1, resize_positions(xs.back(), W));
    if (x.shape()[xs.size() - 2] != H)
        x = resample_axis(x, -2, resize_positions(x.shape()[xs.size() - 2], H));
    return x;
}

/// 3-tap mean along `axis` with replicated borders.
template <class T>
Var<T> box_mean3_axis(Var<T> x, std::ptrdiff_t axis_in) {
    const auto& xs = x.shape();
    const std::size_t axis = detail::norm_axis(axis_in, xs.size());
    const auto sp = detail::split_at(xs, axis);
    const auto& xv = x.value();
    const T third = T{1} / T{3};
    auto nb = [n = sp.n](std::size_t i, int d) -> std::size_t {
        if (d < 0) return i == 0 ? 0 : i - 1;
        return i + 1 >= n ? n - 1 : i + 1;
    };
    BasicTensor<T> out(xs);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.n; ++i)
            for (std::size_t k = 0; k < sp.inner; ++k) {
                auto at = [&](std::size_t j) { return xv[(o * sp.n + j) * sp.inner + k]; };
                out[(o * sp.n + i) * sp.inner + k] = (at(nb(i, -1)) + at(i) + at(nb(i, 1))) * third;
            }
    return x.tape->record(std::move(out), {x}, [sp, nb, third](const BasicTensor<T>& g, auto gi) {
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.n; ++i)
                for (std::size_t k = 0; k < sp.inner; ++k) {
                    const T gv = g[(o * sp.n + i) * sp.inner + k] * third;
                    (*gi[0])[(o * sp.n + nb(i, -1)) * sp.inner + k] += gv;
                    (*gi[0])[(o * sp.n + i) * sp.inner + k] += gv;
                    (*gi[0])[(o * sp.n + nb(i, 1)) * sp.inner + k] += gv;
                }
    });
}

/// 3x3 mean filter over the last two axes with replicated borders.
template <class T>
Var<T> box_mean3(Var<T> x) {
    return box_mean3_axis(box_mean3_axis(x, -1), -2);
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers

/// Bilinear sample of a [C,H,W] image at continuous (x, y); coordinates are
/// clamped to [0, W-1] x [0, H-1].
template <class T>
std::vector<T> bilinear_sample(const BasicTensor<T>& img, double x, double y) {
    if (img.rank() != 3) throw DimensionError("bilinear_sample expects [C,H,W]");
    const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    x = std::clamp(x, 0.0, static_cast<double>(W - 1));
    y = std::clamp(y, 0.0, static_cast<double>(H - 1));
    const auto x0 = static_cast<std::size_t>(std::floor(x));
    const auto y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    std::vector<T> out(C);
    for (std::size_t c = 0; c < C; ++c) {
        const double v00 = img.at(c, y0, x0), v01 = img.at(c, y0, x1);
        const double v10 = img.at(c, y1, x0), v11 = img.at(c, y1, x1);
        out[c] = static_cast<T>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                                fy * ((1 - fx) * v10 + fx * v11));
    }
    return out;
}

}  // namespace svr
