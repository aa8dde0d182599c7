#ifndef GCO_TENSOR_HPP
#define GCO_TENSOR_HPP

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "gco/common.hpp"

namespace gco {

// Dense row-major tensor. Rank is dynamic; everything in this project is
// rank 1..4. No views, no strides: ops copy, which is fine at desk scale.
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> v;

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)), v(count(shape), T(0)) {}
    TensorT(std::vector<int> s, T fill) : shape(std::move(s)), v(count(shape), fill) {}

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw ValidationError("tensor dimension must be non-negative");
            n *= d;
        }
        return n;
    }

    static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }
    static TensorT full(std::vector<int> s, T x) { return TensorT(std::move(s), x); }

    static TensorT randn(std::vector<int> s, Rng& rng, T scale = T(1)) {
        TensorT t(std::move(s));
        for (auto& x : t.v) x = static_cast<T>(rng.normal()) * scale;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    bool same_shape(const TensorT& o) const { return shape == o.shape; }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    // (c,h,w) accessor
    T& at(int c, int y, int x) {
        return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    T at(int c, int y, int x) const {
        return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    // (r,c) accessor
    T& at(int r, int c) { return v[static_cast<size_t>(r) * shape[1] + c]; }
    T at(int r, int c) const { return v[static_cast<size_t>(r) * shape[1] + c]; }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < shape.size(); i++) os << (i ? "," : "") << shape[i];
        os << ")";
        return os.str();
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> o;
        o.shape = shape;
        o.v.resize(v.size());
        for (size_t i = 0; i < v.size(); i++) o.v[i] = static_cast<U>(v[i]);
        return o;
    }
};

using Tensor  = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
inline double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ValidationError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); i++)
        m = std::max(m, std::abs(static_cast<double>(a.v[i]) - static_cast<double>(b.v[i])));
    return m;
}

template <typename T>
inline double mean_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ValidationError("mean_abs_diff: shape mismatch");
    if (a.numel() == 0) return 0.0;
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); i++)
        s += std::abs(static_cast<double>(a.v[i]) - static_cast<double>(b.v[i]));
    return s / static_cast<double>(a.numel());
}

template <typename T>
inline double l2_norm(const TensorT<T>& a) {
    double s = 0.0;
    for (T x : a.v) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
}

} // namespace gco

#endif
