#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "latentlab/errors.hpp"

namespace latentlab {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) {
        if (e < 1) throw DimensionError("shape extent < 1 in " + shape_str(s));
        n *= e;
    }
    return n;
}

// Dense row-major tensor. Plain value type; all structure (gradients,
// graph membership) lives in the tape, not here.
template <class Real>
struct Tensor {
    Shape shape;
    std::vector<Real> data;

    Tensor() : shape{1}, data{Real(0)} {}
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), Real(0)) {}
    Tensor(Shape s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, Real v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }
    static Tensor scalar(Real v) { return Tensor({1}, {v}); }
    static Tensor ones(Shape s) { return full(std::move(s), Real(1)); }

    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    Real* ptr() { return data.data(); }
    const Real* ptr() const { return data.data(); }

    Real& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
    const Real& operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 2-D accessor (row, col).
    Real& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    const Real& at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    // 4-D accessor (n, c, y, x).
    Real& at(int n, int c, int y, int x) {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    const Real& at(int n, int c, int y, int x) const {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }

    bool all_finite() const {
        for (const Real& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <class R2>
    Tensor<R2> cast() const {
        Tensor<R2> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<R2>(data[i]);
        return out;
    }
};

template <class Real>
inline bool same_shape(const Tensor<Real>& a, const Tensor<Real>& b) {
    return a.shape == b.shape;
}

}  // namespace latentlab
