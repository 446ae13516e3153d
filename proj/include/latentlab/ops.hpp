#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "latentlab/blas.hpp"
#include "latentlab/tape.hpp"
#include "latentlab/tensor.hpp"

// Differentiable primitives. Every op's backward rule emits tape ops again,
// so the whole set is closed under differentiation; convolution closes
// through the {conv2d, conv2d_igrad, conv2d_wgrad} triad.

namespace latentlab {

// ---------------------------------------------------------------- helpers

namespace detail {

template <class Real>
void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    if (!same_shape(a, b))
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

template <class Real>
void check_rank(const Tensor<Real>& a, int rank, const char* op) {
    if (a.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape));
}

template <class Real, class F>
Tensor<Real> map1(const Tensor<Real>& a, F f) {
    Tensor<Real> out(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
    return out;
}

template <class Real, class F>
Tensor<Real> map2(const Tensor<Real>& a, const Tensor<Real>& b, F f) {
    Tensor<Real> out(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

}  // namespace detail

template <class Real> Var<Real> add(Var<Real> a, Var<Real> b);
template <class Real> Var<Real> mul(Var<Real> a, Var<Real> b);
template <class Real> Var<Real> scale(Var<Real> a, double c);
template <class Real> Var<Real> matmul(Var<Real> a, Var<Real> b);
template <class Real> Var<Real> transpose(Var<Real> a);
template <class Real> Var<Real> recip(Var<Real> a);
template <class Real> Var<Real> row_sum(Var<Real> a);
template <class Real> Var<Real> col_sum(Var<Real> a);
template <class Real> Var<Real> broadcast_col(Var<Real> a, int n);
template <class Real> Var<Real> broadcast_row(Var<Real> a, int m);
template <class Real> Var<Real> slice_rows(Var<Real> a, int r0, int r1);
template <class Real> Var<Real> slice_cols(Var<Real> a, int c0, int c1);
template <class Real> Var<Real> embed_rows(Var<Real> a, int m, int r0);
template <class Real> Var<Real> embed_cols(Var<Real> a, int n, int c0);
template <class Real> Var<Real> sum_all(Var<Real> a);
template <class Real> Var<Real> broadcast_all(Var<Real> s, Shape shape);
template <class Real> Var<Real> conv2d(Var<Real> x, Var<Real> w, int stride, int pad);
template <class Real> Var<Real> conv2d_igrad(Var<Real> g, Var<Real> w, int stride, int pad, int h, int w_in);
template <class Real> Var<Real> conv2d_wgrad(Var<Real> x, Var<Real> g, int stride, int pad, int kh, int kw);
template <class Real> Var<Real> upsample2x(Var<Real> x);
template <class Real> Var<Real> downsample2x_sum(Var<Real> x);
template <class Real> Var<Real> chan_broadcast(Var<Real> b, int n, int h, int w);
template <class Real> Var<Real> reduce_bhw(Var<Real> x);
template <class Real> Var<Real> plane_broadcast(Var<Real> x, int c);
template <class Real> Var<Real> plane_reduce(Var<Real> x);
template <class Real> Var<Real> scale_channels(Var<Real> x, Var<Real> s);
template <class Real> Var<Real> channel_dot(Var<Real> x, Var<Real> y);

// ------------------------------------------------------------ elementwise

template <class Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
    detail::check_same_shape(a.val(), b.val(), "add");
    Tensor<Real> out = detail::map2(a.val(), b.val(), [](Real x, Real y) { return x + y; });
    int id = a.tape->apply("add", std::move(out), {a.id, b.id}, [](Tape<Real>&, int g, int) {
        return std::vector<int>{g, g};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
    detail::check_same_shape(a.val(), b.val(), "sub");
    Tensor<Real> out = detail::map2(a.val(), b.val(), [](Real x, Real y) { return x - y; });
    int id = a.tape->apply("sub", std::move(out), {a.id, b.id}, [](Tape<Real>& t, int g, int) {
        Var<Real> gv(t, g);
        return std::vector<int>{g, scale(gv, -1.0).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
    detail::check_same_shape(a.val(), b.val(), "mul");
    Tensor<Real> out = detail::map2(a.val(), b.val(), [](Real x, Real y) { return x * y; });
    int aid = a.id, bid = b.id;
    int id = a.tape->apply("mul", std::move(out), {aid, bid}, [aid, bid](Tape<Real>& t, int g, int) {
        Var<Real> gv(t, g);
        return std::vector<int>{mul(gv, Var<Real>(t, bid)).id, mul(gv, Var<Real>(t, aid)).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> scale(Var<Real> a, double c) {
    Tensor<Real> out = detail::map1(a.val(), [c](Real x) { return static_cast<Real>(x * c); });
    int id = a.tape->apply("scale", std::move(out), {a.id}, [c](Tape<Real>& t, int g, int) {
        return std::vector<int>{scale(Var<Real>(t, g), c).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> neg(Var<Real> a) {
    return scale(a, -1.0);
}

template <class Real>
Var<Real> add_const(Var<Real> a, double c) {
    Tensor<Real> out = detail::map1(a.val(), [c](Real x) { return static_cast<Real>(x + c); });
    int id = a.tape->apply("add_const", std::move(out), {a.id}, [](Tape<Real>&, int g, int) {
        return std::vector<int>{g};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> exp(Var<Real> a) {
    Tensor<Real> out = detail::map1(a.val(), [](Real x) { return static_cast<Real>(std::exp(static_cast<double>(x))); });
    int id = a.tape->apply("exp", std::move(out), {a.id}, [](Tape<Real>& t, int g, int self) {
        return std::vector<int>{mul(Var<Real>(t, g), Var<Real>(t, self)).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> sqrt(Var<Real> a) {
    Tensor<Real> out = detail::map1(a.val(), [](Real x) { return static_cast<Real>(std::sqrt(static_cast<double>(x))); });
    int id = a.tape->apply("sqrt", std::move(out), {a.id}, [](Tape<Real>& t, int g, int self) {
        // d sqrt = g / (2 sqrt(x)), reusing the forward output
        Var<Real> r = recip(Var<Real>(t, self));
        return std::vector<int>{scale(mul(Var<Real>(t, g), r), 0.5).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> recip(Var<Real> a) {
    Tensor<Real> out = detail::map1(a.val(), [](Real x) { return static_cast<Real>(1.0 / static_cast<double>(x)); });
    int id = a.tape->apply("recip", std::move(out), {a.id}, [](Tape<Real>& t, int g, int self) {
        Var<Real> y(t, self);
        return std::vector<int>{neg(mul(Var<Real>(t, g), mul(y, y))).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> square(Var<Real> a) {
    return mul(a, a);
}

template <class Real>
Var<Real> abs(Var<Real> a) {
    Tensor<Real> out = detail::map1(a.val(), [](Real x) { return static_cast<Real>(std::fabs(static_cast<double>(x))); });
    Tensor<Real> sign = detail::map1(a.val(), [](Real x) { return x > Real(0) ? Real(1) : (x < Real(0) ? Real(-1) : Real(0)); });
    int id = a.tape->apply("abs", std::move(out), {a.id}, [sg = a.tape->constant(std::move(sign))](Tape<Real>& t, int g, int) {
        return std::vector<int>{mul(Var<Real>(t, g), Var<Real>(t, sg)).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> leaky_relu(Var<Real> a, double slope = 0.2) {
    Tensor<Real> out = detail::map1(a.val(), [slope](Real x) { return x >= Real(0) ? x : static_cast<Real>(x * slope); });
    Tensor<Real> mask = detail::map1(a.val(), [slope](Real x) { return x >= Real(0) ? Real(1) : static_cast<Real>(slope); });
    int id = a.tape->apply("leaky_relu", std::move(out), {a.id},
                           [mk = a.tape->constant(std::move(mask))](Tape<Real>& t, int g, int) {
                               return std::vector<int>{mul(Var<Real>(t, g), Var<Real>(t, mk)).id};
                           });
    return {*a.tape, id};
}

template <class Real>
Var<Real> softplus(Var<Real> a) {
    Tensor<Real> out = detail::map1(a.val(), [](Real x) {
        const double v = static_cast<double>(x);
        return static_cast<Real>(v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)));
    });
    Tensor<Real> sig = detail::map1(a.val(), [](Real x) {
        const double v = static_cast<double>(x);
        return static_cast<Real>(v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
    });
    int id = a.tape->apply("softplus", std::move(out), {a.id},
                           [sg = a.tape->constant(std::move(sig))](Tape<Real>& t, int g, int) {
                               return std::vector<int>{mul(Var<Real>(t, g), Var<Real>(t, sg)).id};
                           });
    return {*a.tape, id};
}

// ------------------------------------------------------------- 2-D algebra

template <class Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
    detail::check_rank(a.val(), 2, "matmul");
    detail::check_rank(b.val(), 2, "matmul");
    const int m = a.val().dim(0), p = a.val().dim(1);
    const int p2 = b.val().dim(0), n = b.val().dim(1);
    if (p != p2)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.val().shape) + " vs " + shape_str(b.val().shape));
    Tensor<Real> out({m, n});
    detail::gemm(false, false, m, n, p, Real(1), a.val().ptr(), p, b.val().ptr(), n, Real(0), out.ptr(), n);
    int aid = a.id, bid = b.id;
    int id = a.tape->apply("matmul", std::move(out), {aid, bid}, [aid, bid](Tape<Real>& t, int g, int) {
        Var<Real> gv(t, g), av(t, aid), bv(t, bid);
        return std::vector<int>{matmul(gv, transpose(bv)).id, matmul(transpose(av), gv).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> transpose(Var<Real> a) {
    detail::check_rank(a.val(), 2, "transpose");
    const int m = a.val().dim(0), n = a.val().dim(1);
    Tensor<Real> out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = a.val().at(i, j);
    int id = a.tape->apply("transpose", std::move(out), {a.id}, [](Tape<Real>& t, int g, int) {
        return std::vector<int>{transpose(Var<Real>(t, g)).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> row_sum(Var<Real> a) {
    detail::check_rank(a.val(), 2, "row_sum");
    const int m = a.val().dim(0), n = a.val().dim(1);
    Tensor<Real> out({m, 1});
    for (int i = 0; i < m; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j) s += static_cast<double>(a.val().at(i, j));
        out.at(i, 0) = static_cast<Real>(s);
    }
    int id = a.tape->apply("row_sum", std::move(out), {a.id}, [n](Tape<Real>& t, int g, int) {
        return std::vector<int>{broadcast_col(Var<Real>(t, g), n).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> col_sum(Var<Real> a) {
    detail::check_rank(a.val(), 2, "col_sum");
    const int m = a.val().dim(0), n = a.val().dim(1);
    Tensor<Real> out({1, n});
    for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int i = 0; i < m; ++i) s += static_cast<double>(a.val().at(i, j));
        out.at(0, j) = static_cast<Real>(s);
    }
    int id = a.tape->apply("col_sum", std::move(out), {a.id}, [m](Tape<Real>& t, int g, int) {
        return std::vector<int>{broadcast_row(Var<Real>(t, g), m).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> broadcast_col(Var<Real> a, int n) {
    detail::check_rank(a.val(), 2, "broadcast_col");
    if (a.val().dim(1) != 1) throw DimensionError("broadcast_col: expected [m,1], got " + shape_str(a.val().shape));
    const int m = a.val().dim(0);
    Tensor<Real> out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) = a.val().at(i, 0);
    int id = a.tape->apply("broadcast_col", std::move(out), {a.id}, [](Tape<Real>& t, int g, int) {
        return std::vector<int>{row_sum(Var<Real>(t, g)).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> broadcast_row(Var<Real> a, int m) {
    detail::check_rank(a.val(), 2, "broadcast_row");
    if (a.val().dim(0) != 1) throw DimensionError("broadcast_row: expected [1,n], got " + shape_str(a.val().shape));
    const int n = a.val().dim(1);
    Tensor<Real> out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) = a.val().at(0, j);
    int id = a.tape->apply("broadcast_row", std::move(out), {a.id}, [](Tape<Real>& t, int g, int) {
        return std::vector<int>{col_sum(Var<Real>(t, g)).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> slice_rows(Var<Real> a, int r0, int r1) {
    detail::check_rank(a.val(), 2, "slice_rows");
    const int m = a.val().dim(0), n = a.val().dim(1);
    if (r0 < 0 || r1 > m || r0 >= r1) throw DimensionError("slice_rows: bad range");
    Tensor<Real> out({r1 - r0, n});
    std::copy(a.val().ptr() + static_cast<size_t>(r0) * n, a.val().ptr() + static_cast<size_t>(r1) * n, out.ptr());
    int id = a.tape->apply("slice_rows", std::move(out), {a.id}, [m, r0](Tape<Real>& t, int g, int) {
        return std::vector<int>{embed_rows(Var<Real>(t, g), m, r0).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> embed_rows(Var<Real> a, int m, int r0) {
    detail::check_rank(a.val(), 2, "embed_rows");
    const int r = a.val().dim(0), n = a.val().dim(1);
    if (r0 < 0 || r0 + r > m) throw DimensionError("embed_rows: bad placement");
    Tensor<Real> out({m, n});
    std::copy(a.val().ptr(), a.val().ptr() + a.val().numel(), out.ptr() + static_cast<size_t>(r0) * n);
    int id = a.tape->apply("embed_rows", std::move(out), {a.id}, [r0, r](Tape<Real>& t, int g, int) {
        return std::vector<int>{slice_rows(Var<Real>(t, g), r0, r0 + r).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> slice_cols(Var<Real> a, int c0, int c1) {
    detail::check_rank(a.val(), 2, "slice_cols");
    const int m = a.val().dim(0), n = a.val().dim(1);
    if (c0 < 0 || c1 > n || c0 >= c1) throw DimensionError("slice_cols: bad range");
    Tensor<Real> out({m, c1 - c0});
    for (int i = 0; i < m; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = a.val().at(i, j);
    int id = a.tape->apply("slice_cols", std::move(out), {a.id}, [n, c0](Tape<Real>& t, int g, int) {
        return std::vector<int>{embed_cols(Var<Real>(t, g), n, c0).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> embed_cols(Var<Real> a, int n, int c0) {
    detail::check_rank(a.val(), 2, "embed_cols");
    const int m = a.val().dim(0), c = a.val().dim(1);
    if (c0 < 0 || c0 + c > n) throw DimensionError("embed_cols: bad placement");
    Tensor<Real> out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) out.at(i, c0 + j) = a.val().at(i, j);
    int id = a.tape->apply("embed_cols", std::move(out), {a.id}, [c0, c](Tape<Real>& t, int g, int) {
        return std::vector<int>{slice_cols(Var<Real>(t, g), c0, c0 + c).id};
    });
    return {*a.tape, id};
}

// Stack 2-D blocks with equal column counts on top of each other.
template <class Real>
Var<Real> vstack(const std::vector<Var<Real>>& parts) {
    if (parts.empty()) throw ContractError("vstack: no inputs");
    Tape<Real>& t = *parts[0].tape;
    const int n = parts[0].val().dim(1);
    int m = 0;
    std::vector<int> ids, offsets, heights;
    for (const auto& p : parts) {
        detail::check_rank(p.val(), 2, "vstack");
        if (p.val().dim(1) != n) throw DimensionError("vstack: column count mismatch");
        ids.push_back(p.id);
        offsets.push_back(m);
        heights.push_back(p.val().dim(0));
        m += p.val().dim(0);
    }
    Tensor<Real> out({m, n});
    for (size_t i = 0; i < ids.size(); ++i) {
        const Tensor<Real>& src = t.val(ids[i]);
        std::copy(src.ptr(), src.ptr() + src.numel(), out.ptr() + static_cast<size_t>(offsets[i]) * n);
    }
    int id = t.apply("vstack", std::move(out), ids, [offsets, heights](Tape<Real>& tp, int g, int) {
        std::vector<int> grads;
        for (size_t i = 0; i < offsets.size(); ++i)
            grads.push_back(slice_rows(Var<Real>(tp, g), offsets[i], offsets[i] + heights[i]).id);
        return grads;
    });
    return {t, id};
}

template <class Real>
Var<Real> concat_cols(Var<Real> a, Var<Real> b) {
    detail::check_rank(a.val(), 2, "concat_cols");
    detail::check_rank(b.val(), 2, "concat_cols");
    const int m = a.val().dim(0), ca = a.val().dim(1), cb = b.val().dim(1);
    if (b.val().dim(0) != m) throw DimensionError("concat_cols: row count mismatch");
    Tensor<Real> out({m, ca + cb});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < ca; ++j) out.at(i, j) = a.val().at(i, j);
        for (int j = 0; j < cb; ++j) out.at(i, ca + j) = b.val().at(i, j);
    }
    int id = a.tape->apply("concat_cols", std::move(out), {a.id, b.id}, [ca, cb](Tape<Real>& t, int g, int) {
        Var<Real> gv(t, g);
        return std::vector<int>{slice_cols(gv, 0, ca).id, slice_cols(gv, ca, ca + cb).id};
    });
    return {*a.tape, id};
}

// ------------------------------------------------------- shape & reduction

template <class Real>
Var<Real> reshape(Var<Real> a, Shape shape) {
    if (shape_numel(shape) != a.val().numel())
        throw DimensionError("reshape: element count mismatch " + shape_str(a.val().shape) + " -> " + shape_str(shape));
    Tensor<Real> out(shape, a.val().data);
    Shape prev = a.val().shape;
    int id = a.tape->apply("reshape", std::move(out), {a.id}, [prev](Tape<Real>& t, int g, int) {
        return std::vector<int>{reshape(Var<Real>(t, g), prev).id};
    });
    return {*a.tape, id};
}

template <class Real>
Var<Real> sum_all(Var<Real> a) {
    double s = 0;
    for (std::int64_t i = 0; i < a.val().numel(); ++i) s += static_cast<double>(a.val()[i]);
    Shape shape = a.val().shape;
    int id = a.tape->apply("sum_all", Tensor<Real>::scalar(static_cast<Real>(s)), {a.id},
                           [shape](Tape<Real>& t, int g, int) {
                               return std::vector<int>{broadcast_all(Var<Real>(t, g), shape).id};
                           });
    return {*a.tape, id};
}

template <class Real>
Var<Real> broadcast_all(Var<Real> s, Shape shape) {
    if (s.val().numel() != 1) throw DimensionError("broadcast_all: source must be scalar");
    Tensor<Real> out = Tensor<Real>::full(shape, s.val()[0]);
    int id = s.tape->apply("broadcast_all", std::move(out), {s.id}, [](Tape<Real>& t, int g, int) {
        return std::vector<int>{sum_all(Var<Real>(t, g)).id};
    });
    return {*s.tape, id};
}

template <class Real>
Var<Real> mean_all(Var<Real> a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.val().numel()));
}

template <class Real>
Var<Real> dot(Var<Real> a, Var<Real> b) {
    return sum_all(mul(a, b));
}

// --------------------------------------------------------------- softmax

// Row-wise softmax; the per-row max is subtracted as a constant shift, which
// leaves both the value and the exact gradient unchanged.
template <class Real>
Var<Real> softmax_rows(Var<Real> x) {
    detail::check_rank(x.val(), 2, "softmax_rows");
    const int m = x.val().dim(0), n = x.val().dim(1);
    Tensor<Real> rmax({m, 1});
    for (int i = 0; i < m; ++i) {
        Real mx = x.val().at(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, x.val().at(i, j));
        rmax.at(i, 0) = mx;
    }
    Var<Real> shift = broadcast_col(make_const(*x.tape, std::move(rmax)), n);
    Var<Real> e = exp(sub(x, shift));
    return mul(e, broadcast_col(recip(row_sum(e)), n));
}

// Row-wise layer norm with learnable gain/bias of shape [1, n].
template <class Real>
Var<Real> layer_norm_rows(Var<Real> x, Var<Real> gain, Var<Real> bias, double eps = 1e-5) {
    detail::check_rank(x.val(), 2, "layer_norm_rows");
    const int m = x.val().dim(0), n = x.val().dim(1);
    if (gain.val().shape != Shape{1, n} || bias.val().shape != Shape{1, n})
        throw DimensionError("layer_norm_rows: gain/bias must be [1," + std::to_string(n) + "]");
    Var<Real> mean = scale(row_sum(x), 1.0 / n);
    Var<Real> centered = sub(x, broadcast_col(mean, n));
    Var<Real> var = scale(row_sum(mul(centered, centered)), 1.0 / n);
    Var<Real> inv_std = recip(sqrt(add_const(var, eps)));
    Var<Real> normed = mul(centered, broadcast_col(inv_std, n));
    return add(mul(normed, broadcast_row(gain, m)), broadcast_row(bias, m));
}

// ------------------------------------------------------------ convolution

namespace detail {

template <class Real>
std::vector<Real>& conv_scratch(int which) {
    thread_local std::vector<Real> bufs[2];
    return bufs[which];
}

template <class Real>
void im2col(const Real* x, int c_in, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo, Real* col) {
    for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                Real* dst = col + ((static_cast<size_t>(c) * kh + ky) * kw + kx) * (static_cast<size_t>(ho) * wo);
                for (int y = 0; y < ho; ++y) {
                    const int iy = y * stride + ky - pad;
                    Real* drow = dst + static_cast<size_t>(y) * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(drow, drow + wo, Real(0));
                        continue;
                    }
                    const Real* srow = x + (static_cast<size_t>(c) * h + iy) * w;
                    for (int xo = 0; xo < wo; ++xo) {
                        const int ix = xo * stride + kx - pad;
                        drow[xo] = (ix >= 0 && ix < w) ? srow[ix] : Real(0);
                    }
                }
            }
        }
    }
}

template <class Real>
void col2im_add(const Real* col, int c_in, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo, Real* x) {
    for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const Real* src = col + ((static_cast<size_t>(c) * kh + ky) * kw + kx) * (static_cast<size_t>(ho) * wo);
                for (int y = 0; y < ho; ++y) {
                    const int iy = y * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    Real* xrow = x + (static_cast<size_t>(c) * h + iy) * w;
                    const Real* srow = src + static_cast<size_t>(y) * wo;
                    for (int xo = 0; xo < wo; ++xo) {
                        const int ix = xo * stride + kx - pad;
                        if (ix >= 0 && ix < w) xrow[ix] += srow[xo];
                    }
                }
            }
        }
    }
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
    const int num = in + 2 * pad - k;
    if (num < 0) throw DimensionError("conv2d: kernel larger than padded input");
    return num / stride + 1;
}

// out[b,o,y,x] = sum_{i,ky,kx} w[o,i,ky,kx] * x[b,i,y*s+ky-p,x*s+kx-p]
template <class Real>
Tensor<Real> conv_forward(const Tensor<Real>& x, const Tensor<Real>& w, int stride, int pad) {
    const int b = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != ci)
        throw DimensionError("conv2d: channel mismatch, input " + shape_str(x.shape) + " weight " + shape_str(w.shape));
    const int ho = conv_out_extent(h, kh, stride, pad);
    const int wo = conv_out_extent(wd, kw, stride, pad);
    const int k = ci * kh * kw, n = ho * wo;
    Tensor<Real> out({b, co, ho, wo});
    std::vector<Real>& col = conv_scratch<Real>(0);
    col.resize(static_cast<size_t>(k) * n);
    for (int bi = 0; bi < b; ++bi) {
        im2col(x.ptr() + static_cast<size_t>(bi) * ci * h * wd, ci, h, wd, kh, kw, stride, pad, ho, wo, col.data());
        gemm(false, false, co, n, k, Real(1), w.ptr(), k, col.data(), n, Real(0),
             out.ptr() + static_cast<size_t>(bi) * co * n, n);
    }
    return out;
}

// Adjoint of conv_forward in its input argument.
template <class Real>
Tensor<Real> conv_igrad(const Tensor<Real>& g, const Tensor<Real>& w, int stride, int pad, int h, int wd) {
    const int b = g.dim(0), co = g.dim(1), ho = g.dim(2), wo = g.dim(3);
    const int ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(0) != co) throw DimensionError("conv2d_igrad: channel mismatch");
    if (conv_out_extent(h, kh, stride, pad) != ho || conv_out_extent(wd, kw, stride, pad) != wo)
        throw DimensionError("conv2d_igrad: output extents inconsistent with input extents");
    const int k = ci * kh * kw, n = ho * wo;
    Tensor<Real> gx({b, ci, h, wd});
    std::vector<Real>& col = conv_scratch<Real>(0);
    col.resize(static_cast<size_t>(k) * n);
    for (int bi = 0; bi < b; ++bi) {
        gemm(true, false, k, n, co, Real(1), w.ptr(), k, g.ptr() + static_cast<size_t>(bi) * co * n, n, Real(0),
             col.data(), n);
        col2im_add(col.data(), ci, h, wd, kh, kw, stride, pad, ho, wo, gx.ptr() + static_cast<size_t>(bi) * ci * h * wd);
    }
    return gx;
}

// Adjoint of conv_forward in its weight argument; batch accumulated in fixed order.
template <class Real>
Tensor<Real> conv_wgrad(const Tensor<Real>& x, const Tensor<Real>& g, int stride, int pad, int kh, int kw) {
    const int b = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int co = g.dim(1), ho = g.dim(2), wo = g.dim(3);
    if (g.dim(0) != b) throw DimensionError("conv2d_wgrad: batch mismatch");
    if (conv_out_extent(h, kh, stride, pad) != ho || conv_out_extent(wd, kw, stride, pad) != wo)
        throw DimensionError("conv2d_wgrad: output extents inconsistent with input extents");
    const int k = ci * kh * kw, n = ho * wo;
    Tensor<Real> gw({co, ci, kh, kw});
    std::vector<Real>& col = conv_scratch<Real>(0);
    col.resize(static_cast<size_t>(k) * n);
    for (int bi = 0; bi < b; ++bi) {
        im2col(x.ptr() + static_cast<size_t>(bi) * ci * h * wd, ci, h, wd, kh, kw, stride, pad, ho, wo, col.data());
        gemm(false, true, co, k, n, Real(1), g.ptr() + static_cast<size_t>(bi) * co * n, n, col.data(), n,
             bi == 0 ? Real(0) : Real(1), gw.ptr(), k);
    }
    return gw;
}

}  // namespace detail

template <class Real>
Var<Real> conv2d(Var<Real> x, Var<Real> w, int stride, int pad) {
    detail::check_rank(x.val(), 4, "conv2d");
    detail::check_rank(w.val(), 4, "conv2d");
    Tensor<Real> out = detail::conv_forward(x.val(), w.val(), stride, pad);
    const int h = x.val().dim(2), wd = x.val().dim(3);
    const int kh = w.val().dim(2), kw = w.val().dim(3);
    int xid = x.id, wid = w.id;
    int id = x.tape->apply("conv2d", std::move(out), {xid, wid},
                           [xid, wid, stride, pad, h, wd, kh, kw](Tape<Real>& t, int g, int) {
                               Var<Real> gv(t, g), xv(t, xid), wv(t, wid);
                               return std::vector<int>{conv2d_igrad(gv, wv, stride, pad, h, wd).id,
                                                       conv2d_wgrad(xv, gv, stride, pad, kh, kw).id};
                           });
    return {*x.tape, id};
}

template <class Real>
Var<Real> conv2d_igrad(Var<Real> g, Var<Real> w, int stride, int pad, int h, int w_in) {
    detail::check_rank(g.val(), 4, "conv2d_igrad");
    detail::check_rank(w.val(), 4, "conv2d_igrad");
    Tensor<Real> out = detail::conv_igrad(g.val(), w.val(), stride, pad, h, w_in);
    int gid = g.id, wid = w.id;
    const int kh = w.val().dim(2), kw = w.val().dim(3);
    int id = g.tape->apply("conv2d_igrad", std::move(out), {gid, wid},
                           [gid, wid, stride, pad, kh, kw](Tape<Real>& t, int u, int) {
                               Var<Real> uv(t, u), gv(t, gid), wv(t, wid);
                               return std::vector<int>{conv2d(uv, wv, stride, pad).id,
                                                       conv2d_wgrad(uv, gv, stride, pad, kh, kw).id};
                           });
    return {*g.tape, id};
}

template <class Real>
Var<Real> conv2d_wgrad(Var<Real> x, Var<Real> g, int stride, int pad, int kh, int kw) {
    detail::check_rank(x.val(), 4, "conv2d_wgrad");
    detail::check_rank(g.val(), 4, "conv2d_wgrad");
    Tensor<Real> out = detail::conv_wgrad(x.val(), g.val(), stride, pad, kh, kw);
    int xid = x.id, gid = g.id;
    const int h = x.val().dim(2), wd = x.val().dim(3);
    int id = x.tape->apply("conv2d_wgrad", std::move(out), {xid, gid},
                           [xid, gid, stride, pad, h, wd](Tape<Real>& t, int v, int) {
                               Var<Real> vv(t, v), xv(t, xid), gv(t, gid);
                               return std::vector<int>{conv2d_igrad(gv, vv, stride, pad, h, wd).id,
                                                       conv2d(xv, vv, stride, pad).id};
                           });
    return {*x.tape, id};
}

// ----------------------------------------------------- resampling (4-D)

template <class Real>
Var<Real> upsample2x(Var<Real> x) {
    detail::check_rank(x.val(), 4, "upsample2x");
    const int b = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    Tensor<Real> out({b, c, 2 * h, 2 * w});
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int xo = 0; xo < w; ++xo) {
                    const Real v = x.val().at(bi, ci, y, xo);
                    out.at(bi, ci, 2 * y, 2 * xo) = v;
                    out.at(bi, ci, 2 * y, 2 * xo + 1) = v;
                    out.at(bi, ci, 2 * y + 1, 2 * xo) = v;
                    out.at(bi, ci, 2 * y + 1, 2 * xo + 1) = v;
                }
    int id = x.tape->apply("upsample2x", std::move(out), {x.id}, [](Tape<Real>& t, int g, int) {
        return std::vector<int>{downsample2x_sum(Var<Real>(t, g)).id};
    });
    return {*x.tape, id};
}

template <class Real>
Var<Real> downsample2x_sum(Var<Real> x) {
    detail::check_rank(x.val(), 4, "downsample2x_sum");
    const int b = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw DimensionError("downsample2x_sum: extents must be even");
    Tensor<Real> out({b, c, h / 2, w / 2});
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h / 2; ++y)
                for (int xo = 0; xo < w / 2; ++xo)
                    out.at(bi, ci, y, xo) = x.val().at(bi, ci, 2 * y, 2 * xo) + x.val().at(bi, ci, 2 * y, 2 * xo + 1) +
                                            x.val().at(bi, ci, 2 * y + 1, 2 * xo) +
                                            x.val().at(bi, ci, 2 * y + 1, 2 * xo + 1);
    int id = x.tape->apply("downsample2x_sum", std::move(out), {x.id}, [](Tape<Real>& t, int g, int) {
        return std::vector<int>{upsample2x(Var<Real>(t, g)).id};
    });
    return {*x.tape, id};
}

template <class Real>
Var<Real> avgpool2x(Var<Real> x) {
    return scale(downsample2x_sum(x), 0.25);
}

// ----------------------------------------------- channel-structured (4-D)

template <class Real>
Var<Real> chan_broadcast(Var<Real> bvec, int n, int h, int w) {
    if (bvec.val().rank() != 1) throw DimensionError("chan_broadcast: expected rank-1 bias");
    const int c = bvec.val().dim(0);
    Tensor<Real> out({n, c, h, w});
    for (int bi = 0; bi < n; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            Real* dst = out.ptr() + (static_cast<size_t>(bi) * c + ci) * h * w;
            std::fill(dst, dst + static_cast<size_t>(h) * w, bvec.val()[ci]);
        }
    int id = bvec.tape->apply("chan_broadcast", std::move(out), {bvec.id}, [](Tape<Real>& t, int g, int) {
        return std::vector<int>{reduce_bhw(Var<Real>(t, g)).id};
    });
    return {*bvec.tape, id};
}

template <class Real>
Var<Real> reduce_bhw(Var<Real> x) {
    detail::check_rank(x.val(), 4, "reduce_bhw");
    const int b = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    Tensor<Real> out({c});
    for (int ci = 0; ci < c; ++ci) {
        double s = 0;
        for (int bi = 0; bi < b; ++bi) {
            const Real* src = x.val().ptr() + (static_cast<size_t>(bi) * c + ci) * h * w;
            for (int i = 0; i < h * w; ++i) s += static_cast<double>(src[i]);
        }
        out[ci] = static_cast<Real>(s);
    }
    int id = x.tape->apply("reduce_bhw", std::move(out), {x.id}, [b, h, w](Tape<Real>& t, int g, int) {
        return std::vector<int>{chan_broadcast(Var<Real>(t, g), b, h, w).id};
    });
    return {*x.tape, id};
}

template <class Real>
Var<Real> add_chan_bias(Var<Real> x, Var<Real> bias) {
    detail::check_rank(x.val(), 4, "add_chan_bias");
    return add(x, chan_broadcast(bias, x.val().dim(0), x.val().dim(2), x.val().dim(3)));
}

template <class Real>
Var<Real> plane_broadcast(Var<Real> x, int c) {
    detail::check_rank(x.val(), 4, "plane_broadcast");
    if (x.val().dim(1) != 1) throw DimensionError("plane_broadcast: expected single-channel input");
    const int b = x.val().dim(0), h = x.val().dim(2), w = x.val().dim(3);
    Tensor<Real> out({b, c, h, w});
    for (int bi = 0; bi < b; ++bi) {
        const Real* src = x.val().ptr() + static_cast<size_t>(bi) * h * w;
        for (int ci = 0; ci < c; ++ci)
            std::copy(src, src + static_cast<size_t>(h) * w, out.ptr() + (static_cast<size_t>(bi) * c + ci) * h * w);
    }
    int id = x.tape->apply("plane_broadcast", std::move(out), {x.id}, [](Tape<Real>& t, int g, int) {
        return std::vector<int>{plane_reduce(Var<Real>(t, g)).id};
    });
    return {*x.tape, id};
}

template <class Real>
Var<Real> plane_reduce(Var<Real> x) {
    detail::check_rank(x.val(), 4, "plane_reduce");
    const int b = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    Tensor<Real> out({b, 1, h, w});
    for (int bi = 0; bi < b; ++bi) {
        Real* dst = out.ptr() + static_cast<size_t>(bi) * h * w;
        for (int ci = 0; ci < c; ++ci) {
            const Real* src = x.val().ptr() + (static_cast<size_t>(bi) * c + ci) * h * w;
            for (int i = 0; i < h * w; ++i) dst[i] = ci == 0 ? src[i] : dst[i] + src[i];
        }
    }
    int id = x.tape->apply("plane_reduce", std::move(out), {x.id}, [c](Tape<Real>& t, int g, int) {
        return std::vector<int>{plane_broadcast(Var<Real>(t, g), c).id};
    });
    return {*x.tape, id};
}

// x[b,c,h,w] * s[b,c], broadcast over the spatial plane.
template <class Real>
Var<Real> scale_channels(Var<Real> x, Var<Real> s) {
    detail::check_rank(x.val(), 4, "scale_channels");
    detail::check_rank(s.val(), 2, "scale_channels");
    const int b = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    if (s.val().dim(0) != b || s.val().dim(1) != c)
        throw DimensionError("scale_channels: scale shape " + shape_str(s.val().shape) + " does not match " + shape_str(x.val().shape));
    Tensor<Real> out(x.val().shape);
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const Real sv = s.val().at(bi, ci);
            const Real* src = x.val().ptr() + (static_cast<size_t>(bi) * c + ci) * h * w;
            Real* dst = out.ptr() + (static_cast<size_t>(bi) * c + ci) * h * w;
            for (int i = 0; i < h * w; ++i) dst[i] = src[i] * sv;
        }
    int xid = x.id, sid = s.id;
    int id = x.tape->apply("scale_channels", std::move(out), {xid, sid}, [xid, sid](Tape<Real>& t, int g, int) {
        Var<Real> gv(t, g), xv(t, xid), sv(t, sid);
        return std::vector<int>{scale_channels(gv, sv).id, channel_dot(gv, xv).id};
    });
    return {*x.tape, id};
}

// Per-channel spatial dot product: out[b,c] = sum_{h,w} x[b,c,h,w]*y[b,c,h,w].
template <class Real>
Var<Real> channel_dot(Var<Real> x, Var<Real> y) {
    detail::check_rank(x.val(), 4, "channel_dot");
    detail::check_same_shape(x.val(), y.val(), "channel_dot");
    const int b = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    Tensor<Real> out({b, c});
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const Real* xa = x.val().ptr() + (static_cast<size_t>(bi) * c + ci) * h * w;
            const Real* ya = y.val().ptr() + (static_cast<size_t>(bi) * c + ci) * h * w;
            double s = 0;
            for (int i = 0; i < h * w; ++i) s += static_cast<double>(xa[i]) * static_cast<double>(ya[i]);
            out.at(bi, ci) = static_cast<Real>(s);
        }
    int xid = x.id, yid = y.id;
    int id = x.tape->apply("channel_dot", std::move(out), {xid, yid}, [xid, yid](Tape<Real>& t, int g, int) {
        Var<Real> gv(t, g), xv(t, xid), yv(t, yid);
        return std::vector<int>{scale_channels(yv, gv).id, scale_channels(xv, gv).id};
    });
    return {*x.tape, id};
}

// ------------------------------------------------------------- composites

template <class Real>
Var<Real> mse(Var<Real> a, Var<Real> b) {
    Var<Real> d = sub(a, b);
    return mean_all(mul(d, d));
}

template <class Real>
Var<Real> l1(Var<Real> a, Var<Real> b) {
    return mean_all(abs(sub(a, b)));
}

}  // namespace latentlab
