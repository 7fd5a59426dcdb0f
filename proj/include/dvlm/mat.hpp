#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dvlm/errors.hpp"
#include "dvlm/rng.hpp"

namespace dvlm {

// Dense row-major matrix. Rows are tokens/instances, columns are feature dims.
template <class S>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<S> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, S(0)) {}

    static Mat zeros(int r, int c) { return Mat(r, c); }

    static Mat filled(int r, int c, S v) {
        Mat m(r, c);
        for (auto& x : m.a) x = v;
        return m;
    }

    static Mat gaussian(int r, int c, double stddev, Rng& rng) {
        Mat m(r, c);
        for (auto& x : m.a) x = static_cast<S>(rng.gaussian(0.0, stddev));
        return m;
    }

    S* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
    const S* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }

    S& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    S at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return a.size(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    void fill(S v) {
        for (auto& x : a) x = v;
    }
};

using Mask = Mat<uint8_t>;

inline Mask all_true_mask(int rows, int cols) { return Mask::filled(rows, cols, uint8_t(1)); }

inline std::string shape_str(int r, int c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

// Plain matmul used by tests and non-graph code paths.
template <class S>
Mat<S> matmul_plain(const Mat<S>& a, const Mat<S>& b) {
    if (a.cols != b.rows)
        throw ShapeError("matmul " + shape_str(a.rows, a.cols) + " * " + shape_str(b.rows, b.cols));
    Mat<S> c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const S* ai = a.row(i);
        S* ci = c.row(i);
        for (int k = 0; k < a.cols; ++k) {
            S aik = ai[k];
            if (aik == S(0)) continue;
            const S* bk = b.row(k);
            for (int j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

template <class S>
S max_abs_diff(const Mat<S>& a, const Mat<S>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff shapes differ");
    S m = S(0);
    for (size_t i = 0; i < a.a.size(); ++i) {
        S d = a.a[i] - b.a[i];
        if (d < S(0)) d = -d;
        if (d > m) m = d;
    }
    return m;
}

}  // namespace dvlm
