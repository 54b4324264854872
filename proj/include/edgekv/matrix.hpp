#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace edgekv {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles. All numerics in this project run at
// 64-bit precision; the merge/invariance test tolerances (1e-9..1e-12)
// are not reachable with floats.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row_ptr(std::size_t i) { return data.data() + i * cols; }
    const double* row_ptr(std::size_t i) const { return data.data() + i * cols; }

    Vec row(std::size_t i) const {
        return Vec(data.begin() + static_cast<std::ptrdiff_t>(i * cols),
                   data.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols));
    }

    bool empty() const { return rows == 0 || cols == 0; }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

std::string shape_str(const Matrix& m);

Matrix identity(std::size_t n);

// Standard product with deterministic accumulation: row-by-row, each dot
// product summed left to right. No reassociation, so results are
// bit-stable across runs on one platform.
Matrix matmul(const Matrix& a, const Matrix& b);

// Row-wise softmax with max-subtraction. Each output row sums to 1.
Matrix softmax_rows(const Matrix& m);

double frobenius_norm(const Matrix& m);

// Centered correlation in [-1, 1]. Throws "zero variance" if either input
// is constant (degenerate similarity input).
double pearson_corr(const Vec& x, const Vec& y);

}  // namespace edgekv
