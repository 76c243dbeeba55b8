#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "a2q/common.hpp"

namespace a2q {

// Dense row-major real matrix. Node feature maps are stored one node
// per row.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) {
        return {data.data() + r * cols, cols};
    }
    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * cols, cols};
    }

    std::size_t size() const { return data.size(); }

    void fill(double v) { data.assign(rows * cols, v); }

    bool same_shape(const Matrix& o) const {
        return rows == o.rows && cols == o.cols;
    }
};

using NodeFeatures = Matrix;

// C = A * B. Zero entries of A are skipped, which makes the first-layer
// product cheap on sparse bag-of-words features without a separate
// sparse path.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols == b.rows, "matmul: inner dimensions differ");
    Matrix c(a.rows, b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* crow = c.data.data() + i * c.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double av = arow[k];
            if (av == 0.0) continue;
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C = A^T * B, with A given untransposed (A: n x p, B: n x q, C: p x q).
inline Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
    require(a.rows == b.rows, "matmul_at_b: row counts differ");
    Matrix c(a.cols, b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        const double* brow = b.data.data() + i * b.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double av = arow[k];
            if (av == 0.0) continue;
            double* crow = c.data.data() + k * c.cols;
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C = A * B^T, with B given untransposed (A: n x q, B: p x q, C: n x p).
inline Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
    require(a.cols == b.cols, "matmul_a_bt: column counts differ");
    Matrix c(a.rows, b.rows, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* crow = c.data.data() + i * c.cols;
        for (std::size_t k = 0; k < b.rows; ++k) {
            const double* brow = b.data.data() + k * b.cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < a.cols; ++j) dot += arow[j] * brow[j];
            crow[k] = dot;
        }
    }
    return c;
}

} // namespace a2q
