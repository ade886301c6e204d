#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace xar {

// Dense row-major matrix of doubles. Rows are tokens, columns are features
// throughout the library.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool operator==(const Matrix&) const = default;
};

// out[n, out] = x[n, in] * w[in, out] (+ bias). Each output row is computed
// with the same accumulation order regardless of how many rows are present,
// so batched and single-row evaluations agree bit for bit.
void matmul(const Matrix& x, std::span<const double> w, std::span<const double> bias, std::size_t out_dim,
            Matrix& out);

// dx[n, in] = dy[n, out] * w^T
void matmul_grad_input(const Matrix& dy, std::span<const double> w, std::size_t in_dim, Matrix& dx);

// dw[in, out] += x^T * dy ; db[out] += sum_rows(dy)
void matmul_grad_params(const Matrix& x, const Matrix& dy, std::span<double> dw, std::span<double> db);

Matrix rows_slice(const Matrix& m, std::size_t first, std::size_t count);
void set_rows(Matrix& dst, std::size_t first, const Matrix& src);
Matrix vstack(const Matrix& a, const Matrix& b);

double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace xar
