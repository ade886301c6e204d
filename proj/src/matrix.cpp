#include "xar/matrix.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace xar {

namespace {

using v4d = double __attribute__((vector_size(32)));

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kVecs = 3;

inline v4d load4(const double* p) {
    v4d v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof v); }

// o[r, j] = init[j] + sum_k x[r, k] * w[k, j] over an RB x (4 NV) tile. Every
// element sees the same multiply-then-add sequence in ascending k whatever the
// tile shape, so results never depend on how rows or columns are blocked.
template <std::size_t RB, std::size_t NV>
inline void tile(const double* x, std::size_t ldx, std::size_t in_dim, const double* w, std::size_t out_dim, const double* init,
                 std::size_t init_stride, double* o, std::size_t j0) {
    v4d acc[RB][NV];
    for (std::size_t r = 0; r < RB; ++r) {
        for (std::size_t v = 0; v < NV; ++v) {
            acc[r][v] = init ? load4(init + r * init_stride + j0 + 4 * v) : v4d{0.0, 0.0, 0.0, 0.0};
        }
    }
    for (std::size_t k = 0; k < in_dim; ++k) {
        v4d wk[NV];
        for (std::size_t v = 0; v < NV; ++v) {
            wk[v] = load4(w + k * out_dim + j0 + 4 * v);
        }
        for (std::size_t r = 0; r < RB; ++r) {
            const double a = x[r * ldx + k];
            const v4d av = {a, a, a, a};
            for (std::size_t v = 0; v < NV; ++v) {
                acc[r][v] += av * wk[v];
            }
        }
    }
    for (std::size_t r = 0; r < RB; ++r) {
        for (std::size_t v = 0; v < NV; ++v) {
            store4(o + r * out_dim + j0 + 4 * v, acc[r][v]);
        }
    }
}

template <std::size_t RB>
inline void tile_scalar(const double* x, std::size_t ldx, std::size_t in_dim, const double* w, std::size_t out_dim,
                        const double* init, std::size_t init_stride, double* o, std::size_t j) {
    double acc[RB];
    for (std::size_t r = 0; r < RB; ++r) {
        acc[r] = init ? init[r * init_stride + j] : 0.0;
    }
    for (std::size_t k = 0; k < in_dim; ++k) {
        const double wk = w[k * out_dim + j];
        for (std::size_t r = 0; r < RB; ++r) {
            const double p = x[r * ldx + k] * wk;
            acc[r] += p;
        }
    }
    for (std::size_t r = 0; r < RB; ++r) {
        o[r * out_dim + j] = acc[r];
    }
}

template <std::size_t RB>
inline void kernel_rows(const double* x, std::size_t ldx, std::size_t in_dim, const double* w, std::size_t out_dim,
                        const double* init, std::size_t init_stride, double* o) {
    std::size_t j0 = 0;
    for (; j0 + 4 * kVecs <= out_dim; j0 += 4 * kVecs) {
        tile<RB, kVecs>(x, ldx, in_dim, w, out_dim, init, init_stride, o, j0);
    }
    for (; j0 + 4 <= out_dim; j0 += 4) {
        tile<RB, 1>(x, ldx, in_dim, w, out_dim, init, init_stride, o, j0);
    }
    for (; j0 < out_dim; ++j0) {
        tile_scalar<RB>(x, ldx, in_dim, w, out_dim, init, init_stride, o, j0);
    }
}

// out[n, out_dim] = init + x[n, in_dim] * w[in_dim, out_dim] with x rows ldx
// apart; init is one row broadcast (init_stride 0), a full matrix
// (init_stride out_dim) or absent.
void gemm(const double* x, std::size_t ldx, std::size_t rows, std::size_t in_dim, const double* w,
          std::size_t out_dim, const double* init, std::size_t init_stride, double* out) {
    std::size_t r = 0;
    for (; r + kRowBlock <= rows; r += kRowBlock) {
        kernel_rows<kRowBlock>(x + r * ldx, ldx, in_dim, w, out_dim, init ? init + r * init_stride : nullptr,
                               init_stride, out + r * out_dim);
    }
    for (; r < rows; ++r) {
        kernel_rows<1>(x + r * ldx, ldx, in_dim, w, out_dim, init ? init + r * init_stride : nullptr, init_stride,
                       out + r * out_dim);
    }
}

}  // namespace

void matmul(const Matrix& x, std::span<const double> w, std::span<const double> bias, std::size_t out_dim,
            Matrix& out) {
    const std::size_t in_dim = x.cols;
    assert(w.size() == in_dim * out_dim);
    assert(bias.empty() || bias.size() == out_dim);
    if (out.rows != x.rows || out.cols != out_dim) {
        out = Matrix(x.rows, out_dim);
    }
    gemm(x.data.data(), in_dim, x.rows, in_dim, w.data(), out_dim, bias.empty() ? nullptr : bias.data(), 0,
         out.data.data());
}

void matmul_grad_input(const Matrix& dy, std::span<const double> w, std::size_t in_dim, Matrix& dx) {
    const std::size_t out_dim = dy.cols;
    assert(w.size() == in_dim * out_dim);
    std::vector<double> wt(in_dim * out_dim);
    for (std::size_t k = 0; k < in_dim; ++k) {
        for (std::size_t j = 0; j < out_dim; ++j) {
            wt[j * in_dim + k] = w[k * out_dim + j];
        }
    }
    dx = Matrix(dy.rows, in_dim);
    gemm(dy.data.data(), out_dim, dy.rows, out_dim, wt.data(), in_dim, nullptr, 0, dx.data.data());
}

void matmul_grad_params(const Matrix& x, const Matrix& dy, std::span<double> dw, std::span<double> db) {
    const std::size_t in_dim = x.cols;
    const std::size_t out_dim = dy.cols;
    assert(dw.size() == in_dim * out_dim);
    std::vector<double> xt(in_dim * x.rows);
    for (std::size_t r = 0; r < x.rows; ++r) {
        for (std::size_t k = 0; k < in_dim; ++k) {
            xt[k * x.rows + r] = x.data[r * in_dim + k];
        }
    }
    // Chunks over the summed dimension keep dy in cache; each element still
    // accumulates rows in ascending order.
    constexpr std::size_t chunk = 64;
    for (std::size_t r0 = 0; r0 < x.rows; r0 += chunk) {
        const std::size_t n = std::min(chunk, x.rows - r0);
        gemm(xt.data() + r0, x.rows, in_dim, n, dy.data.data() + r0 * out_dim, out_dim, dw.data(), out_dim,
             dw.data());
    }
    if (!db.empty()) {
        for (std::size_t r = 0; r < dy.rows; ++r) {
            const double* g = dy.data.data() + r * out_dim;
            for (std::size_t j = 0; j < out_dim; ++j) {
                db[j] += g[j];
            }
        }
    }
}

Matrix rows_slice(const Matrix& m, std::size_t first, std::size_t count) {
    if (first + count > m.rows) {
        throw std::out_of_range("rows_slice: range exceeds matrix");
    }
    Matrix out(count, m.cols);
    std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(first * m.cols), count * m.cols, out.data.begin());
    return out;
}

void set_rows(Matrix& dst, std::size_t first, const Matrix& src) {
    if (src.cols != dst.cols || first + src.rows > dst.rows) {
        throw std::out_of_range("set_rows: shape mismatch");
    }
    std::copy(src.data.begin(), src.data.end(), dst.data.begin() + static_cast<std::ptrdiff_t>(first * dst.cols));
}

Matrix vstack(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) {
        throw std::invalid_argument("vstack: column mismatch");
    }
    Matrix out(a.rows + b.rows, a.cols);
    set_rows(out, 0, a);
    set_rows(out, a.rows, b);
    return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("max_abs_diff: shape mismatch");
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

}  // namespace xar
