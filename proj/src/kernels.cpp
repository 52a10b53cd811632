#include "flowmimic/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace flowmimic::nn::kernels {

namespace {

std::atomic<bool> g_parallel{true};
std::atomic<size_t> g_threshold{1u << 16};

bool use_parallel(size_t flops) {
#ifdef _OPENMP
    return g_parallel.load(std::memory_order_relaxed) && flops >= g_threshold.load(std::memory_order_relaxed) &&
           omp_get_max_threads() > 1 && !omp_in_parallel();
#else
    (void)flops;
    return false;
#endif
}

inline void matmul_row(const double* __restrict a, const double* __restrict B, double* __restrict c,
                       int k, int n) {
    std::memset(c, 0, static_cast<size_t>(n) * sizeof(double));
    for (int p = 0; p < k; ++p) {
        const double av = a[p];
        const double* __restrict b = B + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
}

inline void matmul_tn_row(const double* __restrict A, const double* __restrict B, double* __restrict c,
                          int k, int m, int n, int i) {
    std::memset(c, 0, static_cast<size_t>(n) * sizeof(double));
    for (int p = 0; p < k; ++p) {
        const double av = A[static_cast<size_t>(p) * m + i];
        const double* __restrict b = B + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
}

inline void matmul_nt_row(const double* __restrict a, const double* __restrict B, double* __restrict c,
                          int k, int n) {
    for (int j = 0; j < n; ++j) {
        const double* __restrict b = B + static_cast<size_t>(j) * k;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += a[p] * b[p];
        c[j] = acc;
    }
}

inline void softmax_row(const double* __restrict x, const unsigned char* __restrict mask,
                        double* __restrict y, int n) {
    double mx = -HUGE_VAL;
    for (int j = 0; j < n; ++j)
        if (!mask || mask[j]) mx = std::max(mx, x[j]);
    if (mx == -HUGE_VAL) {
        std::memset(y, 0, static_cast<size_t>(n) * sizeof(double));
        return;
    }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        if (!mask || mask[j]) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        } else {
            y[j] = 0.0;
        }
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) y[j] *= inv;
}

inline void layernorm_row(const double* __restrict x, const double* __restrict gain,
                          const double* __restrict bias, double eps, double* __restrict y,
                          double* mu, double* rstd, int n) {
    double m = 0.0;
    for (int j = 0; j < n; ++j) m += x[j];
    m /= n;
    double v = 0.0;
    for (int j = 0; j < n; ++j) {
        const double d = x[j] - m;
        v += d * d;
    }
    v /= n;
    const double r = 1.0 / std::sqrt(v + eps);
    *mu = m;
    *rstd = r;
    for (int j = 0; j < n; ++j) y[j] = (x[j] - m) * r * gain[j] + bias[j];
}

}  // namespace

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }
bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel_threshold(size_t flops) { g_threshold.store(flops, std::memory_order_relaxed); }

void matmul_serial(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        matmul_row(A + static_cast<size_t>(i) * k, B, C + static_cast<size_t>(i) * n, k, n);
}

void matmul(const double* A, const double* B, double* C, int m, int k, int n) {
    if (!use_parallel(static_cast<size_t>(m) * k * n)) {
        matmul_serial(A, B, C, m, k, n);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i)
        matmul_row(A + static_cast<size_t>(i) * k, B, C + static_cast<size_t>(i) * n, k, n);
#endif
}

void matmul_tn_serial(const double* A, const double* B, double* C, int k, int m, int n) {
    for (int i = 0; i < m; ++i) matmul_tn_row(A, B, C + static_cast<size_t>(i) * n, k, m, n, i);
}

void matmul_tn(const double* A, const double* B, double* C, int k, int m, int n) {
    if (!use_parallel(static_cast<size_t>(m) * k * n)) {
        matmul_tn_serial(A, B, C, k, m, n);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) matmul_tn_row(A, B, C + static_cast<size_t>(i) * n, k, m, n, i);
#endif
}

void matmul_nt_serial(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        matmul_nt_row(A + static_cast<size_t>(i) * k, B, C + static_cast<size_t>(i) * n, k, n);
}

void matmul_nt(const double* A, const double* B, double* C, int m, int k, int n) {
    if (!use_parallel(static_cast<size_t>(m) * k * n)) {
        matmul_nt_serial(A, B, C, m, k, n);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i)
        matmul_nt_row(A + static_cast<size_t>(i) * k, B, C + static_cast<size_t>(i) * n, k, n);
#endif
}

void softmax_rows_serial(const double* x, const unsigned char* mask, double* y, int m, int n) {
    for (int i = 0; i < m; ++i) {
        const size_t off = static_cast<size_t>(i) * n;
        softmax_row(x + off, mask ? mask + off : nullptr, y + off, n);
    }
}

void softmax_rows(const double* x, const unsigned char* mask, double* y, int m, int n) {
    if (!use_parallel(static_cast<size_t>(m) * n * 8)) {
        softmax_rows_serial(x, mask, y, m, n);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const size_t off = static_cast<size_t>(i) * n;
        softmax_row(x + off, mask ? mask + off : nullptr, y + off, n);
    }
#endif
}

void layernorm_rows_serial(const double* x, const double* gain, const double* bias, double eps,
                           double* y, double* mu, double* rstd, int m, int n) {
    for (int i = 0; i < m; ++i) {
        const size_t off = static_cast<size_t>(i) * n;
        layernorm_row(x + off, gain, bias, eps, y + off, mu + i, rstd + i, n);
    }
}

void layernorm_rows(const double* x, const double* gain, const double* bias, double eps, double* y,
                    double* mu, double* rstd, int m, int n) {
    if (!use_parallel(static_cast<size_t>(m) * n * 8)) {
        layernorm_rows_serial(x, gain, bias, eps, y, mu, rstd, m, n);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const size_t off = static_cast<size_t>(i) * n;
        layernorm_row(x + off, gain, bias, eps, y + off, mu + i, rstd + i, n);
    }
#endif
}

}  // namespace flowmimic::nn::kernels
