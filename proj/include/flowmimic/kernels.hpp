#pragma once

#include <cstddef>

namespace flowmimic::nn::kernels {

// Dense kernels backing the model stack. Every kernel comes in two builds:
// a plain serial reference (the *_serial functions, kept for testing) and a
// dispatching version that parallelizes with OpenMP across independent
// output elements when the work is large enough.
//
// Determinism contract: each output element is always reduced by a single
// thread as one left-to-right loop, so the parallel versions are
// bit-identical to the serial references at any thread count.

void set_parallel(bool on);
bool parallel_enabled();

// Smallest flop count worth farming out to the OpenMP pool.
void set_parallel_threshold(size_t flops);

// C[m x n] = A[m x k] * B[k x n]
void matmul_serial(const double* A, const double* B, double* C, int m, int k, int n);
void matmul(const double* A, const double* B, double* C, int m, int k, int n);

// C[m x n] = A^T * B, with A stored [k x m], B stored [k x n]
void matmul_tn_serial(const double* A, const double* B, double* C, int k, int m, int n);
void matmul_tn(const double* A, const double* B, double* C, int k, int m, int n);

// C[m x n] = A * B^T, with A stored [m x k], B stored [n x k]
void matmul_nt_serial(const double* A, const double* B, double* C, int m, int k, int n);
void matmul_nt(const double* A, const double* B, double* C, int m, int k, int n);

// Row-wise softmax. mask may be null; where mask is 0 the output is exactly
// zero and the entry is excluded from the normalization. A fully masked row
// yields all zeros.
void softmax_rows_serial(const double* x, const unsigned char* mask, double* y, int m, int n);
void softmax_rows(const double* x, const unsigned char* mask, double* y, int m, int n);

// Row-wise layer normalization with affine gain/bias (each length n).
// mu and rstd (each length m) receive the per-row statistics needed by the
// backward pass.
void layernorm_rows_serial(const double* x, const double* gain, const double* bias, double eps,
                           double* y, double* mu, double* rstd, int m, int n);
void layernorm_rows(const double* x, const double* gain, const double* bias, double eps,
                    double* y, double* mu, double* rstd, int m, int n);

}  // namespace flowmimic::nn::kernels
