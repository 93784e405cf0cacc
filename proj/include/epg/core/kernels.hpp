#pragma once

#include <cstdint>

// Data-parallel compute kernels. Every kernel comes in two flavors: a plain
// serial reference (suffix _serial) and an OpenMP version. The OpenMP versions
// parallelize only across independent output elements and keep every per-element
// accumulation order fixed, so results are bit-identical to the serial reference
// for any thread count. tools/bench_kernels compares the two.
namespace epg::kern {

void set_parallel(bool on);
bool parallel();
int max_threads();

// ---- GEMM ----------------------------------------------------------------
// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
             bool accumulate);
// C[M,N] (+)= A[M,K] * B[N,K]^T
void gemm_nt(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
             bool accumulate);
// C[M,N] (+)= A[K,M]^T * B[K,N]
void gemm_tn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
             bool accumulate);

void gemm_nn_serial(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
                    bool accumulate);
void gemm_nt_serial(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
                    bool accumulate);
void gemm_tn_serial(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
                    bool accumulate);

// ---- Row/elementwise ops ---------------------------------------------------
void add_bias(double* Y, const double* b, int64_t rows, int64_t dim);
// db[dim] += sum over rows of dY
void bias_grad(const double* dY, double* db, int64_t rows, int64_t dim);
void bias_grad_serial(const double* dY, double* db, int64_t rows, int64_t dim);

void axpy(double a, const double* x, double* y, int64_t n);  // y += a*x
void scale(double* x, double a, int64_t n);
void copy(const double* x, double* y, int64_t n);
void add(const double* x, double* y, int64_t n);  // y += x

double sumsq(const double* x, int64_t n);
double sumsq_serial(const double* x, int64_t n);
double dot(const double* x, const double* y, int64_t n);

// ---- Activations -----------------------------------------------------------
// Exact (erf-based) GELU.
void gelu_fwd(const double* X, double* Y, int64_t n);
// dX (+)= dY * gelu'(X)
void gelu_bwd(const double* X, const double* dY, double* dX, int64_t n, bool accumulate);
void silu_fwd(const double* X, double* Y, int64_t n);
void silu_bwd(const double* X, const double* dY, double* dX, int64_t n, bool accumulate);

// ---- LayerNorm --------------------------------------------------------------
// Row-wise over the last dim. gamma/beta may be null (non-affine).
void layernorm_fwd(const double* X, const double* gamma, const double* beta, double* Y,
                   double* mean, double* rstd, int64_t rows, int64_t dim, double eps);
void layernorm_fwd_serial(const double* X, const double* gamma, const double* beta, double* Y,
                          double* mean, double* rstd, int64_t rows, int64_t dim, double eps);
// dgamma/dbeta are accumulated when non-null; dX accumulated when accumulate set.
void layernorm_bwd(const double* X, const double* gamma, const double* dY, const double* mean,
                   const double* rstd, double* dX, double* dgamma, double* dbeta, int64_t rows,
                   int64_t dim, bool accumulate);
void layernorm_bwd_serial(const double* X, const double* gamma, const double* dY,
                          const double* mean, const double* rstd, double* dX, double* dgamma,
                          double* dbeta, int64_t rows, int64_t dim, bool accumulate);

// ---- Softmax ----------------------------------------------------------------
// In-place row softmax with max subtraction.
void softmax_rows(double* X, int64_t rows, int64_t dim);
void softmax_rows_serial(double* X, int64_t rows, int64_t dim);

// ---- Optimizer --------------------------------------------------------------
// Decoupled weight decay Adam step on one parameter tensor.
void adamw_update(double* p, const double* g, double* m, double* v, int64_t n, double lr,
                  double beta1, double beta2, double eps, double weight_decay, double bias_c1,
                  double bias_c2);
void adamw_update_serial(double* p, const double* g, double* m, double* v, int64_t n, double lr,
                         double beta1, double beta2, double eps, double weight_decay,
                         double bias_c1, double bias_c2);

}  // namespace epg::kern
