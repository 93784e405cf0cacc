#include "epg/core/kernels.hpp"

#include <omp.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <vector>

namespace epg::kern {

namespace {
std::atomic<bool> g_parallel{true};
}

void set_parallel(bool on) { g_parallel.store(on); }
bool parallel() { return g_parallel.load(); }
int max_threads() { return omp_get_max_threads(); }

// ---- GEMM ----------------------------------------------------------------

void gemm_nn_serial(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
                    bool accumulate) {
    for (int64_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        if (!accumulate)
            for (int64_t j = 0; j < N; ++j) c[j] = 0.0;
        const double* a = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const double av = a[k];
            const double* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

void gemm_nn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
             bool accumulate) {
#pragma omp parallel for schedule(static) if (parallel() && M > 8)
    for (int64_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        if (!accumulate)
            for (int64_t j = 0; j < N; ++j) c[j] = 0.0;
        const double* a = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const double av = a[k];
            const double* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

void gemm_nt_serial(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
                    bool accumulate) {
    for (int64_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            const double* b = B + j * K;
            double s = 0.0;
            for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] = accumulate ? c[j] + s : s;
        }
    }
}

void gemm_nt(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
             bool accumulate) {
#pragma omp parallel for schedule(static) if (parallel() && M > 8)
    for (int64_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            const double* b = B + j * K;
            double s = 0.0;
            for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] = accumulate ? c[j] + s : s;
        }
    }
}

void gemm_tn_serial(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
                    bool accumulate) {
    for (int64_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        if (!accumulate)
            for (int64_t j = 0; j < N; ++j) c[j] = 0.0;
        for (int64_t k = 0; k < K; ++k) {
            const double av = A[k * M + i];
            const double* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// K is usually the big (row) dimension here, so the loops run k-outer in tiles
// of 8 with the C tile kept hot; threads split the column range. Per-element
// accumulation order stays ascending in k, matching the serial reference
// bitwise.
void gemm_tn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
             bool accumulate) {
#pragma omp parallel if (parallel() && N >= 2 && K > 64)
    {
        const int nt = omp_get_num_threads();
        const int id = omp_get_thread_num();
        const int64_t j0 = N * id / nt;
        const int64_t j1 = N * (id + 1) / nt;
        if (!accumulate)
            for (int64_t i = 0; i < M; ++i)
                for (int64_t j = j0; j < j1; ++j) C[i * N + j] = 0.0;
        int64_t kt = 0;
        for (; kt + 8 <= K; kt += 8) {
            for (int64_t i = 0; i < M; ++i) {
                double av[8];
                for (int64_t q = 0; q < 8; ++q) av[q] = A[(kt + q) * M + i];
                double* c = C + i * N;
                const double* b = B + kt * N;
                for (int64_t j = j0; j < j1; ++j) {
                    double s = c[j];
                    s += av[0] * b[j];
                    s += av[1] * b[N + j];
                    s += av[2] * b[2 * N + j];
                    s += av[3] * b[3 * N + j];
                    s += av[4] * b[4 * N + j];
                    s += av[5] * b[5 * N + j];
                    s += av[6] * b[6 * N + j];
                    s += av[7] * b[7 * N + j];
                    c[j] = s;
                }
            }
        }
        for (; kt < K; ++kt) {
            const double* a = A + kt * M;
            const double* b = B + kt * N;
            for (int64_t i = 0; i < M; ++i) {
                const double av = a[i];
                double* c = C + i * N;
                for (int64_t j = j0; j < j1; ++j) c[j] += av * b[j];
            }
        }
    }
}

// ---- Row/elementwise ops ---------------------------------------------------

void add_bias(double* Y, const double* b, int64_t rows, int64_t dim) {
#pragma omp parallel for schedule(static) if (parallel() && rows > 16)
    for (int64_t i = 0; i < rows; ++i) {
        double* y = Y + i * dim;
        for (int64_t j = 0; j < dim; ++j) y[j] += b[j];
    }
}

void bias_grad_serial(const double* dY, double* db, int64_t rows, int64_t dim) {
    for (int64_t i = 0; i < rows; ++i) {
        const double* d = dY + i * dim;
        for (int64_t j = 0; j < dim; ++j) db[j] += d[j];
    }
}

void bias_grad(const double* dY, double* db, int64_t rows, int64_t dim) {
    // Parallel over output columns so each db[j] is summed in row order.
#pragma omp parallel for schedule(static) if (parallel() && dim > 16)
    for (int64_t j = 0; j < dim; ++j) {
        double s = 0.0;
        for (int64_t i = 0; i < rows; ++i) s += dY[i * dim + j];
        db[j] += s;
    }
}

void axpy(double a, const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel() && n > 4096)
    for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scale(double* x, double a, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel() && n > 4096)
    for (int64_t i = 0; i < n; ++i) x[i] *= a;
}

void copy(const double* x, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = x[i];
}

void add(const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel() && n > 4096)
    for (int64_t i = 0; i < n; ++i) y[i] += x[i];
}

double sumsq_serial(const double* x, int64_t n) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += x[i] * x[i];
    return s;
}

// Fixed 4096-wide chunks, partials combined in chunk order: the result does
// not depend on the thread count.
double sumsq(const double* x, int64_t n) {
    constexpr int64_t kChunk = 4096;
    const int64_t nchunks = (n + kChunk - 1) / kChunk;
    if (nchunks <= 1) return sumsq_serial(x, n);
    std::vector<double> partial(static_cast<size_t>(nchunks), 0.0);
#pragma omp parallel for schedule(static) if (parallel())
    for (int64_t c = 0; c < nchunks; ++c) {
        const int64_t lo = c * kChunk;
        const int64_t hi = std::min(n, lo + kChunk);
        double s = 0.0;
        for (int64_t i = lo; i < hi; ++i) s += x[i] * x[i];
        partial[static_cast<size_t>(c)] = s;
    }
    double s = 0.0;
    for (double p : partial) s += p;
    return s;
}

double dot(const double* x, const double* y, int64_t n) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

// ---- Activations -----------------------------------------------------------

namespace {
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

void gelu_fwd(const double* X, double* Y, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel() && n > 2048)
    for (int64_t i = 0; i < n; ++i) Y[i] = gelu(X[i]);
}

void gelu_bwd(const double* X, const double* dY, double* dX, int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static) if (parallel() && n > 2048)
    for (int64_t i = 0; i < n; ++i) {
        const double g = dY[i] * gelu_grad(X[i]);
        dX[i] = accumulate ? dX[i] + g : g;
    }
}

void silu_fwd(const double* X, double* Y, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel() && n > 2048)
    for (int64_t i = 0; i < n; ++i) Y[i] = X[i] * sigmoid(X[i]);
}

void silu_bwd(const double* X, const double* dY, double* dX, int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static) if (parallel() && n > 2048)
    for (int64_t i = 0; i < n; ++i) {
        const double s = sigmoid(X[i]);
        const double g = dY[i] * (s + X[i] * s * (1.0 - s));
        dX[i] = accumulate ? dX[i] + g : g;
    }
}

// ---- LayerNorm --------------------------------------------------------------

namespace {
inline void layernorm_row(const double* x, const double* gamma, const double* beta, double* y,
                          double* mean, double* rstd, int64_t dim, double eps) {
    double mu = 0.0;
    for (int64_t j = 0; j < dim; ++j) mu += x[j];
    mu /= static_cast<double>(dim);
    double var = 0.0;
    for (int64_t j = 0; j < dim; ++j) {
        const double d = x[j] - mu;
        var += d * d;
    }
    var /= static_cast<double>(dim);
    const double rs = 1.0 / std::sqrt(var + eps);
    *mean = mu;
    *rstd = rs;
    if (gamma) {
        for (int64_t j = 0; j < dim; ++j) y[j] = (x[j] - mu) * rs * gamma[j] + beta[j];
    } else {
        for (int64_t j = 0; j < dim; ++j) y[j] = (x[j] - mu) * rs;
    }
}

inline void layernorm_bwd_row(const double* x, const double* gamma, const double* dy, double mean,
                              double rstd, double* dx, int64_t dim, bool accumulate) {
    // dx = rstd * (dyh - mean(dyh) - xhat * mean(dyh * xhat)), dyh = dy * gamma
    double m1 = 0.0, m2 = 0.0;
    for (int64_t j = 0; j < dim; ++j) {
        const double xh = (x[j] - mean) * rstd;
        const double dyh = gamma ? dy[j] * gamma[j] : dy[j];
        m1 += dyh;
        m2 += dyh * xh;
    }
    m1 /= static_cast<double>(dim);
    m2 /= static_cast<double>(dim);
    for (int64_t j = 0; j < dim; ++j) {
        const double xh = (x[j] - mean) * rstd;
        const double dyh = gamma ? dy[j] * gamma[j] : dy[j];
        const double g = rstd * (dyh - m1 - xh * m2);
        dx[j] = accumulate ? dx[j] + g : g;
    }
}
}  // namespace

void layernorm_fwd_serial(const double* X, const double* gamma, const double* beta, double* Y,
                          double* mean, double* rstd, int64_t rows, int64_t dim, double eps) {
    for (int64_t i = 0; i < rows; ++i)
        layernorm_row(X + i * dim, gamma, beta, Y + i * dim, mean + i, rstd + i, dim, eps);
}

void layernorm_fwd(const double* X, const double* gamma, const double* beta, double* Y,
                   double* mean, double* rstd, int64_t rows, int64_t dim, double eps) {
#pragma omp parallel for schedule(static) if (parallel() && rows > 8)
    for (int64_t i = 0; i < rows; ++i)
        layernorm_row(X + i * dim, gamma, beta, Y + i * dim, mean + i, rstd + i, dim, eps);
}

void layernorm_bwd_serial(const double* X, const double* gamma, const double* dY,
                          const double* mean, const double* rstd, double* dX, double* dgamma,
                          double* dbeta, int64_t rows, int64_t dim, bool accumulate) {
    for (int64_t i = 0; i < rows; ++i)
        layernorm_bwd_row(X + i * dim, gamma, dY + i * dim, mean[i], rstd[i], dX + i * dim, dim,
                          accumulate);
    if (dgamma) {
        for (int64_t i = 0; i < rows; ++i) {
            const double* x = X + i * dim;
            const double* dy = dY + i * dim;
            for (int64_t j = 0; j < dim; ++j) {
                dgamma[j] += dy[j] * (x[j] - mean[i]) * rstd[i];
                dbeta[j] += dy[j];
            }
        }
    }
}

void layernorm_bwd(const double* X, const double* gamma, const double* dY, const double* mean,
                   const double* rstd, double* dX, double* dgamma, double* dbeta, int64_t rows,
                   int64_t dim, bool accumulate) {
#pragma omp parallel for schedule(static) if (parallel() && rows > 8)
    for (int64_t i = 0; i < rows; ++i)
        layernorm_bwd_row(X + i * dim, gamma, dY + i * dim, mean[i], rstd[i], dX + i * dim, dim,
                          accumulate);
    if (dgamma) {
#pragma omp parallel for schedule(static) if (parallel() && dim > 16)
        for (int64_t j = 0; j < dim; ++j) {
            double dg = 0.0, db = 0.0;
            for (int64_t i = 0; i < rows; ++i) {
                const double dy = dY[i * dim + j];
                dg += dy * (X[i * dim + j] - mean[i]) * rstd[i];
                db += dy;
            }
            dgamma[j] += dg;
            dbeta[j] += db;
        }
    }
}

// ---- Softmax ----------------------------------------------------------------

namespace {
inline void softmax_row(double* x, int64_t dim) {
    double mx = x[0];
    for (int64_t j = 1; j < dim; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int64_t j = 0; j < dim; ++j) {
        x[j] = std::exp(x[j] - mx);
        s += x[j];
    }
    const double inv = 1.0 / s;
    for (int64_t j = 0; j < dim; ++j) x[j] *= inv;
}
}  // namespace

void softmax_rows_serial(double* X, int64_t rows, int64_t dim) {
    for (int64_t i = 0; i < rows; ++i) softmax_row(X + i * dim, dim);
}

void softmax_rows(double* X, int64_t rows, int64_t dim) {
#pragma omp parallel for schedule(static) if (parallel() && rows > 8)
    for (int64_t i = 0; i < rows; ++i) softmax_row(X + i * dim, dim);
}

// ---- Optimizer --------------------------------------------------------------

void adamw_update_serial(double* p, const double* g, double* m, double* v, int64_t n, double lr,
                         double beta1, double beta2, double eps, double weight_decay,
                         double bias_c1, double bias_c2) {
    for (int64_t i = 0; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        const double mh = m[i] / bias_c1;
        const double vh = v[i] / bias_c2;
        p[i] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * p[i]);
    }
}

void adamw_update(double* p, const double* g, double* m, double* v, int64_t n, double lr,
                  double beta1, double beta2, double eps, double weight_decay, double bias_c1,
                  double bias_c2) {
#pragma omp parallel for schedule(static) if (parallel() && n > 4096)
    for (int64_t i = 0; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        const double mh = m[i] / bias_c1;
        const double vh = v[i] / bias_c2;
        p[i] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * p[i]);
    }
}

}  // namespace epg::kern
