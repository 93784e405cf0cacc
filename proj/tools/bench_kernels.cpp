// Compares the serial reference kernels against the OpenMP versions: checks
// agreement, reports throughput for both.
#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include "epg/core/kernels.hpp"
#include "epg/core/rng.hpp"

using namespace epg;

namespace {

double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

double time_loop(const std::function<void()>& fn, double budget_s = 0.4) {
    fn();  // warm
    int iters = 1;
    double t = 0.0;
    for (;;) {
        const double t0 = now_s();
        for (int i = 0; i < iters; ++i) fn();
        t = now_s() - t0;
        if (t > budget_s || iters > (1 << 20)) break;
        iters *= 2;
    }
    return t / iters;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void bench_gemm(const char* name,
                void (*serial)(const double*, const double*, double*, int64_t, int64_t, int64_t, bool),
                void (*par)(const double*, const double*, double*, int64_t, int64_t, int64_t, bool),
                int64_t M, int64_t K, int64_t N) {
    Rng rng(7);
    std::vector<double> A(static_cast<size_t>(M * K)), B(static_cast<size_t>(K * N));
    std::vector<double> C1(static_cast<size_t>(M * N)), C2(C1);
    for (auto& v : A) v = rng.normal();
    for (auto& v : B) v = rng.normal();
    serial(A.data(), B.data(), C1.data(), M, K, N, false);
    par(A.data(), B.data(), C2.data(), M, K, N, false);
    const double diff = max_abs_diff(C1, C2);

    const double flops = 2.0 * static_cast<double>(M) * static_cast<double>(K) * static_cast<double>(N);
    const double ts = time_loop([&] { serial(A.data(), B.data(), C1.data(), M, K, N, false); });
    const double tp = time_loop([&] { par(A.data(), B.data(), C2.data(), M, K, N, false); });
    std::printf("%-10s M=%-5lld K=%-4lld N=%-4lld  serial %7.2f GF/s  omp %7.2f GF/s  x%.2f  max|d|=%.1e\n",
                name, static_cast<long long>(M), static_cast<long long>(K), static_cast<long long>(N),
                flops / ts / 1e9, flops / tp / 1e9, ts / tp, diff);
}

}  // namespace

int main() {
    std::printf("threads: %d\n", omp_get_max_threads());
    kern::set_parallel(true);

    // Shapes that dominate training: [B*T, D] x [D, kD] token GEMMs.
    bench_gemm("gemm_nn", kern::gemm_nn_serial, kern::gemm_nn, 2432, 32, 128);
    bench_gemm("gemm_nn", kern::gemm_nn_serial, kern::gemm_nn, 4288, 192, 768);
    bench_gemm("gemm_nt", kern::gemm_nt_serial, kern::gemm_nt, 2432, 128, 32);
    bench_gemm("gemm_tn", kern::gemm_tn_serial, kern::gemm_tn, 192, 4288, 768);

    {
        const int64_t rows = 4288, dim = 192;
        Rng rng(3);
        std::vector<double> X(static_cast<size_t>(rows * dim)), g(static_cast<size_t>(dim), 1.0),
            b(static_cast<size_t>(dim), 0.0);
        for (auto& v : X) v = rng.normal();
        std::vector<double> Y1(X.size()), Y2(X.size()), mean(static_cast<size_t>(rows)),
            rstd(static_cast<size_t>(rows));
        kern::layernorm_fwd_serial(X.data(), g.data(), b.data(), Y1.data(), mean.data(), rstd.data(),
                                   rows, dim, 1e-6);
        kern::layernorm_fwd(X.data(), g.data(), b.data(), Y2.data(), mean.data(), rstd.data(), rows,
                            dim, 1e-6);
        const double diff = max_abs_diff(Y1, Y2);
        const double ts = time_loop([&] {
            kern::layernorm_fwd_serial(X.data(), g.data(), b.data(), Y1.data(), mean.data(),
                                       rstd.data(), rows, dim, 1e-6);
        });
        const double tp = time_loop([&] {
            kern::layernorm_fwd(X.data(), g.data(), b.data(), Y2.data(), mean.data(), rstd.data(),
                                rows, dim, 1e-6);
        });
        std::printf("%-10s rows=%-5lld dim=%-4lld serial %7.2f GB/s  omp %7.2f GB/s  x%.2f  max|d|=%.1e\n",
                    "layernorm", static_cast<long long>(rows), static_cast<long long>(dim),
                    16.0 * static_cast<double>(rows * dim) / ts / 1e9,
                    16.0 * static_cast<double>(rows * dim) / tp / 1e9, ts / tp, diff);
    }

    {
        const int64_t n = 1 << 22;
        Rng rng(5);
        std::vector<double> x(static_cast<size_t>(n));
        for (auto& v : x) v = rng.normal();
        const double s1 = kern::sumsq_serial(x.data(), n);
        const double s2 = kern::sumsq(x.data(), n);
        const double ts = time_loop([&] { (void)kern::sumsq_serial(x.data(), n); });
        const double tp = time_loop([&] { (void)kern::sumsq(x.data(), n); });
        std::printf("%-10s n=%lld         serial %7.2f GB/s  omp %7.2f GB/s  x%.2f  |d|=%.1e\n",
                    "sumsq", static_cast<long long>(n), 8.0 * static_cast<double>(n) / ts / 1e9,
                    8.0 * static_cast<double>(n) / tp / 1e9, ts / tp, std::abs(s1 - s2));
    }
    return 0;
}
