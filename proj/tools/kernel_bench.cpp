#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include "flowmimic/kernels.hpp"
#include "flowmimic/rng.hpp"

using namespace flowmimic;
using nn::kernels::layernorm_rows;
using nn::kernels::layernorm_rows_serial;
using nn::kernels::matmul;
using nn::kernels::matmul_nt;
using nn::kernels::matmul_nt_serial;
using nn::kernels::matmul_serial;
using nn::kernels::matmul_tn;
using nn::kernels::matmul_tn_serial;
using nn::kernels::softmax_rows;
using nn::kernels::softmax_rows_serial;

namespace {

std::vector<double> random_matrix(size_t count, Rng& rng) {
    std::vector<double> m(count);
    for (double& v : m) v = rng.uniform(-1.0, 1.0);
    return m;
}

double time_best_ms(int reps, const std::function<void()>& fn) {
    fn();  // warm the caches before timing
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
    return worst;
}

void row(const char* name, const std::string& shape, double serial_ms, double parallel_ms,
         double diff) {
    std::printf("%-16s %-14s %10.3f %12.3f %9.2fx %10.1e\n", name, shape.c_str(), serial_ms,
                parallel_ms, serial_ms / parallel_ms, diff);
}

}  // namespace

int main(int argc, char** argv) {
    const int reps = argc > 1 ? std::atoi(argv[1]) : 5;
    if (reps < 1) {
        std::fprintf(stderr, "usage: %s [reps >= 1]\n", argv[0]);
        return 2;
    }

    Rng rng(12);
    std::printf("threads: %d, reps per timing: %d (best shown)\n\n", omp_get_max_threads(), reps);
    std::printf("%-16s %-14s %10s %12s %10s %10s\n", "kernel", "shape", "serial_ms",
                "parallel_ms", "speedup", "max|diff|");

    const struct {
        int m, k, n;
    } mm_shapes[] = {{128, 64, 64}, {512, 64, 256}, {512, 512, 128}};

    for (const auto& s : mm_shapes) {
        const auto A = random_matrix(static_cast<size_t>(s.m) * s.k, rng);
        const auto B = random_matrix(static_cast<size_t>(s.k) * s.n, rng);
        std::vector<double> C1(static_cast<size_t>(s.m) * s.n), C2(C1.size());
        const std::string shape = std::to_string(s.m) + "x" + std::to_string(s.k) + "x" +
                                  std::to_string(s.n);
        const double t1 =
            time_best_ms(reps, [&] { matmul_serial(A.data(), B.data(), C1.data(), s.m, s.k, s.n); });
        const double t2 =
            time_best_ms(reps, [&] { matmul(A.data(), B.data(), C2.data(), s.m, s.k, s.n); });
        row("matmul", shape, t1, t2, max_abs_diff(C1, C2));
    }

    {
        const int k = 512, m = 128, n = 256;
        const auto A = random_matrix(static_cast<size_t>(k) * m, rng);
        const auto B = random_matrix(static_cast<size_t>(k) * n, rng);
        std::vector<double> C1(static_cast<size_t>(m) * n), C2(C1.size());
        const double t1 = time_best_ms(
            reps, [&] { matmul_tn_serial(A.data(), B.data(), C1.data(), k, m, n); });
        const double t2 =
            time_best_ms(reps, [&] { matmul_tn(A.data(), B.data(), C2.data(), k, m, n); });
        row("matmul_tn", "512x128x256", t1, t2, max_abs_diff(C1, C2));
    }

    {
        const int m = 512, k = 128, n = 256;
        const auto A = random_matrix(static_cast<size_t>(m) * k, rng);
        const auto B = random_matrix(static_cast<size_t>(n) * k, rng);
        std::vector<double> C1(static_cast<size_t>(m) * n), C2(C1.size());
        const double t1 = time_best_ms(
            reps, [&] { matmul_nt_serial(A.data(), B.data(), C1.data(), m, k, n); });
        const double t2 =
            time_best_ms(reps, [&] { matmul_nt(A.data(), B.data(), C2.data(), m, k, n); });
        row("matmul_nt", "512x128x256", t1, t2, max_abs_diff(C1, C2));
    }

    {
        const int m = 2048, n = 512;
        const auto X = random_matrix(static_cast<size_t>(m) * n, rng);
        std::vector<unsigned char> mask(X.size());
        for (size_t i = 0; i < mask.size(); ++i) mask[i] = (i % 7 != 0) ? 1 : 0;
        std::vector<double> Y1(X.size()), Y2(X.size());
        const double t1 = time_best_ms(
            reps, [&] { softmax_rows_serial(X.data(), mask.data(), Y1.data(), m, n); });
        const double t2 =
            time_best_ms(reps, [&] { softmax_rows(X.data(), mask.data(), Y2.data(), m, n); });
        row("softmax_rows", "2048x512", t1, t2, max_abs_diff(Y1, Y2));
    }

    {
        const int m = 2048, n = 512;
        const auto X = random_matrix(static_cast<size_t>(m) * n, rng);
        const auto gain = random_matrix(static_cast<size_t>(n), rng);
        const auto bias = random_matrix(static_cast<size_t>(n), rng);
        std::vector<double> Y1(X.size()), Y2(X.size());
        std::vector<double> mu1(m), var1(m), mu2(m), var2(m);
        const double t1 = time_best_ms(reps, [&] {
            layernorm_rows_serial(X.data(), gain.data(), bias.data(), 1e-5, Y1.data(), mu1.data(),
                                  var1.data(), m, n);
        });
        const double t2 = time_best_ms(reps, [&] {
            layernorm_rows(X.data(), gain.data(), bias.data(), 1e-5, Y2.data(), mu2.data(),
                           var2.data(), m, n);
        });
        row("layernorm_rows", "2048x512", t1, t2, max_abs_diff(Y1, Y2));
    }

    return 0;
}
