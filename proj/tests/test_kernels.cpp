#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "flowmimic/kernels.hpp"
#include "flowmimic/rng.hpp"
#include "flowmimic/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace flowmimic;
using namespace flowmimic::nn;
namespace K = flowmimic::nn::kernels;

namespace {

Tensor random_tensor(int r, int c, Rng& rng) {
    Tensor t(r, c);
    for (auto& x : t.data) x = rng.uniform(-2.0, 2.0);
    return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("matmul matches a naive triple loop") {
    Rng rng(7);
    Tensor a = random_tensor(5, 4, rng), b = random_tensor(4, 3, rng);
    Tensor c(5, 3), ref(5, 3);
    K::matmul_serial(a.ptr(), b.ptr(), c.ptr(), 5, 4, 3);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int p = 0; p < 4; ++p) acc += a.at(i, p) * b.at(p, j);
            ref.at(i, j) = acc;
        }
    for (size_t i = 0; i < c.size(); ++i) CHECK(c.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-14));
}

TEST_CASE("transposed variants agree with explicit transposition") {
    Rng rng(11);
    Tensor a = random_tensor(6, 4, rng), b = random_tensor(6, 5, rng);
    // A^T * B
    Tensor c(4, 5);
    K::matmul_tn_serial(a.ptr(), b.ptr(), c.ptr(), 6, 4, 5);
    Tensor at(4, 6);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j) at.at(j, i) = a.at(i, j);
    Tensor ref(4, 5);
    K::matmul_serial(at.ptr(), b.ptr(), ref.ptr(), 4, 6, 5);
    for (size_t i = 0; i < c.size(); ++i) CHECK(c.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-14));

    // A * B^T
    Tensor d = random_tensor(3, 6, rng);
    Tensor e(4, 3);
    K::matmul_nt_serial(at.ptr(), d.ptr(), e.ptr(), 4, 6, 3);
    Tensor dt(6, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 6; ++j) dt.at(j, i) = d.at(i, j);
    Tensor ref2(4, 3);
    K::matmul_serial(at.ptr(), dt.ptr(), ref2.ptr(), 4, 6, 3);
    for (size_t i = 0; i < e.size(); ++i) CHECK(e.data[i] == doctest::Approx(ref2.data[i]).epsilon(1e-14));
}

TEST_CASE("parallel kernels are bit-identical to the serial references") {
    Rng rng(13);
#ifdef _OPENMP
    omp_set_num_threads(4);
#endif
    K::set_parallel(true);
    K::set_parallel_threshold(1);  // force the parallel path even for small work

    Tensor a = random_tensor(33, 17, rng), b = random_tensor(17, 29, rng);
    Tensor c1(33, 29), c2(33, 29);
    K::matmul_serial(a.ptr(), b.ptr(), c1.ptr(), 33, 17, 29);
    K::matmul(a.ptr(), b.ptr(), c2.ptr(), 33, 17, 29);
    CHECK(bitwise_equal(c1, c2));

    Tensor tn1(17, 29), tn2(17, 29);
    Tensor a2 = random_tensor(33, 17, rng), b2 = random_tensor(33, 29, rng);
    K::matmul_tn_serial(a2.ptr(), b2.ptr(), tn1.ptr(), 33, 17, 29);
    K::matmul_tn(a2.ptr(), b2.ptr(), tn2.ptr(), 33, 17, 29);
    CHECK(bitwise_equal(tn1, tn2));

    Tensor nt1(33, 21), nt2(33, 21);
    Tensor b3 = random_tensor(21, 17, rng);
    K::matmul_nt_serial(a.ptr(), b3.ptr(), nt1.ptr(), 33, 17, 21);
    K::matmul_nt(a.ptr(), b3.ptr(), nt2.ptr(), 33, 17, 21);
    CHECK(bitwise_equal(nt1, nt2));

    Tensor x = random_tensor(25, 19, rng);
    std::vector<unsigned char> mask(x.size(), 1);
    for (size_t i = 0; i < mask.size(); i += 3) mask[i] = 0;
    Tensor s1(25, 19), s2(25, 19);
    K::softmax_rows_serial(x.ptr(), mask.data(), s1.ptr(), 25, 19);
    K::softmax_rows(x.ptr(), mask.data(), s2.ptr(), 25, 19);
    CHECK(bitwise_equal(s1, s2));

    Tensor gain = random_tensor(1, 19, rng), bias = random_tensor(1, 19, rng);
    Tensor y1(25, 19), y2(25, 19);
    std::vector<double> mu1(25), mu2(25), r1(25), r2(25);
    K::layernorm_rows_serial(x.ptr(), gain.ptr(), bias.ptr(), 1e-5, y1.ptr(), mu1.data(), r1.data(), 25, 19);
    K::layernorm_rows(x.ptr(), gain.ptr(), bias.ptr(), 1e-5, y2.ptr(), mu2.data(), r2.data(), 25, 19);
    CHECK(bitwise_equal(y1, y2));

    K::set_parallel_threshold(1u << 16);
}

TEST_CASE("softmax rows sum to one and respect the mask") {
    Rng rng(17);
    Tensor x = random_tensor(40, 12, rng);
    std::vector<unsigned char> mask(x.size(), 1);
    for (int i = 0; i < 40; ++i)
        for (int j = 0; j < 12; ++j)
            if ((i + j) % 4 == 0) mask[static_cast<size_t>(i) * 12 + j] = 0;
    // keep at least one valid entry per row
    for (int i = 0; i < 40; ++i) mask[static_cast<size_t>(i) * 12 + 1] = 1;
    Tensor y(40, 12);
    K::softmax_rows_serial(x.ptr(), mask.data(), y.ptr(), 40, 12);
    for (int i = 0; i < 40; ++i) {
        double sum = 0.0;
        for (int j = 0; j < 12; ++j) {
            if (!mask[static_cast<size_t>(i) * 12 + j]) CHECK(y.at(i, j) == 0.0);
            CHECK(y.at(i, j) >= 0.0);
            sum += y.at(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("softmax is invariant to a constant shift of the logits") {
    Rng rng(19);
    Tensor x = random_tensor(8, 9, rng);
    Tensor xs = x;
    for (auto& v : xs.data) v += 123.25;
    Tensor y1(8, 9), y2(8, 9);
    K::softmax_rows_serial(x.ptr(), nullptr, y1.ptr(), 8, 9);
    K::softmax_rows_serial(xs.ptr(), nullptr, y2.ptr(), 8, 9);
    for (size_t i = 0; i < y1.size(); ++i) CHECK(y1.data[i] == doctest::Approx(y2.data[i]).epsilon(1e-12));
}

TEST_CASE("a hugely negative masked-out logit gets exactly zero probability") {
    Tensor x(1, 3);
    x.at(0, 0) = 1.0;
    x.at(0, 1) = -1e9;
    x.at(0, 2) = 2.0;
    Tensor y(1, 3);
    K::softmax_rows_serial(x.ptr(), nullptr, y.ptr(), 1, 3);
    CHECK(y.at(0, 1) == 0.0);
    CHECK(y.at(0, 0) + y.at(0, 2) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("layernorm output has zero mean and unit variance before affine") {
    Rng rng(23);
    Tensor x = random_tensor(10, 16, rng);
    Tensor gain = Tensor::full(1, 16, 1.0), bias = Tensor::zeros(1, 16);
    Tensor y(10, 16);
    std::vector<double> mu(10), rstd(10);
    K::layernorm_rows_serial(x.ptr(), gain.ptr(), bias.ptr(), 1e-12, y.ptr(), mu.data(), rstd.data(), 10, 16);
    for (int i = 0; i < 10; ++i) {
        double m = 0.0, v = 0.0;
        for (int j = 0; j < 16; ++j) m += y.at(i, j);
        m /= 16;
        for (int j = 0; j < 16; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m);
        v /= 16;
        CHECK(m == doctest::Approx(0.0).epsilon(1e-10));
        CHECK(std::abs(v - 1.0) < 1e-6);
    }
}

TEST_CASE("rng streams are reproducible and forks are independent") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42);
    Rng f1 = c.fork(1), f2 = c.fork(2);
    CHECK(f1.next_u64() != f2.next_u64());
    // forking must not disturb the parent stream
    Rng d(42);
    (void)d.fork(9);
    Rng e(42);
    CHECK(d.next_u64() == e.next_u64());
}

TEST_CASE("uniform_int covers its inclusive range roughly evenly") {
    Rng rng(5);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) counts[static_cast<size_t>(rng.uniform_int(0, 6))]++;
    for (int j = 0; j < 7; ++j) CHECK(std::abs(counts[static_cast<size_t>(j)] - 10000) < 500);
}
