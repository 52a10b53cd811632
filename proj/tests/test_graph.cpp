#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "flowmimic/checkpoint.hpp"
#include "flowmimic/graph.hpp"
#include "flowmimic/kernels.hpp"
#include "flowmimic/optim.hpp"
#include "flowmimic/rng.hpp"

using namespace flowmimic;
using namespace flowmimic::nn;

namespace {

Parameter make_param(const std::string& name, int r, int c, Rng& rng, double scale = 0.5) {
    Tensor t(r, c);
    for (auto& x : t.data) x = rng.uniform(-scale, scale);
    return Parameter(name, std::move(t));
}

}  // namespace

TEST_CASE("gradient of a quadratic matches central differences almost exactly") {
    Rng rng(1);
    Parameter x = make_param("x", 3, 4, rng);
    auto build = [&](Graph& g) {
        Graph::H h = g.param(x);
        return g.sum_all(g.mul(h, h));
    };
    auto rep = grad_check(build, {&x}, 1e-5);
    // central differences are exact for quadratics up to rounding
    CHECK(rep.max_rel_err < 1e-9);
}

TEST_CASE("matmul chain with bias, relu, tanh and sigmoid passes the gradient check") {
    Rng rng(2);
    Parameter w1 = make_param("w1", 4, 6, rng);
    Parameter b1 = make_param("b1", 1, 6, rng);
    Parameter w2 = make_param("w2", 6, 3, rng);
    Parameter x = make_param("x", 5, 4, rng);
    auto build = [&](Graph& g) {
        Graph::H h = g.relu(g.add_rowvec(g.matmul(g.param(x), g.param(w1)), g.param(b1)));
        h = g.tanh_(g.matmul(h, g.param(w2)));
        h = g.sigmoid(h);
        return g.mean_all(h);
    };
    auto rep = grad_check(build, {&w1, &b1, &w2, &x}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("masked softmax and log-softmax pass the gradient check") {
    Rng rng(3);
    Parameter x = make_param("x", 4, 5, rng, 1.0);
    std::vector<unsigned char> mask(20, 1);
    mask[2] = mask[7] = mask[13] = mask[19] = 0;
    Parameter w = make_param("w", 5, 1, rng);
    auto build = [&](Graph& g) {
        Graph::H p = g.softmax_rows(g.param(x), mask);
        Graph::H lp = g.log_softmax_rows(g.param(x), mask);
        // entropy-like contraction keeps the masked slots multiplied by zero
        Graph::H s = g.sum_all(g.mul(p, lp));
        return g.add(s, g.mean_all(g.matmul(p, g.param(w))));
    };
    auto rep = grad_check(build, {&x, &w}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("layernorm passes the gradient check") {
    Rng rng(4);
    Parameter x = make_param("x", 6, 8, rng, 1.0);
    Parameter gain = make_param("g", 1, 8, rng, 1.0);
    Parameter bias = make_param("b", 1, 8, rng, 1.0);
    auto build = [&](Graph& g) {
        Graph::H y = g.layernorm(g.param(x), g.param(gain), g.param(bias));
        return g.sum_all(g.mul(y, y));
    };
    auto rep = grad_check(build, {&x, &gain, &bias}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gather, pick, concat, slice and min compose and pass the gradient check") {
    Rng rng(5);
    Parameter table = make_param("emb", 7, 4, rng);
    Parameter a = make_param("a", 3, 4, rng);
    Parameter b = make_param("b", 3, 4, rng);
    auto build = [&](Graph& g) {
        Graph::H rows = g.gather_rows(g.param(table), {0, 4, 6});
        Graph::H m = g.min_elem(g.param(a), g.param(b));
        Graph::H cat = g.concat_cols({rows, m});
        Graph::H left = g.slice_cols(cat, 0, 4);
        Graph::H picked = g.pick_cols(g.add(left, m), {1, 0, 3});
        return g.sum_all(picked);
    };
    auto rep = grad_check(build, {&table, &a, &b}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("single-head attention matches an independent scalar evaluation") {
    // softmax(Q K^T / sqrt(d)) V at d = 2 with identity Q, K, V
    Graph g;
    Tensor eye(2, 2);
    eye.at(0, 0) = eye.at(1, 1) = 1.0;
    Graph::H q = g.constant(eye), k = g.constant(eye), v = g.constant(eye);
    Graph::H scores = g.affine(g.matmul_nt(q, k), 1.0 / std::sqrt(2.0), 0.0);
    Graph::H attn = g.matmul(g.softmax_rows(scores), v);

    const double s = 1.0 / std::sqrt(2.0);
    const double hot = std::exp(s) / (std::exp(s) + 1.0);
    CHECK(attn->val.at(0, 0) == doctest::Approx(hot).epsilon(1e-12));
    CHECK(attn->val.at(0, 1) == doctest::Approx(1.0 - hot).epsilon(1e-12));
    CHECK(attn->val.at(1, 0) == doctest::Approx(1.0 - hot).epsilon(1e-12));
    CHECK(attn->val.at(1, 1) == doctest::Approx(hot).epsilon(1e-12));
}

TEST_CASE("attention with a single unmasked key returns that key's value row") {
    Rng rng(6);
    Tensor qv(3, 4), kv(5, 4), vv(5, 4);
    for (auto* t : {&qv, &kv, &vv})
        for (auto& x : t->data) x = rng.uniform(-1.0, 1.0);
    Graph g;
    Graph::H scores = g.affine(g.matmul_nt(g.constant(qv), g.constant(kv)), 0.5, 0.0);
    std::vector<unsigned char> mask(15, 0);
    for (int i = 0; i < 3; ++i) mask[static_cast<size_t>(i) * 5 + 2] = 1;  // only key 2 visible
    Graph::H out = g.matmul(g.softmax_rows(scores, mask), g.constant(vv));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) CHECK(out->val.at(i, j) == doctest::Approx(vv.at(2, j)).epsilon(1e-12));
}

TEST_CASE("attention composition passes the gradient check") {
    Rng rng(7);
    Parameter q = make_param("q", 3, 4, rng);
    Parameter k = make_param("k", 5, 4, rng);
    Parameter v = make_param("v", 5, 4, rng);
    std::vector<unsigned char> mask(15, 1);
    mask[4] = mask[9] = 0;
    auto build = [&](Graph& g) {
        Graph::H scores = g.affine(g.matmul_nt(g.param(q), g.param(k)), 0.5, 0.0);
        Graph::H out = g.matmul(g.softmax_rows(scores, mask), g.param(v));
        return g.sum_all(g.mul(out, out));
    };
    auto rep = grad_check(build, {&q, &k, &v}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("recurrent cell over five steps passes the gradient check") {
    Rng rng(8);
    const int T = 5, B = 3, in = 4, hd = 3;
    Parameter x = make_param("x", T * B, in, rng);
    Parameter w = make_param("w", in, 3 * hd, rng);
    Parameter u = make_param("u", hd, 3 * hd, rng);
    Parameter bx = make_param("bx", 1, 3 * hd, rng);
    Parameter bh = make_param("bh", 1, 3 * hd, rng);
    std::vector<int> lens = {5, 2, 4};  // ragged batch exercises the carry path
    auto build = [&](Graph& g) {
        Graph::H h = g.gru_final(g.param(x), T, B, g.param(w), g.param(u), g.param(bx), g.param(bh), lens);
        return g.sum_all(g.mul(h, h));
    };
    auto rep = grad_check(build, {&x, &w, &u, &bx, &bh}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gru final state per sample does not depend on the batch around it") {
    Rng rng(9);
    const int T = 6, in = 4, hd = 5;
    Parameter w = make_param("w", in, 3 * hd, rng);
    Parameter u = make_param("u", hd, 3 * hd, rng);
    Parameter bx = make_param("bx", 1, 3 * hd, rng);
    Parameter bh = make_param("bh", 1, 3 * hd, rng);

    Tensor xa(T, in), xb(T, in);
    for (auto& v : xa.data) v = rng.uniform(-1, 1);
    for (auto& v : xb.data) v = rng.uniform(-1, 1);

    // run sample A alone with its true length 4
    Graph g1(false);
    Graph::H alone =
        g1.gru_final(g1.constant(xa), T, 1, g1.param(w), g1.param(u), g1.param(bx), g1.param(bh), {4});

    // run A next to B (length 6); time-major interleave
    Tensor xab(T * 2, in);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < in; ++j) {
            xab.at(t * 2 + 0, j) = xa.at(t, j);
            xab.at(t * 2 + 1, j) = xb.at(t, j);
        }
    Graph g2(false);
    Graph::H both =
        g2.gru_final(g2.constant(xab), T, 2, g2.param(w), g2.param(u), g2.param(bx), g2.param(bh), {4, 6});

    for (int j = 0; j < hd; ++j) CHECK(alone->val.at(0, j) == both->val.at(0, j));
}

TEST_CASE("adam first step moves by lr times the sign for a constant gradient") {
    Parameter p("p", Tensor::full(1, 3, 0.0));
    Adam opt(AdamConfig{.lr = 0.01});
    GradBag bag;
    Tensor g(1, 3);
    g.at(0, 0) = 0.7;
    g.at(0, 1) = -2.5;
    g.at(0, 2) = 0.0;
    bag.add(&p, g, 1.0);
    opt.step({&p}, bag);
    // bias-corrected first step: lr * g / (|g| + eps)
    CHECK(p.value.at(0, 0) == doctest::Approx(-0.01 * 0.7 / (0.7 + 1e-8)).epsilon(1e-12));
    CHECK(p.value.at(0, 1) == doctest::Approx(0.01 * 2.5 / (2.5 + 1e-8)).epsilon(1e-12));
    CHECK(p.value.at(0, 2) == 0.0);  // zero gradient leaves the weight alone
}

TEST_CASE("adam converges on a simple quadratic") {
    Parameter p("p", Tensor::full(1, 1, 5.0));
    Adam opt(AdamConfig{.lr = 0.05});
    for (int i = 0; i < 2000; ++i) {
        GradBag bag;
        Tensor g(1, 1);
        g.at(0, 0) = 2.0 * (p.value.at(0, 0) - 1.5);
        bag.add(&p, g, 1.0);
        opt.step({&p}, bag);
    }
    CHECK(p.value.at(0, 0) == doctest::Approx(1.5).epsilon(1e-4));
}

TEST_CASE("grad bag accumulates scaled gradients per parameter") {
    Parameter p("p", Tensor::full(2, 2, 0.0));
    GradBag bag;
    bag.add(&p, Tensor::full(2, 2, 1.0), 0.5);
    bag.add(&p, Tensor::full(2, 2, 2.0), 0.25);
    const Tensor* g = bag.find(&p);
    REQUIRE(g != nullptr);
    for (double v : g->data) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("checkpoint round-trips bit-exactly including awkward doubles") {
    Tensor t(2, 3);
    t.data = {0.1, -0.0, 1e-310, 3.141592653589793, -7.25e300, 123456789.123456789};
    Tensor u(1, 2);
    u.data = {std::nextafter(1.0, 2.0), -0.3333333333333333};
    const std::string prefix = (std::filesystem::temp_directory_path() / "fm_ckpt_test").string();
    save_tensors(prefix, {{"t", &t}, {"u", &u}});
    auto loaded = load_tensors(prefix);
    REQUIRE(loaded.count("t") == 1);
    REQUIRE(loaded.count("u") == 1);
    for (size_t i = 0; i < t.size(); ++i) CHECK(loaded["t"].data[i] == t.data[i]);
    for (size_t i = 0; i < u.size(); ++i) CHECK(loaded["u"].data[i] == u.data[i]);
    std::filesystem::remove(prefix + ".json");
    std::filesystem::remove(prefix + ".bin");
}

TEST_CASE("checkpoint load rejects a corrupted blob") {
    Tensor t(1, 4);
    t.data = {1.0, 2.0, 3.0, 4.0};
    const std::string prefix = (std::filesystem::temp_directory_path() / "fm_ckpt_corrupt").string();
    save_tensors(prefix, {{"t", &t}});
    {
        std::FILE* f = std::fopen((prefix + ".bin").c_str(), "r+b");
        REQUIRE(f != nullptr);
        std::fseek(f, 3, SEEK_SET);
        std::fputc(0x5a, f);
        std::fclose(f);
    }
    CHECK_THROWS_AS((void)load_tensors(prefix), CheckpointError);
    std::filesystem::remove(prefix + ".json");
    std::filesystem::remove(prefix + ".bin");
}

TEST_CASE("two identically seeded backward passes produce bitwise equal gradients") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Parameter w = make_param("w", 6, 6, rng);
        Parameter x = make_param("x", 4, 6, rng);
        Graph g;
        Graph::H y = g.matmul(g.param(x), g.param(w));
        Graph::H p = g.softmax_rows(y);
        g.backward(g.sum_all(g.mul(p, y)));
        return g.grad_of(w);
    };
    Tensor g1 = run(99), g2 = run(99);
    for (size_t i = 0; i < g1.size(); ++i) CHECK(g1.data[i] == g2.data[i]);
}
