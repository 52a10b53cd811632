#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowmimic/tensor.hpp"

namespace flowmimic::nn {

// Named trainable tensor. Models own Parameters; graphs reference them.
struct Parameter {
    std::string name;
    Tensor value;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}
};

// Accumulates gradients across several graphs (e.g. per-chunk losses inside
// one batch). Insertion order is preserved so reductions stay deterministic.
class GradBag {
public:
    void add(const Parameter* p, const Tensor& g, double scale);
    const Tensor* find(const Parameter* p) const;
    void clear();

private:
    std::vector<const Parameter*> order_;
    std::map<const Parameter*, Tensor> grads_;
};

// Reverse-mode tape. Build a scalar expression through the op methods, call
// backward() on it, then read per-parameter gradients. Each graph instance
// is single-use: values and closures live until the graph is destroyed.
class Graph {
public:
    struct Node {
        Tensor val;
        Tensor grad;
        bool needs_grad = false;
        Parameter* param = nullptr;
        std::function<void(Graph&, Node&)> back;
    };
    using H = Node*;

    explicit Graph(bool grad_enabled = true) : grad_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_; }

    H param(Parameter& p);
    H constant(Tensor t);

    // y = A * B
    H matmul(H a, H b);
    // y = A * B^T
    H matmul_nt(H a, H b);
    H add(H a, H b);
    H sub(H a, H b);
    H mul(H a, H b);
    // y = s * x + c, elementwise with scalars
    H affine(H x, double s, double c);
    // y[i,:] = x[i,:] + b[0,:]
    H add_rowvec(H x, H b);
    H relu(H x);
    H tanh_(H x);
    H sigmoid(H x);
    // columns [c0, c1) of x
    H slice_cols(H x, int c0, int c1);
    H concat_cols(const std::vector<H>& xs);
    // y[i,:] = table[ids[i],:]
    H gather_rows(H table, std::vector<int> ids);
    // y[i,0] = x[i, cols[i]]
    H pick_cols(H x, std::vector<int> cols);
    // row-wise softmax; entries with mask==0 come out exactly 0 and are
    // excluded from the normalization. mask may be empty (no masking).
    H softmax_rows(H x, std::vector<unsigned char> mask = {});
    // row-wise log-softmax; masked entries come out 0 by convention and must
    // only ever be used multiplied by the matching masked softmax (which is 0
    // there). mask may be empty.
    H log_softmax_rows(H x, std::vector<unsigned char> mask = {});
    H layernorm(H x, H gain, H bias, double eps = 1e-5);
    // elementwise min with subgradient routed to the smaller input
    H min_elem(H a, H b);
    H sum_rows(H x);   // [m x n] -> [m x 1]
    H sum_all(H x);    // -> [1 x 1]
    H mean_all(H x);   // -> [1 x 1]

    // Fused GRU over a time-major stacked input sequence x_seq [T*B x in].
    // Returns the final hidden state [B x hidden]. Samples stop updating at
    // their own length (earlier final states are carried through unchanged),
    // so the result for each sample is independent of the batch around it.
    // Gates follow the convention
    //   z = sigm(xWz + bxz + hUz + bhz)
    //   r = sigm(xWr + bxr + hUr + bhr)
    //   n = tanh(xWn + bxn + r . (hUn + bhn))
    //   h' = (1 - z) . n + z . h
    // with W [in x 3H], U [H x 3H], bx/bh [1 x 3H] in z|r|n column order.
    H gru_final(H x_seq, int T, int B, H W, H U, H bx, H bh, const std::vector<int>& lens);

    void backward(H root);
    // Gradient of the last backward() wrt p; zeros if p was not touched.
    Tensor grad_of(const Parameter& p) const;
    void accumulate_grads(GradBag& bag, double scale = 1.0) const;

private:
    H fresh(Tensor val);
    void ensure_grad(Node* n);
    static void check_same_shape(H a, H b, const char* what);

    std::deque<Node> nodes_;
    std::map<const Parameter*, Node*> leaves_;
    bool grad_ = true;
    bool ran_backward_ = false;
};

// Central-difference gradient checker. Rebuilds the expression through
// `build` for each probe, so the closure must be deterministic.
struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

GradCheckReport grad_check(const std::function<Graph::H(Graph&)>& build,
                           const std::vector<Parameter*>& params, double eps = 1e-5);

}  // namespace flowmimic::nn
