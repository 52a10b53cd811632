#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "flowmimic/graph.hpp"
#include "flowmimic/rng.hpp"
#include "flowmimic/tensor.hpp"

namespace flowmimic::nn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Parameters are always visited in the order the
// caller passes them, never in hash order, to keep updates reproducible.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(const std::vector<Parameter*>& params, const GradBag& grads);
    void step(const std::vector<Parameter*>& params, const Graph& g);

    // Single-scalar convenience used by the temperature update.
    void step_scalar(Parameter& p, double grad);

    const AdamConfig& config() const { return cfg_; }
    int64_t steps() const { return t_; }

private:
    void apply(Parameter& p, const Tensor& grad);

    struct Slot {
        Tensor m, v;
    };
    AdamConfig cfg_;
    std::map<const Parameter*, Slot> slots_;
    int64_t t_ = 0;
};

// Weight initialization: Xavier-uniform for projection matrices, zeros for
// biases, N(0, 0.02) for embedding tables.
void init_xavier(Tensor& w, Rng& rng);
void init_embedding(Tensor& w, Rng& rng, double stddev = 0.02);

}  // namespace flowmimic::nn
