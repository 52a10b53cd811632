#include "flowmimic/optim.hpp"

#include <cmath>

namespace flowmimic::nn {

void Adam::apply(Parameter& p, const Tensor& grad) {
    Slot& s = slots_[&p];
    if (s.m.size() != p.value.size()) {
        s.m = Tensor(p.value.rows, p.value.cols);
        s.v = Tensor(p.value.rows, p.value.cols);
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < p.value.size(); ++i) {
        const double g = grad.data[i];
        s.m.data[i] = cfg_.beta1 * s.m.data[i] + (1.0 - cfg_.beta1) * g;
        s.v.data[i] = cfg_.beta2 * s.v.data[i] + (1.0 - cfg_.beta2) * g * g;
        const double mh = s.m.data[i] / bc1;
        const double vh = s.v.data[i] / bc2;
        p.value.data[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
}

void Adam::step(const std::vector<Parameter*>& params, const GradBag& grads) {
    ++t_;
    for (Parameter* p : params) {
        const Tensor* g = grads.find(p);
        if (g) apply(*p, *g);
    }
}

void Adam::step(const std::vector<Parameter*>& params, const Graph& g) {
    ++t_;
    for (Parameter* p : params) apply(*p, g.grad_of(*p));
}

void Adam::step_scalar(Parameter& p, double grad) {
    ++t_;
    Tensor g(1, 1);
    g.at(0, 0) = grad;
    apply(p, g);
}

void init_xavier(Tensor& w, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows + w.cols));
    for (auto& x : w.data) x = rng.uniform(-limit, limit);
}

void init_embedding(Tensor& w, Rng& rng, double stddev) {
    for (auto& x : w.data) x = rng.normal(0.0, stddev);
}

}  // namespace flowmimic::nn
