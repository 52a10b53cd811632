#include "flowmimic/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "flowmimic/kernels.hpp"

namespace flowmimic::nn {

namespace {

void add_into(Tensor& dst, const Tensor& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

void GradBag::add(const Parameter* p, const Tensor& g, double scale) {
    auto it = grads_.find(p);
    if (it == grads_.end()) {
        order_.push_back(p);
        Tensor t(g.rows, g.cols);
        for (size_t i = 0; i < g.size(); ++i) t.data[i] = g.data[i] * scale;
        grads_.emplace(p, std::move(t));
        return;
    }
    for (size_t i = 0; i < g.size(); ++i) it->second.data[i] += g.data[i] * scale;
}

const Tensor* GradBag::find(const Parameter* p) const {
    auto it = grads_.find(p);
    return it == grads_.end() ? nullptr : &it->second;
}

void GradBag::clear() {
    order_.clear();
    grads_.clear();
}

Graph::H Graph::fresh(Tensor val) {
    nodes_.emplace_back();
    nodes_.back().val = std::move(val);
    return &nodes_.back();
}

void Graph::ensure_grad(Node* n) {
    if (n->grad.rows != n->val.rows || n->grad.cols != n->val.cols)
        n->grad = Tensor(n->val.rows, n->val.cols);
}

void Graph::check_same_shape(H a, H b, const char* what) {
    if (!a->val.same_shape(b->val))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a->val.shape_str() +
                                    " vs " + b->val.shape_str());
}

Graph::H Graph::param(Parameter& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return it->second;
    H n = fresh(p.value);
    n->param = &p;
    n->needs_grad = grad_;
    leaves_.emplace(&p, n);
    return n;
}

Graph::H Graph::constant(Tensor t) { return fresh(std::move(t)); }

Graph::H Graph::matmul(H a, H b) {
    if (a->val.cols != b->val.rows)
        throw std::invalid_argument("matmul: inner dims " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor y(a->val.rows, b->val.cols);
    kernels::matmul(a->val.ptr(), b->val.ptr(), y.ptr(), a->val.rows, a->val.cols, b->val.cols);
    H out = fresh(std::move(y));
    if (grad_ && (a->needs_grad || b->needs_grad)) {
        out->needs_grad = true;
        out->back = [a, b](Graph& g, Node& self) {
            const int m = a->val.rows, k = a->val.cols, n = b->val.cols;
            if (a->needs_grad) {
                Tensor da(m, k);
                kernels::matmul_nt(self.grad.ptr(), b->val.ptr(), da.ptr(), m, n, k);
                g.ensure_grad(a);
                add_into(a->grad, da);
            }
            if (b->needs_grad) {
                Tensor db(k, n);
                kernels::matmul_tn(a->val.ptr(), self.grad.ptr(), db.ptr(), m, k, n);
                g.ensure_grad(b);
                add_into(b->grad, db);
            }
        };
    }
    return out;
}

Graph::H Graph::matmul_nt(H a, H b) {
    if (a->val.cols != b->val.cols)
        throw std::invalid_argument("matmul_nt: inner dims " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor y(a->val.rows, b->val.rows);
    kernels::matmul_nt(a->val.ptr(), b->val.ptr(), y.ptr(), a->val.rows, a->val.cols, b->val.rows);
    H out = fresh(std::move(y));
    if (grad_ && (a->needs_grad || b->needs_grad)) {
        out->needs_grad = true;
        out->back = [a, b](Graph& g, Node& self) {
            const int m = a->val.rows, k = a->val.cols, n = b->val.rows;
            if (a->needs_grad) {
                Tensor da(m, k);
                kernels::matmul(self.grad.ptr(), b->val.ptr(), da.ptr(), m, n, k);
                g.ensure_grad(a);
                add_into(a->grad, da);
            }
            if (b->needs_grad) {
                Tensor db(n, k);
                kernels::matmul_tn(self.grad.ptr(), a->val.ptr(), db.ptr(), m, n, k);
                g.ensure_grad(b);
                add_into(b->grad, db);
            }
        };
    }
    return out;
}

Graph::H Graph::add(H a, H b) {
    check_same_shape(a, b, "add");
    Tensor y = a->val;
    add_into(y, b->val);
    H out = fresh(std::move(y));
    if (grad_ && (a->needs_grad || b->needs_grad)) {
        out->needs_grad = true;
        out->back = [a, b](Graph& g, Node& self) {
            if (a->needs_grad) {
                g.ensure_grad(a);
                add_into(a->grad, self.grad);
            }
            if (b->needs_grad) {
                g.ensure_grad(b);
                add_into(b->grad, self.grad);
            }
        };
    }
    return out;
}

Graph::H Graph::sub(H a, H b) {
    check_same_shape(a, b, "sub");
    Tensor y(a->val.rows, a->val.cols);
    for (size_t i = 0; i < y.size(); ++i) y.data[i] = a->val.data[i] - b->val.data[i];
    H out = fresh(std::move(y));
    if (grad_ && (a->needs_grad || b->needs_grad)) {
        out->needs_grad = true;
        out->back = [a, b](Graph& g, Node& self) {
            if (a->needs_grad) {
                g.ensure_grad(a);
                add_into(a->grad, self.grad);
            }
            if (b->needs_grad) {
                g.ensure_grad(b);
                for (size_t i = 0; i < self.grad.size(); ++i) b->grad.data[i] -= self.grad.data[i];
            }
        };
    }
    return out;
}

Graph::H Graph::mul(H a, H b) {
    check_same_shape(a, b, "mul");
    Tensor y(a->val.rows, a->val.cols);
    for (size_t i = 0; i < y.size(); ++i) y.data[i] = a->val.data[i] * b->val.data[i];
    H out = fresh(std::move(y));
    if (grad_ && (a->needs_grad || b->needs_grad)) {
        out->needs_grad = true;
        out->back = [a, b](Graph& g, Node& self) {
            if (a->needs_grad) {
                g.ensure_grad(a);
                for (size_t i = 0; i < self.grad.size(); ++i)
                    a->grad.data[i] += self.grad.data[i] * b->val.data[i];
            }
            if (b->needs_grad) {
                g.ensure_grad(b);
                for (size_t i = 0; i < self.grad.size(); ++i)
                    b->grad.data[i] += self.grad.data[i] * a->val.data[i];
            }
        };
    }
    return out;
}

Graph::H Graph::affine(H x, double s, double c) {
    Tensor y(x->val.rows, x->val.cols);
    for (size_t i = 0; i < y.size(); ++i) y.data[i] = s * x->val.data[i] + c;
    H out = fresh(std::move(y));
    if (grad_ && x->needs_grad) {
        out->needs_grad = true;
        out->back = [x, s](Graph& g, Node& self) {
            g.ensure_grad(x);
            for (size_t i = 0; i < self.grad.size(); ++i) x->grad.data[i] += s * self.grad.data[i];
        };
    }
    return out;
}

Graph::H Graph::add_rowvec(H x, H b) {
    if (b->val.rows != 1 || b->val.cols != x->val.cols)
        throw std::invalid_argument("add_rowvec: bias must be [1x" + std::to_string(x->val.cols) + "]");
    Tensor y = x->val;
    for (int i = 0; i < y.rows; ++i)
        for (int j = 0; j < y.cols; ++j) y.at(i, j) += b->val.at(0, j);
    H out = fresh(std::move(y));
    if (grad_ && (x->needs_grad || b->needs_grad)) {
        out->needs_grad = true;
        out->back = [x, b](Graph& g, Node& self) {
            if (x->needs_grad) {
                g.ensure_grad(x);
                add_into(x->grad, self.grad);
            }
            if (b->needs_grad) {
                g.ensure_grad(b);
                for (int i = 0; i < self.grad.rows; ++i)
                    for (int j = 0; j < self.grad.cols; ++j) b->grad.at(0, j) += self.grad.at(i, j);
            }
        };
    }
    return out;
}

Graph::H Graph::relu(H x) {
    Tensor y(x->val.rows, x->val.cols);
    for (size_t i = 0; i < y.size(); ++i) y.data[i] = x->val.data[i] > 0.0 ? x->val.data[i] : 0.0;
    H out = fresh(std::move(y));
    if (grad_ && x->needs_grad) {
        out->needs_grad = true;
        out->back = [x](Graph& g, Node& self) {
            g.ensure_grad(x);
            for (size_t i = 0; i < self.grad.size(); ++i)
                if (x->val.data[i] > 0.0) x->grad.data[i] += self.grad.data[i];
        };
    }
    return out;
}

Graph::H Graph::tanh_(H x) {
    Tensor y(x->val.rows, x->val.cols);
    for (size_t i = 0; i < y.size(); ++i) y.data[i] = std::tanh(x->val.data[i]);
    H out = fresh(std::move(y));
    if (grad_ && x->needs_grad) {
        out->needs_grad = true;
        out->back = [x](Graph& g, Node& self) {
            g.ensure_grad(x);
            for (size_t i = 0; i < self.grad.size(); ++i)
                x->grad.data[i] += self.grad.data[i] * (1.0 - self.val.data[i] * self.val.data[i]);
        };
    }
    return out;
}

Graph::H Graph::sigmoid(H x) {
    Tensor y(x->val.rows, x->val.cols);
    for (size_t i = 0; i < y.size(); ++i) y.data[i] = 1.0 / (1.0 + std::exp(-x->val.data[i]));
    H out = fresh(std::move(y));
    if (grad_ && x->needs_grad) {
        out->needs_grad = true;
        out->back = [x](Graph& g, Node& self) {
            g.ensure_grad(x);
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const double v = self.val.data[i];
                x->grad.data[i] += self.grad.data[i] * v * (1.0 - v);
            }
        };
    }
    return out;
}

Graph::H Graph::slice_cols(H x, int c0, int c1) {
    if (c0 < 0 || c1 > x->val.cols || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range");
    Tensor y(x->val.rows, c1 - c0);
    for (int i = 0; i < y.rows; ++i)
        for (int j = 0; j < y.cols; ++j) y.at(i, j) = x->val.at(i, c0 + j);
    H out = fresh(std::move(y));
    if (grad_ && x->needs_grad) {
        out->needs_grad = true;
        out->back = [x, c0](Graph& g, Node& self) {
            g.ensure_grad(x);
            for (int i = 0; i < self.grad.rows; ++i)
                for (int j = 0; j < self.grad.cols; ++j) x->grad.at(i, c0 + j) += self.grad.at(i, j);
        };
    }
    return out;
}

Graph::H Graph::concat_cols(const std::vector<H>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty");
    int rows = xs[0]->val.rows, cols = 0;
    bool needs = false;
    for (H x : xs) {
        if (x->val.rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += x->val.cols;
        needs = needs || x->needs_grad;
    }
    Tensor y(rows, cols);
    int off = 0;
    for (H x : xs) {
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < x->val.cols; ++j) y.at(i, off + j) = x->val.at(i, j);
        off += x->val.cols;
    }
    H out = fresh(std::move(y));
    if (grad_ && needs) {
        out->needs_grad = true;
        std::vector<H> parents = xs;
        out->back = [parents](Graph& g, Node& self) {
            int off2 = 0;
            for (H x : parents) {
                if (x->needs_grad) {
                    g.ensure_grad(x);
                    for (int i = 0; i < x->val.rows; ++i)
                        for (int j = 0; j < x->val.cols; ++j)
                            x->grad.at(i, j) += self.grad.at(i, off2 + j);
                }
                off2 += x->val.cols;
            }
        };
    }
    return out;
}

Graph::H Graph::gather_rows(H table, std::vector<int> ids) {
    Tensor y(static_cast<int>(ids.size()), table->val.cols);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table->val.rows)
            throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]));
        std::copy_n(table->val.ptr(ids[i]), table->val.cols, y.ptr(static_cast<int>(i)));
    }
    H out = fresh(std::move(y));
    if (grad_ && table->needs_grad) {
        out->needs_grad = true;
        auto idv = std::make_shared<std::vector<int>>(std::move(ids));
        out->back = [table, idv](Graph& g, Node& self) {
            g.ensure_grad(table);
            for (size_t i = 0; i < idv->size(); ++i) {
                double* dst = table->grad.ptr((*idv)[i]);
                const double* src = self.grad.ptr(static_cast<int>(i));
                for (int j = 0; j < self.grad.cols; ++j) dst[j] += src[j];
            }
        };
    }
    return out;
}

Graph::H Graph::pick_cols(H x, std::vector<int> cols) {
    if (static_cast<int>(cols.size()) != x->val.rows)
        throw std::invalid_argument("pick_cols: need one column index per row");
    Tensor y(x->val.rows, 1);
    for (int i = 0; i < x->val.rows; ++i) {
        if (cols[static_cast<size_t>(i)] < 0 || cols[static_cast<size_t>(i)] >= x->val.cols)
            throw std::out_of_range("pick_cols: column out of range");
        y.at(i, 0) = x->val.at(i, cols[static_cast<size_t>(i)]);
    }
    H out = fresh(std::move(y));
    if (grad_ && x->needs_grad) {
        out->needs_grad = true;
        auto cv = std::make_shared<std::vector<int>>(std::move(cols));
        out->back = [x, cv](Graph& g, Node& self) {
            g.ensure_grad(x);
            for (int i = 0; i < self.grad.rows; ++i)
                x->grad.at(i, (*cv)[static_cast<size_t>(i)]) += self.grad.at(i, 0);
        };
    }
    return out;
}

Graph::H Graph::softmax_rows(H x, std::vector<unsigned char> mask) {
    if (!mask.empty() && mask.size() != x->val.size())
        throw std::invalid_argument("softmax_rows: mask size mismatch");
    Tensor y(x->val.rows, x->val.cols);
    kernels::softmax_rows(x->val.ptr(), mask.empty() ? nullptr : mask.data(), y.ptr(), y.rows, y.cols);
    H out = fresh(std::move(y));
    if (grad_ && x->needs_grad) {
        out->needs_grad = true;
        out->back = [x](Graph& g, Node& self) {
            g.ensure_grad(x);
            const int m = self.val.rows, n = self.val.cols;
            for (int i = 0; i < m; ++i) {
                const double* yv = self.val.ptr(i);
                const double* dy = self.grad.ptr(i);
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += dy[j] * yv[j];
                double* dx = x->grad.ptr(i);
                for (int j = 0; j < n; ++j) dx[j] += yv[j] * (dy[j] - dot);
            }
        };
    }
    return out;
}

Graph::H Graph::log_softmax_rows(H x, std::vector<unsigned char> mask) {
    if (!mask.empty() && mask.size() != x->val.size())
        throw std::invalid_argument("log_softmax_rows: mask size mismatch");
    const int m = x->val.rows, n = x->val.cols;
    Tensor y(m, n);
    for (int i = 0; i < m; ++i) {
        const double* xv = x->val.ptr(i);
        const unsigned char* mk = mask.empty() ? nullptr : mask.data() + static_cast<size_t>(i) * n;
        double mx = -HUGE_VAL;
        for (int j = 0; j < n; ++j)
            if (!mk || mk[j]) mx = std::max(mx, xv[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j)
            if (!mk || mk[j]) sum += std::exp(xv[j] - mx);
        const double logz = mx + std::log(sum);
        double* yv = y.ptr(i);
        for (int j = 0; j < n; ++j) yv[j] = (!mk || mk[j]) ? xv[j] - logz : 0.0;
    }
    H out = fresh(std::move(y));
    if (grad_ && x->needs_grad) {
        out->needs_grad = true;
        auto mk = std::make_shared<std::vector<unsigned char>>(std::move(mask));
        out->back = [x, mk](Graph& g, Node& self) {
            g.ensure_grad(x);
            const int m2 = self.val.rows, n2 = self.val.cols;
            for (int i = 0; i < m2; ++i) {
                const double* yv = self.val.ptr(i);
                const double* dy = self.grad.ptr(i);
                const unsigned char* mrow =
                    mk->empty() ? nullptr : mk->data() + static_cast<size_t>(i) * n2;
                double tot = 0.0;
                for (int j = 0; j < n2; ++j)
                    if (!mrow || mrow[j]) tot += dy[j];
                double* dx = x->grad.ptr(i);
                for (int j = 0; j < n2; ++j)
                    if (!mrow || mrow[j]) dx[j] += dy[j] - std::exp(yv[j]) * tot;
            }
        };
    }
    return out;
}

Graph::H Graph::layernorm(H x, H gain, H bias, double eps) {
    const int m = x->val.rows, n = x->val.cols;
    if (gain->val.rows != 1 || gain->val.cols != n || bias->val.rows != 1 || bias->val.cols != n)
        throw std::invalid_argument("layernorm: gain/bias must be [1xn]");
    Tensor y(m, n);
    auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
    auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
    kernels::layernorm_rows(x->val.ptr(), gain->val.ptr(), bias->val.ptr(), eps, y.ptr(), mu->data(),
                            rstd->data(), m, n);
    H out = fresh(std::move(y));
    if (grad_ && (x->needs_grad || gain->needs_grad || bias->needs_grad)) {
        out->needs_grad = true;
        out->back = [x, gain, bias, mu, rstd](Graph& g, Node& self) {
            const int m2 = self.val.rows, n2 = self.val.cols;
            if (x->needs_grad) g.ensure_grad(x);
            if (gain->needs_grad) g.ensure_grad(gain);
            if (bias->needs_grad) g.ensure_grad(bias);
            for (int i = 0; i < m2; ++i) {
                const double* xv = x->val.ptr(i);
                const double* dy = self.grad.ptr(i);
                const double r = (*rstd)[static_cast<size_t>(i)];
                const double u = (*mu)[static_cast<size_t>(i)];
                double m1 = 0.0, m2s = 0.0;
                for (int j = 0; j < n2; ++j) {
                    const double xh = (xv[j] - u) * r;
                    const double dg = dy[j] * gain->val.at(0, j);
                    m1 += dg;
                    m2s += dg * xh;
                }
                m1 /= n2;
                m2s /= n2;
                for (int j = 0; j < n2; ++j) {
                    const double xh = (xv[j] - u) * r;
                    if (x->needs_grad) {
                        const double dg = dy[j] * gain->val.at(0, j);
                        x->grad.at(i, j) += r * (dg - m1 - xh * m2s);
                    }
                    if (gain->needs_grad) gain->grad.at(0, j) += dy[j] * xh;
                    if (bias->needs_grad) bias->grad.at(0, j) += dy[j];
                }
            }
        };
    }
    return out;
}

Graph::H Graph::min_elem(H a, H b) {
    check_same_shape(a, b, "min_elem");
    Tensor y(a->val.rows, a->val.cols);
    for (size_t i = 0; i < y.size(); ++i) y.data[i] = std::min(a->val.data[i], b->val.data[i]);
    H out = fresh(std::move(y));
    if (grad_ && (a->needs_grad || b->needs_grad)) {
        out->needs_grad = true;
        out->back = [a, b](Graph& g, Node& self) {
            if (a->needs_grad) g.ensure_grad(a);
            if (b->needs_grad) g.ensure_grad(b);
            for (size_t i = 0; i < self.grad.size(); ++i) {
                if (a->val.data[i] <= b->val.data[i]) {
                    if (a->needs_grad) a->grad.data[i] += self.grad.data[i];
                } else if (b->needs_grad) {
                    b->grad.data[i] += self.grad.data[i];
                }
            }
        };
    }
    return out;
}

Graph::H Graph::sum_rows(H x) {
    Tensor y(x->val.rows, 1);
    for (int i = 0; i < x->val.rows; ++i) {
        double acc = 0.0;
        const double* xv = x->val.ptr(i);
        for (int j = 0; j < x->val.cols; ++j) acc += xv[j];
        y.at(i, 0) = acc;
    }
    H out = fresh(std::move(y));
    if (grad_ && x->needs_grad) {
        out->needs_grad = true;
        out->back = [x](Graph& g, Node& self) {
            g.ensure_grad(x);
            for (int i = 0; i < x->val.rows; ++i) {
                const double dv = self.grad.at(i, 0);
                double* dx = x->grad.ptr(i);
                for (int j = 0; j < x->val.cols; ++j) dx[j] += dv;
            }
        };
    }
    return out;
}

Graph::H Graph::sum_all(H x) {
    double acc = 0.0;
    for (size_t i = 0; i < x->val.size(); ++i) acc += x->val.data[i];
    Tensor y(1, 1);
    y.at(0, 0) = acc;
    H out = fresh(std::move(y));
    if (grad_ && x->needs_grad) {
        out->needs_grad = true;
        out->back = [x](Graph& g, Node& self) {
            g.ensure_grad(x);
            const double dv = self.grad.at(0, 0);
            for (size_t i = 0; i < x->grad.size(); ++i) x->grad.data[i] += dv;
        };
    }
    return out;
}

Graph::H Graph::mean_all(H x) {
    return affine(sum_all(x), 1.0 / static_cast<double>(x->val.size()), 0.0);
}

Graph::H Graph::gru_final(H x_seq, int T, int B, H W, H U, H bx, H bh,
                          const std::vector<int>& lens) {
    const int in = W->val.rows;
    const int h3 = W->val.cols;
    if (h3 % 3 != 0) throw std::invalid_argument("gru_final: W cols must be 3*hidden");
    const int hd = h3 / 3;
    if (U->val.rows != hd || U->val.cols != h3) throw std::invalid_argument("gru_final: U shape");
    if (bx->val.rows != 1 || bx->val.cols != h3 || bh->val.rows != 1 || bh->val.cols != h3)
        throw std::invalid_argument("gru_final: bias shape");
    if (x_seq->val.rows != T * B || x_seq->val.cols != in)
        throw std::invalid_argument("gru_final: x_seq shape");
    if (static_cast<int>(lens.size()) != B) throw std::invalid_argument("gru_final: lens size");

    struct Saved {
        std::vector<Tensor> h_prev, z, r, n, shn;
        std::vector<int> lens;
        int T, B, in, hd;
    };
    auto sv = std::make_shared<Saved>();
    sv->lens = lens;
    sv->T = T;
    sv->B = B;
    sv->in = in;
    sv->hd = hd;
    const bool keep = grad_ && (x_seq->needs_grad || W->needs_grad || U->needs_grad ||
                                bx->needs_grad || bh->needs_grad);

    Tensor h(B, hd);
    Tensor sx(B, h3), sh(B, h3);
    for (int t = 0; t < T; ++t) {
        kernels::matmul(x_seq->val.ptr(t * B), W->val.ptr(), sx.ptr(), B, in, h3);
        kernels::matmul(h.ptr(), U->val.ptr(), sh.ptr(), B, hd, h3);
        Tensor zt(B, hd), rt(B, hd), nt(B, hd), shn(B, hd);
        Tensor hp = h;
        for (int i = 0; i < B; ++i) {
            if (lens[static_cast<size_t>(i)] <= t) continue;
            const double* sxr = sx.ptr(i);
            const double* shr = sh.ptr(i);
            const double* bxr = bx->val.ptr();
            const double* bhr = bh->val.ptr();
            double* hv = h.ptr(i);
            for (int j = 0; j < hd; ++j) {
                const double z = 1.0 / (1.0 + std::exp(-(sxr[j] + bxr[j] + shr[j] + bhr[j])));
                const double r =
                    1.0 / (1.0 + std::exp(-(sxr[hd + j] + bxr[hd + j] + shr[hd + j] + bhr[hd + j])));
                const double sn = shr[2 * hd + j] + bhr[2 * hd + j];
                const double n = std::tanh(sxr[2 * hd + j] + bxr[2 * hd + j] + r * sn);
                zt.at(i, j) = z;
                rt.at(i, j) = r;
                nt.at(i, j) = n;
                shn.at(i, j) = sn;
                hv[j] = (1.0 - z) * n + z * hv[j];
            }
        }
        if (keep) {
            sv->h_prev.push_back(std::move(hp));
            sv->z.push_back(std::move(zt));
            sv->r.push_back(std::move(rt));
            sv->n.push_back(std::move(nt));
            sv->shn.push_back(std::move(shn));
        }
    }

    H out = fresh(std::move(h));
    if (keep) {
        out->needs_grad = true;
        out->back = [x_seq, W, U, bx, bh, sv](Graph& g, Node& self) {
            const int T2 = sv->T, B2 = sv->B, in2 = sv->in, hd2 = sv->hd;
            const int h32 = 3 * hd2;
            Tensor dh = self.grad;
            Tensor dW(in2, h32), dU(hd2, h32), dbx(1, h32), dbh(1, h32);
            const bool need_x = x_seq->needs_grad;
            if (need_x) g.ensure_grad(x_seq);
            for (int t = T2 - 1; t >= 0; --t) {
                Tensor dgx(B2, h32), dgh(B2, h32);
                const Tensor& hp = sv->h_prev[static_cast<size_t>(t)];
                for (int i = 0; i < B2; ++i) {
                    if (sv->lens[static_cast<size_t>(i)] <= t) continue;
                    double* dhv = dh.ptr(i);
                    for (int j = 0; j < hd2; ++j) {
                        const double z = sv->z[static_cast<size_t>(t)].at(i, j);
                        const double r = sv->r[static_cast<size_t>(t)].at(i, j);
                        const double n = sv->n[static_cast<size_t>(t)].at(i, j);
                        const double sn = sv->shn[static_cast<size_t>(t)].at(i, j);
                        const double dout = dhv[j];
                        const double dz = dout * (hp.at(i, j) - n);
                        const double dn = dout * (1.0 - z);
                        const double dnh = dn * (1.0 - n * n);
                        const double dr = dnh * sn;
                        const double dzh = dz * z * (1.0 - z);
                        const double drh = dr * r * (1.0 - r);
                        dgx.at(i, j) = dzh;
                        dgx.at(i, hd2 + j) = drh;
                        dgx.at(i, 2 * hd2 + j) = dnh;
                        dgh.at(i, j) = dzh;
                        dgh.at(i, hd2 + j) = drh;
                        dgh.at(i, 2 * hd2 + j) = dnh * r;
                        dhv[j] = dout * z;
                    }
                }
                if (need_x) {
                    Tensor dx(B2, in2);
                    kernels::matmul_nt(dgx.ptr(), W->val.ptr(), dx.ptr(), B2, h32, in2);
                    double* dst = x_seq->grad.ptr(t * B2);
                    for (size_t q = 0; q < dx.size(); ++q) dst[q] += dx.data[q];
                }
                {
                    Tensor dhu(B2, hd2);
                    kernels::matmul_nt(dgh.ptr(), U->val.ptr(), dhu.ptr(), B2, h32, hd2);
                    add_into(dh, dhu);
                }
                {
                    Tensor tmp(in2, h32);
                    kernels::matmul_tn(x_seq->val.ptr(t * B2), dgx.ptr(), tmp.ptr(), B2, in2, h32);
                    add_into(dW, tmp);
                }
                {
                    Tensor tmp(hd2, h32);
                    kernels::matmul_tn(hp.ptr(), dgh.ptr(), tmp.ptr(), B2, hd2, h32);
                    add_into(dU, tmp);
                }
                for (int i = 0; i < B2; ++i)
                    for (int j = 0; j < h32; ++j) {
                        dbx.at(0, j) += dgx.at(i, j);
                        dbh.at(0, j) += dgh.at(i, j);
                    }
            }
            if (W->needs_grad) {
                g.ensure_grad(W);
                add_into(W->grad, dW);
            }
            if (U->needs_grad) {
                g.ensure_grad(U);
                add_into(U->grad, dU);
            }
            if (bx->needs_grad) {
                g.ensure_grad(bx);
                add_into(bx->grad, dbx);
            }
            if (bh->needs_grad) {
                g.ensure_grad(bh);
                add_into(bh->grad, dbh);
            }
        };
    }
    return out;
}

void Graph::backward(H root) {
    if (!grad_) throw std::logic_error("backward: graph built with gradients disabled");
    if (root->val.rows != 1 || root->val.cols != 1)
        throw std::invalid_argument("backward: root must be a scalar, got " + root->val.shape_str());
    ensure_grad(root);
    root->grad.at(0, 0) = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = *it;
        if (n.needs_grad && n.back && n.grad.size() == n.val.size() && !n.grad.data.empty())
            n.back(*this, n);
    }
    ran_backward_ = true;
}

Tensor Graph::grad_of(const Parameter& p) const {
    auto it = leaves_.find(&p);
    if (it == leaves_.end() || it->second->grad.data.empty())
        return Tensor(p.value.rows, p.value.cols);
    return it->second->grad;
}

void Graph::accumulate_grads(GradBag& bag, double scale) const {
    for (const auto& [p, node] : leaves_) {
        if (!node->grad.data.empty()) bag.add(p, node->grad, scale);
    }
}

GradCheckReport grad_check(const std::function<Graph::H(Graph&)>& build,
                           const std::vector<Parameter*>& params, double eps) {
    Graph g(true);
    Graph::H root = build(g);
    if (root->val.rows != 1 || root->val.cols != 1)
        throw std::invalid_argument("grad_check: expression must be scalar");
    g.backward(root);

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(g.grad_of(*p));

    GradCheckReport rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        for (size_t i = 0; i < p->value.size(); ++i) {
            const double old = p->value.data[i];
            p->value.data[i] = old + eps;
            Graph gp(false);
            const double fp = build(gp)->val.at(0, 0);
            p->value.data[i] = old - eps;
            Graph gm(false);
            const double fm = build(gm)->val.at(0, 0);
            p->value.data[i] = old;
            const double num = (fp - fm) / (2.0 * eps);
            const double ana = analytic[pi].data[i];
            const double abs_err = std::abs(num - ana);
            const double rel = abs_err / std::max({1.0, std::abs(num), std::abs(ana)});
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
        }
    }
    return rep;
}

}  // namespace flowmimic::nn
