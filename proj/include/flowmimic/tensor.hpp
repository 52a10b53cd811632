#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowmimic::nn {

// Dense row-major matrix of 64-bit reals. Everything in the model stack is
// rank 2 (vectors are 1xN or Nx1), which keeps the kernel surface small.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {
        if (r < 0 || c < 0) throw std::invalid_argument("Tensor: negative shape");
    }

    static Tensor zeros(int r, int c) { return Tensor(r, c); }

    static Tensor full(int r, int c, double v) {
        Tensor t(r, c);
        for (auto& x : t.data) x = v;
        return t;
    }

    static Tensor row(const std::vector<double>& v) {
        Tensor t(1, static_cast<int>(v.size()));
        t.data = v;
        return t;
    }

    size_t size() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    double* ptr(int r = 0) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* ptr(int r = 0) const { return data.data() + static_cast<size_t>(r) * cols; }

    std::string shape_str() const {
        return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
    }
};

inline void require_shape(const Tensor& t, int r, int c, const char* what) {
    if (t.rows != r || t.cols != c)
        throw std::invalid_argument(std::string(what) + ": expected [" + std::to_string(r) + "x" +
                                    std::to_string(c) + "], got " + t.shape_str());
}

}  // namespace flowmimic::nn
