#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace flowmimic::stats {

// Linear-interpolation quantile; copies and sorts its input. Empty input
// yields 0 so callers can feed optional feature sets without guards.
inline double quantile(std::vector<double> values, double q) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
    const auto idx = static_cast<size_t>(pos);
    if (idx + 1 >= values.size()) return values.back();
    const double frac = pos - static_cast<double>(idx);
    return values[idx] * (1.0 - frac) + values[idx + 1] * frac;
}

inline double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double stddev(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

inline double minimum(const std::vector<double>& v) {
    return v.empty() ? 0.0 : *std::min_element(v.begin(), v.end());
}

inline double maximum(const std::vector<double>& v) {
    return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
}

}  // namespace flowmimic::stats
