#pragma once

#include <cassert>
#include <cstddef>
#include <random>
#include <vector>

namespace mgrex {

// Dense row-major 2-D tensor of doubles. Vectors are (n,1) columns or (1,n)
// rows by local convention.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> d;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, 0.0) {}

    static Tensor zeros(int r, int c) { return Tensor(r, c); }

    static Tensor full(int r, int c, double v) {
        Tensor t(r, c);
        std::fill(t.d.begin(), t.d.end(), v);
        return t;
    }

    static Tensor from(std::initializer_list<double> vals, int r, int c) {
        Tensor t(r, c);
        assert(vals.size() == t.d.size());
        std::copy(vals.begin(), vals.end(), t.d.begin());
        return t;
    }

    static Tensor randn(int r, int c, std::mt19937_64& rng, double stddev) {
        Tensor t(r, c);
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& v : t.d) v = dist(rng);
        return t;
    }

    static Tensor uniform(int r, int c, std::mt19937_64& rng, double lo, double hi) {
        Tensor t(r, c);
        std::uniform_real_distribution<double> dist(lo, hi);
        for (auto& v : t.d) v = dist(rng);
        return t;
    }

    double& at(int r, int c) { return d[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return d[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return d.size(); }
    bool empty() const { return d.empty(); }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    void fill(double v) { std::fill(d.begin(), d.end(), v); }

    double max_abs() const {
        double m = 0.0;
        for (double v : d) m = std::max(m, std::abs(v));
        return m;
    }
};

inline Tensor xavier_init(int fan_in, int fan_out, std::mt19937_64& rng) {
    double limit = std::sqrt(6.0 / (fan_in + fan_out));
    return Tensor::uniform(fan_in, fan_out, rng, -limit, limit);
}

}  // namespace mgrex
