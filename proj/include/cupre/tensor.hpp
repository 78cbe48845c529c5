#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <vector>

namespace cupre {

// Dense row-major tensor of doubles. Feature maps use CHW layout.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(count(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> data)
        : shape(std::move(s)), v(std::move(data)) {
        assert(static_cast<std::size_t>(count(shape)) == v.size());
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    // CHW accessors.
    double& at(int c, int y, int x) {
        return v[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    double at(int c, int y, int x) const {
        return v[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace cupre
