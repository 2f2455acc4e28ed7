#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "errors.hpp"
#include "random.hpp"

namespace oneclip {

// Dense row-major tensor of doubles. Rank is dynamic; image batches use NCHW.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, double fill = 0.0) : shape_(std::move(shape)) {
        std::size_t n = 1;
        for (int d : shape_) {
            if (d <= 0) throw ShapeError("Tensor: dimensions must be positive");
            n *= static_cast<std::size_t>(d);
        }
        data_.assign(n, fill);
    }

    static Tensor from_data(std::vector<int> shape, std::vector<double> data) {
        Tensor t;
        t.shape_ = std::move(shape);
        std::size_t n = 1;
        for (int d : t.shape_) n *= static_cast<std::size_t>(d);
        if (n != data.size()) throw ShapeError("Tensor::from_data: size mismatch");
        t.data_ = std::move(data);
        return t;
    }

    static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape_); }

    static Tensor randn(std::vector<int> shape, RandomSource& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = stddev * rng.normal();
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // NCHW accessors.
    std::size_t idx4(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * su(1) + su2(c)) * su(2) + su2(y)) * su(3) + su2(x);
    }
    double& at(int n, int c, int y, int x) { return data_[idx4(n, c, y, x)]; }
    double at(int n, int c, int y, int x) const { return data_[idx4(n, c, y, x)]; }

    bool shape_equals(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    std::size_t su(int i) const { return static_cast<std::size_t>(shape_[static_cast<std::size_t>(i)]); }
    static std::size_t su2(int v) { return static_cast<std::size_t>(v); }

    std::vector<int> shape_;
    std::vector<double> data_;
};

inline bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace oneclip
