#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace tbench {

// Dense float32 tensor, row-major. Images are NCHW with values in [0,1].
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, float fill);

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(size_t i) const { return shape_[i]; }
    size_t rank() const { return shape_.size(); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](size_t i) { return data_[i]; }
    float operator[](size_t i) const { return data_[i]; }

    // NCHW accessors
    float& at(int n, int c, int h, int w) {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    float at(int n, int c, int h, int w) const {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    Tensor slice_n(int n) const;             // sample n as a {1,C,H,W} tensor
    void set_slice_n(int n, const Tensor& s);

    void fill(float v);
    void add_scaled(const Tensor& other, float scale);  // this += scale * other
    void scale(float s);

    float max_abs() const;
    float l2_norm() const;
    bool has_nan() const;

    std::string shape_str() const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);

// Coordinatewise clip of x into [ref - eps, ref + eps] intersected with [0,1].
Tensor project_linf(const Tensor& x, const Tensor& ref, float eps);

// Round to the 8-bit grid k/255.
Tensor quantize8(const Tensor& x);

float linf_distance(const Tensor& a, const Tensor& b);

}  // namespace tbench
