#include "tbench/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tbench {

static size_t shape_count(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("negative tensor dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(shape_count(shape_), 0.f) {}

Tensor::Tensor(std::vector<int> shape, float fill)
    : shape_(std::move(shape)), data_(shape_count(shape_), fill) {}

Tensor Tensor::slice_n(int n) const {
    assert(rank() == 4);
    Tensor out({1, shape_[1], shape_[2], shape_[3]});
    size_t stride = size() / shape_[0];
    std::copy_n(data_.begin() + n * stride, stride, out.data_.begin());
    return out;
}

void Tensor::set_slice_n(int n, const Tensor& s) {
    assert(rank() == 4 && s.rank() == 4 && s.dim(0) == 1);
    size_t stride = size() / shape_[0];
    assert(s.size() == stride);
    std::copy_n(s.data_.begin(), stride, data_.begin() + n * stride);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_scaled(const Tensor& other, float scale) {
    assert(same_shape(other));
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
}

void Tensor::scale(float s) {
    for (float& v : data_) v *= s;
}

float Tensor::max_abs() const {
    float m = 0.f;
    for (float v : data_) m = std::max(m, std::fabs(v));
    return m;
}

float Tensor::l2_norm() const {
    double s = 0.0;
    for (float v : data_) s += static_cast<double>(v) * v;
    return static_cast<float>(std::sqrt(s));
}

bool Tensor::has_nan() const {
    for (float v : data_)
        if (!std::isfinite(v)) return true;
    return false;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ")";
    return os.str();
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    Tensor out = a;
    for (size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    Tensor out = a;
    for (size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor project_linf(const Tensor& x, const Tensor& ref, float eps) {
    assert(x.same_shape(ref));
    Tensor out = x;
    for (size_t i = 0; i < out.size(); ++i) {
        float lo = std::max(ref[i] - eps, 0.f);
        float hi = std::min(ref[i] + eps, 1.f);
        out[i] = std::min(std::max(out[i], lo), hi);
    }
    return out;
}

Tensor quantize8(const Tensor& x) {
    Tensor out = x;
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = std::round(out[i] * 255.f) / 255.f;
    return out;
}

float linf_distance(const Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    float m = 0.f;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace tbench
