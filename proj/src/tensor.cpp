#include "hybridvfl/tensor.hpp"

#include <cmath>
#include <sstream>

namespace hvfl {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
        throw DimensionError("tensor: shape " + shape_str(shape_) + " needs " +
                             std::to_string(numel(shape_)) + " values, got " +
                             std::to_string(data_.size()));
    }
}

Tensor Tensor::scalar(double v) {
    Tensor t(Shape{1});
    t.data_[0] = v;
    return t;
}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
}

double Tensor::scalar_value() const {
    if (!is_scalar()) {
        throw ContractError("scalar_value: tensor has shape " + shape_str(shape_));
    }
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double Tensor::max_abs_diff(const Tensor& o) const {
    if (!same_shape(o)) {
        throw DimensionError("max_abs_diff: shapes " + shape_str(shape_) + " vs " +
                             shape_str(o.shape_));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) {
        m = std::max(m, std::fabs(data_[i] - o.data_[i]));
    }
    return m;
}

}  // namespace hvfl
