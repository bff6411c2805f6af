#include "rndlm/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "rndlm/errors.hpp"

namespace rndlm {

static std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
    }
}

Tensor Tensor::scalar(double v) {
    Tensor t{std::vector<std::size_t>{}};
    t.data_.assign(1, v);
    return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

std::size_t Tensor::rows() const {
    if (shape_.size() >= 2) return shape_[0];
    return 1;
}

std::size_t Tensor::cols() const {
    if (shape_.size() >= 2) return shape_[1];
    if (shape_.size() == 1) return shape_[0];
    return 1;
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

}  // namespace rndlm
