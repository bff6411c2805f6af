#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <string>
#include <vector>

namespace rndlm {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// Dense row-major tensor of doubles. Rank 0 is a scalar, rank 1 a vector,
// rank 2 a matrix; nothing in this project needs more.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, double v);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    // rows/cols treat a rank-1 tensor as a single row, a scalar as 1x1
    std::size_t rows() const;
    std::size_t cols() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

    MatMap mat() { return MatMap(data_.data(), rows(), cols()); }
    ConstMatMap mat() const { return ConstMatMap(data_.data(), rows(), cols()); }
    VecMap vec() { return VecMap(data_.data(), numel()); }
    ConstVecMap vec() const { return ConstVecMap(data_.data(), numel()); }

    bool all_finite() const;
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace rndlm
