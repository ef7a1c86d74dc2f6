#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace m3ps {

/// Dense row-major double matrix. Every tensor in the model is 2-D.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

/// Root of the exception hierarchy thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractError(what);
}

inline void require_shape(bool cond, const std::string& what) {
    if (!cond) throw ShapeError(what);
}

/// A learnable tensor with its accumulated gradient.
struct Param {
    Mat value;
    Mat grad;

    Param() = default;
    explicit Param(Mat v) : value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}
    Param(Eigen::Index rows, Eigen::Index cols)
        : value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    Eigen::Index rows() const { return value.rows(); }
    Eigen::Index cols() const { return value.cols(); }
};

namespace init {

inline void normal(Param& p, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
    p.zero_grad();
}

inline void xavier(Param& p, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(p.rows() + p.cols()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
    p.zero_grad();
}

inline void constant(Param& p, double v) {
    p.value.setConstant(v);
    p.zero_grad();
}

}  // namespace init

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace m3ps
