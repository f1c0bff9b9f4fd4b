#pragma once

#include <Eigen/Dense>

#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace xrec {

/// All dense values in the library are rank-2, row-major, 64-bit float
/// matrices.  Row vectors are stored as [1, n] and scalars as [1, 1].
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(long rows, long cols) {
  return "[" + std::to_string(rows) + " x " + std::to_string(cols) + "]";
}

inline std::string shape_str(const Mat& m) { return shape_str(m.rows(), m.cols()); }

/// Shared handle to a dense value with an optional accumulated gradient.
/// Copies alias the same storage, so gradients written by a tape's backward
/// pass are visible through every copy of the handle.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Mat value, bool requires_grad = false) {
    auto impl = std::make_shared<Impl>();
    impl->value = std::move(value);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    Mat m(1, 1);
    m(0, 0) = v;
    return leaf(std::move(m), requires_grad);
  }

  static Tensor row(const std::vector<double>& v, bool requires_grad = false) {
    Mat m(1, static_cast<long>(v.size()));
    for (long j = 0; j < m.cols(); ++j) m(0, j) = v[static_cast<std::size_t>(j)];
    return leaf(std::move(m), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  long rows() const { return check().value.rows(); }
  long cols() const { return check().value.cols(); }
  long size() const { return check().value.size(); }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }

  const Mat& value() const { return check().value; }
  Mat& value() { return check().value; }

  double item() const {
    if (!is_scalar()) throw TensorError("item: tensor is not scalar, shape " + shape_str(value()));
    return value()(0, 0);
  }

  bool requires_grad() const { return check().requires_grad; }
  void set_requires_grad(bool b) { check().requires_grad = b; }

  bool has_grad() const { return check().grad.has_value(); }

  const Mat& grad() const {
    const Impl& i = check();
    if (!i.grad) throw TensorError("grad: no gradient accumulated for this tensor");
    return *i.grad;
  }

  /// Gradient storage, zero-initialised on first access. Handles share
  /// state, so a const handle may still accumulate gradients.
  Mat& grad_ref() const {
    Impl& i = check();
    if (!i.grad) i.grad = Mat::Zero(i.value.rows(), i.value.cols());
    return *i.grad;
  }

  void clear_grad() { check().grad.reset(); }

  bool same_impl(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  struct Impl {
    Mat value;
    std::optional<Mat> grad;
    bool requires_grad = false;
  };

  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  Impl& check() const {
    if (!impl_) throw TensorError("use of undefined tensor");
    return *impl_;
  }

  std::shared_ptr<Impl> impl_;
};

/// Uniform matrix in [lo, hi), seeded through the caller's engine.
inline Mat uniform_mat(long rows, long cols, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Mat m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline Mat normal_mat(long rows, long cols, double mean, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  Mat m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

}  // namespace xrec
