#include "xrec/optim.hpp"

#include <cmath>

namespace xrec {

void sgd_step(std::vector<Tensor>& params, double lr, double weight_decay) {
  for (Tensor& p : params) {
    if (p.has_grad()) p.value() -= lr * p.grad();
    if (weight_decay != 0.0) p.value() -= (lr * weight_decay) * p.value();
  }
}

void Adam::step(std::vector<Tensor>& params) {
  if (m_.empty()) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor& p : params) {
      m_.push_back(Mat::Zero(p.rows(), p.cols()));
      v_.push_back(Mat::Zero(p.rows(), p.cols()));
    }
  }
  ++t_;
  double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) continue;
    const Mat& g = p.grad();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    Mat mhat = m_[i] / c1;
    Mat vhat = v_[i] / c2;
    p.value().array() -= lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
  }
}

void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.clear_grad();
}

}  // namespace xrec
