#pragma once

#include "xrec/tensor.hpp"

#include <vector>

namespace xrec {

/// One decoupled-weight-decay gradient-descent step:
///   p <- p - lr * grad(p) - lr * weight_decay * p
/// Tensors without an accumulated gradient are decayed only.  With
/// weight_decay = 0 this is plain gradient descent, bit for bit.
void sgd_step(std::vector<Tensor>& params, double lr, double weight_decay);

/// Adam with bias correction; used where the training schedule is artifact
/// plumbing rather than a pinned update rule.
class Adam {
 public:
  Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<Tensor>& params);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

/// Clears accumulated gradients on every tensor in the list.
void zero_grads(std::vector<Tensor>& params);

}  // namespace xrec
