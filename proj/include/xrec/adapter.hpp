#pragma once

#include "xrec/autodiff.hpp"
#include "xrec/tensor.hpp"

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace xrec {

struct AdapterConfig {
  int num_experts = 8;
  int in_dim = 32;       // GNN embedding size d_g
  int out_dim = 64;      // LM hidden size d_lm
  double dropout_rate = 0.2;
  double noise_factor = 0.01;
  unsigned long long seed = 1;
};

/// Mixture-of-experts projection from GNN space into LM hidden space.
/// Every expert is a linear map; a softmax gate mixes their outputs.
struct MoeAdapter {
  AdapterConfig config;
  std::vector<Tensor> expert_weights;  // num_experts of [out_dim, in_dim]
  std::vector<Tensor> expert_biases;   // num_experts of [1, out_dim]
  Tensor gate_weights;                 // [num_experts, in_dim]
  bool training = false;

  MoeAdapter() = default;
  /// Parameters drawn uniform in +-1/sqrt(in_dim) from the supplied engine.
  MoeAdapter(const AdapterConfig& config, std::mt19937_64& rng);

  std::vector<Tensor> params() const;
  void set_requires_grad(bool b);
};

/// y = sum_k g_k (W_k x + b_k) with g = softmax(gate_weights x).  In
/// training mode the gate logits receive Gaussian noise scaled by
/// noise_factor and the mixed output passes through inverted dropout; in
/// inference mode the result is a deterministic pure function of
/// (parameters, x).  `x` is a [1, in_dim] row; the result is [1, out_dim].
Tensor adapt(Tape& tape, const MoeAdapter& adapter, const Tensor& x, std::mt19937_64& rng);

/// Fixed user/item input pair for the fixed-inputs mode: drawn once under
/// `seed` and reused verbatim for every training and inference example.
std::pair<Mat, Mat> make_fixed_inputs(int in_dim, unsigned long long seed);

/// Versioned binary checkpoint holding both adapters and their configs.
void save_adapters(const std::string& path, const MoeAdapter& user_adapter,
                   const MoeAdapter& item_adapter);
std::pair<MoeAdapter, MoeAdapter> load_adapters(const std::string& path);

}  // namespace xrec
