#include "xrec/adapter.hpp"

#include "xrec/serialize.hpp"

#include <cmath>

namespace xrec {

namespace {

constexpr std::uint64_t kAdapterMagic = 0x5852414441505431ull;
constexpr std::uint64_t kAdapterVersion = 1;

void check_config(const AdapterConfig& c) {
  if (c.num_experts < 1 || c.in_dim < 1 || c.out_dim < 1)
    throw TensorError("adapter: invalid dimensions in config");
  if (c.dropout_rate < 0.0 || c.dropout_rate >= 1.0)
    throw TensorError("adapter: dropout_rate must be in [0, 1)");
  if (c.noise_factor < 0.0) throw TensorError("adapter: noise_factor must be >= 0");
}

}  // namespace

MoeAdapter::MoeAdapter(const AdapterConfig& cfg, std::mt19937_64& rng) : config(cfg) {
  check_config(cfg);
  double bound = 1.0 / std::sqrt(static_cast<double>(cfg.in_dim));
  for (int k = 0; k < cfg.num_experts; ++k) {
    expert_weights.push_back(
        Tensor::leaf(uniform_mat(cfg.out_dim, cfg.in_dim, -bound, bound, rng), true));
    expert_biases.push_back(Tensor::leaf(uniform_mat(1, cfg.out_dim, -bound, bound, rng), true));
  }
  gate_weights = Tensor::leaf(uniform_mat(cfg.num_experts, cfg.in_dim, -bound, bound, rng), true);
}

std::vector<Tensor> MoeAdapter::params() const {
  std::vector<Tensor> p;
  p.insert(p.end(), expert_weights.begin(), expert_weights.end());
  p.insert(p.end(), expert_biases.begin(), expert_biases.end());
  p.push_back(gate_weights);
  return p;
}

void MoeAdapter::set_requires_grad(bool b) {
  for (auto p : params()) p.set_requires_grad(b);
}

Tensor adapt(Tape& tape, const MoeAdapter& adapter, const Tensor& x, std::mt19937_64& rng) {
  if (x.rows() != 1 || x.cols() != adapter.config.in_dim)
    throw TensorError("adapt: input shape " + shape_str(x.value()) + " does not match in_dim " +
                      std::to_string(adapter.config.in_dim));

  Tensor logits = matmul(tape, x, adapter.gate_weights, false, /*trans_b=*/true);  // [1, K]
  if (adapter.training && adapter.config.noise_factor > 0.0) {
    Mat noise = normal_mat(1, adapter.config.num_experts, 0.0, 1.0, rng);
    logits = add(tape, logits, Tensor::leaf(adapter.config.noise_factor * noise));
  }
  Tensor gate = row_softmax(tape, logits);  // [1, K]

  std::vector<Tensor> outs;
  outs.reserve(adapter.expert_weights.size());
  for (std::size_t k = 0; k < adapter.expert_weights.size(); ++k) {
    Tensor yk = add(tape, matmul(tape, x, adapter.expert_weights[k], false, /*trans_b=*/true),
                    adapter.expert_biases[k]);  // [1, out]
    outs.push_back(yk);
  }
  Tensor stacked = outs.size() == 1 ? outs[0] : concat_rows(tape, outs);  // [K, out]
  Tensor mixed = matmul(tape, gate, stacked);                             // [1, out]

  if (adapter.training && adapter.config.dropout_rate > 0.0) {
    double keep = 1.0 - adapter.config.dropout_rate;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Mat mask(1, adapter.config.out_dim);
    for (long j = 0; j < mask.cols(); ++j) mask(0, j) = unit(rng) < keep ? 1.0 / keep : 0.0;
    mixed = multiply(tape, mixed, Tensor::leaf(mask));
  }
  return mixed;
}

std::pair<Mat, Mat> make_fixed_inputs(int in_dim, unsigned long long seed) {
  if (in_dim < 1) throw TensorError("make_fixed_inputs: in_dim must be positive");
  std::mt19937_64 rng(seed);
  Mat user = uniform_mat(1, in_dim, -0.1, 0.1, rng);
  Mat item = uniform_mat(1, in_dim, -0.1, 0.1, rng);
  return {user, item};
}

namespace {

void write_adapter(BinWriter& w, const MoeAdapter& a) {
  w.i64(a.config.num_experts);
  w.i64(a.config.in_dim);
  w.i64(a.config.out_dim);
  w.f64(a.config.dropout_rate);
  w.f64(a.config.noise_factor);
  w.u64(a.config.seed);
  for (const Tensor& t : a.expert_weights) w.mat(t.value());
  for (const Tensor& t : a.expert_biases) w.mat(t.value());
  w.mat(a.gate_weights.value());
}

MoeAdapter read_adapter(BinReader& r) {
  MoeAdapter a;
  a.config.num_experts = static_cast<int>(r.i64());
  a.config.in_dim = static_cast<int>(r.i64());
  a.config.out_dim = static_cast<int>(r.i64());
  a.config.dropout_rate = r.f64();
  a.config.noise_factor = r.f64();
  a.config.seed = r.u64();
  check_config(a.config);
  for (int k = 0; k < a.config.num_experts; ++k)
    a.expert_weights.push_back(Tensor::leaf(r.mat(), true));
  for (int k = 0; k < a.config.num_experts; ++k)
    a.expert_biases.push_back(Tensor::leaf(r.mat(), true));
  a.gate_weights = Tensor::leaf(r.mat(), true);
  return a;
}

}  // namespace

void save_adapters(const std::string& path, const MoeAdapter& user_adapter,
                   const MoeAdapter& item_adapter) {
  BinWriter w(path);
  w.u64(kAdapterMagic);
  w.u64(kAdapterVersion);
  write_adapter(w, user_adapter);
  write_adapter(w, item_adapter);
  w.close();
}

std::pair<MoeAdapter, MoeAdapter> load_adapters(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kAdapterMagic, kAdapterVersion, "adapter");
  MoeAdapter user = read_adapter(r);
  MoeAdapter item = read_adapter(r);
  return {std::move(user), std::move(item)};
}

}  // namespace xrec
