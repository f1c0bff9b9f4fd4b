#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "xrec/adapter.hpp"
#include "xrec/autodiff.hpp"
#include "xrec/serialize.hpp"
#include "xrec/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

using namespace xrec;

namespace {

constexpr double kTol = 1e-4;

Tensor weighted_sum(Tape& tape, const Tensor& out, unsigned long long seed) {
  std::mt19937_64 rng(seed);
  Tensor w = Tensor::leaf(uniform_mat(out.rows(), out.cols(), -1.0, 1.0, rng));
  return sum(tape, multiply(tape, out, w));
}

Mat zeros(long rows, long cols) { return Mat::Zero(rows, cols); }

Mat identity(long n) {
  Mat m = Mat::Zero(n, n);
  for (long i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

/// Adapter with hand-set parameters; noise and dropout off unless asked for.
MoeAdapter manual_adapter(int num_experts, int in_dim, int out_dim,
                          const std::vector<Mat>& weights, const std::vector<Mat>& biases,
                          const Mat& gate, double dropout = 0.0, double noise = 0.0) {
  MoeAdapter a;
  a.config.num_experts = num_experts;
  a.config.in_dim = in_dim;
  a.config.out_dim = out_dim;
  a.config.dropout_rate = dropout;
  a.config.noise_factor = noise;
  for (const Mat& w : weights) a.expert_weights.push_back(Tensor::leaf(w, true));
  for (const Mat& b : biases) a.expert_biases.push_back(Tensor::leaf(b, true));
  a.gate_weights = Tensor::leaf(gate, true);
  return a;
}

Mat run_inference(const MoeAdapter& adapter, const Mat& x) {
  Tape tape;
  std::mt19937_64 rng(0);  // unused in inference mode
  return adapt(tape, adapter, Tensor::leaf(x), rng).value();
}

/// Reads gate component k from the outside: zero every expert weight and give
/// expert k a bias of all ones in a 1-d output, so y == g_k.
double gate_component(const Mat& gate, const Mat& x, int num_experts, int in_dim, int k) {
  std::vector<Mat> weights(static_cast<std::size_t>(num_experts), zeros(1, in_dim));
  std::vector<Mat> biases(static_cast<std::size_t>(num_experts), zeros(1, 1));
  biases[static_cast<std::size_t>(k)] = Mat::Ones(1, 1);
  MoeAdapter probe = manual_adapter(num_experts, in_dim, 1, weights, biases, gate);
  return run_inference(probe, x)(0, 0);
}

/// Reference softmax gate computed directly with Eigen.
Mat reference_gate(const Mat& gate, const Mat& x) {
  Mat logits = x * gate.transpose();  // [1, K]
  double m = logits.maxCoeff();
  Mat e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

std::string temp_path(const std::string& name) {
  return std::string("/tmp/xrec_adapter_test_") + name;
}

}  // namespace

TEST_CASE("single identity expert passes the input through unchanged") {
  // One expert means the gate is softmax over one logit, which is exactly 1.
  MoeAdapter a = manual_adapter(1, 3, 3, {identity(3)}, {zeros(1, 3)}, zeros(1, 3));
  Mat x(1, 3);
  x << 0.25, -1.5, 2.0;
  Mat y = run_inference(a, x);
  CHECK(y.rows() == 1);
  CHECK(y.cols() == 3);
  for (long j = 0; j < 3; ++j) CHECK(y(0, j) == x(0, j));
}

TEST_CASE("two identical experts give the shared expert output for any gate") {
  std::mt19937_64 rng(7);
  Mat w = uniform_mat(4, 3, -1.0, 1.0, rng);
  Mat b = uniform_mat(1, 4, -1.0, 1.0, rng);
  for (int trial = 0; trial < 5; ++trial) {
    Mat gate = uniform_mat(2, 3, -2.0, 2.0, rng);
    Mat x = uniform_mat(1, 3, -1.0, 1.0, rng);
    MoeAdapter a = manual_adapter(2, 3, 4, {w, w}, {b, b}, gate);
    Mat expected = x * w.transpose() + b;
    Mat y = run_inference(a, x);
    for (long j = 0; j < 4; ++j)
      CHECK(y(0, j) == doctest::Approx(expected(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("forced two-expert gate: logits [ln 3, 0] mix 2x and 0x into 1.5") {
  // gate logits = gate_weights * x with x = [1], so the gate rows ARE the
  // logits.  softmax([ln 3, 0]) = [3/4, 1/4]; y = 0.75*2 + 0.25*0 = 1.5.
  Mat gate(2, 1);
  gate << std::log(3.0), 0.0;
  Mat x = Mat::Ones(1, 1);

  Mat w1 = 2.0 * identity(1);
  Mat w2 = zeros(1, 1);
  MoeAdapter a = manual_adapter(2, 1, 1, {w1, w2}, {zeros(1, 1), zeros(1, 1)}, gate);
  CHECK(run_inference(a, x)(0, 0) == doctest::Approx(1.5).epsilon(1e-12));

  // Expose the two gate weights directly through all-or-nothing biases.
  CHECK(gate_component(gate, x, 2, 1, 0) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(gate_component(gate, x, 2, 1, 1) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("gate is a probability vector and matches a direct softmax") {
  std::mt19937_64 rng(11);
  const int experts = 4;
  const int in_dim = 3;
  for (int trial = 0; trial < 20; ++trial) {
    Mat gate = uniform_mat(experts, in_dim, -2.0, 2.0, rng);
    Mat x = uniform_mat(1, in_dim, -1.0, 1.0, rng);
    Mat expected = reference_gate(gate, x);
    double total = 0.0;
    for (int k = 0; k < experts; ++k) {
      double g = gate_component(gate, x, experts, in_dim, k);
      CHECK(g >= 0.0);
      CHECK(g == doctest::Approx(expected(0, k)).epsilon(1e-12));
      total += g;
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("constructor draws parameters within +-1/sqrt(in_dim) deterministically") {
  AdapterConfig cfg;
  cfg.num_experts = 3;
  cfg.in_dim = 16;
  cfg.out_dim = 8;
  std::mt19937_64 rng_a(42);
  std::mt19937_64 rng_b(42);
  MoeAdapter a(cfg, rng_a);
  MoeAdapter b(cfg, rng_b);

  double bound = 1.0 / std::sqrt(16.0);
  double max_abs = 0.0;
  auto pa = a.params();
  auto pb = b.params();
  REQUIRE(pa.size() == pb.size());
  REQUIRE(pa.size() == 3u * 2u + 1u);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].requires_grad());
    CHECK(pa[i].value() == pb[i].value());
    max_abs = std::max(max_abs, pa[i].value().cwiseAbs().maxCoeff());
    CHECK(pa[i].value().cwiseAbs().maxCoeff() <= bound);
  }
  // Sanity: the draw actually spreads over the range instead of collapsing.
  CHECK(max_abs > 0.5 * bound);

  std::mt19937_64 rng_c(43);
  MoeAdapter c(cfg, rng_c);
  CHECK(c.params()[0].value() != a.params()[0].value());
}

TEST_CASE("invalid configs and input shapes are rejected") {
  std::mt19937_64 rng(1);
  AdapterConfig bad;
  bad.num_experts = 0;
  CHECK_THROWS_AS(MoeAdapter(bad, rng), TensorError);
  bad = AdapterConfig{};
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(MoeAdapter(bad, rng), TensorError);
  bad = AdapterConfig{};
  bad.noise_factor = -0.5;
  CHECK_THROWS_AS(MoeAdapter(bad, rng), TensorError);

  AdapterConfig cfg;
  cfg.num_experts = 2;
  cfg.in_dim = 4;
  cfg.out_dim = 4;
  MoeAdapter a(cfg, rng);
  Tape tape;
  std::mt19937_64 r2(0);
  Mat wrong = Mat::Zero(1, 5);
  CHECK_THROWS_WITH_AS(adapt(tape, a, Tensor::leaf(wrong), r2),
                       doctest::Contains("in_dim"), TensorError);
  Mat col = Mat::Zero(4, 1);
  CHECK_THROWS_AS(adapt(tape, a, Tensor::leaf(col), r2), TensorError);
}

TEST_CASE("gradients through the adapter match numeric differentiation") {
  AdapterConfig cfg;
  cfg.num_experts = 3;
  cfg.in_dim = 4;
  cfg.out_dim = 5;
  cfg.dropout_rate = 0.0;  // the check requires a deterministic function
  cfg.noise_factor = 0.0;
  std::mt19937_64 rng(99);
  MoeAdapter base(cfg, rng);
  base.training = false;
  Mat x = uniform_mat(1, 4, -1.0, 1.0, rng);
  std::mt19937_64 unused(0);

  auto through = [&](const std::function<MoeAdapter(const Tensor&)>& substitute,
                     const Tensor& maybe_x) {
    return [&, substitute, maybe_x](Tape& t, const Tensor& v) {
      MoeAdapter a = substitute(v);
      Tensor input = maybe_x.defined() ? maybe_x : v;
      std::mt19937_64 r(0);
      return weighted_sum(t, adapt(t, a, input, r), 555);
    };
  };

  // w.r.t. the input vector.
  auto keep = [&](const Tensor&) { return base; };
  CHECK(grad_check(through(keep, Tensor{}), x) <= kTol);

  Tensor fixed_x = Tensor::leaf(x);
  // w.r.t. each expert weight matrix and bias.
  for (int k = 0; k < cfg.num_experts; ++k) {
    auto sub_w = [&, k](const Tensor& v) {
      MoeAdapter a = base;
      a.expert_weights[static_cast<std::size_t>(k)] = v;
      return a;
    };
    CHECK(grad_check(through(sub_w, fixed_x), base.expert_weights[static_cast<std::size_t>(k)].value()) <= kTol);
    auto sub_b = [&, k](const Tensor& v) {
      MoeAdapter a = base;
      a.expert_biases[static_cast<std::size_t>(k)] = v;
      return a;
    };
    CHECK(grad_check(through(sub_b, fixed_x), base.expert_biases[static_cast<std::size_t>(k)].value()) <= kTol);
  }
  // w.r.t. the gate weights.
  auto sub_g = [&](const Tensor& v) {
    MoeAdapter a = base;
    a.gate_weights = v;
    return a;
  };
  CHECK(grad_check(through(sub_g, fixed_x), base.gate_weights.value()) <= kTol);
}

TEST_CASE("inference mode is deterministic; training mode is not") {
  AdapterConfig cfg;
  cfg.num_experts = 4;
  cfg.in_dim = 6;
  cfg.out_dim = 6;
  cfg.dropout_rate = 0.0;  // isolate the gate noise
  cfg.noise_factor = 0.05;
  std::mt19937_64 rng(3);
  MoeAdapter a(cfg, rng);
  Mat x = uniform_mat(1, 6, -1.0, 1.0, rng);

  a.training = false;
  Mat y1 = run_inference(a, x);
  for (int i = 0; i < 10; ++i) CHECK(run_inference(a, x) == y1);

  a.training = true;
  Tape tape;
  std::mt19937_64 noisy(1);
  Mat t1 = adapt(tape, a, Tensor::leaf(x), noisy).value();
  Mat t2 = adapt(tape, a, Tensor::leaf(x), noisy).value();
  CHECK(t1 != t2);
}

TEST_CASE("inverted dropout zeroes or exactly rescales coordinates") {
  AdapterConfig cfg;
  cfg.num_experts = 2;
  cfg.in_dim = 4;
  cfg.out_dim = 32;
  cfg.dropout_rate = 0.5;  // keep scale 1/0.5 == 2 is exact in binary floating point
  cfg.noise_factor = 0.0;
  std::mt19937_64 rng(5);
  MoeAdapter a(cfg, rng);
  Mat x = uniform_mat(1, 4, 0.5, 1.0, rng);

  a.training = false;
  Mat clean = run_inference(a, x);

  a.training = true;
  Tape tape;
  std::mt19937_64 mask_rng(17);
  Mat noisy = adapt(tape, a, Tensor::leaf(x), mask_rng).value();
  int zeroed = 0;
  for (long j = 0; j < noisy.cols(); ++j) {
    if (noisy(0, j) == 0.0)
      ++zeroed;
    else
      CHECK(noisy(0, j) == 2.0 * clean(0, j));
  }
  CHECK(zeroed > 0);
  CHECK(zeroed < noisy.cols());
}

TEST_CASE("training-mode mean over many draws approaches the inference output") {
  // Inverted dropout is mean-preserving, and the small gate noise only
  // perturbs at second order, so the empirical mean lands within 2 percent
  // of the deterministic output per coordinate.
  AdapterConfig cfg;
  cfg.num_experts = 3;
  cfg.in_dim = 4;
  cfg.out_dim = 6;
  std::mt19937_64 build(21);
  MoeAdapter a = manual_adapter(
      3, 4, 6,
      {uniform_mat(6, 4, 0.2, 1.0, build), uniform_mat(6, 4, 0.2, 1.0, build),
       uniform_mat(6, 4, 0.2, 1.0, build)},
      {uniform_mat(1, 6, 0.5, 1.0, build), uniform_mat(1, 6, 0.5, 1.0, build),
       uniform_mat(1, 6, 0.5, 1.0, build)},
      uniform_mat(3, 4, -1.0, 1.0, build), /*dropout=*/0.2, /*noise=*/0.01);
  Mat x = uniform_mat(1, 4, 0.5, 1.0, build);

  a.training = false;
  Mat clean = run_inference(a, x);
  for (long j = 0; j < clean.cols(); ++j) CHECK(clean(0, j) > 0.1);

  a.training = true;
  const int draws = 20000;
  Mat total = Mat::Zero(1, 6);
  std::mt19937_64 sample_rng(123);
  for (int i = 0; i < draws; ++i) {
    Tape tape;
    total += adapt(tape, a, Tensor::leaf(x), sample_rng).value();
  }
  Mat mean = total / static_cast<double>(draws);
  for (long j = 0; j < 6; ++j) {
    double rel = std::abs(mean(0, j) - clean(0, j)) / std::abs(clean(0, j));
    CHECK(rel <= 0.02);
  }
}

TEST_CASE("fixed input pair is deterministic per seed and bounded") {
  auto [u1, i1] = make_fixed_inputs(8, 77);
  auto [u2, i2] = make_fixed_inputs(8, 77);
  CHECK(u1 == u2);
  CHECK(i1 == i2);
  CHECK(u1.rows() == 1);
  CHECK(u1.cols() == 8);
  CHECK(i1.rows() == 1);
  CHECK(i1.cols() == 8);
  CHECK(u1 != i1);
  CHECK(u1.cwiseAbs().maxCoeff() <= 0.1);
  CHECK(i1.cwiseAbs().maxCoeff() <= 0.1);

  auto [u3, i3] = make_fixed_inputs(8, 78);
  CHECK(u3 != u1);
  CHECK(i3 != i1);

  // The user row is drawn before the item row from a single engine.
  std::mt19937_64 rng(77);
  Mat expect_user = uniform_mat(1, 8, -0.1, 0.1, rng);
  Mat expect_item = uniform_mat(1, 8, -0.1, 0.1, rng);
  CHECK(u1 == expect_user);
  CHECK(i1 == expect_item);

  CHECK_THROWS_AS(make_fixed_inputs(0, 1), TensorError);
}

TEST_CASE("fixed input adapted repeatedly gives the identical vector every time") {
  AdapterConfig cfg;
  cfg.num_experts = 4;
  cfg.in_dim = 8;
  cfg.out_dim = 12;
  std::mt19937_64 rng(31);
  MoeAdapter a(cfg, rng);
  a.training = false;
  auto [user_fixed, item_fixed] = make_fixed_inputs(8, 9);

  Mat first = run_inference(a, user_fixed);
  for (int pair = 0; pair < 10; ++pair) CHECK(run_inference(a, user_fixed) == first);
  Mat item_first = run_inference(a, item_fixed);
  for (int pair = 0; pair < 10; ++pair) CHECK(run_inference(a, item_fixed) == item_first);
}

TEST_CASE("adapter checkpoint round-trips both adapters bitwise") {
  AdapterConfig ucfg;
  ucfg.num_experts = 3;
  ucfg.in_dim = 5;
  ucfg.out_dim = 7;
  ucfg.dropout_rate = 0.25;
  ucfg.noise_factor = 0.02;
  ucfg.seed = 42;
  AdapterConfig icfg = ucfg;
  icfg.num_experts = 2;
  std::mt19937_64 rng(8);
  MoeAdapter user(ucfg, rng);
  MoeAdapter item(icfg, rng);

  std::string path = temp_path("roundtrip.bin");
  save_adapters(path, user, item);
  auto [user2, item2] = load_adapters(path);

  CHECK(user2.config.num_experts == 3);
  CHECK(item2.config.num_experts == 2);
  CHECK(user2.config.in_dim == 5);
  CHECK(user2.config.out_dim == 7);
  CHECK(user2.config.dropout_rate == 0.25);
  CHECK(user2.config.noise_factor == 0.02);
  CHECK(user2.config.seed == 42);
  CHECK_FALSE(user2.training);

  auto pu = user.params();
  auto pu2 = user2.params();
  REQUIRE(pu.size() == pu2.size());
  for (std::size_t i = 0; i < pu.size(); ++i) {
    CHECK(pu2[i].requires_grad());
    CHECK(pu[i].value() == pu2[i].value());
  }
  auto pi = item.params();
  auto pi2 = item2.params();
  REQUIRE(pi.size() == pi2.size());
  for (std::size_t i = 0; i < pi.size(); ++i) CHECK(pi[i].value() == pi2[i].value());

  // The loaded adapters behave identically.
  Mat x = uniform_mat(1, 5, -1.0, 1.0, rng);
  user.training = false;
  CHECK(run_inference(user, x) == run_inference(user2, x));

  std::remove(path.c_str());
}

TEST_CASE("loading a file that is not an adapter checkpoint fails cleanly") {
  std::string path = temp_path("garbage.bin");
  {
    BinWriter w(path);
    w.u64(0x1234567812345678ull);
    w.u64(1);
    w.close();
  }
  CHECK_THROWS_AS(load_adapters(path), FormatError);
  CHECK_THROWS_AS(load_adapters(temp_path("missing.bin")), FormatError);
  std::remove(path.c_str());
}
