#include "xrec/lm.hpp"

#include "xrec/optim.hpp"
#include "xrec/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace xrec {

namespace {

constexpr std::uint64_t kLmMagic = 0x58524543544c4d31ull;
constexpr std::uint64_t kLmVersion = 1;
constexpr double kMaskValue = -1e9;

struct Pin {
  long pos;
  Tensor vec;
};

void check_config(const ToyLmConfig& c) {
  if (c.d_lm < 1 || c.n_layers < 1 || c.n_heads < 1 || c.max_seq_len < 1 || c.vocab_size < 1)
    throw TensorError("lm: invalid config dimensions");
  if (c.d_lm % c.n_heads != 0)
    throw TensorError("lm: d_lm " + std::to_string(c.d_lm) + " not divisible by n_heads " +
                      std::to_string(c.n_heads));
}

void check_ids(const std::vector<int>& ids, const ToyLmConfig& c, const char* what) {
  if (ids.empty()) throw TensorError(std::string(what) + ": empty id sequence");
  if (static_cast<int>(ids.size()) > c.max_seq_len)
    throw TensorError(std::string(what) + ": sequence too long (" + std::to_string(ids.size()) +
                      " > max_seq_len " + std::to_string(c.max_seq_len) + ")");
  for (int id : ids)
    if (id < 0 || id >= c.vocab_size)
      throw TensorError(std::string(what) + ": id " + std::to_string(id) + " out of range");
}

/// Replaces row pins[j].pos of x with the pinned [1, d] vector.
Tensor overwrite_rows(Tape& tape, const Tensor& x, const std::vector<Pin>& pins) {
  std::vector<Tensor> parts;
  long at = 0;
  for (const Pin& p : pins) {
    if (p.pos > at) parts.push_back(slice_rows(tape, x, at, p.pos));
    parts.push_back(p.vec);
    at = p.pos + 1;
  }
  if (at < x.rows()) parts.push_back(slice_rows(tape, x, at, x.rows()));
  return parts.size() == 1 ? parts[0] : concat_rows(tape, parts);
}

/// Adds the pinned vectors into their rows instead of replacing them.
Tensor add_at_rows(Tape& tape, const Tensor& x, const std::vector<Pin>& pins) {
  std::vector<Tensor> parts;
  long at = 0;
  for (const Pin& p : pins) {
    if (p.pos > at) parts.push_back(Tensor::leaf(Mat::Zero(p.pos - at, x.cols())));
    parts.push_back(p.vec);
    at = p.pos + 1;
  }
  if (at < x.rows()) parts.push_back(Tensor::leaf(Mat::Zero(x.rows() - at, x.cols())));
  Tensor padded = parts.size() == 1 ? parts[0] : concat_rows(tape, parts);
  return add(tape, x, padded);
}

/// Hidden states after the final norm (one row per position).
Tensor forward_hidden(Tape& tape, const ToyLm& lm, const std::vector<int>& ids,
                      const std::vector<Pin>& pins, InjectMode mode) {
  check_ids(ids, lm.config, "forward");
  for (const Pin& p : pins) {
    if (p.vec.rows() != 1 || p.vec.cols() != lm.config.d_lm)
      throw TensorError("forward: injection vector shape " + shape_str(p.vec.value()) +
                        " does not match d_lm " + std::to_string(lm.config.d_lm));
  }

  long n = static_cast<long>(ids.size());
  Tensor x = add(tape, embedding_lookup(tape, lm.tok_embed, ids),
                 slice_rows(tape, lm.pos_embed, 0, n));

  Mat mask = Mat::Zero(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = i + 1; j < n; ++j) mask(i, j) = kMaskValue;
  Tensor mask_t = Tensor::leaf(mask);

  int d_head = lm.config.d_lm / lm.config.n_heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
  bool additive = mode == InjectMode::kAdditiveEveryLayer;

  for (std::size_t l = 0; l < lm.blocks.size(); ++l) {
    const ToyLm::Block& b = lm.blocks[l];
    bool apply = !pins.empty() && (l == 0 || mode != InjectMode::kReplaceLayerZeroOnly);
    if (apply) x = additive ? add_at_rows(tape, x, pins) : overwrite_rows(tape, x, pins);

    Tensor h = layer_norm(tape, x, b.ln1_gain, b.ln1_bias);
    Tensor attn;
    for (const ToyLm::Head& head : b.heads) {
      Tensor q = matmul(tape, h, head.wq, false, true);
      Tensor k = matmul(tape, h, head.wk, false, true);
      Tensor v = matmul(tape, h, head.wv, false, true);
      Tensor s = add(tape, scale(tape, matmul(tape, q, k, false, true), inv_sqrt), mask_t);
      Tensor ctx = matmul(tape, row_softmax(tape, s), v);
      Tensor head_out = matmul(tape, ctx, head.wo, false, true);
      attn = attn.defined() ? add(tape, attn, head_out) : head_out;
    }
    x = add(tape, x, attn);

    Tensor f = layer_norm(tape, x, b.ln2_gain, b.ln2_bias);
    f = gelu(tape, add(tape, matmul(tape, f, b.ff_w1, false, true), b.ff_b1));
    f = add(tape, matmul(tape, f, b.ff_w2, false, true), b.ff_b2);
    x = add(tape, x, f);
  }
  return layer_norm(tape, x, lm.final_gain, lm.final_bias);
}

Tensor forward_with_pins(Tape& tape, const ToyLm& lm, const std::vector<int>& ids,
                         const std::vector<Pin>& pins, InjectMode mode) {
  Tensor hidden = forward_hidden(tape, lm, ids, pins, mode);
  return matmul(tape, hidden, lm.out_proj, false, true);  // [n, vocab_size]
}

std::vector<Pin> validate_injections(const std::vector<int>& ids,
                                     const InjectionMap& injections) {
  std::vector<Pin> pins;
  for (const auto& [pos, vec] : injections) {
    if (pos < 0 || pos >= static_cast<long>(ids.size()))
      throw TensorError("forward: injection position " + std::to_string(pos) +
                        " outside the sequence");
    int id = ids[static_cast<std::size_t>(pos)];
    if (id != Vocab::kUserEmbed && id != Vocab::kItemEmbed)
      throw TensorError("forward: injection position " + std::to_string(pos) +
                        " does not hold a reserved placeholder id");
    pins.push_back(Pin{pos, vec});
  }
  for (std::size_t p = 0; p < ids.size(); ++p) {
    int id = ids[p];
    if ((id == Vocab::kUserEmbed || id == Vocab::kItemEmbed) &&
        injections.find(static_cast<long>(p)) == injections.end())
      throw TensorError("forward: reserved placeholder at position " + std::to_string(p) +
                        " lacks an injection vector");
  }
  return pins;  // InjectionMap iteration is position-ordered
}

/// Pins for a plain forward: each placeholder slot is held at the model's
/// own embedding of its reserved token.
std::vector<Pin> self_pins(Tape& tape, const ToyLm& lm, const std::vector<int>& ids) {
  std::vector<Pin> pins;
  for (std::size_t p = 0; p < ids.size(); ++p) {
    int id = ids[p];
    if (id == Vocab::kUserEmbed || id == Vocab::kItemEmbed)
      pins.push_back(Pin{static_cast<long>(p), embedding_lookup(tape, lm.tok_embed, {id})});
  }
  return pins;
}

}  // namespace

ToyLm ToyLm::init(const ToyLmConfig& config, const Vocab& vocab) {
  ToyLmConfig cfg = config;
  cfg.vocab_size = vocab.size();
  check_config(cfg);

  std::mt19937_64 rng(cfg.seed);
  int d = cfg.d_lm;
  int d_head = d / cfg.n_heads;
  int d_ff = 2 * d;
  double wb = 1.0 / std::sqrt(static_cast<double>(d));
  double wb_head = 1.0 / std::sqrt(static_cast<double>(d_head));
  double wb_ff = 1.0 / std::sqrt(static_cast<double>(d_ff));

  ToyLm lm;
  lm.config = cfg;
  lm.vocab = vocab;
  lm.tok_embed = Tensor::leaf(normal_mat(cfg.vocab_size, d, 0.0, 0.1, rng), true);
  lm.pos_embed = Tensor::leaf(normal_mat(cfg.max_seq_len, d, 0.0, 0.1, rng), true);
  for (int l = 0; l < cfg.n_layers; ++l) {
    Block b;
    b.ln1_gain = Tensor::leaf(Mat::Ones(1, d), true);
    b.ln1_bias = Tensor::leaf(Mat::Zero(1, d), true);
    for (int h = 0; h < cfg.n_heads; ++h) {
      Head head;
      head.wq = Tensor::leaf(uniform_mat(d_head, d, -wb, wb, rng), true);
      head.wk = Tensor::leaf(uniform_mat(d_head, d, -wb, wb, rng), true);
      head.wv = Tensor::leaf(uniform_mat(d_head, d, -wb, wb, rng), true);
      head.wo = Tensor::leaf(uniform_mat(d, d_head, -wb_head, wb_head, rng), true);
      b.heads.push_back(std::move(head));
    }
    b.ln2_gain = Tensor::leaf(Mat::Ones(1, d), true);
    b.ln2_bias = Tensor::leaf(Mat::Zero(1, d), true);
    b.ff_w1 = Tensor::leaf(uniform_mat(d_ff, d, -wb, wb, rng), true);
    b.ff_b1 = Tensor::leaf(Mat::Zero(1, d_ff), true);
    b.ff_w2 = Tensor::leaf(uniform_mat(d, d_ff, -wb_ff, wb_ff, rng), true);
    b.ff_b2 = Tensor::leaf(Mat::Zero(1, d), true);
    lm.blocks.push_back(std::move(b));
  }
  lm.final_gain = Tensor::leaf(Mat::Ones(1, d), true);
  lm.final_bias = Tensor::leaf(Mat::Zero(1, d), true);
  lm.out_proj = Tensor::leaf(uniform_mat(cfg.vocab_size, d, -wb, wb, rng), true);
  return lm;
}

std::vector<Tensor> ToyLm::params() const {
  std::vector<Tensor> p{tok_embed, pos_embed};
  for (const Block& b : blocks) {
    p.push_back(b.ln1_gain);
    p.push_back(b.ln1_bias);
    for (const Head& h : b.heads) {
      p.push_back(h.wq);
      p.push_back(h.wk);
      p.push_back(h.wv);
      p.push_back(h.wo);
    }
    p.push_back(b.ln2_gain);
    p.push_back(b.ln2_bias);
    p.push_back(b.ff_w1);
    p.push_back(b.ff_b1);
    p.push_back(b.ff_w2);
    p.push_back(b.ff_b2);
  }
  p.push_back(final_gain);
  p.push_back(final_bias);
  p.push_back(out_proj);
  return p;
}

std::uint64_t ToyLm::compute_digest() const {
  Fnv1a h;
  h.i64(config.d_lm);
  h.i64(config.n_layers);
  h.i64(config.n_heads);
  h.i64(config.max_seq_len);
  h.i64(config.vocab_size);
  for (const Tensor& p : params()) h.mat(p.value());
  return h.digest();
}

void ToyLm::freeze() {
  for (Tensor p : params()) p.set_requires_grad(false);
  frozen = true;
  digest = compute_digest();
}

Tensor forward_injected(Tape& tape, const ToyLm& lm, const std::vector<int>& ids,
                        const InjectionMap& injections, InjectMode mode) {
  std::vector<Pin> pins = validate_injections(ids, injections);
  return forward_with_pins(tape, lm, ids, pins, mode);
}

Tensor forward_plain(Tape& tape, const ToyLm& lm, const std::vector<int>& ids) {
  return forward_with_pins(tape, lm, ids, self_pins(tape, lm, ids),
                           InjectMode::kReplaceEveryLayer);
}

Tensor nll_on_target(Tape& tape, const ToyLm& lm, const std::vector<int>& prompt_ids,
                     const InjectionMap& injections, const std::vector<int>& target_ids,
                     InjectMode mode) {
  if (prompt_ids.empty()) throw TensorError("nll_on_target: empty prompt");
  if (target_ids.empty()) throw TensorError("nll_on_target: empty target");
  std::vector<int> seq = prompt_ids;
  seq.insert(seq.end(), target_ids.begin(), target_ids.end());
  if (static_cast<int>(seq.size()) > lm.config.max_seq_len)
    throw TensorError("nll_on_target: sequence too long (" + std::to_string(seq.size()) +
                      " > max_seq_len " + std::to_string(lm.config.max_seq_len) + ")");

  std::vector<Pin> pins = validate_injections(seq, injections);
  Tensor logits = forward_with_pins(tape, lm, seq, pins, mode);
  long np = static_cast<long>(prompt_ids.size());
  long nt = static_cast<long>(target_ids.size());
  Tensor target_logits = slice_rows(tape, logits, np - 1, np + nt - 1);
  return cross_entropy_with_logits(tape, target_logits, target_ids);
}

double nll_on_target_value(const ToyLm& lm, const std::vector<int>& prompt_ids,
                           const InjectionMap& injections, const std::vector<int>& target_ids,
                           InjectMode mode) {
  Tape tape;
  return nll_on_target(tape, lm, prompt_ids, injections, target_ids, mode).item();
}

std::string generate(const ToyLm& lm, const std::vector<int>& prompt_ids,
                     const InjectionMap& injections, const DecodeMode& mode, int max_new,
                     unsigned long long seed, InjectMode inject) {
  check_ids(prompt_ids, lm.config, "generate");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<int> ids = prompt_ids;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(ids.size()) >= lm.config.max_seq_len) break;
    Tape tape;
    std::vector<Pin> pins = validate_injections(ids, injections);
    Tensor logits = forward_with_pins(tape, lm, ids, pins, inject);
    Mat row = logits.value().row(logits.rows() - 1);

    // Decoding never emits structural tokens; <EOS> stays available as the
    // stop signal.
    row(0, Vocab::kBos) = -1e30;
    row(0, Vocab::kUnk) = -1e30;
    row(0, Vocab::kUserEmbed) = -1e30;
    row(0, Vocab::kItemEmbed) = -1e30;

    int next;
    if (mode.greedy) {
      long best = 0;
      for (long j = 1; j < row.cols(); ++j)
        if (row(0, j) > row(0, best)) best = j;
      next = static_cast<int>(best);
    } else {
      double t = mode.temperature > 0.0 ? mode.temperature : 1.0;
      Eigen::ArrayXd z = row.row(0).array() / t;
      Eigen::ArrayXd p = (z - z.maxCoeff()).exp();
      p /= p.sum();
      double u = unit(rng);
      double acc = 0.0;
      long pick = p.size() - 1;
      for (long j = 0; j < p.size(); ++j) {
        acc += p(j);
        if (u <= acc) {
          pick = j;
          break;
        }
      }
      next = static_cast<int>(pick);
    }

    if (next == Vocab::kEos) break;
    ids.push_back(next);
    out.push_back(next);
  }
  return detokenize(out, lm.vocab);
}

ToyLm pretrain_lm(const std::vector<std::string>& corpus, ToyLmConfig config) {
  if (corpus.empty()) throw TensorError("pretrain_lm: empty corpus");

  Vocab vocab = Vocab::build(corpus);
  config.vocab_size = vocab.size();
  ToyLm lm = ToyLm::init(config, vocab);

  std::vector<std::vector<int>> seqs;
  for (const std::string& text : corpus) {
    std::vector<int> ids{Vocab::kBos};
    for (int id : tokenize(text, vocab)) ids.push_back(id);
    ids.push_back(Vocab::kEos);
    if (static_cast<int>(ids.size()) > config.max_seq_len)
      ids.resize(static_cast<std::size_t>(config.max_seq_len));
    if (ids.size() >= 2) seqs.push_back(std::move(ids));
  }
  if (seqs.empty()) throw TensorError("pretrain_lm: corpus has no trainable sequences");

  std::vector<Tensor> params = lm.params();
  Adam opt(config.pretrain_lr);
  std::mt19937_64 rng(config.seed + 0x9e3779b97f4a7c15ull);

  double prev_epoch_loss = 0.0;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    double total = 0.0;
    for (std::size_t idx : order) {
      const std::vector<int>& seq = seqs[idx];
      std::vector<int> targets(seq.begin() + 1, seq.end());
      Tape tape;
      Tensor logits = forward_plain(tape, lm, seq);
      Tensor sliced = slice_rows(tape, logits, 0, static_cast<long>(seq.size()) - 1);
      Tensor loss = cross_entropy_with_logits(tape, sliced, targets);
      zero_grads(params);
      tape.backward(loss);
      opt.step(params);
      total += loss.item();
    }
    double epoch_loss = total / static_cast<double>(seqs.size());
    if (epoch > 0 && prev_epoch_loss - epoch_loss < 1e-3) break;
    prev_epoch_loss = epoch_loss;
  }

  lm.freeze();
  return lm;
}

void save_lm(const std::string& path, const ToyLm& lm) {
  BinWriter w(path);
  w.u64(kLmMagic);
  w.u64(kLmVersion);
  w.i64(lm.config.d_lm);
  w.i64(lm.config.n_layers);
  w.i64(lm.config.n_heads);
  w.i64(lm.config.max_seq_len);
  w.i64(lm.config.vocab_size);
  w.u64(lm.config.seed);
  w.i64(lm.config.max_epochs);
  w.f64(lm.config.pretrain_lr);
  w.u64(static_cast<std::uint64_t>(lm.vocab.size()));
  for (const std::string& tok : lm.vocab.id_to_token) w.str(tok);
  for (const Tensor& p : lm.params()) w.mat(p.value());
  w.u64(lm.frozen ? 1 : 0);
  w.u64(lm.digest);
  w.close();
}

ToyLm load_lm(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kLmMagic, kLmVersion, "language-model");
  ToyLmConfig cfg;
  cfg.d_lm = static_cast<int>(r.i64());
  cfg.n_layers = static_cast<int>(r.i64());
  cfg.n_heads = static_cast<int>(r.i64());
  cfg.max_seq_len = static_cast<int>(r.i64());
  cfg.vocab_size = static_cast<int>(r.i64());
  cfg.seed = r.u64();
  cfg.max_epochs = static_cast<int>(r.i64());
  cfg.pretrain_lr = r.f64();

  std::uint64_t vocab_count = r.u64();
  std::vector<std::string> tokens;
  tokens.reserve(vocab_count);
  for (std::uint64_t i = 0; i < vocab_count; ++i) tokens.push_back(r.str());
  Vocab vocab = Vocab::from_tokens(std::move(tokens));

  ToyLm lm = ToyLm::init(cfg, vocab);
  for (Tensor p : lm.params()) {
    p.value() = r.mat();
    p.set_requires_grad(false);
  }
  lm.frozen = r.u64() != 0;
  lm.digest = r.u64();
  if (lm.frozen && lm.compute_digest() != lm.digest)
    throw FormatError(path + ": parameter digest mismatch (corrupt checkpoint)");
  return lm;
}

Mat contextual_embeddings(const ToyLm& lm, const std::string& text) {
  std::vector<int> toks = tokenize(text, lm.vocab);
  if (toks.empty()) throw TensorError("contextual_embeddings: text is empty after tokenization");
  std::vector<int> ids{Vocab::kBos};
  for (int id : toks) ids.push_back(id);
  if (static_cast<int>(ids.size()) > lm.config.max_seq_len)
    ids.resize(static_cast<std::size_t>(lm.config.max_seq_len));

  Tape tape;
  std::vector<Pin> pins = self_pins(tape, lm, ids);
  Tensor hidden = forward_hidden(tape, lm, ids, pins, InjectMode::kReplaceEveryLayer);
  return hidden.value().middleRows(1, hidden.rows() - 1);  // drop the <BOS> row
}

}  // namespace xrec
