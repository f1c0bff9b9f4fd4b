#pragma once

#include "xrec/autodiff.hpp"
#include "xrec/tensor.hpp"
#include "xrec/vocab.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace xrec {

struct ToyLmConfig {
  int d_lm = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq_len = 128;
  int vocab_size = 0;  // filled in when the vocabulary is built
  unsigned long long seed = 1;
  // Pretraining schedule (artifact plumbing, not a pinned contract).
  int max_epochs = 80;
  double pretrain_lr = 2e-3;
};

/// Decoder-only pre-norm transformer with learned positional embeddings.
/// Attention uses per-head projection matrices so all math stays in
/// row-major rank-2 ops.
struct ToyLm {
  struct Head {
    Tensor wq, wk, wv;  // [d_head, d_lm]
    Tensor wo;          // [d_lm, d_head]
  };
  struct Block {
    Tensor ln1_gain, ln1_bias;
    std::vector<Head> heads;
    Tensor ln2_gain, ln2_bias;
    Tensor ff_w1;  // [d_ff, d_lm]
    Tensor ff_b1;  // [1, d_ff]
    Tensor ff_w2;  // [d_lm, d_ff]
    Tensor ff_b2;  // [1, d_lm]
  };

  ToyLmConfig config;
  Vocab vocab;
  Tensor tok_embed;  // [vocab_size, d_lm]
  Tensor pos_embed;  // [max_seq_len, d_lm]
  std::vector<Block> blocks;
  Tensor final_gain, final_bias;
  Tensor out_proj;  // [vocab_size, d_lm]
  bool frozen = false;
  std::uint64_t digest = 0;

  static ToyLm init(const ToyLmConfig& config, const Vocab& vocab);

  std::vector<Tensor> params() const;
  std::uint64_t compute_digest() const;

  /// Marks every parameter grad-free and records the content digest.
  void freeze();
};

/// How adapted vectors enter the model at the reserved slots.
enum class InjectMode {
  kReplaceEveryLayer,    // overwrite the slot at the input of every block
  kReplaceLayerZeroOnly, // overwrite only the layer-0 token embedding
  kAdditiveEveryLayer,   // add to (rather than replace) the slot each block
};

using InjectionMap = std::map<long, Tensor>;  // position -> [1, d_lm] vector

/// Forward pass with reserved-slot injection.  Injection positions must be
/// exactly the positions holding <USER_EMBED>/<ITEM_EMBED>; gradients reach
/// the injected vectors summed over every layer that consumed them.
/// Returns logits, one row per position.
Tensor forward_injected(Tape& tape, const ToyLm& lm, const std::vector<int>& ids,
                        const InjectionMap& injections,
                        InjectMode mode = InjectMode::kReplaceEveryLayer);

/// Plain forward: reserved slots are pinned to the model's own embedding of
/// the reserved token, so a forward with explicit injections equal to those
/// embeddings reproduces these logits exactly.
Tensor forward_plain(Tape& tape, const ToyLm& lm, const std::vector<int>& ids);

/// Mean of -log p(target_t | prompt, target_<t) over target positions only.
Tensor nll_on_target(Tape& tape, const ToyLm& lm, const std::vector<int>& prompt_ids,
                     const InjectionMap& injections, const std::vector<int>& target_ids,
                     InjectMode mode = InjectMode::kReplaceEveryLayer);

/// Convenience wrapper evaluating nll_on_target without keeping the tape.
double nll_on_target_value(const ToyLm& lm, const std::vector<int>& prompt_ids,
                           const InjectionMap& injections, const std::vector<int>& target_ids,
                           InjectMode mode = InjectMode::kReplaceEveryLayer);

struct DecodeMode {
  bool greedy = true;
  double temperature = 1.0;  // used when greedy == false
};

/// Autoregressive decoding until <EOS>, max_new tokens, or a full context.
/// Deterministic in greedy mode and under fixed seed in temperature mode.
/// Returns detokenized text of the newly generated tokens.
std::string generate(const ToyLm& lm, const std::vector<int>& prompt_ids,
                     const InjectionMap& injections, const DecodeMode& mode, int max_new,
                     unsigned long long seed,
                     InjectMode inject = InjectMode::kReplaceEveryLayer);

/// Builds the vocabulary from the corpus and trains next-token prediction
/// until the mean epoch loss improves by less than 1e-3 or max_epochs is
/// reached; the returned model is frozen with its digest recorded.
ToyLm pretrain_lm(const std::vector<std::string>& corpus, ToyLmConfig config);

/// Versioned binary checkpoint: config, vocabulary, parameters, digest.
void save_lm(const std::string& path, const ToyLm& lm);
ToyLm load_lm(const std::string& path);

/// Final-layer hidden states (after the last norm) for each token of the
/// text, used as contextual embeddings by the evaluation metrics.
Mat contextual_embeddings(const ToyLm& lm, const std::string& text);

}  // namespace xrec
