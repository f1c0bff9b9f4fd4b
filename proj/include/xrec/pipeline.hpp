#pragma once

#include "xrec/adapter.hpp"
#include "xrec/datagen.hpp"
#include "xrec/graph.hpp"
#include "xrec/lm.hpp"

#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace xrec {

struct TrainConfig {
  int epochs = 1;
  int batch_size = 1;  // fixed at 1; larger batches are rejected
  double learning_rate = 1e-4;
  double weight_decay = 1e-6;
  unsigned long long seed = 1;
};

/// Rolling average-train-loss early stopping: inert for the first N/5
/// samples, then stops after N/10 samples without a strict ATL improvement.
struct EarlyStopState {
  explicit EarlyStopState(long dataset_size);

  long dataset_size = 0;   // N
  long enabled_after = 0;  // N/5
  long patience = 0;       // N/10
  std::deque<double> window;  // last 10 per-sample losses
  double best_atl = 0.0;
  long samples_since_best = 0;
  long processed = 0;

  double atl() const;
};

/// Pushes one sample loss; returns true when training should stop.
bool early_stop_update(EarlyStopState& state, double sample_loss);

struct AblationFlags {
  bool use_profiles = true;
  bool use_injection = true;
  bool use_embeddings = true;
  bool fixed_moe_inputs = false;
};

/// Named variants accepted by the command line.
AblationFlags parse_ablation(const std::string& name);
std::string ablation_name(const AblationFlags& flags);

struct PromptSpec {
  std::string template_text;  // final prompt text, placeholders inline
  std::optional<std::string> user_profile;
  std::optional<std::string> item_profile;
  std::optional<std::string> target;  // ground-truth explanation (training)
};

/// Builds the prompt for one sample: placeholders, profile sections, and
/// the fixed instruction, with flags removing the matching sections.
PromptSpec assemble_prompt(const ExplanationSample& sample, const Profiles& profiles,
                           const AblationFlags& flags);

struct LossTraceRow {
  long sample_index = 0;
  double loss = 0.0;
  double atl = 0.0;
};

void write_loss_trace(const std::string& path, const std::vector<LossTraceRow>& trace);

/// Adapter-only training: per-sample decoupled-weight-decay gradient
/// descent on the NLL of the ground-truth explanation, with the LM frozen.
/// Returns the full per-sample loss trace.
std::vector<LossTraceRow> train_adapter(const ToyLm& lm, MoeAdapter& user_adapter,
                                        MoeAdapter& item_adapter,
                                        const EmbeddingTable& embeddings,
                                        const std::vector<ExplanationSample>& samples,
                                        const Profiles& profiles, const TrainConfig& config,
                                        const AblationFlags& flags);

struct GenerationResult {
  std::vector<GeneratedRow> rows;  // input order
};

/// Inference over samples: assemble, adapt, inject, decode.  Per-sample
/// failures are recorded as error markers without aborting the batch.
/// Deterministic under seed; `n_jobs` bounds the worker pool.
GenerationResult generate_explanations(const ToyLm& lm, const MoeAdapter& user_adapter,
                                       const MoeAdapter& item_adapter,
                                       const EmbeddingTable& embeddings,
                                       const std::vector<ExplanationSample>& samples,
                                       const Profiles& profiles, const AblationFlags& flags,
                                       const DecodeMode& decode, int max_new,
                                       unsigned long long seed, int n_jobs = 1);

/// EmbeddingTable checkpoint (gnn_embeddings.bin).
void save_embeddings(const std::string& path, const EmbeddingTable& table);
EmbeddingTable load_embeddings(const std::string& path);

}  // namespace xrec
