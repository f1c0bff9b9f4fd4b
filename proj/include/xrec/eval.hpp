#pragma once

#include "xrec/datagen.hpp"
#include "xrec/lm.hpp"
#include "xrec/tensor.hpp"

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace xrec {

/// Errors raised by metric computation or the judge client.
class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The judge endpoint could not be reached (after retries) or refused the request.
class JudgeUnavailable : public EvalError {
 public:
  using EvalError::EvalError;
};

/// The judge replied, but no score could be parsed out of the reply.
class JudgeUnparseable : public EvalError {
 public:
  JudgeUnparseable(const std::string& message, std::string raw)
      : EvalError(message + " (raw reply: \"" + raw + "\")"), raw_reply(std::move(raw)) {}
  std::string raw_reply;
};

// --------------------------------------------------------------------------
// Unique sentence ratio
// --------------------------------------------------------------------------

/// Fraction of distinct strings (after trimming surrounding whitespace).
/// Errors on an empty list.
double usr(const std::vector<std::string>& explanations);

// --------------------------------------------------------------------------
// Token-similarity score over contextual embeddings
// --------------------------------------------------------------------------

struct EmbedScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Provides one embedding row per token of a text.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Mat embed(const std::string& text) const = 0;
};

/// Embeds text with a frozen language model's final hidden states.
class LmEmbedder : public Embedder {
 public:
  explicit LmEmbedder(const ToyLm& lm) : lm_(&lm) {}
  Mat embed(const std::string& text) const override { return contextual_embeddings(*lm_, text); }

 private:
  const ToyLm* lm_;
};

/// Greedy-matching token similarity: precision is the mean over candidate
/// tokens of the best cosine similarity against any reference token, recall
/// is the mirror image, and f1 is their harmonic mean.
EmbedScores embed_sim_score(const std::string& candidate, const std::string& reference,
                            const Embedder& embedder);

// --------------------------------------------------------------------------
// Regeneration likelihood
// --------------------------------------------------------------------------

/// Mean log-probability of the reference tokens conditioned on the candidate
/// as prefix, under the frozen model. Always <= 0; higher is better.
double likelihood_score(const std::string& candidate, const std::string& reference,
                        const ToyLm& lm);

// --------------------------------------------------------------------------
// Judge scoring (external endpoint or deterministic stub)
// --------------------------------------------------------------------------

/// Instruction sent to the judge endpoint as the system message.
inline constexpr const char* kJudgeSystemPrompt =
    "Score the given explanation against the ground truth on a scale from 0 to 100, focusing on "
    "the alignment of meanings rather than the formatting.\n"
    "Provide your score as a number and do not provide any other text.";

struct JudgeConfig {
  std::string endpoint;  // e.g. "http://127.0.0.1:8108"; may carry a path prefix
  std::string model = "local-judge";
  std::string system_prompt = kJudgeSystemPrompt;
  double timeout_seconds = 30.0;
  int max_retries = 3;
  int concurrency = 4;
  bool stub_mode = true;
};

/// Scores candidate-vs-reference alignment in [0, 100]. In stub mode the
/// score is round(100 * token-set F1); in live mode the configured
/// chat-completion endpoint is asked and its reply parsed for the first
/// integer. Throws JudgeUnavailable after retries are exhausted and
/// JudgeUnparseable when the reply holds no integer.
int judge_score(const std::string& candidate, const std::string& reference,
                const JudgeConfig& config);

/// The deterministic offline score: round(100 * token-set F1). Symmetric in
/// its arguments; exactly 100 on equal strings.
int judge_score_stub(const std::string& candidate, const std::string& reference);

// --------------------------------------------------------------------------
// Numeric-anomaly detection
// --------------------------------------------------------------------------

/// True when a generated explanation has degenerated into digit spam:
/// >= 30% of its non-whitespace characters are digits, or it contains a run
/// of >= 12 consecutive characters drawn from digits and '/'.
bool detect_numeric_anomaly(const std::string& explanation);

// --------------------------------------------------------------------------
// Aggregation and report rendering
// --------------------------------------------------------------------------

struct MetricRow {
  long sample_id = 0;
  std::string metric;
  double value = 0.0;
};

struct MetricStats {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
  long count = 0;
};

struct MetricReport {
  std::string variant;  // label for the report table row
  std::vector<MetricRow> rows;
  std::map<std::string, MetricStats> stats;
  double usr = 0.0;
  long anomaly_count = 0;
  std::map<std::string, long> excluded;  // per-metric missing-row counts
};

/// Computes per-metric mean and population standard deviation from rows.
/// Errors when there are no rows at all. usr/anomaly_count/excluded are the
/// caller's to fill (they are not derivable from the rows).
MetricReport aggregate(const std::vector<MetricRow>& rows);

/// Externally supplied per-variant score (mean, std) merged into the report
/// as an extra column.
struct ExternalScore {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Renders a markdown table with one row per variant, mean and std columns
/// per metric plus a USR column, the best value per column marked in bold,
/// exclusion and anomaly counts, the embedder footnote, and the emissions
/// accounting note. The external-score column appears only when `external`
/// is non-empty.
std::string render_report(const std::vector<MetricReport>& reports,
                          const std::map<std::string, ExternalScore>& external = {});

/// Writes "sample_id,metric,value" rows.
void write_rows_csv(const std::string& path, const std::vector<MetricRow>& rows);

/// Reads rows written by write_rows_csv.
std::vector<MetricRow> read_rows_csv(const std::string& path);

// --------------------------------------------------------------------------
// Evaluation driver
// --------------------------------------------------------------------------

struct EvalPair {
  long sample_id = 0;
  int uid = 0;
  int iid = 0;
  std::string candidate;
  std::string reference;
};

struct JoinResult {
  std::vector<EvalPair> pairs;
  long skipped = 0;  // generation-error rows and rows without ground truth
};

/// Joins generated rows with ground-truth samples on (uid, iid). Rows whose
/// generation failed, produced an empty string, or lack a ground-truth match
/// are counted in `skipped`.
JoinResult join_generated(const std::vector<GeneratedRow>& generated,
                          const std::vector<ExplanationSample>& truth);

struct EvalOptions {
  JudgeConfig judge;        // stub_mode=true by default
  bool with_judge = true;   // disable to skip judge scoring entirely
  std::string variant = "run";
};

/// Runs the full metric suite over candidate/reference pairs: token
/// similarity (precision/recall/f1), regeneration likelihood, judge score,
/// uniqueness ratio, and the anomaly counter. Judge failures make that row
/// missing (excluded), never zero.
MetricReport evaluate_pairs(const std::vector<EvalPair>& pairs, const ToyLm& lm,
                            const EvalOptions& options);

}  // namespace xrec
