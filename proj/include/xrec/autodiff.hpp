#pragma once

#include "xrec/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace xrec {

/// The closed set of differentiable operations a tape can record.
enum class OpKind {
  kMatmul,
  kAdd,
  kMultiply,
  kScalarScale,
  kRowSoftmax,
  kLayerNorm,
  kGelu,
  kEmbeddingLookup,
  kConcatRows,
  kSliceRows,
  kMean,
  kCrossEntropyWithLogits,
  kSigmoid,
  kLog,
};

const char* op_name(OpKind kind);

/// Per-op attributes; only the fields relevant to the op kind are read.
struct OpAttrs {
  double scale = 1.0;            // scalar-scale factor
  bool trans_a = false;          // matmul: use a^T
  bool trans_b = false;          // matmul: use b^T
  std::vector<int> ids;          // embedding-lookup rows / cross-entropy targets
  long begin = 0;                // slice-rows [begin, end)
  long end = 0;
  double eps = 1e-5;             // layer-norm stabiliser
};

/// Records a DAG of tensor operations during the forward pass and replays it
/// in reverse to accumulate gradients.  Recording validates shapes eagerly
/// and rejects non-finite outputs so failures surface at the faulty op.
class Tape {
 public:
  /// Runs the op forward, appends a node, and returns the output tensor.
  /// The output requires grad iff any input does.
  Tensor record(OpKind kind, std::vector<Tensor> inputs, OpAttrs attrs = {});

  /// Accumulates gradients of `loss` (a scalar recorded on this tape) into
  /// every tensor on the tape that requires grad.  Gradients add up across
  /// calls; callers reset leaves via Tensor::clear_grad.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<Tensor> inputs;
    Tensor output;
    OpAttrs attrs;
    std::vector<Mat> saved;  // forward intermediates reused by backward
  };

  std::vector<Node> nodes_;
};

// ----- free-function op wrappers -------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor multiply(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor row_softmax(Tape& tape, const Tensor& a);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor gelu(Tape& tape, const Tensor& a);
Tensor embedding_lookup(Tape& tape, const Tensor& table, const std::vector<int>& ids);
Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts);
Tensor slice_rows(Tape& tape, const Tensor& a, long begin, long end);
Tensor mean(Tape& tape, const Tensor& a);
Tensor cross_entropy_with_logits(Tape& tape, const Tensor& logits,
                                 const std::vector<int>& targets);
Tensor sigmoid(Tape& tape, const Tensor& a);
Tensor log(Tape& tape, const Tensor& a);

/// Composition: sum of all entries, recorded as mean followed by a scale.
Tensor sum(Tape& tape, const Tensor& a);

/// Compares analytic gradients of `f` at `point` against central finite
/// differences.  Returns the maximum over coordinates of
///   |analytic - numeric| / max(1, |numeric|).
/// `f` must record a scalar on the tape it is handed.
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Mat& point,
                  double epsilon = 1e-3);

}  // namespace xrec
