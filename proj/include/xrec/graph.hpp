#pragma once

#include "xrec/autodiff.hpp"
#include "xrec/tensor.hpp"

#include <utility>
#include <vector>

namespace xrec {

/// Bipartite user-item interaction graph with per-side adjacency lists.
struct InteractionGraph {
  int num_users = 0;
  int num_items = 0;
  std::vector<std::pair<int, int>> edges;             // unique, sorted (user, item)
  std::vector<std::vector<int>> user_neighbors;       // items per user
  std::vector<std::vector<int>> item_neighbors;       // users per item

  /// Validates id ranges, de-duplicates edges, and builds adjacency.
  static InteractionGraph build(int num_users, int num_items,
                                std::vector<std::pair<int, int>> edges);

  bool empty() const { return edges.empty(); }
};

struct GnnConfig {
  int num_layers = 2;        // propagation depth L
  int embed_dim = 32;        // d_g
  double learning_rate = 1e-3;
  double l2_lambda = 1e-4;
  int num_neg_samples = 1;
  int epochs = 400;          // cap; training stops earlier on loss plateau
  unsigned long long seed = 1;
};

struct EmbeddingTable {
  Mat user_vectors;  // num_users x d_g
  Mat item_vectors;  // num_items x d_g
};

/// k-core result: the filtered graph plus compact-id -> original-id maps.
struct KCoreResult {
  InteractionGraph graph;
  std::vector<int> user_ids;  // user_ids[new_id] == original id
  std::vector<int> item_ids;
};

/// Maximal subgraph where every remaining user and item has degree >= k,
/// found by iterative peeling.  No k-core -> empty graph (not an error).
KCoreResult k_core_filter(const InteractionGraph& graph, int k);

/// Symmetric sqrt-degree propagation:
///   e_u^(l+1) = sum_{i in N(u)} e_i^(l) / sqrt(|N(u)|*|N(i)|)
/// and symmetrically for items; the output is the arithmetic mean of layers
/// 0..L.  Zero-degree nodes keep their base vector at every layer.
EmbeddingTable lightgcn_propagate(const InteractionGraph& graph, const EmbeddingTable& base,
                                  int num_layers);

/// Tape-recorded propagation used during training so gradients reach the
/// base embeddings.  Returns propagated (user, item) tensors.
std::pair<Tensor, Tensor> lightgcn_propagate_t(Tape& tape, const InteractionGraph& graph,
                                               const Tensor& user_base,
                                               const Tensor& item_base, int num_layers);

/// -ln sigmoid(dot(user,pos) - dot(user,neg)) + l2_lambda * params_norm_sq.
double bpr_loss(const Mat& user, const Mat& pos_item, const Mat& neg_item, double l2_lambda,
                double params_norm_sq);

/// Tape variant over [B, d] row batches; the regularization term is the
/// batch-mean squared norm of the three gathered embedding rows.
Tensor bpr_loss_t(Tape& tape, const Tensor& users, const Tensor& pos_items,
                  const Tensor& neg_items, double l2_lambda);

/// Initializes base embeddings uniform in [-0.1, 0.1] under config.seed and
/// runs full-batch BPR epochs (uniform negative sampling, propagation each
/// step) until the loss plateaus or config.epochs is reached.  Returns the
/// final propagated table.
EmbeddingTable train_gnn(const InteractionGraph& graph, const GnnConfig& config);

}  // namespace xrec
