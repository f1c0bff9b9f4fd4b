#include "xrec/graph.hpp"

#include "xrec/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace xrec {

InteractionGraph InteractionGraph::build(int num_users, int num_items,
                                         std::vector<std::pair<int, int>> edges) {
  if (num_users < 0 || num_items < 0)
    throw std::invalid_argument("graph: negative node counts");
  for (const auto& [u, i] : edges) {
    if (u < 0 || u >= num_users || i < 0 || i >= num_items)
      throw std::invalid_argument("graph: edge (" + std::to_string(u) + ", " +
                                  std::to_string(i) + ") out of range");
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  InteractionGraph g;
  g.num_users = num_users;
  g.num_items = num_items;
  g.edges = std::move(edges);
  g.user_neighbors.assign(static_cast<std::size_t>(num_users), {});
  g.item_neighbors.assign(static_cast<std::size_t>(num_items), {});
  for (const auto& [u, i] : g.edges) {
    g.user_neighbors[static_cast<std::size_t>(u)].push_back(i);
    g.item_neighbors[static_cast<std::size_t>(i)].push_back(u);
  }
  return g;
}

KCoreResult k_core_filter(const InteractionGraph& graph, int k) {
  if (k < 1) throw std::invalid_argument("k_core_filter: k must be >= 1");

  std::vector<int> user_deg(static_cast<std::size_t>(graph.num_users));
  std::vector<int> item_deg(static_cast<std::size_t>(graph.num_items));
  for (int u = 0; u < graph.num_users; ++u)
    user_deg[static_cast<std::size_t>(u)] =
        static_cast<int>(graph.user_neighbors[static_cast<std::size_t>(u)].size());
  for (int i = 0; i < graph.num_items; ++i)
    item_deg[static_cast<std::size_t>(i)] =
        static_cast<int>(graph.item_neighbors[static_cast<std::size_t>(i)].size());

  std::vector<bool> user_alive(static_cast<std::size_t>(graph.num_users), true);
  std::vector<bool> item_alive(static_cast<std::size_t>(graph.num_items), true);

  bool changed = true;
  while (changed) {
    changed = false;
    for (int u = 0; u < graph.num_users; ++u) {
      auto su = static_cast<std::size_t>(u);
      if (user_alive[su] && user_deg[su] < k) {
        user_alive[su] = false;
        changed = true;
        for (int i : graph.user_neighbors[su])
          if (item_alive[static_cast<std::size_t>(i)]) --item_deg[static_cast<std::size_t>(i)];
      }
    }
    for (int i = 0; i < graph.num_items; ++i) {
      auto si = static_cast<std::size_t>(i);
      if (item_alive[si] && item_deg[si] < k) {
        item_alive[si] = false;
        changed = true;
        for (int u : graph.item_neighbors[si])
          if (user_alive[static_cast<std::size_t>(u)]) --user_deg[static_cast<std::size_t>(u)];
      }
    }
  }

  KCoreResult result;
  std::vector<int> user_new(static_cast<std::size_t>(graph.num_users), -1);
  std::vector<int> item_new(static_cast<std::size_t>(graph.num_items), -1);
  for (int u = 0; u < graph.num_users; ++u)
    if (user_alive[static_cast<std::size_t>(u)]) {
      user_new[static_cast<std::size_t>(u)] = static_cast<int>(result.user_ids.size());
      result.user_ids.push_back(u);
    }
  for (int i = 0; i < graph.num_items; ++i)
    if (item_alive[static_cast<std::size_t>(i)]) {
      item_new[static_cast<std::size_t>(i)] = static_cast<int>(result.item_ids.size());
      result.item_ids.push_back(i);
    }

  std::vector<std::pair<int, int>> kept;
  for (const auto& [u, i] : graph.edges)
    if (user_alive[static_cast<std::size_t>(u)] && item_alive[static_cast<std::size_t>(i)])
      kept.emplace_back(user_new[static_cast<std::size_t>(u)],
                        item_new[static_cast<std::size_t>(i)]);

  result.graph = InteractionGraph::build(static_cast<int>(result.user_ids.size()),
                                         static_cast<int>(result.item_ids.size()),
                                         std::move(kept));
  return result;
}

namespace {

/// Normalized bipartite adjacency N[u][i] = 1/sqrt(deg_u * deg_i) on edges.
Mat normalized_adjacency(const InteractionGraph& g) {
  Mat n = Mat::Zero(g.num_users, g.num_items);
  for (const auto& [u, i] : g.edges) {
    double du = static_cast<double>(g.user_neighbors[static_cast<std::size_t>(u)].size());
    double di = static_cast<double>(g.item_neighbors[static_cast<std::size_t>(i)].size());
    n(u, i) = 1.0 / std::sqrt(du * di);
  }
  return n;
}

/// Rows of ones for zero-degree nodes, zeros elsewhere: the pass-through mask.
Mat zero_degree_mask(const std::vector<std::vector<int>>& neighbors, long cols) {
  Mat m = Mat::Zero(static_cast<long>(neighbors.size()), cols);
  for (std::size_t r = 0; r < neighbors.size(); ++r)
    if (neighbors[r].empty()) m.row(static_cast<long>(r)).setOnes();
  return m;
}

}  // namespace

EmbeddingTable lightgcn_propagate(const InteractionGraph& graph, const EmbeddingTable& base,
                                  int num_layers) {
  if (base.user_vectors.rows() != graph.num_users ||
      base.item_vectors.rows() != graph.num_items ||
      base.user_vectors.cols() != base.item_vectors.cols())
    throw std::invalid_argument("lightgcn_propagate: base table does not match graph");

  Mat n = normalized_adjacency(graph);
  Mat zu = zero_degree_mask(graph.user_neighbors, base.user_vectors.cols());
  Mat zi = zero_degree_mask(graph.item_neighbors, base.item_vectors.cols());

  Mat u = base.user_vectors;
  Mat i = base.item_vectors;
  Mat u_acc = u;
  Mat i_acc = i;
  for (int l = 0; l < num_layers; ++l) {
    Mat u_next = n * i + zu.cwiseProduct(u);
    Mat i_next = n.transpose() * u + zi.cwiseProduct(i);
    u = std::move(u_next);
    i = std::move(i_next);
    u_acc += u;
    i_acc += i;
  }
  double inv = 1.0 / static_cast<double>(num_layers + 1);
  return EmbeddingTable{inv * u_acc, inv * i_acc};
}

std::pair<Tensor, Tensor> lightgcn_propagate_t(Tape& tape, const InteractionGraph& graph,
                                               const Tensor& user_base,
                                               const Tensor& item_base, int num_layers) {
  Tensor n = Tensor::leaf(normalized_adjacency(graph));
  Tensor zu = Tensor::leaf(zero_degree_mask(graph.user_neighbors, user_base.cols()));
  Tensor zi = Tensor::leaf(zero_degree_mask(graph.item_neighbors, item_base.cols()));

  Tensor u = user_base;
  Tensor i = item_base;
  Tensor u_acc = user_base;
  Tensor i_acc = item_base;
  for (int l = 0; l < num_layers; ++l) {
    Tensor u_next = add(tape, matmul(tape, n, i), multiply(tape, zu, u));
    Tensor i_next = add(tape, matmul(tape, n, u, /*trans_a=*/true), multiply(tape, zi, i));
    u = u_next;
    i = i_next;
    u_acc = add(tape, u_acc, u);
    i_acc = add(tape, i_acc, i);
  }
  double inv = 1.0 / static_cast<double>(num_layers + 1);
  return {scale(tape, u_acc, inv), scale(tape, i_acc, inv)};
}

double bpr_loss(const Mat& user, const Mat& pos_item, const Mat& neg_item, double l2_lambda,
                double params_norm_sq) {
  if (user.size() != pos_item.size() || user.size() != neg_item.size())
    throw std::invalid_argument("bpr_loss: vectors must share a dimension");
  double diff = user.cwiseProduct(pos_item).sum() - user.cwiseProduct(neg_item).sum();
  double sig = diff >= 0.0 ? 1.0 / (1.0 + std::exp(-diff))
                           : std::exp(diff) / (1.0 + std::exp(diff));
  return -std::log(sig) + l2_lambda * params_norm_sq;
}

namespace {

Tensor row_dot(Tape& tape, const Tensor& a, const Tensor& b) {
  Tensor ones = Tensor::leaf(Mat::Ones(a.cols(), 1));
  return matmul(tape, multiply(tape, a, b), ones);  // [B, 1]
}

}  // namespace

Tensor bpr_loss_t(Tape& tape, const Tensor& users, const Tensor& pos_items,
                  const Tensor& neg_items, double l2_lambda) {
  Tensor diff = add(tape, row_dot(tape, users, pos_items),
                    scale(tape, row_dot(tape, users, neg_items), -1.0));
  Tensor rank = scale(tape, mean(tape, log(tape, sigmoid(tape, diff))), -1.0);
  Tensor norms = add(tape, add(tape, row_dot(tape, users, users),
                               row_dot(tape, pos_items, pos_items)),
                     row_dot(tape, neg_items, neg_items));
  return add(tape, rank, scale(tape, mean(tape, norms), l2_lambda));
}

EmbeddingTable train_gnn(const InteractionGraph& graph, const GnnConfig& config) {
  if (graph.num_users == 0 || graph.num_items == 0 || graph.empty())
    throw std::invalid_argument("train_gnn: graph is empty");
  if (config.num_layers < 1 || config.embed_dim < 2)
    throw std::invalid_argument("train_gnn: invalid config (need L >= 1, d_g >= 2)");
  for (int u = 0; u < graph.num_users; ++u)
    if (static_cast<int>(graph.user_neighbors[static_cast<std::size_t>(u)].size()) >=
        graph.num_items)
      throw std::runtime_error("train_gnn: user " + std::to_string(u) +
                               " interacted with every item; no negatives available");

  std::mt19937_64 rng(config.seed);
  Tensor user_base =
      Tensor::leaf(uniform_mat(graph.num_users, config.embed_dim, -0.1, 0.1, rng), true);
  Tensor item_base =
      Tensor::leaf(uniform_mat(graph.num_items, config.embed_dim, -0.1, 0.1, rng), true);

  std::vector<std::set<int>> seen(static_cast<std::size_t>(graph.num_users));
  for (const auto& [u, i] : graph.edges) seen[static_cast<std::size_t>(u)].insert(i);

  std::vector<Tensor> params{user_base, item_base};
  Adam opt(config.learning_rate);
  std::uniform_int_distribution<int> item_dist(0, graph.num_items - 1);

  // Negatives are resampled every epoch, so the epoch loss carries sampling
  // noise; the plateau test therefore compares against the best loss seen
  // and tolerates a few stalled epochs before stopping.
  double best_loss = std::numeric_limits<double>::infinity();
  int stalled = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> us, ps, ns;
    us.reserve(graph.edges.size() * static_cast<std::size_t>(config.num_neg_samples));
    std::vector<std::size_t> order(graph.edges.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t idx : order) {
      const auto& [u, i] = graph.edges[idx];
      for (int s = 0; s < config.num_neg_samples; ++s) {
        int neg = item_dist(rng);
        while (seen[static_cast<std::size_t>(u)].count(neg)) neg = item_dist(rng);
        us.push_back(u);
        ps.push_back(i);
        ns.push_back(neg);
      }
    }

    Tape tape;
    auto [u_prop, i_prop] =
        lightgcn_propagate_t(tape, graph, user_base, item_base, config.num_layers);
    Tensor ue = embedding_lookup(tape, u_prop, us);
    Tensor pe = embedding_lookup(tape, i_prop, ps);
    Tensor ne = embedding_lookup(tape, i_prop, ns);
    Tensor loss = bpr_loss_t(tape, ue, pe, ne, config.l2_lambda);
    zero_grads(params);
    tape.backward(loss);
    opt.step(params);

    double cur = loss.item();
    if (cur < best_loss * (1.0 - 1e-4)) {
      best_loss = cur;
      stalled = 0;
    } else if (++stalled >= 3) {
      break;
    }
  }

  EmbeddingTable base{user_base.value(), item_base.value()};
  return lightgcn_propagate(graph, base, config.num_layers);
}

}  // namespace xrec
