#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "xrec/graph.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

using namespace xrec;

namespace {

/// Reference peeling oracle: repeatedly drop any node with degree < k,

/// tracking survivors by original id.
std::pair<std::set<int>, std::set<int>> brute_force_core(const InteractionGraph& g, int k) {
  std::set<int> users, items;
  for (int u = 0; u < g.num_users; ++u) users.insert(u);
  for (int i = 0; i < g.num_items; ++i) items.insert(i);
  bool changed = true;
  while (changed) {
    changed = false;
    auto degree_u = [&](int u) {
      int d = 0;
      for (auto [eu, ei] : g.edges)
        if (eu == u && items.count(ei)) ++d;
      return d;
    };
    auto degree_i = [&](int i) {
      int d = 0;
      for (auto [eu, ei] : g.edges)
        if (ei == i && users.count(eu)) ++d;
      return d;
    };
    for (auto it = users.begin(); it != users.end();) {
      if (degree_u(*it) < k) {
        it = users.erase(it);
        changed = true;
      } else {
        ++it;
      }
    }
    for (auto it = items.begin(); it != items.end();) {
      if (degree_i(*it) < k) {
        it = items.erase(it);
        changed = true;
      } else {
        ++it;
      }
    }
  }
  return {users, items};
}

}  // namespace

TEST_CASE("graph construction validates, deduplicates, and mirrors adjacency") {
  InteractionGraph g = InteractionGraph::build(2, 3, {{0, 1}, {0, 1}, {1, 2}, {0, 0}});
  CHECK(g.edges.size() == 3);  // duplicate collapsed
  CHECK(g.user_neighbors[0] == std::vector<int>{0, 1});
  CHECK(g.item_neighbors[1] == std::vector<int>{0});
  CHECK(g.item_neighbors[2] == std::vector<int>{1});

  CHECK_THROWS_AS(InteractionGraph::build(2, 3, {{2, 0}}), std::invalid_argument);
  CHECK_THROWS_AS(InteractionGraph::build(2, 3, {{0, 3}}), std::invalid_argument);
  CHECK_THROWS_AS(InteractionGraph::build(2, 3, {{-1, 0}}), std::invalid_argument);
}

TEST_CASE("k=1 core drops only isolated nodes") {
  InteractionGraph g = InteractionGraph::build(3, 3, {{0, 0}, {1, 0}});
  KCoreResult r = k_core_filter(g, 1);
  CHECK(r.user_ids == std::vector<int>{0, 1});
  CHECK(r.item_ids == std::vector<int>{0});
  CHECK(r.graph.edges.size() == 2);
}

TEST_CASE("degree-1 endpoints cascade a path graph to an empty 2-core") {
  // u0 - i0 - u1 - i1 as a path: edges (0,0), (1,0), (1,1).
  InteractionGraph g = InteractionGraph::build(2, 2, {{0, 0}, {1, 0}, {1, 1}});
  KCoreResult r = k_core_filter(g, 2);
  CHECK(r.graph.empty());
  CHECK(r.user_ids.empty());
  CHECK(r.item_ids.empty());
}

TEST_CASE("complete bipartite 3x3 is its own 3-core") {
  std::vector<std::pair<int, int>> edges;
  for (int u = 0; u < 3; ++u)
    for (int i = 0; i < 3; ++i) edges.emplace_back(u, i);
  InteractionGraph g = InteractionGraph::build(3, 3, edges);
  KCoreResult r = k_core_filter(g, 3);
  CHECK(r.graph.edges.size() == 9);
  CHECK(r.user_ids == std::vector<int>{0, 1, 2});
  CHECK(r.item_ids == std::vector<int>{0, 1, 2});
}

TEST_CASE("k-core matches the brute-force peeling oracle on random small graphs") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 30; ++trial) {
    int nu = 2 + static_cast<int>(rng() % 9);
    int ni = 2 + static_cast<int>(rng() % 9);
    std::vector<std::pair<int, int>> edges;
    for (int u = 0; u < nu; ++u)
      for (int i = 0; i < ni; ++i)
        if (rng() % 100 < 35) edges.emplace_back(u, i);
    InteractionGraph g = InteractionGraph::build(nu, ni, edges);
    for (int k = 1; k <= 4; ++k) {
      KCoreResult r = k_core_filter(g, k);
      auto [users, items] = brute_force_core(g, k);
      CHECK(std::set<int>(r.user_ids.begin(), r.user_ids.end()) == users);
      CHECK(std::set<int>(r.item_ids.begin(), r.item_ids.end()) == items);
      //

      // Every surviving node meets the degree bound.
      for (const auto& nb : r.graph.user_neighbors)
        if (!nb.empty() || !r.graph.edges.empty())
          CHECK(static_cast<int>(nb.size()) >= (r.graph.empty() ? 0 : k));
    }
  }
}

TEST_CASE("propagation reproduces the two-item hand example") {
  InteractionGraph g = InteractionGraph::build(1, 2, {{0, 0}, {0, 1}});
  EmbeddingTable base;
  base.user_vectors = Mat::Zero(1, 2);
  base.item_vectors = Mat(2, 2);
  base.item_vectors << 1, 0, 0, 1;

  EmbeddingTable out = lightgcn_propagate(g, base, 1);
  // Layer 1 for the user: [1,0]/sqrt(2*1) + [0,1]/sqrt(2*1) = [0.7071, 0.7071];

  // the output averages layer 0 ([0,0]) with layer 1.
  CHECK(out.user_vectors(0, 0) == doctest::Approx(0.35355339059327373).epsilon(1e-12));
  CHECK(out.user_vectors(0, 1) == doctest::Approx(0.35355339059327373).epsilon(1e-12));
  // Items average their base with the zero user vector propagated back.
  CHECK(out.item_vectors(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(out.item_vectors(1, 1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("propagation with no edges returns the base table") {
  InteractionGraph g = InteractionGraph::build(2, 2, {});
  std::mt19937_64 rng(3);
  EmbeddingTable base{uniform_mat(2, 3, -1, 1, rng), uniform_mat(2, 3, -1, 1, rng)};
  EmbeddingTable out = lightgcn_propagate(g, base, 3);
  CHECK((out.user_vectors - base.user_vectors).cwiseAbs().maxCoeff() == 0.0);
  CHECK((out.item_vectors - base.item_vectors).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zero-degree nodes keep their base vector") {
  InteractionGraph g = InteractionGraph::build(2, 2, {{0, 0}});
  std::mt19937_64 rng(4);
  EmbeddingTable base{uniform_mat(2, 2, -1, 1, rng), uniform_mat(2, 2, -1, 1, rng)};
  EmbeddingTable out = lightgcn_propagate(g, base, 2);
  // Pass-through up to the 1-ulp rounding of the layer average.
  CHECK((out.user_vectors.row(1) - base.user_vectors.row(1)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((out.item_vectors.row(1) - base.item_vectors.row(1)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("propagation is linear in the base embeddings") {
  std::mt19937_64 rng(5);
  InteractionGraph g = InteractionGraph::build(3, 4, {{0, 0}, {0, 1}, {1, 1}, {2, 3}, {1, 2}});
  EmbeddingTable base{uniform_mat(3, 4, -1, 1, rng), uniform_mat(4, 4, -1, 1, rng)};
  EmbeddingTable scaled{Mat(2.5 * base.user_vectors), Mat(2.5 * base.item_vectors)};
  EmbeddingTable a = lightgcn_propagate(g, base, 2);
  EmbeddingTable b = lightgcn_propagate(g, scaled, 2);
  CHECK((b.user_vectors - 2.5 * a.user_vectors).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((b.item_vectors - 2.5 * a.item_vectors).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tape propagation matches the plain version") {
  std::mt19937_64 rng(6);
  InteractionGraph g = InteractionGraph::build(3, 4, {{0, 0}, {0, 1}, {1, 1}, {2, 3}});
  EmbeddingTable base{uniform_mat(3, 3, -1, 1, rng), uniform_mat(4, 3, -1, 1, rng)};
  EmbeddingTable plain = lightgcn_propagate(g, base, 2);
  Tape tape;
  auto [u, i] = lightgcn_propagate_t(tape, g, Tensor::leaf(base.user_vectors),
                                     Tensor::leaf(base.item_vectors), 2);
  CHECK((u.value() - plain.user_vectors).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((i.value() - plain.item_vectors).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pairwise ranking loss hand values") {
  Mat u(1, 2), p(1, 2), n(1, 2);
  u << 1, 0;
  p << 1, 0;
  n << 0, 1;
  // Equal scores: sigma(0) = 0.5.
  CHECK(bpr_loss(u, p, p, 0.0, 0.0) == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  // Score difference 1: -ln sigma(1).
  CHECK(bpr_loss(u, p, n, 0.0, 0.0) == doctest::Approx(0.31326168751822286).epsilon(1e-12));
  // The regularizer adds lambda * params_norm_sq directly.
  CHECK(bpr_loss(u, p, n, 0.5, 2.0) ==
        doctest::Approx(0.31326168751822286 + 1.0).epsilon(1e-12));
}

TEST_CASE("ranking loss decreases as the score gap grows") {
  Mat u(1, 2), n(1, 2);
  u << 1, 0;
  n << 0, 1;
  double prev = 1e9;
  for (double s = -2.0; s <= 2.0; s += 0.5) {
    Mat p(1, 2);
    p << s, 0;
    double loss = bpr_loss(u, p, n, 0.0, 0.0);
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("batch ranking loss gradients pass the finite-difference check") {
  std::mt19937_64 rng(7);
  Mat users = uniform_mat(4, 3, -1, 1, rng);
  Mat pos = uniform_mat(4, 3, -1, 1, rng);
  Mat neg = uniform_mat(4, 3, -1, 1, rng);
  for (int vary = 0; vary < 3; ++vary) {
    auto f = [&](Tape& t, const Tensor& x) {
      Tensor tu = vary == 0 ? x : Tensor::leaf(users);
      Tensor tp = vary == 1 ? x : Tensor::leaf(pos);
      Tensor tn = vary == 2 ? x : Tensor::leaf(neg);
      return bpr_loss_t(t, tu, tp, tn, 0.01);
    };
    const Mat& point = vary == 0 ? users : vary == 1 ? pos : neg;
    CHECK(grad_check(f, point) <= 1e-4);
  }
}

TEST_CASE("batch ranking loss agrees with the scalar form") {
  std::mt19937_64 rng(8);
  Mat users = uniform_mat(3, 2, -1, 1, rng);
  Mat pos = uniform_mat(3, 2, -1, 1, rng);
  Mat neg = uniform_mat(3, 2, -1, 1, rng);
  Tape tape;
  Tensor loss = bpr_loss_t(tape, Tensor::leaf(users), Tensor::leaf(pos), Tensor::leaf(neg), 0.0);
  double expected = 0.0;
  for (int b = 0; b < 3; ++b)
    expected += bpr_loss(users.row(b), pos.row(b), neg.row(b), 0.0, 0.0);
  CHECK(loss.item() == doctest::Approx(expected / 3.0).epsilon(1e-12));
}

TEST_CASE("training is deterministic and zero epochs returns the propagated init") {
  InteractionGraph g =
      InteractionGraph::build(4, 5, {{0, 0}, {0, 1}, {1, 1}, {1, 2}, {2, 3}, {3, 4}, {2, 4}});
  GnnConfig cfg;
  cfg.embed_dim = 8;
  cfg.epochs = 40;
  cfg.seed = 11;

  EmbeddingTable a = train_gnn(g, cfg);
  EmbeddingTable b = train_gnn(g, cfg);
  CHECK((a.user_vectors - b.user_vectors).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.item_vectors - b.item_vectors).cwiseAbs().maxCoeff() == 0.0);

  GnnConfig zero = cfg;
  zero.epochs = 0;
  EmbeddingTable init = train_gnn(g, zero);
  std::mt19937_64 rng(cfg.seed);
  EmbeddingTable base{uniform_mat(4, 8, -0.1, 0.1, rng), uniform_mat(5, 8, -0.1, 0.1, rng)};
  EmbeddingTable propagated = lightgcn_propagate(g, base, cfg.num_layers);
  CHECK((init.user_vectors - propagated.user_vectors).cwiseAbs().maxCoeff() == 0.0);
  CHECK((init.item_vectors - propagated.item_vectors).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training separates two users with disjoint item sets") {
  // User 0 likes items 0..2, user 1 likes items 3..5.
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < 3; ++i) edges.emplace_back(0, i);
  for (int i = 3; i < 6; ++i) edges.emplace_back(1, i);
  InteractionGraph g = InteractionGraph::build(2, 6, edges);
  GnnConfig cfg;
  cfg.embed_dim = 8;
  cfg.epochs = 200;
  cfg.seed = 3;
  EmbeddingTable t = train_gnn(g, cfg);

  // Ranking AUC over positives vs non-interacted items, both users pooled.
  long correct = 0, total = 0;
  for (int u = 0; u < 2; ++u) {
    for (int ip = u * 3; ip < u * 3 + 3; ++ip) {
      for (int in = 0; in < 6; ++in) {
        if (in >= u * 3 && in < u * 3 + 3) continue;
        double sp = t.user_vectors.row(u).dot(t.item_vectors.row(ip));
        double sn = t.user_vectors.row(u).dot(t.item_vectors.row(in));
        correct += sp > sn ? 1 : 0;
        ++total;
      }
    }
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(total) > 0.8);
}

TEST_CASE("a user who interacted with every item stops training") {
  std::vector<std::pair<int, int>> edges = {{0, 0}, {0, 1}, {1, 0}};
  InteractionGraph g = InteractionGraph::build(2, 2, edges);
  GnnConfig cfg;
  CHECK_THROWS_WITH_AS(train_gnn(g, cfg), doctest::Contains("every item"), std::runtime_error);
}
