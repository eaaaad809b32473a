#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "kvdistill/autodiff.hpp"

namespace kvdistill {

struct LossWeights {
  double alpha = 1.0;        // cache branch weight
  double delta = 1.0;        // graph branch weight in the training mixture
  double lambda = 1.0;       // teacher-forcing (focal) weight
  double gamma_focal = 2.0;  // focal focusing parameter
  double tau = 100.0;        // logit scale for cosine branches

  // Throws ConfigError.
  void validate() const;
};

// l_zs + alpha * l_cache + delta * tau * l_graph. l_graph holds raw cosines.
std::vector<double> train_logits(std::span<const double> l_zs, std::span<const double> l_cache,
                                 std::span<const double> l_graph, const LossWeights& w);
// -log softmax(logits)_y via log-sum-exp.
double cross_entropy(std::span<const double> logits, std::size_t y);
// p_t = softmax(tau * graph_logits)_y; -(1 - p_t)^gamma * log(p_t).
double focal_loss(std::span<const double> graph_logits, std::size_t y, double gamma, double tau);
double total_loss(std::span<const double> l_zs, std::span<const double> l_cache,
                  std::span<const double> l_graph, std::size_t y, const LossWeights& w);

// Batched differentiable forms. Logit arguments are n x C; labels has n entries.
namespace ad {

// n x 1 per-row cross-entropy.
Var cross_entropy(Var logits, std::span<const std::size_t> labels);
// n x 1 per-row focal loss of softmax(tau * graph).
Var focal_loss(Var graph, std::span<const std::size_t> labels, double gamma, double tau);

}  // namespace ad

struct LossTerms {
  Var total;  // 1 x 1: mean CE on the mixture + lambda * mean focal
  Var ce;     // 1 x 1
  Var focal;  // 1 x 1; zero when no graph branch is given
};

// Batched total objective. Without a graph branch the mixture reduces to
// l_zs + alpha * l_cache and the focal term is zero.
LossTerms total_loss_ad(Var l_zs, Var l_cache, std::optional<Var> l_graph,
                        std::span<const std::size_t> labels, const LossWeights& w);

}  // namespace kvdistill
