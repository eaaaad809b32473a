#include "kvdistill/objective.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kvdistill/errors.hpp"

namespace kvdistill {
namespace {

void check_label(std::size_t y, std::size_t classes) {
  if (y >= classes) {
    throw ContractError("label " + std::to_string(y) + " out of range for " + std::to_string(classes) +
                        " classes");
  }
}

// Softmax of one row plus the log-probability of the label.
struct RowSoftmax {
  std::vector<double> probs;
  double log_p = 0.0;
  double one_minus_p = 0.0;  // sum of the non-label probabilities
};

RowSoftmax row_softmax(std::span<const double> z, std::size_t y, double scale) {
  RowSoftmax out;
  double mx = -1e300;
  for (double v : z) mx = std::max(mx, scale * v);
  double total = 0.0;
  out.probs.resize(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    out.probs[k] = std::exp(scale * z[k] - mx);
    total += out.probs[k];
  }
  for (std::size_t k = 0; k < z.size(); ++k) {
    out.probs[k] /= total;
    if (k != y) out.one_minus_p += out.probs[k];
  }
  out.log_p = scale * z[y] - mx - std::log(total);
  return out;
}

Matrix row_matrix(std::span<const double> v) { return Matrix::row_vector(v); }

}  // namespace

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !(delta >= 0.0) || !(lambda >= 0.0)) {
    throw ConfigError("loss weights: alpha, delta, lambda must be >= 0");
  }
  if (!(gamma_focal >= 0.0)) throw ConfigError("loss weights: gamma_focal must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("loss weights: tau must be > 0");
}

std::vector<double> train_logits(std::span<const double> l_zs, std::span<const double> l_cache,
                                 std::span<const double> l_graph, const LossWeights& w) {
  if (l_zs.size() != l_cache.size() || l_zs.size() != l_graph.size()) {
    throw DimensionError("train_logits: branch lengths differ");
  }
  std::vector<double> out(l_zs.size());
  for (std::size_t c = 0; c < out.size(); ++c) {
    out[c] = l_zs[c] + w.alpha * l_cache[c] + w.delta * (w.tau * l_graph[c]);
  }
  return out;
}

double cross_entropy(std::span<const double> logits, std::size_t y) {
  Tape t;
  Var l = t.constant(row_matrix(logits));
  const std::size_t labels[1] = {y};
  return ad::cross_entropy(l, labels).value()(0, 0);
}

double focal_loss(std::span<const double> graph_logits, std::size_t y, double gamma, double tau) {
  Tape t;
  Var l = t.constant(row_matrix(graph_logits));
  const std::size_t labels[1] = {y};
  return ad::focal_loss(l, labels, gamma, tau).value()(0, 0);
}

double total_loss(std::span<const double> l_zs, std::span<const double> l_cache,
                  std::span<const double> l_graph, std::size_t y, const LossWeights& w) {
  Tape t;
  const std::size_t labels[1] = {y};
  LossTerms terms = total_loss_ad(t.constant(row_matrix(l_zs)), t.constant(row_matrix(l_cache)),
                                  t.constant(row_matrix(l_graph)), labels, w);
  return terms.total.value()(0, 0);
}

namespace ad {

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Matrix& z = logits.value();
  if (labels.size() != z.rows()) throw DimensionError("cross_entropy: label count != rows");
  Matrix out(z.rows(), 1);
  std::vector<RowSoftmax> rows;
  rows.reserve(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    check_label(labels[r], z.cols());
    rows.push_back(row_softmax(z.row(r), labels[r], 1.0));
    out(r, 0) = -rows.back().log_p;
  }
  ensure_finite(out, "cross_entropy");
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  return logits.tape().record(
      std::move(out), {logits},
      [logits, ys = std::move(ys), rows = std::move(rows)](Tape& t, const Matrix& g, const Matrix&) {
        Matrix gz(rows.size(), rows.empty() ? 0 : rows[0].probs.size());
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (std::size_t k = 0; k < gz.cols(); ++k)
            gz(r, k) = g(r, 0) * (rows[r].probs[k] - (k == ys[r] ? 1.0 : 0.0));
        t.accumulate(logits, gz);
      });
}

Var focal_loss(Var graph, std::span<const std::size_t> labels, double gamma, double tau) {
  if (!(gamma >= 0.0)) throw ConfigError("focal_loss: gamma must be >= 0");
  const Matrix& z = graph.value();
  if (labels.size() != z.rows()) throw DimensionError("focal_loss: label count != rows");
  Matrix out(z.rows(), 1);
  std::vector<RowSoftmax> rows;
  rows.reserve(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    check_label(labels[r], z.cols());
    rows.push_back(row_softmax(z.row(r), labels[r], tau));
    const RowSoftmax& s = rows.back();
    out(r, 0) = -std::pow(s.one_minus_p, gamma) * s.log_p;
  }
  ensure_finite(out, "focal_loss");
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  return graph.tape().record(
      std::move(out), {graph},
      [graph, ys = std::move(ys), rows = std::move(rows), gamma, tau](Tape& t, const Matrix& g,
                                                                      const Matrix&) {
        Matrix gz(rows.size(), rows.empty() ? 0 : rows[0].probs.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const RowSoftmax& s = rows[r];
          const double q = s.one_minus_p;
          const double p = s.probs[ys[r]];
          // dL/dp * p, with L = -q^gamma log p and q = 1 - p.
          double dl_dp_times_p = -std::pow(q, gamma);
          if (gamma != 0.0 && q > 0.0) dl_dp_times_p += gamma * std::pow(q, gamma - 1.0) * p * s.log_p;
          for (std::size_t k = 0; k < gz.cols(); ++k) {
            const double dp_dz_over_p = (k == ys[r] ? 1.0 : 0.0) - s.probs[k];
            gz(r, k) = g(r, 0) * dl_dp_times_p * dp_dz_over_p * tau;
          }
        }
        t.accumulate(graph, gz);
      });
}

}  // namespace ad

LossTerms total_loss_ad(Var l_zs, Var l_cache, std::optional<Var> l_graph,
                        std::span<const std::size_t> labels, const LossWeights& w) {
  w.validate();
  Tape& t = l_zs.tape();
  Var mixture = ad::add(l_zs, ad::scale(l_cache, w.alpha));
  if (l_graph && w.delta != 0.0) mixture = ad::add(mixture, ad::scale(*l_graph, w.delta * w.tau));
  Var ce = ad::mean(ad::cross_entropy(mixture, labels));
  if (!l_graph) return {ce, ce, t.constant(Matrix(1, 1))};
  Var focal = ad::mean(ad::focal_loss(*l_graph, labels, w.gamma_focal, w.tau));
  Var total = w.lambda == 0.0 ? ce : ad::add(ce, ad::scale(focal, w.lambda));
  return {total, ce, focal};
}

}  // namespace kvdistill
