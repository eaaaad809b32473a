#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "kvdistill/autodiff.hpp"
#include "kvdistill/embedbank.hpp"
#include "kvdistill/rng.hpp"
#include "kvdistill/teacher.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace kvdistill;

// Replaces every teacher parameter with random values so that no block sits
// at an identity or zero initialisation. LayerNorm gains stay near 1.
inline void randomize(kvdistill::TeacherParams& t, kvdistill::Rng& rng, double scale = 0.5) {
  for (auto& np : t.parameters()) {
    const bool gain = np.name.find("gamma") != std::string::npos;
    for (double& v : np.param->value.data()) v = (gain ? 1.0 : 0.0) + rng.uniform(-scale, scale);
  }
}

inline kvdistill::TeacherConfig tiny_config(std::size_t dim = 16, std::size_t heads = 2) {
  kvdistill::TeacherConfig c;
  c.input_dim = dim;
  c.hidden = dim;
  c.encoder_layers = 1;
  c.encoder_heads = heads;
  c.graph_layers = 1;
  c.graph_heads = heads;
  return c;
}

inline kvdistill::EmbeddingBank small_bank(std::uint64_t seed = 3, std::size_t classes = 4,
                                           std::size_t per_class = 10) {
  kvdistill::SyntheticSpec s;
  s.classes = classes;
  s.dim = 16;
  s.images_per_class = per_class;
  s.seed = seed;
  return kvdistill::gen_synthetic(s);
}

inline double scalar_of(const Matrix& weights, const Matrix& out) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += weights.data()[i] * out.data()[i];
  return s;
}

// Central-difference check of d sum(w * f(params)) / d params for random w.
template <typename Build>
double fd_error(std::vector<Param*> params, Build build) {
  Tape probe;
  const Matrix shape = build(probe).value();
  Rng rng(17);
  const Matrix weights = oracle::random_matrix(rng, shape.rows(), shape.cols());
  auto value = [&] {
    Tape t;
    return scalar_of(weights, build(t).value());
  };
  for (Param* p : params) p->zero_grad();
  {
    Tape t;
    Var out = build(t);
    t.backward(ad::sum(ad::mul(out, t.constant(weights))));
  }
  double worst = 0.0;
  const double h = 1e-6;
  for (Param* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value.data()[i];
      p->value.data()[i] = keep + h;
      const double up = value();
      p->value.data()[i] = keep - h;
      const double down = value();
      p->value.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p->grad.data()[i];
      worst = std::max(worst, std::abs(numeric - analytic) /
                                  std::max({std::abs(numeric), std::abs(analytic), 1e-4}));
    }
  }
  return worst;
}

}  // namespace fixture
