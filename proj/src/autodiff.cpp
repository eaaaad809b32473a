#include "kvdistill/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "kvdistill/errors.hpp"

namespace kvdistill {

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::input(Param& p) {
  nodes_.push_back(Node{p.value, {}, false, true, {}, &p});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, true, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward fn) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw ContractError("Tape::record: input from another tape");
    needs = needs || requires_grad(v);
  }
  nodes_.push_back(Node{std::move(value), {}, false, needs, needs ? std::move(fn) : Backward{},
                        nullptr});
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id()];
  if (!n.has_grad) {
    n.grad = Matrix(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  if (!requires_grad(v)) return;
  Matrix& buf = grad_buffer(v);
  add_inplace(buf, g);
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Matrix(n.value.rows(), n.value.cols());
}

void Tape::backward(Var root) {
  const Node& r = nodes_[root.id()];
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw ContractError("backward: root must be a 1x1 scalar, got " +
                        std::to_string(r.value.rows()) + "x" + std::to_string(r.value.cols()));
  }
  last_visits_ = 0;
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Matrix();
  }
  if (!r.requires_grad) return;
  grad_buffer(root)(0, 0) = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.backward) {
      ++last_visits_;
      // Copy: the callback may append to grad buffers, never to this node.
      const Matrix g = n.grad;
      n.backward(*this, g, n.value);
    }
    if (n.sink != nullptr) add_inplace(n.sink->grad, n.grad);
  }
}

namespace ad {
namespace {

Tape& tape_of(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("ad: operands from different tapes");
  return a.tape();
}

Matrix column_sums(const Matrix& g) {
  Matrix out(1, g.cols());
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c) out(0, c) += g(r, c);
  return out;
}

Matrix map(const Matrix& x, double (*f)(double)) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = f(x.data()[i]);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(kvdistill::matmul(a.value(), b.value()), {a, b},
                  [a, b](Tape& t, const Matrix& g, const Matrix&) {
                    if (t.requires_grad(a)) t.accumulate(a, kvdistill::matmul_nt(g, b.value()));
                    if (t.requires_grad(b)) t.accumulate(b, kvdistill::matmul_tn(a.value(), g));
                  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(kvdistill::matmul_nt(a.value(), b.value()), {a, b},
                  [a, b](Tape& t, const Matrix& g, const Matrix&) {
                    if (t.requires_grad(a)) t.accumulate(a, kvdistill::matmul(g, b.value()));
                    if (t.requires_grad(b)) t.accumulate(b, kvdistill::matmul_tn(g, a.value()));
                  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(kvdistill::add(a.value(), b.value()), {a, b},
                  [a, b](Tape& t, const Matrix& g, const Matrix&) {
                    t.accumulate(a, g);
                    t.accumulate(b, g);
                  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(kvdistill::subtract(a.value(), b.value()), {a, b},
                  [a, b](Tape& t, const Matrix& g, const Matrix&) {
                    t.accumulate(a, g);
                    if (t.requires_grad(b)) t.accumulate(b, kvdistill::scale(g, -1.0));
                  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (!a.value().same_shape(b.value())) throw DimensionError("ad::mul: shape mismatch");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.value().data()[i];
  ensure_finite(out, "mul");
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.requires_grad(a)) {
      Matrix ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] *= b.value().data()[i];
      t.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Matrix gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb.data()[i] *= a.value().data()[i];
      t.accumulate(b, gb);
    }
  });
}

Var scale(Var a, double s) {
  return a.tape().record(kvdistill::scale(a.value(), s), {a},
                         [a, s](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, kvdistill::scale(g, s)); });
}

Var add_row(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  const Matrix& xv = x.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) throw DimensionError("add_row: bias shape");
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv(0, c);
  ensure_finite(out, "add_row");
  return t.record(std::move(out), {x, bias}, [x, bias](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(x, g);
    if (t.requires_grad(bias)) t.accumulate(bias, column_sums(g));
  });
}

Var mul_row(Var x, Var row) {
  Tape& t = tape_of(x, row);
  const Matrix& xv = x.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) throw DimensionError("mul_row: row shape");
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= rv(0, c);
  ensure_finite(out, "mul_row");
  return t.record(std::move(out), {x, row}, [x, row](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& xv = x.value();
    const Matrix& rv = row.value();
    if (t.requires_grad(x)) {
      Matrix gx = g;
      for (std::size_t r = 0; r < gx.rows(); ++r)
        for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) *= rv(0, c);
      t.accumulate(x, gx);
    }
    if (t.requires_grad(row)) {
      Matrix gr(1, rv.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gr(0, c) += g(r, c) * xv(r, c);
      t.accumulate(row, gr);
    }
  });
}

Var gelu(Var x) {
  return x.tape().record(map(x.value(), &kvdistill::gelu), {x}, [x](Tape& t, const Matrix& g, const Matrix&) {
    Matrix gx = map(x.value(), &kvdistill::gelu_grad);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] *= g.data()[i];
    t.accumulate(x, gx);
  });
}

Var softplus(Var x) {
  return x.tape().record(map(x.value(), &kvdistill::softplus), {x},
                         [x](Tape& t, const Matrix& g, const Matrix&) {
                           Matrix gx = map(x.value(), &kvdistill::sigmoid);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] *= g.data()[i];
                           t.accumulate(x, gx);
                         });
}


Var exp_affine(Var x, double a, double b) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = std::exp(a * x.value().data()[i] + b);
  ensure_finite(out, "exp_affine");
  return x.tape().record(std::move(out), {x}, [x, a](Tape& t, const Matrix& g, const Matrix& y) {
    Matrix gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] *= a * y.data()[i];
    t.accumulate(x, gx);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  tape_of(x, beta);
  Matrix out = kvdistill::layer_norm(x.value(), gamma.value(), beta.value(), eps);
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, eps](Tape& t, const Matrix& g, const Matrix&) {
                    const Matrix& xv = x.value();
                    const Matrix& gv = gamma.value();
                    const std::size_t n = xv.cols();
                    Matrix dx(xv.rows(), n);
                    Matrix dgamma(1, n);
                    Matrix dbeta(1, n);
                    std::vector<double> xhat(n);
                    std::vector<double> dxhat(n);
                    for (std::size_t r = 0; r < xv.rows(); ++r) {
                      const auto row = xv.row(r);
                      double mean = 0.0;
                      for (double v : row) mean += v;
                      mean /= static_cast<double>(n);
                      double var = 0.0;
                      for (double v : row) var += (v - mean) * (v - mean);
                      var /= static_cast<double>(n);
                      const double inv = 1.0 / std::sqrt(var + eps);
                      double mean_dxhat = 0.0;
                      double mean_dxhat_xhat = 0.0;
                      for (std::size_t c = 0; c < n; ++c) {
                        xhat[c] = (row[c] - mean) * inv;
                        dxhat[c] = g(r, c) * gv(0, c);
                        dgamma(0, c) += g(r, c) * xhat[c];
                        dbeta(0, c) += g(r, c);
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * xhat[c];
                      }
                      mean_dxhat /= static_cast<double>(n);
                      mean_dxhat_xhat /= static_cast<double>(n);
                      for (std::size_t c = 0; c < n; ++c) {
                        dx(r, c) = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                      }
                    }
                    t.accumulate(x, dx);
                    t.accumulate(gamma, dgamma);
                    t.accumulate(beta, dbeta);
                  });
}

Var softmax_rows(Var x, const std::optional<Mask>& mask) {
  return x.tape().record(kvdistill::softmax_rows(x.value(), mask), {x},
                         [x](Tape& t, const Matrix& g, const Matrix& y) {
                           Matrix gx(y.rows(), y.cols());
                           for (std::size_t r = 0; r < y.rows(); ++r) {
                             double inner = 0.0;
                             for (std::size_t c = 0; c < y.cols(); ++c) inner += g(r, c) * y(r, c);
                             for (std::size_t c = 0; c < y.cols(); ++c)
                               gx(r, c) = y(r, c) * (g(r, c) - inner);
                           }
                           t.accumulate(x, gx);
                         });
}

Var normalize_rows(Var x) {
  return x.tape().record(kvdistill::normalize_rows(x.value()), {x},
                         [x](Tape& t, const Matrix& g, const Matrix& y) {
                           const Matrix& xv = x.value();
                           Matrix gx(y.rows(), y.cols());
                           for (std::size_t r = 0; r < y.rows(); ++r) {
                             const double n = norm2(xv.row(r));
                             const double inner = dot(g.row(r), y.row(r));
                             for (std::size_t c = 0; c < y.cols(); ++c)
                               gx(r, c) = (g(r, c) - y(r, c) * inner) / n;
                           }
                           t.accumulate(x, gx);
                         });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record(Matrix(1, 1, s), {x}, [x](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(x, Matrix(x.rows(), x.cols(), g(0, 0)));
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw DimensionError("ad::mean: empty input");
  return scale(sum(x), 1.0 / n);
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Matrix& xv = x.value();
  if (begin + count > xv.rows()) throw DimensionError("slice_rows: range out of bounds");
  Matrix out(count, xv.cols());
  std::copy(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * xv.cols()),
            xv.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * xv.cols()),
            out.data().begin());
  return x.tape().record(std::move(out), {x}, [x, begin](Tape& t, const Matrix& g, const Matrix&) {
    Matrix& buf = t.grad_buffer(x);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) buf(begin + r, c) += g(r, c);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column mismatch");
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(
      Matrix(rows, cols, std::move(data)), parts,
      [inputs](Tape& t, const Matrix& g, const Matrix&) {
        std::size_t offset = 0;
        for (const Var& p : inputs) {
          if (t.requires_grad(p)) {
            Matrix& buf = t.grad_buffer(p);
            for (std::size_t r = 0; r < p.rows(); ++r)
              for (std::size_t c = 0; c < g.cols(); ++c) buf(r, c) += g(offset + r, c);
          }
          offset += p.rows();
        }
      });
}

Var tile_rows(Var x, std::size_t times) {
  const Matrix& xv = x.value();
  std::vector<double> data;
  data.reserve(xv.size() * times);
  for (std::size_t i = 0; i < times; ++i) data.insert(data.end(), xv.data().begin(), xv.data().end());
  return x.tape().record(Matrix(xv.rows() * times, xv.cols(), std::move(data)), {x},
                         [x, times](Tape& t, const Matrix& g, const Matrix&) {
                           Matrix& buf = t.grad_buffer(x);
                           const std::size_t block = buf.size();
                           for (std::size_t i = 0; i < times; ++i)
                             for (std::size_t j = 0; j < block; ++j)
                               buf.data()[j] += g.data()[i * block + j];
                         });
}

Var segment_attention(Var q, Var k, Var v, std::size_t heads, std::size_t segment) {
  Tape& t = tape_of(q, k);
  tape_of(q, v);
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  if (!Q.same_shape(K) || !Q.same_shape(V)) throw DimensionError("segment_attention: q/k/v shapes");
  const std::size_t n = Q.rows();
  const std::size_t d = Q.cols();
  if (heads == 0 || d % heads != 0) throw DimensionError("segment_attention: d not divisible by heads");
  if (segment == 0 || n % segment != 0) throw DimensionError("segment_attention: rows not divisible by segment");
  const std::size_t dk = d / heads;
  const std::size_t segments = n / segment;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  // Attention probabilities, one segment x segment block per (segment, head).
  std::vector<double> probs(segments * heads * segment * segment);
  Matrix out(n, d);
  std::vector<double> row(segment);
  for (std::size_t s = 0; s < segments; ++s) {
    const std::size_t base = s * segment;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dk;
      double* P = probs.data() + (s * heads + h) * segment * segment;
      for (std::size_t i = 0; i < segment; ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < segment; ++j) {
          double e = 0.0;
          for (std::size_t c = 0; c < dk; ++c) e += Q(base + i, c0 + c) * K(base + j, c0 + c);
          row[j] = e * inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < segment; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        for (std::size_t j = 0; j < segment; ++j) {
          const double a = row[j] / total;
          P[i * segment + j] = a;
          for (std::size_t c = 0; c < dk; ++c) out(base + i, c0 + c) += a * V(base + j, c0 + c);
        }
      }
    }
  }
  ensure_finite(out, "segment_attention");
  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, heads, segment, dk, segments, inv_sqrt, probs = std::move(probs)](
          Tape& t, const Matrix& g, const Matrix&) {
        const Matrix& Q = q.value();
        const Matrix& K = k.value();
        const Matrix& V = v.value();
        Matrix dQ(Q.rows(), Q.cols());
        Matrix dK(K.rows(), K.cols());
        Matrix dV(V.rows(), V.cols());
        std::vector<double> dA(segment);
        for (std::size_t s = 0; s < segments; ++s) {
          const std::size_t base = s * segment;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dk;
            const double* P = probs.data() + (s * heads + h) * segment * segment;
            for (std::size_t i = 0; i < segment; ++i) {
              double inner = 0.0;
              for (std::size_t j = 0; j < segment; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dk; ++c) {
                  acc += g(base + i, c0 + c) * V(base + j, c0 + c);
                  dV(base + j, c0 + c) += P[i * segment + j] * g(base + i, c0 + c);
                }
                dA[j] = acc;
                inner += acc * P[i * segment + j];
              }
              for (std::size_t j = 0; j < segment; ++j) {
                const double dS = P[i * segment + j] * (dA[j] - inner) * inv_sqrt;
                if (dS == 0.0) continue;
                for (std::size_t c = 0; c < dk; ++c) {
                  dQ(base + i, c0 + c) += dS * K(base + j, c0 + c);
                  dK(base + j, c0 + c) += dS * Q(base + i, c0 + c);
                }
              }
            }
          }
        }
        t.accumulate(q, dQ);
        t.accumulate(k, dK);
        t.accumulate(v, dV);
      });
}

Var blockdiag_apply(Var x, Var w, std::size_t heads) {
  Tape& t = tape_of(x, w);
  const Matrix& X = x.value();
  const Matrix& W = w.value();
  const std::size_t d = X.cols();
  if (heads == 0 || d % heads != 0) throw DimensionError("blockdiag_apply: d not divisible by heads");
  const std::size_t dk = d / heads;
  if (W.rows() != d || W.cols() != dk) throw DimensionError("blockdiag_apply: weight must be d x d/heads");
  Matrix out(X.rows(), d);
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < dk; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < dk; ++j) acc += W(h * dk + i, j) * X(r, h * dk + j);
        out(r, h * dk + i) = acc;
      }
  ensure_finite(out, "blockdiag_apply");
  return t.record(std::move(out), {x, w}, [x, w, heads, dk](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& X = x.value();
    const Matrix& W = w.value();
    Matrix dX(X.rows(), X.cols());
    Matrix dW(W.rows(), W.cols());
    for (std::size_t r = 0; r < X.rows(); ++r)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < dk; ++i) {
          const double gi = g(r, h * dk + i);
          if (gi == 0.0) continue;
          for (std::size_t j = 0; j < dk; ++j) {
            dX(r, h * dk + j) += W(h * dk + i, j) * gi;
            dW(h * dk + i, j) += gi * X(r, h * dk + j);
          }
        }
    t.accumulate(x, dX);
    t.accumulate(w, dW);
  });
}

Var grouped_row_dot(Var a, Var b, std::size_t groups) {
  Tape& t = tape_of(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols() != B.cols() || A.rows() * groups != B.rows()) {
    throw DimensionError("grouped_row_dot: expected b with rows = a.rows * groups");
  }
  Matrix out(A.rows(), groups);
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t gi = 0; gi < groups; ++gi) out(i, gi) = dot(A.row(i), B.row(i * groups + gi));
  ensure_finite(out, "grouped_row_dot");
  return t.record(std::move(out), {a, b}, [a, b, groups](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& A = a.value();
    const Matrix& B = b.value();
    Matrix dA(A.rows(), A.cols());
    Matrix dB(B.rows(), B.cols());
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const double w = g(i, gi);
        const std::size_t br = i * groups + gi;
        for (std::size_t c = 0; c < A.cols(); ++c) {
          dA(i, c) += w * B(br, c);
          dB(br, c) += w * A(i, c);
        }
      }
    t.accumulate(a, dA);
    t.accumulate(b, dB);
  });
}

}  // namespace ad
}  // namespace kvdistill
