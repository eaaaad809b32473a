#include "kvdistill/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "kvdistill/errors.hpp"
#include "kvdistill/kernels.hpp"
#include "kvdistill/rng.hpp"

namespace kvdistill {
namespace {

Param uniform_param(Rng& rng, std::size_t rows, std::size_t cols) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(-bound, bound);
  return Param(std::move(m));
}

Param zeros(std::size_t rows, std::size_t cols) { return Param(Matrix(rows, cols)); }

LayerNormParams init_layer_norm(std::size_t d) {
  return {Param(Matrix(1, d, 1.0)), zeros(1, d)};
}

FeedForwardParams init_ffn(Rng& rng, std::size_t d, std::size_t mult) {
  FeedForwardParams f;
  f.w1 = uniform_param(rng, d, mult * d);
  f.b1 = zeros(1, mult * d);
  f.w2 = uniform_param(rng, mult * d, d);
  f.b2 = zeros(1, d);
  return f;
}

UnimodalEncoderParams init_encoder(Rng& rng, const TeacherConfig& c) {
  UnimodalEncoderParams e;
  const std::size_t d = c.hidden;
  e.heads = c.encoder_heads;
  e.in_weight = c.input_dim == d ? Param(Matrix::identity(d)) : uniform_param(rng, c.input_dim, d);
  e.in_bias = zeros(1, d);
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    EncoderLayerParams layer;
    layer.wq = uniform_param(rng, d, d);
    layer.wk = uniform_param(rng, d, d);
    layer.wv = uniform_param(rng, d, d);
    layer.wo = zeros(d, d);
    layer.bo = zeros(1, d);
    layer.ln1 = init_layer_norm(d);
    layer.ffn = init_ffn(rng, d, c.ffn_multiplier);
    layer.ffn.w2 = zeros(c.ffn_multiplier * d, d);
    layer.ln2 = init_layer_norm(d);
    e.layers.push_back(std::move(layer));
  }
  return e;
}

Matrix stacked_identity(std::size_t d, std::size_t heads) {
  const std::size_t dk = d / heads;
  Matrix m(d, dk);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < dk; ++i) m(h * dk + i, i) = 1.0;
  return m;
}

MgtLayerParams init_mgt_layer(Rng& rng, const TeacherConfig& c) {
  MgtLayerParams p;
  const std::size_t d = c.hidden;
  p.heads = c.graph_heads;
  for (TypeParams& tp : p.types) {
    tp.wq = uniform_param(rng, d, d);
    tp.wk = uniform_param(rng, d, d);
    tp.wv = uniform_param(rng, d, d);
    tp.wo = uniform_param(rng, d, d);
    tp.ffn = init_ffn(rng, d, c.ffn_multiplier);
    tp.ffn.w2 = zeros(c.ffn_multiplier * d, d);
    tp.ln = init_layer_norm(d);
  }
  for (std::size_t r = 0; r < 3; ++r) {
    p.relation_key[r] = Param(stacked_identity(d, p.heads));
    p.relation_value[r] = Param(stacked_identity(d, p.heads));
  }
  p.bias = zeros(3, p.heads);
  // softplus(log(e - 1)) == 1
  p.gate = Param(Matrix(3, p.heads, std::log(std::exp(1.0) - 1.0)));
  return p;
}

void add_named(std::vector<NamedParam>& out, const std::string& prefix, LayerNormParams& ln) {
  out.push_back({prefix + ".gamma", &ln.gamma});
  out.push_back({prefix + ".beta", &ln.beta});
}

void add_named(std::vector<NamedParam>& out, const std::string& prefix, FeedForwardParams& f) {
  out.push_back({prefix + ".w1", &f.w1});
  out.push_back({prefix + ".b1", &f.b1});
  out.push_back({prefix + ".w2", &f.w2});
  out.push_back({prefix + ".b2", &f.b2});
}

void add_named(std::vector<NamedParam>& out, const std::string& prefix, UnimodalEncoderParams& e) {
  out.push_back({prefix + ".in_weight", &e.in_weight});
  out.push_back({prefix + ".in_bias", &e.in_bias});
  for (std::size_t l = 0; l < e.layers.size(); ++l) {
    EncoderLayerParams& layer = e.layers[l];
    const std::string p = prefix + ".layer" + std::to_string(l);
    out.push_back({p + ".wq", &layer.wq});
    out.push_back({p + ".wk", &layer.wk});
    out.push_back({p + ".wv", &layer.wv});
    out.push_back({p + ".wo", &layer.wo});
    out.push_back({p + ".bo", &layer.bo});
    add_named(out, p + ".ln1", layer.ln1);
    add_named(out, p + ".ffn", layer.ffn);
    add_named(out, p + ".ln2", layer.ln2);
  }
}

Var feed_forward(Binder& bind, Var x, const FeedForwardParams& f) {
  Var h = ad::gelu(ad::add_row(ad::matmul(x, bind(f.w1)), bind(f.b1)));
  return ad::add_row(ad::matmul(h, bind(f.w2)), bind(f.b2));
}

Var layer_norm(Binder& bind, Var x, const LayerNormParams& ln) {
  return ad::layer_norm(x, bind(ln.gamma), bind(ln.beta));
}

// Incoming edges of each target node, as offsets into topo.edges.
std::vector<std::size_t> target_offsets(const GraphTopology& topo) {
  std::vector<std::size_t> start(topo.node_count() + 1, 0);
  for (const auto& e : topo.edges) ++start[e.target + 1];
  for (std::size_t i = 0; i < topo.node_count(); ++i) {
    if (start[i + 1] == 0) throw TopologyError("node " + std::to_string(i) + " has no incoming edge");
    start[i + 1] += start[i];
  }
  for (std::size_t k = 1; k < topo.edges.size(); ++k) {
    if (topo.edges[k].target < topo.edges[k - 1].target) {
      throw TopologyError("edges must be grouped by target");
    }
  }
  return start;
}

}  // namespace

void TeacherConfig::validate() const {
  if (input_dim == 0 || hidden == 0) throw ConfigError("teacher: dimensions must be positive");
  if (encoder_heads == 0 || hidden % encoder_heads != 0) {
    throw ConfigError("teacher: hidden size must be divisible by encoder heads");
  }
  if (graph_heads == 0 || hidden % graph_heads != 0) {
    throw ConfigError("teacher: hidden size must be divisible by graph heads");
  }
  if (ffn_multiplier == 0) throw ConfigError("teacher: ffn multiplier must be positive");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError("teacher: keep fraction must be in (0, 1]");
  }
}

const char* to_string(Relation r) {
  switch (r) {
    case Relation::pp: return "pp";
    case Relation::pt: return "pt";
    case Relation::tp: return "tp";
  }
  return "?";
}

NodeType source_type(Relation r) { return r == Relation::tp ? NodeType::text : NodeType::patch; }
NodeType target_type(Relation r) { return r == Relation::pt ? NodeType::text : NodeType::patch; }

std::vector<NamedParam> TeacherParams::parameters() {
  std::vector<NamedParam> out;
  add_named(out, "vis", vis);
  add_named(out, "text", text);
  static const char* type_names[2] = {"patch", "text"};
  for (std::size_t l = 0; l < mgt.size(); ++l) {
    MgtLayerParams& layer = mgt[l];
    const std::string p = "mgt" + std::to_string(l);
    for (std::size_t ty = 0; ty < 2; ++ty) {
      TypeParams& tp = layer.types[ty];
      const std::string q = p + "." + type_names[ty];
      out.push_back({q + ".wq", &tp.wq});
      out.push_back({q + ".wk", &tp.wk});
      out.push_back({q + ".wv", &tp.wv});
      out.push_back({q + ".wo", &tp.wo});
      add_named(out, q + ".ffn", tp.ffn);
      add_named(out, q + ".ln", tp.ln);
    }
    for (std::size_t r = 0; r < 3; ++r) {
      const std::string rn = to_string(static_cast<Relation>(r));
      out.push_back({p + ".key_" + rn, &layer.relation_key[r]});
      out.push_back({p + ".value_" + rn, &layer.relation_value[r]});
    }
    out.push_back({p + ".bias", &layer.bias});
    out.push_back({p + ".gate", &layer.gate});
  }
  out.push_back({"filter.direction", &filter.direction});
  return out;
}

TeacherParams init_teacher(const TeacherConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = Rng::stream(seed, 0x7EAC);
  TeacherParams t;
  t.config = config;
  t.vis = init_encoder(rng, config);
  t.text = init_encoder(rng, config);
  for (std::size_t l = 0; l < config.graph_layers; ++l) t.mgt.push_back(init_mgt_layer(rng, config));
  std::vector<double> p(config.hidden);
  for (double& v : p) v = rng.normal();
  t.filter.direction = Param(Matrix::row_vector(l2_normalize(p)));
  t.filter.keep_fraction = config.keep_fraction;
  return t;
}

std::size_t GraphTopology::count(Relation r) const {
  return static_cast<std::size_t>(
      std::count_if(edges.begin(), edges.end(), [r](const Edge& e) { return e.relation == r; }));
}

std::vector<std::size_t> GraphTopology::in_degree() const {
  std::vector<std::size_t> deg(node_count(), 0);
  for (const Edge& e : edges) ++deg[e.target];
  return deg;
}

GraphTopology build_graph(std::size_t patches, std::size_t classes) {
  if (patches == 0 || classes == 0) throw TopologyError("graph needs at least one patch and one text node");
  GraphTopology g;
  g.patches = patches;
  g.texts = classes;
  const auto P = static_cast<std::uint32_t>(patches);
  const auto C = static_cast<std::uint32_t>(classes);
  g.edges.reserve(patches * patches + 2 * patches * classes);
  for (std::uint32_t t = 0; t < P; ++t) {
    for (std::uint32_t s = 0; s < P; ++s) g.edges.push_back({s, t, Relation::pp});
    for (std::uint32_t c = 0; c < C; ++c) g.edges.push_back({P + c, t, Relation::tp});
  }
  for (std::uint32_t c = 0; c < C; ++c)
    for (std::uint32_t s = 0; s < P; ++s) g.edges.push_back({s, P + c, Relation::pt});
  return g;
}

GraphTopology build_patch_graph(std::size_t patches) {
  if (patches == 0) throw TopologyError("graph needs at least one patch node");
  GraphTopology g;
  g.patches = patches;
  const auto P = static_cast<std::uint32_t>(patches);
  for (std::uint32_t t = 0; t < P; ++t)
    for (std::uint32_t s = 0; s < P; ++s) g.edges.push_back({s, t, Relation::pp});
  return g;
}

Var Binder::operator()(const Param& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  Var v = track_ ? tape_.input(const_cast<Param&>(p)) : tape_.constant(p.value);
  bound_.emplace(&p, v);
  return v;
}

Var encode_unimodal(Binder& bind, Var features, const UnimodalEncoderParams& params,
                    std::size_t segment) {
  if (features.cols() != params.in_weight.value.rows()) {
    throw DimensionError("encode_unimodal: feature dim does not match input projection");
  }
  Var x = ad::add_row(ad::matmul(features, bind(params.in_weight)), bind(params.in_bias));
  for (const EncoderLayerParams& layer : params.layers) {
    Var q = ad::matmul(x, bind(layer.wq));
    Var k = ad::matmul(x, bind(layer.wk));
    Var v = ad::matmul(x, bind(layer.wv));
    Var a = ad::segment_attention(q, k, v, params.heads, segment);
    Var o = ad::add_row(ad::matmul(a, bind(layer.wo)), bind(layer.bo));
    x = layer_norm(bind, ad::add(x, o), layer.ln1);
    x = layer_norm(bind, ad::add(x, feed_forward(bind, x, layer.ffn)), layer.ln2);
  }
  return x;
}

Matrix encode_unimodal(const Matrix& features, const UnimodalEncoderParams& params) {
  Tape t;
  Binder bind(t, false);
  return encode_unimodal(bind, t.constant(features), params, features.rows()).value();
}

NodeStates relational_attention(const NodeStates& queries, const std::array<Var, 3>& keys,
                                const std::array<Var, 3>& values, Var bias, Var gate,
                                const GraphTopology& topo, std::size_t heads, std::size_t batch) {
  const std::size_t P = topo.patches;
  const std::size_t C = topo.texts;
  const std::size_t E = topo.edges.size();
  const Matrix& Qp = queries.patches.value();
  const std::size_t d = Qp.cols();
  if (heads == 0 || d % heads != 0) throw DimensionError("relational_attention: d not divisible by heads");
  if (Qp.rows() != batch * P) throw DimensionError("relational_attention: patch query rows");
  if (C > 0 && queries.texts.value().rows() != batch * C) {
    throw DimensionError("relational_attention: text query rows");
  }
  const std::vector<std::size_t> start = target_offsets(topo);
  const std::size_t dk = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  std::array<bool, 3> used{};
  for (const auto& e : topo.edges) used[static_cast<std::size_t>(e.relation)] = true;
  std::vector<Var> inputs{queries.patches};
  if (C > 0) inputs.push_back(queries.texts);
  for (std::size_t r = 0; r < 3; ++r) {
    if (!used[r]) continue;
    const std::size_t src_rows = batch * (source_type(static_cast<Relation>(r)) == NodeType::patch ? P : C);
    if (keys[r].rows() != src_rows || values[r].rows() != src_rows || keys[r].cols() != d ||
        values[r].cols() != d) {
      throw DimensionError("relational_attention: key/value shape for relation " +
                           std::string(to_string(static_cast<Relation>(r))));
    }
    inputs.push_back(keys[r]);
    inputs.push_back(values[r]);
  }
  inputs.push_back(bias);
  inputs.push_back(gate);
  if (bias.rows() != 3 || bias.cols() != heads || gate.rows() != 3 || gate.cols() != heads) {
    throw DimensionError("relational_attention: bias and gate must be 3 x heads");
  }

  // Row of node `node` of image b inside its type's matrix.
  auto type_row = [P, C](std::size_t node, std::size_t b) {
    return node < P ? b * P + node : b * C + (node - P);
  };
  auto query_row = [&](std::size_t node, std::size_t b) -> const double* {
    const Matrix& m = node < P ? Qp : queries.texts.value();
    return m.row(type_row(node, b)).data();
  };

  Matrix out(batch * (P + C), d);
  std::vector<double> probs(batch * E * heads);
  std::vector<double> scores;
  const Matrix& Bm = bias.value();
  const Matrix& G = gate.value();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < P + C; ++t) {
      const std::size_t lo = start[t];
      const std::size_t hi = start[t + 1];
      const double* q = query_row(t, b);
      double* o = out.row(t < P ? b * P + t : batch * P + b * C + (t - P)).data();
      scores.assign(hi - lo, 0.0);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dk;
        double mx = -1e300;
        for (std::size_t k = lo; k < hi; ++k) {
          const auto& e = topo.edges[k];
          const std::size_t r = static_cast<std::size_t>(e.relation);
          const double* kr = keys[r].value().row(type_row(e.source, b)).data() + off;
          double s = 0.0;
          for (std::size_t i = 0; i < dk; ++i) s += q[off + i] * kr[i];
          s = s * inv_sqrt + Bm(r, h);
          scores[k - lo] = s;
          mx = std::max(mx, s);
        }
        double total = 0.0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          total += s;
        }
        for (std::size_t k = lo; k < hi; ++k) {
          const auto& e = topo.edges[k];
          const std::size_t r = static_cast<std::size_t>(e.relation);
          const double a = scores[k - lo] / total;
          probs[(b * E + k) * heads + h] = a;
          const double w = G(r, h) * a;
          const double* vr = values[r].value().row(type_row(e.source, b)).data() + off;
          for (std::size_t i = 0; i < dk; ++i) o[off + i] += w * vr[i];
        }
      }
    }
  }
  ensure_finite(out, "relational_attention");

  Tape& tape = queries.patches.tape();
  Var joint = tape.record(
      std::move(out), std::span<const Var>(inputs),
      [queries, keys, values, bias, gate, topo_copy = topo, start, heads, batch, dk,
       inv_sqrt, used, probs = std::move(probs)](Tape& t, const Matrix& g, const Matrix&) {
        const GraphTopology& topo = topo_copy;
        const std::size_t P = topo.patches;
        const std::size_t C = topo.texts;
        const std::size_t E = topo.edges.size();
        const Matrix& Qp = queries.patches.value();
        const std::size_t d = Qp.cols();
        auto type_row = [P, C](std::size_t node, std::size_t b) {
          return node < P ? b * P + node : b * C + (node - P);
        };
        Matrix dQp(Qp.rows(), d);
        Matrix dQt(C > 0 ? queries.texts.value().rows() : 0, d);
        std::array<Matrix, 3> dK, dV;
        for (std::size_t r = 0; r < 3; ++r) {
          if (!used[r]) continue;
          dK[r] = Matrix(keys[r].rows(), d);
          dV[r] = Matrix(values[r].rows(), d);
        }
        Matrix dB(3, heads);
        Matrix dG(3, heads);
        const Matrix& G = gate.value();
        std::vector<double> dalpha;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t_node = 0; t_node < P + C; ++t_node) {
            const std::size_t lo = start[t_node];
            const std::size_t hi = start[t_node + 1];
            const std::size_t qrow = type_row(t_node, b);
            const double* q = (t_node < P ? Qp : queries.texts.value()).row(qrow).data();
            double* dq = (t_node < P ? dQp : dQt).row(qrow).data();
            const double* go =
                g.row(t_node < P ? b * P + t_node : batch * P + b * C + (t_node - P)).data();
            dalpha.assign(hi - lo, 0.0);
            for (std::size_t h = 0; h < heads; ++h) {
              const std::size_t off = h * dk;
              double weighted = 0.0;
              for (std::size_t k = lo; k < hi; ++k) {
                const auto& e = topo.edges[k];
                const std::size_t r = static_cast<std::size_t>(e.relation);
                const std::size_t srow = type_row(e.source, b);
                const double a = probs[(b * E + k) * heads + h];
                const double* vr = values[r].value().row(srow).data() + off;
                double* dvr = dV[r].row(srow).data() + off;
                double vg = 0.0;
                for (std::size_t i = 0; i < dk; ++i) {
                  vg += vr[i] * go[off + i];
                  dvr[i] += G(r, h) * a * go[off + i];
                }
                dG(r, h) += a * vg;
                dalpha[k - lo] = G(r, h) * vg;
                weighted += a * dalpha[k - lo];
              }
              for (std::size_t k = lo; k < hi; ++k) {
                const auto& e = topo.edges[k];
                const std::size_t r = static_cast<std::size_t>(e.relation);
                const std::size_t srow = type_row(e.source, b);
                const double a = probs[(b * E + k) * heads + h];
                const double de = a * (dalpha[k - lo] - weighted);
                dB(r, h) += de;
                const double* kr = keys[r].value().row(srow).data() + off;
                double* dkr = dK[r].row(srow).data() + off;
                const double c = de * inv_sqrt;
                for (std::size_t i = 0; i < dk; ++i) {
                  dq[off + i] += c * kr[i];
                  dkr[i] += c * q[off + i];
                }
              }
            }
          }
        }
        t.accumulate(queries.patches, dQp);
        if (C > 0) t.accumulate(queries.texts, dQt);
        for (std::size_t r = 0; r < 3; ++r) {
          if (!used[r]) continue;
          t.accumulate(keys[r], dK[r]);
          t.accumulate(values[r], dV[r]);
        }
        t.accumulate(bias, dB);
        t.accumulate(gate, dG);
      });

  NodeStates msgs;
  msgs.patches = ad::slice_rows(joint, 0, batch * P);
  if (C > 0) msgs.texts = ad::slice_rows(joint, batch * P, batch * C);
  return msgs;
}

NodeStates mgt_layer(Binder& bind, const NodeStates& nodes, const GraphTopology& topo,
                     const MgtLayerParams& params, std::size_t batch) {
  const bool has_text = topo.texts > 0;
  std::array<Var, 2> h{nodes.patches, nodes.texts};
  std::array<Var, 2> q, k, v;
  for (std::size_t ty = 0; ty < (has_text ? 2u : 1u); ++ty) {
    const TypeParams& tp = params.types[ty];
    q[ty] = ad::matmul(h[ty], bind(tp.wq));
    k[ty] = ad::matmul(h[ty], bind(tp.wk));
    v[ty] = ad::matmul(h[ty], bind(tp.wv));
  }
  std::array<Var, 3> rk, rv;
  for (std::size_t r = 0; r < 3; ++r) {
    const auto rel = static_cast<Relation>(r);
    if (topo.count(rel) == 0) continue;
    const auto src = static_cast<std::size_t>(source_type(rel));
    rk[r] = ad::blockdiag_apply(k[src], bind(params.relation_key[r]), params.heads);
    rv[r] = ad::blockdiag_apply(v[src], bind(params.relation_value[r]), params.heads);
  }
  Var mu = ad::softplus(bind(params.gate));
  NodeStates msgs = relational_attention({q[0], q[1]}, rk, rv, bind(params.bias), mu, topo,
                                         params.heads, batch);
  std::array<Var, 2> m{msgs.patches, msgs.texts};
  NodeStates out = nodes;
  for (std::size_t ty = 0; ty < (has_text ? 2u : 1u); ++ty) {
    const TypeParams& tp = params.types[ty];
    Var upd = feed_forward(bind, ad::matmul(m[ty], bind(tp.wo)), tp.ffn);
    Var next = layer_norm(bind, ad::add(h[ty], upd), tp.ln);
    (ty == 0 ? out.patches : out.texts) = next;
  }
  return out;
}

NodeStates mgt_forward(Binder& bind, const NodeStates& nodes, const GraphTopology& topo,
                       const std::vector<MgtLayerParams>& layers, std::size_t batch) {
  NodeStates cur = nodes;
  for (const MgtLayerParams& layer : layers) cur = mgt_layer(bind, cur, topo, layer, batch);
  return cur;
}

std::vector<std::size_t> top_fraction(std::span<const double> scores, double keep_fraction) {
  if (scores.empty()) throw ContractError("top_fraction: no scores");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError("top_fraction: keep fraction must be in (0, 1]");
  }
  const std::size_t n = scores.size();
  auto k = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-9));
  k = std::clamp<std::size_t>(k, 1, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

PooledGraph filter_and_pool(Var nodes, Var direction, double keep_fraction,
                            std::size_t nodes_per_image) {
  const Matrix& H = nodes.value();
  const Matrix& p = direction.value();
  const std::size_t d = H.cols();
  if (p.rows() != 1 || p.cols() != d) throw DimensionError("filter_and_pool: direction must be 1 x d");
  if (nodes_per_image == 0 || H.rows() % nodes_per_image != 0) {
    throw DimensionError("filter_and_pool: rows not divisible by nodes per image");
  }
  const std::size_t batch = H.rows() / nodes_per_image;
  const double pnorm = norm2(p.row(0));
  if (pnorm <= 1e-12) throw NormalizationError("filter_and_pool: zero filter direction");

  PooledGraph result;
  result.kept.reserve(batch);
  std::vector<double> node_norm(H.rows());
  std::vector<double> score(H.rows());
  for (std::size_t i = 0; i < H.rows(); ++i) {
    node_norm[i] = norm2(H.row(i));
    if (node_norm[i] <= 1e-12) throw NormalizationError("filter_and_pool: zero node feature");
    score[i] = dot(H.row(i), p.row(0)) / (node_norm[i] * pnorm);
  }
  bool gated = false;
  Matrix pooled(batch, d);
  for (std::size_t b = 0; b < batch; ++b) {
    std::span<const double> s(score.data() + b * nodes_per_image, nodes_per_image);
    std::vector<std::size_t> kept = top_fraction(s, keep_fraction);
    gated = kept.size() < nodes_per_image;
    for (std::size_t i : kept) {
      const std::size_t row = b * nodes_per_image + i;
      const double w = gated ? 1.0 + score[row] : 1.0;
      for (std::size_t c = 0; c < d; ++c) pooled(b, c) += w * H(row, c);
    }
    result.kept.push_back(std::move(kept));
  }
  ensure_finite(pooled, "filter_and_pool");
  Var sum = nodes.tape().record(
      std::move(pooled), {nodes, direction},
      [nodes, direction, kept = result.kept, node_norm, score, gated, pnorm, nodes_per_image](
          Tape& t, const Matrix& g, const Matrix&) {
        const Matrix& H = nodes.value();
        const Matrix& p = direction.value();
        const std::size_t d = H.cols();
        Matrix dH(H.rows(), d);
        Matrix dp(1, d);
        for (std::size_t b = 0; b < kept.size(); ++b) {
          for (std::size_t i : kept[b]) {
            const std::size_t row = b * nodes_per_image + i;
            const double w = gated ? 1.0 + score[row] : 1.0;
            for (std::size_t c = 0; c < d; ++c) dH(row, c) += w * g(b, c);
            if (!gated) continue;
            const double ds = dot(g.row(b), H.row(row));
            const double nh = node_norm[row];
            const double s = score[row];
            for (std::size_t c = 0; c < d; ++c) {
              dH(row, c) += ds * (p(0, c) / (nh * pnorm) - s * H(row, c) / (nh * nh));
              dp(0, c) += ds * (H(row, c) / (nh * pnorm) - s * p(0, c) / (pnorm * pnorm));
            }
          }
        }
        t.accumulate(nodes, dH);
        t.accumulate(direction, dp);
      });
  result.feature = ad::normalize_rows(sum);
  return result;
}

Var graph_logits(Var pooled, Var texts, std::size_t classes) {
  Var unit_text = ad::normalize_rows(texts);
  if (texts.rows() == classes) return ad::matmul_nt(pooled, unit_text);
  return ad::grouped_row_dot(pooled, unit_text, classes);
}

TeacherOutput teacher_forward(Binder& bind, const TeacherParams& params, const Matrix& patches,
                              const Matrix& prompts, std::size_t batch) {
  const TeacherConfig& cfg = params.config;
  if (batch == 0 || patches.rows() % batch != 0) {
    throw DimensionError("teacher_forward: patch rows not divisible by batch");
  }
  const std::size_t P = patches.rows() / batch;
  const std::size_t C = prompts.rows();
  Tape& t = bind.tape();
  Var vis = encode_unimodal(bind, t.constant(patches), params.vis, P);
  Var text = encode_unimodal(bind, t.constant(prompts), params.text, C);
  Var final_text = text;
  if (cfg.use_mgt) {
    if (cfg.use_text_edges) {
      const GraphTopology topo = build_graph(P, C);
      NodeStates out = mgt_forward(bind, {vis, ad::tile_rows(text, batch)}, topo, params.mgt, batch);
      vis = out.patches;
      final_text = out.texts;
    } else {
      const GraphTopology topo = build_patch_graph(P);
      vis = mgt_forward(bind, {vis, Var()}, topo, params.mgt, batch).patches;
    }
  }
  const double keep = cfg.use_filter ? params.filter.keep_fraction : 1.0;
  PooledGraph pooled = filter_and_pool(vis, bind(params.filter.direction), keep, P);
  return {graph_logits(pooled.feature, final_text, C), std::move(pooled.kept)};
}

}  // namespace kvdistill
