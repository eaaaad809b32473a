#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kvdistill/autodiff.hpp"
#include "kvdistill/matrix.hpp"

namespace kvdistill {

struct TeacherConfig {
  std::size_t input_dim = 32;       // D
  std::size_t hidden = 32;          // d_h
  std::size_t encoder_layers = 3;   // L
  std::size_t encoder_heads = 16;   // per unimodal encoder
  std::size_t graph_layers = 3;     // L_G
  std::size_t graph_heads = 16;     // H_G
  std::size_t ffn_multiplier = 2;
  double keep_fraction = 0.5;       // Top-N fraction of patch nodes
  bool use_mgt = true;              // false: pool unimodal features directly
  bool use_text_edges = true;       // false: patch-only graph, text bypasses MGT
  bool use_filter = true;           // false: plain sum over all patch nodes

  // Throws ConfigError.
  void validate() const;
};

struct NamedParam {
  std::string name;
  Param* param;
};

struct LayerNormParams {
  Param gamma;
  Param beta;
};

struct FeedForwardParams {
  Param w1;  // d x (mult*d)
  Param b1;
  Param w2;  // (mult*d) x d
  Param b2;
};

struct EncoderLayerParams {
  Param wq, wk, wv;  // d x d, head j owns columns [j*dk, (j+1)*dk)
  Param wo;          // d x d output projection
  Param bo;
  LayerNormParams ln1;
  FeedForwardParams ffn;
  LayerNormParams ln2;
};

struct UnimodalEncoderParams {
  Param in_weight;  // D x d_h
  Param in_bias;
  std::vector<EncoderLayerParams> layers;
  std::size_t heads = 1;
};

enum class NodeType : std::uint8_t { patch = 0, text = 1 };
enum class Relation : std::uint8_t { pp = 0, pt = 1, tp = 2 };

const char* to_string(Relation r);
NodeType source_type(Relation r);
NodeType target_type(Relation r);

struct TypeParams {
  Param wq, wk, wv;  // d x d, head blocks by column
  Param wo;          // d x d
  FeedForwardParams ffn;
  LayerNormParams ln;
};

struct MgtLayerParams {
  std::array<TypeParams, 2> types;     // indexed by NodeType
  std::array<Param, 3> relation_key;   // d x dk: stacked per-head dk x dk adapters
  std::array<Param, 3> relation_value;
  Param bias;                          // 3 x heads, b_r^(h)
  Param gate;                          // 3 x heads, mu_r^(h) = softplus(gate)
  std::size_t heads = 1;
};

struct NodeFilter {
  Param direction;  // 1 x d_h
  double keep_fraction = 0.5;
};

struct TeacherParams {
  TeacherConfig config;
  UnimodalEncoderParams vis;
  UnimodalEncoderParams text;
  std::vector<MgtLayerParams> mgt;
  NodeFilter filter;

  std::vector<NamedParam> parameters();
};

TeacherParams init_teacher(const TeacherConfig& config, std::uint64_t seed);

// Typed nodes and typed directed edges for one image. Nodes [0, patches) are
// patch-type (including the global view), [patches, patches + texts) text-type.
struct GraphTopology {
  struct Edge {
    std::uint32_t source;
    std::uint32_t target;
    Relation relation;
  };

  std::size_t patches = 0;
  std::size_t texts = 0;
  std::vector<Edge> edges;

  std::size_t node_count() const { return patches + texts; }
  NodeType node_type(std::size_t node) const {
    return node < patches ? NodeType::patch : NodeType::text;
  }
  std::size_t count(Relation r) const;
  std::vector<std::size_t> in_degree() const;
};

// pp over all ordered patch pairs (with self-loops), pt from every patch to
// every text node, tp from every text node to every patch. Edges are ordered
// by target, then relation, then source.
GraphTopology build_graph(std::size_t patches, std::size_t classes);
// Patch nodes only, pp edges only.
GraphTopology build_patch_graph(std::size_t patches);

// Binds parameters to a tape once per forward pass. With tracking off,
// parameters enter as constants and receive no gradient.
class Binder {
 public:
  Binder(Tape& tape, bool track) : tape_(tape), track_(track) {}
  Var operator()(const Param& p);
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  bool track_;
  std::unordered_map<const Param*, Var> bound_;
};

// Input projection followed by the post-LN Transformer blocks, applied to
// independent row blocks of `segment` tokens.
Var encode_unimodal(Binder& bind, Var features, const UnimodalEncoderParams& params,
                    std::size_t segment);
Matrix encode_unimodal(const Matrix& features, const UnimodalEncoderParams& params);

// Node states of a batch of graphs sharing one topology: patch rows are
// image-major (batch * patches rows), text rows likewise (batch * texts).
struct NodeStates {
  Var patches;
  Var texts;  // unused when the topology has no text nodes
};

// Relation-biased joint softmax over each target's incoming edges and
// relation-gated message sums. Returns messages for patch and text targets.
NodeStates relational_attention(const NodeStates& queries, const std::array<Var, 3>& keys,
                                const std::array<Var, 3>& values, Var bias, Var gate,
                                const GraphTopology& topo, std::size_t heads, std::size_t batch);

NodeStates mgt_layer(Binder& bind, const NodeStates& nodes, const GraphTopology& topo,
                     const MgtLayerParams& params, std::size_t batch);
NodeStates mgt_forward(Binder& bind, const NodeStates& nodes, const GraphTopology& topo,
                       const std::vector<MgtLayerParams>& layers, std::size_t batch);

struct PooledGraph {
  Var feature;  // batch x d, unit rows
  std::vector<std::vector<std::size_t>> kept;  // per image, ascending node indices
};

// Scores every node by cosine with the filter direction, keeps the top
// ceil(keep_fraction * nodes) (ties to the lower index) and L2-normalizes
// their sum. While filtering (fewer than all nodes kept), each kept node is
// weighted by 1 + score so the direction receives a gradient; keeping every
// node is plain sum pooling.
PooledGraph filter_and_pool(Var nodes, Var direction, double keep_fraction,
                            std::size_t nodes_per_image);
std::vector<std::size_t> top_fraction(std::span<const double> scores, double keep_fraction);

// cos(f_b, normalize(text_{b,c})) for per-image text nodes (batch*C rows) or
// for a shared C x d text block.
Var graph_logits(Var pooled, Var texts, std::size_t classes);

struct TeacherOutput {
  Var logits;  // batch x C raw cosines
  std::vector<std::vector<std::size_t>> kept;
};

// Full teacher branch on `batch` images whose patch rows are stacked in
// `patches` (batch * P x D). The C prompts are encoded once and shared.
TeacherOutput teacher_forward(Binder& bind, const TeacherParams& params, const Matrix& patches,
                              const Matrix& prompts, std::size_t batch);

}  // namespace kvdistill
