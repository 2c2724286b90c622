#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <tuple>
#include <span>
#include <string>
#include <vector>

#include "oraclesage/config.hpp"
#include "oraclesage/hvsu.hpp"
#include "oraclesage/nn.hpp"
#include "oraclesage/tensor.hpp"

namespace oraclesage {

enum class NodeKind { Visual, Component, Semantic };
/// Component-component, visual-component, component-semantic.
enum class EdgeKind : std::size_t { CC = 0, VC = 1, CS = 2 };
inline constexpr std::array<EdgeKind, 3> kEdgeKinds{EdgeKind::CC, EdgeKind::VC, EdgeKind::CS};
const char* edge_kind_name(EdgeKind kind);

/// Directed edges of one type between global node indices.
struct EdgeSet {
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;
  /// Normalized centroid offset (d_row, d_col) from dst to src; zero for non-spatial edges.
  std::vector<std::array<double, 2>> offsets;

  std::size_t size() const noexcept { return src.size(); }
  bool contains(std::size_t s, std::size_t d) const noexcept;
  void add(std::size_t s, std::size_t d, std::array<double, 2> offset = {0.0, 0.0});
};

/// Typed reasoning graph. Node rows in `features` are ordered visual,
/// component, semantic.
struct HeteroGraph {
  Tensor features;
  std::size_t num_visual = 0;
  std::size_t num_component = 0;
  std::size_t num_semantic = 0;
  std::array<EdgeSet, 3> edges;
  std::size_t step = 0;
  /// Head-averaged attention of the most recent step, keyed by (kind, src, dst).
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, double> last_alpha;

  std::size_t num_nodes() const noexcept { return num_visual + num_component + num_semantic; }
  std::size_t visual_node(std::size_t i) const noexcept { return i; }
  std::size_t component_node(std::size_t j) const noexcept { return num_visual + j; }
  std::size_t semantic_node(std::size_t k) const noexcept { return num_visual + num_component + k; }
  NodeKind kind(std::size_t node) const noexcept;
  EdgeSet& edge_set(EdgeKind k) noexcept { return edges[static_cast<std::size_t>(k)]; }
  const EdgeSet& edge_set(EdgeKind k) const noexcept { return edges[static_cast<std::size_t>(k)]; }
  std::size_t num_edges() const noexcept;

  /// Throws ContractError on a type-constraint violation or duplicate edge.
  void validate() const;
};

/// Cosine similarity of two equal-length rows; 0 when either is zero.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Standard gated recurrent unit: hidden h, input x, both width d.
struct GruCell {
  Linear input;   // d -> 3d  [reset | update | candidate]
  Linear hidden;  // d -> 3d

  static GruCell create(ParameterStore& store, const std::string& name, std::size_t width, Rng& rng);
  Tensor operator()(const Tensor& h, const Tensor& x) const;
};

/// Two-layer GELU message MLP over [h_dst ; h_src ; e].
struct MessageMlp {
  Linear first;
  Linear second;

  Tensor operator()(const Tensor& h_dst, const Tensor& h_src, const Tensor& edge) const;
};

struct ReasonerConfig {
  std::size_t steps = 3;
  std::size_t heads = 8;
  double tau_add = 0.5;
  double tau_prune = 0.3;
  bool dynamic_edges = true;
  double slope = 0.2;

  static ReasonerConfig from(const ModelConfig& m);
  void validate() const;
};

struct Readout {
  Tensor char_logits;  // 1 x |C|
  Tensor comp_logits;  // k x |categories|
  Tensor sem_logits;   // |semantic| x 1
  Tensor adjacency;    // k x k, sigmoid of symmetrized bilinear scores
};

/// Heterogeneous-graph reasoning: attention-weighted messages, GRU updates,
/// hysteresis edge updates, and linear readout heads.
class Gsrf {
 public:
  Gsrf() = default;
  Gsrf(ParameterStore& store, const ModelConfig& config, std::size_t semantic_vocab,
       std::size_t num_chars, std::size_t num_categories, Rng& rng);

  /// Visual rows (nv x d), fused components (k x d) with their regions on a
  /// `side` grid; semantic nodes come from the embedding table.
  HeteroGraph build_graph(const Tensor& visual, const Tensor& components, std::span<const Region> regions,
                          std::size_t side) const;

  Tensor edge_features(EdgeKind kind, const EdgeSet& edges) const;
  Tensor message(EdgeKind kind, const Tensor& h_dst, const Tensor& h_src, const Tensor& edge) const;
  /// Attention over incoming edges, E x heads, normalized per destination.
  Tensor attention_coeffs(const Tensor& features, std::span<const std::size_t> src,
                          std::span<const std::size_t> dst) const;
  /// Sum_j alpha_ij m_ij for every node (zeros for nodes without incoming edges).
  Tensor aggregate(const HeteroGraph& graph, std::vector<double>* alpha_out = nullptr) const;
  HeteroGraph step(const HeteroGraph& graph) const;
  HeteroGraph dynamic_update(const HeteroGraph& graph) const;
  /// T steps, each followed by a dynamic update when enabled. When `before_last`
  /// is given it receives the graph entering the final step.
  HeteroGraph reason(HeteroGraph graph, HeteroGraph* before_last = nullptr) const;
  Readout readout(const HeteroGraph& graph) const;

  const ReasonerConfig& config() const noexcept { return config_; }
  void set_config(const ReasonerConfig& c) { config_ = c; }
  ParamRef semantic_table() const noexcept { return semantic_table_; }
  ParamRef projection() const noexcept { return w_; }
  ParamRef attention() const noexcept { return attn_; }
  const GruCell& gru() const noexcept { return gru_; }
  const MessageMlp& mlp(EdgeKind k) const noexcept { return mlps_[static_cast<std::size_t>(k)]; }
  const Linear& char_head() const noexcept { return char_head_; }
  const Linear& comp_head() const noexcept { return comp_head_; }
  const Linear& sem_head() const noexcept { return sem_head_; }
  ParamRef adjacency_bilinear() const noexcept { return bilinear_; }

 private:
  ReasonerConfig config_;
  std::size_t width_ = 0;
  std::size_t edge_dim_ = 0;
  double radius_ = 0.75;
  ParamRef semantic_table_ = nullptr;
  ParamRef edge_types_ = nullptr;
  Linear edge_proj_;
  std::array<MessageMlp, 3> mlps_;
  ParamRef w_ = nullptr;
  ParamRef attn_ = nullptr;
  GruCell gru_;
  Linear char_head_;
  Linear comp_head_;
  Linear sem_head_;
  ParamRef bilinear_ = nullptr;
};

/// Graphviz rendering: nodes by type and index, edges by type and last attention.
std::string graph_to_dot(const HeteroGraph& graph, std::span<const std::string> semantic_names = {});

}  // namespace oraclesage
