#include "oraclesage/gsrf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "oraclesage/errors.hpp"

namespace oraclesage {

namespace {

constexpr std::size_t kTypeEmbedding = 4;

std::span<const double> row_of(const Tensor& t, std::size_t r) {
  const std::size_t c = t.cols();
  return t.values().subspan(r * c, c);
}

// Top-2 semantic nodes by cosine similarity, ties to the lower index.
std::vector<std::size_t> top_semantic(const Tensor& features, std::span<const double> comp, std::size_t first,
                                      std::size_t count, std::size_t keep) {
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t k = 0; k < count; ++k) scored.emplace_back(cosine_similarity(comp, row_of(features, first + k)), k);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(keep, scored.size()); ++i) out.push_back(scored[i].second);
  return out;
}

}  // namespace

const char* edge_kind_name(EdgeKind kind) {
  switch (kind) {
    case EdgeKind::CC: return "cc";
    case EdgeKind::VC: return "vc";
    case EdgeKind::CS: return "cs";
  }
  return "?";
}

bool EdgeSet::contains(std::size_t s, std::size_t d) const noexcept {
  for (std::size_t e = 0; e < src.size(); ++e)
    if (src[e] == s && dst[e] == d) return true;
  return false;
}

void EdgeSet::add(std::size_t s, std::size_t d, std::array<double, 2> offset) {
  src.push_back(s);
  dst.push_back(d);
  offsets.push_back(offset);
}

NodeKind HeteroGraph::kind(std::size_t node) const noexcept {
  if (node < num_visual) return NodeKind::Visual;
  if (node < num_visual + num_component) return NodeKind::Component;
  return NodeKind::Semantic;
}

std::size_t HeteroGraph::num_edges() const noexcept {
  std::size_t n = 0;
  for (const auto& e : edges) n += e.size();
  return n;
}

void HeteroGraph::validate() const {
  if (features.rows() != num_nodes()) {
    throw ContractError("graph has " + std::to_string(features.rows()) + " feature rows for " +
                        std::to_string(num_nodes()) + " nodes");
  }
  const std::array<std::pair<NodeKind, NodeKind>, 3> allowed{{{NodeKind::Component, NodeKind::Component},
                                                              {NodeKind::Visual, NodeKind::Component},
                                                              {NodeKind::Component, NodeKind::Semantic}}};
  for (EdgeKind k : kEdgeKinds) {
    const EdgeSet& set = edge_set(k);
    const auto [want_src, want_dst] = allowed[static_cast<std::size_t>(k)];
    if (set.dst.size() != set.size() || set.offsets.size() != set.size()) {
      throw ContractError(std::string(edge_kind_name(k)) + " edge arrays differ in length");
    }
    std::vector<std::pair<std::size_t, std::size_t>> seen;
    for (std::size_t e = 0; e < set.size(); ++e) {
      const std::size_t s = set.src[e];
      const std::size_t d = set.dst[e];
      if (s >= num_nodes() || d >= num_nodes() || kind(s) != want_src || kind(d) != want_dst) {
        throw ContractError(std::string(edge_kind_name(k)) + " edge " + std::to_string(s) + "->" +
                            std::to_string(d) + " violates its endpoint types");
      }
      if (s == d) throw ContractError(std::string(edge_kind_name(k)) + " self-loop on node " + std::to_string(s));
      seen.emplace_back(s, d);
    }
    std::sort(seen.begin(), seen.end());
    if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
      throw ContractError(std::string(edge_kind_name(k)) + " edge set has a duplicate edge");
    }
  }
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---------------------------------------------------------------------------

GruCell GruCell::create(ParameterStore& store, const std::string& name, std::size_t width, Rng& rng) {
  return GruCell{Linear::create(store, name + ".input", width, 3 * width, rng),
                 Linear::create(store, name + ".hidden", width, 3 * width, rng)};
}

Tensor GruCell::operator()(const Tensor& h, const Tensor& x) const {
  if (h.shape() != x.shape()) {
    throw DimensionError("gru: hidden " + shape_string(h.shape()) + " vs input " + shape_string(x.shape()));
  }
  const std::size_t d = h.cols();
  const Tensor gi = input(x);
  const Tensor gh = hidden(h);
  const Tensor r = sigmoid(add(slice_cols(gi, 0, d), slice_cols(gh, 0, d)));
  const Tensor z = sigmoid(add(slice_cols(gi, d, 2 * d), slice_cols(gh, d, 2 * d)));
  const Tensor n = tanh(add(slice_cols(gi, 2 * d, 3 * d), mul(r, slice_cols(gh, 2 * d, 3 * d))));
  // (1 - z) * n + z * h
  return add(n, mul(z, sub(h, n)));
}

Tensor MessageMlp::operator()(const Tensor& h_dst, const Tensor& h_src, const Tensor& edge) const {
  if (h_dst.shape() != h_src.shape() || edge.rows() != h_dst.rows()) {
    throw DimensionError("message: " + shape_string(h_dst.shape()) + ", " + shape_string(h_src.shape()) + ", " +
                         shape_string(edge.shape()));
  }
  return second(gelu(first(concat({h_dst, h_src, edge}, 1))));
}

ReasonerConfig ReasonerConfig::from(const ModelConfig& m) {
  return ReasonerConfig{m.reasoning_steps, m.reasoning_heads, m.tau_add, m.tau_prune, m.dynamic_edges,
                        m.leaky_slope};
}

void ReasonerConfig::validate() const {
  if (steps < 1) throw ConfigError("reasoning steps must be at least 1");
  if (heads < 1) throw ConfigError("reasoning heads must be at least 1");
  if (!(tau_prune >= 0.0 && tau_prune < tau_add && tau_add <= 1.0)) {
    throw ConfigError("edge thresholds must satisfy 0 <= tau_prune < tau_add <= 1");
  }
}

// ---------------------------------------------------------------------------

Gsrf::Gsrf(ParameterStore& store, const ModelConfig& config, std::size_t semantic_vocab, std::size_t num_chars,
           std::size_t num_categories, Rng& rng)
    : config_(ReasonerConfig::from(config)), width_(config.width), edge_dim_(config.edge_dim),
      radius_(config.spatial_radius) {
  config_.validate();
  if (semantic_vocab == 0) throw ConfigError("semantic vocabulary is empty");
  if (num_chars == 0 || num_categories == 0) throw ConfigError("character and category vocabularies must be nonempty");
  if (width_ % config_.heads != 0) {
    throw ConfigError("width " + std::to_string(width_) + " not divisible by " + std::to_string(config_.heads) +
                      " reasoning heads");
  }
  const std::size_t d = width_;
  const std::size_t k = d / config_.heads;
  semantic_table_ = store.glorot("gsrf.semantic", semantic_vocab, d, rng);
  edge_types_ = store.glorot("gsrf.edge.types", 3, kTypeEmbedding, rng);
  edge_proj_ = Linear::create(store, "gsrf.edge.proj", kTypeEmbedding + 2, edge_dim_, rng);
  for (EdgeKind kind : kEdgeKinds) {
    const std::string n = std::string("gsrf.msg.") + edge_kind_name(kind);
    mlps_[static_cast<std::size_t>(kind)] = MessageMlp{Linear::create(store, n + ".0", 2 * d + edge_dim_, d, rng),
                                                       Linear::create(store, n + ".1", d, d, rng)};
  }
  w_ = store.glorot("gsrf.attn.w", d, config_.heads * k, rng);
  attn_ = store.glorot("gsrf.attn.a", config_.heads, 2 * k, rng);
  gru_ = GruCell::create(store, "gsrf.gru", d, rng);
  char_head_ = Linear::create(store, "gsrf.head.char", 2 * d, num_chars, rng);
  comp_head_ = Linear::create(store, "gsrf.head.comp", d, num_categories, rng);
  sem_head_ = Linear::create(store, "gsrf.head.sem", d, 1, rng);
  bilinear_ = store.glorot("gsrf.head.adj", d, d, rng);
}

HeteroGraph Gsrf::build_graph(const Tensor& visual, const Tensor& components, std::span<const Region> regions,
                              std::size_t side) const {
  if (components.rows() == 0 || components.numel() == 0) throw ContractError("graph needs at least one component");
  if (regions.size() != components.rows()) throw DimensionError("one region per component row required");
  if (visual.cols() != width_ || components.cols() != width_) {
    throw DimensionError("graph node width must be " + std::to_string(width_));
  }
  HeteroGraph g;
  g.num_visual = visual.rows();
  g.num_component = components.rows();
  g.num_semantic = semantic_table_->tensor.rows();
  g.features = concat({visual, components, semantic_table_->tensor}, 0);

  // Spatial rule between distinct components, offsets from dst to src centroid.
  const SpatialEdges spatial = spatial_adjacency(regions, side, radius_);
  for (std::size_t e = 0; e < spatial.src.size(); ++e) {
    const std::size_t s = spatial.src[e], d = spatial.dst[e];
    if (s == d) continue;
    const auto [rs, cs] = regions[s].centroid(side);
    const auto [rd, cd] = regions[d].centroid(side);
    g.edge_set(EdgeKind::CC).add(g.component_node(s), g.component_node(d), {rs - rd, cs - cd});
  }
  for (std::size_t v = 0; v < g.num_visual; ++v)
    for (std::size_t c = 0; c < g.num_component; ++c) g.edge_set(EdgeKind::VC).add(g.visual_node(v), g.component_node(c));
  for (std::size_t c = 0; c < g.num_component; ++c) {
    for (std::size_t k : top_semantic(g.features, row_of(g.features, g.component_node(c)), g.semantic_node(0),
                                      g.num_semantic, 2)) {
      g.edge_set(EdgeKind::CS).add(g.component_node(c), g.semantic_node(k));
    }
  }
  return g;
}

Tensor Gsrf::edge_features(EdgeKind kind, const EdgeSet& edges) const {
  const std::size_t n = edges.size();
  const std::vector<std::size_t> type_rows(n, static_cast<std::size_t>(kind));
  std::vector<double> offsets;
  offsets.reserve(2 * n);
  for (const auto& o : edges.offsets) offsets.insert(offsets.end(), o.begin(), o.end());
  const Tensor geometry({n, 2}, std::move(offsets));
  return edge_proj_(concat({gather_rows(edge_types_->tensor, type_rows), geometry}, 1));
}

Tensor Gsrf::message(EdgeKind kind, const Tensor& h_dst, const Tensor& h_src, const Tensor& edge) const {
  if (h_dst.cols() != width_ || edge.cols() != edge_dim_) {
    throw DimensionError("message expects widths " + std::to_string(width_) + " and " + std::to_string(edge_dim_));
  }
  return mlp(kind)(h_dst, h_src, edge);
}

Tensor Gsrf::attention_coeffs(const Tensor& features, std::span<const std::size_t> src,
                              std::span<const std::size_t> dst) const {
  const Tensor z = matmul(features, w_->tensor);
  const Tensor logits = graph_attention_logits(z, attn_->tensor, src, dst, config_.slope);
  return segment_softmax(logits, dst, features.rows());
}

Tensor Gsrf::aggregate(const HeteroGraph& graph, std::vector<double>* alpha_out) const {
  const Tensor& h = graph.features;
  std::vector<Tensor> messages;
  std::vector<std::size_t> src, dst;
  for (EdgeKind kind : kEdgeKinds) {
    const EdgeSet& set = graph.edge_set(kind);
    if (set.size() == 0) continue;
    messages.push_back(message(kind, gather_rows(h, set.dst), gather_rows(h, set.src), edge_features(kind, set)));
    src.insert(src.end(), set.src.begin(), set.src.end());
    dst.insert(dst.end(), set.dst.begin(), set.dst.end());
  }
  if (messages.empty()) return Tensor::zeros({h.rows(), h.cols()});
  // Heads are averaged after the per-head weighting, which is linear.
  const Tensor alpha = mean_cols(attention_coeffs(h, src, dst));
  if (alpha_out) alpha_out->assign(alpha.values().begin(), alpha.values().end());
  const Tensor m = messages.size() == 1 ? messages.front() : concat(messages, 0);
  return scatter_add_rows(mul_col(m, alpha), dst, h.rows());
}

HeteroGraph Gsrf::step(const HeteroGraph& graph) const {
  HeteroGraph next = graph;
  next.step = graph.step + 1;
  next.last_alpha.clear();
  if (graph.num_edges() == 0) return next;

  std::vector<double> alpha;
  const Tensor agg = aggregate(graph, &alpha);
  std::size_t e = 0;
  std::vector<double> has_incoming(graph.num_nodes(), 0.0);
  for (EdgeKind kind : kEdgeKinds) {
    const EdgeSet& set = graph.edge_set(kind);
    for (std::size_t i = 0; i < set.size(); ++i, ++e) {
      next.last_alpha[{static_cast<std::size_t>(kind), set.src[i], set.dst[i]}] = alpha[e];
      has_incoming[set.dst[i]] = 1.0;
    }
  }
  const Tensor updated = gru_(graph.features, agg);
  std::vector<double> keep(has_incoming.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = 1.0 - has_incoming[i];
  const std::size_t n = keep.size();
  const Tensor mask({n, 1}, std::move(has_incoming));
  const Tensor hold({n, 1}, std::move(keep));
  next.features = add(mul_col(updated, mask), mul_col(graph.features, hold));
  return next;
}

HeteroGraph Gsrf::dynamic_update(const HeteroGraph& graph) const {
  HeteroGraph next = graph;
  const EdgeSet& old = graph.edge_set(EdgeKind::CS);
  EdgeSet fresh;
  for (std::size_t c = 0; c < graph.num_component; ++c) {
    const std::size_t cn = graph.component_node(c);
    const auto comp = row_of(graph.features, cn);
    std::size_t kept = 0;
    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t k = 0; k < graph.num_semantic; ++k) {
      const std::size_t sn = graph.semantic_node(k);
      const double sim = cosine_similarity(comp, row_of(graph.features, sn));
      const bool present = old.contains(cn, sn);
      if (present && sim > best_sim) {
        best_sim = sim;
        best = sn;
      }
      if ((present && !(sim < config_.tau_prune)) || (!present && sim > config_.tau_add)) {
        fresh.add(cn, sn);
        ++kept;
      }
    }
    // Every component keeps its most similar previous edge.
    if (kept == 0 && best_sim > -2.0) fresh.add(cn, best);
  }
  next.edge_set(EdgeKind::CS) = std::move(fresh);
  return next;
}

HeteroGraph Gsrf::reason(HeteroGraph graph, HeteroGraph* before_last) const {
  for (std::size_t t = 0; t < config_.steps; ++t) {
    if (before_last && t + 1 == config_.steps) *before_last = graph;
    graph = step(graph);
    if (config_.dynamic_edges) graph = dynamic_update(graph);
  }
  return graph;
}

Readout Gsrf::readout(const HeteroGraph& graph) const {
  const Tensor comps = slice_rows(graph.features, graph.num_visual, graph.num_visual + graph.num_component);
  const Tensor sems = slice_rows(graph.features, graph.num_visual + graph.num_component, graph.num_nodes());
  Readout r;
  r.char_logits = char_head_(concat({mean_rows(comps), mean_rows(sems)}, 1));
  r.comp_logits = comp_head_(comps);
  r.sem_logits = sem_head_(sems);
  const Tensor scores = matmul(matmul(comps, bilinear_->tensor), transpose(comps));
  r.adjacency = sigmoid(affine(add(scores, transpose(scores)), 0.5));
  return r;
}

// ---------------------------------------------------------------------------

std::string graph_to_dot(const HeteroGraph& graph, std::span<const std::string> semantic_names) {
  std::ostringstream os;
  auto node_name = [&](std::size_t n) {
    switch (graph.kind(n)) {
      case NodeKind::Visual: return "v" + std::to_string(n);
      case NodeKind::Component: return "c" + std::to_string(n - graph.num_visual);
      case NodeKind::Semantic: return "s" + std::to_string(n - graph.num_visual - graph.num_component);
    }
    return std::string("?");
  };
  os << "digraph reasoning {\n  rankdir=LR;\n";
  for (std::size_t v = 0; v < graph.num_visual; ++v)
    os << "  v" << v << " [shape=box, label=\"visual " << v << "\"];\n";
  for (std::size_t c = 0; c < graph.num_component; ++c)
    os << "  c" << c << " [shape=ellipse, label=\"component " << c << "\"];\n";
  for (std::size_t s = 0; s < graph.num_semantic; ++s) {
    os << "  s" << s << " [shape=diamond, label=\"semantic " << s;
    if (s < semantic_names.size()) os << ": " << semantic_names[s];
    os << "\"];\n";
  }
  char buf[32];
  for (EdgeKind kind : kEdgeKinds) {
    const EdgeSet& set = graph.edge_set(kind);
    for (std::size_t e = 0; e < set.size(); ++e) {
      os << "  " << node_name(set.src[e]) << " -> " << node_name(set.dst[e]) << " [label=\"" << edge_kind_name(kind);
      const auto it = graph.last_alpha.find({static_cast<std::size_t>(kind), set.src[e], set.dst[e]});
      if (it != graph.last_alpha.end()) {
        std::snprintf(buf, sizeof buf, " %.4f", it->second);
        os << buf;
      } else {
        os << " new";
      }
      os << "\"];\n";
    }
  }
  os << "}\n";
  return os.str();
}

}  // namespace oraclesage
