#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "oraclesage/config.hpp"
#include "oraclesage/nn.hpp"
#include "oraclesage/ops.hpp"
#include "oraclesage/rng.hpp"
#include "oraclesage/tensor.hpp"

namespace oraclesage {

/// Grayscale image with intensities in [0, 1], row-major.
struct GlyphImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  static GlyphImage blank(std::size_t side) { return {side, side, std::vector<double>(side * side, 0.0)}; }
  double at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  /// Throws DataError unless the image is side x side with intensities in [0, 1].
  void validate(std::size_t side) const;
};

/// One square feature map of the pyramid; `features` is (side*side) x d, row-major cells.
struct FeatureLevel {
  std::size_t side = 0;
  Tensor features;
};

struct FeaturePyramid {
  std::vector<FeatureLevel> levels;

  std::size_t width() const { return levels.front().features.cols(); }
};

/// Half-open cell box [row0, row1) x [col0, col1) on one pyramid level.
struct Region {
  std::size_t row0 = 0;
  std::size_t col0 = 0;
  std::size_t row1 = 1;
  std::size_t col1 = 1;
  double score = 0.0;
  std::size_t level = 0;

  std::size_t cell_count() const noexcept { return (row1 - row0) * (col1 - col0); }
  /// Centroid in normalized [0, 1] coordinates (row, col) for a grid of `side` cells.
  std::pair<double, double> centroid(std::size_t side) const noexcept;
  /// Normalized (x0, y0, x1, y1) box for a grid of `side` cells.
  std::array<double, 4> normalized_box(std::size_t side) const noexcept;
  bool operator==(const Region& o) const noexcept {
    return row0 == o.row0 && col0 == o.col0 && row1 == o.row1 && col1 == o.col1 && level == o.level;
  }
};

/// Trainable stand-in for a frozen vision encoder: linear patch embedding,
/// positional table, and pre-norm transformer blocks.
class PatchEncoderStub {
 public:
  struct Block {
    LayerNorm ln1;
    MultiHeadAttention attention;
    LayerNorm ln2;
    FeedForward ffn;
  };

  PatchEncoderStub() = default;
  PatchEncoderStub(ParameterStore& store, const ModelConfig& config, Rng& rng);

  /// P x (patch*patch) matrix of raw patch pixels.
  Tensor patchify(const GlyphImage& image) const;
  /// P x d visual features.
  Tensor encode(const GlyphImage& image, AttentionProbe* probe = nullptr) const;
  /// Patch embedding plus positions, before any block.
  Tensor embed(const GlyphImage& image) const;
  /// Runs blocks [first, last) on already-embedded tokens.
  Tensor run_blocks(Tensor tokens, AttentionProbe* probe = nullptr, std::size_t first = 0,
                    std::size_t last = SIZE_MAX) const;

  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  ParamRef positions() const noexcept { return positions_; }
  const Linear& patch_projection() const noexcept { return patch_; }

 private:
  std::size_t input_size_ = 0;
  std::size_t patch_size_ = 0;
  Linear patch_;
  ParamRef positions_ = nullptr;
  std::vector<Block> blocks_;
};

/// Learnable queries cross-attending to visual features, then an FFN.
struct QueryPool {
  ParamRef queries = nullptr;
  MultiHeadAttention attention;
  FeedForward ffn;

  static QueryPool create(ParameterStore& store, const std::string& name, const ModelConfig& config,
                          Rng& rng);
  Tensor operator()(const Tensor& visual, AttentionProbe* probe = nullptr) const;
  /// Same computation with caller-supplied queries (M x d).
  Tensor pool(const Tensor& visual, const Tensor& queries, AttentionProbe* probe = nullptr) const;
};

/// Post-norm adaptation layers: X' = LN(X + Drop(MHA(X))), X_out = LN(X' + Drop(FFN(X'))).
class AdapterStack {
 public:
  struct Layer {
    MultiHeadAttention attention;
    LayerNorm ln1;
    FeedForward ffn;
    LayerNorm ln2;
  };

  AdapterStack() = default;
  AdapterStack(ParameterStore& store, const ModelConfig& config, Rng& rng);

  Tensor operator()(const Tensor& x, Mode mode, Rng& rng, AttentionProbe* probe = nullptr) const;

  const std::vector<Layer>& layers() const noexcept { return layers_; }
  double dropout_rate() const noexcept { return dropout_; }

 private:
  std::vector<Layer> layers_;
  double dropout_ = 0.0;
};

/// Level 0 is the grid reshape of X (P must be a perfect square); each
/// further level halves the side by adaptive average pooling of level 0.
FeaturePyramid build_pyramid(const Tensor& x, std::size_t levels = 3);

/// Constant (target^2 x source^2) adaptive average pooling matrix.
Tensor adaptive_pool_matrix(std::size_t source_side, std::size_t target_side);

/// Per-cell salience on level 0: L2 norm of each cell.
std::vector<double> cell_salience(const FeaturePyramid& pyramid);

/// Thresholded-salience connected components on level 0, best `max_regions` by
/// summed salience; falls back to the whole grid when no cell passes.
std::vector<Region> propose_regions(const FeaturePyramid& pyramid, std::size_t max_regions,
                                    double threshold);
/// Same rule on a raw salience map (side x side, row-major).
std::vector<Region> regions_from_salience(std::span<const double> salience, std::size_t side,
                                          std::size_t max_regions, double threshold);

/// Cell indices (row-major on the region's level) covered by a region.
std::vector<std::size_t> region_cells(const Region& region, std::size_t side);

/// Single-head attention over a region's cells, mean-pooled to one row.
struct RegionAttention {
  ParamRef w_q = nullptr;
  ParamRef w_k = nullptr;
  ParamRef w_v = nullptr;

  static RegionAttention create(ParameterStore& store, const std::string& name, std::size_t width,
                                Rng& rng);
  /// Attended matrix softmax(Q K^T / sqrt(d)) V for the given k x d cell features.
  Tensor attend(const Tensor& cells, AttentionProbe* probe = nullptr) const;
  /// 1 x d mean of the attended rows for a region of the pyramid.
  Tensor operator()(const FeaturePyramid& pyramid, const Region& region,
                    AttentionProbe* probe = nullptr) const;
};

/// Directed spatial edges (src, dst) between regions, self-loops included.
struct SpatialEdges {
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;
};

/// Edge i->j iff the normalized centroid distance is within radius * sqrt(2).
SpatialEdges spatial_adjacency(std::span<const Region> regions, std::size_t side, double radius);

/// Multi-head GAT logits: leaky(a_dst . z_dst + a_src . z_src) per head, E x heads.
/// `z` is N x (heads*k) projected features; `attn` is heads x 2k, [dst half | src half].
Tensor graph_attention_logits(const Tensor& z, const Tensor& attn, std::span<const std::size_t> src,
                              std::span<const std::size_t> dst, double slope);

/// Scales each head's column block of x (E x heads*k) by weights (E x heads).
Tensor scale_heads(const Tensor& x, const Tensor& weights);

/// One graph attention layer over the component graph; head outputs are
/// concatenated and projected back to d.
struct SpatialRelationEncoder {
  ParamRef w = nullptr;     // d x (heads*k)
  ParamRef attn = nullptr;  // heads x 2k
  Linear out;               // heads*k -> d
  std::size_t heads = 1;
  double radius = 0.75;
  double slope = 0.2;

  static SpatialRelationEncoder create(ParameterStore& store, const std::string& name,
                                       const ModelConfig& config, Rng& rng);
  Tensor operator()(std::span<const Region> regions, std::size_t side, const Tensor& features,
                    AttentionProbe* probe = nullptr) const;
  /// GAT over an explicit edge list.
  Tensor over_edges(const SpatialEdges& edges, const Tensor& features,
                    AttentionProbe* probe = nullptr) const;
};

struct FusionResult {
  Tensor per_component;  // k x d
  Tensor character;      // 1 x d, sum over components
  Tensor gates;          // k x d
};

/// Gated fusion: g = sigmoid(W_g [F ; A ; H] + b), fused = g * (W_c [F ; A ; H] + b_c).
struct FusionGate {
  Linear gate;
  Linear projection;

  static FusionGate create(ParameterStore& store, const std::string& name, std::size_t width, Rng& rng);
  FusionResult operator()(const Tensor& region_feats, const Tensor& attended,
                          const Tensor& structural) const;
};

struct HvsuOutput {
  Tensor visual;      // P x d encoder output
  Tensor adapted;     // P x d
  FeaturePyramid pyramid;
  std::vector<Region> regions;
  Tensor region_feats;  // k x d, mean of region cells
  Tensor attended;      // k x d
  Tensor structural;    // k x d
  FusionResult fused;
  Tensor pooled_queries;  // M x d when query pooling is on
  bool has_pooled_queries = false;
};

/// Hierarchical visual-semantic feature extraction: encoder, adaptation,
/// pyramid, regions, region attention, spatial relations, and fusion.
class Hvsu {
 public:
  Hvsu() = default;
  Hvsu(ParameterStore& store, const ModelConfig& config, Rng& rng);

  HvsuOutput forward(const GlyphImage& image, Mode mode, Rng& rng, AttentionProbe* probe = nullptr) const;
  /// Forward from precomputed encoder output (P x d).
  HvsuOutput forward_from_visual(Tensor visual, Mode mode, Rng& rng,
                                 AttentionProbe* probe = nullptr) const;

  const PatchEncoderStub& encoder() const noexcept { return encoder_; }
  const AdapterStack& adapter() const noexcept { return adapter_; }
  const QueryPool& query_pool() const noexcept { return query_pool_; }
  const RegionAttention& region_attention() const noexcept { return region_attention_; }
  const SpatialRelationEncoder& spatial() const noexcept { return spatial_; }
  const FusionGate& fusion() const noexcept { return fusion_; }
  const ModelConfig& config() const noexcept { return config_; }

 private:
  ModelConfig config_;
  PatchEncoderStub encoder_;
  AdapterStack adapter_;
  QueryPool query_pool_;
  RegionAttention region_attention_;
  SpatialRelationEncoder spatial_;
  FusionGate fusion_;
};

}  // namespace oraclesage
