#include "oraclesage/hvsu.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "oraclesage/errors.hpp"

namespace oraclesage {

void GlyphImage::validate(std::size_t side) const {
  if (width != side || height != side) {
    throw DataError("image is " + std::to_string(width) + "x" + std::to_string(height) +
                    ", expected " + std::to_string(side) + "x" + std::to_string(side));
  }
  if (pixels.size() != width * height) throw DataError("image pixel count does not match its size");
  for (double p : pixels) {
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("image intensity outside [0, 1]");
  }
}

std::pair<double, double> Region::centroid(std::size_t side) const noexcept {
  const double s = static_cast<double>(side);
  return {(static_cast<double>(row0 + row1) / 2.0) / s, (static_cast<double>(col0 + col1) / 2.0) / s};
}

std::array<double, 4> Region::normalized_box(std::size_t side) const noexcept {
  const double s = static_cast<double>(side);
  return {static_cast<double>(col0) / s, static_cast<double>(row0) / s, static_cast<double>(col1) / s,
          static_cast<double>(row1) / s};
}

// ---------------------------------------------------------------------------

PatchEncoderStub::PatchEncoderStub(ParameterStore& store, const ModelConfig& config, Rng& rng)
    : input_size_(config.input_size), patch_size_(config.patch_size) {
  const std::size_t pixels = config.patch_size * config.patch_size;
  patch_ = Linear::create(store, "encoder.patch", pixels, config.width, rng);
  positions_ = store.glorot("encoder.pos", config.num_patches(), config.width, rng, 0.0);
  // Residual branches start small so random blocks do not scramble patch content.
  const double branch = 0.25 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, config.encoder_blocks)));
  for (std::size_t b = 0; b < config.encoder_blocks; ++b) {
    const std::string n = "encoder.blocks." + std::to_string(b);
    blocks_.push_back(Block{LayerNorm::create(store, n + ".ln1", config.width, config.ln_eps),
                            MultiHeadAttention::create(store, n + ".mha", config.width,
                                                       config.encoder_heads, rng, branch),
                            LayerNorm::create(store, n + ".ln2", config.width, config.ln_eps),
                            FeedForward::create(store, n + ".ffn", config.width, config.ffn_hidden, rng, branch)});
  }
}

Tensor PatchEncoderStub::patchify(const GlyphImage& image) const {
  image.validate(input_size_);
  const std::size_t grid = input_size_ / patch_size_;
  const std::size_t pp = patch_size_ * patch_size_;
  std::vector<double> out(grid * grid * pp);
  for (std::size_t gr = 0; gr < grid; ++gr)
    for (std::size_t gc = 0; gc < grid; ++gc)
      for (std::size_t r = 0; r < patch_size_; ++r)
        for (std::size_t c = 0; c < patch_size_; ++c)
          out[(gr * grid + gc) * pp + r * patch_size_ + c] =
              image.at(gr * patch_size_ + r, gc * patch_size_ + c);
  return Tensor({grid * grid, pp}, std::move(out));
}

Tensor PatchEncoderStub::encode(const GlyphImage& image, AttentionProbe* probe) const {
  return run_blocks(embed(image), probe);
}

Tensor PatchEncoderStub::embed(const GlyphImage& image) const {
  return add(patch_(patchify(image)), positions_->tensor);
}

Tensor PatchEncoderStub::run_blocks(Tensor x, AttentionProbe* probe, std::size_t first, std::size_t last) const {
  for (std::size_t i = first; i < std::min(last, blocks_.size()); ++i) {
    const auto& b = blocks_[i];
    const Tensor h = b.ln1(x);
    x = add(x, b.attention(h, h, probe));
    x = add(x, b.ffn(b.ln2(x)));
  }
  return x;
}

// ---------------------------------------------------------------------------

QueryPool QueryPool::create(ParameterStore& store, const std::string& name, const ModelConfig& config,
                            Rng& rng) {
  QueryPool q;
  q.queries = store.glorot(name + ".queries", config.queries, config.width, rng);
  q.attention = MultiHeadAttention::create(store, name + ".mha", config.width, config.adapter_heads, rng);
  q.ffn = FeedForward::create(store, name + ".ffn", config.width, config.ffn_hidden, rng);
  return q;
}

Tensor QueryPool::operator()(const Tensor& visual, AttentionProbe* probe) const {
  return pool(visual, queries->tensor, probe);
}

Tensor QueryPool::pool(const Tensor& visual, const Tensor& q, AttentionProbe* probe) const {
  return ffn(attention(q, visual, probe));
}

// ---------------------------------------------------------------------------

AdapterStack::AdapterStack(ParameterStore& store, const ModelConfig& config, Rng& rng)
    : dropout_(config.dropout) {
  const double branch = 0.25 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, config.adapter_layers)));
  for (std::size_t l = 0; l < config.adapter_layers; ++l) {
    const std::string n = "hvsu.adapt." + std::to_string(l);
    layers_.push_back(Layer{
        MultiHeadAttention::create(store, n + ".mha", config.width, config.adapter_heads, rng, branch),
        LayerNorm::create(store, n + ".ln1", config.width, config.ln_eps),
        FeedForward::create(store, n + ".ffn", config.width, config.ffn_hidden, rng, branch),
        LayerNorm::create(store, n + ".ln2", config.width, config.ln_eps)});
  }
}

Tensor AdapterStack::operator()(const Tensor& x, Mode mode, Rng& rng, AttentionProbe* probe) const {
  Tensor h = x;
  for (const auto& layer : layers_) {
    h = layer.ln1(add(h, dropout(layer.attention(h, h, probe), dropout_, mode, rng)));
    h = layer.ln2(add(h, dropout(layer.ffn(h), dropout_, mode, rng)));
  }
  return h;
}

// ---------------------------------------------------------------------------

Tensor adaptive_pool_matrix(std::size_t source_side, std::size_t target_side) {
  const std::size_t s = source_side;
  const std::size_t t = target_side;
  std::vector<double> m(t * t * s * s, 0.0);
  auto span = [s, t](std::size_t i) {
    const std::size_t lo = i * s / t;
    const std::size_t hi = ((i + 1) * s + t - 1) / t;
    return std::pair{lo, hi};
  };
  for (std::size_t i = 0; i < t; ++i) {
    const auto [r0, r1] = span(i);
    for (std::size_t j = 0; j < t; ++j) {
      const auto [c0, c1] = span(j);
      const double w = 1.0 / static_cast<double>((r1 - r0) * (c1 - c0));
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) m[(i * t + j) * s * s + r * s + c] = w;
    }
  }
  return Tensor({t * t, s * s}, std::move(m));
}

FeaturePyramid build_pyramid(const Tensor& x, std::size_t levels) {
  const std::size_t p = x.rows();
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(p))));
  if (x.rank() != 2 || side * side != p) {
    throw DimensionError("build_pyramid needs a square number of patches, got " + shape_string(x.shape()));
  }
  if (levels == 0 || (side >> (levels - 1)) == 0) {
    throw DimensionError("pyramid of " + std::to_string(levels) + " levels does not fit a " +
                         std::to_string(side) + "x" + std::to_string(side) + " grid");
  }
  FeaturePyramid pyr;
  pyr.levels.push_back(FeatureLevel{side, x});
  for (std::size_t l = 1; l < levels; ++l) {
    const std::size_t target = side >> l;
    pyr.levels.push_back(FeatureLevel{target, matmul(adaptive_pool_matrix(side, target), x)});
  }
  return pyr;
}

std::vector<double> cell_salience(const FeaturePyramid& pyramid) {
  const auto& f = pyramid.levels.front().features;
  std::vector<double> out(f.rows());
  for (std::size_t r = 0; r < f.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < f.cols(); ++c) s += f.at(r, c) * f.at(r, c);
    out[r] = std::sqrt(s);
  }
  return out;
}

std::vector<Region> regions_from_salience(std::span<const double> salience, std::size_t side,
                                          std::size_t max_regions, double threshold) {
  if (salience.size() != side * side) throw DimensionError("salience map does not match grid side");
  if (max_regions == 0) throw ConfigError("max_regions must be at least 1");
  const double mean_s =
      std::accumulate(salience.begin(), salience.end(), 0.0) / static_cast<double>(salience.size());
  const double cut = threshold * mean_s;
  std::vector<char> on(salience.size());
  for (std::size_t i = 0; i < salience.size(); ++i) on[i] = salience[i] > cut ? 1 : 0;

  std::vector<Region> found;
  std::vector<char> seen(salience.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < on.size(); ++start) {
    if (!on[start] || seen[start]) continue;
    Region reg{side, side, 0, 0, 0.0, 0};
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t cell = stack.back();
      stack.pop_back();
      const std::size_t r = cell / side;
      const std::size_t c = cell % side;
      reg.row0 = std::min(reg.row0, r);
      reg.col0 = std::min(reg.col0, c);
      reg.row1 = std::max(reg.row1, r + 1);
      reg.col1 = std::max(reg.col1, c + 1);
      reg.score += salience[cell];
      const std::array<std::pair<long, long>, 4> nbrs{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
      for (auto [dr, dc] : nbrs) {
        const long nr = static_cast<long>(r) + dr;
        const long nc = static_cast<long>(c) + dc;
        if (nr < 0 || nc < 0 || nr >= static_cast<long>(side) || nc >= static_cast<long>(side)) continue;
        const std::size_t next = static_cast<std::size_t>(nr) * side + static_cast<std::size_t>(nc);
        if (on[next] && !seen[next]) {
          seen[next] = 1;
          stack.push_back(next);
        }
      }
    }
    found.push_back(reg);
  }
  if (found.empty()) {
    const double total = std::accumulate(salience.begin(), salience.end(), 0.0);
    return {Region{0, 0, side, side, total, 0}};
  }
  std::stable_sort(found.begin(), found.end(),
                   [](const Region& a, const Region& b) { return a.score > b.score; });
  if (found.size() > max_regions) found.resize(max_regions);
  return found;
}

std::vector<Region> propose_regions(const FeaturePyramid& pyramid, std::size_t max_regions,
                                    double threshold) {
  return regions_from_salience(cell_salience(pyramid), pyramid.levels.front().side, max_regions,
                               threshold);
}

std::vector<std::size_t> region_cells(const Region& region, std::size_t side) {
  if (region.row0 >= region.row1 || region.col0 >= region.col1 || region.row1 > side ||
      region.col1 > side) {
    throw DimensionError("region box lies outside its level or is empty");
  }
  std::vector<std::size_t> cells;
  cells.reserve(region.cell_count());
  for (std::size_t r = region.row0; r < region.row1; ++r)
    for (std::size_t c = region.col0; c < region.col1; ++c) cells.push_back(r * side + c);
  return cells;
}

// ---------------------------------------------------------------------------

RegionAttention RegionAttention::create(ParameterStore& store, const std::string& name,
                                        std::size_t width, Rng& rng) {
  return RegionAttention{store.glorot(name + ".w_q", width, width, rng),
                         store.glorot(name + ".w_k", width, width, rng),
                         store.glorot(name + ".w_v", width, width, rng)};
}

Tensor RegionAttention::attend(const Tensor& cells, AttentionProbe* probe) const {
  const std::size_t d = w_q->tensor.shape()[0];
  if (cells.cols() != d) throw DimensionError("region features width does not match projections");
  const Tensor q = matmul(cells, w_q->tensor);
  const Tensor k = matmul(cells, w_k->tensor);
  const Tensor v = matmul(cells, w_v->tensor);
  const Tensor weights = softmax(affine(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d))), 1);
  if (probe) probe->weights.push_back(weights);
  return matmul(weights, v);
}

Tensor RegionAttention::operator()(const FeaturePyramid& pyramid, const Region& region,
                                   AttentionProbe* probe) const {
  const auto& level = pyramid.levels.at(region.level);
  const auto cells = region_cells(region, level.side);
  return mean_rows(attend(gather_rows(level.features, cells), probe));
}

// ---------------------------------------------------------------------------

SpatialEdges spatial_adjacency(std::span<const Region> regions, std::size_t side, double radius) {
  SpatialEdges e;
  const double limit = radius * std::sqrt(2.0);
  for (std::size_t dst = 0; dst < regions.size(); ++dst) {
    const auto [ri, ci] = regions[dst].centroid(side);
    for (std::size_t src = 0; src < regions.size(); ++src) {
      const auto [rj, cj] = regions[src].centroid(side);
      if (src == dst || std::hypot(ri - rj, ci - cj) <= limit) {
        e.src.push_back(src);
        e.dst.push_back(dst);
      }
    }
  }
  return e;
}

Tensor graph_attention_logits(const Tensor& z, const Tensor& attn, std::span<const std::size_t> src,
                              std::span<const std::size_t> dst, double slope) {
  const std::size_t k = attn.cols() / 2;
  const Tensor dst_score = head_dot(z, slice_cols(attn, 0, k));
  const Tensor src_score = head_dot(z, slice_cols(attn, k, 2 * k));
  return leaky_relu(add(gather_rows(dst_score, dst), gather_rows(src_score, src)), slope);
}

Tensor scale_heads(const Tensor& x, const Tensor& weights) {
  const std::size_t rows = x.rows();
  const std::size_t heads = weights.cols();
  if (weights.rows() != rows || x.cols() % heads != 0) {
    throw DimensionError("scale_heads: " + shape_string(x.shape()) + " vs weights " +
                         shape_string(weights.shape()));
  }
  const std::size_t width = x.cols();
  const std::size_t k = width / heads;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] = x[r * width + c] * weights[r * heads + c / k];
  auto xv = x.storage();
  auto wv = weights.storage();
  const std::array<const Tensor*, 2> in{&x, &weights};
  return make_result("scale_heads", x.shape(), std::move(out), in,
                     [xv, wv, rows, width, heads, k](Tape& t, NodeId o, const std::vector<NodeId>& ids) {
                       auto go = t.grad(o);
                       if (ids[0] != kNoNode) {
                         auto gx = t.grad(ids[0]);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < width; ++c)
                             gx[r * width + c] += go[r * width + c] * (*wv)[r * heads + c / k];
                       }
                       if (ids[1] != kNoNode) {
                         auto gw = t.grad(ids[1]);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < width; ++c)
                             gw[r * heads + c / k] += go[r * width + c] * (*xv)[r * width + c];
                       }
                     });
}

SpatialRelationEncoder SpatialRelationEncoder::create(ParameterStore& store, const std::string& name,
                                                      const ModelConfig& config, Rng& rng) {
  SpatialRelationEncoder s;
  const std::size_t k = config.width / config.spatial_heads;
  s.w = store.glorot(name + ".w", config.width, config.spatial_heads * k, rng);
  s.attn = store.glorot(name + ".attn", config.spatial_heads, 2 * k, rng);
  s.out = Linear::create(store, name + ".out", config.spatial_heads * k, config.width, rng);
  s.heads = config.spatial_heads;
  s.radius = config.spatial_radius;
  s.slope = config.leaky_slope;
  return s;
}

Tensor SpatialRelationEncoder::operator()(std::span<const Region> regions, std::size_t side,
                                          const Tensor& features, AttentionProbe* probe) const {
  if (regions.size() != features.rows()) throw DimensionError("one feature row per region required");
  return over_edges(spatial_adjacency(regions, side, radius), features, probe);
}

Tensor SpatialRelationEncoder::over_edges(const SpatialEdges& edges, const Tensor& features,
                                          AttentionProbe* probe) const {
  const std::size_t n = features.rows();
  const Tensor z = matmul(features, w->tensor);
  const Tensor logits = graph_attention_logits(z, attn->tensor, edges.src, edges.dst, slope);
  const Tensor alpha = segment_softmax(logits, edges.dst, n);
  if (probe) probe->weights.push_back(alpha);
  const Tensor messages = scale_heads(gather_rows(z, edges.src), alpha);
  return out(scatter_add_rows(messages, edges.dst, n));
}

// ---------------------------------------------------------------------------

FusionGate FusionGate::create(ParameterStore& store, const std::string& name, std::size_t width, Rng& rng) {
  return FusionGate{Linear::create(store, name + ".gate", 3 * width, width, rng),
                    Linear::create(store, name + ".proj", 3 * width, width, rng)};
}

FusionResult FusionGate::operator()(const Tensor& region_feats, const Tensor& attended,
                                    const Tensor& structural) const {
  if (region_feats.shape() != attended.shape() || attended.shape() != structural.shape()) {
    throw DimensionError("fusion inputs must share shape: " + shape_string(region_feats.shape()) + ", " +
                         shape_string(attended.shape()) + ", " + shape_string(structural.shape()));
  }
  const Tensor joined = concat({region_feats, attended, structural}, 1);
  const Tensor g = sigmoid(gate(joined));
  const Tensor fused = mul(g, projection(joined));
  return FusionResult{fused, sum_rows(fused), g};
}

// ---------------------------------------------------------------------------

Hvsu::Hvsu(ParameterStore& store, const ModelConfig& config, Rng& rng) : config_(config) {
  config.validate();
  encoder_ = PatchEncoderStub(store, config, rng);
  adapter_ = AdapterStack(store, config, rng);
  if (config.use_query_pool) query_pool_ = QueryPool::create(store, "hvsu.query_pool", config, rng);
  region_attention_ = RegionAttention::create(store, "hvsu.region_attn", config.width, rng);
  spatial_ = SpatialRelationEncoder::create(store, "hvsu.spatial", config, rng);
  fusion_ = FusionGate::create(store, "hvsu.fusion", config.width, rng);
}

HvsuOutput Hvsu::forward(const GlyphImage& image, Mode mode, Rng& rng, AttentionProbe* probe) const {
  return forward_from_visual(encoder_.encode(image, probe), mode, rng, probe);
}

HvsuOutput Hvsu::forward_from_visual(Tensor visual, Mode mode, Rng& rng, AttentionProbe* probe) const {
  HvsuOutput out;
  out.visual = std::move(visual);
  out.adapted = adapter_(out.visual, mode, rng, probe);
  out.pyramid = build_pyramid(out.adapted, config_.pyramid_levels);
  // Adapted rows leave a layernorm with near-constant norms, so proposals read the encoder features.
  out.regions = propose_regions(build_pyramid(out.visual, 1), config_.max_regions, config_.region_threshold);

  const auto& level0 = out.pyramid.levels.front();
  std::vector<Tensor> means;
  std::vector<Tensor> attended;
  for (const auto& region : out.regions) {
    const Tensor cells = gather_rows(level0.features, region_cells(region, level0.side));
    means.push_back(mean_rows(cells));
    attended.push_back(mean_rows(region_attention_.attend(cells, probe)));
  }
  out.region_feats = means.size() == 1 ? means.front() : concat(means, 0);
  out.attended = attended.size() == 1 ? attended.front() : concat(attended, 0);
  out.structural = spatial_(out.regions, level0.side, out.attended, probe);
  out.fused = fusion_(out.region_feats, out.attended, out.structural);
  if (config_.use_query_pool) {
    out.pooled_queries = query_pool_(out.visual, probe);
    out.has_pooled_queries = true;
  }
  return out;
}

}  // namespace oraclesage
