#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "oraclesage/errors.hpp"
#include "oraclesage/hvsu.hpp"
#include "support.hpp"

using namespace oraclesage;

namespace {

GlyphImage random_image(std::size_t side, Rng& rng) {
  GlyphImage img = GlyphImage::blank(side);
  for (double& p : img.pixels) p = rng.uniform();
  return img;
}

void set_values(ParamRef p, const oracle::Mat& m) {
  auto v = const_cast<Parameter*>(p)->tensor.mutable_values();
  std::size_t i = 0;
  for (const auto& row : m)
    for (double x : row) v[i++] = x;
}

void set_values(ParamRef p, const oracle::Vec& x) { set_values(p, oracle::Mat{x}); }

void check_row_stochastic(const Tensor& w) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < w.cols(); ++c) total += w.at(r, c);
    CHECK(std::abs(total - 1.0) <= 1e-9);
  }
}

}  // namespace

TEST_SUITE("hvsu") {

TEST_CASE("encode shape and zero image") {
  ModelConfig cfg;
  ParameterStore store;
  Rng rng(1);
  PatchEncoderStub enc(store, cfg, rng);
  Rng fill(2);
  for (double& v : const_cast<Parameter*>(enc.positions())->tensor.mutable_values()) v = fill.uniform(-1, 1);

  const GlyphImage blank = GlyphImage::blank(64);
  const Tensor embedded = enc.embed(blank);
  CHECK(embedded.to_vector() == enc.positions()->tensor.to_vector());
  const Tensor out = enc.encode(blank);
  CHECK(out.shape() == Shape{64, 64});
  CHECK(out.to_vector() == enc.run_blocks(enc.positions()->tensor).to_vector());
  CHECK_THROWS_AS(enc.encode(GlyphImage::blank(32)), DataError);
}

TEST_CASE("perturbing one patch changes every output row after attention") {
  ModelConfig cfg;
  cfg.encoder_blocks = 1;
  ParameterStore store;
  Rng rng(3);
  PatchEncoderStub enc(store, cfg, rng);
  Rng pix(4);
  GlyphImage img = random_image(64, pix);
  const Tensor before = enc.encode(img);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) img.pixels[r * 64 + c] = 1.0 - img.pixels[r * 64 + c];
  const Tensor after = enc.encode(img);
  for (std::size_t row = 0; row < 64; ++row) {
    double diff = 0.0;
    for (std::size_t c = 0; c < 64; ++c) diff += std::abs(before.at(row, c) - after.at(row, c));
    CHECK(diff > 0.0);
  }
}

TEST_CASE("query pool with one key") {
  ModelConfig cfg = support::tiny_model();
  ParameterStore store;
  Rng rng(5);
  const QueryPool qp = QueryPool::create(store, "qp", cfg, rng);
  const Tensor v = support::random_tensor({1, cfg.width}, rng, -1, 1, false);
  AttentionProbe probe;
  const Tensor out = qp.pool(v, support::random_tensor({3, cfg.width}, rng, -1, 1, false), &probe);
  for (const auto& w : probe.weights)
    for (double x : w.values()) CHECK(x == 1.0);
  // Every query sees the same single value row.
  const Tensor expected = qp.ffn(qp.attention.out(matmul(v, qp.attention.w_v->tensor)));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < cfg.width; ++c) CHECK(std::abs(out.at(r, c) - expected[c]) < 1e-12);
}

TEST_CASE("single-head query attention matches brute force") {
  ModelConfig cfg = support::tiny_model();
  cfg.adapter_heads = 1;
  ParameterStore store;
  Rng rng(6);
  const QueryPool qp = QueryPool::create(store, "qp", cfg, rng);
  const Tensor q = support::random_tensor({2, cfg.width}, rng, -1, 1, false);
  const Tensor v = support::random_tensor({3, cfg.width}, rng, -1, 1, false);
  AttentionProbe probe;
  const Tensor h = qp.attention(q, v, &probe);
  const auto ref = oracle::attention(oracle::matmul(oracle::to_mat(q), oracle::to_mat(qp.attention.w_q->tensor)),
                                     oracle::matmul(oracle::to_mat(v), oracle::to_mat(qp.attention.w_k->tensor)),
                                     oracle::matmul(oracle::to_mat(v), oracle::to_mat(qp.attention.w_v->tensor)));
  CHECK(oracle::max_abs_diff(oracle::to_mat(probe.weights.front()), ref.weights) < 1e-12);
  oracle::Mat projected;
  for (const auto& row : ref.output)
    projected.push_back(oracle::affine(row, oracle::to_mat(qp.attention.out.weight->tensor),
                                       oracle::to_vec(qp.attention.out.bias->tensor)));
  CHECK(oracle::max_abs_diff(oracle::to_mat(h), projected) < 1e-12);
  check_row_stochastic(probe.weights.front());
}

TEST_CASE("adapter stack") {
  ModelConfig cfg = support::tiny_model();
  Rng rng(7);
  const Tensor x = support::random_tensor({16, cfg.width}, rng, -1, 1, false);

  SUBCASE("eval output rows are normalized") {
    ParameterStore store;
    AdapterStack stack(store, cfg, rng);
    CHECK(stack.layers().size() == cfg.adapter_layers);
    const Tensor y = stack(x, Mode::Eval, rng);
    CHECK(y.shape() == x.shape());
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double mean = 0.0, var = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) mean += y.at(r, c) / static_cast<double>(y.cols());
      for (std::size_t c = 0; c < y.cols(); ++c)
        var += (y.at(r, c) - mean) * (y.at(r, c) - mean) / static_cast<double>(y.cols());
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(var - 1.0) < 1e-3);
    }
  }
  SUBCASE("zero layers is the identity") {
    ModelConfig none = cfg;
    none.adapter_layers = 0;
    ParameterStore store;
    AdapterStack stack(store, none, rng);
    CHECK(stack(x, Mode::Train, rng).to_vector() == x.to_vector());
  }
  SUBCASE("gradient reaches the attention weights of every layer") {
    ParameterStore store;
    AdapterStack stack(store, cfg, rng);
    store.set_all_trainable(true);
    Tape tape;
    {
      TapeScope scope(tape);
      const Tensor w = support::random_tensor({16, cfg.width}, rng, -1, 1, false);
      tape.backward(sum(mul(stack(x, Mode::Eval, rng), w)));
    }
    for (const auto& layer : stack.layers()) {
      for (ParamRef p : {layer.attention.w_q, layer.attention.w_k, layer.attention.w_v}) {
        const auto g = tape.grad_of(p->tensor);
        CAPTURE(p->name);
        CHECK(std::any_of(g.values().begin(), g.values().end(), [](double v) { return v != 0.0; }));
      }
    }
  }
}

TEST_CASE("feature pyramid") {
  const Tensor constant = Tensor::filled({64, 5}, 2.5);
  const auto pyr = build_pyramid(constant, 3);
  REQUIRE(pyr.levels.size() == 3);
  CHECK(pyr.levels[0].side == 8);
  CHECK(pyr.levels[1].side == 4);
  CHECK(pyr.levels[2].side == 2);
  for (const auto& level : pyr.levels) {
    CHECK(level.features.cols() == 5);
    for (double v : level.features.values()) CHECK(std::abs(v - 2.5) < 1e-15);
  }

  Rng rng(8);
  const Tensor x = support::random_tensor({64, 3}, rng, -1, 1, false);
  const auto p = build_pyramid(x, 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) mean += x.at((2 * i + di) * 8 + 2 * j + dj, c) / 4.0;
        CHECK(std::abs(p.levels[1].features.at(i * 4 + j, c) - mean) < 1e-12);
      }
  CHECK_THROWS_AS(build_pyramid(Tensor::zeros({10, 3}), 2), DimensionError);
}

TEST_CASE("region proposal examples") {
  const auto uniform = build_pyramid(Tensor::filled({64, 4}, 1.0), 1);
  const auto whole = propose_regions(uniform, 4, 1.5);
  REQUIRE(whole.size() == 1);
  CHECK(whole.front() == Region{0, 0, 8, 8, 0.0, 0});

  // Two blobs on a faint background; the lower-right blob is brighter.
  std::vector<double> map(64, 0.1);
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t c = 1; c < 3; ++c) map[r * 8 + c] = 2.0;
  for (std::size_t r = 5; r < 8; ++r)
    for (std::size_t c = 4; c < 7; ++c) map[r * 8 + c] = 3.0;
  const auto two = regions_from_salience(map, 8, 4, 1.5);
  REQUIRE(two.size() == 2);
  CHECK(two[0] == Region{5, 4, 8, 7, 0.0, 0});
  CHECK(two[1] == Region{1, 1, 3, 3, 0.0, 0});
  CHECK(two[0].score > two[1].score);
  CHECK(regions_from_salience(map, 8, 1, 1.5).size() == 1);

  // The same fixture through feature rows whose norms are the map values.
  std::vector<double> rows;
  for (double m : map) rows.insert(rows.end(), {m * 0.6, m * 0.8});
  const auto from_features = propose_regions(build_pyramid(Tensor({64, 2}, rows), 1), 4, 1.5);
  REQUIRE(from_features.size() == 2);
  CHECK(from_features[0] == two[0]);
}

TEST_CASE("region proposal properties over random maps") {
  Rng rng(9);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t side = 1 + rng.below(10);
    const std::size_t max_regions = 1 + rng.below(5);
    const double threshold = rng.uniform(0.5, 2.5);
    std::vector<double> map(side * side);
    for (double& v : map) v = rng.bernoulli(0.3) ? rng.uniform(0.0, 5.0) : rng.uniform(0.0, 0.5);
    const auto regions = regions_from_salience(map, side, max_regions, threshold);
    CHECK(regions.size() >= 1);
    CHECK(regions.size() <= max_regions);
    for (std::size_t i = 0; i < regions.size(); ++i) {
      const auto& r = regions[i];
      CHECK(r.row0 < r.row1);
      CHECK(r.col0 < r.col1);
      CHECK(r.row1 <= side);
      CHECK(r.col1 <= side);
      CHECK(r.score >= 0.0);
      if (i > 0) CHECK(regions[i - 1].score >= r.score);
    }
  }
}

TEST_CASE("region attention") {
  ParameterStore store;
  Rng rng(10);
  const RegionAttention ra = RegionAttention::create(store, "ra", 4, rng);

  SUBCASE("single cell") {
    const Tensor cell = support::random_tensor({1, 4}, rng, -1, 1, false);
    AttentionProbe probe;
    const Tensor out = ra.attend(cell, &probe);
    CHECK(probe.weights.front().item() == 1.0);
    const Tensor v = matmul(cell, ra.w_v->tensor);
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(out[c] - v[c]) < 1e-15);
  }
  SUBCASE("two cells with hand-set projections") {
    set_values(ra.w_q, oracle::Mat{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
    set_values(ra.w_k, oracle::Mat{{2, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 0}});
    set_values(ra.w_v, oracle::Mat{{1, 1, 0, 0}, {0, 1, 1, 0}, {0, 0, 1, 1}, {1, 0, 0, 1}});
    const oracle::Mat cells{{1, 0, 0.5, 0}, {0, 1, 0, -1}};
    // By hand: Q = F, K rows (2, 0, 0.5, 0) and (0, 0, 0, 0), scale 1/2.
    const double s00 = (1 * 2 + 0.5 * 0.5) / 2, s01 = 0.0, s10 = 0.0, s11 = 0.0;
    const double w00 = std::exp(s00) / (std::exp(s00) + std::exp(s01));
    const double w10 = std::exp(s10) / (std::exp(s10) + std::exp(s11));
    const oracle::Vec v0{1, 1, 0.5, 0.5}, v1{-1, 1, 1, -1};
    oracle::Vec expected(4);
    for (std::size_t c = 0; c < 4; ++c)
      expected[c] = 0.5 * ((w00 * v0[c] + (1 - w00) * v1[c]) + (w10 * v0[c] + (1 - w10) * v1[c]));
    AttentionProbe probe;
    const Tensor out = mean_rows(ra.attend(oracle::to_tensor(cells), &probe));
    CHECK(oracle::max_abs_diff(out.to_vector(), expected) < 1e-12);
    CHECK(std::abs(probe.weights.front().at(0, 0) - w00) < 1e-12);
    check_row_stochastic(probe.weights.front());
  }
}

TEST_CASE("spatial relation encoder") {
  ModelConfig cfg = support::tiny_model();
  ParameterStore store;
  Rng rng(11);

  SUBCASE("one region: self-loop only") {
    const SpatialRelationEncoder enc = SpatialRelationEncoder::create(store, "sp", cfg, rng);
    const std::vector<Region> one{Region{1, 1, 3, 3, 1.0, 0}};
    const auto edges = spatial_adjacency(one, 4, cfg.spatial_radius);
    CHECK(edges.src == std::vector<std::size_t>{0});
    CHECK(edges.dst == std::vector<std::size_t>{0});
    const Tensor h = support::random_tensor({1, cfg.width}, rng, -1, 1, false);
    AttentionProbe probe;
    const Tensor out = enc(one, 4, h, &probe);
    for (double a : probe.weights.front().values()) CHECK(a == 1.0);
    const Tensor expected = enc.out(matmul(h, enc.w->tensor));
    CHECK(oracle::max_abs_diff(out.to_vector(), expected.to_vector()) < 1e-12);
  }
  SUBCASE("attention over neighbors is normalized per head") {
    const SpatialRelationEncoder enc = SpatialRelationEncoder::create(store, "sp", cfg, rng);
    const std::vector<Region> regions{Region{0, 0, 2, 2}, Region{0, 2, 2, 4}, Region{2, 0, 4, 4}, Region{3, 3, 4, 4}};
    const auto edges = spatial_adjacency(regions, 4, enc.radius);
    AttentionProbe probe;
    enc(regions, 4, support::random_tensor({4, cfg.width}, rng, -1, 1, false), &probe);
    const Tensor& alpha = probe.weights.front();
    for (std::size_t head = 0; head < cfg.spatial_heads; ++head)
      for (std::size_t node = 0; node < 4; ++node) {
        double total = 0.0;
        for (std::size_t e = 0; e < edges.dst.size(); ++e)
          if (edges.dst[e] == node) total += alpha.at(e, head);
        CHECK(std::abs(total - 1.0) <= 1e-9);
      }
  }
  SUBCASE("adjacency rule") {
    // Centroids (0.125, 0.125) and (0.875, 0.875) lie 0.75 * sqrt(2) apart.
    const std::vector<Region> corners{Region{0, 0, 1, 1}, Region{3, 3, 4, 4}};
    CHECK(spatial_adjacency(corners, 4, 0.76).src.size() == 4);
    CHECK(spatial_adjacency(corners, 4, 0.7).src.size() == 2);
  }
}

TEST_CASE("gated fusion") {
  ParameterStore store;
  Rng rng(12);
  const FusionGate gate = FusionGate::create(store, "fuse", 4, rng);
  const Tensor zeros = Tensor::zeros({2, 4});
  const auto z = gate(zeros, zeros, zeros);
  for (double g : z.gates.values()) CHECK(g == 0.5);
  for (double v : z.per_component.values()) CHECK(v == 0.0);

  const Tensor f = support::random_tensor({3, 4}, rng, -3, 3, false);
  const Tensor a = support::random_tensor({3, 4}, rng, -3, 3, false);
  const Tensor h = support::random_tensor({3, 4}, rng, -3, 3, false);
  const auto r = gate(f, a, h);
  for (double g : r.gates.values()) {
    CHECK(g > 0.0);
    CHECK(g < 1.0);
  }
  CHECK_THROWS_AS(gate(f, a, Tensor::zeros({3, 5})), DimensionError);

  SUBCASE("permutation equivariance") {
    const std::vector<std::size_t> perm{2, 0, 1};
    const auto p = gate(gather_rows(f, perm), gather_rows(a, perm), gather_rows(h, perm));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 4; ++c)
        CHECK(std::abs(p.per_component.at(i, c) - r.per_component.at(perm[i], c)) <= 1e-12);
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(p.character[c] - r.character[c]) <= 1e-12);
  }
  SUBCASE("saturated gate passes the projection through") {
    for (double& b : const_cast<Parameter*>(gate.gate.bias)->tensor.mutable_values()) b = 20.0;
    for (double& w : const_cast<Parameter*>(gate.gate.weight)->tensor.mutable_values()) w = 0.0;
    const auto sat = gate(f, a, h);
    const Tensor proj = gate.projection(concat({f, a, h}, 1));
    for (std::size_t i = 0; i < proj.numel(); ++i)
      CHECK(std::abs(sat.per_component[i] - proj[i]) <= 1e-8 * std::max(1.0, std::abs(proj[i])));
  }
}

TEST_CASE("every attention site is row-stochastic on a full forward") {
  ModelConfig cfg = support::tiny_model();
  cfg.use_query_pool = true;
  ParameterStore store;
  Rng rng(13);
  const Hvsu hvsu(store, cfg, rng);
  Rng pix(14);
  AttentionProbe probe;
  const auto out = hvsu.forward(random_image(16, pix), Mode::Train, rng, &probe);
  CHECK(out.has_pooled_queries);
  const std::size_t k = out.regions.size();
  CHECK(k >= 1);
  CHECK(k <= cfg.max_regions);
  CHECK(out.fused.per_component.rows() == k);
  // Recorded in forward order: encoder, adapter, one per region, spatial, query pool.
  const std::size_t spatial_at = cfg.encoder_blocks * cfg.encoder_heads + cfg.adapter_layers * cfg.adapter_heads + k;
  REQUIRE(probe.weights.size() == spatial_at + 1 + cfg.adapter_heads);
  for (std::size_t i = 0; i < probe.weights.size(); ++i)
    if (i != spatial_at) check_row_stochastic(probe.weights[i]);
  const auto edges = spatial_adjacency(out.regions, 4, cfg.spatial_radius);
  const Tensor& alpha = probe.weights[spatial_at];
  REQUIRE(alpha.rows() == edges.dst.size());
  for (std::size_t head = 0; head < cfg.spatial_heads; ++head)
    for (std::size_t node = 0; node < k; ++node) {
      double total = 0.0;
      for (std::size_t e = 0; e < edges.dst.size(); ++e)
        if (edges.dst[e] == node) total += alpha.at(e, head);
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
}

TEST_CASE("frozen encoder receives no gradient while the adapter does") {
  ModelConfig cfg = support::tiny_model();
  ParameterStore store;
  Rng rng(15);
  const Hvsu hvsu(store, cfg, rng);
  const std::vector<std::string> phase1{"hvsu.*"};
  store.set_trainable(phase1);
  Rng pix(16);
  Tape tape;
  {
    TapeScope scope(tape);
    const auto out = hvsu.forward(random_image(16, pix), Mode::Eval, rng);
    const Tensor w = support::random_tensor({1, cfg.width}, rng, -1, 1, false);
    tape.backward(add(sum(mul(out.fused.character, w)), sum(out.adapted)));
  }
  for (const auto& p : store.items()) {
    CAPTURE(p.name);
    const auto g = tape.grad_of(p.tensor);
    const bool any = std::any_of(g.values().begin(), g.values().end(), [](double v) { return v != 0.0; });
    if (p.name.rfind("encoder.", 0) == 0) CHECK_FALSE(any);
    if (p.name.rfind("hvsu.adapt.", 0) == 0 && p.name.find(".mha.w_") != std::string::npos) CHECK(any);
  }
}

}  // TEST_SUITE
