#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "oraclesage/config.hpp"
#include "oraclesage/data.hpp"
#include "oraclesage/rng.hpp"
#include "oraclesage/tensor.hpp"

namespace support {

using oraclesage::Rng;
using oraclesage::Shape;
using oraclesage::Tensor;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool grad = true) {
  std::vector<double> v(oraclesage::shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(grad);
  return t;
}

/// Central differences of `f` with respect to every value of `t`, perturbed in place.
inline std::vector<double> numeric_grad(Tensor& t, const std::function<double()>& f, double h = 1e-5) {
  auto values = t.mutable_values();
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double keep = values[i];
    values[i] = keep + h;
    const double up = f();
    values[i] = keep - h;
    const double down = f();
    values[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double worst_rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_error(a[i], b[i], floor));
  return worst;
}

/// 16x16 input, 4x4 patches, width 8: small enough for full-coordinate checks.
inline oraclesage::ModelConfig tiny_model() {
  oraclesage::ModelConfig m;
  m.input_size = 16;
  m.patch_size = 4;
  m.width = 8;
  m.encoder_blocks = 2;
  m.encoder_heads = 2;
  m.adapter_layers = 2;
  m.adapter_heads = 2;
  m.ffn_hidden = 12;
  m.pyramid_levels = 3;
  m.max_regions = 3;
  m.spatial_heads = 2;
  m.reasoning_steps = 3;
  m.reasoning_heads = 2;
  m.edge_dim = 4;
  m.queries = 2;
  return m;
}

/// 64x64 input with 16x16 patches and width 8, for fast training tests on synthetic glyphs.
inline oraclesage::Config small_config() {
  oraclesage::Config c;
  auto& m = c.model;
  m.patch_size = 16;
  m.width = 8;
  m.encoder_blocks = 3;
  m.encoder_heads = 2;
  m.adapter_layers = 1;
  m.adapter_heads = 2;
  m.ffn_hidden = 16;
  m.pyramid_levels = 2;
  m.max_regions = 3;
  m.spatial_heads = 2;
  m.reasoning_steps = 2;
  m.reasoning_heads = 2;
  m.edge_dim = 4;
  c.train.batch_size = 4;
  c.train.phases[0] = {2, 1e-3, {}};
  c.train.phases[1] = {2, 1e-3, {}};
  c.train.phases[2] = {1, 5e-6, {}};
  return c;
}

}  // namespace support
