#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "oraclesage/config.hpp"
#include "oraclesage/tensor.hpp"

namespace oraclesage {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor: |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
  std::uint64_t seed = 1;
  /// Relative corruption added to every analytic gradient. Only for testing the harness.
  double fault = 0.0;
};

struct GradcheckReport {
  std::string name;
  std::size_t checked = 0;
  double worst = 0.0;
  std::string worst_at;
  double tolerance = 0.0;

  bool passed() const noexcept { return checked > 0 && worst <= tolerance; }
};

double relative_error(double analytic, double numeric, double floor);

using TensorFn = std::function<Tensor(std::span<const Tensor>)>;

/// Checks every input coordinate of `f` against central differences. The
/// output is reduced with fixed random weights so every output element counts.
GradcheckReport check_function(const std::string& name, const TensorFn& f, std::vector<Tensor> inputs,
                               const GradcheckOptions& options = {});

/// Names accepted by check_op.
std::vector<std::string> op_names();
/// Runs the suite for one operation on random inputs in [-2, 2] that keep
/// 1e-3 away from activation kinks. Throws ConfigError for an unknown name.
GradcheckReport check_op(const std::string& name, const GradcheckOptions& options = {});

struct ModelCheckOptions {
  ModelConfig model;
  GradcheckOptions base{1e-5, 1e-3, 1e-6, 1, 0.0};
  /// Random coordinates checked per parameter in addition to one random
  /// direction; at least the parameter's size checks every coordinate.
  std::size_t coordinates = 2;
};

/// End-to-end check of the composite loss on a synthetic glyph (box-averaged
/// down when the model input is smaller than 64) with every
/// parameter trainable: one directional derivative plus sampled coordinates
/// per parameter tensor. Perturbations that flip a discrete decision
/// (regions, matches, edges) are redrawn.
std::vector<GradcheckReport> check_model(const ModelCheckOptions& options);

}  // namespace oraclesage
