#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace oraclesage {

/// Architecture hyperparameters. Defaults give 64x64 inputs, 8x8 patches,
/// width 64, three adaptation layers, and three 8-head reasoning steps.
struct ModelConfig {
  std::size_t input_size = 64;
  std::size_t patch_size = 8;
  std::size_t width = 64;
  std::size_t encoder_blocks = 4;
  std::size_t encoder_heads = 8;
  std::size_t adapter_layers = 3;
  std::size_t adapter_heads = 8;
  std::size_t ffn_hidden = 128;
  double dropout = 0.1;
  bool use_query_pool = false;
  std::size_t queries = 8;
  std::size_t pyramid_levels = 3;
  std::size_t max_regions = 4;
  double region_threshold = 1.2;
  double spatial_radius = 0.75;
  std::size_t spatial_heads = 8;
  std::size_t reasoning_steps = 3;
  std::size_t reasoning_heads = 8;
  std::size_t edge_dim = 8;
  double tau_add = 0.5;
  double tau_prune = 0.3;
  bool dynamic_edges = true;
  double leaky_slope = 0.2;
  double ln_eps = 1e-5;

  std::size_t grid_side() const noexcept { return input_size / patch_size; }
  std::size_t num_patches() const noexcept { return grid_side() * grid_side(); }
  void validate() const;
};

/// Weights of the four loss terms and of the adjacency term inside the structural loss.
struct LossWeights {
  double char_weight = 1.0;
  double comp_weight = 0.5;
  double struct_weight = 0.25;
  double sem_weight = 0.5;
  double beta = 0.1;

  void validate() const;
};

struct PhaseSpec {
  std::size_t epochs = 0;
  double learning_rate = 0.0;
  /// Glob patterns over parameter names; empty means the built-in default.
  std::vector<std::string> trainable;
};

struct TrainConfig {
  LossWeights weights;
  std::size_t batch_size = 8;
  std::array<PhaseSpec, 3> phases{PhaseSpec{60, 1e-3, {}}, PhaseSpec{30, 1e-4, {}},
                                   PhaseSpec{10, 5e-6, {}}};
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double iou_threshold = 0.3;
  /// Training images are translated by a uniform integer offset in
  /// [-augment_shift, augment_shift] per axis, zero filled.
  std::size_t augment_shift = 2;
  std::string split_mode = "instance";
  std::uint64_t seed = 7;

  void validate() const;
};

struct Config {
  ModelConfig model;
  TrainConfig train;
  std::string dataset;
  std::string output_dir;

  void validate() const;
};

/// Parses flat `key = value` text. '#' starts a comment. Unknown keys and
/// malformed values throw ConfigError naming the key.
Config parse_config(std::string_view text);
Config load_config(const std::string& path);
/// Every key with its effective value, one per line, in documented order.
std::string config_to_text(const Config& config);
/// Documented keys in order, with a one-line description each.
std::vector<std::pair<std::string, std::string>> config_keys();

/// Default trainable patterns for a phase (1-based) given the encoder depth.
std::vector<std::string> default_phase_patterns(int phase, std::size_t encoder_blocks);
/// Patterns actually applied for a phase.
std::vector<std::string> phase_patterns(const Config& config, int phase);

}  // namespace oraclesage
