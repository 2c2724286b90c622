#include "oraclesage/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "oraclesage/errors.hpp"

namespace oraclesage {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': not a finite number: '" + v + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': not a non-negative integer: '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config key '" + key + "': not a boolean: '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += items[i];
  }
  return out;
}

struct Key {
  std::string name;
  std::string doc;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

Key size_key(std::string name, std::string doc, std::size_t ModelConfig::*field) {
  return {name, std::move(doc),
          [field, name](Config& c, const std::string& v) {
            c.model.*field = static_cast<std::size_t>(parse_uint(name, v));
          },
          [field](const Config& c) { return std::to_string(c.model.*field); }};
}

Key real_key(std::string name, std::string doc, double ModelConfig::*field) {
  return {name, std::move(doc),
          [field, name](Config& c, const std::string& v) { c.model.*field = parse_double(name, v); },
          [field](const Config& c) { return format_double(c.model.*field); }};
}

Key bool_key(std::string name, std::string doc, bool ModelConfig::*field) {
  return {name, std::move(doc),
          [field, name](Config& c, const std::string& v) { c.model.*field = parse_bool(name, v); },
          [field](const Config& c) { return std::string(c.model.*field ? "true" : "false"); }};
}

Key weight_key(std::string name, std::string doc, double LossWeights::*field) {
  return {name, std::move(doc),
          [field, name](Config& c, const std::string& v) {
            c.train.weights.*field = parse_double(name, v);
          },
          [field](const Config& c) { return format_double(c.train.weights.*field); }};
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back(size_key("input_size", "input image side in pixels", &ModelConfig::input_size));
    k.push_back(size_key("patch_size", "patch side in pixels", &ModelConfig::patch_size));
    k.push_back(size_key("d", "feature width shared by all modules", &ModelConfig::width));
    k.push_back(size_key("encoder_blocks", "transformer blocks in the patch encoder",
                         &ModelConfig::encoder_blocks));
    k.push_back(size_key("encoder_heads", "attention heads in the patch encoder",
                         &ModelConfig::encoder_heads));
    k.push_back(size_key("adapter_layers", "adaptation layers atop the encoder",
                         &ModelConfig::adapter_layers));
    k.push_back(size_key("adapter_heads", "attention heads per adaptation layer",
                         &ModelConfig::adapter_heads));
    k.push_back(size_key("ffn_hidden", "hidden width of feed-forward networks",
                         &ModelConfig::ffn_hidden));
    k.push_back(real_key("dropout", "dropout rate in adaptation layers", &ModelConfig::dropout));
    k.push_back(bool_key("use_query_pool", "append learnable-query pooled features as visual nodes",
                         &ModelConfig::use_query_pool));
    k.push_back(size_key("M", "number of learnable queries", &ModelConfig::queries));
    k.push_back(size_key("pyramid_levels", "feature pyramid depth (each level halves the grid)",
                         &ModelConfig::pyramid_levels));
    k.push_back(size_key("max_regions", "maximum component regions per image",
                         &ModelConfig::max_regions));
    k.push_back(real_key("region_threshold", "salience threshold as a multiple of the mean",
                         &ModelConfig::region_threshold));
    k.push_back(real_key("spatial_radius", "centroid distance for spatial edges, fraction of diagonal",
                         &ModelConfig::spatial_radius));
    k.push_back(size_key("spatial_heads", "graph attention heads in the spatial relation encoder",
                         &ModelConfig::spatial_heads));
    k.push_back(size_key("T", "reasoning steps", &ModelConfig::reasoning_steps));
    k.push_back(size_key("heads", "attention heads in graph reasoning", &ModelConfig::reasoning_heads));
    k.push_back(size_key("edge_dim", "edge feature width", &ModelConfig::edge_dim));
    k.push_back(real_key("tau_add", "similarity above which component-semantic edges are added",
                         &ModelConfig::tau_add));
    k.push_back(real_key("tau_prune", "similarity below which component-semantic edges are pruned",
                         &ModelConfig::tau_prune));
    k.push_back(bool_key("dynamic_edges", "update component-semantic edges between steps",
                         &ModelConfig::dynamic_edges));
    k.push_back(real_key("leaky_slope", "negative slope of LeakyReLU in attention logits",
                         &ModelConfig::leaky_slope));
    k.push_back(real_key("ln_eps", "layer normalization epsilon", &ModelConfig::ln_eps));

    k.push_back(weight_key("lambda1", "weight of the character loss", &LossWeights::char_weight));
    k.push_back(weight_key("lambda2", "weight of the component loss", &LossWeights::comp_weight));
    k.push_back(weight_key("lambda3", "weight of the structural loss", &LossWeights::struct_weight));
    k.push_back(weight_key("lambda4", "weight of the semantic loss", &LossWeights::sem_weight));
    k.push_back(weight_key("beta", "weight of the adjacency term in the structural loss",
                           &LossWeights::beta));
    k.push_back({"batch", "samples per optimizer step",
                 [](Config& c, const std::string& v) {
                   c.train.batch_size = static_cast<std::size_t>(parse_uint("batch", v));
                 },
                 [](const Config& c) { return std::to_string(c.train.batch_size); }});
    for (int p = 0; p < 3; ++p) {
      const std::string n = "phase" + std::to_string(p + 1);
      k.push_back({n + "_epochs", "epochs in phase " + std::to_string(p + 1),
                   [p, n](Config& c, const std::string& v) {
                     c.train.phases[p].epochs = static_cast<std::size_t>(parse_uint(n + "_epochs", v));
                   },
                   [p](const Config& c) { return std::to_string(c.train.phases[p].epochs); }});
      k.push_back({n + "_lr", "learning rate in phase " + std::to_string(p + 1),
                   [p, n](Config& c, const std::string& v) {
                     c.train.phases[p].learning_rate = parse_double(n + "_lr", v);
                   },
                   [p](const Config& c) { return format_double(c.train.phases[p].learning_rate); }});
      k.push_back({n + "_trainable",
                   "comma-separated parameter globs trainable in phase " + std::to_string(p + 1),
                   [p](Config& c, const std::string& v) { c.train.phases[p].trainable = split_list(v); },
                   [p](const Config& c) { return join_list(phase_patterns(c, p + 1)); }});
    }
    k.push_back({"weight_decay", "decoupled weight decay",
                 [](Config& c, const std::string& v) {
                   c.train.weight_decay = parse_double("weight_decay", v);
                 },
                 [](const Config& c) { return format_double(c.train.weight_decay); }});
    k.push_back({"iou_threshold", "minimum IoU to match a region to a labeled component",
                 [](Config& c, const std::string& v) {
                   c.train.iou_threshold = parse_double("iou_threshold", v);
                 },
                 [](const Config& c) { return format_double(c.train.iou_threshold); }});
    k.push_back({"augment_shift", "largest random pixel shift applied to training images (0 disables)",
                 [](Config& c, const std::string& v) {
                   c.train.augment_shift = static_cast<std::size_t>(parse_uint("augment_shift", v));
                 },
                 [](const Config& c) { return std::to_string(c.train.augment_shift); }});
    k.push_back({"split_mode", "instance or character",
                 [](Config& c, const std::string& v) { c.train.split_mode = v; },
                 [](const Config& c) { return c.train.split_mode; }});
    k.push_back({"seed", "seed for initialization, shuffling, dropout, and splitting",
                 [](Config& c, const std::string& v) { c.train.seed = parse_uint("seed", v); },
                 [](const Config& c) { return std::to_string(c.train.seed); }});
    k.push_back({"dataset", "dataset directory (annotations.json inside)",
                 [](Config& c, const std::string& v) { c.dataset = v; },
                 [](const Config& c) { return c.dataset; }});
    k.push_back({"output_dir", "directory for metrics, summary, and snapshot",
                 [](Config& c, const std::string& v) { c.output_dir = v; },
                 [](const Config& c) { return c.output_dir; }});
    return k;
  }();
  return table;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

void ModelConfig::validate() const {
  require(input_size > 0 && patch_size > 0 && input_size % patch_size == 0,
          "input_size must be a positive multiple of patch_size");
  require(width > 0, "d must be positive");
  require(encoder_heads > 0 && width % encoder_heads == 0, "d must be divisible by encoder_heads");
  require(adapter_heads > 0 && width % adapter_heads == 0, "d must be divisible by adapter_heads");
  require(spatial_heads > 0 && width % spatial_heads == 0, "d must be divisible by spatial_heads");
  require(reasoning_heads > 0 && width % reasoning_heads == 0, "d must be divisible by heads");
  require(ffn_hidden > 0, "ffn_hidden must be positive");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  require(!use_query_pool || queries > 0, "M must be positive when use_query_pool is on");
  require(pyramid_levels >= 1, "pyramid_levels must be at least 1");
  require((grid_side() >> (pyramid_levels - 1)) >= 1,
          "pyramid_levels too deep for the patch grid");
  require(max_regions >= 1, "max_regions must be at least 1");
  require(region_threshold > 0.0, "region_threshold must be positive");
  require(spatial_radius >= 0.0, "spatial_radius must be non-negative");
  require(reasoning_steps >= 1, "T must be at least 1");
  require(edge_dim >= 1, "edge_dim must be at least 1");
  require(0.0 <= tau_prune && tau_prune < tau_add && tau_add <= 1.0,
          "thresholds must satisfy 0 <= tau_prune < tau_add <= 1");
  require(leaky_slope >= 0.0, "leaky_slope must be non-negative");
  require(ln_eps > 0.0, "ln_eps must be positive");
}

void LossWeights::validate() const {
  for (double w : {char_weight, comp_weight, struct_weight, sem_weight, beta}) {
    require(std::isfinite(w) && w >= 0.0, "loss weights must be finite and non-negative");
  }
}

void TrainConfig::validate() const {
  weights.validate();
  require(batch_size >= 1, "batch must be at least 1");
  for (const auto& p : phases) {
    require(p.learning_rate >= 0.0, "learning rates must be non-negative");
  }
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(iou_threshold >= 0.0 && iou_threshold <= 1.0, "iou_threshold must lie in [0, 1]");
  require(split_mode == "instance" || split_mode == "character",
          "split_mode must be 'instance' or 'character'");
}

void Config::validate() const {
  model.validate();
  train.validate();
  require(train.augment_shift < model.input_size, "augment_shift must be smaller than input_size");
}

Config parse_config(std::string_view text) {
  Config cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(std::string_view(stripped).substr(0, eq));
    const auto value = trim(std::string_view(stripped).substr(eq + 1));
    const Key* match = nullptr;
    for (const auto& k : keys()) {
      if (k.name == key) match = &k;
    }
    if (!match) throw ConfigError("unknown config key '" + key + "'");
    match->set(cfg, value);
  }
  cfg.validate();
  return cfg;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_text(const Config& config) {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(config) + "\n";
  return out;
}

std::vector<std::pair<std::string, std::string>> config_keys() {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : keys()) out.emplace_back(k.name, k.doc);
  return out;
}

std::vector<std::string> default_phase_patterns(int phase, std::size_t encoder_blocks) {
  std::vector<std::string> p{"hvsu.*", "gsrf.*"};
  if (phase == 2) {
    const std::size_t first = encoder_blocks >= 2 ? encoder_blocks - 2 : 0;
    for (std::size_t b = first; b < encoder_blocks; ++b) {
      p.push_back("encoder.blocks." + std::to_string(b) + ".*");
    }
  }
  if (phase == 3) p = {"*"};
  return p;
}

std::vector<std::string> phase_patterns(const Config& config, int phase) {
  const auto& explicit_patterns = config.train.phases.at(static_cast<std::size_t>(phase - 1)).trainable;
  return explicit_patterns.empty() ? default_phase_patterns(phase, config.model.encoder_blocks)
                                   : explicit_patterns;
}

}  // namespace oraclesage
