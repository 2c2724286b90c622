#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "oraclesage/ops.hpp"
#include "oraclesage/rng.hpp"
#include "oraclesage/tensor.hpp"

namespace oraclesage {

/// A named, optionally trainable model weight.
struct Parameter {
  std::string name;
  Tensor tensor;

  bool trainable() const noexcept { return tensor.requires_grad(); }
};

using ParamRef = const Parameter*;

/// Owns every parameter of a model under unique dotted names.
///
/// Element addresses are stable, so modules keep ParamRef handles.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  ParamRef add(std::string name, Tensor init);
  /// Uniform in +-gain * sqrt(6 / (rows + cols)).
  ParamRef glorot(std::string name, std::size_t rows, std::size_t cols, Rng& rng, double gain = 1.0);
  ParamRef zeros(std::string name, Shape shape);
  ParamRef ones(std::string name, Shape shape);

  std::deque<Parameter>& items() noexcept { return params_; }
  const std::deque<Parameter>& items() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t total_values() const noexcept;

  const Parameter* find(std::string_view name) const;
  Parameter* find(std::string_view name);

  void set_all_trainable(bool on);
  /// Makes exactly the parameters matching any glob pattern trainable.
  /// Throws ConfigError naming a pattern that matches nothing.
  std::size_t set_trainable(std::span<const std::string> patterns);

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Glob match supporting '*' and '?'.
bool glob_match(std::string_view pattern, std::string_view text);

/// Optional collector for attention matrices produced during a forward pass.
struct AttentionProbe {
  std::vector<Tensor> weights;
};

struct Linear {
  ParamRef weight = nullptr;  // in x out
  ParamRef bias = nullptr;    // out, may be null

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng, bool with_bias = true, double gain = 1.0);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  ParamRef gain = nullptr;
  ParamRef bias = nullptr;
  double eps = 1e-5;

  static LayerNorm create(ParameterStore& store, const std::string& name, std::size_t width,
                          double eps = 1e-5);
  Tensor operator()(const Tensor& x) const;
};

/// Two-layer GELU feed-forward network.
struct FeedForward {
  Linear up;
  Linear down;

  /// `out_gain` scales the initial output projection (residual branches use < 1).
  static FeedForward create(ParameterStore& store, const std::string& name, std::size_t width,
                            std::size_t hidden, Rng& rng, double out_gain = 1.0);
  Tensor operator()(const Tensor& x) const;
};

/// Scaled dot-product multi-head attention with an output projection.
struct MultiHeadAttention {
  ParamRef w_q = nullptr;
  ParamRef w_k = nullptr;
  ParamRef w_v = nullptr;
  Linear out;
  std::size_t heads = 1;

  static MultiHeadAttention create(ParameterStore& store, const std::string& name,
                                   std::size_t width, std::size_t heads, Rng& rng, double out_gain = 1.0);
  /// queries: M x d, context: P x d -> M x d.
  Tensor operator()(const Tensor& queries, const Tensor& context,
                    AttentionProbe* probe = nullptr) const;
};

}  // namespace oraclesage
