#include "oraclesage/nn.hpp"

#include <cmath>

#include "oraclesage/errors.hpp"

namespace oraclesage {

ParamRef ParameterStore::add(std::string name, Tensor init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  init.set_requires_grad(true);
  index_.emplace(name, params_.size());
  params_.push_back(Parameter{std::move(name), std::move(init)});
  return &params_.back();
}

ParamRef ParameterStore::glorot(std::string name, std::size_t rows, std::size_t cols, Rng& rng, double gain) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.uniform(-limit, limit);
  return add(std::move(name), Tensor({rows, cols}, std::move(values)));
}

ParamRef ParameterStore::zeros(std::string name, Shape shape) {
  return add(std::move(name), Tensor::zeros(std::move(shape)));
}

ParamRef ParameterStore::ones(std::string name, Shape shape) {
  return add(std::move(name), Tensor::filled(std::move(shape), 1.0));
}

std::size_t ParameterStore::total_values() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter* ParameterStore::find(std::string_view name) {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &params_[it->second];
}

void ParameterStore::set_all_trainable(bool on) {
  for (auto& p : params_) p.tensor.set_requires_grad(on);
}

std::size_t ParameterStore::set_trainable(std::span<const std::string> patterns) {
  for (const auto& pattern : patterns) {
    bool hit = false;
    for (const auto& p : params_) {
      if (glob_match(pattern, p.name)) {
        hit = true;
        break;
      }
    }
    if (!hit) throw ConfigError("trainable pattern '" + pattern + "' matches no parameter");
  }
  std::size_t count = 0;
  for (auto& p : params_) {
    bool on = false;
    for (const auto& pattern : patterns) on = on || glob_match(pattern, p.name);
    p.tensor.set_requires_grad(on);
    count += on ? 1 : 0;
  }
  return count;
}

bool glob_match(std::string_view pattern, std::string_view text) {
  std::size_t p = 0, t = 0, star = std::string_view::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
      ++p;
      ++t;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = t;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

// ---------------------------------------------------------------------------

Linear Linear::create(ParameterStore& store, const std::string& name, std::size_t in,
                      std::size_t out, Rng& rng, bool with_bias, double gain) {
  Linear l;
  l.weight = store.glorot(name + ".w", in, out, rng, gain);
  if (with_bias) l.bias = store.zeros(name + ".b", {out});
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight->tensor);
  return bias ? add_row(y, bias->tensor) : y;
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& name, std::size_t width,
                            double eps) {
  return LayerNorm{store.ones(name + ".gain", {width}), store.zeros(name + ".bias", {width}), eps};
}

Tensor LayerNorm::operator()(const Tensor& x) const {
  return layernorm(x, gain->tensor, bias->tensor, eps);
}

FeedForward FeedForward::create(ParameterStore& store, const std::string& name, std::size_t width,
                                std::size_t hidden, Rng& rng, double out_gain) {
  return FeedForward{Linear::create(store, name + ".up", width, hidden, rng),
                     Linear::create(store, name + ".down", hidden, width, rng, true, out_gain)};
}

Tensor FeedForward::operator()(const Tensor& x) const { return down(gelu(up(x))); }

MultiHeadAttention MultiHeadAttention::create(ParameterStore& store, const std::string& name,
                                              std::size_t width, std::size_t heads, Rng& rng,
                                              double out_gain) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError(name + ": width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  MultiHeadAttention m;
  m.w_q = store.glorot(name + ".w_q", width, width, rng);
  m.w_k = store.glorot(name + ".w_k", width, width, rng);
  m.w_v = store.glorot(name + ".w_v", width, width, rng);
  m.out = Linear::create(store, name + ".out", width, width, rng, true, out_gain);
  m.heads = heads;
  return m;
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& context,
                                      AttentionProbe* probe) const {
  const std::size_t width = w_q->tensor.shape()[0];
  if (queries.cols() != width || context.cols() != width) {
    throw DimensionError("attention width mismatch: queries " + shape_string(queries.shape()) +
                         ", context " + shape_string(context.shape()) + ", model width " +
                         std::to_string(width));
  }
  const Tensor q = matmul(queries, w_q->tensor);
  const Tensor k = matmul(context, w_k->tensor);
  const Tensor v = matmul(context, w_v->tensor);
  const std::size_t dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    const Tensor kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    const Tensor vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    const Tensor weights = softmax(affine(matmul(qh, transpose(kh)), scale), 1);
    if (probe) probe->weights.push_back(weights);
    outs.push_back(matmul(weights, vh));
  }
  return out(heads == 1 ? outs.front() : concat(outs, 1));
}

}  // namespace oraclesage
