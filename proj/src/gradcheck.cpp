#include "oraclesage/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>

#include "oraclesage/errors.hpp"
#include "oraclesage/gsrf.hpp"
#include "oraclesage/hvsu.hpp"
#include "oraclesage/model.hpp"
#include "oraclesage/nn.hpp"
#include "oraclesage/ops.hpp"
#include "oraclesage/train.hpp"

namespace oraclesage {

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

namespace {

double weighted(const Tensor& out, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += out[i] * w[i];
  return s;
}

double corrupt(double g, double fault) { return fault == 0.0 ? g : g * (1.0 + fault) + fault; }

void note(GradcheckReport& rep, double err, const std::string& where) {
  if (rep.checked++ == 0 || err > rep.worst) {
    rep.worst = err;
    rep.worst_at = where;
  }
}

}  // namespace

GradcheckReport check_function(const std::string& name, const TensorFn& f, std::vector<Tensor> inputs,
                               const GradcheckOptions& opt) {
  GradcheckReport rep;
  rep.name = name;
  rep.tolerance = opt.tolerance;
  for (auto& x : inputs) x.set_requires_grad(true);

  std::vector<double> weights;
  {
    NoGradScope no_grad;
    const Tensor out = f(inputs);
    Rng rng(Rng::mix(opt.seed, 0x77));
    weights.resize(out.numel());
    for (double& w : weights) w = rng.uniform(-1.0, 1.0);
  }

  Tape tape;
  {
    TapeScope scope(tape);
    const Tensor out = f(inputs);
    tape.backward(sum(mul(out, Tensor(out.shape(), weights))));
  }

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor g = tape.grad_of(inputs[k]);
    auto values = inputs[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      double up = 0.0, down = 0.0;
      {
        NoGradScope no_grad;
        values[i] = keep + opt.step;
        up = weighted(f(inputs), weights);
        values[i] = keep - opt.step;
        down = weighted(f(inputs), weights);
      }
      values[i] = keep;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double err = relative_error(corrupt(g[i], opt.fault), numeric, opt.floor);
      note(rep, err, "input " + std::to_string(k) + " [" + std::to_string(i) + "]");
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Per-operation suites

namespace {

struct Case {
  std::vector<Tensor> inputs;
  TensorFn fn;
  std::shared_ptr<ParameterStore> store;  // keeps module parameters alive
};

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    do {
      x = rng.uniform(-2.0, 2.0);
    } while (std::abs(x) < 1e-3);
  }
  return Tensor(std::move(shape), std::move(v));
}

std::vector<Tensor> with_params(std::vector<Tensor> inputs, const ParameterStore& store) {
  for (const auto& p : store.items()) inputs.push_back(p.tensor);
  return inputs;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.width = 4;
  c.ffn_hidden = 6;
  c.adapter_layers = 2;
  c.adapter_heads = 2;
  c.spatial_heads = 2;
  c.queries = 2;
  return c;
}

using Builder = std::function<Case(Rng&)>;

const std::map<std::string, Builder>& builders() {
  static const std::map<std::string, Builder> table = [] {
    std::map<std::string, Builder> t;
    auto unary = [&t](const std::string& name, Shape shape, std::function<Tensor(const Tensor&)> op) {
      t[name] = [shape, op](Rng& rng) {
        return Case{{random_tensor(shape, rng)}, [op](std::span<const Tensor> x) { return op(x[0]); }, nullptr};
      };
    };
    auto binary = [&t](const std::string& name, Shape a, Shape b,
                       std::function<Tensor(const Tensor&, const Tensor&)> op) {
      t[name] = [a, b, op](Rng& rng) {
        return Case{{random_tensor(a, rng), random_tensor(b, rng)},
                    [op](std::span<const Tensor> x) { return op(x[0], x[1]); }, nullptr};
      };
    };

    binary("matmul", {3, 4}, {4, 2}, [](const Tensor& a, const Tensor& b) { return matmul(a, b); });
    unary("transpose", {3, 4}, [](const Tensor& a) { return transpose(a); });
    binary("add", {3, 4}, {3, 4}, [](const Tensor& a, const Tensor& b) { return add(a, b); });
    binary("sub", {3, 4}, {3, 4}, [](const Tensor& a, const Tensor& b) { return sub(a, b); });
    binary("mul", {3, 4}, {3, 4}, [](const Tensor& a, const Tensor& b) { return mul(a, b); });
    unary("affine", {3, 4}, [](const Tensor& a) { return affine(a, 1.7, -0.3); });
    binary("add_row", {3, 4}, {4}, [](const Tensor& a, const Tensor& b) { return add_row(a, b); });
    binary("mul_col", {3, 4}, {3, 1}, [](const Tensor& a, const Tensor& b) { return mul_col(a, b); });
    unary("sum", {3, 4}, [](const Tensor& a) { return sum(a); });
    unary("mean", {3, 4}, [](const Tensor& a) { return mean(a); });
    unary("sum_rows", {3, 4}, [](const Tensor& a) { return sum_rows(a); });
    unary("mean_rows", {3, 4}, [](const Tensor& a) { return mean_rows(a); });
    unary("mean_cols", {3, 4}, [](const Tensor& a) { return mean_cols(a); });
    unary("l1_norm", {3, 4}, [](const Tensor& a) { return l1_norm(a); });
    unary("frobenius_sq", {3, 4}, [](const Tensor& a) { return frobenius_sq(a); });
    binary("concat_rows", {2, 3}, {1, 3}, [](const Tensor& a, const Tensor& b) { return concat({a, b}, 0); });
    binary("concat_cols", {3, 2}, {3, 1}, [](const Tensor& a, const Tensor& b) { return concat({a, b}, 1); });
    unary("slice_rows", {4, 3}, [](const Tensor& a) { return slice_rows(a, 1, 3); });
    unary("slice_cols", {3, 4}, [](const Tensor& a) { return slice_cols(a, 1, 3); });
    unary("gather_rows", {3, 2}, [](const Tensor& a) {
      const std::vector<std::size_t> idx{2, 0, 2};
      return gather_rows(a, idx);
    });
    unary("scatter_add_rows", {4, 2}, [](const Tensor& a) {
      const std::vector<std::size_t> idx{1, 0, 1, 2};
      return scatter_add_rows(a, idx, 3);
    });
    unary("softmax", {3, 4}, [](const Tensor& a) { return softmax(a, 1); });
    unary("softmax_axis0", {3, 4}, [](const Tensor& a) { return softmax(a, 0); });
    unary("log_softmax", {3, 4}, [](const Tensor& a) { return log_softmax(a, 1); });
    unary("segment_softmax", {5, 2}, [](const Tensor& a) {
      const std::vector<std::size_t> seg{0, 1, 0, 2, 1};
      return segment_softmax(a, seg, 3);
    });
    t["layernorm"] = [](Rng& rng) {
      return Case{{random_tensor({3, 5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)},
                  [](std::span<const Tensor> x) { return layernorm(x[0], x[1], x[2], 1e-5); }, nullptr};
    };
    unary("sigmoid", {3, 4}, [](const Tensor& a) { return sigmoid(a); });
    unary("tanh", {3, 4}, [](const Tensor& a) { return tanh(a); });
    unary("relu", {3, 4}, [](const Tensor& a) { return relu(a); });
    unary("leaky_relu", {3, 4}, [](const Tensor& a) { return leaky_relu(a, 0.2); });
    unary("gelu", {3, 4}, [](const Tensor& a) { return gelu(a); });
    unary("dropout", {3, 4}, [](const Tensor& a) {
      Rng mask(42);
      return dropout(a, 0.3, Mode::Train, mask);
    });
    unary("cross_entropy", {1, 5}, [](const Tensor& a) { return cross_entropy(a, 2); });
    unary("bce_with_logits", {4, 1}, [](const Tensor& a) {
      return bce_with_logits(a, Tensor({4, 1}, {1.0, 0.0, 1.0, 0.0}));
    });
    binary("head_dot", {3, 6}, {2, 3}, [](const Tensor& a, const Tensor& b) { return head_dot(a, b); });
    binary("graph_attention_logits", {3, 4}, {2, 4}, [](const Tensor& z, const Tensor& a) {
      const std::vector<std::size_t> src{0, 1, 2, 0};
      const std::vector<std::size_t> dst{1, 1, 2, 0};
      return graph_attention_logits(z, a, src, dst, 0.2);
    });
    binary("scale_heads", {4, 6}, {4, 2}, [](const Tensor& x, const Tensor& w) { return scale_heads(x, w); });

    // Modules, checked with respect to their inputs and every parameter.
    t["linear"] = [](Rng& rng) {
      auto store = std::make_shared<ParameterStore>();
      const Linear lin = Linear::create(*store, "lin", 4, 3, rng);
      store->find(lin.bias->name)->tensor.mutable_values()[0] = 0.5;
      return Case{with_params({random_tensor({2, 4}, rng)}, *store),
                  [lin](std::span<const Tensor> x) { return lin(x[0]); }, store};
    };
    t["attention"] = [](Rng& rng) {
      auto store = std::make_shared<ParameterStore>();
      const auto mha = MultiHeadAttention::create(*store, "mha", 4, 2, rng);
      return Case{with_params({random_tensor({2, 4}, rng), random_tensor({3, 4}, rng)}, *store),
                  [mha](std::span<const Tensor> x) { return mha(x[0], x[1]); }, store};
    };
    t["feed_forward"] = [](Rng& rng) {
      auto store = std::make_shared<ParameterStore>();
      const auto ffn = FeedForward::create(*store, "ffn", 4, 6, rng);
      return Case{with_params({random_tensor({3, 4}, rng)}, *store),
                  [ffn](std::span<const Tensor> x) { return ffn(x[0]); }, store};
    };
    t["adapter"] = [](Rng& rng) {
      auto store = std::make_shared<ParameterStore>();
      auto adapter = std::make_shared<AdapterStack>(*store, tiny_config(), rng);
      return Case{with_params({random_tensor({3, 4}, rng)}, *store),
                  [adapter](std::span<const Tensor> x) {
                    Rng unused(0);
                    return (*adapter)(x[0], Mode::Eval, unused);
                  },
                  store};
    };
    t["query_pool"] = [](Rng& rng) {
      auto store = std::make_shared<ParameterStore>();
      const auto pool = QueryPool::create(*store, "qp", tiny_config(), rng);
      return Case{with_params({random_tensor({3, 4}, rng)}, *store),
                  [pool](std::span<const Tensor> x) { return pool(x[0]); }, store};
    };
    t["region_attention"] = [](Rng& rng) {
      auto store = std::make_shared<ParameterStore>();
      const auto ra = RegionAttention::create(*store, "ra", 4, rng);
      return Case{with_params({random_tensor({3, 4}, rng)}, *store),
                  [ra](std::span<const Tensor> x) { return ra.attend(x[0]); }, store};
    };
    t["spatial_relations"] = [](Rng& rng) {
      auto store = std::make_shared<ParameterStore>();
      const auto sp = SpatialRelationEncoder::create(*store, "sp", tiny_config(), rng);
      return Case{with_params({random_tensor({3, 4}, rng)}, *store),
                  [sp](std::span<const Tensor> x) {
                    SpatialEdges e;
                    e.src = {0, 1, 2, 0, 1, 2, 1};
                    e.dst = {0, 1, 2, 1, 0, 0, 2};
                    return sp.over_edges(e, x[0]);
                  },
                  store};
    };
    t["fusion"] = [](Rng& rng) {
      auto store = std::make_shared<ParameterStore>();
      const auto fu = FusionGate::create(*store, "fu", 4, rng);
      return Case{with_params({random_tensor({2, 4}, rng), random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)},
                              *store),
                  [fu](std::span<const Tensor> x) {
                    const auto r = fu(x[0], x[1], x[2]);
                    return concat({r.per_component, r.character}, 0);
                  },
                  store};
    };
    t["gru"] = [](Rng& rng) {
      auto store = std::make_shared<ParameterStore>();
      const auto gru = GruCell::create(*store, "gru", 4, rng);
      return Case{with_params({random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)}, *store),
                  [gru](std::span<const Tensor> x) { return gru(x[0], x[1]); }, store};
    };
    t["message"] = [](Rng& rng) {
      auto store = std::make_shared<ParameterStore>();
      const MessageMlp mlp{Linear::create(*store, "msg.0", 2 * 4 + 3, 4, rng),
                           Linear::create(*store, "msg.1", 4, 4, rng)};
      return Case{with_params({random_tensor({2, 4}, rng), random_tensor({2, 4}, rng), random_tensor({2, 3}, rng)},
                              *store),
                  [mlp](std::span<const Tensor> x) { return mlp(x[0], x[1], x[2]); }, store};
    };
    return t;
  }();
  return table;
}

}  // namespace

std::vector<std::string> op_names() {
  std::vector<std::string> names;
  for (const auto& [name, _] : builders()) names.push_back(name);
  return names;
}

GradcheckReport check_op(const std::string& name, const GradcheckOptions& options) {
  const auto& table = builders();
  const auto it = table.find(name);
  if (it == table.end()) throw ConfigError("unknown gradcheck op '" + name + "'");
  Rng rng(Rng::mix(options.seed, std::hash<std::string>{}(name)));
  Case c = it->second(rng);
  return check_function(name, c.fn, std::move(c.inputs), options);
}

// ---------------------------------------------------------------------------
// End-to-end model check

namespace {

struct Discrete {
  std::vector<Region> regions;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> edges;

  bool operator==(const Discrete&) const = default;
};

struct Probe {
  const Model& model;
  const GlyphImage& image;
  const SampleTarget& target;
  LossWeights weights;
  double iou;

  double loss(Discrete* shape) const {
    NoGradScope no_grad;
    Rng rng(0);
    const auto out = model.forward(image, Mode::Eval, rng);
    if (shape) *shape = discrete(out);
    return compute_losses(model, out, target, weights, iou).total.item();
  }

  Discrete discrete(const Model::Output& out) const {
    Discrete d;
    d.regions = out.hvsu.regions;
    HeteroGraph g = out.initial;
    const auto& gsrf = model.gsrf();
    auto record = [&d](const HeteroGraph& graph) {
      for (const auto& set : graph.edges) {
        std::vector<std::pair<std::size_t, std::size_t>> e;
        for (std::size_t i = 0; i < set.size(); ++i) e.emplace_back(set.src[i], set.dst[i]);
        d.edges.push_back(std::move(e));
      }
    };
    for (std::size_t t = 0; t < gsrf.config().steps; ++t) {
      g = gsrf.step(g);
      if (gsrf.config().dynamic_edges) g = gsrf.dynamic_update(g);
      record(g);
    }
    return d;
  }
};

// Box average down to `side` (which must divide the source side).
GlyphImage downsample(const GlyphImage& image, std::size_t side) {
  if (side == image.width) return image;
  if (side == 0 || image.width % side != 0) {
    throw ConfigError("model input size " + std::to_string(side) + " does not divide the glyph side " +
                      std::to_string(image.width));
  }
  const std::size_t f = image.width / side;
  GlyphImage out = GlyphImage::blank(side);
  for (std::size_t r = 0; r < image.height; ++r)
    for (std::size_t c = 0; c < image.width; ++c)
      out.pixels[(r / f) * side + c / f] += image.at(r, c) / static_cast<double>(f * f);
  return out;
}

}  // namespace

std::vector<GradcheckReport> check_model(const ModelCheckOptions& options) {
  const auto chars = synth_generate(SynthSpec{}, 2, 1);
  std::vector<AnnotationRecord> records;
  for (const auto& c : chars) records.push_back(c.record);
  const Vocabulary vocab = Vocabulary::build(records);
  const GlyphImage image = downsample(chars.front().glyphs.front().image, options.model.input_size);
  const SampleTarget target = make_target(chars.front().record, vocab);

  Model model(options.model, ModelVocab::of(vocab), options.base.seed);
  model.params().set_all_trainable(true);
  const Probe probe{model, image, target, LossWeights{}, 0.3};
  const GradcheckOptions& opt = options.base;

  Tape tape;
  Discrete base_shape;
  {
    TapeScope scope(tape);
    Rng rng(0);
    const auto out = model.forward(image, Mode::Eval, rng);
    base_shape = probe.discrete(out);
    tape.backward(compute_losses(model, out, target, probe.weights, probe.iou).total);
  }

  Rng rng(Rng::mix(opt.seed, 0xf11));
  std::vector<GradcheckReport> reports;
  for (auto& p : model.params().items()) {
    GradcheckReport rep;
    rep.name = p.name;
    rep.tolerance = opt.tolerance;
    const Tensor g = tape.grad_of(p.tensor);
    auto values = p.tensor.mutable_values();
    const std::vector<double> keep(values.begin(), values.end());

    // Central difference along `dir`; false when a discrete decision flipped.
    auto numeric_along = [&](const std::vector<double>& dir, double& out) {
      Discrete s_up, s_down;
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = keep[i] + opt.step * dir[i];
      const double up = probe.loss(&s_up);
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = keep[i] - opt.step * dir[i];
      const double down = probe.loss(&s_down);
      std::copy(keep.begin(), keep.end(), values.begin());
      out = (up - down) / (2.0 * opt.step);
      return s_up == base_shape && s_down == base_shape;
    };

    for (int attempt = 0; attempt < 4; ++attempt) {
      std::vector<double> dir(values.size());
      for (double& x : dir) x = rng.bernoulli(0.5) ? 1.0 : -1.0;
      double numeric = 0.0;
      if (!numeric_along(dir, numeric)) continue;
      double analytic = 0.0;
      for (std::size_t i = 0; i < dir.size(); ++i) analytic += corrupt(g[i], opt.fault) * dir[i];
      note(rep, relative_error(analytic, numeric, opt.floor), "random direction");
      break;
    }
    const bool every = options.coordinates >= values.size();
    const std::size_t coords = every ? values.size() : options.coordinates;
    for (std::size_t c = 0; c < coords; ++c) {
      const std::size_t i = every ? c : static_cast<std::size_t>(rng.below(values.size()));
      std::vector<double> dir(values.size(), 0.0);
      dir[i] = 1.0;
      double numeric = 0.0;
      if (!numeric_along(dir, numeric)) continue;
      note(rep, relative_error(corrupt(g[i], opt.fault), numeric, opt.floor), "[" + std::to_string(i) + "]");
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace oraclesage
