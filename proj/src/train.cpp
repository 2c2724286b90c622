#include "oraclesage/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <thread>

#include "oraclesage/errors.hpp"

namespace oraclesage {

// ---------------------------------------------------------------------------
// Losses

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = ix * iy;
  const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<std::pair<std::size_t, std::size_t>> match_components(std::span<const std::array<double, 4>> predicted,
                                                                  std::span<const ComponentTarget> truth,
                                                                  double threshold) {
  struct Candidate {
    double iou;
    std::size_t p;
    std::size_t t;
  };
  std::vector<Candidate> candidates;
  for (std::size_t p = 0; p < predicted.size(); ++p)
    for (std::size_t t = 0; t < truth.size(); ++t) {
      if (!truth[t].bbox) continue;
      const double iou = box_iou(predicted[p], *truth[t].bbox);
      if (iou >= threshold) candidates.push_back({iou, p, t});
    }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.iou > b.iou; });
  std::vector<bool> used_p(predicted.size()), used_t(truth.size());
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& c : candidates) {
    if (used_p[c.p] || used_t[c.t]) continue;
    used_p[c.p] = used_t[c.t] = true;
    out.emplace_back(c.p, c.t);
  }
  return out;
}

Tensor loss_char(const Tensor& char_logits, std::size_t label) { return cross_entropy(char_logits, label); }

Tensor loss_comp(const Tensor& comp_logits, std::span<const std::pair<std::size_t, std::size_t>> matches,
                 std::span<const ComponentTarget> truth, std::size_t num_categories) {
  Tensor total = Tensor::scalar(static_cast<double>(truth.size() - matches.size()) *
                                std::log(static_cast<double>(num_categories)));
  for (const auto& [p, t] : matches) {
    const std::array<std::size_t, 1> row{p};
    total = add(total, cross_entropy(gather_rows(comp_logits, row), truth[t].category));
  }
  return total;
}

Tensor loss_struct(const Tensor& h_next, const Tensor& h_recomputed, const Tensor* a_true, const Tensor& a_pred,
                   double beta) {
  Tensor consistency = frobenius_sq(sub(stop_gradient(h_next), h_recomputed));
  if (!a_true || beta == 0.0) return consistency;
  if (a_true->shape() != a_pred.shape()) {
    throw DimensionError("adjacency shapes differ: " + shape_string(a_true->shape()) + " vs " +
                         shape_string(a_pred.shape()));
  }
  const std::size_t k = a_pred.rows();
  std::vector<double> off(k * k, 1.0);
  for (std::size_t i = 0; i < k; ++i) off[i * k + i] = 0.0;
  const Tensor mask({k, k}, std::move(off));
  return add(consistency, affine(l1_norm(mul(sub(*a_true, a_pred), mask)), beta));
}

Tensor loss_sem(const Tensor& sem_logits, std::span<const double> active) {
  if (active.size() != sem_logits.numel()) {
    throw DimensionError("semantic targets have " + std::to_string(active.size()) + " entries for " +
                         std::to_string(sem_logits.numel()) + " logits");
  }
  return bce_with_logits(sem_logits, Tensor(sem_logits.shape(), std::vector<double>(active.begin(), active.end())));
}

Tensor loss_total(const std::array<Tensor, 4>& parts, const LossWeights& w) {
  static constexpr std::array<const char*, 4> names{"L_char", "L_comp", "L_struct", "L_sem"};
  const std::array<double, 4> lambda{w.char_weight, w.comp_weight, w.struct_weight, w.sem_weight};
  for (std::size_t k = 0; k < 4; ++k) {
    if (parts[k].numel() != 1) throw ContractError(std::string(names[k]) + " is not a scalar");
    if (!std::isfinite(parts[k].item())) throw NumericError(std::string("non-finite loss term ") + names[k]);
  }
  Tensor total = affine(parts[0], lambda[0]);
  for (std::size_t k = 1; k < 4; ++k) total = add(total, affine(parts[k], lambda[k]));
  return total;
}

LossParts compute_losses(const Model& model, const Model::Output& out, const SampleTarget& target,
                         const LossWeights& weights, double iou_threshold) {
  LossParts lp;
  const auto& regions = out.hvsu.regions;
  const std::size_t side = out.hvsu.pyramid.levels.front().side;
  std::vector<std::array<double, 4>> boxes;
  for (const auto& r : regions) boxes.push_back(r.normalized_box(side));
  const auto matches = match_components(boxes, target.components, iou_threshold);
  lp.matched = matches.size();

  lp.parts[0] = loss_char(out.readout.char_logits, target.char_label);
  lp.parts[1] = loss_comp(out.readout.comp_logits, matches, target.components, model.vocab().categories);

  const Tensor recomputed = model.gsrf().step(out.before_last).features;
  if (target.adjacency) {
    // Adjacency compared over matched pairs only.
    std::vector<std::size_t> pred_idx;
    std::vector<double> truth;
    const std::size_t k_true = target.components.size();
    for (const auto& [p, t] : matches) pred_idx.push_back(p);
    for (const auto& [p1, t1] : matches)
      for (const auto& [p2, t2] : matches) truth.push_back((*target.adjacency)[t1 * k_true + t2]);
    if (!pred_idx.empty()) {
      const std::size_t m = pred_idx.size();
      const Tensor a_true({m, m}, std::move(truth));
      const Tensor a_pred = transpose(gather_rows(transpose(gather_rows(out.readout.adjacency, pred_idx)), pred_idx));
      lp.parts[2] = loss_struct(out.graph.features, recomputed, &a_true, a_pred, weights.beta);
    } else {
      lp.parts[2] = loss_struct(out.graph.features, recomputed, nullptr, out.readout.adjacency, weights.beta);
    }
  } else {
    lp.adjacency_skipped = true;
    lp.parts[2] = loss_struct(out.graph.features, recomputed, nullptr, out.readout.adjacency, weights.beta);
  }
  lp.parts[3] = loss_sem(out.readout.sem_logits, target.semantic_active);
  lp.total = loss_total(lp.parts, weights);
  return lp;
}

// ---------------------------------------------------------------------------
// Optimization

void AdamW::step(ParameterStore& store, const std::vector<std::vector<double>>& grads, double lr) {
  auto& items = store.items();
  if (grads.size() != items.size()) throw ContractError("one gradient buffer per parameter is required");
  if (state_.size() < items.size()) state_.resize(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    Parameter& p = items[i];
    if (!p.trainable()) continue;
    auto values = p.tensor.mutable_values();
    const auto& g = grads[i];
    if (g.size() != values.size()) throw ContractError("gradient size mismatch for " + p.name);
    State& s = state_[i];
    if (s.m.empty()) {
      s.m.assign(values.size(), 0.0);
      s.v.assign(values.size(), 0.0);
    }
    ++s.t;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
    const double decay = 1.0 - lr * weight_decay_;
    for (std::size_t j = 0; j < values.size(); ++j) {
      s.m[j] = beta1_ * s.m[j] + (1.0 - beta1_) * g[j];
      s.v[j] = beta2_ * s.v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double update = lr * (s.m[j] / c1) / (std::sqrt(s.v[j] / c2) + eps_);
      values[j] = values[j] * decay - update;
    }
  }
}

// ---------------------------------------------------------------------------
// Metrics

std::size_t label_rank(std::span<const double> logits, std::size_t label) {
  const double v = logits[label];
  std::size_t rank = 0;
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (logits[c] > v || (logits[c] == v && c < label)) ++rank;
  return rank;
}

std::vector<std::size_t> top_k(std::span<const double> logits, std::size_t k) {
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  order.resize(std::min(k, order.size()));
  return order;
}

EvalMetrics evaluate(const Model& model, std::span<const Sample> samples, std::size_t threads) {
  if (samples.empty()) throw ContractError("cannot evaluate an empty split");
  const std::size_t n_chars = model.vocab().chars;
  std::vector<std::size_t> ranks(samples.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    NoGradScope no_grad;
    Rng rng(0);
    for (std::size_t i = begin; i < samples.size(); i += stride) {
      const auto out = model.forward(samples[i].image, Mode::Eval, rng);
      ranks[i] = label_rank(out.readout.char_logits.values(), samples[i].target.char_label);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, samples.size()));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& t : pool) t.join();
  }
  EvalMetrics m;
  m.count = samples.size();
  m.per_char_correct.assign(n_chars, 0);
  m.per_char_total.assign(n_chars, 0);
  std::size_t hit1 = 0, hit10 = 0, hit_all = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::size_t label = samples[i].target.char_label;
    hit1 += ranks[i] < 1;
    hit10 += ranks[i] < 10;
    hit_all += ranks[i] < n_chars;
    ++m.per_char_total[label];
    m.per_char_correct[label] += ranks[i] < 1;
  }
  const double n = static_cast<double>(samples.size());
  m.top1 = static_cast<double>(hit1) / n;
  m.top10 = static_cast<double>(hit10) / n;
  m.top_all = static_cast<double>(hit_all) / n;
  return m;
}

std::string metrics_csv_header() { return "epoch,phase,lr,L_char,L_comp,L_struct,L_sem,L_total,top1,top10\n"; }

std::string metrics_csv_row(const EpochMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", m.epoch, m.phase, m.lr,
                m.losses[0], m.losses[1], m.losses[2], m.losses[3], m.total, m.top1, m.top10);
  return buf;
}

// ---------------------------------------------------------------------------
// Training

GlyphImage shift_image(const GlyphImage& image, int dx, int dy) {
  GlyphImage out{image.width, image.height, std::vector<double>(image.pixels.size(), 0.0)};
  const long w = static_cast<long>(image.width);
  const long h = static_cast<long>(image.height);
  for (long r = 0; r < h; ++r) {
    const long sr = r - dy;
    if (sr < 0 || sr >= h) continue;
    for (long c = 0; c < w; ++c) {
      const long sc = c - dx;
      if (sc >= 0 && sc < w) out.pixels[static_cast<std::size_t>(r * w + c)] = image.pixels[static_cast<std::size_t>(sr * w + sc)];
    }
  }
  return out;
}

std::vector<Sample> load_samples(const Dataset& data, const Vocabulary& vocab, std::span<const SampleRef> refs) {
  std::vector<Sample> out;
  out.reserve(refs.size());
  for (const auto& ref : refs) {
    out.push_back(Sample{read_pgm(data.image_path(ref.record, ref.image)), make_target(data.records[ref.record], vocab)});
  }
  return out;
}

Trainer::Trainer(Model& model, const Config& config)
    : model_(model),
      config_(config),
      optimizer_(config.train.adam_beta1, config.train.adam_beta2, config.train.adam_eps, config.train.weight_decay) {
  config_.validate();
}

namespace {

// Leading encoder stages with no trainable parameter: SIZE_MAX when the
// patch embedding itself trains, otherwise the number of frozen blocks.
std::size_t frozen_prefix(const Model& model) {
  const auto& enc = model.hvsu().encoder();
  const auto& patch = enc.patch_projection();
  if (patch.weight->trainable() || (patch.bias && patch.bias->trainable()) || enc.positions()->trainable()) {
    return SIZE_MAX;
  }
  const auto& store = model.params();
  std::size_t k = 0;
  for (; k < enc.blocks().size(); ++k) {
    const std::string prefix = "encoder.blocks." + std::to_string(k) + ".";
    bool trainable = false;
    for (const auto& p : store.items())
      if (p.name.compare(0, prefix.size(), prefix) == 0 && p.trainable()) trainable = true;
    if (trainable) break;
  }
  return k;
}

}  // namespace

std::vector<std::vector<double>> Trainer::batch_gradients(std::span<const Sample> train,
                                                          std::span<const std::size_t> batch, std::uint64_t stream,
                                                          EpochMetrics* acc, std::size_t* top1_hits,
                                                          std::size_t* top10_hits) {
  auto& items = model_.params().items();
  std::vector<std::vector<double>> grads(items.size());
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].trainable()) grads[i].assign(items[i].tensor.numel(), 0.0);

  const std::size_t prefix = frozen_prefix(model_);
  const int reach = static_cast<int>(config_.train.augment_shift);
  if (cache_owner_ != train.data() || cache_prefix_ != prefix) {
    encoder_cache_.clear();
    cache_owner_ = train.data();
    cache_prefix_ = prefix;
  }
  const double scale = 1.0 / static_cast<double>(batch.size());
  const auto& enc = model_.hvsu().encoder();

  for (std::size_t idx : batch) {
    Tape tape;
    Rng rng(Rng::mix(stream, idx));
    int dx = 0, dy = 0;
    if (reach > 0) {
      dx = rng.between(-reach, reach);
      dy = rng.between(-reach, reach);
    }
    auto image = [&] { return dx == 0 && dy == 0 ? train[idx].image : shift_image(train[idx].image, dx, dy); };
    Tensor visual;
    {
      TapeScope scope(tape);
      if (prefix == SIZE_MAX) {
        visual = enc.encode(image());
      } else {
        const auto key = std::make_tuple(idx, dx, dy);
        auto hit = encoder_cache_.find(key);
        if (hit == encoder_cache_.end()) {
          NoGradScope no_grad;
          hit = encoder_cache_.emplace(key, enc.run_blocks(enc.embed(image()), nullptr, 0, prefix).detach()).first;
        }
        visual = enc.run_blocks(hit->second, nullptr, prefix);
      }
      const auto out = model_.forward_from_visual(visual, Mode::Train, rng);
      const auto lp = compute_losses(model_, out, train[idx].target, config_.train.weights,
                                     config_.train.iou_threshold);
      tape.backward(lp.total);
      if (acc) {
        for (std::size_t k = 0; k < 4; ++k) acc->losses[k] += lp.parts[k].item();
        acc->total += lp.total.item();
      }
      const std::size_t rank = label_rank(out.readout.char_logits.values(), train[idx].target.char_label);
      if (top1_hits) *top1_hits += rank < 1;
      if (top10_hits) *top10_hits += rank < 10;
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (!items[i].trainable()) continue;
      const Tensor g = tape.grad_of(items[i].tensor);
      auto& dst = grads[i];
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += scale * g[j];
    }
  }
  return grads;
}

std::vector<EpochMetrics> Trainer::run_phase(int phase, std::span<const Sample> train, std::size_t first_epoch,
                                             const EpochCallback& on_epoch) {
  if (train.empty()) throw ContractError("training split is empty");
  const PhaseSpec& spec = config_.train.phases.at(static_cast<std::size_t>(phase - 1));
  model_.params().set_trainable(phase_patterns(config_, phase));
  // Frozen weights may have changed since the cache was filled.
  encoder_cache_.clear();

  std::vector<EpochMetrics> log;
  const std::size_t batch_size = config_.train.batch_size;
  for (std::size_t e = 0; e < spec.epochs; ++e) {
    const std::size_t epoch = first_epoch + e;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(Rng::mix(config_.train.seed, epoch));
    shuffle.shuffle(order.begin(), order.end());

    EpochMetrics m;
    m.epoch = epoch;
    m.phase = phase;
    m.lr = spec.learning_rate;
    std::size_t hit1 = 0, hit10 = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += batch_size, ++b) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      const std::uint64_t stream = Rng::mix(Rng::mix(config_.train.seed, epoch), b);
      const auto grads = batch_gradients(train, batch, stream, &m, &hit1, &hit10);
      optimizer_.step(model_.params(), grads, spec.learning_rate);
    }
    const double n = static_cast<double>(train.size());
    for (double& l : m.losses) l /= n;
    m.total /= n;
    m.top1 = static_cast<double>(hit1) / n;
    m.top10 = static_cast<double>(hit10) / n;
    log.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return log;
}

std::vector<EpochMetrics> Trainer::run(std::span<const Sample> train, const EpochCallback& on_epoch) {
  std::vector<EpochMetrics> all;
  std::size_t epoch = 1;
  for (int phase = 1; phase <= 3; ++phase) {
    auto part = run_phase(phase, train, epoch, on_epoch);
    epoch += part.size();
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

}  // namespace oraclesage
