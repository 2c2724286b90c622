#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "oraclesage/config.hpp"
#include "oraclesage/data.hpp"
#include "oraclesage/model.hpp"

namespace oraclesage {

// ---------------------------------------------------------------------------
// Losses

/// Intersection over union of two normalized (x0, y0, x1, y1) boxes.
double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

/// Greedy one-to-one matching by descending IoU (ties to the lower predicted,
/// then lower true index). Returns (predicted, true) pairs with IoU >= threshold.
/// Truth components without a box never match.
std::vector<std::pair<std::size_t, std::size_t>> match_components(
    std::span<const std::array<double, 4>> predicted, std::span<const ComponentTarget> truth, double threshold);

Tensor loss_char(const Tensor& char_logits, std::size_t label);
/// Cross-entropy per matched pair plus ln(num_categories) per unmatched true component.
Tensor loss_comp(const Tensor& comp_logits, std::span<const std::pair<std::size_t, std::size_t>> matches,
                 std::span<const ComponentTarget> truth, std::size_t num_categories);
/// ||stop_grad(h_next) - h_recomputed||^2 + beta * ||A - A_hat||_1 over off-diagonal
/// entries. Without `a_true` the adjacency term is skipped.
Tensor loss_struct(const Tensor& h_next, const Tensor& h_recomputed, const Tensor* a_true, const Tensor& a_pred,
                   double beta);
Tensor loss_sem(const Tensor& sem_logits, std::span<const double> active);
/// Weighted sum in the order (char, comp, struct, sem). Throws NumericError
/// naming the first non-finite part.
Tensor loss_total(const std::array<Tensor, 4>& parts, const LossWeights& w);

struct LossParts {
  std::array<Tensor, 4> parts;  // char, comp, struct, sem
  Tensor total;
  std::size_t matched = 0;
  bool adjacency_skipped = false;
};

/// All four terms for one forward pass.
LossParts compute_losses(const Model& model, const Model::Output& out, const SampleTarget& target,
                         const LossWeights& weights, double iou_threshold);

// ---------------------------------------------------------------------------
// Optimization

/// Decoupled-weight-decay Adam. Parameters that are not trainable are skipped
/// and their state is not advanced.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  /// `grads` is aligned with store.items().
  void step(ParameterStore& store, const std::vector<std::vector<double>>& grads, double lr);
  std::size_t steps_taken(std::size_t param) const { return param < state_.size() ? state_[param].t : 0; }

 private:
  struct State {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t t = 0;
  };
  double beta1_, beta2_, eps_, weight_decay_;
  std::vector<State> state_;
};

// ---------------------------------------------------------------------------
// Metrics

/// Rank of `label` under descending logits, ties broken by ascending class index.
std::size_t label_rank(std::span<const double> logits, std::size_t label);
/// The k best classes under the same ordering.
std::vector<std::size_t> top_k(std::span<const double> logits, std::size_t k);

struct EvalMetrics {
  std::size_t count = 0;
  double top1 = 0.0;
  double top10 = 0.0;
  double top_all = 0.0;  // Top-|C|
  std::vector<std::size_t> per_char_correct;
  std::vector<std::size_t> per_char_total;
};

struct Sample {
  GlyphImage image;
  SampleTarget target;
};

/// Eval-mode Top-k over samples; `threads` > 1 fans out over a worker pool.
EvalMetrics evaluate(const Model& model, std::span<const Sample> samples, std::size_t threads = 1);

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based over the whole run
  int phase = 1;
  double lr = 0.0;
  std::array<double, 4> losses{};  // running means: char, comp, struct, sem
  double total = 0.0;
  double top1 = 0.0;  // running train-mode predictions
  double top10 = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

// ---------------------------------------------------------------------------
// Training

/// Translates by (dx, dy) pixels (positive = right/down); uncovered pixels are 0.
GlyphImage shift_image(const GlyphImage& image, int dx, int dy);

/// Loads every image of a split into memory with its target.
std::vector<Sample> load_samples(const Dataset& data, const Vocabulary& vocab, std::span<const SampleRef> refs);

class Trainer {
 public:
  using EpochCallback = std::function<void(const EpochMetrics&)>;

  Trainer(Model& model, const Config& config);

  /// Runs the three phases in order on `train`.
  std::vector<EpochMetrics> run(std::span<const Sample> train, const EpochCallback& on_epoch = {});
  /// One phase (1-based); `first_epoch` numbers the epochs.
  std::vector<EpochMetrics> run_phase(int phase, std::span<const Sample> train, std::size_t first_epoch,
                                      const EpochCallback& on_epoch = {});
  /// Loss and mean gradient over one batch, without an optimizer step.
  std::vector<std::vector<double>> batch_gradients(std::span<const Sample> train, std::span<const std::size_t> batch,
                                                   std::uint64_t stream, EpochMetrics* accumulate = nullptr,
                                                   std::size_t* top1_hits = nullptr, std::size_t* top10_hits = nullptr);

  const AdamW& optimizer() const noexcept { return optimizer_; }

 private:
  Model& model_;
  Config config_;
  AdamW optimizer_;
  // Frozen-prefix encoder outputs keyed by (sample, dx, dy); the encoder has no dropout.
  std::map<std::tuple<std::size_t, int, int>, Tensor> encoder_cache_;
  const Sample* cache_owner_ = nullptr;
  std::size_t cache_prefix_ = 0;
};

}  // namespace oraclesage
