#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "oraclesage/config.hpp"
#include "oraclesage/data.hpp"
#include "oraclesage/gsrf.hpp"
#include "oraclesage/hvsu.hpp"
#include "oraclesage/nn.hpp"

namespace oraclesage {

/// Output-space sizes a model is built for.
struct ModelVocab {
  std::size_t chars = 0;
  std::size_t categories = 0;
  std::size_t semantic = 0;

  static ModelVocab of(const Vocabulary& v) { return {v.chars.size(), v.categories.size(), v.semantic.size()}; }
};

/// Visual pipeline followed by graph reasoning and readout heads.
class Model {
 public:
  struct Output {
    HvsuOutput hvsu;
    Tensor visual_nodes;      // one row per pyramid level (plus pooled queries)
    HeteroGraph initial;      // graph before reasoning
    HeteroGraph before_last;  // graph entering the final reasoning step
    HeteroGraph graph;        // reasoned graph
    Readout readout;
  };

  Model(const ModelConfig& config, const ModelVocab& vocab, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Output forward(const GlyphImage& image, Mode mode, Rng& rng, AttentionProbe* probe = nullptr) const;
  /// Same, starting from precomputed encoder output (P x d).
  Output forward_from_visual(Tensor visual, Mode mode, Rng& rng, AttentionProbe* probe = nullptr) const;

  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }
  const ModelConfig& config() const noexcept { return config_; }
  const ModelVocab& vocab() const noexcept { return vocab_; }
  const Hvsu& hvsu() const noexcept { return hvsu_; }
  const Gsrf& gsrf() const noexcept { return gsrf_; }

 private:
  ModelConfig config_;
  ModelVocab vocab_;
  ParameterStore store_;
  Hvsu hvsu_;
  Gsrf gsrf_;
};

// Parameter snapshots: "OSG1", u32 count, then per parameter u32 name length,
// name bytes, u32 rank, rank x u64 extents, f64 values; integers and floats little-endian.
std::string snapshot_bytes(const ParameterStore& store);
void write_snapshot(const std::filesystem::path& path, const ParameterStore& store);
/// Copies every snapshot entry into the store. Throws DataError naming the
/// offending parameter on a missing name, unknown name, or shape mismatch.
void load_snapshot_bytes(std::string_view bytes, ParameterStore& store);
void load_snapshot(const std::filesystem::path& path, ParameterStore& store);

/// Sidecar describing how to rebuild a model for a snapshot: config text and vocabularies.
struct ModelCard {
  Config config;
  Vocabulary vocab;
};
std::string model_card_json(const ModelCard& card);
ModelCard parse_model_card(std::string_view json);
/// `<snapshot>.json`
std::filesystem::path model_card_path(const std::filesystem::path& snapshot);

}  // namespace oraclesage
