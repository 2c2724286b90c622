#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "oraclesage/hvsu.hpp"

namespace oraclesage {

inline constexpr int kSchemaVersion = 1;
inline constexpr std::size_t kImageSide = 64;
inline constexpr const char* kAnnotationFile = "annotations.json";

struct ComponentAnnotation {
  std::string category;
  /// Normalized (x0, y0, x1, y1).
  std::optional<std::array<double, 4>> bbox;
  std::string note;

  bool operator==(const ComponentAnnotation&) const = default;
};

struct AnnotationRecord {
  std::string char_id;
  std::string modern_char;
  std::string pictographic_description;
  std::vector<ComponentAnnotation> components;
  std::optional<std::vector<std::vector<int>>> component_adjacency;
  std::vector<std::string> semantic_tags;
  std::string evolution_notes;
  std::vector<std::string> images;

  bool operator==(const AnnotationRecord&) const = default;
};

/// Throws DataError naming the record (and component) on an invariant violation.
void validate_record(const AnnotationRecord& record);

std::vector<AnnotationRecord> parse_annotations(std::string_view json, const std::string& source = "annotations");
std::string annotations_to_json(const std::vector<AnnotationRecord>& records);

/// A loaded annotation file; image paths resolve against `root`.
struct Dataset {
  std::filesystem::path root;
  std::vector<AnnotationRecord> records;

  std::filesystem::path image_path(std::size_t record, std::size_t image) const {
    return root / records[record].images[image];
  }
  std::size_t num_images() const noexcept;
};

/// Loads `path` (a JSON file, or a directory holding annotations.json) and
/// checks that every referenced image exists.
Dataset load_dataset(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& file, const std::vector<AnnotationRecord>& records);

// PGM images.
enum class PgmFormat { Ascii, Binary };  // P2, P5
std::string rasterize_pgm(const GlyphImage& image, PgmFormat format = PgmFormat::Binary);
/// Parses P2/P5 with maxval 255; `side` of 0 accepts any size.
GlyphImage parse_pgm(std::string_view bytes, std::size_t side = kImageSide);
GlyphImage read_pgm(const std::filesystem::path& path, std::size_t side = kImageSide);
void write_pgm(const std::filesystem::path& path, const GlyphImage& image, PgmFormat format = PgmFormat::Binary);

// Splits.
enum class SplitMode { Instance, Character };
SplitMode parse_split_mode(std::string_view text);
const char* split_mode_name(SplitMode mode);

struct SampleRef {
  std::size_t record = 0;
  std::size_t image = 0;

  bool operator==(const SampleRef&) const = default;
  auto operator<=>(const SampleRef&) const = default;
};

struct DatasetSplit {
  std::vector<SampleRef> train;
  std::vector<SampleRef> test;
  SplitMode mode = SplitMode::Instance;
};

/// 9:1 split. Instance mode holds out max(1, round(n/10)) images of every
/// character with at least two images; character mode holds out whole characters.
DatasetSplit split_dataset(const std::vector<AnnotationRecord>& records, SplitMode mode, std::uint64_t seed);

// Vocabularies and per-sample targets.
struct Vocabulary {
  std::vector<std::string> chars;
  std::vector<std::string> categories;
  std::vector<std::string> semantic;

  /// Characters in record order; categories sorted; semantic = sorted union of categories and tags.
  static Vocabulary build(const std::vector<AnnotationRecord>& records);
  std::optional<std::size_t> char_index(std::string_view id) const;
  std::optional<std::size_t> category_index(std::string_view name) const;
  std::optional<std::size_t> semantic_index(std::string_view name) const;
};

struct ComponentTarget {
  std::size_t category = 0;
  std::optional<std::array<double, 4>> bbox;
};

struct SampleTarget {
  std::size_t char_label = 0;
  std::vector<ComponentTarget> components;
  /// Row-major k x k ground-truth adjacency, when annotated.
  std::optional<std::vector<double>> adjacency;
  /// One 0/1 entry per semantic vocabulary concept.
  std::vector<double> semantic_active;
};

/// Throws DataError when a label is missing from the vocabulary.
SampleTarget make_target(const AnnotationRecord& record, const Vocabulary& vocab);

// Synthetic glyphs.
inline constexpr std::array<const char*, 5> kMotifs{"box", "cross", "arc", "zigzag", "dot-cluster"};
inline constexpr std::array<const char*, 3> kLayouts{"vertical stack", "horizontal pair", "enclosure"};

struct SynthSpec {
  std::uint64_t seed = 7;
  double max_translation = 3.0;  // pixels
  double max_rotation = 10.0;    // degrees
  int min_stroke = 1;
  int max_stroke = 2;
  double max_noise = 0.02;  // fraction of pixels flipped

  static SynthSpec no_jitter(std::uint64_t seed);
};

struct SynthGlyph {
  GlyphImage image;
  /// Per component, row-major 0/1 mask of the pixels its strokes inked.
  std::vector<std::vector<std::uint8_t>> ink;
};

struct SynthCharacter {
  AnnotationRecord record;
  std::vector<SynthGlyph> glyphs;
};

std::size_t synth_capacity();
/// Renders n_chars distinct (layout, motif pair) characters, imgs_per_char each.
/// Throws SizingError when n_chars exceeds the combination inventory.
std::vector<SynthCharacter> synth_generate(const SynthSpec& spec, std::size_t n_chars, std::size_t imgs_per_char);
/// Writes annotations.json and images/ under `dir`.
void write_synth(const std::filesystem::path& dir, const std::vector<SynthCharacter>& chars);

}  // namespace oraclesage
