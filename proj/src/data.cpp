#include "oraclesage/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"

#include "oraclesage/errors.hpp"
#include "oraclesage/rng.hpp"

namespace oraclesage {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

std::string record_label(const AnnotationRecord& r) { return "record '" + r.char_id + "'"; }

}  // namespace

// ---------------------------------------------------------------------------
// Annotations

void validate_record(const AnnotationRecord& r) {
  if (r.char_id.empty()) throw DataError("record with empty char_id");
  if (r.images.empty()) throw DataError(record_label(r) + ": at least one image is required");
  for (std::size_t i = 0; i < r.components.size(); ++i) {
    const auto& c = r.components[i];
    if (c.category.empty()) {
      throw DataError(record_label(r) + " component " + std::to_string(i) + ": empty category");
    }
    if (!c.bbox) continue;
    const auto [x0, y0, x1, y1] = *c.bbox;
    const bool inside = x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0;
    if (!inside || !(x0 < x1) || !(y0 < y1)) {
      throw DataError(record_label(r) + " component " + std::to_string(i) +
                      ": bbox must lie in [0,1] with x0<x1 and y0<y1");
    }
  }
  if (r.component_adjacency) {
    const auto& a = *r.component_adjacency;
    const std::size_t k = r.components.size();
    if (a.size() != k) throw DataError(record_label(r) + ": component_adjacency must be " + std::to_string(k) + "x" + std::to_string(k));
    for (std::size_t i = 0; i < k; ++i) {
      if (a[i].size() != k) throw DataError(record_label(r) + ": component_adjacency row " + std::to_string(i) + " has wrong length");
      for (std::size_t j = 0; j < k; ++j) {
        if (a[i][j] != 0 && a[i][j] != 1) throw DataError(record_label(r) + ": component_adjacency entries must be 0 or 1");
      }
    }
    for (std::size_t i = 0; i < k; ++i) {
      if (a[i][i] != 0) throw DataError(record_label(r) + ": component_adjacency diagonal must be zero");
      for (std::size_t j = 0; j < i; ++j)
        if (a[i][j] != a[j][i]) throw DataError(record_label(r) + ": component_adjacency must be symmetric");
    }
  }
}

std::vector<AnnotationRecord> parse_annotations(std::string_view text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(source + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("oraclesem-schema") || !doc.contains("records")) {
    throw DataError(source + ": expected an object with \"oraclesem-schema\" and \"records\"");
  }
  if (doc["oraclesem-schema"] != kSchemaVersion) {
    throw DataError(source + ": unsupported schema version " + doc["oraclesem-schema"].dump());
  }
  if (!doc["records"].is_array()) throw DataError(source + ": \"records\" must be an array");

  std::vector<AnnotationRecord> out;
  std::size_t index = 0;
  for (const auto& j : doc["records"]) {
    const std::string where = source + " record " + std::to_string(index++);
    try {
      AnnotationRecord r;
      r.char_id = j.at("char_id").get<std::string>();
      r.modern_char = j.value("modern_char", "");
      r.pictographic_description = j.value("pictographic_description", "");
      for (const auto& c : j.value("components", json::array())) {
        ComponentAnnotation comp;
        comp.category = c.at("category").get<std::string>();
        if (c.contains("bbox") && !c["bbox"].is_null()) comp.bbox = c["bbox"].get<std::array<double, 4>>();
        comp.note = c.value("note", "");
        r.components.push_back(std::move(comp));
      }
      if (j.contains("component_adjacency") && !j["component_adjacency"].is_null()) {
        r.component_adjacency = j["component_adjacency"].get<std::vector<std::vector<int>>>();
      }
      r.semantic_tags = j.value("semantic_tags", std::vector<std::string>{});
      r.evolution_notes = j.value("evolution_notes", "");
      r.images = j.at("images").get<std::vector<std::string>>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    validate_record(out.back());
  }
  return out;
}

std::string annotations_to_json(const std::vector<AnnotationRecord>& records) {
  ordered_json list = ordered_json::array();
  for (const auto& r : records) {
    ordered_json j;
    j["char_id"] = r.char_id;
    j["modern_char"] = r.modern_char;
    j["pictographic_description"] = r.pictographic_description;
    ordered_json comps = ordered_json::array();
    for (const auto& c : r.components) {
      ordered_json cj;
      cj["category"] = c.category;
      if (c.bbox) cj["bbox"] = *c.bbox;
      cj["note"] = c.note;
      comps.push_back(std::move(cj));
    }
    j["components"] = std::move(comps);
    if (r.component_adjacency) j["component_adjacency"] = *r.component_adjacency;
    j["semantic_tags"] = r.semantic_tags;
    j["evolution_notes"] = r.evolution_notes;
    j["images"] = r.images;
    list.push_back(std::move(j));
  }
  ordered_json doc;
  doc["oraclesem-schema"] = kSchemaVersion;
  doc["records"] = std::move(list);
  return doc.dump(2) + "\n";
}

std::size_t Dataset::num_images() const noexcept {
  std::size_t n = 0;
  for (const auto& r : records) n += r.images.size();
  return n;
}

Dataset load_dataset(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / kAnnotationFile : path;
  if (!fs::exists(file)) throw DataError("annotation file not found: " + file.string());
  Dataset ds;
  ds.root = file.parent_path();
  ds.records = parse_annotations(read_file(file), file.string());
  for (std::size_t r = 0; r < ds.records.size(); ++r)
    for (std::size_t i = 0; i < ds.records[r].images.size(); ++i)
      if (!fs::exists(ds.image_path(r, i))) throw DataError("missing image " + ds.image_path(r, i).string());
  return ds;
}

void write_annotations(const fs::path& file, const std::vector<AnnotationRecord>& records) {
  for (const auto& r : records) validate_record(r);
  write_file(file, annotations_to_json(records));
}

// ---------------------------------------------------------------------------
// PGM

std::string rasterize_pgm(const GlyphImage& image, PgmFormat format) {
  std::string out = (format == PgmFormat::Ascii ? "P2\n" : "P5\n") + std::to_string(image.width) + " " +
                    std::to_string(image.height) + "\n255\n";
  auto level = [](double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  if (format == PgmFormat::Binary) {
    for (double v : image.pixels) out.push_back(static_cast<char>(static_cast<unsigned char>(level(v))));
  } else {
    for (std::size_t r = 0; r < image.height; ++r) {
      for (std::size_t c = 0; c < image.width; ++c) {
        if (c) out.push_back(' ');
        out += std::to_string(level(image.at(r, c)));
      }
      out.push_back('\n');
    }
  }
  return out;
}

GlyphImage parse_pgm(std::string_view bytes, std::size_t side) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos || pos - start > 9) throw DataError(std::string("malformed PGM header: bad ") + what);
    return std::stoul(std::string(bytes.substr(start, pos - start)));
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '2' && bytes[1] != '5')) {
    throw DataError("malformed PGM header: expected P2 or P5");
  }
  const bool binary = bytes[1] == '5';
  pos = 2;
  const std::size_t width = number("width");
  const std::size_t height = number("height");
  const std::size_t maxval = number("maxval");
  if (maxval != 255) throw DataError("PGM maxval must be 255, got " + std::to_string(maxval));
  if (side != 0 && (width != side || height != side)) {
    throw DataError("PGM must be " + std::to_string(side) + "x" + std::to_string(side) + ", got " +
                    std::to_string(width) + "x" + std::to_string(height));
  }
  if (width == 0 || height == 0) throw DataError("PGM has zero size");

  GlyphImage img{width, height, std::vector<double>(width * height)};
  if (binary) {
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      throw DataError("malformed PGM header: missing separator before payload");
    }
    ++pos;
    if (bytes.size() - pos != width * height) {
      throw DataError("PGM payload has " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                      std::to_string(width * height));
    }
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      img.pixels[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  } else {
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const std::size_t v = number("pixel");
      if (v > 255) throw DataError("PGM pixel value " + std::to_string(v) + " exceeds maxval");
      img.pixels[i] = static_cast<double>(v) / 255.0;
    }
    skip_space();
    if (pos != bytes.size()) throw DataError("PGM has trailing data");
  }
  return img;
}

GlyphImage read_pgm(const fs::path& path, std::size_t side) {
  try {
    return parse_pgm(read_file(path), side);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_pgm(const fs::path& path, const GlyphImage& image, PgmFormat format) {
  write_file(path, rasterize_pgm(image, format));
}

// ---------------------------------------------------------------------------
// Splits

SplitMode parse_split_mode(std::string_view text) {
  if (text == "instance") return SplitMode::Instance;
  if (text == "character") return SplitMode::Character;
  throw ConfigError("split mode must be 'instance' or 'character', got '" + std::string(text) + "'");
}

const char* split_mode_name(SplitMode mode) { return mode == SplitMode::Instance ? "instance" : "character"; }

DatasetSplit split_dataset(const std::vector<AnnotationRecord>& records, SplitMode mode, std::uint64_t seed) {
  DatasetSplit split;
  split.mode = mode;
  if (mode == SplitMode::Instance) {
    std::size_t total = 0;
    for (const auto& r : records) total += r.images.size();
    if (total < 10) throw SizingError("instance split needs at least 10 images, got " + std::to_string(total));
    for (std::size_t r = 0; r < records.size(); ++r) {
      const std::size_t n = records[r].images.size();
      std::vector<std::size_t> order(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      Rng rng(Rng::mix(seed, r));
      rng.shuffle(order.begin(), order.end());
      const std::size_t n_test =
          n >= 2 ? std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n)))) : 0;
      std::vector<bool> held(n, false);
      for (std::size_t i = 0; i < n_test; ++i) held[order[i]] = true;
      for (std::size_t i = 0; i < n; ++i) (held[i] ? split.test : split.train).push_back({r, i});
    }
  } else {
    const std::size_t n = records.size();
    if (n < 10) throw SizingError("character split needs at least 10 characters, got " + std::to_string(n));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());
    const std::size_t n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n))));
    std::vector<bool> held(n, false);
    for (std::size_t i = 0; i < n_test; ++i) held[order[i]] = true;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < records[r].images.size(); ++i) (held[r] ? split.test : split.train).push_back({r, i});
  }
  return split;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary Vocabulary::build(const std::vector<AnnotationRecord>& records) {
  Vocabulary v;
  std::set<std::string> seen_chars;
  std::set<std::string> categories;
  std::set<std::string> semantic;
  for (const auto& r : records) {
    if (!seen_chars.insert(r.char_id).second) throw DataError("duplicate char_id '" + r.char_id + "'");
    v.chars.push_back(r.char_id);
    for (const auto& c : r.components) {
      categories.insert(c.category);
      semantic.insert(c.category);
    }
    semantic.insert(r.semantic_tags.begin(), r.semantic_tags.end());
  }
  v.categories.assign(categories.begin(), categories.end());
  v.semantic.assign(semantic.begin(), semantic.end());
  return v;
}

namespace {
std::optional<std::size_t> find_in(const std::vector<std::string>& list, std::string_view name, bool sorted) {
  if (sorted) {
    const auto it = std::lower_bound(list.begin(), list.end(), name);
    if (it != list.end() && *it == name) return static_cast<std::size_t>(it - list.begin());
    return std::nullopt;
  }
  const auto it = std::find(list.begin(), list.end(), name);
  if (it == list.end()) return std::nullopt;
  return static_cast<std::size_t>(it - list.begin());
}
}  // namespace

std::optional<std::size_t> Vocabulary::char_index(std::string_view id) const { return find_in(chars, id, false); }
std::optional<std::size_t> Vocabulary::category_index(std::string_view name) const {
  return find_in(categories, name, true);
}
std::optional<std::size_t> Vocabulary::semantic_index(std::string_view name) const {
  return find_in(semantic, name, true);
}

SampleTarget make_target(const AnnotationRecord& record, const Vocabulary& vocab) {
  SampleTarget t;
  const auto label = vocab.char_index(record.char_id);
  if (!label) throw DataError("character '" + record.char_id + "' is not in the vocabulary");
  t.char_label = *label;
  t.semantic_active.assign(vocab.semantic.size(), 0.0);
  auto activate = [&](const std::string& name) {
    const auto k = vocab.semantic_index(name);
    if (!k) throw DataError(record_label(record) + ": concept '" + name + "' is not in the vocabulary");
    t.semantic_active[*k] = 1.0;
  };
  for (const auto& c : record.components) {
    const auto cat = vocab.category_index(c.category);
    if (!cat) throw DataError(record_label(record) + ": category '" + c.category + "' is not in the vocabulary");
    t.components.push_back({*cat, c.bbox});
    activate(c.category);
  }
  for (const auto& tag : record.semantic_tags) activate(tag);
  if (record.component_adjacency) {
    const std::size_t k = record.components.size();
    std::vector<double> a(k * k);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) a[i * k + j] = (*record.component_adjacency)[i][j];
    t.adjacency = std::move(a);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Synthetic glyphs

namespace {

struct Point {
  double x;
  double y;
};
using Stroke = std::vector<Point>;  // polyline in unit slot coordinates
using Rect = std::array<double, 4>;   // x0, y0, x1, y1 in pixels

std::vector<Stroke> motif_strokes(std::size_t motif) {
  switch (motif) {
    case 0:  // box
      return {{{0.1, 0.1}, {0.9, 0.1}, {0.9, 0.9}, {0.1, 0.9}, {0.1, 0.1}}};
    case 1:  // cross
      return {{{0.5, 0.05}, {0.5, 0.95}}, {{0.05, 0.5}, {0.95, 0.5}}};
    case 2: {  // arc
      Stroke s;
      for (int i = 0; i <= 16; ++i) {
        const double a = std::numbers::pi * (1.0 + i / 16.0);
        s.push_back({0.5 + 0.42 * std::cos(a), 0.8 + 0.7 * std::sin(a)});
      }
      return {s};
    }
    case 3:  // zigzag
      return {{{0.05, 0.8}, {0.27, 0.2}, {0.5, 0.8}, {0.73, 0.2}, {0.95, 0.8}}};
    default: {  // dot-cluster
      std::vector<Stroke> dots;
      for (const Point c : {Point{0.25, 0.25}, Point{0.75, 0.25}, Point{0.5, 0.5}, Point{0.25, 0.75}, Point{0.75, 0.75}}) {
        dots.push_back({{c.x - 0.06, c.y}, {c.x + 0.06, c.y}});
        dots.push_back({{c.x, c.y - 0.06}, {c.x, c.y + 0.06}});
      }
      return dots;
    }
  }
}

std::array<Rect, 2> layout_slots(std::size_t layout) {
  switch (layout) {
    case 0: return {Rect{10, 4, 54, 30}, Rect{10, 34, 54, 60}};
    case 1: return {Rect{4, 10, 30, 54}, Rect{34, 10, 60, 54}};
    default: return {Rect{4, 4, 60, 60}, Rect{20, 20, 44, 44}};
  }
}

struct Combo {
  std::size_t layout;
  std::size_t first;
  std::size_t second;
};

std::vector<Combo> all_combos() {
  std::vector<Combo> out;
  for (std::size_t l = 0; l < kLayouts.size(); ++l)
    for (std::size_t a = 0; a < kMotifs.size(); ++a)
      for (std::size_t b = 0; b < kMotifs.size(); ++b) out.push_back({l, a, b});
  return out;
}

struct Jitter {
  double angle = 0.0;  // radians
  double tx = 0.0;
  double ty = 0.0;
  int stroke = 1;
  double noise = 0.0;
};

constexpr double kCenter = kImageSide / 2.0;

Point transform(Point p, const Jitter& j) {
  const double dx = p.x - kCenter, dy = p.y - kCenter;
  const double c = std::cos(j.angle), s = std::sin(j.angle);
  return {kCenter + c * dx - s * dy + j.tx, kCenter + s * dx + c * dy + j.ty};
}

void stamp(std::vector<std::uint8_t>& mask, Point p, int stroke) {
  const double off = stroke == 1 ? 0.0 : 0.5;
  const long x0 = static_cast<long>(std::floor(p.x - off));
  const long y0 = static_cast<long>(std::floor(p.y - off));
  const long side = static_cast<long>(kImageSide);
  for (long y = y0; y < y0 + stroke; ++y)
    for (long x = x0; x < x0 + stroke; ++x)
      if (x >= 0 && y >= 0 && x < side && y < side) mask[static_cast<std::size_t>(y * side + x)] = 1;
}

std::vector<std::uint8_t> render_motif(std::size_t motif, const Rect& slot, const Jitter& j) {
  std::vector<std::uint8_t> mask(kImageSide * kImageSide, 0);
  const double w = slot[2] - slot[0], h = slot[3] - slot[1];
  for (const auto& stroke : motif_strokes(motif)) {
    for (std::size_t i = 0; i + 1 < stroke.size(); ++i) {
      const Point a{slot[0] + stroke[i].x * w, slot[1] + stroke[i].y * h};
      const Point b{slot[0] + stroke[i + 1].x * w, slot[1] + stroke[i + 1].y * h};
      const double len = std::hypot(b.x - a.x, b.y - a.y);
      const int steps = std::max(1, static_cast<int>(std::ceil(len / 0.25)));
      for (int s = 0; s <= steps; ++s) {
        const double t = static_cast<double>(s) / steps;
        stamp(mask, transform({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)}, j), j.stroke);
      }
    }
  }
  return mask;
}

// Pixel box containing the slot under every allowed jitter, normalized.
std::array<double, 4> jitter_bound(const Rect& slot, const SynthSpec& spec) {
  double x0 = slot[0], y0 = slot[1], x1 = slot[2], y1 = slot[3];
  const double max_angle = spec.max_rotation * std::numbers::pi / 180.0;
  const int samples = 64;
  for (int i = 0; i <= samples; ++i) {
    Jitter j;
    j.angle = -max_angle + 2.0 * max_angle * i / samples;
    for (const Point corner : {Point{slot[0], slot[1]}, Point{slot[2], slot[1]}, Point{slot[0], slot[3]},
                               Point{slot[2], slot[3]}}) {
      const Point p = transform(corner, j);
      x0 = std::min(x0, p.x);
      y0 = std::min(y0, p.y);
      x1 = std::max(x1, p.x);
      y1 = std::max(y1, p.y);
    }
  }
  const double pad = spec.max_translation + static_cast<double>(spec.max_stroke) + (spec.max_rotation > 0 ? 0.5 : 0.0);
  const double side = static_cast<double>(kImageSide);
  return {std::clamp(x0 - pad, 0.0, side) / side, std::clamp(y0 - pad, 0.0, side) / side,
          std::clamp(x1 + pad, 0.0, side) / side, std::clamp(y1 + pad, 0.0, side) / side};
}

std::string char_id_for(std::size_t i) {
  std::string digits = std::to_string(i);
  return "syn-" + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

}  // namespace

SynthSpec SynthSpec::no_jitter(std::uint64_t seed) {
  SynthSpec s;
  s.seed = seed;
  s.max_translation = 0.0;
  s.max_rotation = 0.0;
  s.min_stroke = 1;
  s.max_stroke = 1;
  s.max_noise = 0.0;
  return s;
}

std::size_t synth_capacity() { return kLayouts.size() * kMotifs.size() * kMotifs.size(); }

std::vector<SynthCharacter> synth_generate(const SynthSpec& spec, std::size_t n_chars, std::size_t imgs_per_char) {
  if (n_chars > synth_capacity()) {
    throw SizingError("requested " + std::to_string(n_chars) + " characters but only " +
                      std::to_string(synth_capacity()) + " layout/motif combinations exist");
  }
  if (imgs_per_char == 0) throw SizingError("at least one image per character is required");
  if (spec.min_stroke < 1 || spec.max_stroke < spec.min_stroke || spec.max_stroke > 2 || spec.max_noise < 0.0 ||
      spec.max_noise > 0.02 || spec.max_translation < 0.0 || spec.max_translation > 3.0 || spec.max_rotation < 0.0 ||
      spec.max_rotation > 10.0) {
    throw ConfigError("synthetic jitter outside the supported ranges");
  }

  auto combos = all_combos();
  Rng pick(spec.seed);
  pick.shuffle(combos.begin(), combos.end());

  std::vector<SynthCharacter> out;
  for (std::size_t c = 0; c < n_chars; ++c) {
    const Combo combo = combos[c];
    const auto slots = layout_slots(combo.layout);
    const std::array<std::size_t, 2> motifs{combo.first, combo.second};
    SynthCharacter ch;
    AnnotationRecord& r = ch.record;
    r.char_id = char_id_for(c);
    r.pictographic_description = std::string(kLayouts[combo.layout]) + " of " + kMotifs[combo.first] + " and " +
                                 kMotifs[combo.second];
    for (std::size_t k = 0; k < 2; ++k) {
      r.components.push_back({kMotifs[motifs[k]], jitter_bound(slots[k], spec),
                              k == 0 ? (combo.layout == 2 ? "outer" : "first") : (combo.layout == 2 ? "inner" : "second")});
    }
    r.component_adjacency = std::vector<std::vector<int>>{{0, 1}, {1, 0}};
    std::set<std::string> tags{kMotifs[combo.first], kMotifs[combo.second]};
    r.semantic_tags.assign(tags.begin(), tags.end());
    r.evolution_notes = "synthetic";

    for (std::size_t i = 0; i < imgs_per_char; ++i) {
      const std::string index = std::to_string(i);
      r.images.push_back("images/" + r.char_id + "_" + (index.size() < 2 ? "0" : "") + index + ".pgm");

      Rng rng(Rng::mix(spec.seed, c * 1000 + i + 1));
      Jitter j;
      j.angle = rng.uniform(-spec.max_rotation, spec.max_rotation) * std::numbers::pi / 180.0;
      j.tx = rng.uniform(-spec.max_translation, spec.max_translation);
      j.ty = rng.uniform(-spec.max_translation, spec.max_translation);
      j.stroke = rng.between(spec.min_stroke, spec.max_stroke);
      j.noise = rng.uniform(0.0, spec.max_noise);

      SynthGlyph g;
      g.image = GlyphImage::blank(kImageSide);
      for (std::size_t k = 0; k < 2; ++k) {
        g.ink.push_back(render_motif(motifs[k], slots[k], j));
        for (std::size_t p = 0; p < g.image.pixels.size(); ++p)
          if (g.ink.back()[p]) g.image.pixels[p] = 1.0;
      }
      if (j.noise > 0.0) {
        for (double& p : g.image.pixels)
          if (rng.bernoulli(j.noise)) p = 1.0 - p;
      }
      ch.glyphs.push_back(std::move(g));
    }
    validate_record(r);
    out.push_back(std::move(ch));
  }
  return out;
}

void write_synth(const fs::path& dir, const std::vector<SynthCharacter>& chars) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw DataError("cannot create " + (dir / "images").string() + ": " + ec.message());
  std::vector<AnnotationRecord> records;
  for (const auto& ch : chars) {
    for (std::size_t i = 0; i < ch.glyphs.size(); ++i) write_pgm(dir / ch.record.images[i], ch.glyphs[i].image);
    records.push_back(ch.record);
  }
  write_annotations(dir / kAnnotationFile, records);
}

}  // namespace oraclesage
