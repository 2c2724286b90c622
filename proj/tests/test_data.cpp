#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "doctest.h"
#include "oraclesage/data.hpp"
#include "oraclesage/errors.hpp"

using namespace oraclesage;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("oraclesage_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string random_text(Rng& rng) {
  static const std::vector<std::string> pieces{"a", "Z", "9", " ", "\"", "\\", "\n", "\xe6\xb0\xb4", "\xe2\x80\xa6", "-"};
  std::string s;
  const std::size_t n = rng.below(8);
  for (std::size_t i = 0; i < n; ++i) s += pieces[rng.below(pieces.size())];
  return s;
}

AnnotationRecord random_record(Rng& rng, std::size_t index) {
  AnnotationRecord r;
  r.char_id = "c" + std::to_string(index) + random_text(rng);
  r.modern_char = rng.bernoulli(0.3) ? "" : random_text(rng);
  r.pictographic_description = random_text(rng);
  const std::size_t k = rng.below(4);
  for (std::size_t i = 0; i < k; ++i) {
    ComponentAnnotation c;
    c.category = "cat" + std::to_string(rng.below(5));
    if (rng.bernoulli(0.7)) {
      const double x0 = rng.uniform(0.0, 0.5), y0 = rng.uniform(0.0, 0.5);
      c.bbox = std::array<double, 4>{x0, y0, rng.uniform(x0 + 0.01, 1.0), rng.uniform(y0 + 0.01, 1.0)};
    }
    c.note = random_text(rng);
    r.components.push_back(c);
  }
  if (rng.bernoulli(0.5)) {
    std::vector<std::vector<int>> a(k, std::vector<int>(k, 0));
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j) a[i][j] = a[j][i] = rng.bernoulli(0.5);
    r.component_adjacency = a;
  }
  for (std::size_t i = rng.below(3); i > 0; --i) r.semantic_tags.push_back(random_text(rng) + "t");
  r.evolution_notes = random_text(rng);
  for (std::size_t i = 1 + rng.below(3); i > 0; --i) r.images.push_back("img/" + std::to_string(rng.below(1000)) + ".pgm");
  return r;
}

std::vector<AnnotationRecord> counted_records(std::size_t chars, std::size_t images) {
  std::vector<AnnotationRecord> out(chars);
  for (std::size_t c = 0; c < chars; ++c) {
    out[c].char_id = "k" + std::to_string(c);
    for (std::size_t i = 0; i < images; ++i) out[c].images.push_back("x" + std::to_string(i) + ".pgm");
  }
  return out;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("annotation records") {
  SUBCASE("round trip of random valid records") {
    Rng rng(21);
    std::vector<AnnotationRecord> records;
    for (std::size_t i = 0; i < 50; ++i) records.push_back(random_record(rng, i));
    for (const auto& r : records) REQUIRE_NOTHROW(validate_record(r));
    const auto back = parse_annotations(annotations_to_json(records));
    CHECK(back == records);
  }
  SUBCASE("empty record list") { CHECK(parse_annotations(R"({"oraclesem-schema": 1, "records": []})").empty()); }
  SUBCASE("inverted bbox names the record and component") {
    AnnotationRecord r = counted_records(1, 1).front();
    r.char_id = "ox";
    r.components.push_back({"a", std::array<double, 4>{0.1, 0.1, 0.5, 0.5}, ""});
    r.components.push_back({"b", std::array<double, 4>{0.6, 0.1, 0.2, 0.5}, ""});
    try {
      validate_record(r);
      FAIL("expected a data error");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("'ox'") != std::string::npos);
      CHECK(msg.find("component 1") != std::string::npos);
    }
  }
  SUBCASE("adjacency must be square, symmetric, zero-diagonal") {
    AnnotationRecord r = counted_records(1, 1).front();
    r.components = {{"a", std::nullopt, ""}, {"b", std::nullopt, ""}};
    r.component_adjacency = std::vector<std::vector<int>>{{0, 1}, {0, 0}};
    CHECK_THROWS_AS(validate_record(r), DataError);
    r.component_adjacency = std::vector<std::vector<int>>{{1, 1}, {1, 0}};
    CHECK_THROWS_AS(validate_record(r), DataError);
    r.component_adjacency = std::vector<std::vector<int>>{{0, 1}};
    CHECK_THROWS_AS(validate_record(r), DataError);
    r.component_adjacency = std::vector<std::vector<int>>{{0, 1}, {1, 0}};
    CHECK_NOTHROW(validate_record(r));
  }
  SUBCASE("no images") {
    AnnotationRecord r = counted_records(1, 0).front();
    CHECK_THROWS_AS(validate_record(r), DataError);
  }
  SUBCASE("parse errors carry a position") {
    try {
      parse_annotations("{\"oraclesem-schema\": 1, \"records\": [", "broken.json");
      FAIL("expected a data error");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("broken.json") != std::string::npos);
      CHECK(msg.find("byte") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_annotations(R"({"oraclesem-schema": 2, "records": []})"), DataError);
    CHECK_THROWS_AS(parse_annotations(R"([])"), DataError);
  }
}

TEST_CASE("datasets on disk") {
  TempDir dir("dataset");
  const auto chars = synth_generate(SynthSpec{}, 3, 2);
  write_synth(dir.path, chars);
  const Dataset ds = load_dataset(dir.path);
  CHECK(ds.records.size() == 3);
  CHECK(ds.num_images() == 6);
  CHECK(read_pgm(ds.image_path(1, 1)).pixels == chars[1].glyphs[1].image.pixels);
  CHECK(load_dataset(dir.path / kAnnotationFile).records == ds.records);

  fs::remove(ds.image_path(2, 0));
  try {
    load_dataset(dir.path);
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(chars[2].record.images[0]) != std::string::npos);
  }
  CHECK_THROWS_AS(load_dataset(dir.path / "nowhere"), DataError);
}

TEST_CASE("PGM images") {
  Rng rng(5);
  GlyphImage img = GlyphImage::blank(kImageSide);
  for (double& p : img.pixels) p = static_cast<double>(rng.below(256)) / 255.0;

  SUBCASE("random canvas round-trips exactly in both encodings") {
    CHECK(parse_pgm(rasterize_pgm(img, PgmFormat::Binary)).pixels == img.pixels);
    CHECK(parse_pgm(rasterize_pgm(img, PgmFormat::Ascii)).pixels == img.pixels);
  }
  SUBCASE("white canvas gives an all-255 payload") {
    GlyphImage white = GlyphImage::blank(kImageSide);
    std::fill(white.pixels.begin(), white.pixels.end(), 1.0);
    const std::string bytes = rasterize_pgm(white, PgmFormat::Binary);
    const std::string payload = bytes.substr(bytes.size() - kImageSide * kImageSide);
    CHECK(std::all_of(payload.begin(), payload.end(), [](char c) { return static_cast<unsigned char>(c) == 255; }));
  }
  SUBCASE("hand-written ascii file") {
    const GlyphImage g = parse_pgm("P2\n# comment\n2 2\n255\n0 255\n51 0\n", 2);
    CHECK(g.pixels == std::vector<double>{0.0, 1.0, 0.2, 0.0});
  }
  SUBCASE("malformed inputs") {
    CHECK_THROWS_AS(parse_pgm("P3\n2 2\n255\n0 0 0 0\n", 2), DataError);
    CHECK_THROWS_AS(parse_pgm("P2\n2 2\n100\n0 0 0 0\n", 2), DataError);
    CHECK_THROWS_AS(parse_pgm("P2\n2 2\n255\n0 0 0 0\n", 64), DataError);
    CHECK_THROWS_AS(parse_pgm("P2\n2 2\n255\n0 0 0\n", 2), DataError);
    CHECK_THROWS_AS(parse_pgm("P2\n2 2\n255\n0 0 0 300\n", 2), DataError);
    std::string bin = rasterize_pgm(img, PgmFormat::Binary);
    bin.pop_back();
    CHECK_THROWS_AS(parse_pgm(bin), DataError);
  }
  SUBCASE("files") {
    TempDir dir("pgm");
    write_pgm(dir.path / "a.pgm", img, PgmFormat::Ascii);
    CHECK(read_pgm(dir.path / "a.pgm").pixels == img.pixels);
    CHECK_THROWS_AS(read_pgm(dir.path / "b.pgm"), DataError);
  }
}

TEST_CASE("splits") {
  SUBCASE("instance split counts") {
    const auto records = counted_records(20, 10);
    const DatasetSplit s = split_dataset(records, SplitMode::Instance, 3);
    CHECK(s.train.size() == 180);
    CHECK(s.test.size() == 20);
    std::set<std::size_t> train_chars, test_chars;
    for (const auto& r : s.train) train_chars.insert(r.record);
    for (const auto& r : s.test) test_chars.insert(r.record);
    CHECK(train_chars.size() == 20);
    CHECK(test_chars.size() == 20);
  }
  SUBCASE("disjointness over many seeds") {
    const auto records = counted_records(13, 7);
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      for (SplitMode mode : {SplitMode::Instance, SplitMode::Character}) {
        const DatasetSplit s = split_dataset(records, mode, seed);
        std::set<SampleRef> train(s.train.begin(), s.train.end());
        std::set<SampleRef> test(s.test.begin(), s.test.end());
        REQUIRE(train.size() + test.size() == 91);
        for (const auto& t : test) REQUIRE(train.count(t) == 0);
        if (mode == SplitMode::Character) {
          std::set<std::size_t> train_chars;
          for (const auto& r : s.train) train_chars.insert(r.record);
          for (const auto& r : s.test) REQUIRE(train_chars.count(r.record) == 0);
          REQUIRE(s.test.size() == 7);
        } else {
          REQUIRE(s.test.size() == 13);
        }
      }
    }
  }
  SUBCASE("deterministic given the seed") {
    const auto records = counted_records(12, 9);
    const DatasetSplit a = split_dataset(records, SplitMode::Instance, 8);
    const DatasetSplit b = split_dataset(records, SplitMode::Instance, 8);
    CHECK(a.train == b.train);
    CHECK(a.test == b.test);
  }
  SUBCASE("single-image characters stay in training") {
    auto records = counted_records(12, 2);
    records[0].images.resize(1);
    const DatasetSplit s = split_dataset(records, SplitMode::Instance, 1);
    CHECK(std::none_of(s.test.begin(), s.test.end(), [](const SampleRef& r) { return r.record == 0; }));
  }
  SUBCASE("too small") {
    CHECK_THROWS_AS(split_dataset(counted_records(3, 3), SplitMode::Instance, 1), SizingError);
    CHECK_THROWS_AS(split_dataset(counted_records(9, 10), SplitMode::Character, 1), SizingError);
  }
  SUBCASE("mode names") {
    CHECK(parse_split_mode("character") == SplitMode::Character);
    CHECK(std::string(split_mode_name(SplitMode::Instance)) == "instance");
    CHECK_THROWS_AS(parse_split_mode("random"), ConfigError);
  }
}

TEST_CASE("vocabulary and targets") {
  const auto chars = synth_generate(SynthSpec{}, 4, 1);
  std::vector<AnnotationRecord> records;
  for (const auto& c : chars) records.push_back(c.record);
  const Vocabulary vocab = Vocabulary::build(records);
  CHECK(vocab.chars.size() == 4);
  CHECK(std::is_sorted(vocab.categories.begin(), vocab.categories.end()));
  CHECK(std::is_sorted(vocab.semantic.begin(), vocab.semantic.end()));
  const SampleTarget t = make_target(records[2], vocab);
  CHECK(t.char_label == 2);
  CHECK(t.components.size() == 2);
  REQUIRE(t.adjacency);
  CHECK(*t.adjacency == std::vector<double>{0, 1, 1, 0});
  CHECK(t.semantic_active.size() == vocab.semantic.size());
  for (const auto& tag : records[2].semantic_tags) CHECK(t.semantic_active[*vocab.semantic_index(tag)] == 1.0);

  AnnotationRecord stranger = records[0];
  stranger.char_id = "unknown";
  CHECK_THROWS_AS(make_target(stranger, vocab), DataError);
  records.push_back(records[0]);
  CHECK_THROWS_AS(Vocabulary::build(records), DataError);
}

TEST_CASE("synthetic glyphs") {
  SUBCASE("distinct characters with full ground truth") {
    const auto chars = synth_generate(SynthSpec{}, 30, 2);
    std::set<std::string> combos, ids;
    for (const auto& c : chars) {
      combos.insert(c.record.pictographic_description);
      ids.insert(c.record.char_id);
      CHECK_NOTHROW(validate_record(c.record));
      CHECK(c.glyphs.size() == 2);
      CHECK(c.record.images.size() == 2);
      CHECK(c.record.component_adjacency == std::vector<std::vector<int>>{{0, 1}, {1, 0}});
      for (const auto& comp : c.record.components) CHECK(comp.bbox.has_value());
      // Tags are exactly the motif names.
      std::set<std::string> motifs;
      for (const auto& comp : c.record.components) motifs.insert(comp.category);
      CHECK(std::set<std::string>(c.record.semantic_tags.begin(), c.record.semantic_tags.end()) == motifs);
      for (const auto& m : motifs)
        CHECK(std::find(kMotifs.begin(), kMotifs.end(), m) != kMotifs.end());
    }
    CHECK(combos.size() == 30);
    CHECK(ids.size() == 30);
  }
  SUBCASE("bounding boxes cover the component ink") {
    const auto chars = synth_generate(SynthSpec{}, 10, 10);
    std::size_t inside = 0, total = 0;
    double worst = 1.0;
    for (const auto& c : chars)
      for (const auto& g : c.glyphs)
        for (std::size_t k = 0; k < 2; ++k) {
          const auto [x0, y0, x1, y1] = *c.record.components[k].bbox;
          std::size_t in = 0, all = 0;
          for (std::size_t r = 0; r < kImageSide; ++r)
            for (std::size_t col = 0; col < kImageSide; ++col) {
              if (!g.ink[k][r * kImageSide + col]) continue;
              ++all;
              const double x = (static_cast<double>(col) + 0.5) / kImageSide;
              const double y = (static_cast<double>(r) + 0.5) / kImageSide;
              in += x >= x0 && x <= x1 && y >= y0 && y <= y1;
            }
          REQUIRE(all > 0);
          inside += in;
          total += all;
          worst = std::min(worst, static_cast<double>(in) / static_cast<double>(all));
        }
    INFO("worst component coverage " << worst);
    CHECK(static_cast<double>(inside) / static_cast<double>(total) >= 0.95);
    CHECK(worst >= 0.95);
  }
  SUBCASE("deterministic rendering") {
    const auto a = synth_generate(SynthSpec::no_jitter(4), 1, 1);
    const auto b = synth_generate(SynthSpec::no_jitter(4), 1, 1);
    CHECK(rasterize_pgm(a[0].glyphs[0].image) == rasterize_pgm(b[0].glyphs[0].image));
    CHECK(a[0].record == b[0].record);
    const auto c = synth_generate(SynthSpec{}, 5, 3);
    const auto d = synth_generate(SynthSpec{}, 5, 3);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(c[i].glyphs[j].image.pixels == d[i].glyphs[j].image.pixels);
  }
  SUBCASE("jittered copies differ") {
    const auto a = synth_generate(SynthSpec{}, 1, 2);
    CHECK(a[0].glyphs[0].image.pixels != a[0].glyphs[1].image.pixels);
  }
  SUBCASE("sizing and parameter errors") {
    CHECK(synth_capacity() == 75);
    CHECK_NOTHROW(synth_generate(SynthSpec{}, 75, 1));
    CHECK_THROWS_AS(synth_generate(SynthSpec{}, 76, 1), SizingError);
    CHECK_THROWS_AS(synth_generate(SynthSpec{}, 2, 0), SizingError);
    SynthSpec wild;
    wild.max_rotation = 45;
    CHECK_THROWS_AS(synth_generate(wild, 2, 1), ConfigError);
  }
  SUBCASE("written datasets validate") {
    TempDir dir("synth");
    write_synth(dir.path, synth_generate(SynthSpec{}, 16, 2));
    const Dataset ds = load_dataset(dir.path);
    CHECK(ds.num_images() == 32);
  }
}

}  // TEST_SUITE
