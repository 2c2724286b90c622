#include <cstring>
#include <filesystem>
#include <unistd.h>

#include "doctest.h"
#include "oraclesage/config.hpp"
#include "oraclesage/errors.hpp"
#include "oraclesage/model.hpp"
#include "support.hpp"

using namespace oraclesage;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

Vocabulary small_vocab() {
  Vocabulary v;
  v.chars = {"a", "b", "c"};
  v.categories = {"arc", "box"};
  v.semantic = {"arc", "box", "sun"};
  return v;
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("configuration text") {
  SUBCASE("defaults") {
    const Config c = parse_config("");
    CHECK(c.model.width == 64);
    CHECK(c.train.phases[2].learning_rate == 5e-6);
    CHECK(c.train.weights.struct_weight > 0.0);
  }
  SUBCASE("values, comments, and whitespace") {
    const Config c = parse_config("# header\n d = 32 \nheads=4  # trailing\n\nphase2_trainable = gsrf.*, hvsu.*\n"
                                  "use_query_pool = true\ntau_add = 0.7\n");
    CHECK(c.model.width == 32);
    CHECK(c.model.reasoning_heads == 4);
    CHECK(c.model.use_query_pool);
    CHECK(c.model.tau_add == 0.7);
    CHECK(c.train.phases[1].trainable == std::vector<std::string>{"gsrf.*", "hvsu.*"});
  }
  SUBCASE("unknown keys and bad values name the key") {
    CHECK(error_of([] { parse_config("width = 3\n"); }).find("width") != std::string::npos);
    CHECK_THROWS_AS(parse_config("width = 3\n"), ConfigError);
    CHECK(error_of([] { parse_config("d = many\n"); }).find("'d'") != std::string::npos);
    CHECK_THROWS_AS(parse_config("seed = -1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("dropout\n"), ConfigError);
  }
  SUBCASE("validation") {
    CHECK_THROWS_AS(parse_config("dropout = 1.0\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("d = 30\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("tau_add = 0.2\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("patch_size = 7\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("split_mode = random\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("lambda2 = -1\n"), ConfigError);
  }
  SUBCASE("the echo parses back to the same configuration") {
    const Config c = parse_config("d = 16\nheads = 2\nencoder_heads = 4\nadapter_heads = 4\nspatial_heads = 4\n"
                                  "phase1_lr = 0.00123456789\nbeta = 0.3\nseed = 99\ndataset = /tmp/x\n");
    const std::string text = config_to_text(c);
    CHECK(config_to_text(parse_config(text)) == text);
    CHECK(text.find("phase1_lr = 0.00123456789") != std::string::npos);
    // Every documented key appears once in the echo.
    for (const auto& [key, doc] : config_keys()) {
      CHECK(!doc.empty());
      const bool listed = text.find("\n" + key + " = ") != std::string::npos || text.rfind(key + " = ", 0) == 0;
      CHECK_MESSAGE(listed, key);
    }
  }
}

TEST_CASE("phase patterns") {
  CHECK(default_phase_patterns(1, 4) == std::vector<std::string>{"hvsu.*", "gsrf.*"});
  const auto p2 = default_phase_patterns(2, 4);
  CHECK(std::find(p2.begin(), p2.end(), "encoder.blocks.3.*") != p2.end());
  CHECK(std::find(p2.begin(), p2.end(), "encoder.blocks.2.*") != p2.end());
  CHECK(std::find(p2.begin(), p2.end(), "encoder.blocks.1.*") == p2.end());
  CHECK(default_phase_patterns(3, 4) == std::vector<std::string>{"*"});
  Config c;
  c.train.phases[0].trainable = {"gsrf.head.*"};
  CHECK(phase_patterns(c, 1) == std::vector<std::string>{"gsrf.head.*"});

  ParameterStore store;
  store.zeros("encoder.blocks.0.w", {1});
  store.zeros("gsrf.x", {1});
  const std::vector<std::string> bad{"nothing.*"};
  CHECK(error_of([&] { store.set_trainable(bad); }).find("nothing.*") != std::string::npos);
  CHECK(glob_match("encoder.*.w", "encoder.blocks.0.w"));
  CHECK(glob_match("gsrf.?", "gsrf.x"));
  CHECK_FALSE(glob_match("gsrf.?", "gsrf.xy"));
}

TEST_CASE("parameter snapshots") {
  const Config cfg = support::small_config();
  const Model a(cfg.model, ModelVocab::of(small_vocab()), 1);
  Model b(cfg.model, ModelVocab::of(small_vocab()), 2);
  const std::string bytes = snapshot_bytes(a.params());
  CHECK(bytes.substr(0, 4) == "OSG1");
  std::uint32_t count = 0;
  std::memcpy(&count, bytes.data() + 4, 4);
  CHECK(count == a.params().size());

  SUBCASE("round trip") {
    load_snapshot_bytes(bytes, b.params());
    CHECK(snapshot_bytes(b.params()) == bytes);
    const auto dir = std::filesystem::temp_directory_path() / ("oraclesage_snap_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    write_snapshot(dir / "m.bin", a.params());
    Model c(cfg.model, ModelVocab::of(small_vocab()), 3);
    load_snapshot(dir / "m.bin", c.params());
    CHECK(snapshot_bytes(c.params()) == bytes);
    CHECK(model_card_path(dir / "m.bin") == dir / "m.bin.json");
    std::filesystem::remove_all(dir);
  }
  SUBCASE("errors name the parameter") {
    CHECK_THROWS_AS(load_snapshot_bytes("XXXX", b.params()), DataError);
    CHECK_THROWS_AS(load_snapshot_bytes(bytes.substr(0, bytes.size() - 3), b.params()), DataError);
    CHECK_THROWS_AS(load_snapshot_bytes(bytes + "x", b.params()), DataError);

    Config wider = cfg;
    wider.model.ffn_hidden = 24;
    Model other(wider.model, ModelVocab::of(small_vocab()), 1);
    const std::string msg = error_of([&] { load_snapshot_bytes(bytes, other.params()); });
    CHECK(msg.find("ffn") != std::string::npos);

    ParameterStore partial;
    Rng rng(1);
    partial.glorot("gsrf.attn.w", 8, 8, rng);
    CHECK(error_of([&] { load_snapshot_bytes(snapshot_bytes(partial), b.params()); }).find("missing") !=
          std::string::npos);
    partial.zeros("stray", {2});
    CHECK(error_of([&] { load_snapshot_bytes(snapshot_bytes(partial), b.params()); }).find("stray") !=
          std::string::npos);
  }
  SUBCASE("model card") {
    Config c2 = cfg;
    c2.train.seed = 41;
    const ModelCard card{c2, small_vocab()};
    const ModelCard back = parse_model_card(model_card_json(card));
    CHECK(config_to_text(back.config) == config_to_text(c2));
    CHECK(back.vocab.chars == card.vocab.chars);
    CHECK(back.vocab.categories == card.vocab.categories);
    CHECK(back.vocab.semantic == card.vocab.semantic);
    CHECK_THROWS_AS(parse_model_card("{"), DataError);
  }
}

TEST_CASE("model construction") {
  const Config cfg = support::small_config();
  const Model a(cfg.model, ModelVocab::of(small_vocab()), 5);
  const Model b(cfg.model, ModelVocab::of(small_vocab()), 5);
  CHECK(snapshot_bytes(a.params()) == snapshot_bytes(b.params()));
  for (const auto& p : a.params().items()) {
    const bool known = p.name.rfind("encoder.", 0) == 0 || p.name.rfind("hvsu.", 0) == 0 || p.name.rfind("gsrf.", 0) == 0;
    CHECK_MESSAGE(known, p.name);
  }
  CHECK(a.params().find("encoder.blocks.2.mha.w_q") != nullptr);
  Rng rng(0);
  const auto out = a.forward(GlyphImage::blank(64), Mode::Eval, rng);
  CHECK(out.readout.char_logits.shape() == Shape{1, 3});
  CHECK(out.graph.num_semantic == 3);
  CHECK_THROWS_AS(a.forward(GlyphImage::blank(32), Mode::Eval, rng), DataError);
  ModelConfig bad = cfg.model;
  bad.width = 7;
  CHECK_THROWS_AS(Model(bad, ModelVocab::of(small_vocab()), 1), ConfigError);
}

}  // TEST_SUITE
