#include "oraclesage/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "oraclesage/errors.hpp"

namespace oraclesage {

namespace fs = std::filesystem;

Model::Model(const ModelConfig& config, const ModelVocab& vocab, std::uint64_t seed)
    : config_(config), vocab_(vocab) {
  config_.validate();
  Rng rng(seed);
  hvsu_ = Hvsu(store_, config_, rng);
  gsrf_ = Gsrf(store_, config_, vocab.semantic, vocab.chars, vocab.categories, rng);
}

Model::Output Model::forward(const GlyphImage& image, Mode mode, Rng& rng, AttentionProbe* probe) const {
  return forward_from_visual(hvsu_.encoder().encode(image, probe), mode, rng, probe);
}

Model::Output Model::forward_from_visual(Tensor visual, Mode mode, Rng& rng, AttentionProbe* probe) const {
  Output out;
  out.hvsu = hvsu_.forward_from_visual(std::move(visual), mode, rng, probe);
  std::vector<Tensor> rows;
  for (const auto& level : out.hvsu.pyramid.levels) rows.push_back(mean_rows(level.features));
  if (out.hvsu.has_pooled_queries) rows.push_back(out.hvsu.pooled_queries);
  out.visual_nodes = concat(rows, 0);
  const std::size_t side = out.hvsu.pyramid.levels.front().side;
  out.initial = gsrf_.build_graph(out.visual_nodes, out.hvsu.fused.per_component, out.hvsu.regions, side);
  out.graph = gsrf_.reason(out.initial, &out.before_last);
  out.readout = gsrf_.readout(out.graph);
  return out;
}

// ---------------------------------------------------------------------------
// Snapshots

namespace {

constexpr char kMagic[4] = {'O', 'S', 'G', '1'};

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    if (bytes_.size() - pos_ < sizeof(T)) throw DataError(std::string("snapshot truncated reading ") + what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw DataError(std::string("snapshot truncated reading ") + what);
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string snapshot_bytes(const ParameterStore& store) {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store.items()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const auto& shape = p.tensor.shape();
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t e : shape) put_le<std::uint64_t>(out, e);
    for (double v : p.tensor.values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

void write_snapshot(const fs::path& path, const ParameterStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write snapshot " + path.string());
  const std::string bytes = snapshot_bytes(store);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

void load_snapshot_bytes(std::string_view bytes, ParameterStore& store) {
  Reader in(bytes);
  if (in.take(4, "magic") != std::string_view(kMagic, 4)) throw DataError("not a parameter snapshot (bad magic)");
  const std::uint32_t count = in.get<std::uint32_t>("entry count");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = in.get<std::uint32_t>("name length");
    const std::string name(in.take(len, "name"));
    const std::uint32_t rank = in.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw DataError("snapshot parameter '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& e : shape) e = in.get<std::uint64_t>("extent");
    Parameter* p = store.find(name);
    if (!p) throw DataError("snapshot parameter '" + name + "' does not exist in the model");
    if (p->tensor.shape() != shape) {
      throw DataError("snapshot parameter '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                      shape_string(p->tensor.shape()));
    }
    auto values = p->tensor.mutable_values();
    for (double& v : values) v = std::bit_cast<double>(in.get<std::uint64_t>("values"));
    seen.insert(name);
  }
  if (!in.done()) throw DataError("snapshot has trailing bytes");
  for (const auto& p : store.items()) {
    if (!seen.count(p.name)) throw DataError("snapshot is missing parameter '" + p.name + "'");
  }
}

void load_snapshot(const fs::path& path, ParameterStore& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open snapshot " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  load_snapshot_bytes(ss.str(), store);
}

std::string model_card_json(const ModelCard& card) {
  nlohmann::ordered_json j;
  j["config"] = config_to_text(card.config);
  j["chars"] = card.vocab.chars;
  j["categories"] = card.vocab.categories;
  j["semantic"] = card.vocab.semantic;
  return j.dump(2) + "\n";
}

ModelCard parse_model_card(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelCard card;
    card.config = parse_config(j.at("config").get<std::string>());
    card.vocab.chars = j.at("chars").get<std::vector<std::string>>();
    card.vocab.categories = j.at("categories").get<std::vector<std::string>>();
    card.vocab.semantic = j.at("semantic").get<std::vector<std::string>>();
    return card;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model card: ") + e.what());
  }
}

fs::path model_card_path(const fs::path& snapshot) {
  fs::path p = snapshot;
  p += ".json";
  return p;
}

}  // namespace oraclesage
