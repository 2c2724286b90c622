// Command-line front end: synth, train, eval, infer, gradcheck, config.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or data error,
// 3 numeric divergence.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "oraclesage/errors.hpp"
#include "oraclesage/gradcheck.hpp"
#include "oraclesage/train.hpp"

namespace fs = std::filesystem;
using namespace oraclesage;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;

constexpr const char* kSnapshotName = "model.osg";

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<double> softmax_values(std::span<const double> logits) {
  double hi = logits[0];
  for (double v : logits) hi = std::max(hi, v);
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(logits[i] - hi);
  for (double& v : p) v /= total;
  return p;
}

json metrics_json(const EvalMetrics& m) {
  return {{"count", m.count}, {"top1", m.top1}, {"top10", m.top10}, {"top_all", m.top_all}};
}

struct LoadedModel {
  ModelCard card;
  std::unique_ptr<Model> model;
};

LoadedModel load_model(const fs::path& snapshot) {
  const fs::path card_path = model_card_path(snapshot);
  std::ifstream in(card_path, std::ios::binary);
  if (!in) throw DataError("model card not found: " + card_path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  LoadedModel lm{parse_model_card(text), nullptr};
  lm.model = std::make_unique<Model>(lm.card.config.model, ModelVocab::of(lm.card.vocab), lm.card.config.train.seed);
  load_snapshot(snapshot, lm.model->params());
  return lm;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t chars = 16;
  std::size_t imgs = 12;
  std::uint64_t seed = 7;
  bool no_jitter = false;
};

int run_synth(const SynthArgs& a) {
  const SynthSpec spec = a.no_jitter ? SynthSpec::no_jitter(a.seed) : SynthSpec{a.seed};
  const auto chars = synth_generate(spec, a.chars, a.imgs);
  write_synth(a.out, chars);
  std::printf("wrote %zu records and %zu images to %s\n", chars.size(), chars.size() * a.imgs, a.out.c_str());
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  Config cfg = a.config.empty() ? Config{} : load_config(a.config);
  if (!a.data.empty()) cfg.dataset = a.data;
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.validate();
  if (cfg.dataset.empty()) throw ConfigError("no dataset: pass --data or set 'dataset'");
  if (cfg.output_dir.empty()) throw ConfigError("no output directory: pass --out or set 'output_dir'");

  const Dataset ds = load_dataset(cfg.dataset);
  const Vocabulary vocab = Vocabulary::build(ds.records);
  const DatasetSplit split = split_dataset(ds.records, parse_split_mode(cfg.train.split_mode), cfg.train.seed);
  const auto train = load_samples(ds, vocab, split.train);
  const auto test = load_samples(ds, vocab, split.test);

  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_text(out / "config.txt", config_to_text(cfg));

  Model model(cfg.model, ModelVocab::of(vocab), cfg.train.seed);
  Trainer trainer(model, cfg);
  std::ofstream csv(out / "metrics.csv", std::ios::binary);
  if (!csv) throw DataError("cannot write " + (out / "metrics.csv").string());
  csv << metrics_csv_header();
  std::printf("training on %zu images (%zu held out), %zu characters, %zu parameters\n", train.size(), test.size(),
              vocab.chars.size(), model.params().total_values());
  trainer.run(train, [&](const EpochMetrics& m) {
    csv << metrics_csv_row(m);
    csv.flush();
    if (!a.quiet) {
      std::printf("epoch %3zu  phase %d  lr %.1e  loss %.4f  top1 %.3f\n", m.epoch, m.phase, m.lr, m.total, m.top1);
      std::fflush(stdout);
    }
  });
  csv.close();

  const fs::path snapshot = out / kSnapshotName;
  write_snapshot(snapshot, model.params());
  write_text(model_card_path(snapshot), model_card_json({cfg, vocab}));

  const EvalMetrics train_eval = evaluate(model, train, a.threads);
  json summary{{"train", metrics_json(train_eval)},
               {"split_mode", cfg.train.split_mode},
               {"seed", cfg.train.seed},
               {"characters", vocab.chars.size()},
               {"snapshot", snapshot.string()}};
  std::printf("train  top1 %.4f  top10 %.4f  top|C| %.4f\n", train_eval.top1, train_eval.top10, train_eval.top_all);
  if (!test.empty()) {
    const EvalMetrics test_eval = evaluate(model, test, a.threads);
    summary["test"] = metrics_json(test_eval);
    std::printf("test   top1 %.4f  top10 %.4f  top|C| %.4f\n", test_eval.top1, test_eval.top10, test_eval.top_all);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  summary["runtime_seconds"] = seconds;
  write_text(out / "summary.json", summary.dump(2) + "\n");
  std::printf("finished in %.1f s; outputs in %s\n", seconds, out.string().c_str());
  return kOk;
}

struct EvalArgs {
  std::string model;
  std::string data;
  std::string split = "test";
  std::string out;
  std::size_t threads = 1;
};

int run_eval(const EvalArgs& a) {
  const LoadedModel lm = load_model(a.model);
  const Config& cfg = lm.card.config;
  const std::string data = a.data.empty() ? cfg.dataset : a.data;
  if (data.empty()) throw ConfigError("no dataset: pass --data");
  const Dataset ds = load_dataset(data);
  std::vector<SampleRef> refs;
  if (a.split == "all") {
    for (std::size_t r = 0; r < ds.records.size(); ++r)
      for (std::size_t i = 0; i < ds.records[r].images.size(); ++i) refs.push_back({r, i});
  } else {
    const DatasetSplit split = split_dataset(ds.records, parse_split_mode(cfg.train.split_mode), cfg.train.seed);
    refs = a.split == "train" ? split.train : split.test;
  }
  if (refs.empty()) throw DataError("the " + a.split + " split is empty");
  const auto samples = load_samples(ds, lm.card.vocab, refs);
  const EvalMetrics m = evaluate(*lm.model, samples, a.threads);

  std::printf("%s split: %zu images\n", a.split.c_str(), m.count);
  std::printf("top1 %.6f\ntop10 %.6f\ntop|C| %.6f\n", m.top1, m.top10, m.top_all);
  std::printf("%-16s %8s %8s %9s\n", "char", "correct", "total", "accuracy");
  json per_char = json::array();
  for (std::size_t c = 0; c < lm.card.vocab.chars.size(); ++c) {
    if (m.per_char_total[c] == 0) continue;
    const double acc = static_cast<double>(m.per_char_correct[c]) / static_cast<double>(m.per_char_total[c]);
    std::printf("%-16s %8zu %8zu %9.3f\n", lm.card.vocab.chars[c].c_str(), m.per_char_correct[c], m.per_char_total[c],
                acc);
    per_char.push_back(
        {{"char", lm.card.vocab.chars[c]}, {"correct", m.per_char_correct[c]}, {"total", m.per_char_total[c]}});
  }
  if (!a.out.empty()) {
    json doc = metrics_json(m);
    doc["split"] = a.split;
    doc["per_char"] = per_char;
    write_text(a.out, doc.dump(2) + "\n");
  }
  return kOk;
}

struct InferArgs {
  std::string model;
  std::string image;
  std::string graph;
  std::size_t top = 10;
};

int run_infer(const InferArgs& a) {
  const LoadedModel lm = load_model(a.model);
  const Vocabulary& vocab = lm.card.vocab;
  const GlyphImage image = read_pgm(a.image, lm.card.config.model.input_size);
  Rng rng(lm.card.config.train.seed);
  Model::Output out;
  {
    NoGradScope no_grad;
    out = lm.model->forward(image, Mode::Eval, rng);
  }
  const auto probs = softmax_values(out.readout.char_logits.values());
  std::printf("top %zu characters:\n", std::min(a.top, probs.size()));
  std::size_t rank = 1;
  for (std::size_t c : top_k(out.readout.char_logits.values(), a.top))
    std::printf("%3zu  %-16s %.6f\n", rank++, vocab.chars[c].c_str(), probs[c]);

  std::printf("components:\n");
  const Tensor& comp = out.readout.comp_logits;
  const std::size_t side = out.hvsu.pyramid.levels.front().side;
  for (std::size_t r = 0; r < comp.rows(); ++r) {
    const std::vector<double> row(comp.values().begin() + static_cast<std::ptrdiff_t>(r * comp.cols()),
                                  comp.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * comp.cols()));
    const auto p = softmax_values(row);
    const std::size_t best = top_k(row, 1).front();
    const auto box = out.hvsu.regions[r].normalized_box(side);
    std::printf("  region %zu  box (%.3f, %.3f, %.3f, %.3f)  %s %.3f\n", r, box[0], box[1], box[2], box[3],
                vocab.categories[best].c_str(), p[best]);
  }
  std::printf("semantic tags:");
  const Tensor& sem = out.readout.sem_logits;
  bool any = false;
  for (std::size_t k = 0; k < sem.numel(); ++k) {
    if (1.0 / (1.0 + std::exp(-sem[k])) > 0.5) {
      std::printf(" %s", vocab.semantic[k].c_str());
      any = true;
    }
  }
  std::printf("%s\n", any ? "" : " (none)");
  if (!a.graph.empty()) {
    write_text(a.graph, graph_to_dot(out.graph, vocab.semantic));
    std::printf("graph: %zu nodes, %zu edges -> %s\n", out.graph.num_nodes(), out.graph.num_edges(), a.graph.c_str());
  }
  return kOk;
}

struct GradcheckArgs {
  std::vector<std::string> ops;
  bool full = false;
  std::string config;
  double fault = 0.0;
  std::uint64_t seed = 1;
  std::size_t coordinates = 2;
};

int run_gradcheck(const GradcheckArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<GradcheckReport> reports;
  if (a.full) {
    ModelCheckOptions opt;
    if (!a.config.empty()) opt.model = load_config(a.config).model;
    opt.base.seed = a.seed;
    opt.base.fault = a.fault;
    opt.coordinates = a.coordinates;
    reports = check_model(opt);
  } else {
    GradcheckOptions opt;
    opt.seed = a.seed;
    opt.fault = a.fault;
    for (const auto& name : a.ops.empty() ? op_names() : a.ops) reports.push_back(check_op(name, opt));
  }
  std::size_t failed = 0;
  for (const auto& r : reports) {
    failed += !r.passed();
    std::printf("%s  %-36s checked %6zu  worst %.3e  tol %.0e%s%s\n", r.passed() ? "PASS" : "FAIL", r.name.c_str(),
                r.checked, r.worst, r.tolerance, r.worst_at.empty() ? "" : "  at ", r.worst_at.c_str());
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (failed) {
    std::printf("%zu of %zu checks failed (%.1f s)\n", failed, reports.size(), seconds);
    return kVerifyFailed;
  }
  std::printf("all %zu checks passed (%.1f s)\n", reports.size(), seconds);
  return kOk;
}

int run_config(bool describe) {
  if (!describe) {
    std::printf("%s", config_to_text(Config{}).c_str());
    return kOk;
  }
  const std::string text = config_to_text(Config{});
  std::istringstream lines(text);
  std::string line;
  for (const auto& [key, doc] : config_keys()) {
    std::getline(lines, line);
    std::printf("# %s\n%s\n", doc.c_str(), line.c_str());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Glyph recognition with hierarchical visual features and graph reasoning"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Render a synthetic glyph dataset");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--chars", synth.chars, "Number of characters")->capture_default_str();
  s->add_option("--imgs", synth.imgs, "Images per character")->capture_default_str();
  s->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  s->add_flag("--no-jitter", synth.no_jitter, "Disable translation, rotation, stroke, and noise jitter");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train through all three phases");
  t->add_option("--config", train.config, "Config file (key = value)");
  t->add_option("--data", train.data, "Dataset directory or annotation file");
  t->add_option("--out", train.out, "Output directory");
  t->add_option("--seed", train.seed, "Override the config seed");
  t->add_option("--threads", train.threads, "Worker threads for the final evaluation")->capture_default_str();
  t->add_flag("--quiet", train.quiet, "Do not print per-epoch progress");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a snapshot on a dataset split");
  e->add_option("--model", eval.model, "Snapshot file")->required();
  e->add_option("--data", eval.data, "Dataset directory (defaults to the training dataset)");
  e->add_option("--split", eval.split, "train, test, or all")
      ->check(CLI::IsMember({"train", "test", "all"}))
      ->capture_default_str();
  e->add_option("--out", eval.out, "Write metrics JSON here");
  e->add_option("--threads", eval.threads, "Worker threads")->capture_default_str();

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "Recognize one PGM image");
  i->add_option("--model", infer.model, "Snapshot file")->required();
  i->add_option("--image", infer.image, "PGM image")->required();
  i->add_option("--export-graph", infer.graph, "Write the reasoned graph as Graphviz DOT");
  i->add_option("--top", infer.top, "Characters to list")->capture_default_str();

  GradcheckArgs grad;
  auto* g = app.add_subcommand("gradcheck", "Compare tape gradients with central differences");
  auto* op = g->add_option("--op", grad.ops, "Operation name (repeatable); all operations when omitted");
  g->add_flag("--full", grad.full, "Check the whole model on a synthetic glyph")->excludes(op);
  g->add_option("--config", grad.config, "Model config for --full");
  g->add_option("--inject-fault", grad.fault, "Corrupt analytic gradients by this relative amount");
  g->add_option("--seed", grad.seed, "Seed for inputs and probes")->capture_default_str();
  g->add_option("--coordinates", grad.coordinates, "Sampled coordinates per parameter with --full")
      ->capture_default_str();

  bool describe = false;
  auto* c = app.add_subcommand("config", "Print the default configuration");
  c->add_flag("--describe", describe, "Include a description of every key");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*s) return run_synth(synth);
    if (*t) return run_train(train);
    if (*e) return run_eval(eval);
    if (*i) return run_infer(infer);
    if (*g) return run_gradcheck(grad);
    if (*c) return run_config(describe);
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric error: %s\n", err.what());
    return 3;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  }
  return kUsage;
}
