#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include "oraclesage/errors.hpp"
#include "oraclesage/gradcheck.hpp"
#include "oraclesage/train.hpp"

namespace py = pybind11;
using namespace oraclesage;

namespace {

GlyphImage to_image(py::array_t<double, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 2 || a.shape(0) != a.shape(1)) throw DataError("image must be a square 2-D array");
  const auto side = static_cast<std::size_t>(a.shape(0));
  GlyphImage g{side, side, std::vector<double>(a.data(), a.data() + side * side)};
  return g;
}

py::array_t<double> from_image(const GlyphImage& g) {
  py::array_t<double> out({g.height, g.width});
  std::copy(g.pixels.begin(), g.pixels.end(), out.mutable_data());
  return out;
}

std::vector<double> softmax_of(std::span<const double> z) {
  double hi = z[0];
  for (double v : z) hi = std::max(hi, v);
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(z[i] - hi);
  for (double& v : p) v /= s;
  return p;
}

py::dict report_dict(const GradcheckReport& r) {
  py::dict d;
  d["name"] = r.name;
  d["checked"] = r.checked;
  d["worst"] = r.worst;
  d["worst_at"] = r.worst_at;
  d["tolerance"] = r.tolerance;
  d["passed"] = r.passed();
  return d;
}

/// A trained snapshot plus its model card, ready for inference.
class Predictor {
 public:
  explicit Predictor(const std::string& snapshot) {
    std::ifstream in(model_card_path(snapshot), std::ios::binary);
    if (!in) throw DataError("model card not found: " + model_card_path(snapshot).string());
    std::stringstream text;
    text << in.rdbuf();
    card_ = parse_model_card(text.str());
    model_ = std::make_unique<Model>(card_.config.model, ModelVocab::of(card_.vocab), card_.config.train.seed);
    load_snapshot(snapshot, model_->params());
  }

  py::dict predict(py::array_t<double, py::array::c_style | py::array::forcecast> image, std::size_t top) const {
    const Model::Output out = run(image);
    const auto probs = softmax_of(out.readout.char_logits.values());
    py::list ranked;
    for (std::size_t c : top_k(out.readout.char_logits.values(), top))
      ranked.append(py::make_tuple(card_.vocab.chars[c], probs[c]));
    py::list components;
    const Tensor& comp = out.readout.comp_logits;
    const std::size_t side = out.hvsu.pyramid.levels.front().side;
    for (std::size_t r = 0; r < comp.rows(); ++r) {
      const std::vector<double> row(comp.values().begin() + static_cast<std::ptrdiff_t>(r * comp.cols()),
                                    comp.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * comp.cols()));
      const std::size_t best = top_k(row, 1).front();
      const auto box = out.hvsu.regions[r].normalized_box(side);
      py::dict d;
      d["box"] = py::make_tuple(box[0], box[1], box[2], box[3]);
      d["category"] = card_.vocab.categories[best];
      d["probability"] = softmax_of(row)[best];
      components.append(d);
    }
    py::list tags;
    const Tensor& sem = out.readout.sem_logits;
    for (std::size_t k = 0; k < sem.numel(); ++k)
      if (1.0 / (1.0 + std::exp(-sem[k])) > 0.5) tags.append(card_.vocab.semantic[k]);
    py::dict result;
    result["top"] = ranked;
    result["components"] = components;
    result["semantic_tags"] = tags;
    return result;
  }

  std::string graph_dot(py::array_t<double, py::array::c_style | py::array::forcecast> image) const {
    return graph_to_dot(run(image).graph, card_.vocab.semantic);
  }

  std::vector<std::string> characters() const { return card_.vocab.chars; }
  std::string config_text() const { return config_to_text(card_.config); }

 private:
  Model::Output run(py::array_t<double, py::array::c_style | py::array::forcecast> image) const {
    const GlyphImage g = to_image(std::move(image));
    g.validate(card_.config.model.input_size);
    NoGradScope no_grad;
    Rng rng(card_.config.train.seed);
    return model_->forward(g, Mode::Eval, rng);
  }

  ModelCard card_;
  std::unique_ptr<Model> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Glyph recognition core: synthetic data, inference, and gradient checks";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<SizingError>(m, "SizingError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "synth",
      [](const std::string& out, std::size_t chars, std::size_t imgs, std::uint64_t seed, bool jitter) {
        const SynthSpec spec = jitter ? SynthSpec{seed} : SynthSpec::no_jitter(seed);
        write_synth(out, synth_generate(spec, chars, imgs));
      },
      py::arg("out"), py::arg("chars") = 16, py::arg("imgs") = 12, py::arg("seed") = 7, py::arg("jitter") = true,
      "Write a synthetic dataset (annotations.json and images/) under `out`.");

  m.def(
      "read_pgm", [](const std::string& path) { return from_image(read_pgm(path, 0)); }, py::arg("path"),
      "Read a P2/P5 PGM as a float array in [0, 1].");
  m.def(
      "write_pgm",
      [](const std::string& path, py::array_t<double, py::array::c_style | py::array::forcecast> image, bool ascii) {
        write_pgm(path, to_image(std::move(image)), ascii ? PgmFormat::Ascii : PgmFormat::Binary);
      },
      py::arg("path"), py::arg("image"), py::arg("ascii") = false);

  m.def("default_config", [] { return config_to_text(Config{}); }, "Default configuration as key = value text.");
  m.def(
      "normalize_config", [](const std::string& text) { return config_to_text(parse_config(text)); },
      py::arg("text"), "Parse and validate configuration text; returns the full effective configuration.");

  m.def("op_names", &op_names);
  m.def(
      "gradcheck_op",
      [](const std::string& name, std::uint64_t seed) {
        GradcheckOptions opt;
        opt.seed = seed;
        return report_dict(check_op(name, opt));
      },
      py::arg("name"), py::arg("seed") = 1);

  m.def(
      "evaluate",
      [](const std::string& snapshot, const std::string& data) {
        std::ifstream in(model_card_path(snapshot), std::ios::binary);
        std::stringstream text;
        text << in.rdbuf();
        const ModelCard card = parse_model_card(text.str());
        Model model(card.config.model, ModelVocab::of(card.vocab), card.config.train.seed);
        load_snapshot(snapshot, model.params());
        const Dataset ds = load_dataset(data);
        std::vector<SampleRef> refs;
        for (std::size_t r = 0; r < ds.records.size(); ++r)
          for (std::size_t i = 0; i < ds.records[r].images.size(); ++i) refs.push_back({r, i});
        const EvalMetrics em = evaluate(model, load_samples(ds, card.vocab, refs));
        py::dict d;
        d["count"] = em.count;
        d["top1"] = em.top1;
        d["top10"] = em.top10;
        d["top_all"] = em.top_all;
        return d;
      },
      py::arg("snapshot"), py::arg("data"), "Top-k accuracy of a snapshot over every image of a dataset.");

  py::class_<Predictor>(m, "Predictor")
      .def(py::init<const std::string&>(), py::arg("snapshot"))
      .def("predict", &Predictor::predict, py::arg("image"), py::arg("top") = 10)
      .def("graph_dot", &Predictor::graph_dot, py::arg("image"))
      .def_property_readonly("characters", &Predictor::characters)
      .def_property_readonly("config", &Predictor::config_text);
}
