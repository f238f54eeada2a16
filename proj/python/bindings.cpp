#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cvloc/corpus/scene.hpp"
#include "cvloc/encoders/positional.hpp"
#include "cvloc/errors.hpp"
#include "cvloc/explain/explainer.hpp"
#include "cvloc/geoindex/index.hpp"
#include "cvloc/service/engine.hpp"
#include "cvloc/training/loss.hpp"

namespace py = pybind11;
using namespace cvloc;
using numerics::Tensor;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array, got " + std::to_string(a.ndim()) + " dimensions");
  Tensor t({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))});
  std::copy(a.data(), a.data() + a.size(), t.storage().begin());
  return t;
}

Array to_array(const Tensor& t) {
  Array a({t.rows(), t.cols()});
  std::copy(t.storage().begin(), t.storage().end(), a.mutable_data());
  return a;
}

// Wraps an Engine over files produced by the command-line tool.
class Localizer {
 public:
  Localizer(const std::string& checkpoint, const std::string& index, const std::string& corpus_dir,
            const std::string& explainer)
      : engine_(service::load_bundle(checkpoint), geoindex::load_index(index), corpus_dir,
                explain::make_explainer(explainer)) {}

  std::string localize(const std::string& text, double lat, double lon, std::size_t M, std::size_t K, bool explain) {
    service::LocalizeRequest r;
    r.text = text;
    r.prior = {lat, lon};
    r.M = M;
    r.K = K;
    r.explain = explain;
    r.modality = engine_.index().snapshot()->modality;
    return engine_.localize(r).to_json();
  }
  std::string refine(const std::string& session, const std::string& text) { return engine_.refine(session, text).to_json(); }
  std::string rerank(const std::string& session) { return engine_.rerank(session).to_json(); }

 private:
  service::Engine engine_;
};

}  // namespace

PYBIND11_MODULE(_cvloc, m) {
  m.doc() = "Text-query cross-view geo-localization core";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", error);
  py::register_exception<ParameterError>(m, "ParameterError", error);
  py::register_exception<ContractError>(m, "ContractError", error);
  py::register_exception<FormatError>(m, "FormatError", error);
  py::register_exception<service::ServiceError>(m, "ServiceError", error);

  m.def("haversine", [](double lat1, double lon1, double lat2, double lon2) {
    return geoindex::haversine({lat1, lon1}, {lat2, lon2});
  });
  m.def("ground_resolution", &geoindex::ground_resolution, py::arg("lat"), py::arg("zoom") = 20);

  m.def(
      "expand_positional_embedding",
      [](const Array& table, std::size_t rows) { return to_array(encoders::expand_positional_embedding(to_tensor(table), rows)); },
      py::arg("table"), py::arg("rows"));

  m.def(
      "contrastive_loss",
      [](const Array& s, double tau, const std::string& mode) {
        return training::contrastive_loss(to_tensor(s), tau, training::parse_loss_mode(mode));
      },
      py::arg("similarity"), py::arg("tau"), py::arg("mode") = "symmetric_infonce");

  m.def(
      "fuse_scores",
      [](const Array& img, const Array& txt, double w) { return to_array(geoindex::fuse_scores(to_tensor(img), to_tensor(txt), w)); },
      py::arg("image"), py::arg("text"), py::arg("w"));

  // Returns (order as input indices, combined scores or None, reranked).
  m.def(
      "confidence_rerank",
      [](const std::vector<double>& sims, const std::vector<double>& confs, bool force) {
        if (sims.size() != confs.size()) throw DimensionError("similarities and confidences differ in length");
        explain::RankedCandidates in;
        for (std::size_t i = 0; i < sims.size(); ++i) {
          explain::Candidate c;
          c.id = std::to_string(i);
          c.similarity = sims[i];
          c.confidence = confs[i];
          in.items.push_back(c);
        }
        const auto out = explain::confidence_rerank(in, force);
        std::vector<std::size_t> order;
        std::vector<std::optional<double>> combined;
        for (const auto& c : out.items) {
          order.push_back(std::stoul(c.id));
          combined.push_back(c.combined);
        }
        return py::make_tuple(order, combined, out.reranked);
      },
      py::arg("similarities"), py::arg("confidences"), py::arg("force") = false);

  m.def(
      "describe_scene",
      [](std::uint64_t seed, std::size_t distractors) { return corpus::describe_scene(corpus::generate_scene(seed), distractors); },
      py::arg("seed"), py::arg("distractor_clauses") = 0);

  m.def("text_stats_json", [](const std::vector<std::string>& texts) { return corpus::stats_json(corpus::text_stats(texts)); });

  py::class_<Localizer>(m, "Localizer")
      .def(py::init<const std::string&, const std::string&, const std::string&, const std::string&>(),
           py::arg("checkpoint"), py::arg("index"), py::arg("corpus"), py::arg("explainer") = "mock")
      .def("localize_json", &Localizer::localize, py::arg("text"), py::arg("lat"), py::arg("lon"), py::arg("M") = 100,
           py::arg("K") = 5, py::arg("explain") = false, py::call_guard<py::gil_scoped_release>())
      .def("refine_json", &Localizer::refine, py::call_guard<py::gil_scoped_release>())
      .def("rerank_json", &Localizer::rerank, py::call_guard<py::gil_scoped_release>());
}
