#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "advin/eval.hpp"
#include "advin/forge.hpp"
#include "advin/recipe.hpp"
#include "advin/train.hpp"

namespace py = pybind11;
using namespace advin;

namespace {

py::array_t<float> to_numpy(const Tensor& t) {
  py::array_t<float> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.raw(), t.raw() + t.numel(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

// JSON crosses the boundary as text; the Python side wraps it in json.loads.
nlohmann::json parse(const std::string& s) { return nlohmann::json::parse(s); }

}  // namespace

PYBIND11_MODULE(_advin, m) {
  m.doc() = "Adversarially inducing noise: poisons, training and evaluation";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def("parse_fraction", &parse_fraction, py::arg("text"));

  py::class_<LabeledDataset>(m, "Dataset")
      .def(py::init([](const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
                       std::vector<int> labels, std::size_t classes, bool train) {
             return LabeledDataset(from_numpy(images), std::move(labels), classes,
                                   train ? Split::kTrain : Split::kTest);
           }),
           py::arg("images"), py::arg("labels"), py::arg("classes"), py::arg("train") = true)
      .def("__len__", &LabeledDataset::size)
      .def_property_readonly("images", [](const LabeledDataset& d) { return to_numpy(d.images()); })
      .def_property_readonly("labels", &LabeledDataset::labels)
      .def_property_readonly("classes", &LabeledDataset::classes)
      .def_property_readonly("hash", [](const LabeledDataset& d) { return hex64(d.hash()); })
      .def("save", [](const LabeledDataset& d, const std::filesystem::path& p) { save_dataset(p, d); });

  m.def("load_dataset", [](const std::filesystem::path& p) { return load_dataset(p); }, py::arg("path"));
  m.def(
      "load_source",
      [](const std::string& source_json) {
        const auto tt = load_source(dataset_source_from_json(parse(source_json)));
        return py::make_tuple(tt.train, tt.test);
      },
      py::arg("source_json"), "(train, test) for a dataset descriptor");

  py::class_<ModelState>(m, "Model")
      .def_property_readonly("hash", [](const ModelState& s) { return hex64(s.hash()); })
      .def_property_readonly("spec", [](const ModelState& s) { return spec_to_json(s.spec()).dump(); })
      .def("logits", [](const ModelState& s, const py::array_t<float, py::array::c_style | py::array::forcecast>& x) {
        return to_numpy(logits(s, from_numpy(x)));
      })
      .def("save", [](const ModelState& s, const std::filesystem::path& p) { save_checkpoint(p, s); });
  m.def("load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p).model; }, py::arg("path"));
  m.def(
      "init_model",
      [](const std::string& spec_json, std::uint64_t seed) { return init_model(spec_from_json(parse(spec_json)), seed); },
      py::arg("spec_json"), py::arg("seed"));

  m.def(
      "train",
      [](const LabeledDataset& data, const std::string& spec_json, const std::string& config_json,
         const LabeledDataset* test) {
        const auto spec = spec_from_json(parse(spec_json));
        const auto cfg = train_config_from_json(resolve_fractions(parse(config_json)));
        std::optional<TrainResult> r;
        {
          py::gil_scoped_release release;
          r = cfg.inner ? train_adversarial(data, spec, cfg, test) : train_standard(data, spec, cfg, test);
        }
        return py::make_tuple(std::move(r->model), r->trace.to_csv());
      },
      py::arg("data"), py::arg("spec_json"), py::arg("config_json"), py::arg("test") = nullptr,
      "Standard training, or adversarial when the config has an inner attack. Returns (model, trace_csv).");

  m.def(
      "evaluate",
      [](const ModelState& model, const LabeledDataset& test, const std::string& attack_json, std::uint64_t seed) {
        const auto a = attack_json.empty() ? default_eval_attack()
                                           : attack_from_json(resolve_fractions(parse(attack_json)));
        EvalReport r;
        {
          py::gil_scoped_release release;
          r = evaluate(model, test, a, seed);
        }
        return report_to_json(r).dump();
      },
      py::arg("model"), py::arg("test"), py::arg("attack_json") = "", py::arg("seed") = 0);

  m.def(
      "poison",
      [](const std::string& recipe_json, const std::filesystem::path& out) {
        Recipe r = recipe_from_json(parse(recipe_json));
        const auto tt = load_source(r.dataset);
        r.fit_to(tt.train);
        std::optional<ModelState> lm;
        if (r.label_model) lm = load_checkpoint(*r.label_model).model;
        if (r.method == ForgeMethod::kAdvExample && !lm) {
          throw std::invalid_argument("adv-example needs label_model (a pretrained checkpoint)");
        }
        std::optional<PoisonedDataset> pd;
        {
          py::gil_scoped_release release;
          const ModelState* p = lm ? &*lm : nullptr;
          switch (r.method) {
            case ForgeMethod::kAdvin: pd = advin_generate(tt.train, r.forge, p).poisoned; break;
            case ForgeMethod::kStdin: pd = stdin_generate(tt.train, r.forge, p).poisoned; break;
            case ForgeMethod::kErrorMin: pd = error_min_generate(tt.train, r.forge).poisoned; break;
            case ForgeMethod::kAdvExample: pd = adv_example_generate(tt.train, *lm, r.forge); break;
          }
        }
        pd->config["dataset"] = dataset_source_to_json(r.dataset);
        pd->config["recipe"] = r.name;
        const auto hash = save_archive(out, *pd);
        return py::make_tuple(hex64(hash), pd->provenance.psr, pd->provenance.rounds,
                              to_numpy(pd->deltas));
      },
      py::arg("recipe_json"), py::arg("out"),
      "Runs the recipe's forge step and writes the archive. Returns (hash, psr, rounds, deltas).");

  m.def(
      "load_poisoned",
      [](const std::filesystem::path& dir) {
        const auto meta = read_archive_metadata(dir);
        const auto tt = load_source(dataset_source_from_json(meta.at("config").at("dataset")));
        return load_archive(dir, tt.train).poisoned_view();
      },
      py::arg("archive"), "The (x + delta, y) training set of an archive.");
  m.def("archive_metadata", [](const std::filesystem::path& dir) { return read_archive_metadata(dir).dump(); });
}
