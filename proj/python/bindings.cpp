#include "emblora/analysis.hpp"
#include "emblora/cli.hpp"
#include "emblora/inference.hpp"
#include "emblora/lora.hpp"
#include "emblora/metrics.hpp"
#include "emblora/training.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace emblora;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// Images cross the boundary as float64 arrays of shape (H, W, C) or (H, W).
Image to_image(const Array& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw ContractError("image array must have shape (H, W) or (H, W, C)");
  const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
  Image img(w, h, c);
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

py::array_t<double> to_array(const Image& img) {
  py::array_t<double> out({img.height, img.width, img.channels});
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

py::dict controls_dict(const ControlSet& c) {
  py::dict d;
  d["tile"] = c.tile;
  d["canny"] = c.canny;
  d["color_correction"] = c.color_correction;
  return d;
}

// A backbone plus an optional adapter restricted to its style blocks.
class Model {
 public:
  Model(const std::string& backbone, int steps, std::uint64_t seed)
      : base_(make_model(backbone, {steps, seed, 1.0})), active_(base_) {}

  void load_adapter(const std::filesystem::path& path) {
    LoadedAdapter loaded = emblora::load_adapter(path, base_.denoiser.get());
    const BlockPartition partition(*base_.denoiser, loaded.meta.style_blocks);
    active_ = apply_style_blocks(base_, loaded.adapter, partition);
    style_blocks_ = loaded.meta.style_blocks;
  }

  const std::vector<std::string>& style_blocks() const { return style_blocks_; }
  std::vector<std::string> blocks() const {
    std::vector<std::string> names;
    for (const BlockSpec& b : base_.denoiser->blocks()) names.push_back(b.name);
    return names;
  }

  py::dict generate(const std::string& prompt, const std::string& mode, std::optional<Array> input, double strength,
                    std::uint64_t seed, bool strict_boundary) const {
    InferenceRequest r;
    r.mode = parse_generation_mode(mode);
    r.prompt = prompt;
    if (input) r.input_image = to_image(*input);
    r.strength = strength;
    r.seed = seed;
    r.strict_boundary = strict_boundary;
    GenerationResult g;
    {
      py::gil_scoped_release release;
      g = emblora::generate(active_, r);
    }
    py::dict d;
    d["image"] = to_array(g.image);
    d["prompt"] = g.prompt;
    d["controls"] = controls_dict(g.controls);
    d["start_step"] = g.start_step;
    return d;
  }

 private:
  DiffusionModel base_;
  DiffusionModel active_;
  std::vector<std::string> style_blocks_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "emblora core bindings";

  static py::exception<ContractError> contract_error(m, "ContractError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ContractError& e) {
      py::set_error(contract_error, e.what());
    } catch (const RuntimeError& e) {
      py::set_error(PyExc_RuntimeError, e.what());
    }
  });

  m.def("hf_ratio", [](const Array& img, double cutoff) { return hf_ratio(to_image(img), cutoff); }, py::arg("image"),
        py::arg("cutoff") = 0.25);
  m.def("hfrd", [](const Array& a, const Array& b, double cutoff) { return hfrd(to_image(a), to_image(b), cutoff); },
        py::arg("generated"), py::arg("reference"), py::arg("cutoff") = 0.25);
  m.def("histogram_loss", [](const Array& a, const Array& b, int bins) { return histogram_loss(to_image(a), to_image(b), bins); },
        py::arg("a"), py::arg("b"), py::arg("bins") = 64);
  m.def("color_correct", [](const Array& g, const Array& d) { return to_array(color_correct(to_image(g), to_image(d))); },
        py::arg("generated"), py::arg("design"));

  m.def("read_png", [](const std::filesystem::path& p) { return to_array(read_png(p)); });
  m.def("write_png", [](const Array& img, const std::filesystem::path& p) { write_png(to_image(img), p); });

  m.def("effective_prompt", &effective_prompt, py::arg("prompt"), py::arg("emb_token") = "[emb]");
  m.def("control_policy", [](const std::string& mode, bool strict) {
    return controls_dict(control_policy(parse_generation_mode(mode), strict));
  }, py::arg("mode"), py::arg("strict_boundary") = true);

  m.def("contrastive_from_similarities", &contrastive_from_similarities, py::arg("s_pos"), py::arg("s_neg1"),
        py::arg("s_neg2"), py::arg("tau") = 1.0);
  m.def("style_keep_count", &style_keep_count);
  m.def("final_keep_count", &final_keep_count);
  m.def("moving_average", &moving_average, py::arg("values"), py::arg("window"));

  m.def("select_style_blocks", [](const Eigen::MatrixXd& values, const std::vector<std::string>& blocks, int k,
                                  int begin, int end) {
    SimilarityMatrix sm;
    sm.block_order = blocks;
    sm.values = values;
    const BlockSelection s = select_style_blocks(sm, k, begin, end);
    return py::make_tuple(s.style_blocks, s.scores);
  }, py::arg("similarity"), py::arg("blocks"), py::arg("k") = 4, py::arg("section_begin") = 5, py::arg("section_end") = 10,
        "Lowest-similarity blocks over a section range; returns (blocks, per-block scores).");

  m.def("load_adapter_meta", [](const std::filesystem::path& p) {
    const LoadedAdapter a = load_adapter(p);
    py::dict d;
    d["backbone"] = a.meta.backbone;
    d["style_blocks"] = a.meta.style_blocks;
    d["all_blocks"] = a.meta.all_blocks;
    d["rank"] = a.adapter.rank;
    d["alpha"] = a.adapter.alpha;
    d["entries"] = a.adapter.entries.size();
    return d;
  });

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = run_cli(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, "Runs the command line tool in-process; returns (exit code, stdout, stderr).");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&, int, std::uint64_t>(), py::arg("backbone") = "toy", py::arg("steps") = 50,
           py::arg("seed") = 0)
      .def("load_adapter", &Model::load_adapter, py::arg("path"))
      .def_property_readonly("style_blocks", &Model::style_blocks)
      .def_property_readonly("blocks", &Model::blocks)
      .def("generate", &Model::generate, py::arg("prompt"), py::arg("mode") = "text", py::arg("input") = py::none(),
           py::arg("strength") = 0.7, py::arg("seed") = 0, py::arg("strict_boundary") = true);
}
