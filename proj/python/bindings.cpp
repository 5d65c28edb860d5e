#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "perft/analysis.hpp"
#include "perft/checkpoint.hpp"
#include "perft/cli.hpp"
#include "perft/errors.hpp"
#include "perft/run_config.hpp"

namespace py = pybind11;
using namespace perft;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw InputError("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return Tensor({rows, cols}, std::vector<double>(a.data(), a.data() + rows * cols));
}

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<Sample> to_samples(const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::vector<Sample> out;
  for (const auto& [i, a] : pairs) out.push_back({i, a});
  return out;
}

py::dict eval_dict(const EvalMetrics& m) {
  py::dict d;
  d["token_accuracy"] = m.token_accuracy;
  d["exact_match"] = m.exact_match;
  d["ce"] = m.ce;
  d["tokens"] = m.tokens;
  d["samples"] = m.samples;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("chi2_cdf", &chi2_cdf, py::arg("x"), py::arg("dof"));

  m.def(
      "count_params_json",
      [](const std::string& config) {
        const RunConfig c = parse_run_config(nlohmann::json::parse(config));
        if (!c.perft) throw ConfigError("count_params: config needs a perft section");
        const BackboneDims dims = c.dims ? *c.dims : backbone_dims(c.model);
        const ParamAccount a = count_activated(*c.perft, dims);
        nlohmann::json j{{"activated_trainable", a.activated_trainable},
                         {"total_trainable", a.total_trainable},
                         {"activated_total_model", a.activated_total_model},
                         {"ratio_percent", a.ratio_percent},
                         {"millions", format_millions(a.activated_trainable)}};
        return j.dump();
      },
      py::arg("config"));

  m.def(
      "route",
      [](const Array& logits, std::size_t k, bool renormalize) {
        const RouteResult r = route_from_logits(to_tensor(logits), k, renormalize);
        py::dict d;
        d["probs"] = to_array(r.probs);
        d["gates"] = to_array(r.gates);
        d["topk"] = r.topk;
        d["load_balance"] = load_balance_loss(r);
        d["z_loss"] = z_loss(r.logits);
        return d;
      },
      py::arg("logits"), py::arg("k"), py::arg("renormalize") = false);

  m.def(
      "effective_count", [](const Array& v, double eps) { return effective_count(to_tensor(v), eps); },
      py::arg("vectors"), py::arg("epsilon"));

  m.def(
      "redundancy_estimate",
      [](std::size_t adapters, std::size_t bottleneck, double epsilon, double gamma) {
        const RedundancyEstimate e = redundancy_estimate({adapters, bottleneck, epsilon, gamma});
        py::dict d;
        d["p0"] = e.p0;
        d["pT"] = e.pT;
        d["eta"] = e.eta;
        d["expected_effective"] = e.expected_effective;
        return d;
      },
      py::arg("adapters"), py::arg("bottleneck"), py::arg("epsilon"), py::arg("gamma"));

  m.def(
      "generate_task",
      [](const std::string& spec, std::size_t n) {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& s : generate(parse_task_spec(nlohmann::json::parse(spec)), n))
          out.emplace_back(s.instruction, s.answer);
        return out;
      },
      py::arg("spec"), py::arg("n"));

  m.def("encode", [](const std::string& s) { return Tokenizer().encode(s); });
  m.def("decode", [](const std::vector<int>& ids) { return Tokenizer().decode(ids); });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));

  py::class_<LanguageModel>(m, "Model")
      .def_static("load", [](const std::string& path) { return load_checkpoint(path); }, py::arg("path"))
      .def("save", [](const LanguageModel& self, const std::string& path) { save_checkpoint(self, path); })
      .def_property_readonly("config", [](const LanguageModel& self) { return to_json(self.config()).dump(); })
      .def_property_readonly("perft",
                             [](const LanguageModel& self) -> std::optional<std::string> {
                               if (!self.perft()) return std::nullopt;
                               return to_json(*self.perft()).dump();
                             })
      .def("backbone_checksum", [](const LanguageModel& self) { return backbone_checksum(self); })
      .def(
          "logits",
          [](const LanguageModel& self, const py::array_t<int, py::array::c_style | py::array::forcecast>& tokens) {
            if (tokens.ndim() != 2) throw InputError("tokens must be a 2-D array");
            const auto b = static_cast<std::size_t>(tokens.shape(0));
            const auto t = static_cast<std::size_t>(tokens.shape(1));
            const TokenBatch batch{b, t, std::vector<int>(tokens.data(), tokens.data() + b * t)};
            const Tensor logits = lm_forward(self, batch).logits;
            py::array_t<double> out({b, t, logits.cols()});
            std::copy(logits.data().begin(), logits.data().end(), out.mutable_data());
            return out;
          },
          py::arg("tokens"))
      .def(
          "evaluate",
          [](const LanguageModel& self, const std::vector<std::pair<std::string, std::string>>& samples) {
            return eval_dict(evaluate(self, to_samples(samples)));
          },
          py::arg("samples"));
}
