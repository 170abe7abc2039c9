// Python bindings for the numeric core and the command-line entry point.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>
#include <string>
#include <vector>

#include "epep/bkm.hpp"
#include "epep/cli.hpp"
#include "epep/data.hpp"
#include "epep/error.hpp"
#include "epep/evidential.hpp"
#include "epep/prompting.hpp"
#include "epep/training.hpp"
#include "epep/verify.hpp"

namespace py = pybind11;
using namespace epep;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array, got " + std::to_string(a.ndim()) + "-D");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

py::dict dirichlet_dict(const DirichletOutput& d) {
  py::dict out;
  out["evidence"] = d.evidence;
  out["alpha"] = d.alpha;
  out["strength"] = d.strength;
  out["probs"] = d.probs;
  out["uncertainty"] = d.uncertainty;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Evidential low-rank prompting for multimodal models with missing modalities";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<PatternError>(m, "PatternError", base.ptr());
  py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());
  py::register_exception<MetricError>(m, "MetricError", base.ptr());

  m.def(
      "bkm_multiply",
      [](const Array& a, const Array& b, int m) {
        const Matrix bm = to_matrix(b);
        const auto d = static_cast<int>(bm.rows()), l = static_cast<int>(bm.cols());
        return to_array(bkm_multiply(to_matrix(a), bm, BlockPartition(m, d, l)));
      },
      py::arg("a"), py::arg("b"), py::arg("m"),
      "Block-wise product: block (i, j) of the result is a[i, j] * B_ij.");

  m.def(
      "dirichlet",
      [](const std::vector<double>& logits) { return dirichlet_dict(evidence_from_logits(logits)); },
      py::arg("logits"));
  m.def(
      "loss_eb",
      [](const std::vector<double>& logits, const std::vector<double>& y) {
        return loss_eb(evidence_from_logits(logits), LabelVector(y));
      },
      py::arg("logits"), py::arg("y"));
  m.def(
      "kl_to_uniform", [](const std::vector<double>& alpha_t) { return kl_to_uniform(alpha_t); },
      py::arg("alpha_t"));
  m.def(
      "loss_combined",
      [](const std::vector<double>& logits, const std::vector<double>& y, double lambda) {
        return loss_combined(evidence_from_logits(logits), LabelVector(y), lambda);
      },
      py::arg("logits"), py::arg("y"), py::arg("lam") = kDefaultLambda);
  m.def(
      "evidential_gradients",
      [](const std::vector<double>& logits, const std::vector<double>& y, double lambda) {
        return evidential_gradients(logits, LabelVector(y), lambda);
      },
      py::arg("logits"), py::arg("y"), py::arg("lam") = kDefaultLambda);

  m.def(
      "param_count",
      [](int m, int d, int l, int r, const std::string& method) {
        return param_count(m, d, l, r, parse_method(method));
      },
      py::arg("m"), py::arg("d"), py::arg("l"), py::arg("r"), py::arg("method") = "EPEP");
  m.def(
      "param_report",
      [](int m, int d, int l, int r) {
        std::ostringstream out;
        print_param_report(param_report(m, d, l, r), out);
        return out.str();
      },
      py::arg("m"), py::arg("d"), py::arg("l"), py::arg("r"));

  m.def(
      "missing_quotas",
      [](const std::vector<double>& availability, std::size_t n) {
        const MissingProtocol p{availability};
        p.validate();
        return p.missing_quotas(n);
      },
      py::arg("availability"), py::arg("n"));
  m.def(
      "sample_patterns",
      [](const std::vector<double>& availability, std::size_t n, std::uint64_t seed) {
        Rng rng(seed);
        std::vector<std::vector<int>> out;
        for (const auto& p : sample_pattern(MissingProtocol{availability}, n, rng))
          out.push_back(p.indices());
        return out;
      },
      py::arg("availability"), py::arg("n"), py::arg("seed") = 0,
      "Missing modality indices per sample.");

  m.def(
      "auroc",
      [](const std::vector<double>& scores, const std::vector<int>& golds) {
        return auroc(scores, golds);
      },
      py::arg("scores"), py::arg("labels"));
  m.def("f1_macro", &f1_macro, py::arg("preds"), py::arg("golds"), py::arg("num_classes"));

  m.def(
      "verify",
      [](const std::string& suite, std::uint64_t seed) {
        VerifyOptions opts;
        opts.seed = seed;
        py::list out;
        for (const auto& c : run_verify_suite(suite, opts).checks)
          out.append(py::dict(py::arg("operation") = c.operation, py::arg("passed") = c.passed,
                              py::arg("detail") = c.detail));
        return out;
      },
      py::arg("suite"), py::arg("seed") = VerifyOptions{}.seed);
  m.def("verify_suite_names", &verify_suite_names);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"epep"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int rc;
        {
          py::gil_scoped_release release;
          rc = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(rc, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in-process; returns (exit code, stdout, stderr).");
}
