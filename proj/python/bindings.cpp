#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "shiftcai/cli.hpp"
#include "shiftcai/criteria.hpp"
#include "shiftcai/smallarea.hpp"

namespace py = pybind11;
using namespace shiftcai;

namespace {

// Zero-based column lists from Python become candidate models.
std::vector<CandidateModel> to_candidates(const std::vector<std::vector<Index>>& cols, Index p) {
  std::vector<CandidateModel> out;
  out.reserve(cols.size());
  for (const auto& c : cols) out.emplace_back(c, p);
  return out;
}

std::vector<std::vector<Index>> to_lists(const std::vector<CandidateModel>& cands) {
  std::vector<std::vector<Index>> out;
  for (const auto& c : cands) out.push_back(c.indices());
  return out;
}

// Areas given as a label per row; rows with NaN y are unsampled.
NermData nerm_from_arrays(const std::vector<std::string>& area, const VectorXd& y, const MatrixXd& X) {
  if (static_cast<Index>(area.size()) != y.size() || X.rows() != y.size())
    throw InputError("area, y and X must have the same number of rows");
  std::vector<std::string> order;
  std::vector<std::vector<Index>> sampled, unsampled;
  for (Index r = 0; r < y.size(); ++r) {
    const auto it = std::find(order.begin(), order.end(), area[static_cast<std::size_t>(r)]);
    std::size_t k = static_cast<std::size_t>(it - order.begin());
    if (it == order.end()) {
      order.push_back(area[static_cast<std::size_t>(r)]);
      sampled.emplace_back();
      unsampled.emplace_back();
    }
    (std::isnan(y(r)) ? unsampled : sampled)[k].push_back(r);
  }
  NermData data;
  for (std::size_t k = 0; k < order.size(); ++k) {
    AreaRecord a;
    a.id = order[k];
    a.y = y(sampled[k]);
    a.X = X(sampled[k], Eigen::all);
    a.X_unsampled = MatrixXd(X(unsampled[k], Eigen::all));
    a.N = a.n() + static_cast<Index>(unsampled[k].size());
    data.areas.push_back(std::move(a));
  }
  data.validate();
  return data;
}

}  // namespace

PYBIND11_MODULE(_shiftcai, m) {
  m.doc() = "Conditional AIC variable selection under covariate shift";
  m.attr("__version__") = SHIFTCAI_VERSION;

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<RankDeficientError>(m, "RankDeficientError", PyExc_ValueError);
  py::register_exception<DegenerateFitError>(m, "DegenerateFitError", PyExc_RuntimeError);

  py::class_<DesignSet>(m, "Design")
      .def(py::init([](MatrixXd X, MatrixXd Z, MatrixXd Xt, MatrixXd Zt, MatrixXd G, MatrixXd R, MatrixXd Rt) {
             DesignSet d{std::move(X), std::move(Z), std::move(Xt), std::move(Zt), std::move(G), std::move(R),
                         std::move(Rt)};
             d.validate();
             return d;
           }),
           py::arg("X"), py::arg("Z"), py::arg("Xt"), py::arg("Zt"), py::arg("G"), py::arg("R"), py::arg("Rt"))
      .def_readonly("X", &DesignSet::X_full)
      .def_readonly("Z", &DesignSet::Z)
      .def_readonly("Xt", &DesignSet::Xt_full)
      .def_readonly("Zt", &DesignSet::Zt)
      .def_property_readonly("n", &DesignSet::n)
      .def_property_readonly("m", &DesignSet::m)
      .def_property_readonly("p", &DesignSet::p_full)
      .def("without_shift", &without_shift);

  py::class_<CriterionBreakdown>(m, "Breakdown")
      .def_property_readonly("variant", [](const CriterionBreakdown& b) { return to_string(b.variant); })
      .def_property_readonly("candidate", [](const CriterionBreakdown& b) { return b.candidate.indices(); })
      .def_readonly("sigma2_hat", &CriterionBreakdown::sigma2_hat)
      .def_readonly("goodness", &CriterionBreakdown::goodness)
      .def_readonly("r_star", &CriterionBreakdown::r_star)
      .def_readonly("r1", &CriterionBreakdown::r1)
      .def_readonly("r2", &CriterionBreakdown::r2)
      .def_readonly("r3", &CriterionBreakdown::r3)
      .def_readonly("r4", &CriterionBreakdown::r4)
      .def_readonly("delta_cs", &CriterionBreakdown::delta_cs)
      .def_readonly("total", &CriterionBreakdown::total)
      .def("__repr__", [](const CriterionBreakdown& b) {
        std::ostringstream os;
        os << "<Breakdown " << to_string(b.variant) << " {" << b.candidate.label() << "} total=" << b.total << ">";
        return os.str();
      });

  m.def("all_subsets", [](Index p, const std::vector<Index>& forced) { return to_lists(all_subsets(p, forced)); },
        py::arg("p"), py::arg("forced") = std::vector<Index>{});
  m.def("nested_chain", [](Index p) { return to_lists(nested_chain(p)); }, py::arg("p"));

  m.def(
      "criterion",
      [](const DesignSet& d, const VectorXd& y, const std::vector<Index>& candidate, const std::string& variant,
         Index boot_reps, std::uint64_t seed) {
        const LmmSystem system(d);
        std::optional<BootstrapConfig> boot;
        const Variant v = parse_variant(variant);
        if (v == Variant::Dagger) boot = BootstrapConfig{boot_reps, seed};
        return criterion(v, y, system, CandidateModel(candidate, d.p_full()), boot);
      },
      py::arg("design"), py::arg("y"), py::arg("candidate"), py::arg("variant") = "hat", py::arg("boot_reps") = 1000,
      py::arg("seed") = 1);

  m.def(
      "select",
      [](const DesignSet& d, const VectorXd& y, std::optional<std::vector<std::vector<Index>>> candidates,
         const std::string& variant, Index boot_reps, std::uint64_t seed, unsigned workers) {
        const LmmSystem system(d);
        const auto cands = candidates ? to_candidates(*candidates, d.p_full()) : all_subsets(d.p_full());
        std::optional<BootstrapConfig> boot;
        const Variant v = parse_variant(variant);
        if (v == Variant::Dagger) boot = BootstrapConfig{boot_reps, seed};
        py::gil_scoped_release release;
        return select_best(y, system, cands, v, boot, workers).ranked;
      },
      py::arg("design"), py::arg("y"), py::arg("candidates") = py::none(), py::arg("variant") = "hat",
      py::arg("boot_reps") = 1000, py::arg("seed") = 1, py::arg("workers") = 1,
      "Ranked breakdowns, best first; excluded candidates are dropped.");

  m.def(
      "mc_true_cai",
      [](const DesignSet& d, const std::vector<Index>& candidate, const VectorXd& beta_star, double sigma2_star,
         Index iterations, std::uint64_t seed) {
        const LmmSystem system(d);
        const McEstimate e = mc_true_cai(system, CandidateModel(candidate, d.p_full()),
                                         TruthParams{beta_star, sigma2_star}, iterations, seed);
        return py::make_tuple(e.mean, e.se);
      },
      py::arg("design"), py::arg("candidate"), py::arg("beta_star"), py::arg("sigma2_star"),
      py::arg("iterations") = 10000, py::arg("seed") = 1);

  m.def(
      "estimate_psi",
      [](const std::vector<std::string>& area, const VectorXd& y, const MatrixXd& X) {
        const PsiEstimate e = estimate_psi(nerm_from_arrays(area, y, X));
        py::dict out;
        out["tau2"] = e.tau2_hat;
        out["sigma2"] = e.sigma2_hat;
        out["psi"] = e.psi_hat;
        out["truncated"] = e.truncated;
        return out;
      },
      py::arg("area"), py::arg("y"), py::arg("X"), "Rows with NaN y are unsampled units.");

  m.def(
      "predict",
      [](const std::vector<std::string>& area, const VectorXd& y, const MatrixXd& X,
         std::optional<std::vector<Index>> candidate, bool log_scale) {
        const NermData data = nerm_from_arrays(area, y, X);
        const CandidateModel j = candidate ? CandidateModel(*candidate, data.p()) : CandidateModel::full(data.p());
        const auto preds = predict_finite_mean(data, fit_nerm(data, j), log_scale);
        py::dict out;
        for (const auto& p : preds) out[py::str(p.id)] = p.finite_mean;
        return out;
      },
      py::arg("area"), py::arg("y"), py::arg("X"), py::arg("candidate") = py::none(), py::arg("log_scale") = false,
      "Predicted finite-population mean per area; rows with NaN y are unsampled units.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool; returns (exit_code, stdout, stderr).");
}
