#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "purkinje/fixtures.hpp"
#include "purkinje/pipeline.hpp"

namespace py = pybind11;
using namespace purkinje;
namespace fs = std::filesystem;

namespace {

RunConfig parse_config(const std::string& text, const std::string& base) {
  auto cfg = RunConfig::from_json(nlohmann::json::parse(text), base);
  cfg.validate();
  return cfg;
}

Eigen::MatrixXd ecg_matrix(const EcgTrace& tr) {
  Eigen::MatrixXd m(kNumLeads, static_cast<Eigen::Index>(tr.size()));
  for (int l = 0; l < kNumLeads; ++l)
    for (std::size_t k = 0; k < tr.size(); ++k) m(l, static_cast<Eigen::Index>(k)) = tr.leads[l][k];
  return m;
}

py::dict ecg_dict(const EcgTrace& tr) {
  py::dict d;
  d["leads"] = ecg_matrix(tr);
  d["dt"] = tr.dt;
  d["t0"] = tr.t0;
  d["qrs_onset"] = tr.qrs_onset;
  d["qrs_duration"] = tr.qrs_duration;
  return d;
}

py::dict tree_dict(const PurkinjeTree& t) {
  Eigen::MatrixXd nodes(static_cast<Eigen::Index>(t.num_nodes()), 3);
  for (std::size_t i = 0; i < t.num_nodes(); ++i) nodes.row(static_cast<Eigen::Index>(i)) = t.nodes[i].transpose();
  Eigen::MatrixXi edges(static_cast<Eigen::Index>(t.edges.size()), 2);
  for (std::size_t e = 0; e < t.edges.size(); ++e) edges.row(static_cast<Eigen::Index>(e)) << t.edges[e][0], t.edges[e][1];
  py::dict d;
  d["nodes"] = nodes;
  d["edges"] = edges;
  d["root"] = t.root;
  d["pmjs"] = t.pmjs;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Purkinje network identification from the 12-lead ECG";

  // Later registrations take precedence, so the base class goes first.
  auto& error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<InputError>(m, "InputError", error.ptr());
  py::register_exception<NumericError>(m, "NumericError", error.ptr());

  m.attr("param_names") = std::vector<std::string>(kParamNames.begin(), kParamNames.end());
  m.attr("lead_names") = std::vector<std::string>(kLeadNames.begin(), kLeadNames.end());

  m.def("default_config", [] { return RunConfig().to_json().dump(); }, "Default run configuration as JSON text.");
  m.def(
      "normalize_config", [](const std::string& text, const std::string& base) { return parse_config(text, base).to_json().dump(); },
      py::arg("text"), py::arg("base") = "", "Parse, validate and re-serialize a configuration with every key filled in.");
  m.def("default_true_theta", &default_true_theta);
  m.def(
      "bounds",
      [] {
        auto s = ParamSpace::defaults();
        return std::make_pair(s.lower, s.upper);
      },
      "Default (lower, upper) parameter bounds.");

  m.def("expected_improvement", &expected_improvement, py::arg("mu"), py::arg("var"), py::arg("y_best"));
  m.def(
      "tv_distance", [](const std::vector<double>& a, const std::vector<double>& b) { return tv_distance(a, b); },
      py::arg("a"), py::arg("b"));
  m.def(
      "solve_tree",
      [](const Eigen::MatrixXd& nodes, const Eigen::MatrixXi& edges, double cv, const std::vector<std::pair<int, double>>& sources) {
        PurkinjeTree t;
        for (Eigen::Index i = 0; i < nodes.rows(); ++i) t.nodes.emplace_back(nodes(i, 0), nodes(i, 1), nodes(i, 2));
        t.uv.assign(t.nodes.size(), Vec2::Zero());
        for (Eigen::Index e = 0; e < edges.rows(); ++e) {
          t.edges.push_back({edges(e, 0), edges(e, 1)});
          t.edge_lengths.push_back((t.nodes.at(edges(e, 1)) - t.nodes.at(edges(e, 0))).norm());
        }
        std::vector<TreeSource> src;
        for (auto [n, time] : sources) src.push_back({n, time});
        return solve_tree(t, cv, src);
      },
      py::arg("nodes"), py::arg("edges"), py::arg("cv"), py::arg("sources"),
      "Arrival times on a tree given as (n, 3) node positions and (m, 2) edges; sources are (node, time) pairs.");

  py::class_<GaussianProcess>(m, "GaussianProcess")
      .def(py::init<Eigen::VectorXd, Eigen::VectorXd>(), py::arg("lower"), py::arg("upper"))
      .def(
          "fit",
          [](GaussianProcess& gp, const Eigen::MatrixXd& X, const std::vector<double>& y, int restarts, std::uint64_t seed) {
            std::vector<Eigen::VectorXd> rows;
            for (Eigen::Index i = 0; i < X.rows(); ++i) rows.emplace_back(X.row(i).transpose());
            std::mt19937_64 rng(seed);
            gp.fit(rows, y, restarts, rng);
          },
          py::arg("X"), py::arg("y"), py::arg("restarts") = 5, py::arg("seed") = 1)
      .def(
          "predict",
          [](const GaussianProcess& gp, const Eigen::MatrixXd& X) {
            Eigen::VectorXd mean, var;
            gp.predict_batch(X.transpose(), mean, var);
            return std::make_pair(mean, var);
          },
          py::arg("X"), "Mean and latent variance at the rows of X.")
      .def("to_json", [](const GaussianProcess& gp) { return gp.to_json().dump(); })
      .def_static("from_json", [](const std::string& s) { return GaussianProcess::from_json(nlohmann::json::parse(s)); });

  py::class_<ForwardModel>(m, "ForwardModel")
      .def(py::init([](const std::string& config, const std::string& base) {
             auto cfg = parse_config(config, base);
             return std::make_unique<ForwardModel>(cfg, load_anatomy(cfg));
           }),
           py::arg("config"), py::arg("base") = "")
      .def(
          "simulate",
          [](const ForwardModel& fm, const Eigen::VectorXd& theta) {
            Simulation s;
            {
              py::gil_scoped_release release;
              s = fm.simulate(theta);
            }
            py::dict d;
            d["ecg"] = ecg_dict(s.ecg);
            d["activation"] = s.activation.tau_myo;
            d["max_activation"] = s.max_activation;
            d["iterations"] = s.activation.iterations;
            d["trees"] = py::make_tuple(tree_dict(s.trees[0]), tree_dict(s.trees[1]));
            return d;
          },
          py::arg("theta"))
      .def_property_readonly("num_vertices", [](const ForwardModel& fm) { return fm.anatomy().myocardium.num_vertices(); })
      .def_property_readonly("num_tets", [](const ForwardModel& fm) { return fm.anatomy().myocardium.num_tets(); });

  m.def(
      "load_ecg_csv", [](const fs::path& p) { return ecg_dict(load_ecg_csv(p)); }, py::arg("path"));
  m.def("fixtures", &cmd_fixtures, py::arg("out"), py::arg("voxel") = 6.0, py::arg("surface_rings") = 24,
        "Write the bundled anatomy and a config for it; returns the directory written.");
  m.def(
      "forward",
      [](const std::string& config, const Eigen::VectorXd& theta, const fs::path& out, const std::string& base) {
        auto cfg = parse_config(config, base);
        py::gil_scoped_release release;
        return cmd_forward(cfg, theta, out);
      },
      py::arg("config"), py::arg("theta"), py::arg("out"), py::arg("base") = "");
  m.def(
      "fit",
      [](const std::string& config, const fs::path& out, const std::string& base) {
        auto cfg = parse_config(config, base);
        FitOutcome fo;
        {
          py::gil_scoped_release release;
          fo = cmd_fit(cfg, out);
        }
        py::dict d;
        d["run_dir"] = fo.run_dir;
        d["status"] = fo.status == RunStatus::Complete ? "complete" : "budget_exhausted";
        d["resumed"] = fo.resumed;
        d["evaluations"] = fo.result.records.size();
        d["members"] = fo.result.ensemble.size();
        return d;
      },
      py::arg("config"), py::arg("out"), py::arg("base") = "", "Run or resume an identification; returns a summary.");
  m.def(
      "pace",
      [](const fs::path& run_dir) {
        PaceSummary s;
        {
          py::gil_scoped_release release;
          s = cmd_pace(run_dir);
        }
        py::list members;
        for (const auto& mbr : s.members) {
          py::dict d;
          d["name"] = mbr.name;
          d["theta"] = mbr.theta;
          d["max_activation_fitted"] = mbr.max_activation_fitted;
          d["max_activation_paced"] = mbr.max_activation_paced;
          members.append(d);
        }
        py::dict d;
        d["out_dir"] = s.out_dir;
        d["members"] = members;
        d["selection"] = s.selection;
        return d;
      },
      py::arg("run_dir"));
  m.def("ingest_beats", &cmd_ingest_beats, py::arg("in_dir"), py::arg("out"));
}
