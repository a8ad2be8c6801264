#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "purkinje/pipeline.hpp"

namespace fs = std::filesystem;
using namespace purkinje;

namespace {

enum Exit { kOk = 0, kConfigError = 2, kNumericError = 3, kBudgetExhausted = 4 };

std::string quoted(const std::string& s) { return nlohmann::json(s).dump(); }

int fail(const char* kind, int code, const std::string& message) {
  std::cerr << "error kind=" << kind << " code=" << code << " message=" << quoted(message) << std::endl;
  return code;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string out;
  std::string theta;
  std::string theta_file;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig() : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.jobs) cfg.jobs = *c.jobs;
  cfg.validate();
  return cfg;
}

Eigen::VectorXd resolve_theta(const Common& c, const RunConfig& cfg) {
  if (!c.theta.empty() && !c.theta_file.empty()) throw InputError("give either --theta or --theta-file, not both");
  if (!c.theta.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse("[" + c.theta + "]");
    } catch (const nlohmann::json::exception&) {
      throw InputError("--theta must be a comma-separated list of numbers");
    }
    return theta_from_json(j, cfg.theta_true);
  }
  if (!c.theta_file.empty()) {
    std::ifstream in(c.theta_file);
    if (!in) throw InputError("cannot open " + c.theta_file);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw InputError(c.theta_file + ": " + e.what());
    }
    if (j.is_object() && j.contains("theta")) j = j["theta"];
    return theta_from_json(j, cfg.theta_true);
  }
  return cfg.theta_true;
}

void log_line(const std::string& msg) {
  static const auto start = std::chrono::steady_clock::now();
  const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char stamp[32];
  std::snprintf(stamp, sizeof stamp, "[%8.1fs] ", t);
  std::cerr << stamp << msg << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Purkinje network identification from the 12-lead ECG"};
  app.require_subcommand(1);
  Common c;
  std::string path_arg;
  double voxel = 6.0;
  int rings = 24;

  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", c.config, "Run configuration (JSON)")->check(CLI::ExistingFile); };
  auto add_theta = [&](CLI::App* sub) {
    sub->add_option("--theta", c.theta, "Comma-separated parameter vector (default: synthetic.theta)");
    sub->add_option("--theta-file", c.theta_file, "JSON array or object keyed by parameter name")->check(CLI::ExistingFile);
  };

  auto* flatten = app.add_subcommand("flatten", "Harmonic map of an endocardial surface onto the unit disk");
  flatten->add_option("surface", path_arg, "Surface mesh (.obj or .off)")->required();
  flatten->add_option("--out", c.out, "Flat map JSON")->required();

  auto* grow = app.add_subcommand("grow", "Grow both Purkinje trees for one parameter vector");
  add_config(grow);
  add_theta(grow);
  grow->add_option("--out", c.out, "Output directory")->required();

  auto* forward = app.add_subcommand("forward", "Trees, coupled activation and ECG for one parameter vector");
  add_config(forward);
  add_theta(forward);
  forward->add_option("--out", c.out, "Output directory")->required();

  auto* fit = app.add_subcommand("fit", "Identify the parameter posterior (LHS, BO, then ABC)");
  add_config(fit);
  fit->add_option("--seed", c.seed, "Master seed (overrides the config)");
  fit->add_option("--jobs", c.jobs, "Concurrent forward evaluations")->check(CLI::PositiveNumber);
  fit->add_option("--out", c.out, "Run directory")->required();

  auto* pace = app.add_subcommand("pace", "Re-simulate every ensemble member with RT = 0");
  pace->add_option("run_dir", path_arg, "Run directory written by fit")->required()->check(CLI::ExistingDirectory);

  auto* ingest = app.add_subcommand("ingest-beats", "Detrend, align and summarize pre-segmented beats");
  ingest->add_option("beats_dir", path_arg, "Directory of 12-lead beat CSVs")->required()->check(CLI::ExistingDirectory);
  ingest->add_option("--out", c.out, "Output directory")->required();

  auto* fixtures = app.add_subcommand("fixtures", "Write the bundled biventricular anatomy and a config for it");
  fixtures->add_option("--out", c.out, "Output directory")->required();
  fixtures->add_option("--voxel", voxel, "Voxel edge in mm")->check(CLI::PositiveNumber);
  fixtures->add_option("--rings", rings, "Endocardial surface rings")->check(CLI::Range(2, 1000));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", kConfigError, e.what());
  }

  try {
    if (flatten->parsed()) {
      cmd_flatten(path_arg, c.out);
      std::cout << c.out << '\n';
    } else if (grow->parsed()) {
      const RunConfig cfg = resolve_config(c);
      std::cout << cmd_grow(cfg, resolve_theta(c, cfg), c.out).string() << '\n';
    } else if (forward->parsed()) {
      const RunConfig cfg = resolve_config(c);
      std::cout << cmd_forward(cfg, resolve_theta(c, cfg), c.out).string() << '\n';
    } else if (fit->parsed()) {
      const RunConfig cfg = resolve_config(c);
      FitOutcome fo = cmd_fit(cfg, c.out, log_line);
      std::cout << fo.run_dir.string() << '\n';
      if (fo.status == RunStatus::BudgetExhausted) {
        return fail("budget", kBudgetExhausted,
                    "posterior budget exhausted with " + std::to_string(fo.result.ensemble.size()) + " of " +
                        std::to_string(cfg.budget.n_posterior) + " members; see " +
                        (fo.run_dir / "status.json").string());
      }
    } else if (pace->parsed()) {
      std::cout << cmd_pace(path_arg, log_line).out_dir.string() << '\n';
    } else if (ingest->parsed()) {
      std::cout << cmd_ingest_beats(path_arg, c.out).string() << '\n';
    } else if (fixtures->parsed()) {
      std::cout << cmd_fixtures(c.out, voxel, rings).string() << '\n';
    }
  } catch (const InputError& e) {
    return fail("config", kConfigError, e.what());
  } catch (const NumericError& e) {
    return fail("numeric", kNumericError, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail("io", kConfigError, e.what());
  } catch (const std::exception& e) {
    return fail("internal", kNumericError, e.what());
  }
  return kOk;
}
