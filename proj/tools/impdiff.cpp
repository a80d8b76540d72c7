#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "impdiff/harness.hpp"

namespace {

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

bool cells_equal(const std::string& a, const std::string& b, double tol) {
  if (a == b) return true;
  if (tol <= 0.0) return false;
  try {
    size_t pa = 0, pb = 0;
    double va = std::stod(a, &pa), vb = std::stod(b, &pb);
    if (pa != a.size() || pb != b.size()) return false;
    if (std::isnan(va) && std::isnan(vb)) return true;
    return std::abs(va - vb) <= tol;
  } catch (const std::exception&) {
    return false;
  }
}

int compare_traces(const std::string& a, const std::string& b, double tol) {
  auto ra = read_csv(a), rb = read_csv(b);
  if (ra.size() != rb.size()) {
    std::cout << "differ: " << a << " has " << ra.size() << " lines, " << b << " has "
              << rb.size() << "\n";
    return 1;
  }
  for (size_t i = 0; i < ra.size(); ++i) {
    if (ra[i].size() != rb[i].size()) {
      std::cout << "differ at line " << i + 1 << ": " << ra[i].size() << " vs " << rb[i].size()
                << " cells\n";
      return 1;
    }
    for (size_t c = 0; c < ra[i].size(); ++c) {
      if (!cells_equal(ra[i][c], rb[i][c], tol)) {
        std::cout << "differ at line " << i + 1 << ", column " << c + 1 << ": '" << ra[i][c]
                  << "' vs '" << rb[i][c] << "'\n";
        return 1;
      }
    }
  }
  std::cout << "identical (" << ra.size() << " lines)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sampling-as-optimization experiment runner"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run one experiment and emit metrics + manifest");
  std::string experiment, config_path, out_dir = "out";
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
  run->add_option("experiment", experiment,
                  "one of langevin-reward, langevin-scratch, gauss1d, rates, finite-state")
      ->required();
  run->add_option("--config", config_path, "key = value config file")->required();
  run->add_option("--seed", seed, "RNG seed (mandatory, no default)")->required();
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--override", overrides, "config overrides, key=value");

  auto* golden = app.add_subcommand("golden", "golden oracle file maintenance");
  golden->require_subcommand(1);
  auto* regen = golden->add_subcommand("regenerate", "rewrite the golden oracle values");
  std::string golden_path = "goldens/oracle_reference.json";
  regen->add_option("--out", golden_path, "golden file path");

  auto* cmp = app.add_subcommand("compare", "compare two metrics CSV files");
  std::string trace_a, trace_b;
  double tol = 0.0;
  cmp->add_option("traceA", trace_a)->required();
  cmp->add_option("traceB", trace_b)->required();
  cmp->add_option("--tol", tol, "absolute tolerance (default: exact text match)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      impdiff::ExperimentConfig cfg;
      cfg.experiment = experiment;
      cfg.seed = seed;
      cfg.out_dir = out_dir;
      cfg.kv = impdiff::parse_config_file(config_path);
      for (const std::string& o : overrides) impdiff::apply_override(cfg.kv, o);
      impdiff::RunResult res = impdiff::run_experiment(cfg);
      std::filesystem::create_directories(out_dir);
      const std::string metrics_path = out_dir + "/metrics.csv";
      const std::string manifest_path = out_dir + "/manifest.json";
      impdiff::write_metrics_csv(res, metrics_path);
      impdiff::write_manifest(res, manifest_path);
      if (cfg.flag("dump_ensemble", false) && res.final_ensemble.size() > 0)
        impdiff::write_ensemble_csv(res.final_ensemble, out_dir + "/ensemble.csv");
      std::cout << "wrote " << metrics_path << " (" << res.rows.size() << " rows) and "
                << manifest_path << "\n";
      return 0;
    }
    if (regen->parsed()) {
      impdiff::write_golden(golden_path);
      std::cout << "wrote " << golden_path << "\n";
      return 0;
    }
    if (cmp->parsed()) return compare_traces(trace_a, trace_b, tol);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
