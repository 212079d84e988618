// diffml: synth | inject | run | report

#include <CLI11.hpp>
#include <charconv>
#include <fstream>
#include <iostream>

#include "diffml/data.hpp"
#include "diffml/error.hpp"
#include "diffml/harness.hpp"

namespace {

using namespace diffml;

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string_view item(text.data() + pos, comma - pos);
    std::uint64_t value = 0;
    const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
    if (item.empty() || ec != std::errc{} || end != item.data() + item.size()) {
      throw Error(ErrorCode::config_error, "--seeds: \"" + std::string(item) + "\" is not a seed");
    }
    seeds.push_back(value);
    pos = comma + 1;
  }
  return seeds;
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

void write_mask(const data::CellMask& mask, const data::Table& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + path);
  out << "row,column\n";
  for (std::size_t r = 0; r < mask.rows(); ++r)
    for (std::size_t c = 0; c < mask.cols(); ++c)
      if (mask(r, c)) out << r << ',' << table.column_names[c] << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable ML pipelines: learned cleaning, dataset selection and feature gating"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic regression CSV");
  data::SynthSpec spec;
  std::string synth_out;
  synth->add_option("--output", synth_out, "CSV path")->required();
  synth->add_option("--rows", spec.n_rows, "Row count")->check(CLI::PositiveNumber);
  synth->add_option("--informative", spec.n_informative, "Informative feature columns");
  synth->add_option("--noise", spec.n_noise, "Pure-noise feature columns");
  synth->add_option("--noise-std", spec.noise_std, "Target noise standard deviation");
  synth->add_option("--latent", spec.latent_factors, "Shared latent factors");
  synth->add_option("--seed", spec.seed, "Random seed");

  auto* inject = app.add_subcommand("inject", "Corrupt a CSV with one error kind");
  std::string inject_in, inject_out, inject_target = "y", inject_kind = "missing", mask_out;
  data::ErrorSpec error;
  inject->add_option("--input", inject_in, "Clean CSV")->required();
  inject->add_option("--output", inject_out, "Corrupted CSV")->required();
  inject->add_option("--target", inject_target, "Target column");
  inject->add_option("--kind", inject_kind, "missing | outlier | typo | label_swap");
  inject->add_option("--rate", error.rate, "Error rate")->check(CLI::Range(0.0, 1.0));
  inject->add_option("--seed", error.seed, "Random seed");
  inject->add_option("--outlier-sigma", error.outlier_sigma, "Outlier magnitude in column stds");
  inject->add_option("--mask", mask_out, "Write corrupted cells (row,column) here");

  auto* run = app.add_subcommand("run", "Run an experiment config");
  std::string config_path, run_out, seeds_text;
  double budget = -1.0;
  std::size_t jobs = 0;
  run->add_option("--config", config_path, "Experiment JSON")->required();
  run->add_option("--output", run_out, "Output directory (overrides the config)");
  run->add_option("--seeds", seeds_text, "Comma-separated seeds (overrides the config)");
  run->add_option("--budget-seconds", budget, "Time budget per grid baseline")->check(CLI::NonNegativeNumber);
  run->add_option("--jobs", jobs, "Worker threads over (seed, method) cells");

  auto* report = app.add_subcommand("report", "Re-emit CSVs from a stored report.json");
  std::string report_in, report_out;
  report->add_option("--input", report_in, "report.json or the directory holding it")->required();
  report->add_option("--output", report_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      data::write_table(data::synth_make(spec).table, synth_out);
      std::cout << "wrote " << synth_out << '\n';
      return 0;
    }
    if (*inject) {
      std::vector<std::string> warnings;
      const data::Table table = data::load_table(inject_in, inject_target, &warnings);
      print_warnings(warnings);
      error.kind = data::error_kind_from_string(inject_kind);
      const auto result = data::inject_errors(table, error);
      data::write_table(result.table, inject_out);
      if (!mask_out.empty()) write_mask(result.ground_truth, result.table, mask_out);
      std::cout << "corrupted " << result.ground_truth.count() << " cells -> " << inject_out << '\n';
      return 0;
    }
    if (*run) {
      harness::ExperimentConfig config = harness::load_config(config_path);
      if (!run_out.empty()) config.output_dir = run_out;
      if (!seeds_text.empty()) config.seeds = parse_seed_list(seeds_text);
      if (budget >= 0.0) config.budget_seconds = budget;
      if (jobs > 0) config.jobs = jobs;
      config.validate();
      const auto result = harness::run_experiment(config);
      print_warnings(result.warnings);
      harness::emit_report(result, config.output_dir);
      for (const auto& r : result.results) {
        if (r.status != "ok") std::cerr << "seed " << r.seed << " " << r.method << ": " << r.status << ": " << r.message << '\n';
      }
      std::cout << "wrote " << config.output_dir.string() << " (" << result.results.size() - result.failed_cells()
                << "/" << result.results.size() << " cells ok)\n";
      return harness::exit_code_for(result);
    }
    if (*report) {
      std::filesystem::path in = report_in;
      if (std::filesystem::is_directory(in)) in /= "report.json";
      harness::emit_report(harness::load_report(in), report_out);
      std::cout << "wrote " << report_out << '\n';
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::config_error || e.code() == ErrorCode::parse_error ? 1 : 2;
  }
  return 0;
}
