// ssmr: train desk models, run robustness experiments, merge reports.
//
// Exit status: 0 on success, 1 when an input or config is invalid, 2 when a
// run fails for any other reason.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ssmr/error.hpp"
#include "ssmr/harness.hpp"

namespace {

void log_line(const std::string& s) { std::cerr << s << '\n'; }

int print_checks(const std::vector<ssmr::CheckLine>& lines) {
  bool ok = true;
  for (const auto& l : lines) {
    std::printf("%-36s %.3e (tol %.0e) %s\n", l.name.c_str(), l.value, l.tolerance, l.passed ? "ok" : "FAILED");
    ok = ok && l.passed;
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"robustness lab for visual selective state-space models"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> samples;
  std::optional<std::string> out;
  std::optional<std::string> format;
  std::string config, spec;
  std::vector<std::string> inputs;

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config, "training config")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "override the model and training seed");
  train->add_option("--out", out, "checkpoint path");

  auto* run = app.add_subcommand("run", "run one experiment spec");
  run->add_option("--spec", spec, "experiment spec")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "override the experiment seed");
  run->add_option("--samples", samples, "evaluation subset size")->check(CLI::PositiveNumber);
  run->add_option("--out", out, "report path");
  run->add_option("--format", format, "report format")->check(CLI::IsMember({"csv", "json"}));

  auto* report = app.add_subcommand("report", "merge report files");
  report->add_option("inputs", inputs, "csv or json reports")->required()->check(CLI::ExistingFile);
  std::string report_out;
  report->add_option("--out", report_out, "merged report path")->required();
  std::string report_format = "csv";
  report->add_option("--format", report_format, "report format")->check(CLI::IsMember({"csv", "json"}));

  std::uint64_t check_seed = 0;
  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient checks");
  grad->add_option("--seed", check_seed, "random seed");
  auto* oracle = app.add_subcommand("oracle", "recurrence/convolution and ZOH oracles");
  oracle->add_option("--seed", check_seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      auto r = ssmr::cmd_train(config, seed, out ? std::optional<std::filesystem::path>(*out) : std::nullopt, log_line);
      std::printf("checkpoint %s\ncurve %s\ntest_accuracy %.4f\n", r.checkpoint.c_str(), r.curve.c_str(),
                  r.result.test_accuracy);
    } else if (*run) {
      std::optional<ssmr::ReportFormat> fmt;
      if (format) fmt = ssmr::parse_report_format(*format);
      auto r = ssmr::cmd_run(spec, seed, samples, out ? std::optional<std::filesystem::path>(*out) : std::nullopt, fmt,
                             log_line);
      std::printf("%zu rows\n", r.report.rows.size());
    } else if (*report) {
      std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
      auto r = ssmr::cmd_report(paths, report_out, ssmr::parse_report_format(report_format));
      std::printf("%zu rows\n", r.rows.size());
    } else if (*grad) {
      return print_checks(ssmr::run_grad_checks(check_seed));
    } else if (*oracle) {
      return print_checks(ssmr::run_oracles(check_seed));
    }
  } catch (const ssmr::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
