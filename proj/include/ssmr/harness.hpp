#pragma once

// Training and the experiment matrix behind the command-line tool.
//
// Configs are plain text: "[section]" headers and "key = value" lines, '#'
// or ';' starts a comment. Relative paths resolve against the config file's
// directory.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssmr/attacks.hpp"
#include "ssmr/data_io.hpp"
#include "ssmr/model.hpp"
#include "ssmr/perturb.hpp"

namespace ssmr {

class IniConfig {
 public:
  static IniConfig parse(std::string_view text, std::string source = "<config>");
  static IniConfig load(const std::filesystem::path& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& section, const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<std::int64_t> get_ints(const std::string& section, const std::string& key,
                                     std::vector<std::int64_t> fallback) const;
  std::vector<std::string> get_strings(const std::string& section, const std::string& key,
                                       std::vector<std::string> fallback) const;
  // Keys of a section in file order.
  std::vector<std::string> keys(const std::string& section) const;
  bool has_section(const std::string& section) const;
  // Rejects keys outside `allowed`, naming the line.
  void restrict_keys(const std::string& section, const std::vector<std::string>& allowed) const;
  void set(const std::string& section, const std::string& key, const std::string& value);

  const std::string& text() const { return text_; }
  const std::filesystem::path& base_dir() const { return base_dir_; }
  std::filesystem::path resolve(const std::string& path) const;

 private:
  struct Entry {
    std::string key, value;
    int line;
  };
  const Entry* find(const std::string& section, const std::string& key) const;
  [[noreturn]] void fail_at(const Entry& e, const std::string& what) const;

  std::string source_;
  std::string text_;
  std::filesystem::path base_dir_;
  std::vector<std::string> order_;
  std::map<std::string, std::vector<Entry>> sections_;
};

ModelConfig model_config_from(const IniConfig& ini);

struct DataSplits {
  Dataset train;
  Dataset test;
};
// [data] source = synth (n_train, n_test, seed) or idx (train_images, ...).
// The synthetic test split uses seed + 1.
DataSplits load_data(const IniConfig& ini, const ModelConfig& model);
Dataset load_eval_data(const IniConfig& ini, std::int64_t n_classes, std::int64_t image_size, std::int64_t channels);

struct TrainOptions {
  int epochs = 6;
  std::int64_t batch = 32;
  double lr = 2e-3;
  double final_lr_fraction = 0.1;  // cosine schedule floor
  std::uint64_t seed = 0;
  // Stop after this many optimizer steps (0 = run every epoch).
  std::int64_t max_steps = 0;
};

struct TrainResult {
  std::vector<double> step_losses;
  EvalReport curve;  // per-epoch train loss and test accuracy
  double test_accuracy = 0.0;
};

// Adam on the mean cross-entropy, shuffled mini-batches, deterministic in
// options.seed. `test` may be empty (size 0 means skipped).
TrainResult train(Model& model, const Dataset& train_set, const Dataset* test_set, const TrainOptions& options,
                  const std::function<void(const std::string&)>& log = {});

struct TrainOutcome {
  Model model;
  TrainResult result;
  std::filesystem::path checkpoint;
  std::filesystem::path curve;
};
// Reads the config, trains, writes the checkpoint and training-curve csv.
TrainOutcome cmd_train(const std::filesystem::path& config, std::optional<std::uint64_t> seed_override = {},
                       std::optional<std::filesystem::path> out_override = {},
                       const std::function<void(const std::string&)>& log = {});

enum class ExperimentKind { whitebox, patchfool, masked, transfer, occlusion, shuffle, heatmap, corruption };
std::string_view to_string(ExperimentKind kind);
ExperimentKind parse_experiment_kind(std::string_view name);

struct NamedModel {
  std::string name;
  Model model;
};

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::whitebox;
  std::vector<std::pair<std::string, std::filesystem::path>> checkpoints;
  std::int64_t samples = 512;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  ReportFormat format = ReportFormat::csv;
  int workers = 1;
  std::int64_t batch = 32;

  double epsilon = 1.0 / 255.0;
  double step_size = 0.5 / 255.0;
  int pgd_iterations = 5;
  AttackConfig patch_fool = AttackConfig::defaults(AttackKind::patch_fool);
  std::vector<std::int64_t> patch_counts{1, 2, 3, 4};
  std::vector<std::int64_t> drop_budgets{1, 2, 4, 8, 16, 24, 32, 40, 48, 56};
  std::vector<std::int64_t> shuffle_grids{1, 2, 4, 8};
  std::vector<int> severities{1, 2, 3, 4, 5};
  std::vector<Corruption> corruptions = all_corruptions();
  std::vector<StreamSet> mask_conditions{{StreamTag::A}, {StreamTag::B}, {StreamTag::C}, {StreamTag::Delta}};

  std::string text;  // source text, hashed into every report
  void validate() const;
};

ExperimentSpec parse_experiment_spec(const IniConfig& ini);

struct ExperimentOutput {
  EvalReport report;
  std::vector<std::pair<std::string, Heatmap>> heatmaps;  // heatmap experiments only
};

ExperimentOutput run_experiment(const ExperimentSpec& spec, const std::vector<NamedModel>& models, const Dataset& data,
                                const std::function<void(const std::string&)>& log = {});

// Loads checkpoints and data, runs, writes the report (and heatmap grids).
ExperimentOutput cmd_run(const std::filesystem::path& spec_path, std::optional<std::uint64_t> seed_override = {},
                         std::optional<std::int64_t> samples_override = {},
                         std::optional<std::filesystem::path> out_override = {},
                         std::optional<ReportFormat> format_override = {},
                         const std::function<void(const std::string&)>& log = {});

// Merges reports keyed by (model, experiment, condition, metric).
EvalReport merge_reports(const std::vector<EvalReport>& inputs);
EvalReport cmd_report(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out,
                      ReportFormat format);

// Standalone numerical self-checks used by the `oracle` and `grad-check`
// subcommands.
struct CheckLine {
  std::string name;
  double value;
  double tolerance;
  bool passed;
};
std::vector<CheckLine> run_oracles(std::uint64_t seed);
std::vector<CheckLine> run_grad_checks(std::uint64_t seed);

}  // namespace ssmr
