#include "ssmr/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "ssmr/gradcheck.hpp"
#include "ssmr/ops.hpp"
#include "ssmr/random.hpp"
#include "ssmr/ssm.hpp"

namespace ssmr {

// ---------------------------------------------------------------------------
// Config files

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

}  // namespace

IniConfig IniConfig::parse(std::string_view text, std::string source) {
  IniConfig c;
  c.source_ = std::move(source);
  c.text_ = std::string(text);
  std::istringstream in(c.text_);
  std::string raw;
  std::string section;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    auto s = trim(raw);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) {
        throw ValidationError(c.source_ + ":" + std::to_string(line) + ": malformed section header '" + s + "'");
      }
      section = trim(std::string_view(s).substr(1, s.size() - 2));
      if (c.sections_.count(section)) {
        throw ValidationError(c.source_ + ":" + std::to_string(line) + ": section [" + section + "] repeated");
      }
      c.sections_[section];
      c.order_.push_back(section);
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(c.source_ + ":" + std::to_string(line) + ": expected 'key = value', got '" + s + "'");
    }
    if (section.empty()) {
      throw ValidationError(c.source_ + ":" + std::to_string(line) + ": key outside of any [section]");
    }
    const auto key = trim(std::string_view(s).substr(0, eq));
    auto value = trim(std::string_view(s).substr(eq + 1));
    if (key.empty()) throw ValidationError(c.source_ + ":" + std::to_string(line) + ": empty key");
    for (const auto& e : c.sections_[section]) {
      if (e.key == key) {
        throw ValidationError(c.source_ + ":" + std::to_string(line) + ": key '" + key + "' already set on line " +
                              std::to_string(e.line));
      }
    }
    c.sections_[section].push_back({key, value, line});
  }
  return c;
}

IniConfig IniConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  auto c = parse(buf.str(), path.string());
  c.base_dir_ = path.parent_path();
  return c;
}

const IniConfig::Entry* IniConfig::find(const std::string& section, const std::string& key) const {
  auto it = sections_.find(section);
  if (it == sections_.end()) return nullptr;
  for (const auto& e : it->second)
    if (e.key == key) return &e;
  return nullptr;
}

void IniConfig::fail_at(const Entry& e, const std::string& what) const {
  throw ValidationError(source_ + ":" + std::to_string(e.line) + ": " + e.key + ": " + what);
}

bool IniConfig::has(const std::string& section, const std::string& key) const { return find(section, key) != nullptr; }
bool IniConfig::has_section(const std::string& section) const { return sections_.count(section) > 0; }

std::string IniConfig::get(const std::string& section, const std::string& key, const std::string& fallback) const {
  const auto* e = find(section, key);
  return e ? e->value : fallback;
}

std::int64_t IniConfig::get_int(const std::string& section, const std::string& key, std::int64_t fallback) const {
  const auto* e = find(section, key);
  if (!e) return fallback;
  try {
    std::size_t used = 0;
    const auto v = std::stoll(e->value, &used);
    if (used == e->value.size()) return v;
  } catch (const std::exception&) {
  }
  fail_at(*e, "'" + e->value + "' is not an integer");
}

double IniConfig::get_double(const std::string& section, const std::string& key, double fallback) const {
  const auto* e = find(section, key);
  if (!e) return fallback;
  try {
    std::size_t used = 0;
    const auto v = std::stod(e->value, &used);
    if (used == e->value.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  fail_at(*e, "'" + e->value + "' is not a number");
}

bool IniConfig::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  const auto* e = find(section, key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
  if (e->value == "false" || e->value == "0" || e->value == "no") return false;
  fail_at(*e, "'" + e->value + "' is not a boolean");
}

std::vector<std::int64_t> IniConfig::get_ints(const std::string& section, const std::string& key,
                                              std::vector<std::int64_t> fallback) const {
  const auto* e = find(section, key);
  if (!e) return fallback;
  std::vector<std::int64_t> out;
  for (const auto& item : split_list(e->value)) {
    try {
      std::size_t used = 0;
      const auto v = std::stoll(item, &used);
      if (used != item.size()) throw std::invalid_argument("trailing");
      out.push_back(v);
    } catch (const std::exception&) {
      fail_at(*e, "'" + item + "' is not an integer");
    }
  }
  if (out.empty()) fail_at(*e, "list is empty");
  return out;
}

std::vector<std::string> IniConfig::get_strings(const std::string& section, const std::string& key,
                                                std::vector<std::string> fallback) const {
  const auto* e = find(section, key);
  if (!e) return fallback;
  auto out = split_list(e->value);
  if (out.empty()) fail_at(*e, "list is empty");
  return out;
}

std::vector<std::string> IniConfig::keys(const std::string& section) const {
  std::vector<std::string> out;
  auto it = sections_.find(section);
  if (it != sections_.end())
    for (const auto& e : it->second) out.push_back(e.key);
  return out;
}

void IniConfig::restrict_keys(const std::string& section, const std::vector<std::string>& allowed) const {
  auto it = sections_.find(section);
  if (it == sections_.end()) return;
  for (const auto& e : it->second) {
    if (std::find(allowed.begin(), allowed.end(), e.key) == allowed.end()) fail_at(e, "unknown key in [" + section + "]");
  }
}

void IniConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  auto& entries = sections_[section];
  for (auto& e : entries) {
    if (e.key == key) {
      e.value = value;
      return;
    }
  }
  entries.push_back({key, value, 0});
}

std::filesystem::path IniConfig::resolve(const std::string& path) const {
  std::filesystem::path p(path);
  return p.is_absolute() || base_dir_.empty() ? p : base_dir_ / p;
}

ModelConfig model_config_from(const IniConfig& ini) {
  ini.restrict_keys("model", {"arch", "image_size", "patch_size", "channels", "depths", "dims", "n_state",
                              "n_classes", "window", "seed"});
  ModelConfig c;
  c.arch = parse_arch(ini.get("model", "arch", std::string(to_string(c.arch))));
  c.image_size = ini.get_int("model", "image_size", c.image_size);
  c.patch_size = ini.get_int("model", "patch_size", c.patch_size);
  c.channels = ini.get_int("model", "channels", c.channels);
  if (c.arch == Arch::vssm_flat_bidir) {
    c.depths = {4};
    c.dims = {32};
  }
  c.depths = ini.get_ints("model", "depths", c.depths);
  c.dims = ini.get_ints("model", "dims", c.dims);
  c.n_state = ini.get_int("model", "n_state", c.n_state);
  c.n_classes = ini.get_int("model", "n_classes", c.n_classes);
  c.window = ini.get_int("model", "window", c.window);
  c.seed = static_cast<std::uint64_t>(ini.get_int("model", "seed", 0));
  c.validate();
  return c;
}

namespace {

const std::vector<std::string> kDataKeys{"source", "n_train", "n_test", "seed", "n_classes", "image_size", "channels",
                                         "contrast_min", "contrast_max", "noise", "train_images", "train_labels", "test_images", "test_labels"};

void check_matches(const Dataset& d, std::int64_t n_classes, std::int64_t image_size, std::int64_t channels) {
  if (d.n_classes != n_classes) {
    throw ValidationError("dataset has n_classes=" + std::to_string(d.n_classes) + " but the model expects " +
                          std::to_string(n_classes));
  }
  if (d.image_size() != image_size || d.images.dim(2) != image_size || d.channels() != channels) {
    throw ValidationError("dataset images are " + shape_to_string(d.images.shape()) + ", model expects " +
                          std::to_string(image_size) + "x" + std::to_string(image_size) + "x" + std::to_string(channels));
  }
}

Dataset load_split(const IniConfig& ini, bool train_split, std::int64_t n_classes, std::int64_t image_size,
                   std::int64_t channels) {
  ini.restrict_keys("data", kDataKeys);
  const auto source = ini.get("data", "source", "synth");
  const auto classes = ini.get_int("data", "n_classes", n_classes);
  Dataset d;
  if (source == "synth") {
    const auto seed = static_cast<std::uint64_t>(ini.get_int("data", "seed", 0));
    const auto n = train_split ? ini.get_int("data", "n_train", 3000) : ini.get_int("data", "n_test", 512);
    SynthStyle style;
    style.contrast_min = ini.get_double("data", "contrast_min", style.contrast_min);
    style.contrast_max = ini.get_double("data", "contrast_max", style.contrast_max);
    style.noise = ini.get_double("data", "noise", style.noise);
    d = synth_dataset(n, ini.get_int("data", "image_size", image_size), classes, train_split ? seed : seed + 1,
                      ini.get_int("data", "channels", channels), style);
    d.split = train_split ? "synth-train" : "synth-test";
  } else if (source == "idx") {
    const std::string which = train_split ? "train" : "test";
    if (!ini.has("data", which + "_images") || !ini.has("data", which + "_labels")) {
      throw ValidationError("[data] source = idx needs " + which + "_images and " + which + "_labels");
    }
    d = load_idx(ini.resolve(ini.get("data", which + "_images", "")), ini.resolve(ini.get("data", which + "_labels", "")),
                 classes);
    d.split = which;
  } else {
    throw ValidationError("[data] source must be synth or idx, got '" + source + "'");
  }
  check_matches(d, n_classes, image_size, channels);
  return d;
}

}  // namespace

DataSplits load_data(const IniConfig& ini, const ModelConfig& model) {
  return {load_split(ini, true, model.n_classes, model.image_size, model.channels),
          load_split(ini, false, model.n_classes, model.image_size, model.channels)};
}

Dataset load_eval_data(const IniConfig& ini, std::int64_t n_classes, std::int64_t image_size, std::int64_t channels) {
  return load_split(ini, false, n_classes, image_size, channels);
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(Model& model, const Dataset& train_set, const Dataset* test_set, const TrainOptions& options,
                  const std::function<void(const std::string&)>& log) {
  const auto& cfg = model.config();
  check_matches(train_set, cfg.n_classes, cfg.image_size, cfg.channels);
  if (test_set) check_matches(*test_set, cfg.n_classes, cfg.image_size, cfg.channels);
  if (options.epochs < 1 || options.batch < 1 || !(options.lr > 0.0)) {
    throw ValidationError("training needs epochs >= 1, batch >= 1 and lr > 0");
  }

  const auto& params = model.params();
  std::vector<std::vector<double>> m1, m2;
  for (const auto& p : params) {
    m1.emplace_back(static_cast<std::size_t>(p.value.numel()), 0.0);
    m2.emplace_back(static_cast<std::size_t>(p.value.numel()), 0.0);
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const auto steps_per_epoch = (train_set.size() + options.batch - 1) / options.batch;
  auto total_steps = steps_per_epoch * options.epochs;
  if (options.max_steps > 0) total_steps = std::min(total_steps, options.max_steps);

  Rng rng(options.seed);
  TrainResult result;
  result.curve.set_meta("seed", std::to_string(options.seed));
  result.curve.set_meta("config_hash", hex64(fnv1a64(cfg.to_text())));
  result.curve.set_meta("library_version", kLibraryVersion);
  const std::string name(to_string(cfg.arch));
  std::int64_t step = 0;
  for (int epoch = 0; epoch < options.epochs && step < total_steps; ++epoch) {
    const auto order = rng.permutation(train_set.size());
    double epoch_loss = 0.0;
    std::int64_t epoch_steps = 0;
    for (std::int64_t begin = 0; begin < train_set.size() && step < total_steps; begin += options.batch) {
      const auto end = std::min(train_set.size(), begin + options.batch);
      const auto batch = train_set.subset(std::vector<std::int64_t>(order.begin() + begin, order.begin() + end));
      Tape tape;
      std::vector<NodeId> nodes;
      const auto logits = model.forward_bound(batch.images, tape, nodes);
      const auto loss = cross_entropy(logits, std::span<const int>(batch.labels));
      const auto grads = tape.backward(loss, nodes);

      const double progress = static_cast<double>(step) / static_cast<double>(std::max<std::int64_t>(1, total_steps - 1));
      const double lr = options.lr * (options.final_lr_fraction +
                                      (1.0 - options.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
      std::vector<Tensor> updated;
      updated.reserve(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = grads.at(nodes[i]).data();
        auto v = params[i].value.to_vector();
        for (std::size_t j = 0; j < v.size(); ++j) {
          const double gj = g[j];
          if (!std::isfinite(gj)) throw NumericError("non-finite gradient for " + params[i].name);
          m1[i][j] = b1 * m1[i][j] + (1.0 - b1) * gj;
          m2[i][j] = b2 * m2[i][j] + (1.0 - b2) * gj * gj;
          v[j] = static_cast<float>(v[j] - lr * (m1[i][j] / c1) / (std::sqrt(m2[i][j] / c2) + eps));
        }
        updated.emplace_back(params[i].value.shape(), std::move(v));
      }
      model.set_param_values(std::move(updated));
      result.step_losses.push_back(loss.item());
      epoch_loss += loss.item();
      ++epoch_steps;
      ++step;
    }
    const std::string cond = "epoch=" + std::to_string(epoch + 1);
    result.curve.rows.push_back({name, "train", cond, "train_loss", epoch_loss / static_cast<double>(epoch_steps)});
    if (test_set && test_set->size() > 0) {
      ModelClassifier f(model);
      result.test_accuracy = accuracy(f, *test_set);
      result.curve.rows.push_back({name, "train", cond, "test_accuracy", result.test_accuracy});
    }
    if (log) {
      std::ostringstream o;
      o << "epoch " << epoch + 1 << " loss " << epoch_loss / static_cast<double>(epoch_steps);
      if (test_set) o << " test_acc " << result.test_accuracy;
      log(o.str());
    }
  }
  return result;
}

TrainOutcome cmd_train(const std::filesystem::path& config, std::optional<std::uint64_t> seed_override,
                       std::optional<std::filesystem::path> out_override,
                       const std::function<void(const std::string&)>& log) {
  auto ini = IniConfig::load(config);
  ini.restrict_keys("train", {"epochs", "batch", "lr", "final_lr_fraction", "seed", "out", "curve", "max_steps"});
  if (seed_override) {
    ini.set("train", "seed", std::to_string(*seed_override));
    ini.set("model", "seed", std::to_string(*seed_override));
  }
  const auto mcfg = model_config_from(ini);
  const auto data = load_data(ini, mcfg);
  TrainOptions opt;
  opt.epochs = static_cast<int>(ini.get_int("train", "epochs", opt.epochs));
  opt.batch = ini.get_int("train", "batch", opt.batch);
  opt.lr = ini.get_double("train", "lr", opt.lr);
  opt.final_lr_fraction = ini.get_double("train", "final_lr_fraction", opt.final_lr_fraction);
  opt.seed = static_cast<std::uint64_t>(ini.get_int("train", "seed", 0));
  opt.max_steps = ini.get_int("train", "max_steps", 0);

  TrainOutcome out{Model::build(mcfg), {}, {}, {}};
  out.result = train(out.model, data.train, &data.test, opt, log);
  out.result.curve.set_meta("config_hash", hex64(fnv1a64(ini.text())));
  out.checkpoint = out_override ? *out_override : ini.resolve(ini.get("train", "out", "model.ssmr"));
  auto curve_default = out.checkpoint;
  curve_default.replace_extension();
  out.curve = ini.has("train", "curve") && !out_override ? ini.resolve(ini.get("train", "curve", ""))
                                                          : std::filesystem::path(curve_default.string() + "_curve.csv");
  if (out.checkpoint.has_parent_path()) std::filesystem::create_directories(out.checkpoint.parent_path());
  save_checkpoint(out.model, out.checkpoint);
  emit_report(out.result.curve, ReportFormat::csv, out.curve);
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

std::string_view to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::whitebox: return "whitebox";
    case ExperimentKind::patchfool: return "patchfool";
    case ExperimentKind::masked: return "masked";
    case ExperimentKind::transfer: return "transfer";
    case ExperimentKind::occlusion: return "occlusion";
    case ExperimentKind::shuffle: return "shuffle";
    case ExperimentKind::heatmap: return "heatmap";
    case ExperimentKind::corruption: return "corruption";
  }
  return "?";
}

ExperimentKind parse_experiment_kind(std::string_view name) {
  for (auto k : {ExperimentKind::whitebox, ExperimentKind::patchfool, ExperimentKind::masked, ExperimentKind::transfer,
                 ExperimentKind::occlusion, ExperimentKind::shuffle, ExperimentKind::heatmap, ExperimentKind::corruption})
    if (to_string(k) == name) return k;
  throw ValidationError("unknown experiment kind '" + std::string(name) +
                        "' (expected whitebox, patchfool, masked, transfer, occlusion, shuffle, heatmap, corruption)");
}

void ExperimentSpec::validate() const {
  const auto need = kind == ExperimentKind::transfer ? 2u : 1u;
  if (checkpoints.size() < need) {
    throw ValidationError("experiment " + std::string(to_string(kind)) + " needs at least " + std::to_string(need) +
                          " checkpoint(s), got " + std::to_string(checkpoints.size()));
  }
  if (samples < 1) throw ValidationError("samples must be >= 1");
  if (workers < 1) throw ValidationError("workers must be >= 1");
  if (batch < 1) throw ValidationError("batch must be >= 1");
  if (!(epsilon >= 0.0)) throw ValidationError("epsilon must be >= 0");
  patch_fool.validate();
  for (auto n : patch_counts)
    if (n < 1) throw ValidationError("patch counts must be >= 1");
  for (int s : severities)
    if (s < 1 || s > 5) throw ValidationError("severities must be in [1, 5]");
}

ExperimentSpec parse_experiment_spec(const IniConfig& ini) {
  ini.restrict_keys("experiment", {"kind", "samples", "seed", "out", "format", "workers", "batch"});
  ini.restrict_keys("attack", {"epsilon", "step", "iterations", "pf_step", "pf_iterations", "pf_decay",
                               "pf_decay_every", "pf_alpha", "pf_early_stop", "patches", "masks"});
  ini.restrict_keys("perturb", {"budgets", "grids", "severities", "corruptions"});
  ExperimentSpec s;
  if (!ini.has("experiment", "kind")) throw ValidationError("[experiment] kind is required");
  s.kind = parse_experiment_kind(ini.get("experiment", "kind", ""));
  for (const auto& name : ini.keys("models")) s.checkpoints.emplace_back(name, ini.resolve(ini.get("models", name, "")));
  s.samples = ini.get_int("experiment", "samples", s.samples);
  s.seed = static_cast<std::uint64_t>(ini.get_int("experiment", "seed", 0));
  s.out = ini.resolve(ini.get("experiment", "out", std::string(to_string(s.kind)) + ".csv"));
  s.format = parse_report_format(ini.get("experiment", "format", "csv"));
  s.workers = static_cast<int>(ini.get_int("experiment", "workers", 1));
  s.batch = ini.get_int("experiment", "batch", s.batch);

  // attack budgets are written in 1/255 units
  s.epsilon = ini.get_double("attack", "epsilon", 1.0) / 255.0;
  s.step_size = ini.get_double("attack", "step", 0.5) / 255.0;
  s.pgd_iterations = static_cast<int>(ini.get_int("attack", "iterations", 5));
  auto& pf = s.patch_fool;
  pf.step_size = ini.get_double("attack", "pf_step", pf.step_size);
  pf.iterations = static_cast<int>(ini.get_int("attack", "pf_iterations", pf.iterations));
  pf.decay = ini.get_double("attack", "pf_decay", pf.decay);
  pf.decay_every = static_cast<int>(ini.get_int("attack", "pf_decay_every", pf.decay_every));
  pf.alpha = ini.get_double("attack", "pf_alpha", pf.alpha);
  pf.early_stop = ini.get_bool("attack", "pf_early_stop", false);
  pf.seed = s.seed;
  s.patch_counts = ini.get_ints("attack", "patches", s.patch_counts);
  if (ini.has("attack", "masks")) {
    s.mask_conditions.clear();
    for (const auto& m : ini.get_strings("attack", "masks", {})) s.mask_conditions.push_back(StreamSet::parse(m));
  }
  s.drop_budgets = ini.get_ints("perturb", "budgets", s.drop_budgets);
  s.shuffle_grids = ini.get_ints("perturb", "grids", s.shuffle_grids);
  {
    const auto sev = ini.get_ints("perturb", "severities", {1, 2, 3, 4, 5});
    s.severities.assign(sev.begin(), sev.end());
  }
  if (ini.has("perturb", "corruptions")) {
    s.corruptions.clear();
    for (const auto& c : ini.get_strings("perturb", "corruptions", {})) s.corruptions.push_back(parse_corruption(c));
  }
  s.text = ini.text();
  return s;
}

namespace {

std::string mask_label(const StreamSet& m) {
  if (m.empty()) return "pgd";
  std::string out = "w/o ";
  bool first = true;
  for (auto t : {StreamTag::A, StreamTag::B, StreamTag::C, StreamTag::Delta}) {
    if (!m.contains(t)) continue;
    out += (first ? "" : "+") + std::string(to_string(t));
    first = false;
  }
  return out;
}

double fraction_correct(const std::vector<std::int64_t>& per_chunk, std::int64_t n) {
  std::int64_t total = 0;
  for (auto v : per_chunk) total += v;
  return static_cast<double>(total) / static_cast<double>(n);
}

}  // namespace

ExperimentOutput run_experiment(const ExperimentSpec& spec, const std::vector<NamedModel>& models, const Dataset& data,
                                const std::function<void(const std::string&)>& log) {
  spec.validate();
  if (models.size() < spec.checkpoints.size() || models.empty()) throw ValidationError("run_experiment: models missing");
  Dataset eval = data;
  if (spec.samples < data.size()) {
    Rng rng(spec.seed);
    eval = data.subset(rng.sample(data.size(), spec.samples));
  }
  eval.validate();

  ExperimentOutput out;
  auto& rep = out.report;
  rep.set_meta("experiment", std::string(to_string(spec.kind)));
  rep.set_meta("seed", std::to_string(spec.seed));
  rep.set_meta("config_hash", hex64(fnv1a64(spec.text)));
  rep.set_meta("samples", std::to_string(eval.size()));
  rep.set_meta("library_version", kLibraryVersion);
  rep.set_meta("checkpoint_version", std::to_string(kCheckpointVersion));
  std::string model_hashes;
  for (const auto& m : models) {
    const auto bytes = checkpoint_bytes(m.model);
    model_hashes += (model_hashes.empty() ? "" : " ") + m.name + ":" +
                    hex64(fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
  }
  rep.set_meta("model_hashes", model_hashes);

  AttackConfig fg = AttackConfig::defaults(AttackKind::fgsm);
  fg.epsilon = fg.step_size = spec.epsilon;
  fg.seed = spec.seed;
  AttackConfig pg = AttackConfig::defaults(AttackKind::pgd);
  pg.epsilon = spec.epsilon;
  pg.step_size = spec.step_size;
  pg.iterations = spec.pgd_iterations;
  pg.seed = spec.seed;
  const auto chunks = (eval.size() + spec.batch - 1) / spec.batch;
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  auto add = [&](const std::string& model, const std::string& cond, const std::string& metric, double v) {
    rep.rows.push_back({model, std::string(to_string(spec.kind)), cond, metric, v});
    say(model + " " + cond + " " + metric + " " + format_value(v));
  };

  switch (spec.kind) {
    case ExperimentKind::whitebox:
      rep.set_meta("fgsm", fg.describe());
      rep.set_meta("pgd", pg.describe() + " init=clean");
      for (const auto& m : models) {
        ModelClassifier f(m.model);
        add(m.name, "clean", "accuracy", accuracy(f, eval));
        add(m.name, "fgsm", "robust_accuracy", robust_accuracy(f, eval, fg, spec.batch, spec.workers));
        add(m.name, "pgd", "robust_accuracy", robust_accuracy(f, eval, pg, spec.batch, spec.workers));
      }
      break;

    case ExperimentKind::patchfool:
      rep.set_meta("patch_fool", spec.patch_fool.describe());
      rep.set_meta("attention_term", "active for attention models, inactive for SSM models");
      for (const auto& m : models) {
        ModelClassifier f(m.model);
        add(m.name, "clean", "accuracy", accuracy(f, eval));
        std::vector<double> accs;
        for (auto n : spec.patch_counts) {
          AttackConfig pf = spec.patch_fool;
          pf.n_patches = static_cast<int>(n);
          accs.push_back(robust_accuracy(f, eval, pf, spec.batch, spec.workers));
          add(m.name, "P" + std::to_string(n), "robust_accuracy", accs.back());
        }
        add(m.name, "P" + std::to_string(spec.patch_counts.front()) + "-P" + std::to_string(spec.patch_counts.back()),
            "difference", accs.front() - accs.back());
      }
      break;

    case ExperimentKind::masked: {
      rep.set_meta("pgd", pg.describe() + " init=clean");
      for (const auto& m : models) {
        ModelClassifier f(m.model);
        add(m.name, "clean", "accuracy", accuracy(f, eval));
        std::vector<StreamSet> conditions{StreamSet{}};
        conditions.insert(conditions.end(), spec.mask_conditions.begin(), spec.mask_conditions.end());
        for (const auto& mask : conditions) {
          AttackConfig c = pg;
          c.mask = mask;
          std::vector<std::int64_t> robust(static_cast<std::size_t>(chunks), 0), clean(static_cast<std::size_t>(chunks), 0);
          parallel_chunks(chunks, spec.workers, [&](std::int64_t k) {
            const auto begin = k * spec.batch;
            const auto part = eval.slice(begin, std::min(eval.size(), begin + spec.batch));
            const auto r = masked_attack(f, part.images, part.labels, c);
            for (std::size_t i = 0; i < r.success.size(); ++i) {
              robust[static_cast<std::size_t>(k)] += !r.success[i];
              const auto row = r.clean_logits.data().subspan(i * static_cast<std::size_t>(r.clean_logits.dim(1)),
                                                             static_cast<std::size_t>(r.clean_logits.dim(1)));
              clean[static_cast<std::size_t>(k)] +=
                  (std::max_element(row.begin(), row.end()) - row.begin()) == part.labels[i];
            }
          });
          add(m.name, mask_label(mask), "clean_accuracy", fraction_correct(clean, eval.size()));
          add(m.name, mask_label(mask), "robust_accuracy", fraction_correct(robust, eval.size()));
        }
      }
      break;
    }

    case ExperimentKind::transfer:
      rep.set_meta("pgd", pg.describe() + " init=clean");
      for (std::size_t a = 0; a < models.size(); ++a)
        for (std::size_t b = a + 1; b < models.size(); ++b) {
          ModelClassifier fa(models[a].model), fb(models[b].model);
          for (auto& row : transfer_eval(fa, models[a].name, fb, models[b].name, eval, pg, spec.batch, spec.workers)) {
            add(row.model, row.condition, row.metric, row.value);
          }
        }
      break;

    case ExperimentKind::occlusion:
      for (const auto& m : models) {
        ModelClassifier f(m.model);
        const auto p = m.model.config().patch_size;
        add(m.name, "budget=0", "accuracy", accuracy(f, eval));
        for (auto k : spec.drop_budgets) {
          PerturbationSpec dense{PerturbKind::patch_drop, k, p};
          dense.seed = spec.seed;
          PerturbationSpec sparse{PerturbKind::pixel_drop, k * p * p};
          sparse.seed = spec.seed;
          const auto a_dense = perturbed_accuracy(f, eval, dense);
          const auto a_sparse = perturbed_accuracy(f, eval, sparse);
          const auto cond = "budget=" + std::to_string(k);
          add(m.name, cond, "patch_drop_accuracy", a_dense);
          add(m.name, cond, "pixel_drop_accuracy", a_sparse);
          add(m.name, cond, "pixel_minus_patch", a_sparse - a_dense);
        }
      }
      break;

    case ExperimentKind::shuffle:
      for (const auto& m : models) {
        ModelClassifier f(m.model);
        for (auto g : spec.shuffle_grids) {
          PerturbationSpec s;
          s.kind = PerturbKind::grid_shuffle;
          s.grid = g;
          s.seed = spec.seed;
          add(m.name, "g=" + std::to_string(g), "accuracy", perturbed_accuracy(f, eval, s));
        }
      }
      break;

    case ExperimentKind::heatmap:
      rep.set_meta("patch_fool", spec.patch_fool.describe());
      rep.set_meta("attention_term", "active for attention models, inactive for SSM models");
      for (const auto& m : models) {
        ModelClassifier f(m.model);
        auto h = positional_sweep(f, m.model.config().grid(), eval, spec.patch_fool, spec.batch, spec.workers);
        for (std::size_t i = 0; i < h.values.size(); ++i) add(m.name, "patch=" + std::to_string(i), "robust_accuracy", h.values[i]);
        add(m.name, "center_mean", "robust_accuracy", h.center_mean);
        add(m.name, "border_mean", "robust_accuracy", h.border_mean);
        out.heatmaps.emplace_back(m.name, std::move(h));
      }
      break;

    case ExperimentKind::corruption:
      for (const auto& m : models) {
        ModelClassifier f(m.model);
        add(m.name, "clean", "error", 1.0 - accuracy(f, eval));
        double total = 0.0;
        int count = 0;
        for (auto kind : spec.corruptions)
          for (int sev : spec.severities) {
            PerturbationSpec s;
            s.kind = PerturbKind::corruption;
            s.corruption = kind;
            s.severity = sev;
            s.seed = spec.seed;
            const double err = 1.0 - perturbed_accuracy(f, eval, s);
            add(m.name, std::string(to_string(kind)) + " s=" + std::to_string(sev), "error", err);
            total += err;
            ++count;
          }
        add(m.name, "mCE", "error", total / count);
      }
      rep.set_meta("mce", "plain mean of error over kinds and severities");
      break;
  }
  return out;
}

ExperimentOutput cmd_run(const std::filesystem::path& spec_path, std::optional<std::uint64_t> seed_override,
                         std::optional<std::int64_t> samples_override, std::optional<std::filesystem::path> out_override,
                         std::optional<ReportFormat> format_override, const std::function<void(const std::string&)>& log) {
  auto ini = IniConfig::load(spec_path);
  if (seed_override) ini.set("experiment", "seed", std::to_string(*seed_override));
  if (samples_override) ini.set("experiment", "samples", std::to_string(*samples_override));
  auto spec = parse_experiment_spec(ini);
  if (out_override) spec.out = *out_override;
  if (format_override) spec.format = *format_override;
  spec.validate();

  std::vector<NamedModel> models;
  for (const auto& [name, path] : spec.checkpoints) models.push_back({name, load_checkpoint(path)});
  const auto& first = models.front().model.config();
  for (const auto& m : models) {
    const auto& c = m.model.config();
    if (c.image_size != first.image_size || c.channels != first.channels || c.n_classes != first.n_classes) {
      throw ValidationError("checkpoint " + m.name + " disagrees with " + models.front().name + " on input or class shape");
    }
  }
  const auto data = load_eval_data(ini, first.n_classes, first.image_size, first.channels);

  std::string current;
  ExperimentOutput out;
  try {
    out = run_experiment(spec, models, data, [&](const std::string& line) {
      current = line;
      if (log) log(line);
    });
  } catch (const Error& e) {
    const std::string where = current.empty() ? "before the first row" : "after row '" + current + "'";
    if (dynamic_cast<const ValidationError*>(&e)) throw ValidationError(std::string(to_string(spec.kind)) + " failed " + where + ": " + e.what());
    throw Error(std::string(to_string(spec.kind)) + " failed " + where + ": " + e.what());
  }
  emit_report(out.report, spec.format, spec.out);
  for (const auto& [name, h] : out.heatmaps) {
    auto stem = spec.out;
    stem.replace_extension();
    std::ofstream(stem.string() + "_" + name + ".csv", std::ios::binary) << h.to_csv();
    std::ofstream(stem.string() + "_" + name + ".json", std::ios::binary) << h.to_json();
  }
  return out;
}

EvalReport merge_reports(const std::vector<EvalReport>& inputs) {
  if (inputs.empty()) throw ValidationError("report merge needs at least one input");
  EvalReport merged;
  for (const auto& [k, v] : inputs.front().metadata) {
    std::string value = v;
    for (std::size_t i = 1; i < inputs.size(); ++i) {
      const auto* other = inputs[i].meta(k);
      const std::string ov = other ? *other : "";
      if (ov != v) value += " | " + ov;
    }
    merged.set_meta(k, value);
  }
  for (std::size_t i = 1; i < inputs.size(); ++i)
    for (const auto& [k, v] : inputs[i].metadata)
      if (!merged.meta(k)) merged.set_meta(k, v);

  std::set<std::tuple<std::string, std::string, std::string, std::string>> seen;
  for (const auto& r : inputs)
    for (const auto& row : r.rows) {
      if (!seen.emplace(row.model, row.experiment, row.condition, row.metric).second) {
        throw ValidationError("duplicate report key (model=" + row.model + ", experiment=" + row.experiment +
                              ", condition=" + row.condition + ", metric=" + row.metric + ")");
      }
      merged.rows.push_back(row);
    }
  return merged;
}

EvalReport cmd_report(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out,
                      ReportFormat format) {
  std::vector<EvalReport> reports;
  for (const auto& p : inputs) {
    try {
      reports.push_back(read_report(p));
    } catch (const FormatError& e) {
      throw FormatError(e.fault(), p.string() + ": " + e.what());
    }
  }
  auto merged = merge_reports(reports);
  emit_report(merged, format, out);
  return merged;
}

// ---------------------------------------------------------------------------
// Self-checks

namespace {

double integrate(double a, double b, double x, double h0, double duration, double step) {
  double h = h0, t = 0.0;
  while (t < duration) {
    const double dt = std::min(step, duration - t);
    const double k1 = a * h + b * x;
    const double k2 = a * (h + 0.5 * dt * k1) + b * x;
    const double k3 = a * (h + 0.5 * dt * k2) + b * x;
    const double k4 = a * (h + dt * k3) + b * x;
    h += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    t += dt;
  }
  return h;
}

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

std::vector<CheckLine> run_oracles(std::uint64_t seed) {
  Rng rng(seed);
  double worst_conv = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + static_cast<std::int64_t>(rng.below(8));
    const auto len = 1 + static_cast<std::int64_t>(rng.below(64));
    const auto a_bar = random_tensor(rng, {n}, 0.05, 0.98);
    const auto b_bar = random_tensor(rng, {n}, -1.0, 1.0);
    const auto c = random_tensor(rng, {n}, -1.0, 1.0);
    const auto x = random_tensor(rng, {len}, -1.0, 1.0);
    std::vector<float> ar, br, cr;
    for (std::int64_t t = 0; t < len; ++t) {
      ar.insert(ar.end(), a_bar.data().begin(), a_bar.data().end());
      br.insert(br.end(), b_bar.data().begin(), b_bar.data().end());
      cr.insert(cr.end(), c.data().begin(), c.data().end());
    }
    const auto rec = ssm::scan_recurrent(Tensor({len, n}, ar), Tensor({len, n}, br), Tensor({len, n}, cr), x);
    const auto conv = ssm::scan_convolutional(a_bar, b_bar, c, x);
    double scale = 0.0, err = 0.0;
    for (std::int64_t t = 0; t < len; ++t) {
      scale = std::max({scale, std::abs(static_cast<double>(rec[t])), std::abs(static_cast<double>(conv[t]))});
      err = std::max(err, std::abs(static_cast<double>(rec[t]) - conv[t]));
    }
    worst_conv = std::max(worst_conv, scale > 0 ? err / scale : 0.0);
  }

  double worst_zoh = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const bool series = trial % 10 == 0;
    const double a = series ? -rng.uniform(1e-6, 5e-5) : rng.uniform(-2.0, -0.1);
    const double delta = series ? rng.uniform(0.1, 1.0) : std::exp(rng.uniform(std::log(1e-3), 0.0));
    const double b = rng.uniform(-2.0, 2.0);
    const auto r = ssm::discretize_zoh(Tensor64({1}, {a}), Tensor64({1}, {b}), delta);
    const double want_a = integrate(a, 0.0, 0.0, 1.0, delta, 1e-6);
    const double want_b = integrate(a, b, 1.0, 0.0, delta, 1e-6);
    worst_zoh = std::max({worst_zoh, std::abs(r.a_bar[0] - want_a) / std::abs(want_a),
                          std::abs(r.b_bar[0] - want_b) / std::max(std::abs(want_b), 1e-30)});
  }
  return {{"recurrence_vs_convolution_200", worst_conv, 1e-5, worst_conv < 1e-5},
          {"zoh_vs_rk4_100", worst_zoh, 1e-4, worst_zoh < 1e-4}};
}

std::vector<CheckLine> run_grad_checks(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CheckLine> out;
  auto record = [&](const std::string& name, const GradCheckReport& r) {
    out.push_back({name, r.max_rel_error, 1e-3, r.passed});
  };
  {
    const auto w = random_tensor(rng, {6, 5}, -1, 1);
    const std::vector<int> labels{1, 4, 0};
    auto f = [&](const auto& x) {
      using T = typename std::decay_t<decltype(x)>::value_type;
      const auto wt = w.cast<T>();
      auto h = silu(matmul(x, wt));
      auto z = add(softplus(h), sigmoid(scale(h, T(0.5))));
      auto p = softmax(z);
      return add(cross_entropy(z, std::span<const int>(labels)), mean(log(add(p, p))));
    };
    record("op_chain", grad_check(f, random_tensor(rng, {3, 6}, -1, 1), 1e-3, 1e-3));
  }
  {
    const std::int64_t h = 3, w = 3, dim = 4;
    const auto params = ssm::init_mixer_params(dim, 4, ssm::ScanMode::cross2d, rng);
    auto f = [&](const auto& x) {
      using T = typename std::decay_t<decltype(x)>::value_type;
      return mean(ssm::ss2d_block(x, h, w, params.template cast<T>()));
    };
    record("ss2d_block", grad_check(f, random_tensor(rng, {h * w, dim}, -1, 1), 1e-3, 1e-3));
  }
  for (auto arch : {Arch::vssm_hier, Arch::vssm_flat_bidir, Arch::attn_window}) {
    ModelConfig c;
    c.arch = arch;
    c.image_size = 8;
    c.patch_size = 2;
    c.depths = arch == Arch::vssm_flat_bidir ? std::vector<std::int64_t>{1} : std::vector<std::int64_t>{1, 1};
    c.dims = arch == Arch::vssm_flat_bidir ? std::vector<std::int64_t>{8} : std::vector<std::int64_t>{8, 16};
    c.n_state = 4;
    c.n_classes = 3;
    c.window = 2;
    c.seed = seed;
    const auto m = Model::build(c);
    const std::vector<int> labels{0, 2};
    auto f = [&](const auto& x) { return cross_entropy(m.forward(x), std::span<const int>(labels)); };
    record("classifier_" + std::string(to_string(arch)), grad_check(f, random_tensor(rng, {2, 8, 8, 1}, 0.1, 0.9), 1e-3, 1e-3));
  }
  return out;
}

}  // namespace ssmr
