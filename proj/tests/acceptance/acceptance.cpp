// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   acceptance [workdir]
//
// Trains the desk model from configs/train_vssm_hier.ini into workdir and
// runs the shipped experiment specs against it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ssmr/attacks.hpp"
#include "ssmr/data_io.hpp"
#include "ssmr/harness.hpp"
#include "ssmr/model.hpp"
#include "ssmr/ops.hpp"
#include "ssmr/perturb.hpp"
#include "ssmr/random.hpp"
#include "ssmr/ssm.hpp"

#include "../fuzz_corpus.hpp"
#include "../oracles.hpp"

using namespace ssmr;
using namespace ssmr::ssm;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

#ifndef SSMR_SOURCE_DIR
#define SSMR_SOURCE_DIR "."
#endif

namespace {

struct Verdict {
  int id;
  bool pass;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

void progress(const std::string& line) { std::cerr << "  .. " << line << std::endl; }

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor(std::move(shape), std::move(v));
}

Tensor repeat_rows(const Tensor& v, std::int64_t rows) {
  std::vector<float> out;
  for (std::int64_t r = 0; r < rows; ++r) out.insert(out.end(), v.data().begin(), v.data().end());
  return Tensor({rows, v.numel()}, std::move(out));
}

// Reverse-mode gradient of f at point versus 64-bit central differences.
template <typename F>
double grad_error(F&& f, const Tensor& point, double h = 1e-3) {
  Tape tape;
  const auto x = tape.leaf(point);
  const auto loss = f(x);
  std::vector<double> analytic(static_cast<std::size_t>(point.numel()), 0.0);
  if (loss.tracked()) analytic = oracle::to_double(tape.backward(loss, {x.node()}).at(x.node()));
  const auto numeric = oracle::central_differences(
      [&](const std::vector<double>& v) { return static_cast<double>(f(Tensor64(point.shape(), v)).item()); },
      oracle::to_double(point), h);
  return oracle::max_rel_error(analytic, numeric);
}

const ReportRow* find_row(const EvalReport& r, const std::string& condition, const std::string& metric) {
  for (const auto& row : r.rows)
    if (row.condition == condition && row.metric == metric) return &row;
  throw Error("report has no row " + condition + "/" + metric);
}
double value_of(const EvalReport& r, const std::string& condition, const std::string& metric) {
  return find_row(r, condition, metric)->value;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), static_cast<std::size_t>(a.numel()) * sizeof(float)) == 0;
}

// ---------------------------------------------------------------------------

Verdict recurrence_vs_convolution() {
  const auto t0 = Clock::now();
  Rng rng(1001);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + static_cast<std::int64_t>(rng.below(8));
    const auto len = 1 + static_cast<std::int64_t>(rng.below(64));
    const auto a = random_tensor(rng, {n}, -2.0, -0.05);
    const auto zoh = discretize_zoh(a, random_tensor(rng, {n}), static_cast<float>(rng.uniform(1e-3, 1.0)));
    const auto c = random_tensor(rng, {n});
    const auto x = random_tensor(rng, {len});
    const auto rec = scan_recurrent(repeat_rows(zoh.a_bar, len), repeat_rows(zoh.b_bar, len), repeat_rows(c, len), x);
    const auto conv = scan_convolutional(zoh.a_bar, zoh.b_bar, c, x);
    worst = std::max(worst, oracle::max_rel_error(oracle::to_double(rec), oracle::to_double(conv)));
  }
  const double secs = seconds_since(t0);
  return {1, worst < 1e-5 && secs < 10.0,
          "recurrence vs convolution, 200 configs: max rel " + fmt(worst) + " (tol 1e-05), " + fmt(secs, 3) +
              " s (limit 10 s)"};
}

Verdict zoh_exactness() {
  Rng rng(1002);
  double worst = 0.0;
  int series = 0;
  for (int draw = 0; draw < 100; ++draw) {
    const bool small = draw % 4 == 0;
    const double a = small ? -rng.uniform(1e-5, 1e-3) : -rng.uniform(0.05, 4.0);
    const double delta = small ? rng.uniform(1e-3, 0.09) : std::exp(rng.uniform(std::log(1e-3), 0.0));
    const double b = rng.uniform(-2.0, 2.0);
    const auto af = static_cast<float>(a), bf = static_cast<float>(b), df = static_cast<float>(delta);
    if (std::abs(static_cast<double>(af) * df) < 1e-4) ++series;
    // Integrate the exact float inputs the library receives.
    const auto ref = oracle::integrate_zoh(af, bf, df, 1e-6);
    const auto got = discretize_zoh(Tensor({1}, {af}), Tensor({1}, {bf}), df);
    worst = std::max({worst, oracle::rel_error(got.a_bar[0], ref.a_bar), oracle::rel_error(got.b_bar[0], ref.b_bar)});
  }
  return {2, worst < 1e-4 && series > 0,
          "ZOH vs 1e-6-step integration, 100 draws (" + std::to_string(series) + " in the |dA|<1e-4 branch): max rel " +
              fmt(worst) + " (tol 1e-04)"};
}

Verdict gradient_correctness() {
  Rng rng(1003);
  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double e) { worst[name] = std::max(worst[name], e); };

  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t m = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.below(4));
    const auto point = random_tensor(rng, {m, k});
    const auto positive = random_tensor(rng, {m, k}, 0.5, 2.0);
    const auto other = random_tensor(rng, {m, k});
    const auto rhs = random_tensor(rng, {k, 3});
    const auto w = random_tensor(rng, {m, k});
    const auto w3 = random_tensor(rng, {m, 3});
    const auto vec = random_tensor(rng, {k});
    const auto rows = random_tensor(rng, {m});
    const auto gamma = random_tensor(rng, {k}, 0.5, 1.5);
    const auto small = random_tensor(rng, {m, k}, -1e-3, 1e-3);
    // Rows whose values nearly coincide put the variance at the eps scale,
    // where a 1e-3 central difference no longer resolves the curvature.
    auto spread = random_tensor(rng, {m, k});
    for (std::int64_t i = 0; i < m && k > 1; ++i) {
      auto row = [&] { return std::span<const float>(spread.data().data() + i * k, static_cast<std::size_t>(k)); };
      while (std::ranges::max(row()) - std::ranges::min(row()) < 0.5) {
        auto redo = random_tensor(rng, {k});
        std::vector<float> v = spread.to_vector();
        std::copy(redo.data().begin(), redo.data().end(), v.begin() + i * k);
        spread = Tensor({m, k}, std::move(v));
      }
    }
    std::vector<int> labels(static_cast<std::size_t>(m));
    for (auto& l : labels) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    std::vector<std::int64_t> idx(5);
    for (auto& i : idx) i = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(m * k)));

#define CAST(t) t.template cast<typename std::decay_t<decltype(x)>::value_type>()
#define T_OF(x) typename std::decay_t<decltype(x)>::value_type
    note("add", grad_error([&](const auto& x) { return sum(mul(add(x, CAST(other)), CAST(w))); }, point));
    note("sub", grad_error([&](const auto& x) { return sum(mul(sub(CAST(other), x), CAST(w))); }, point));
    note("mul", grad_error([&](const auto& x) { return sum(mul(mul(x, x), CAST(w))); }, point));
    note("scale", grad_error([&](const auto& x) { return sum(mul(scale(x, T_OF(x)(-1.5)), CAST(w))); }, point));
    note("matmul", grad_error([&](const auto& x) { return sum(mul(matmul(x, CAST(rhs)), CAST(w3))); }, point));
    note("bmm", grad_error([&](const auto& x) {
           return sum(mul(reshape(bmm(reshape(x, {1, m, k}), reshape(CAST(rhs), {1, k, 3})), {m, 3}), CAST(w3)));
         }, point));
    note("outer", grad_error([&](const auto& x) {
           return sum(mul(outer(reshape(x, {m * k}), CAST(vec)), outer(CAST(reshape(w, {m * k})), CAST(vec))));
         }, point));
    note("exp", grad_error([&](const auto& x) { return sum(mul(exp(x), CAST(w))); }, point));
    note("log", grad_error([&](const auto& x) { return sum(mul(log(x), CAST(w))); }, positive));
    note("softplus", grad_error([&](const auto& x) { return sum(mul(softplus(x), CAST(w))); }, point));
    note("sigmoid", grad_error([&](const auto& x) { return sum(mul(sigmoid(x), CAST(w))); }, point));
    note("silu", grad_error([&](const auto& x) { return sum(mul(silu(x), CAST(w))); }, point));
    note("expm1_ratio", grad_error([&](const auto& x) { return sum(mul(expm1_ratio(x), CAST(w))); }, point));
    note("expm1_ratio(series)", grad_error([&](const auto& x) { return sum(mul(expm1_ratio(x), CAST(w))); }, small));
    note("mean", grad_error([&](const auto& x) { return mean(mul(x, x)); }, point));
    note("sum", grad_error([&](const auto& x) { return sum(mul(x, x)); }, point));
    note("reshape", grad_error([&](const auto& x) { return sum(mul(reshape(reshape(x, {m * k}), {m, k}), CAST(w))); }, point));
    note("transpose2d", grad_error([&](const auto& x) { return sum(mul(transpose2d(x), transpose2d(CAST(w)))); }, point));
    note("slice", grad_error([&](const auto& x) {
           auto s = slice(x, 1, 0, k);
           return sum(mul(s, mul(s, CAST(w))));
         }, point));
    note("concat", grad_error([&](const auto& x) {
           using T = T_OF(x);
           std::vector<BasicTensor<T>> parts{x, mul(x, CAST(w))};
           auto c = concat<T>(parts, 1);
           return sum(mul(c, c));
         }, point));
    note("softmax", grad_error([&](const auto& x) { return sum(mul(softmax(x), CAST(w))); }, point));
    note("cross_entropy", grad_error([&](const auto& x) { return cross_entropy(x, std::span<const int>(labels)); }, point));
    note("cross_entropy(sum)", grad_error([&](const auto& x) {
           return cross_entropy(x, std::span<const int>(labels), Reduction::sum);
         }, point));
    note("add_bias", grad_error([&](const auto& x) { return sum(mul(add_bias(x, CAST(vec)), add_bias(x, CAST(vec)))); }, point));
    note("mul_bias", grad_error([&](const auto& x) { return sum(mul(mul_bias(x, CAST(vec)), CAST(w))); }, point));
    note("mul_rows", grad_error([&](const auto& x) { return sum(mul(mul_rows(x, CAST(rows)), CAST(w))); }, point));
    note("layer_norm", grad_error([&](const auto& x) {
           return sum(mul(layer_norm(x, CAST(gamma), CAST(vec)), CAST(w)));
         }, spread));
    note("gather", grad_error([&](const auto& x) {
           auto g = gather(x, std::span<const std::int64_t>(idx), {5});
           return sum(mul(g, g));
         }, point));
    note("segment_mean", grad_error([&](const auto& x) {
           auto s = segment_mean(x, m);
           return sum(mul(s, s));
         }, point));
#undef CAST
#undef T_OF
  }

  // Scans, projections and the blocks built on them.
  for (int trial = 0; trial < 3; ++trial) {
    const std::int64_t len = 6, n = 3, dim = 4;
    const auto a_bar = random_tensor(rng, {len, n}, 0.2, 0.9);
    const auto b_bar = random_tensor(rng, {len, n});
    const auto c = random_tensor(rng, {len, n});
    note("scan_recurrent", grad_error([&](const auto& x) {
           using T = typename std::decay_t<decltype(x)>::value_type;
           auto y = scan_recurrent(a_bar.cast<T>(), mul(b_bar.cast<T>(), x), c.cast<T>(), reshape(slice(x, 1, 0, 1), {len}));
           return sum(mul(y, y));
         }, random_tensor(rng, {len, n})));
    auto block = init_block_params(dim, n, rng);
    block.delta_bias = Tensor({1}, {0.3f});
    const auto w = random_tensor(rng, {len, dim});
    note("selective_scan", grad_error([&](const auto& x) {
           using T = typename std::decay_t<decltype(x)>::value_type;
           return sum(mul(selective_scan(x, block.cast<T>()), w.cast<T>()));
         }, random_tensor(rng, {len, dim})));
    const auto plans = plan_scans(2, 3, ScanMode::cross2d);
    note("permute_rows", grad_error([&](const auto& x) {
           using T = typename std::decay_t<decltype(x)>::value_type;
           return sum(mul(permute_rows(x, plans[2].permutation, 1), w.cast<T>()));
         }, random_tensor(rng, {len, dim})));
    const auto bidir = init_mixer_params(dim, n, ScanMode::bidir1d, rng);
    note("selective_mixer(bidir)", grad_error([&](const auto& x) {
           using T = typename std::decay_t<decltype(x)>::value_type;
           return sum(mul(selective_mixer(x, bidir.cast<T>(), plan_scans(1, len, ScanMode::bidir1d), 1), w.cast<T>()));
         }, random_tensor(rng, {len, dim})));
    const auto mixer = init_mixer_params(dim, n, ScanMode::cross2d, rng);
    note("ss2d_block", grad_error([&](const auto& x) {
           using T = typename std::decay_t<decltype(x)>::value_type;
           return sum(mul(ss2d_block(x, 2, 3, mixer.cast<T>()), w.cast<T>()));
         }, random_tensor(rng, {len, dim})));
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
    c.seed = 11;
    const auto model = Model::build(c);
    const std::vector<int> labels{0, 2};
    note("classifier_loss(" + std::string(to_string(arch)) + ")",
         grad_error([&](const auto& x) { return cross_entropy(model.forward(x), std::span<const int>(labels)); },
                    random_tensor(rng, {2, 8, 8, 1}, 0.1, 0.9)));
  }

  double overall = 0.0;
  std::string worst_name;
  for (const auto& [name, e] : worst) {
    if (e >= overall) {
      overall = e;
      worst_name = name;
    }
  }
  std::string failing;
  for (const auto& [name, e] : worst)
    if (!(e < 1e-3)) failing += " " + name + "=" + fmt(e);
  return {3, failing.empty(),
          "reverse mode vs central differences (h=1e-3), " + std::to_string(worst.size()) +
              " ops/blocks: max rel " + fmt(overall) + " at " + worst_name + " (tol 1e-03)" +
              (failing.empty() ? "" : "; failing:" + failing)};
}

// Mask part 1: masked backward equals the derivative of the detached forward.
double mask_gradient_error() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(2000 + seed);
    const std::int64_t len = 5 + static_cast<std::int64_t>(rng.below(4)), dim = 3, state = 4;
    auto params = init_block_params(dim, state, rng);
    params.delta_bias = Tensor({1}, {static_cast<float>(rng.uniform(-0.5, 0.5))});
    const auto point = random_tensor(rng, {len, dim});
    const auto weights = random_tensor(rng, {len, dim});
    const auto ref = oracle::RefParams::from(params, len);
    const auto frozen = oracle::to_double(point);
    const auto w = oracle::to_double(weights);
    for (auto tag : {StreamTag::A, StreamTag::B, StreamTag::C, StreamTag::Delta}) {
      Tape tape;
      tape.set_mask({tag});
      auto x = tape.leaf(point);
      auto loss = sum(mul(selective_scan(x, params), weights));
      const auto g = oracle::to_double(tape.backward(loss, {x.node()}).at(x.node()));
      const auto fd = oracle::central_differences(
          [&](const std::vector<double>& live) {
            const auto y = oracle::reference_selective_scan(ref, live, frozen, tag);
            double acc = 0;
            for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * w[i];
            return acc;
          },
          frozen, 1e-5);
      worst = std::max(worst, oracle::max_rel_error(g, fd));
    }
  }
  return worst;
}

struct Desk {
  fs::path workdir;
  fs::path configs;
  Model model;
  double train_test_accuracy = 0.0;
  double train_seconds = 0.0;
};

std::pair<ExperimentSpec, Dataset> load_spec(const Desk& desk, const std::string& file) {
  const auto ini = IniConfig::load(desk.configs / file);
  auto spec = parse_experiment_spec(ini);
  const auto& c = desk.model.config();
  return {spec, load_eval_data(ini, c.n_classes, c.image_size, c.channels)};
}

EvalReport run_named(const Desk& desk, const std::string& file, double* seconds = nullptr,
                     std::vector<std::pair<std::string, Heatmap>>* heatmaps = nullptr,
                     std::int64_t* n_images = nullptr) {
  auto [spec, data] = load_spec(desk, file);
  std::vector<NamedModel> models{{"vssm_hier", desk.model}};
  const auto t0 = Clock::now();
  auto out = run_experiment(spec, models, data, [&](const std::string& l) { progress(file + ": " + l); });
  if (seconds) *seconds = seconds_since(t0);
  if (heatmaps) *heatmaps = out.heatmaps;
  if (n_images) *n_images = std::min<std::int64_t>(spec.samples, data.size());
  emit_report(out.report, ReportFormat::csv, desk.workdir / ("acceptance_" + file.substr(0, file.find('.')) + ".csv"));
  return out.report;
}

Verdict trends(const Desk& desk) {
  double t_wb = 0, t_pf = 0, t_sh = 0, t_oc = 0;
  const auto wb = run_named(desk, "whitebox.ini", &t_wb);
  const auto pf = run_named(desk, "patchfool.ini", &t_pf);
  const auto sh = run_named(desk, "shuffle.ini", &t_sh);
  const auto oc = run_named(desk, "occlusion.ini", &t_oc);

  std::vector<std::string> notes, failed;
  auto check = [&](bool ok, const std::string& what) {
    notes.push_back(what + (ok ? "" : " [x]"));
    if (!ok) failed.push_back(what);
  };

  const double clean = value_of(wb, "clean", "accuracy");
  const double fgsm = value_of(wb, "fgsm", "robust_accuracy");
  const double pgd = value_of(wb, "pgd", "robust_accuracy");
  check(desk.train_test_accuracy >= 0.9 && clean >= 0.9, "clean " + fmt(clean) + " >= 0.9");
  check(clean > fgsm && fgsm >= pgd, "clean " + fmt(clean) + " > FGSM " + fmt(fgsm) + " >= PGD " + fmt(pgd));

  std::vector<double> p;
  for (int k = 1; k <= 4; ++k) p.push_back(value_of(pf, "P" + std::to_string(k), "robust_accuracy"));
  check(p[0] >= p[1] && p[1] >= p[2] && p[2] >= p[3],
        "Patch-Fool P1..P4 " + fmt(p[0]) + "/" + fmt(p[1]) + "/" + fmt(p[2]) + "/" + fmt(p[3]));

  std::vector<double> s;
  for (int g : {1, 2, 4, 8}) s.push_back(value_of(sh, "g=" + std::to_string(g), "accuracy"));
  check(s[0] >= s[1] && s[1] >= s[2] && s[2] >= s[3],
        "shuffle g=1,2,4,8 " + fmt(s[0]) + "/" + fmt(s[1]) + "/" + fmt(s[2]) + "/" + fmt(s[3]));

  int budgets = 0, holds = 0;
  for (const auto& row : oc.rows) {
    if (row.metric != "patch_drop_accuracy") continue;
    ++budgets;
    if (row.value <= value_of(oc, row.condition, "pixel_drop_accuracy")) ++holds;
  }
  check(budgets > 0 && holds * 10 >= budgets * 8,
        "patch-drop <= pixel-drop at " + std::to_string(holds) + "/" + std::to_string(budgets) + " budgets (need 80%)");

  const double total = desk.train_seconds + t_wb + t_pf + t_sh + t_oc;
  check(total < 1800.0, "runtime " + fmt(total, 4) + " s incl. training (limit 1800 s)");

  std::string detail = "trends on the trained desk model, 512 images:";
  for (const auto& n : notes) detail += " " + n + ";";
  detail.pop_back();
  return {6, failed.empty(), detail};
}

Verdict masked_direction(const EvalReport& masked) {
  const double base = value_of(masked, "pgd", "robust_accuracy");
  const double b = value_of(masked, "w/o B", "robust_accuracy");
  const double a = value_of(masked, "w/o A", "robust_accuracy");
  return {7, b >= base - 0.01,
          "robust(mask={B}) " + fmt(b) + " >= robust(mask={}) " + fmt(base) + " - 0.01; w/o A " + fmt(a) +
              " (delta from baseline " + fmt(a - base) + ", measured only)"};
}

Verdict mask_semantics(const Desk& desk, const EvalReport& masked, double grad_err) {
  std::vector<std::string> failed;
  if (!(grad_err < 1e-3)) failed.push_back("gradient");

  // Empty mask reproduces the unmasked attack bitwise.
  auto [spec, data] = load_spec(desk, "masked.ini");
  const auto batch = data.slice(0, 64);
  const ModelClassifier f(desk.model);
  AttackConfig cfg = AttackConfig::defaults(AttackKind::pgd);
  cfg.epsilon = spec.epsilon;
  cfg.step_size = spec.step_size;
  cfg.iterations = spec.pgd_iterations;
  const auto plain = pgd(f, batch.images, batch.labels, cfg);
  const auto empty = masked_attack(f, batch.images, batch.labels, cfg);
  const bool bitwise = same_bits(plain.x_adv, empty.x_adv) && plain.success == empty.success;
  if (!bitwise) failed.push_back("empty mask");

  // Clean logits and the clean-accuracy column do not depend on the mask.
  bool clean_same = true;
  for (auto tag : {StreamTag::A, StreamTag::B, StreamTag::C, StreamTag::Delta}) {
    auto m = cfg;
    m.mask = {tag};
    clean_same = clean_same && same_bits(masked_attack(f, batch.images, batch.labels, m).clean_logits, plain.clean_logits);
  }
  std::string column;
  for (const auto& row : masked.rows) {
    if (row.metric != "clean_accuracy") continue;
    const auto v = format_value(row.value);
    if (column.empty()) column = v;
    clean_same = clean_same && v == column;
  }
  if (!clean_same) failed.push_back("clean column");

  return {4, failed.empty(),
          "masked input-gradient vs detached-forward differences for A,B,C,Delta: max rel " + fmt(grad_err) +
              " (tol 1e-03); empty mask bitwise " + (bitwise ? "equal" : "DIFFERENT") + "; clean column " +
              (clean_same ? "identical (" + column + ")" : "DIFFERS")};
}

Verdict attack_contracts(const Desk& desk) {
  auto [spec, data] = load_spec(desk, "whitebox.ini");
  const auto batch = data.slice(0, 48);
  const ModelClassifier f(desk.model);
  const double eps = spec.epsilon;
  std::vector<std::string> failed;

  auto f_cfg = AttackConfig::defaults(AttackKind::fgsm);
  f_cfg.epsilon = eps;
  auto p1 = AttackConfig::defaults(AttackKind::pgd);
  p1.epsilon = eps;
  p1.step_size = eps;
  p1.iterations = 1;
  const auto a = fgsm(f, batch.images, batch.labels, f_cfg);
  const auto b = pgd(f, batch.images, batch.labels, p1);
  const bool identical = same_bits(a.x_adv, b.x_adv) && a.success == b.success;
  if (!identical) failed.push_back("pgd1 != fgsm");

  // One float ulp at 1.0 covers rounding of x + delta.
  const double slack = std::ldexp(1.0, -23);
  double worst_linf = 0.0;
  bool clamped = true;
  auto inspect = [&](const Tensor& adv) {
    for (std::int64_t i = 0; i < adv.numel(); ++i) {
      worst_linf = std::max(worst_linf, std::abs(static_cast<double>(adv[i]) - batch.images[i]));
      clamped = clamped && adv[i] >= 0.f && adv[i] <= 1.f;
    }
  };
  inspect(a.x_adv);
  auto pg = AttackConfig::defaults(AttackKind::pgd);
  pg.epsilon = eps;
  pg.step_size = spec.step_size;
  pg.iterations = spec.pgd_iterations;
  inspect(pgd(f, batch.images, batch.labels, pg).x_adv);
  for (auto tag : {StreamTag::A, StreamTag::B, StreamTag::C, StreamTag::Delta}) {
    auto m = pg;
    m.mask = {tag};
    inspect(masked_attack(f, batch.images, batch.labels, m).x_adv);
  }
  if (!(worst_linf <= eps + slack)) failed.push_back("l-inf");

  // Patch-Fool support, SSM model and an attention model.
  ModelConfig ac = desk.model.config();
  ac.arch = Arch::attn_window;
  ac.depths = {2, 2};
  ac.dims = {32, 64};
  ac.seed = 5;
  const auto attn = Model::build(ac);
  const ModelClassifier fa(attn);
  bool support = true;
  std::int64_t outside_changed = 0, patches_checked = 0;
  const auto small = data.slice(0, 16);
  for (const Classifier* clf : {static_cast<const Classifier*>(&f), static_cast<const Classifier*>(&fa)}) {
    for (int k = 1; k <= 4; ++k) {
      auto cfg = spec.patch_fool;
      cfg.n_patches = k;
      cfg.iterations = 10;
      cfg.seed = spec.seed;
      const auto r = patch_fool(*clf, small.images, small.labels, cfg);
      const auto ps = clf->patch_size();
      const auto side = small.image_size(), ch = small.channels(), grid = side / ps;
      for (std::int64_t img = 0; img < small.size(); ++img) {
        const auto chosen = patch_choice(cfg, grid * grid, img);
        patches_checked += static_cast<std::int64_t>(chosen.size());
        for (std::int64_t y = 0; y < side; ++y)
          for (std::int64_t x = 0; x < side; ++x) {
            const auto patch = (y / ps) * grid + x / ps;
            const bool inside = std::find(chosen.begin(), chosen.end(), patch) != chosen.end();
            for (std::int64_t c = 0; c < ch; ++c) {
              const auto i = ((img * side + y) * side + x) * ch + c;
              const float v = r.x_adv[i];
              clamped = clamped && v >= 0.f && v <= 1.f;
              if (!inside && v != small.images[i]) ++outside_changed;
            }
          }
      }
    }
  }
  support = outside_changed == 0;
  if (!support) failed.push_back("patch support");
  if (!clamped) failed.push_back("clamp");

  return {5, failed.empty(),
          std::string("pgd(1 step, step=eps) vs fgsm: ") + (identical ? "bitwise identical" : "DIFFERENT") +
              "; max |x_adv - x|_inf " + fmt(worst_linf, 6) + " <= eps " + fmt(eps, 6) +
              "; Patch-Fool pixels changed outside chosen patches: " + std::to_string(outside_changed) + " (" +
              std::to_string(patches_checked) + " patch choices, SSM + attention); clamp to [0,1] " +
              (clamped ? "ok" : "VIOLATED")};
}

Verdict heatmap_sweep(const Desk& desk) {
  double secs = 0.0;
  std::vector<std::pair<std::string, Heatmap>> maps;
  std::int64_t n_images = 0;
  run_named(desk, "heatmap.ini", &secs, &maps, &n_images);
  if (maps.size() != 1) return {9, false, "expected one heatmap, got " + std::to_string(maps.size())};
  const auto& h = maps.front().second;
  const auto grid = desk.model.config().grid();
  bool in_range = true;
  for (double v : h.values) in_range = in_range && v >= 0.0 && v <= 1.0;
  const bool shape = h.grid == grid && static_cast<std::int64_t>(h.values.size()) == grid * grid;
  const bool ok = shape && in_range && std::isfinite(h.center_mean) && std::isfinite(h.border_mean) &&
                  n_images == 128 && secs < 900.0;
  return {9, ok,
          "heatmap " + std::to_string(h.grid) + "x" + std::to_string(h.grid) + " (token grid " + std::to_string(grid) +
              "), values in [0,1]: " + (in_range ? "yes" : "NO") + ", center mean " + fmt(h.center_mean) +
              ", border mean " + fmt(h.border_mean) + ", " + std::to_string(n_images) + " images in " + fmt(secs, 4) +
              " s (limit 900 s)"};
}

Verdict determinism(const Desk& desk) {
  std::vector<std::string> failed;
  const auto dir = desk.workdir / "determinism";
  fs::create_directories(dir);

  // Small training config and spec, run twice each.
  {
    std::ofstream(dir / "train.ini") << "[model]\narch = vssm_hier\nimage_size = 32\npatch_size = 4\nn_classes = 10\n"
                                        "seed = 4\n\n[data]\nsource = synth\nn_train = 256\nn_test = 64\nseed = 9\n\n"
                                        "[train]\nepochs = 1\nbatch = 32\nlr = 0.002\nseed = 4\nout = a.ssmr\n";
    std::ofstream(dir / "spec.ini") << "[experiment]\nkind = whitebox\nsamples = 32\nseed = 5\nout = r.csv\n\n"
                                       "[models]\nvssm_hier = a.ssmr\n\n[attack]\nepsilon = 8\nstep = 2\niterations = 2\n\n"
                                       "[data]\nsource = synth\nn_test = 64\nseed = 9\n";
  }
  cmd_train(dir / "train.ini", {}, dir / "a.ssmr");
  cmd_train(dir / "train.ini", {}, dir / "b.ssmr");
  const bool ckpt_same = file_bytes(dir / "a.ssmr") == file_bytes(dir / "b.ssmr") && !file_bytes(dir / "a.ssmr").empty();
  if (!ckpt_same) failed.push_back("checkpoints");

  bool reports_same = true;
  for (auto fmt_kind : {ReportFormat::csv, ReportFormat::json}) {
    const std::string ext = fmt_kind == ReportFormat::csv ? ".csv" : ".json";
    cmd_run(dir / "spec.ini", {}, {}, dir / ("r1" + ext), fmt_kind);
    cmd_run(dir / "spec.ini", {}, {}, dir / ("r2" + ext), fmt_kind);
    const auto b1 = file_bytes(dir / ("r1" + ext));
    reports_same = reports_same && !b1.empty() && b1 == file_bytes(dir / ("r2" + ext));
  }
  if (!reports_same) failed.push_back("reports");

  // Bitwise round-trip of the trained desk model, forward included.
  save_checkpoint(desk.model, dir / "desk.ssmr");
  const auto loaded = load_checkpoint(dir / "desk.ssmr");
  const auto probe = synth_dataset(16, 32, 10, 123);
  const bool round_trip = checkpoint_bytes(loaded) == file_bytes(dir / "desk.ssmr") &&
                          same_bits(loaded.forward(probe.images), desk.model.forward(probe.images));
  if (!round_trip) failed.push_back("round-trip");

  // Malformed files.
  ModelConfig small;
  small.image_size = 8;
  small.patch_size = 2;
  small.depths = {1, 1};
  small.dims = {8, 16};
  small.n_state = 4;
  small.n_classes = 3;
  small.seed = 5;
  const auto corpus = fuzz::malformed_corpus(Model::build(small));
  fs::create_directories(dir / "fuzz");
  int rejected = 0;
  std::map<std::string, int> kinds;
  std::string wrong;
  for (const auto& c : corpus) {
    const auto p = dir / "fuzz" / c.name;
    std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(c.bytes.data()),
                                              static_cast<std::streamsize>(c.bytes.size()));
    try {
      switch (c.loader) {
        case fuzz::Case::images: load_idx_images(p); break;
        case fuzz::Case::labels: load_idx_labels(p, 3); break;
        case fuzz::Case::checkpoint: load_checkpoint(p); break;
      }
      wrong += " " + c.name + "(accepted)";
    } catch (const FormatError& e) {
      if (e.fault() == c.want) {
        ++rejected;
        ++kinds[std::string(to_string(e.fault()))];
      } else {
        wrong += " " + c.name + "(" + std::string(to_string(e.fault())) + ")";
      }
    }
  }
  const bool fuzz_ok = corpus.size() >= 20 && wrong.empty();
  if (!fuzz_ok) failed.push_back("fuzz");

  return {8, failed.empty(),
          std::string("repeat train: checkpoints ") + (ckpt_same ? "byte-identical" : "DIFFER") + "; repeat run: csv+json reports " +
              (reports_same ? "byte-identical" : "DIFFER") + "; checkpoint round-trip " + (round_trip ? "bitwise" : "NOT bitwise") +
              "; fuzz corpus " + std::to_string(rejected) + "/" + std::to_string(corpus.size()) +
              " rejected with the expected fault (" + std::to_string(kinds.size()) + " fault kinds)" +
              (wrong.empty() ? "" : "; wrong:" + wrong)};
}

template <typename F>
Verdict guarded(int id, F&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {id, false, std::string("error: ") + e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path workdir = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_work";
  fs::create_directories(workdir);
  const auto t_all = Clock::now();
  std::vector<Verdict> verdicts;

  progress("recurrence vs convolution");
  verdicts.push_back(guarded(1, recurrence_vs_convolution));
  progress("zoh");
  verdicts.push_back(guarded(2, zoh_exactness));
  progress("gradients");
  verdicts.push_back(guarded(3, gradient_correctness));

  Desk desk;
  desk.workdir = workdir;
  desk.configs = fs::path(SSMR_SOURCE_DIR) / "configs";
  bool trained = false;
  try {
    progress("training the desk model");
    const auto t0 = Clock::now();
    auto outcome = cmd_train(desk.configs / "train_vssm_hier.ini", {}, workdir / "vssm_hier.ssmr", progress);
    desk.train_seconds = seconds_since(t0);
    desk.train_test_accuracy = outcome.result.test_accuracy;
    desk.model = std::move(outcome.model);
    trained = true;
  } catch (const std::exception& e) {
    for (int id : {4, 5, 6, 7, 8, 9}) verdicts.push_back({id, false, std::string("training failed: ") + e.what()});
  }

  if (trained) {
    verdicts.push_back(guarded(6, [&] { return trends(desk); }));
    EvalReport masked;
    bool masked_ok = true;
    try {
      masked = run_named(desk, "masked.ini");
    } catch (const std::exception& e) {
      masked_ok = false;
      verdicts.push_back({4, false, std::string("masked experiment failed: ") + e.what()});
      verdicts.push_back({7, false, std::string("masked experiment failed: ") + e.what()});
    }
    if (masked_ok) {
      const double grad_err = mask_gradient_error();
      verdicts.push_back(guarded(4, [&] { return mask_semantics(desk, masked, grad_err); }));
      verdicts.push_back(guarded(7, [&] { return masked_direction(masked); }));
    }
    verdicts.push_back(guarded(5, [&] { return attack_contracts(desk); }));
    verdicts.push_back(guarded(9, [&] { return heatmap_sweep(desk); }));
    verdicts.push_back(guarded(8, [&] { return determinism(desk); }));
  }

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  int failures = 0;
  for (const auto& v : verdicts) {
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << v.id << ": " << v.detail << "\n";
    if (!v.pass) ++failures;
  }
  std::cout << "total " << fmt(seconds_since(t_all), 5) << " s, " << failures << " failing\n";
  return failures == 0 ? 0 : 1;
}
