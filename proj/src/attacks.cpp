#include "ssmr/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "ssmr/ops.hpp"
#include "ssmr/random.hpp"

namespace ssmr {

std::pair<Tensor, Tensor> Classifier::logits_with_attention(const Tensor&,
                                                            const std::vector<std::vector<std::int64_t>>&) const {
  throw ValidationError("classifier has no attention layers");
}

StreamSet ModelClassifier::stream_tags() const {
  if (model_.config().arch == Arch::attn_window) return {};
  auto s = StreamSet::ssm_streams();
  s.insert(StreamTag::Input);
  return s;
}

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::patch_fool: return "patch_fool";
  }
  return "?";
}

AttackKind parse_attack_kind(std::string_view name) {
  if (name == "fgsm") return AttackKind::fgsm;
  if (name == "pgd") return AttackKind::pgd;
  if (name == "patch_fool" || name == "patchfool") return AttackKind::patch_fool;
  throw ValidationError("unknown attack kind '" + std::string(name) + "' (expected fgsm, pgd, patch_fool)");
}

AttackConfig AttackConfig::defaults(AttackKind kind) {
  AttackConfig c;
  c.kind = kind;
  switch (kind) {
    case AttackKind::fgsm:
      c.step_size = c.epsilon;
      c.iterations = 1;
      break;
    case AttackKind::pgd:
      break;
    case AttackKind::patch_fool:
      c.step_size = 0.2;
      c.iterations = 250;
      break;
  }
  return c;
}

void AttackConfig::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("invalid attack config: " + what); };
  if (!(epsilon >= 0.0)) fail("epsilon must be >= 0");
  if (iterations < 1) fail("iterations must be >= 1");
  if (!(decay > 0.0 && decay <= 1.0)) fail("decay must lie in (0, 1]");
  if (decay_every < 1) fail("decay_every must be >= 1");
  if (!(step_size >= 0.0)) fail("step_size must be >= 0");
  if (kind == AttackKind::patch_fool) {
    if (patch_indices && patch_indices->empty()) fail("patch_fool needs at least one patch (explicit list is empty)");
    if (!patch_indices && n_patches < 1) fail("patch_fool needs n_patches >= 1");
  }
}

std::string AttackConfig::describe() const {
  std::ostringstream o;
  o << "kind=" << to_string(kind) << " epsilon=" << epsilon * 255.0 << "/255 step_size=";
  if (kind == AttackKind::patch_fool) {
    o << step_size << " iterations=" << iterations << " decay=" << decay << " decay_every=" << decay_every
      << " alpha=" << alpha << " early_stop=" << (early_stop ? 1 : 0);
  } else {
    o << step_size * 255.0 << "/255 iterations=" << iterations;
  }
  o << " mask=" << mask.to_string() << " seed=" << seed;
  return o.str();
}

// ---------------------------------------------------------------------------

namespace {

void check_batch(const Tensor& x, const std::vector<int>& labels) {
  if (x.rank() != 4) throw ShapeError("attack input must be [B x H x W x C], got " + shape_to_string(x.shape()));
  if (x.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw ValidationError("attack: " + std::to_string(x.dim(0)) + " images but " + std::to_string(labels.size()) +
                          " labels");
  }
  check_pixel_range(x);
}

int argmax_row(const Tensor& logits, std::int64_t row) {
  const auto k = logits.dim(1);
  const auto r = logits.data().subspan(static_cast<std::size_t>(row * k), static_cast<std::size_t>(k));
  return static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
}

std::vector<bool> misclassified(const Tensor& logits, const std::vector<int>& labels) {
  std::vector<bool> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = argmax_row(logits, static_cast<std::int64_t>(i)) != labels[i];
  return out;
}

// Box [x - eps, x + eps] in float, tightened so that it never exceeds eps
// when measured in double.
float upper_bound(float x, double eps) {
  float hi = x + static_cast<float>(eps);
  while (static_cast<double>(hi) - static_cast<double>(x) > eps) hi = std::nextafter(hi, -1.0f);
  return hi;
}

float lower_bound(float x, double eps) {
  float lo = x - static_cast<float>(eps);
  while (static_cast<double>(x) - static_cast<double>(lo) > eps) lo = std::nextafter(lo, 2.0f);
  return lo;
}

// One signed-gradient step from `cur`, projected onto the eps ball around
// `origin` and the pixel range.
Tensor signed_step(const Tensor& cur, const Tensor& origin, const Tensor& grad, double step, double eps) {
  std::vector<float> out(static_cast<std::size_t>(cur.numel()));
  const auto c = cur.data();
  const auto o = origin.data();
  const auto g = grad.data();
  const float s = static_cast<float>(step);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float dir = g[i] > 0.f ? 1.f : (g[i] < 0.f ? -1.f : 0.f);
    float v = c[i] + s * dir;
    v = std::clamp(v, lower_bound(o[i], eps), upper_bound(o[i], eps));
    out[i] = std::clamp(v, 0.f, 1.f);
  }
  return Tensor(cur.shape(), std::move(out));
}

void check_mask(const Classifier& f, const StreamSet& mask) {
  for (auto t : {StreamTag::A, StreamTag::B, StreamTag::C, StreamTag::Delta, StreamTag::Input}) {
    if (mask.contains(t) && !f.stream_tags().contains(t)) {
      throw ValidationError("gradient mask names stream " + std::string(to_string(t)) +
                            ", which this model does not carry");
    }
  }
}

}  // namespace

LossGrad loss_and_grad(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const StreamSet& mask) {
  Tape tape;
  set_mask(tape, mask);
  const auto xi = tape.leaf(x);
  const auto logits = f.logits(xi);
  const auto loss = cross_entropy(logits, std::span<const int>(labels), Reduction::sum);
  auto grad = tape.backward(loss, {xi.node()}).at(xi.node());
  for (float v : grad.data())
    if (!std::isfinite(v)) throw NumericError("attack gradient is not finite");
  return {static_cast<double>(loss.item()), grad, logits.detach()};
}

AdvResult fgsm(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const AttackConfig& cfg) {
  cfg.validate();
  check_batch(x, labels);
  check_mask(f, cfg.mask);
  const auto lg = loss_and_grad(f, x, labels, cfg.mask);
  AdvResult r;
  r.loss_trace.push_back(lg.loss);
  r.clean_logits = lg.logits;
  r.x_adv = signed_step(x, x, lg.grad, cfg.epsilon, cfg.epsilon);
  r.success = misclassified(f.logits(r.x_adv), labels);
  return r;
}

AdvResult pgd(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const AttackConfig& cfg) {
  cfg.validate();
  check_batch(x, labels);
  check_mask(f, cfg.mask);
  AdvResult r;
  Tensor cur = x;
  for (int t = 0; t < cfg.iterations; ++t) {
    const auto lg = loss_and_grad(f, cur, labels, cfg.mask);
    r.loss_trace.push_back(lg.loss);
    if (t == 0) r.clean_logits = lg.logits;
    cur = signed_step(cur, x, lg.grad, cfg.step_size, cfg.epsilon);
  }
  r.x_adv = cur;
  r.success = misclassified(f.logits(cur), labels);
  return r;
}

AdvResult masked_attack(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const AttackConfig& cfg) {
  if (cfg.mask.contains(StreamTag::Input)) {
    throw ValidationError("masked_attack: mask may only name A, B, C, Delta");
  }
  return pgd(f, x, labels, cfg);
}

std::vector<std::int64_t> patch_choice(const AttackConfig& cfg, std::int64_t n_grid_patches, std::int64_t image_index) {
  if (cfg.patch_indices) {
    for (auto p : *cfg.patch_indices) {
      if (p < 0 || p >= n_grid_patches) {
        throw ValidationError("patch index " + std::to_string(p) + " out of range [0, " +
                              std::to_string(n_grid_patches) + ")");
      }
    }
    return *cfg.patch_indices;
  }
  if (cfg.n_patches > n_grid_patches) {
    throw ValidationError("n_patches " + std::to_string(cfg.n_patches) + " exceeds the " +
                          std::to_string(n_grid_patches) + " patches of the image");
  }
  Rng rng(cfg.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(image_index) + 1);
  return rng.sample(n_grid_patches, cfg.n_patches);
}

AdvResult patch_fool(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const AttackConfig& cfg,
                     std::int64_t first_index) {
  cfg.validate();
  check_batch(x, labels);
  const auto batch = x.dim(0), height = x.dim(1), width = x.dim(2), ch = x.dim(3);
  const auto p = f.patch_size();
  if (height % p != 0 || width % p != 0) throw ValidationError("patch_fool: image not divisible into patches");
  const auto gw = width / p;
  const auto n_grid = (height / p) * gw;
  const auto per_image = height * width * ch;

  std::vector<std::vector<std::int64_t>> patches(static_cast<std::size_t>(batch));
  std::vector<std::uint8_t> support(static_cast<std::size_t>(x.numel()), 0);
  for (std::int64_t b = 0; b < batch; ++b) {
    patches[static_cast<std::size_t>(b)] = patch_choice(cfg, n_grid, first_index + b);
    for (auto q : patches[static_cast<std::size_t>(b)]) {
      const auto r0 = (q / gw) * p, c0 = (q % gw) * p;
      for (std::int64_t r = r0; r < r0 + p; ++r)
        for (std::int64_t c = c0; c < c0 + p; ++c)
          for (std::int64_t k = 0; k < ch; ++k) support[static_cast<std::size_t>(b * per_image + (r * width + c) * ch + k)] = 1;
    }
  }

  const bool attention_term = f.has_attention() && cfg.alpha != 0.0;
  const auto xs = x.data();
  std::vector<float> e(static_cast<std::size_t>(x.numel()), 0.f);
  std::vector<double> m1(e.size(), 0.0), m2(e.size(), 0.0);
  const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  std::vector<bool> done(static_cast<std::size_t>(batch), false);

  auto compose = [&](const std::vector<std::int64_t>& rows) {
    std::vector<float> out;
    out.reserve(rows.size() * static_cast<std::size_t>(per_image));
    for (auto b : rows)
      for (std::int64_t i = b * per_image; i < (b + 1) * per_image; ++i) {
        const auto u = static_cast<std::size_t>(i);
        out.push_back(support[u] ? std::clamp(xs[u] + e[u], 0.f, 1.f) : xs[u]);
      }
    Shape shape = x.shape();
    shape[0] = static_cast<std::int64_t>(rows.size());
    return Tensor(shape, std::move(out));
  };

  AdvResult r;
  for (int t = 0; t < cfg.iterations; ++t) {
    std::vector<std::int64_t> rows;
    for (std::int64_t b = 0; b < batch; ++b)
      if (!done[static_cast<std::size_t>(b)]) rows.push_back(b);
    if (rows.empty()) break;
    std::vector<int> sub_labels;
    std::vector<std::vector<std::int64_t>> sub_patches;
    for (auto b : rows) {
      sub_labels.push_back(labels[static_cast<std::size_t>(b)]);
      sub_patches.push_back(patches[static_cast<std::size_t>(b)]);
    }
    const auto cur = compose(rows);

    Tape tape;
    const auto xi = tape.leaf(cur);
    Tensor logits, objective;
    if (attention_term) {
      auto [lg, attn] = f.logits_with_attention(xi, sub_patches);
      logits = lg;
      objective = add(cross_entropy(lg, std::span<const int>(sub_labels), Reduction::sum),
                      scale(attn, static_cast<float>(cfg.alpha)));
    } else {
      logits = f.logits(xi);
      objective = cross_entropy(logits, std::span<const int>(sub_labels), Reduction::sum);
    }
    r.loss_trace.push_back(objective.item());
    if (t == 0) r.clean_logits = logits.detach();
    const auto grad = tape.backward(objective, {xi.node()}).at(xi.node());

    const double lr = cfg.step_size * std::pow(cfg.decay, static_cast<double>(t / cfg.decay_every));
    const double c1 = 1.0 - std::pow(b1, t + 1), c2 = 1.0 - std::pow(b2, t + 1);
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const auto b = rows[j];
      if (cfg.early_stop && argmax_row(logits, static_cast<std::int64_t>(j)) != sub_labels[j]) {
        done[static_cast<std::size_t>(b)] = true;  // keep the iterate that already fools the model
        continue;
      }
      for (std::int64_t i = 0; i < per_image; ++i) {
        const auto u = static_cast<std::size_t>(b * per_image + i);
        if (!support[u]) continue;
        const double g = grad[static_cast<std::int64_t>(j) * per_image + i];
        if (!std::isfinite(g)) throw NumericError("patch_fool gradient is not finite");
        m1[u] = b1 * m1[u] + (1.0 - b1) * g;
        m2[u] = b2 * m2[u] + (1.0 - b2) * g * g;
        const double step = lr * (m1[u] / c1) / (std::sqrt(m2[u] / c2) + adam_eps);
        // ascent, keeping x + e inside [0, 1]
        const double next = std::clamp(static_cast<double>(e[u]) + step, -static_cast<double>(xs[u]),
                                       1.0 - static_cast<double>(xs[u]));
        e[u] = static_cast<float>(next);
      }
    }
  }

  std::vector<std::int64_t> all(static_cast<std::size_t>(batch));
  for (std::int64_t b = 0; b < batch; ++b) all[static_cast<std::size_t>(b)] = b;
  r.x_adv = compose(all);
  r.success = misclassified(f.logits(r.x_adv), labels);
  return r;
}

AdvResult run_attack(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const AttackConfig& cfg,
                     std::int64_t first_index) {
  switch (cfg.kind) {
    case AttackKind::fgsm: return fgsm(f, x, labels, cfg);
    case AttackKind::pgd: return cfg.mask.empty() ? pgd(f, x, labels, cfg) : masked_attack(f, x, labels, cfg);
    case AttackKind::patch_fool: return patch_fool(f, x, labels, cfg, first_index);
  }
  throw Error("unreachable attack kind");
}

// ---------------------------------------------------------------------------

std::vector<int> predict(const Classifier& f, const Tensor& x) {
  const auto logits = f.logits(x);
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  for (std::int64_t r = 0; r < logits.dim(0); ++r) out[static_cast<std::size_t>(r)] = argmax_row(logits, r);
  return out;
}

void parallel_chunks(std::int64_t n, int workers, const std::function<void(std::int64_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_lock;
  std::vector<std::thread> pool;
  const auto count = std::min<std::int64_t>(workers, n);
  for (std::int64_t w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      for (auto i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_lock);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

std::int64_t chunk_count(std::int64_t n, std::int64_t batch) { return (n + batch - 1) / batch; }

}  // namespace

double accuracy(const Classifier& f, const Dataset& data, std::int64_t batch) {
  std::int64_t correct = 0;
  for (std::int64_t c = 0; c < chunk_count(data.size(), batch); ++c) {
    const auto part = data.slice(c * batch, std::min(data.size(), (c + 1) * batch));
    const auto pred = predict(f, part.images);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == part.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double robust_accuracy(const Classifier& f, const Dataset& data, const AttackConfig& cfg, std::int64_t batch,
                       int workers) {
  const auto chunks = chunk_count(data.size(), batch);
  std::vector<std::int64_t> correct(static_cast<std::size_t>(chunks), 0);
  parallel_chunks(chunks, workers, [&](std::int64_t c) {
    const auto begin = c * batch;
    const auto part = data.slice(begin, std::min(data.size(), begin + batch));
    const auto r = run_attack(f, part.images, part.labels, cfg, begin);
    for (bool s : r.success) correct[static_cast<std::size_t>(c)] += !s;
  });
  std::int64_t total = 0;
  for (auto v : correct) total += v;
  return static_cast<double>(total) / static_cast<double>(data.size());
}

std::vector<ReportRow> transfer_eval(const Classifier& src, const std::string& src_name, const Classifier& dst,
                                     const std::string& dst_name, const Dataset& data, const AttackConfig& cfg,
                                     std::int64_t batch, int workers) {
  const auto n = data.size();
  const auto chunks = chunk_count(n, batch);
  {
    const auto probe = data.slice(0, 1).images;
    try {
      src.logits(probe);
      dst.logits(probe);
    } catch (const ShapeError& e) {
      throw ShapeError("transfer_eval: " + src_name + " and " + dst_name + " need the same input shape (" + e.what() + ")");
    }
  }
  auto transfer = [&](const Classifier& from, const Classifier& to) {
    std::vector<std::int64_t> correct(static_cast<std::size_t>(chunks), 0);
    parallel_chunks(chunks, workers, [&](std::int64_t c) {
      const auto begin = c * batch;
      const auto part = data.slice(begin, std::min(n, begin + batch));
      const auto adv = run_attack(from, part.images, part.labels, cfg, begin);
      const auto pred = predict(to, adv.x_adv);
      for (std::size_t i = 0; i < pred.size(); ++i) correct[static_cast<std::size_t>(c)] += pred[i] == part.labels[i];
    });
    std::int64_t total = 0;
    for (auto v : correct) total += v;
    return static_cast<double>(total) / static_cast<double>(n);
  };
  std::vector<ReportRow> rows;
  rows.push_back({src_name, "transfer", "clean", "accuracy", accuracy(src, data, batch)});
  rows.push_back({dst_name, "transfer", "clean", "accuracy", accuracy(dst, data, batch)});
  rows.push_back({src_name + " -> " + dst_name, "transfer", "transfer", "robust_accuracy", transfer(src, dst)});
  rows.push_back({dst_name + " -> " + src_name, "transfer", "transfer", "robust_accuracy", transfer(dst, src)});
  return rows;
}

}  // namespace ssmr
