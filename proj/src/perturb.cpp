#include "ssmr/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ssmr/random.hpp"

namespace ssmr {

std::string_view to_string(PerturbKind kind) {
  switch (kind) {
    case PerturbKind::patch_drop: return "patch_drop";
    case PerturbKind::pixel_drop: return "pixel_drop";
    case PerturbKind::grid_shuffle: return "grid_shuffle";
    case PerturbKind::corruption: return "corruption";
  }
  return "?";
}

std::string_view to_string(Corruption kind) {
  switch (kind) {
    case Corruption::gauss_noise: return "gauss_noise";
    case Corruption::shot_noise: return "shot_noise";
    case Corruption::box_blur: return "box_blur";
    case Corruption::contrast: return "contrast";
  }
  return "?";
}

PerturbKind parse_perturb_kind(std::string_view name) {
  for (auto k : {PerturbKind::patch_drop, PerturbKind::pixel_drop, PerturbKind::grid_shuffle, PerturbKind::corruption})
    if (to_string(k) == name) return k;
  throw ValidationError("unknown perturbation kind '" + std::string(name) + "'");
}

Corruption parse_corruption(std::string_view name) {
  for (auto k : all_corruptions())
    if (to_string(k) == name) return k;
  throw ValidationError("unknown corruption '" + std::string(name) +
                        "' (expected gauss_noise, shot_noise, box_blur, contrast)");
}

const std::vector<Corruption>& all_corruptions() {
  static const std::vector<Corruption> all{Corruption::gauss_noise, Corruption::shot_noise, Corruption::box_blur,
                                           Corruption::contrast};
  return all;
}

namespace {

void check_image(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("perturbation expects an [H x W x C] image, got " + shape_to_string(image.shape()));
}

}  // namespace

void PerturbationSpec::validate(std::int64_t height, std::int64_t width) const {
  auto fail = [](const std::string& what) { throw ValidationError("invalid perturbation: " + what); };
  switch (kind) {
    case PerturbKind::patch_drop:
      if (patch_size <= 0 || height % patch_size != 0 || width % patch_size != 0) fail("patch_size must divide the image");
      if (budget < 0 || budget > (height / patch_size) * (width / patch_size)) {
        fail("patch budget " + std::to_string(budget) + " exceeds the " +
             std::to_string((height / patch_size) * (width / patch_size)) + " patches");
      }
      break;
    case PerturbKind::pixel_drop:
      if (budget < 0 || budget > height * width) {
        fail("pixel budget " + std::to_string(budget) + " exceeds the " + std::to_string(height * width) + " pixels");
      }
      break;
    case PerturbKind::grid_shuffle:
      if (grid < 1 || height % grid != 0 || width % grid != 0) {
        fail("grid " + std::to_string(grid) + " does not divide " + std::to_string(height) + "x" + std::to_string(width));
      }
      break;
    case PerturbKind::corruption:
      if (severity < 1 || severity > 5) fail("severity must be in [1, 5]");
      break;
  }
}

Tensor patch_drop(const Tensor& image, std::int64_t k, std::int64_t patch_size, std::uint64_t seed) {
  check_image(image);
  const auto h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  PerturbationSpec{PerturbKind::patch_drop, k, patch_size}.validate(h, w);
  const auto gw = w / patch_size;
  Rng rng(seed);
  auto out = image.to_vector();
  for (auto q : rng.sample((h / patch_size) * gw, k)) {
    const auto r0 = (q / gw) * patch_size, c0 = (q % gw) * patch_size;
    for (auto r = r0; r < r0 + patch_size; ++r)
      for (auto c = c0; c < c0 + patch_size; ++c)
        for (std::int64_t x = 0; x < ch; ++x) out[static_cast<std::size_t>((r * w + c) * ch + x)] = 0.f;
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor pixel_drop(const Tensor& image, std::int64_t n, std::uint64_t seed) {
  check_image(image);
  const auto h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  PerturbationSpec{PerturbKind::pixel_drop, n}.validate(h, w);
  Rng rng(seed);
  auto out = image.to_vector();
  for (auto site : rng.sample(h * w, n))
    for (std::int64_t x = 0; x < ch; ++x) out[static_cast<std::size_t>(site * ch + x)] = 0.f;
  return Tensor(image.shape(), std::move(out));
}

Tensor grid_shuffle(const Tensor& image, std::int64_t g, std::uint64_t seed) {
  check_image(image);
  const auto h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  PerturbationSpec spec;
  spec.kind = PerturbKind::grid_shuffle;
  spec.grid = g;
  spec.validate(h, w);
  const auto ch_h = h / g, ch_w = w / g;
  Rng rng(seed);
  const auto perm = rng.permutation(g * g);  // destination cell i takes source cell perm[i]
  const auto src = image.data();
  std::vector<float> out(src.size());
  for (std::int64_t cell = 0; cell < g * g; ++cell) {
    const auto from = perm[static_cast<std::size_t>(cell)];
    const auto dr = (cell / g) * ch_h, dc = (cell % g) * ch_w;
    const auto sr = (from / g) * ch_h, sc = (from % g) * ch_w;
    for (std::int64_t r = 0; r < ch_h; ++r)
      for (std::int64_t c = 0; c < ch_w; ++c)
        for (std::int64_t x = 0; x < ch; ++x)
          out[static_cast<std::size_t>(((dr + r) * w + dc + c) * ch + x)] =
              src[static_cast<std::size_t>(((sr + r) * w + sc + c) * ch + x)];
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor corrupt(const Tensor& image, Corruption kind, int severity, std::uint64_t seed) {
  check_image(image);
  if (severity < 1 || severity > 5) throw ValidationError("corruption severity must be in [1, 5]");
  const auto h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  const auto s = static_cast<std::size_t>(severity - 1);
  const auto src = image.data();
  std::vector<float> out(src.size());
  Rng rng(seed);
  switch (kind) {
    case Corruption::gauss_noise:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(src[i] + kGaussSigma[s] * rng.normal());
      break;
    case Corruption::shot_noise:
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(static_cast<double>(rng.poisson(src[i] * kShotPhotons[s])) / kShotPhotons[s]);
      }
      break;
    case Corruption::box_blur: {
      const auto rad = kBlurRadius[s];
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c)
          for (std::int64_t x = 0; x < ch; ++x) {
            double acc = 0.0;
            for (std::int64_t dr = -rad; dr <= rad; ++dr)
              for (std::int64_t dc = -rad; dc <= rad; ++dc) {
                const auto rr = std::clamp<std::int64_t>(r + dr, 0, h - 1);
                const auto cc = std::clamp<std::int64_t>(c + dc, 0, w - 1);
                acc += src[static_cast<std::size_t>((rr * w + cc) * ch + x)];
              }
            out[static_cast<std::size_t>((r * w + c) * ch + x)] = static_cast<float>(acc / ((2 * rad + 1) * (2 * rad + 1)));
          }
      break;
    }
    case Corruption::contrast:
      for (std::int64_t x = 0; x < ch; ++x) {
        double mean = 0.0;
        for (std::int64_t i = 0; i < h * w; ++i) mean += src[static_cast<std::size_t>(i * ch + x)];
        mean /= static_cast<double>(h * w);
        for (std::int64_t i = 0; i < h * w; ++i) {
          const auto u = static_cast<std::size_t>(i * ch + x);
          out[u] = static_cast<float>((src[u] - mean) * kContrastFactor[s] + mean);
        }
      }
      break;
  }
  for (auto& v : out) v = std::clamp(v, 0.f, 1.f);
  return Tensor(image.shape(), std::move(out));
}

Tensor apply_perturbation(const Tensor& image, const PerturbationSpec& spec) {
  switch (spec.kind) {
    case PerturbKind::patch_drop: return patch_drop(image, spec.budget, spec.patch_size, spec.seed);
    case PerturbKind::pixel_drop: return pixel_drop(image, spec.budget, spec.seed);
    case PerturbKind::grid_shuffle: return grid_shuffle(image, spec.grid, spec.seed);
    case PerturbKind::corruption: return corrupt(image, spec.corruption, spec.severity, spec.seed);
  }
  throw Error("unreachable perturbation kind");
}

std::uint64_t image_seed(std::uint64_t seed, std::int64_t index) {
  // splitmix64 finalizer over (seed, index)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

Tensor perturb_batch(const Tensor& images, const PerturbationSpec& spec, std::int64_t first_index) {
  if (images.rank() != 4) throw ShapeError("perturb_batch expects [B x H x W x C], got " + shape_to_string(images.shape()));
  spec.validate(images.dim(1), images.dim(2));
  const Shape one{images.dim(1), images.dim(2), images.dim(3)};
  const auto per = static_cast<std::size_t>(shape_numel(one));
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(images.numel()));
  for (std::int64_t b = 0; b < images.dim(0); ++b) {
    auto src = images.data().subspan(static_cast<std::size_t>(b) * per, per);
    PerturbationSpec s = spec;
    s.seed = image_seed(spec.seed, first_index + b);
    const auto img = apply_perturbation(Tensor(one, std::vector<float>(src.begin(), src.end())), s);
    out.insert(out.end(), img.data().begin(), img.data().end());
  }
  return Tensor(images.shape(), std::move(out));
}

double perturbed_accuracy(const Classifier& f, const Dataset& data, const PerturbationSpec& spec, std::int64_t batch) {
  std::int64_t correct = 0;
  for (std::int64_t begin = 0; begin < data.size(); begin += batch) {
    const auto part = data.slice(begin, std::min(data.size(), begin + batch));
    const auto pred = predict(f, perturb_batch(part.images, spec, begin));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == part.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

void summarize_heatmap(Heatmap& h) {
  const auto g = h.grid;
  const auto c0 = g / 4, c1 = g / 4 + std::max<std::int64_t>(1, g / 2);
  double center = 0.0, border = 0.0;
  int nc = 0, nb = 0;
  for (std::int64_t r = 0; r < g; ++r)
    for (std::int64_t c = 0; c < g; ++c) {
      const double v = h.values[static_cast<std::size_t>(r * g + c)];
      if (r >= c0 && r < c1 && c >= c0 && c < c1) {
        center += v;
        ++nc;
      }
      if (r == 0 || c == 0 || r == g - 1 || c == g - 1) {
        border += v;
        ++nb;
      }
    }
  h.center_mean = nc ? center / nc : 0.0;
  h.border_mean = nb ? border / nb : 0.0;
}

std::string Heatmap::to_csv() const {
  std::string out;
  for (std::int64_t r = 0; r < grid; ++r) {
    for (std::int64_t c = 0; c < grid; ++c) {
      if (c) out += ',';
      out += format_value(values[static_cast<std::size_t>(r * grid + c)]);
    }
    out += '\n';
  }
  return out;
}

std::string Heatmap::to_json() const {
  std::ostringstream o;
  o << "{\n  \"grid\": " << grid << ",\n  \"center_mean\": " << format_value(center_mean)
    << ",\n  \"border_mean\": " << format_value(border_mean) << ",\n  \"values\": [";
  for (std::int64_t r = 0; r < grid; ++r) {
    o << (r ? ",\n    [" : "\n    [");
    for (std::int64_t c = 0; c < grid; ++c) o << (c ? ", " : "") << format_value(values[static_cast<std::size_t>(r * grid + c)]);
    o << "]";
  }
  o << "\n  ]\n}\n";
  return o.str();
}

Heatmap positional_sweep(const Classifier& f, std::int64_t grid, const Dataset& data, const AttackConfig& cfg,
                         std::int64_t batch, int workers) {
  if (data.size() == 0) throw ValidationError("positional_sweep: dataset is empty");
  Heatmap h;
  h.grid = grid;
  for (std::int64_t i = 0; i < grid * grid; ++i) {
    AttackConfig pinned = cfg;
    pinned.kind = AttackKind::patch_fool;
    pinned.patch_indices = std::vector<std::int64_t>{i};
    h.values.push_back(robust_accuracy(f, data, pinned, batch, workers));
  }
  summarize_heatmap(h);
  return h;
}

}  // namespace ssmr
