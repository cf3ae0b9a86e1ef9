#include "ssmr/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "ssmr/ops.hpp"
#include "ssmr/random.hpp"

namespace ssmr {

std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::vssm_hier: return "vssm_hier";
    case Arch::vssm_flat_bidir: return "vssm_flat_bidir";
    case Arch::attn_window: return "attn_window";
  }
  return "?";
}

Arch parse_arch(std::string_view name) {
  if (name == "vssm_hier") return Arch::vssm_hier;
  if (name == "vssm_flat_bidir") return Arch::vssm_flat_bidir;
  if (name == "attn_window") return Arch::attn_window;
  throw ValidationError("unknown arch '" + std::string(name) + "' (expected vssm_hier, vssm_flat_bidir, attn_window)");
}

namespace {

std::int64_t heads_for(std::int64_t dim) { return std::max<std::int64_t>(1, dim / 32); }

std::string join(const std::vector<std::int64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::int64_t parse_int(std::string_view key, std::string_view text) {
  try {
    std::size_t used = 0;
    const auto v = std::stoll(std::string(text), &used);
    if (used != text.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + std::string(key) + "': '" + std::string(text) + "' is not an integer");
  }
}

std::vector<std::int64_t> parse_list(std::string_view key, std::string_view text) {
  std::vector<std::int64_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find(',', start);
    if (end == std::string_view::npos) end = text.size();
    auto item = text.substr(start, end - start);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) out.push_back(parse_int(key, item));
    start = end + 1;
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("invalid model config: " + what); };
  if (image_size <= 0 || patch_size <= 0 || channels <= 0) fail("image_size, patch_size and channels must be positive");
  if (n_state <= 0) fail("n_state must be positive");
  if (n_classes < 2) fail("n_classes must be at least 2");
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (depths.empty()) fail("depths must not be empty");
  if (dims.size() != depths.size()) fail("dims length must equal depths length");
  for (auto d : depths)
    if (d <= 0) fail("every depth must be positive");
  for (auto d : dims)
    if (d <= 0) fail("every dim must be positive");
  const auto stages = static_cast<std::int64_t>(depths.size());
  if (arch == Arch::vssm_flat_bidir && stages != 1) fail("vssm_flat_bidir takes exactly one stage");
  if (arch != Arch::vssm_flat_bidir) {
    const std::int64_t factor = patch_size << (stages - 1);
    if (image_size % factor != 0) fail("image_size must be divisible by patch_size * 2^(stages-1)");
  }
  if (arch == Arch::attn_window) {
    if (window <= 0) fail("window must be positive");
    for (auto g : stage_grids()) {
      const auto ws = std::min(window, g);
      if (g % ws != 0) fail("every stage grid must be divisible by the attention window");
    }
    for (auto d : dims)
      if (d % heads_for(d) != 0) fail("attention dims must split evenly into heads");
  }
}

std::vector<std::int64_t> ModelConfig::stage_grids() const {
  std::vector<std::int64_t> out;
  std::int64_t g = grid();
  for (std::size_t s = 0; s < depths.size(); ++s) {
    out.push_back(g);
    g /= 2;
  }
  return out;
}

std::string ModelConfig::to_text() const {
  std::map<std::string, std::string> kv{
      {"arch", std::string(to_string(arch))},
      {"image_size", std::to_string(image_size)},
      {"patch_size", std::to_string(patch_size)},
      {"channels", std::to_string(channels)},
      {"depths", join(depths)},
      {"dims", join(dims)},
      {"n_state", std::to_string(n_state)},
      {"n_classes", std::to_string(n_classes)},
      {"window", std::to_string(window)},
      {"seed", std::to_string(seed)},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("model config line without '=': " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "arch") cfg.arch = parse_arch(value);
    else if (key == "image_size") cfg.image_size = parse_int(key, value);
    else if (key == "patch_size") cfg.patch_size = parse_int(key, value);
    else if (key == "channels") cfg.channels = parse_int(key, value);
    else if (key == "depths") cfg.depths = parse_list(key, value);
    else if (key == "dims") cfg.dims = parse_list(key, value);
    else if (key == "n_state") cfg.n_state = parse_int(key, value);
    else if (key == "n_classes") cfg.n_classes = parse_int(key, value);
    else if (key == "window") cfg.window = parse_int(key, value);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else throw ValidationError("unknown model config key '" + key + "'");
  }
  return cfg;
}

std::optional<StreamTag> expected_stream_tag(std::string_view name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.substr(name.size() - suffix.size()) == suffix;
  };
  if (ends_with(".a_log")) return StreamTag::A;
  if (ends_with(".b_proj")) return StreamTag::B;
  if (ends_with(".c_proj")) return StreamTag::C;
  if (ends_with(".delta_proj") || ends_with(".delta_bias")) return StreamTag::Delta;
  return std::nullopt;
}

void check_pixel_range(const Tensor& images) {
  for (float v : images.data()) {
    if (!(v >= 0.f && v <= 1.f)) {
      throw ValidationError("pixel value " + std::to_string(v) + " outside [0, 1]; clamp before forward");
    }
  }
}

// ---------------------------------------------------------------------------
// Construction

namespace {

Tensor fan_in_uniform(Rng& rng, std::int64_t fan_in, std::int64_t fan_out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<float> v(static_cast<std::size_t>(fan_in * fan_out));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor({fan_in, fan_out}, std::move(v));
}

}  // namespace

void Model::add_param(std::string name, Tensor value, std::optional<StreamTag> tag) {
  if (index_.count(name)) throw Error("duplicate parameter name " + name);
  index_.emplace(name, params_.size());
  params_.push_back(Param{std::move(name), std::move(value), tag});
}

Model Model::build(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config_ = config;
  Rng rng(config.seed);
  auto norm = [&](const std::string& prefix, std::int64_t dim) {
    m.add_param(prefix + ".gamma", Tensor::full({dim}, 1.f));
    m.add_param(prefix + ".beta", Tensor::zeros({dim}));
  };

  const auto patch_dim = config.patch_size * config.patch_size * config.channels;
  m.add_param("embed.weight", fan_in_uniform(rng, patch_dim, config.dims[0]));
  m.add_param("embed.bias", Tensor::zeros({config.dims[0]}));
  norm("embed.norm", config.dims[0]);

  const auto mode = config.arch == Arch::vssm_flat_bidir ? ssm::ScanMode::bidir1d : ssm::ScanMode::cross2d;
  for (std::size_t s = 0; s < config.depths.size(); ++s) {
    const auto dim = config.dims[s];
    const std::string stage = "stage" + std::to_string(s);
    if (s > 0) {
      norm(stage + ".merge.norm", 4 * config.dims[s - 1]);
      m.add_param(stage + ".merge.weight", fan_in_uniform(rng, 4 * config.dims[s - 1], dim));
    }
    for (std::int64_t b = 0; b < config.depths[s]; ++b) {
      const std::string block = stage + ".block" + std::to_string(b);
      if (config.arch == Arch::attn_window) {
        norm(block + ".norm1", dim);
        m.add_param(block + ".attn.q_proj", fan_in_uniform(rng, dim, dim));
        m.add_param(block + ".attn.k_proj", fan_in_uniform(rng, dim, dim));
        m.add_param(block + ".attn.v_proj", fan_in_uniform(rng, dim, dim));
        m.add_param(block + ".attn.out_proj", fan_in_uniform(rng, dim, dim));
        m.add_param(block + ".attn.out_bias", Tensor::zeros({dim}));
        norm(block + ".norm2", dim);
        m.add_param(block + ".mlp.fc1", fan_in_uniform(rng, dim, 2 * dim));
        m.add_param(block + ".mlp.fc1_bias", Tensor::zeros({2 * dim}));
        m.add_param(block + ".mlp.fc2", fan_in_uniform(rng, 2 * dim, dim));
        m.add_param(block + ".mlp.fc2_bias", Tensor::zeros({dim}));
      } else {
        auto mixer = ssm::init_mixer_params(dim, config.n_state, mode, rng);
        m.add_param(block + ".mixer.norm.gamma", mixer.norm_gamma);
        m.add_param(block + ".mixer.norm.beta", mixer.norm_beta);
        m.add_param(block + ".mixer.gate_proj", mixer.gate_proj);
        for (std::size_t k = 0; k < mixer.directions.size(); ++k) {
          const auto& d = mixer.directions[k];
          const std::string dir = block + ".mixer.dir" + std::to_string(k);
          m.add_param(dir + ".a_log", d.a_log, StreamTag::A);
          m.add_param(dir + ".b_proj", d.b_proj, StreamTag::B);
          m.add_param(dir + ".c_proj", d.c_proj, StreamTag::C);
          m.add_param(dir + ".delta_proj", d.delta_proj, StreamTag::Delta);
          m.add_param(dir + ".delta_bias", d.delta_bias, StreamTag::Delta);
          m.add_param(dir + ".d_skip", d.d_skip);
        }
        m.add_param(block + ".out_proj", fan_in_uniform(rng, dim, dim));
      }
    }
  }
  const auto last = config.dims.back();
  norm("head.norm", last);
  m.add_param("head.weight", fan_in_uniform(rng, last, config.n_classes));
  m.add_param("head.bias", Tensor::zeros({config.n_classes}));
  return m;
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

const Tensor& Model::param(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ValidationError("no parameter named " + std::string(name));
  return params_[it->second].value;
}

void Model::set_param_values(std::vector<Tensor> values) {
  if (values.size() != params_.size()) throw ValidationError("set_param_values: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != params_[i].value.shape()) {
      throw ShapeError("set_param_values: " + params_[i].name + " expects " +
                       shape_to_string(params_[i].value.shape()) + ", got " + shape_to_string(values[i].shape()));
    }
    params_[i].value = values[i].detach();
  }
}

void Model::load_param(std::string_view name, Tensor value) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ValidationError("model has no parameter named " + std::string(name));
  auto& p = params_[it->second];
  if (value.shape() != p.value.shape()) {
    throw ShapeError("parameter " + p.name + " expects " + shape_to_string(p.value.shape()) + ", got " +
                     shape_to_string(value.shape()));
  }
  p.value = value.detach();
}

// ---------------------------------------------------------------------------
// Forward

namespace {

// [B x H x W x C] -> [B*L x p*p*C], tokens row-major over the patch grid.
std::vector<std::int64_t> patchify_index(std::int64_t batch, std::int64_t size, std::int64_t patch, std::int64_t ch) {
  const auto grid = size / patch;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(batch * size * size * ch));
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t r = 0; r < grid; ++r)
      for (std::int64_t c = 0; c < grid; ++c)
        for (std::int64_t dy = 0; dy < patch; ++dy)
          for (std::int64_t dx = 0; dx < patch; ++dx)
            for (std::int64_t k = 0; k < ch; ++k)
              idx.push_back(((b * size + r * patch + dy) * size + c * patch + dx) * ch + k);
  return idx;
}

// [B*g*g x D] -> [B*(g/2)^2 x 4D]; neighbours ordered (0,0), (1,0), (0,1), (1,1).
std::vector<std::int64_t> merge_index(std::int64_t batch, std::int64_t grid, std::int64_t dim) {
  const auto half = grid / 2;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(batch * grid * grid * dim));
  const std::int64_t offsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t r = 0; r < half; ++r)
      for (std::int64_t c = 0; c < half; ++c)
        for (const auto& o : offsets)
          for (std::int64_t j = 0; j < dim; ++j)
            idx.push_back((b * grid * grid + (2 * r + o[0]) * grid + (2 * c + o[1])) * dim + j);
  return idx;
}

struct WindowLayout {
  std::int64_t ws, per_row, windows, heads, head_dim, tokens;
  std::vector<std::int64_t> forward;  // [B*L x D] -> [B*nW*heads x ws^2 x dh]
  std::vector<std::int64_t> inverse;
};

WindowLayout window_layout(std::int64_t batch, std::int64_t grid, std::int64_t window, std::int64_t dim) {
  WindowLayout w{};
  w.ws = std::min(window, grid);
  w.per_row = grid / w.ws;
  w.windows = w.per_row * w.per_row;
  w.heads = heads_for(dim);
  w.head_dim = dim / w.heads;
  w.tokens = w.ws * w.ws;
  const auto total = batch * grid * grid * dim;
  w.forward.reserve(static_cast<std::size_t>(total));
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t wr = 0; wr < w.per_row; ++wr)
      for (std::int64_t wc = 0; wc < w.per_row; ++wc)
        for (std::int64_t h = 0; h < w.heads; ++h)
          for (std::int64_t i = 0; i < w.ws; ++i)
            for (std::int64_t j = 0; j < w.ws; ++j)
              for (std::int64_t f = 0; f < w.head_dim; ++f)
                w.forward.push_back((b * grid * grid + (wr * w.ws + i) * grid + wc * w.ws + j) * dim + h * w.head_dim +
                                    f);
  w.inverse.assign(w.forward.size(), 0);
  for (std::size_t k = 0; k < w.forward.size(); ++k) w.inverse[static_cast<std::size_t>(w.forward[k])] = static_cast<std::int64_t>(k);
  return w;
}

}  // namespace

template <typename T>
TensorOf<T> Model::run(const TensorOf<T>& images, const std::vector<TensorOf<T>>& params,
                       AttnCapture<T>* capture) const {
  const auto& cfg = config_;
  if (images.rank() != 4 || images.dim(1) != cfg.image_size || images.dim(2) != cfg.image_size ||
      images.dim(3) != cfg.channels) {
    throw ShapeError("forward: images " + shape_to_string(images.shape()) + " do not match [B x " +
                     std::to_string(cfg.image_size) + " x " + std::to_string(cfg.image_size) + " x " +
                     std::to_string(cfg.channels) + "]");
  }
  for (T v : images.data()) {
    if (!(v >= T(0) && v <= T(1))) {
      throw ValidationError("pixel value " + std::to_string(static_cast<double>(v)) +
                            " outside [0, 1]; clamp before forward");
    }
  }
  auto P = [&](const std::string& name) -> const TensorOf<T>& {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("internal: missing parameter " + name);
    return params[it->second];
  };
  auto norm = [&](const TensorOf<T>& x, const std::string& prefix) {
    return layer_norm(x, P(prefix + ".gamma"), P(prefix + ".beta"));
  };

  const auto batch = images.dim(0);
  const auto patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
  const auto grids = cfg.stage_grids();
  auto tokens = gather(images, patchify_index(batch, cfg.image_size, cfg.patch_size, cfg.channels),
                       {batch * cfg.num_patches(), patch_dim});
  auto x = norm(add_bias(matmul(tokens, P("embed.weight")), P("embed.bias")), "embed.norm");

  const auto mode = cfg.arch == Arch::vssm_flat_bidir ? ssm::ScanMode::bidir1d : ssm::ScanMode::cross2d;
  for (std::size_t s = 0; s < cfg.depths.size(); ++s) {
    const auto dim = cfg.dims[s];
    const auto grid = grids[s];
    const std::string stage = "stage" + std::to_string(s);
    if (s > 0) {
      const auto prev_dim = cfg.dims[s - 1];
      auto merged = gather(x, merge_index(batch, grids[s - 1], prev_dim), {batch * grid * grid, 4 * prev_dim});
      x = matmul(norm(merged, stage + ".merge.norm"), P(stage + ".merge.weight"));
    }
    if (cfg.arch == Arch::attn_window) {
      const auto layout = window_layout(batch, grid, cfg.window, dim);
      const Shape split{batch * layout.windows * layout.heads, layout.tokens, layout.head_dim};
      const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(layout.head_dim));
      for (std::int64_t b = 0; b < cfg.depths[s]; ++b) {
        const std::string block = stage + ".block" + std::to_string(b);
        const auto a = norm(x, block + ".norm1");
        const auto q = gather(matmul(a, P(block + ".attn.q_proj")), layout.forward, split);
        const auto k = gather(matmul(a, P(block + ".attn.k_proj")), layout.forward, split);
        const auto v = gather(matmul(a, P(block + ".attn.v_proj")), layout.forward, split);
        const auto attn = softmax(scale(bmm(q, transpose2d(k)), inv_sqrt));
        if (capture) {
          capture->maps.push_back(attn);
          capture->stage_of_map.push_back(static_cast<std::int64_t>(s));
        }
        const auto ctx = gather(bmm(attn, v), layout.inverse, {batch * grid * grid, dim});
        x = add(x, add_bias(matmul(ctx, P(block + ".attn.out_proj")), P(block + ".attn.out_bias")));
        const auto hidden = silu(add_bias(matmul(norm(x, block + ".norm2"), P(block + ".mlp.fc1")),
                                          P(block + ".mlp.fc1_bias")));
        x = add(x, add_bias(matmul(hidden, P(block + ".mlp.fc2")), P(block + ".mlp.fc2_bias")));
      }
    } else {
      const auto plans = ssm::plan_scans(grid, grid, mode);
      for (std::int64_t b = 0; b < cfg.depths[s]; ++b) {
        const std::string block = stage + ".block" + std::to_string(b);
        ssm::BasicMixerParams<T> mixer{P(block + ".mixer.norm.gamma"), P(block + ".mixer.norm.beta"),
                                       P(block + ".mixer.gate_proj"), {}};
        for (std::size_t k = 0; k < plans.size(); ++k) {
          const std::string dir = block + ".mixer.dir" + std::to_string(k);
          mixer.directions.push_back({P(dir + ".a_log"), P(dir + ".b_proj"), P(dir + ".c_proj"),
                                      P(dir + ".delta_proj"), P(dir + ".delta_bias"), P(dir + ".d_skip")});
        }
        x = add(x, matmul(ssm::selective_mixer(x, mixer, plans, batch), P(block + ".out_proj")));
      }
    }
  }
  const auto pooled = segment_mean(norm(x, "head.norm"), batch);
  return add_bias(matmul(pooled, P("head.weight")), P("head.bias"));
}

namespace {

template <typename T>
std::vector<TensorOf<T>> cast_params(const std::vector<Param>& params) {
  std::vector<TensorOf<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    if constexpr (std::is_same_v<T, float>) {
      out.push_back(p.value);
    } else {
      out.push_back(p.value.template cast<T>());
    }
  }
  return out;
}

}  // namespace

template <typename T>
TensorOf<T> Model::forward(const TensorOf<T>& images) const {
  return run(images, cast_params<T>(params_), static_cast<AttnCapture<T>*>(nullptr));
}

template <typename T>
TensorOf<T> Model::forward_bound(const TensorOf<T>& images, BasicTape<T>& tape, std::vector<NodeId>& param_nodes) const {
  auto values = cast_params<T>(params_);
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = tape.leaf(values[i], params_[i].tag);
    param_nodes.push_back(values[i].node());
  }
  return run(images, values, static_cast<AttnCapture<T>*>(nullptr));
}

template <typename T>
std::vector<TensorOf<T>> Model::attention_rollout(const TensorOf<T>& images) const {
  if (!has_attention()) {
    throw ValidationError("attention_rollout: " + std::string(to_string(config_.arch)) + " has no attention layers");
  }
  AttnCapture<T> capture;
  run(images, cast_params<T>(params_), &capture);
  return capture.maps;
}

template <typename T>
std::pair<TensorOf<T>, TensorOf<T>> Model::forward_with_attention(
    const TensorOf<T>& images, const std::vector<std::vector<std::int64_t>>& patches_per_image) const {
  if (!has_attention()) {
    throw ValidationError("attention_to_patches: " + std::string(to_string(config_.arch)) +
                          " has no attention layers");
  }
  const auto batch = images.rank() == 4 ? images.dim(0) : 0;
  if (patches_per_image.size() != 1 && static_cast<std::int64_t>(patches_per_image.size()) != batch) {
    throw ValidationError("attention_to_patches: need one patch list per image or a single shared list");
  }
  const auto base_grid = config_.grid();
  for (const auto& patches : patches_per_image)
    for (auto p : patches)
      if (p < 0 || p >= config_.num_patches()) {
        throw ValidationError("patch index " + std::to_string(p) + " out of range");
      }
  AttnCapture<T> capture;
  auto logits = run(images, cast_params<T>(params_), &capture);
  const auto grids = config_.stage_grids();
  TensorOf<T> score = TensorOf<T>::scalar(T(0));
  for (std::size_t m = 0; m < capture.maps.size(); ++m) {
    const auto stage = capture.stage_of_map[m];
    const auto grid = grids[static_cast<std::size_t>(stage)];
    const auto ws = std::min(config_.window, grid);
    const auto per_row = grid / ws;
    const auto heads = heads_for(config_.dims[static_cast<std::size_t>(stage)]);
    const auto tokens = ws * ws;
    std::vector<std::int64_t> idx;
    for (std::int64_t b = 0; b < batch; ++b) {
      const auto& patches = patches_per_image[patches_per_image.size() == 1 ? 0 : static_cast<std::size_t>(b)];
      // patches that share a token at this stage count once
      std::set<std::pair<std::int64_t, std::int64_t>> targets;  // (window, position)
      for (auto p : patches) {
        const auto r = (p / base_grid) >> stage;
        const auto c = (p % base_grid) >> stage;
        targets.emplace((r / ws) * per_row + c / ws, (r % ws) * ws + c % ws);
      }
      for (const auto& [win, pos] : targets)
        for (std::int64_t h = 0; h < heads; ++h) {
          const auto group = (b * per_row * per_row + win) * heads + h;
          for (std::int64_t i = 0; i < tokens; ++i) idx.push_back((group * tokens + i) * tokens + pos);
        }
    }
    if (idx.empty()) continue;
    const auto picked = sum(gather(capture.maps[m], idx, {static_cast<std::int64_t>(idx.size())}));
    score = m == 0 ? picked : add(score, picked);
  }
  return {logits, score};
}

template <typename T>
TensorOf<T> Model::attention_to_patches(const TensorOf<T>& images, const std::vector<std::int64_t>& patches) const {
  return forward_with_attention(images, {patches}).second;
}

std::vector<int> Model::predict(const Tensor& images) const {
  const auto logits = forward(images.detach());
  const auto k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  for (std::int64_t r = 0; r < logits.dim(0); ++r) {
    const auto row = logits.data().subspan(static_cast<std::size_t>(r * k), static_cast<std::size_t>(k));
    out[static_cast<std::size_t>(r)] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

template TensorOf<float> Model::forward(const TensorOf<float>&) const;
template TensorOf<double> Model::forward(const TensorOf<double>&) const;
template TensorOf<float> Model::forward_bound(const TensorOf<float>&, BasicTape<float>&, std::vector<NodeId>&) const;
template TensorOf<double> Model::forward_bound(const TensorOf<double>&, BasicTape<double>&, std::vector<NodeId>&) const;
template std::vector<TensorOf<float>> Model::attention_rollout(const TensorOf<float>&) const;
template std::vector<TensorOf<double>> Model::attention_rollout(const TensorOf<double>&) const;
template TensorOf<float> Model::attention_to_patches(const TensorOf<float>&, const std::vector<std::int64_t>&) const;
template TensorOf<double> Model::attention_to_patches(const TensorOf<double>&, const std::vector<std::int64_t>&) const;
template std::pair<TensorOf<float>, TensorOf<float>> Model::forward_with_attention(
    const TensorOf<float>&, const std::vector<std::vector<std::int64_t>>&) const;
template std::pair<TensorOf<double>, TensorOf<double>> Model::forward_with_attention(
    const TensorOf<double>&, const std::vector<std::vector<std::int64_t>>&) const;

}  // namespace ssmr
