#pragma once

// Desk-scale image classifiers.
//
//   vssm_hier        patch embed -> stages of cross-scan selective mixers with
//                    2x2 patch merging between stages -> pool -> linear head
//   vssm_flat_bidir  patch embed -> one stage of bidirectional 1D mixers
//   attn_window      patch embed -> stages of non-overlapping window attention
//                    + MLP blocks with the same patch merging
//
// Images are [B x H x W x C] with pixels in [0, 1].

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ssmr/ssm.hpp"
#include "ssmr/tensor.hpp"

namespace ssmr {

enum class Arch { vssm_hier, vssm_flat_bidir, attn_window };

std::string_view to_string(Arch arch);
Arch parse_arch(std::string_view name);

struct ModelConfig {
  Arch arch = Arch::vssm_hier;
  std::int64_t image_size = 32;
  std::int64_t patch_size = 4;
  std::int64_t channels = 1;
  std::vector<std::int64_t> depths{2, 2};
  std::vector<std::int64_t> dims{32, 64};
  std::int64_t n_state = 8;
  std::int64_t n_classes = 10;
  std::int64_t window = 4;  // attention baseline only
  std::uint64_t seed = 0;

  // Throws ValidationError naming the first violated invariant.
  void validate() const;

  std::int64_t grid() const { return image_size / patch_size; }
  std::int64_t num_patches() const { return grid() * grid(); }
  // Token grid side per stage.
  std::vector<std::int64_t> stage_grids() const;

  // Canonical key=value lines (sorted keys); used for checkpoints and hashing.
  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);

  bool operator==(const ModelConfig&) const = default;
};

struct Param {
  std::string name;
  Tensor value;
  std::optional<StreamTag> tag;
};

class Model {
 public:
  static Model build(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::vector<Param>& params() const { return params_; }
  std::int64_t parameter_count() const;
  const Tensor& param(std::string_view name) const;

  // Replaces parameter values (same names and shapes, registry order).
  void set_param_values(std::vector<Tensor> values);
  // Used by checkpoint loading: values looked up by name.
  void load_param(std::string_view name, Tensor value);

  // Logits [B x n_classes]. Parameters enter as constants.
  template <typename T>
  TensorOf<T> forward(const TensorOf<T>& images) const;

  // Same, with every parameter bound as a (stream-tagged) leaf on `tape`;
  // their node ids are appended to `param_nodes` in registry order.
  template <typename T>
  TensorOf<T> forward_bound(const TensorOf<T>& images, BasicTape<T>& tape, std::vector<NodeId>& param_nodes) const;

  bool has_attention() const { return config_.arch == Arch::attn_window; }

  // Attention maps of every attention layer, each [groups x T x T] where a
  // group is one (image, window, head). Fails for SSM models.
  template <typename T>
  std::vector<TensorOf<T>> attention_rollout(const TensorOf<T>& images) const;

  // Sum over attention layers, heads and queries of the attention weight paid
  // to the tokens covering the given patch indices (first-stage grid,
  // row-major). Fails for SSM models.
  template <typename T>
  TensorOf<T> attention_to_patches(const TensorOf<T>& images, const std::vector<std::int64_t>& patches) const;

  // Logits plus the attention score above, with one patch list per image
  // (or a single list shared by the batch), from one forward pass.
  template <typename T>
  std::pair<TensorOf<T>, TensorOf<T>> forward_with_attention(
      const TensorOf<T>& images, const std::vector<std::vector<std::int64_t>>& patches_per_image) const;

  std::vector<int> predict(const Tensor& images) const;

 private:
  template <typename T>
  struct AttnCapture {
    std::vector<TensorOf<T>> maps;
    std::vector<std::int64_t> stage_of_map;
  };

  template <typename T>
  TensorOf<T> run(const TensorOf<T>& images, const std::vector<TensorOf<T>>& params, AttnCapture<T>* capture) const;

  void add_param(std::string name, Tensor value, std::optional<StreamTag> tag = std::nullopt);

  ModelConfig config_;
  std::vector<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Name-based tag expectation: a_log -> A, b_proj -> B, c_proj -> C,
// delta_proj / delta_bias -> Delta, anything else untagged.
std::optional<StreamTag> expected_stream_tag(std::string_view param_name);

// Throws ValidationError if the pixel values of `images` leave [0, 1].
void check_pixel_range(const Tensor& images);

}  // namespace ssmr
