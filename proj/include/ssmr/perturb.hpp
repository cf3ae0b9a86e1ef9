#pragma once

// Structural and natural perturbations of images in raw [0, 1] pixel space.
// Single-image functions take [H x W x C]; the batch helpers derive one seed
// per image from (spec seed, dataset position) so results do not depend on
// how a dataset is split into batches.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ssmr/attacks.hpp"
#include "ssmr/data_io.hpp"
#include "ssmr/tensor.hpp"

namespace ssmr {

enum class PerturbKind { patch_drop, pixel_drop, grid_shuffle, corruption };
enum class Corruption { gauss_noise, shot_noise, box_blur, contrast };

std::string_view to_string(PerturbKind kind);
std::string_view to_string(Corruption kind);
PerturbKind parse_perturb_kind(std::string_view name);
Corruption parse_corruption(std::string_view name);
const std::vector<Corruption>& all_corruptions();

// Severity tables, indexed by severity - 1.
inline constexpr double kGaussSigma[5] = {0.04, 0.06, 0.08, 0.09, 0.10};
inline constexpr double kShotPhotons[5] = {60, 25, 12, 5, 3};
inline constexpr int kBlurRadius[5] = {1, 1, 2, 2, 3};
inline constexpr double kContrastFactor[5] = {0.75, 0.5, 0.4, 0.3, 0.15};

struct PerturbationSpec {
  PerturbKind kind = PerturbKind::patch_drop;
  std::int64_t budget = 0;      // patches (patch_drop) or pixel sites (pixel_drop)
  std::int64_t patch_size = 4;  // patch_drop only
  std::int64_t grid = 1;        // grid_shuffle only
  Corruption corruption = Corruption::gauss_noise;
  int severity = 1;
  std::uint64_t seed = 0;

  // Checks the spec against an image of the given size.
  void validate(std::int64_t height, std::int64_t width) const;
};

Tensor patch_drop(const Tensor& image, std::int64_t k, std::int64_t patch_size, std::uint64_t seed);
Tensor pixel_drop(const Tensor& image, std::int64_t n, std::uint64_t seed);
Tensor grid_shuffle(const Tensor& image, std::int64_t g, std::uint64_t seed);
Tensor corrupt(const Tensor& image, Corruption kind, int severity, std::uint64_t seed);

Tensor apply_perturbation(const Tensor& image, const PerturbationSpec& spec);
// [B x H x W x C]; image b uses the seed for position first_index + b.
Tensor perturb_batch(const Tensor& images, const PerturbationSpec& spec, std::int64_t first_index = 0);
std::uint64_t image_seed(std::uint64_t seed, std::int64_t index);

// Accuracy on the perturbed dataset.
double perturbed_accuracy(const Classifier& f, const Dataset& data, const PerturbationSpec& spec,
                          std::int64_t batch = 64);

struct Heatmap {
  std::int64_t grid = 0;
  std::vector<double> values;  // row-major robust accuracy per patch position
  // The outer ring of positions versus the central (grid/2 x grid/2) block.
  double center_mean = 0.0;
  double border_mean = 0.0;

  std::string to_csv() const;
  std::string to_json() const;
};

// Patch-Fool pinned to each patch position in turn (cfg.patch_indices is
// overridden); heatmap[i] is the robust accuracy with patch i attacked.
Heatmap positional_sweep(const Classifier& f, std::int64_t grid, const Dataset& data, const AttackConfig& cfg,
                         std::int64_t batch = 32, int workers = 1);
void summarize_heatmap(Heatmap& h);

}  // namespace ssmr
