#pragma once

// Datasets, IDX ingestion, "SSMR" checkpoints and tabular reports.
//
// IDX: big-endian header, u8 payload.
//   images  0x00000803  [count, rows, cols]            (grayscale)
//           0x00000804  [count, rows, cols, channels]  (RGB extension)
//   labels  0x00000801  [count]
//
// Checkpoint (all integers little-endian):
//   "SSMR" | u16 version | u32 len + config text | u32 tensor count |
//   per tensor: u16 len + name, u8 rank, rank x u32 dims, f32 data

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssmr/error.hpp"
#include "ssmr/model.hpp"
#include "ssmr/tensor.hpp"

namespace ssmr {

inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr const char* kLibraryVersion = "0.1.0";

enum class FormatFault {
  io,
  bad_magic,
  truncated,
  trailing_data,
  count_mismatch,
  label_range,
  bad_header,
  version_mismatch,
  duplicate_tensor,
  unknown_tensor,
  missing_tensor,
  tensor_shape,
  bad_config,
  bad_value,
};

std::string_view to_string(FormatFault fault);

// A malformed or unreadable file. Each loader failure carries a specific fault.
class FormatError : public ValidationError {
 public:
  FormatError(FormatFault fault, const std::string& what)
      : ValidationError(std::string(to_string(fault)) + ": " + what), fault_(fault) {}
  FormatFault fault() const { return fault_; }

 private:
  FormatFault fault_;
};

struct Dataset {
  Tensor images;            // [M x H x W x C] in [0, 1]
  std::vector<int> labels;  // [M] in [0, n_classes)
  std::int64_t n_classes = 0;
  std::string split;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t image_size() const { return images.dim(1); }
  std::int64_t channels() const { return images.dim(3); }

  // Rows in the given order.
  Dataset subset(const std::vector<std::int64_t>& rows) const;
  Dataset slice(std::int64_t begin, std::int64_t end) const;
  // Throws ValidationError on out-of-range pixels or labels.
  void validate() const;
};

// Images [count x H x W x C] scaled by 1/255.
Tensor load_idx_images(const std::filesystem::path& path);
std::vector<int> load_idx_labels(const std::filesystem::path& path, std::int64_t n_classes);
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::int64_t n_classes);

// Pixels are quantized with round(v * 255); channels == 1 writes 0x803.
void save_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

// Oriented sinusoidal gratings, one (orientation, frequency) pair per class,
// random phase and contrast per image, additive Gaussian noise, clamped to
// [0, 1]. `style` sets the contrast range and noise level. Labels cycle through the classes before shuffling, so every class
// count is within one of n / n_classes.
struct SynthStyle {
  double contrast_min = 0.25;
  double contrast_max = 0.45;
  double noise = 0.08;  // Gaussian sigma
};
Dataset synth_dataset(std::int64_t n, std::int64_t image_size, std::int64_t n_classes, std::uint64_t seed,
                      std::int64_t channels = 1, const SynthStyle& style = {});

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> checkpoint_bytes(const Model& model);
Model checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string model;
  std::string experiment;
  std::string condition;
  std::string metric;
  double value = 0.0;

  bool operator==(const ReportRow&) const = default;
};

struct EvalReport {
  // Insertion-ordered key/value pairs (seed, config hash, versions, constants).
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<ReportRow> rows;

  void set_meta(const std::string& key, const std::string& value);
  const std::string* meta(std::string_view key) const;
};

enum class ReportFormat { csv, json };

ReportFormat parse_report_format(std::string_view name);
const std::vector<std::string>& report_columns();

// Numbers are written with exactly four decimals.
std::string render_report(const EvalReport& report, ReportFormat format);
void emit_report(const EvalReport& report, ReportFormat format, const std::filesystem::path& path);
EvalReport parse_report(std::string_view text, ReportFormat format);
// Format chosen from the extension (.json, otherwise csv).
EvalReport read_report(const std::filesystem::path& path);

std::string format_value(double v);

}  // namespace ssmr
