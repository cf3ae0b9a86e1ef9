#include "ssmr/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "ssmr/random.hpp"

namespace ssmr {

std::string_view to_string(FormatFault fault) {
  switch (fault) {
    case FormatFault::io: return "io";
    case FormatFault::bad_magic: return "bad magic";
    case FormatFault::truncated: return "truncated";
    case FormatFault::trailing_data: return "trailing data";
    case FormatFault::count_mismatch: return "count mismatch";
    case FormatFault::label_range: return "label out of range";
    case FormatFault::bad_header: return "bad header";
    case FormatFault::version_mismatch: return "version mismatch";
    case FormatFault::duplicate_tensor: return "duplicate tensor";
    case FormatFault::unknown_tensor: return "unknown tensor";
    case FormatFault::missing_tensor: return "missing tensor";
    case FormatFault::tensor_shape: return "tensor shape";
    case FormatFault::bad_config: return "bad config";
    case FormatFault::bad_value: return "bad value";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Dataset

Dataset Dataset::subset(const std::vector<std::int64_t>& rows) const {
  if (rows.empty()) throw ValidationError("dataset subset must not be empty");
  const auto per = images.numel() / images.dim(0);
  std::vector<float> pix;
  pix.reserve(static_cast<std::size_t>(per) * rows.size());
  std::vector<int> lab;
  lab.reserve(rows.size());
  for (auto r : rows) {
    if (r < 0 || r >= size()) throw ValidationError("dataset row " + std::to_string(r) + " out of range");
    auto src = images.data().subspan(static_cast<std::size_t>(r * per), static_cast<std::size_t>(per));
    pix.insert(pix.end(), src.begin(), src.end());
    lab.push_back(labels[static_cast<std::size_t>(r)]);
  }
  Shape shape = images.shape();
  shape[0] = static_cast<std::int64_t>(rows.size());
  return Dataset{Tensor(shape, std::move(pix)), std::move(lab), n_classes, split};
}

Dataset Dataset::slice(std::int64_t begin, std::int64_t end) const {
  std::vector<std::int64_t> rows;
  for (auto r = begin; r < end; ++r) rows.push_back(r);
  return subset(rows);
}

void Dataset::validate() const {
  if (images.rank() != 4) throw ValidationError("dataset images must be [M x H x W x C]");
  if (images.dim(0) != size()) throw ValidationError("dataset image and label counts differ");
  check_pixel_range(images);
  for (int l : labels)
    if (l < 0 || l >= n_classes) throw ValidationError("label " + std::to_string(l) + " outside [0, n_classes)");
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatFault::io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

struct IdxHeader {
  int ndim;
  std::vector<std::int64_t> dims;
  std::size_t payload_offset;
};

IdxHeader read_idx_header(const std::vector<std::uint8_t>& b, const std::string& what) {
  if (b.size() < 4) throw FormatError(FormatFault::truncated, what + ": file shorter than the magic number");
  if (b[0] != 0 || b[1] != 0 || b[2] != 0x08) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%02x%02x%02x%02x", b[0], b[1], b[2], b[3]);
    throw FormatError(FormatFault::bad_magic, what + ": magic " + buf + " is not an unsigned-byte IDX file");
  }
  IdxHeader h{b[3], {}, 4};
  if (b.size() < 4 + 4 * static_cast<std::size_t>(h.ndim)) {
    throw FormatError(FormatFault::truncated, what + ": header ends before its dimensions");
  }
  for (int i = 0; i < h.ndim; ++i) {
    const auto* p = b.data() + 4 + 4 * i;
    const std::int64_t d = (std::int64_t{p[0]} << 24) | (p[1] << 16) | (p[2] << 8) | p[3];
    h.dims.push_back(d);
  }
  h.payload_offset = 4 + 4 * static_cast<std::size_t>(h.ndim);
  return h;
}

void check_payload(const std::vector<std::uint8_t>& b, const IdxHeader& h, const std::string& what) {
  std::int64_t expected = 1;
  for (auto d : h.dims) {
    if (d <= 0) throw FormatError(FormatFault::bad_header, what + ": zero dimension in header");
    expected *= d;
  }
  const auto have = static_cast<std::int64_t>(b.size() - h.payload_offset);
  if (have < expected) {
    throw FormatError(FormatFault::truncated, what + ": header promises " + std::to_string(expected) +
                                                  " bytes of data, file has " + std::to_string(have));
  }
  if (have > expected) {
    throw FormatError(FormatFault::trailing_data,
                      what + ": " + std::to_string(have - expected) + " bytes after the declared data");
  }
}

std::string be32(std::uint32_t v) {
  std::string s(4, '\0');
  s[0] = static_cast<char>(v >> 24);
  s[1] = static_cast<char>(v >> 16);
  s[2] = static_cast<char>(v >> 8);
  s[3] = static_cast<char>(v);
  return s;
}

}  // namespace

Tensor load_idx_images(const std::filesystem::path& path) {
  const auto b = read_file(path);
  const std::string what = "IDX images " + path.filename().string();
  auto h = read_idx_header(b, what);
  if (h.ndim != 3 && h.ndim != 4) {
    throw FormatError(FormatFault::bad_magic,
                      what + ": expected magic 0x00000803 or 0x00000804, found dimension count " + std::to_string(h.ndim));
  }
  check_payload(b, h, what);
  if (h.ndim == 3) h.dims.push_back(1);
  std::vector<float> pix(b.size() - h.payload_offset);
  for (std::size_t i = 0; i < pix.size(); ++i) pix[i] = static_cast<float>(b[h.payload_offset + i]) / 255.0f;
  return Tensor(h.dims, std::move(pix));
}

std::vector<int> load_idx_labels(const std::filesystem::path& path, std::int64_t n_classes) {
  const auto b = read_file(path);
  const std::string what = "IDX labels " + path.filename().string();
  const auto h = read_idx_header(b, what);
  if (h.ndim != 1) {
    throw FormatError(FormatFault::bad_magic, what + ": expected magic 0x00000801, found dimension count " +
                                                  std::to_string(h.ndim));
  }
  check_payload(b, h, what);
  std::vector<int> labels(b.begin() + static_cast<std::ptrdiff_t>(h.payload_offset), b.end());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) {
      throw FormatError(FormatFault::label_range, what + ": label " + std::to_string(labels[i]) + " at index " +
                                                      std::to_string(i) + " is not below n_classes=" +
                                                      std::to_string(n_classes));
    }
  }
  return labels;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::int64_t n_classes) {
  if (n_classes < 2) throw ValidationError("n_classes must be at least 2");
  Dataset d{load_idx_images(images), load_idx_labels(labels, n_classes), n_classes, "idx"};
  if (d.images.dim(0) != d.size()) {
    throw FormatError(FormatFault::count_mismatch, "IDX: " + std::to_string(d.images.dim(0)) + " images but " +
                                                       std::to_string(d.size()) + " labels");
  }
  return d;
}

void save_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  data.validate();
  const bool rgb = data.channels() != 1;
  std::string img = rgb ? be32(0x804) : be32(0x803);
  for (int i = 0; i < (rgb ? 4 : 3); ++i) img += be32(static_cast<std::uint32_t>(data.images.dim(i)));
  for (float v : data.images.data()) img.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0f))));
  std::string lab = be32(0x801) + be32(static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lab.push_back(static_cast<char>(static_cast<std::uint8_t>(l)));
  write_file(images, img);
  write_file(labels, lab);
}

// ---------------------------------------------------------------------------
// Synthetic gratings

Dataset synth_dataset(std::int64_t n, std::int64_t image_size, std::int64_t n_classes, std::uint64_t seed,
                      std::int64_t channels, const SynthStyle& style) {
  if (n <= 0 || image_size <= 0 || n_classes < 2 || channels <= 0) {
    throw ValidationError("synth_dataset: n, image_size, channels must be positive and n_classes >= 2");
  }
  if (!(style.contrast_min >= 0.0 && style.contrast_min <= style.contrast_max && style.noise >= 0.0)) {
    throw ValidationError("synth_dataset: need 0 <= contrast_min <= contrast_max and noise >= 0");
  }
  Rng rng(seed);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i % n_classes);
  rng.shuffle(labels);

  const double pi = std::numbers::pi;
  const auto side = static_cast<std::size_t>(image_size);
  std::vector<float> pix(static_cast<std::size_t>(n * image_size * image_size * channels));
  std::size_t at = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int k = labels[static_cast<std::size_t>(i)];
    const double theta = pi * k / static_cast<double>(n_classes);
    const double cycles = (k % 2 == 0) ? 3.0 : 5.0;
    const double omega = 2.0 * pi * cycles / static_cast<double>(image_size);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    const double contrast = rng.uniform(style.contrast_min, style.contrast_max);
    const double mean = 0.5 + rng.uniform(-0.05, 0.05);
    const double ux = std::cos(theta), uy = std::sin(theta);
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        const double wave = std::sin(omega * (ux * static_cast<double>(c) + uy * static_cast<double>(r)) + phase);
        for (std::int64_t ch = 0; ch < channels; ++ch) {
          const double tint = 1.0 - 0.1 * static_cast<double>(ch);
          const double v = mean + contrast * tint * wave + style.noise * rng.normal();
          pix[at++] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return Dataset{Tensor({n, image_size, image_size, channels}, std::move(pix)), std::move(labels), n_classes, "synth"};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    u32(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw FormatError(FormatFault::truncated, std::string("checkpoint ends inside ") + what + " at byte " +
                                                    std::to_string(pos_));
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32(const char* what) {
    const auto v = u32(what);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> checkpoint_bytes(const Model& model) {
  Writer w;
  w.bytes("SSMR", 4);
  w.u16(kCheckpointVersion);
  const auto cfg = model.config().to_text();
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg.data(), cfg.size());
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.u8(static_cast<std::uint8_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : p.value.data()) w.f32(v);
  }
  return w.take();
}

Model checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SSMR", 4) != 0) {
    throw FormatError(FormatFault::bad_magic, "checkpoint does not start with \"SSMR\"");
  }
  r.str(4, "magic");
  const auto version = r.u16("version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatFault::version_mismatch, "checkpoint version " + std::to_string(version) +
                                                         " found, expected " + std::to_string(kCheckpointVersion));
  }
  const auto cfg_len = r.u32("config length");
  if (cfg_len > r.remaining()) throw FormatError(FormatFault::truncated, "config block longer than the file");
  const auto cfg_text = r.str(cfg_len, "config");
  ModelConfig cfg;
  Model model;
  try {
    cfg = ModelConfig::from_text(cfg_text);
    model = Model::build(cfg);
  } catch (const ValidationError& e) {
    throw FormatError(FormatFault::bad_config, std::string("checkpoint config rejected: ") + e.what());
  }
  std::unordered_map<std::string, Shape> expected;
  for (const auto& p : model.params()) expected.emplace(p.name, p.value.shape());

  const auto count = r.u32("tensor count");
  std::unordered_set<std::string> seen;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name = r.str(r.u16("tensor name length"), "tensor name");
    if (!seen.insert(name).second) throw FormatError(FormatFault::duplicate_tensor, "tensor " + name + " appears twice");
    auto it = expected.find(name);
    if (it == expected.end()) throw FormatError(FormatFault::unknown_tensor, "model has no tensor named " + name);
    const auto rank = r.u8("tensor rank");
    if (rank == 0 || rank > 8) throw FormatError(FormatFault::bad_header, "tensor " + name + " has rank " + std::to_string(rank));
    Shape shape;
    for (int i = 0; i < rank; ++i) shape.push_back(r.u32("tensor dims"));
    if (shape != it->second) {
      throw FormatError(FormatFault::tensor_shape, "tensor " + name + " stored as " + shape_to_string(shape) +
                                                       ", model expects " + shape_to_string(it->second));
    }
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    r.need(4 * n, "tensor data");
    std::vector<float> v(n);
    for (auto& x : v) {
      x = r.f32("tensor data");
      if (!std::isfinite(x)) throw FormatError(FormatFault::bad_value, "tensor " + name + " holds a non-finite value");
    }
    model.load_param(name, Tensor(shape, std::move(v)));
  }
  for (const auto& p : model.params()) {
    if (!seen.count(p.name)) throw FormatError(FormatFault::missing_tensor, "checkpoint lacks tensor " + p.name);
  }
  if (!r.done()) {
    throw FormatError(FormatFault::trailing_data, std::to_string(r.remaining()) + " bytes after the tensor table");
  }
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto b = checkpoint_bytes(model);
  write_file(path, std::string(b.begin(), b.end()));
}

Model load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_bytes(read_file(path)); }

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Reports

void EvalReport::set_meta(const std::string& key, const std::string& value) {
  for (auto& kv : metadata) {
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  }
  metadata.emplace_back(key, value);
}

const std::string* EvalReport::meta(std::string_view key) const {
  for (const auto& kv : metadata)
    if (kv.first == key) return &kv.second;
  return nullptr;
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "json") return ReportFormat::json;
  throw ValidationError("unknown report format '" + std::string(name) + "' (expected csv or json)");
}

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{"model", "experiment", "condition", "metric", "value"};
  return cols;
}

std::string format_value(double v) {
  if (!std::isfinite(v)) throw NumericError("report value is not finite");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  std::string s = buf;
  if (s == "-0.0000") s = "0.0000";
  return s;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw FormatError(FormatFault::bad_value, "report line " + std::to_string(lineno) + ": unterminated quote");
  out.push_back(std::move(cur));
  return out;
}

std::string join_columns(const std::vector<std::string>& cols) {
  std::string s;
  for (std::size_t i = 0; i < cols.size(); ++i) s += (i ? "," : "") + cols[i];
  return s;
}

double parse_number(const std::string& s, std::size_t lineno) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw FormatError(FormatFault::bad_value, "report line " + std::to_string(lineno) + ": '" + s + "' is not a number");
}

}  // namespace

std::string render_report(const EvalReport& report, ReportFormat format) {
  std::ostringstream out;
  if (format == ReportFormat::csv) {
    for (const auto& [k, v] : report.metadata) out << "# " << k << "=" << v << "\n";
    out << join_columns(report_columns()) << "\n";
    for (const auto& r : report.rows) {
      out << csv_field(r.model) << ',' << csv_field(r.experiment) << ',' << csv_field(r.condition) << ','
          << csv_field(r.metric) << ',' << format_value(r.value) << "\n";
    }
    return out.str();
  }
  using nlohmann::json;
  out << "{\n  \"metadata\": {";
  for (std::size_t i = 0; i < report.metadata.size(); ++i) {
    out << (i ? ",\n    " : "\n    ") << json(report.metadata[i].first).dump() << ": "
        << json(report.metadata[i].second).dump();
  }
  out << (report.metadata.empty() ? "},\n" : "\n  },\n");
  out << "  \"rows\": [";
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    out << (i ? ",\n    " : "\n    ") << "{\"model\": " << json(r.model).dump()
        << ", \"experiment\": " << json(r.experiment).dump() << ", \"condition\": " << json(r.condition).dump()
        << ", \"metric\": " << json(r.metric).dump() << ", \"value\": " << format_value(r.value) << "}";
  }
  out << (report.rows.empty() ? "]\n}\n" : "\n  ]\n}\n");
  return out.str();
}

void emit_report(const EvalReport& report, ReportFormat format, const std::filesystem::path& path) {
  const auto text = render_report(report, format);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  write_file(path, text);
}

EvalReport parse_report(std::string_view text, ReportFormat format) {
  EvalReport report;
  if (format == ReportFormat::json) {
    nlohmann::ordered_json doc;
    try {
      doc = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(FormatFault::bad_value, std::string("report json: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("rows") || !doc["rows"].is_array()) {
      throw FormatError(FormatFault::bad_header, "report json needs an object with a \"rows\" array");
    }
    if (doc.contains("metadata")) {
      for (const auto& [k, v] : doc["metadata"].items()) {
        report.metadata.emplace_back(k, v.is_string() ? v.get<std::string>() : v.dump());
      }
    }
    for (const auto& row : doc["rows"]) {
      std::vector<std::string> keys;
      for (const auto& [k, v] : row.items()) keys.push_back(k);
      auto expected = report_columns();
      std::sort(keys.begin(), keys.end());
      std::sort(expected.begin(), expected.end());
      if (keys != expected) {
        throw FormatError(FormatFault::bad_header,
                          "report columns {" + join_columns(keys) + "} do not match {" + join_columns(report_columns()) + "}");
      }
      try {
        report.rows.push_back(ReportRow{row["model"].get<std::string>(), row["experiment"].get<std::string>(),
                                        row["condition"].get<std::string>(), row["metric"].get<std::string>(),
                                        row["value"].get<double>()});
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatFault::bad_value, std::string("report row: ") + e.what());
      }
    }
    return report;
  }

  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!header && line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError(FormatFault::bad_header, "report metadata line " + std::to_string(lineno));
      report.metadata.emplace_back(line.substr(2, eq - 2), line.substr(eq + 1));
      continue;
    }
    if (!header) {
      const auto cols = split_csv_line(line, lineno);
      if (cols != report_columns()) {
        throw FormatError(FormatFault::bad_header,
                          "report columns {" + join_columns(cols) + "} do not match {" + join_columns(report_columns()) + "}");
      }
      header = true;
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_csv_line(line, lineno);
    if (f.size() != 5) {
      throw FormatError(FormatFault::bad_value, "report line " + std::to_string(lineno) + " has " +
                                                    std::to_string(f.size()) + " fields, expected 5");
    }
    report.rows.push_back(ReportRow{f[0], f[1], f[2], f[3], parse_number(f[4], lineno)});
  }
  if (!header) throw FormatError(FormatFault::bad_header, "report has no header row");
  return report;
}

EvalReport read_report(const std::filesystem::path& path) {
  const auto b = read_file(path);
  const auto fmt = path.extension() == ".json" ? ReportFormat::json : ReportFormat::csv;
  return parse_report(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()), fmt);
}

}  // namespace ssmr
