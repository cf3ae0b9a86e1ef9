#pragma once

// Byte-level encoders for IDX files and checkpoints, written against the
// documented layouts, plus a corpus of malformed files with the fault each
// one must raise.

#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "ssmr/data_io.hpp"
#include "ssmr/model.hpp"

namespace fuzz {

using Bytes = std::vector<std::uint8_t>;

inline void be32(Bytes& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

inline Bytes idx(std::uint32_t magic, const std::vector<std::uint32_t>& dims, const Bytes& payload) {
  Bytes b;
  be32(b, magic);
  for (auto d : dims) be32(b, d);
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

// Checkpoint encoder written against the documented layout.
struct RawTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

inline void le16(Bytes& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void le32(Bytes& b, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

Bytes encode_checkpoint(const std::string& config, const std::vector<RawTensor>& tensors, std::uint16_t version = 1,
                        const char* magic = "SSMR") {
  Bytes b(magic, magic + 4);
  le16(b, version);
  le32(b, static_cast<std::uint32_t>(config.size()));
  b.insert(b.end(), config.begin(), config.end());
  le32(b, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    le16(b, static_cast<std::uint16_t>(t.name.size()));
    b.insert(b.end(), t.name.begin(), t.name.end());
    b.push_back(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) le32(b, d);
    for (float x : t.data) {
      std::uint32_t u;
      std::memcpy(&u, &x, 4);
      le32(b, u);
    }
  }
  return b;
}

inline std::vector<RawTensor> raw_tensors(const ssmr::Model& m) {
  std::vector<RawTensor> out;
  for (const auto& p : m.params()) {
    RawTensor t{p.name, {}, p.value.to_vector()};
    for (auto d : p.value.shape()) t.dims.push_back(static_cast<std::uint32_t>(d));
    out.push_back(std::move(t));
  }
  return out;
}

struct Case {
  std::string name;
  Bytes bytes;
  enum { images, labels, checkpoint } loader;
  ssmr::FormatFault want;
};

// `model` must have 3 classes and patch_size 2 (labels and the invalid
// config edit depend on it).
inline std::vector<Case> malformed_corpus(const ssmr::Model& good_model) {
  using ssmr::FormatFault;
  const auto cfg_text = good_model.config().to_text();
  const auto tensors = raw_tensors(good_model);
  const auto good = encode_checkpoint(cfg_text, tensors);
  std::vector<Case> corpus;
  corpus.push_back({"empty.idx", {}, Case::images, FormatFault::truncated});
  corpus.push_back({"magic.idx", idx(0x802, {1, 2, 2}, Bytes(4)), Case::images, FormatFault::bad_magic});
  corpus.push_back({"float.idx", idx(0xD03, {1, 2, 2}, Bytes(16)), Case::images, FormatFault::bad_magic});
  corpus.push_back({"labels_as_images.idx", idx(0x801, {4}, Bytes(4)), Case::images, FormatFault::bad_magic});
  corpus.push_back({"header_cut.idx", Bytes{0, 0, 8, 3, 0, 0, 0, 1, 0, 0}, Case::images, FormatFault::truncated});
  corpus.push_back({"zero_dim.idx", idx(0x803, {1, 0, 2}, {}), Case::images, FormatFault::bad_header});
  corpus.push_back({"payload_cut.idx", idx(0x803, {2, 2, 2}, Bytes(7)), Case::images, FormatFault::truncated});
  corpus.push_back({"trailing.idx", idx(0x803, {1, 2, 2}, Bytes(5)), Case::images, FormatFault::trailing_data});
  corpus.push_back({"empty.lab", {}, Case::labels, FormatFault::truncated});
  corpus.push_back({"magic.lab", idx(0x803, {1, 1, 1}, Bytes(1)), Case::labels, FormatFault::bad_magic});
  corpus.push_back({"cut.lab", idx(0x801, {5}, Bytes(3)), Case::labels, FormatFault::truncated});
  corpus.push_back({"trailing.lab", idx(0x801, {2}, Bytes(3)), Case::labels, FormatFault::trailing_data});
  corpus.push_back({"range.lab", idx(0x801, {2}, {0, 3}), Case::labels, FormatFault::label_range});

  corpus.push_back({"empty.ssmr", {}, Case::checkpoint, FormatFault::bad_magic});
  corpus.push_back({"magic.ssmr", encode_checkpoint(cfg_text, tensors, 1, "SSMX"), Case::checkpoint, FormatFault::bad_magic});
  corpus.push_back({"version.ssmr", encode_checkpoint(cfg_text, tensors, 2), Case::checkpoint, FormatFault::version_mismatch});
  corpus.push_back({"cut_header.ssmr", Bytes(good.begin(), good.begin() + 5), Case::checkpoint, FormatFault::truncated});
  corpus.push_back({"cut_config.ssmr", Bytes(good.begin(), good.begin() + 20), Case::checkpoint, FormatFault::truncated});
  corpus.push_back({"cut_table.ssmr", Bytes(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() / 2)),
                    Case::checkpoint, FormatFault::truncated});
  corpus.push_back({"cut_last.ssmr", Bytes(good.begin(), good.end() - 1), Case::checkpoint, FormatFault::truncated});
  {
    auto b = good;
    b.push_back(0);
    corpus.push_back({"trailing.ssmr", b, Case::checkpoint, FormatFault::trailing_data});
  }
  {
    auto t = tensors;
    t.push_back(t.front());
    corpus.push_back({"duplicate.ssmr", encode_checkpoint(cfg_text, t), Case::checkpoint, FormatFault::duplicate_tensor});
  }
  {
    auto t = tensors;
    t[0].name = "embed.wieght";
    corpus.push_back({"unknown.ssmr", encode_checkpoint(cfg_text, t), Case::checkpoint, FormatFault::unknown_tensor});
  }
  {
    auto t = tensors;
    t.pop_back();
    corpus.push_back({"missing.ssmr", encode_checkpoint(cfg_text, t), Case::checkpoint, FormatFault::missing_tensor});
  }
  {
    auto t = tensors;
    t[0].dims = {t[0].dims[1], t[0].dims[0]};
    if (t[0].dims == tensors[0].dims) t[0].dims = {static_cast<std::uint32_t>(t[0].data.size())};
    corpus.push_back({"shape.ssmr", encode_checkpoint(cfg_text, t), Case::checkpoint, FormatFault::tensor_shape});
  }
  {
    auto t = tensors;
    t[1].data[0] = std::numeric_limits<float>::quiet_NaN();
    corpus.push_back({"nan.ssmr", encode_checkpoint(cfg_text, t), Case::checkpoint, FormatFault::bad_value});
  }
  corpus.push_back({"config_key.ssmr", encode_checkpoint(cfg_text + "colour = blue\n", tensors), Case::checkpoint,
                    FormatFault::bad_config});
  {
    auto bad = cfg_text;
    bad.replace(bad.find("patch_size=2"), 12, "patch_size=3");
    corpus.push_back({"config_invalid.ssmr", encode_checkpoint(bad, tensors), Case::checkpoint, FormatFault::bad_config});
  }
  {
    auto t = tensors;
    t[0].dims.clear();
    t[0].data.clear();
    corpus.push_back({"rank0.ssmr", encode_checkpoint(cfg_text, t), Case::checkpoint, FormatFault::bad_header});
  }
  return corpus;
}

}  // namespace fuzz
