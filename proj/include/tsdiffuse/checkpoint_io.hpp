// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Single-file checkpoint container.
//
//   magic    "TSDCKPT\0"                       8 bytes
//   version  u32
//   hlen     u64, then hlen bytes of JSON:
//            {"format_version","config","vocab","step","epoch","tensors"}
//   tensors  repeated: u32 name length, name bytes, u32 ndim, u64 dims[ndim],
//            float32 data (row-major)
//
// All integers and floats are little-endian regardless of host.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsdiffuse/config.hpp"
#include "tsdiffuse/conditioner.hpp"
#include "tsdiffuse/error.hpp"
#include "tsdiffuse/model.hpp"

namespace tsdiffuse {

inline constexpr std::array<char, 8> kCheckpointMagic{'T', 'S', 'D', 'C', 'K', 'P', 'T', '\0'};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U u;
  std::memcpy(&u, &v, sizeof u);
  for (std::size_t i = 0; i < sizeof u; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  template <class T>
  T get_le() {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    need(sizeof(U));
    U u = 0;
    for (std::size_t i = 0; i < sizeof u; ++i) u |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof u;
    T v;
    std::memcpy(&v, &u, sizeof v);
    return v;
  }

  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("checkpoint is truncated");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::ordered_json header;
  header["format_version"] = c.format_version;
  header["config"] = to_json(c.config);
  header["vocab"] = c.vocab.to_lines();
  header["step"] = c.step;
  header["epoch"] = c.epoch;
  header["tensors"] = c.params.size();
  const std::string h = header.dump();

  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, c.format_version);
  detail::put_le<std::uint64_t>(out, h.size());
  out += h;
  for (const auto& p : c.params) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_le<std::uint32_t>(out, 2);
    detail::put_le<std::uint64_t>(out, p.rows);
    detail::put_le<std::uint64_t>(out, p.cols);
    for (double v : p.value) detail::put_le<float>(out, static_cast<float>(v));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.bytes(kCheckpointMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) throw FormatError("not a tsdiffuse checkpoint");
  const auto version = r.get_le<std::uint32_t>();
  if (version != Checkpoint::kFormatVersion)
    throw IncompatibleVersionError("checkpoint format version " + std::to_string(version) +
                                   " is not supported by this build (expected " +
                                   std::to_string(Checkpoint::kFormatVersion) + ")");
  const auto hlen = r.get_le<std::uint64_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint c;
  std::size_t count = 0;
  try {
    c.format_version = header.at("format_version").get<std::uint32_t>();
    if (c.format_version != version) throw FormatError("checkpoint header version disagrees with preamble");
    c.config = config_from_json(header.at("config"));
    c.vocab = Vocab::from_lines(header.at("vocab").get<std::string>());
    c.step = header.at("step").get<std::uint64_t>();
    c.epoch = header.at("epoch").get<int>();
    count = header.at("tensors").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  for (std::size_t t = 0; t < count; ++t) {
    const auto nlen = r.get_le<std::uint32_t>();
    std::string name(r.bytes(nlen));
    const auto ndim = r.get_le<std::uint32_t>();
    if (ndim != 2) throw FormatError("tensor '" + name + "' has " + std::to_string(ndim) + " dims, expected 2");
    const auto rows = r.get_le<std::uint64_t>();
    const auto cols = r.get_le<std::uint64_t>();
    const std::size_t idx = c.params.add(name, rows, cols);
    for (auto& v : c.params[idx].value) v = static_cast<double>(r.get_le<float>());
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace tsdiffuse
