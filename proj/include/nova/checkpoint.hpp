#pragma once

// Tensor checkpoints: a text manifest with one record per tensor
//
//   <name> <dtype> <shape> <byte offset>
//
// (shape as comma-separated extents, "scalar" for rank 0; dtype f32 or f64)
// next to a single little-endian payload file holding the flat values
// back to back.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nova/diffcore.hpp"

namespace nova {

inline constexpr const char* kManifestName = "tensors.manifest";
inline constexpr const char* kPayloadName = "tensors.bin";

template <class Real>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
  return std::is_same_v<Real, float> ? "f32" : "f64";
}

struct ManifestRecord {
  std::string name;
  std::string dtype;
  Shape shape;
  std::uint64_t offset = 0;
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U bits) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

inline std::string format_shape(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape(const std::string& text) {
  Shape s;
  if (text == "scalar") return s;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) s.push_back(std::stoull(tok));
  return s;
}

}  // namespace detail

template <class Real>
void write_checkpoint(const std::filesystem::path& dir,
                      const std::vector<std::pair<std::string, Tensor<Real>>>& tensors) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream man(dir / kManifestName);
  std::ofstream bin(dir / kPayloadName, std::ios::binary);
  if (!man || !bin) throw FileError(dir.string(), "cannot open checkpoint files for writing");
  man << "nova-checkpoint 1\n";
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    man << name << ' ' << dtype_name<Real>() << ' ' << detail::format_shape(t.shape()) << ' ' << offset << '\n';
    for (Real v : t.data()) {
      if constexpr (std::is_same_v<Real, double>) {
        detail::put_le(bin, std::bit_cast<std::uint64_t>(v));
      } else {
        detail::put_le(bin, std::bit_cast<std::uint32_t>(v));
      }
    }
    offset += t.size() * sizeof(Real);
  }
  if (!man || !bin) throw FileError(dir.string(), "write failed");
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& dir) {
  std::ifstream man(dir / kManifestName);
  if (!man) throw FileError((dir / kManifestName).string(), "cannot open manifest");
  std::string header;
  std::getline(man, header);
  if (header != "nova-checkpoint 1") throw FileError((dir / kManifestName).string(), "unrecognized header");
  std::vector<ManifestRecord> recs;
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestRecord r;
    std::string shape;
    if (!(ls >> r.name >> r.dtype >> shape >> r.offset) || (r.dtype != "f32" && r.dtype != "f64")) {
      throw FileError((dir / kManifestName).string(), "malformed record: " + line);
    }
    r.shape = detail::parse_shape(shape);
    recs.push_back(std::move(r));
  }
  return recs;
}

/// Loads every tensor of a checkpoint, converting the stored dtype to Real.
template <class Real>
std::map<std::string, Tensor<Real>> read_checkpoint(const std::filesystem::path& dir) {
  const auto recs = read_manifest(dir);
  std::ifstream bin(dir / kPayloadName, std::ios::binary);
  if (!bin) throw FileError((dir / kPayloadName).string(), "cannot open payload");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  std::map<std::string, Tensor<Real>> out;
  for (const auto& r : recs) {
    const std::size_t n = shape_size(r.shape);
    const std::size_t width = r.dtype == "f64" ? 8 : 4;
    if (r.offset + n * width > bytes.size()) {
      throw FileError((dir / kPayloadName).string(), "payload too short for " + r.name);
    }
    std::vector<Real> v(n);
    const unsigned char* p = bytes.data() + r.offset;
    for (std::size_t i = 0; i < n; ++i) {
      if (width == 8) {
        v[i] = static_cast<Real>(std::bit_cast<double>(detail::get_le<std::uint64_t>(p + 8 * i)));
      } else {
        v[i] = static_cast<Real>(std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i)));
      }
    }
    out.emplace(r.name, Tensor<Real>::from(r.shape, std::move(v)));
  }
  return out;
}

}  // namespace nova
