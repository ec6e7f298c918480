#include "stsopt/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stsopt/error.hpp"

namespace stsopt {

float half_to_float(std::uint16_t h) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exponent = (h >> 10) & 0x1Fu;
  std::uint32_t mantissa = h & 0x3FFu;
  std::uint32_t bits;
  if (exponent == 0) {
    if (mantissa == 0) {
      bits = sign;
    } else {
      // Subnormal: renormalize.
      exponent = 127 - 15 + 1;
      while ((mantissa & 0x400u) == 0) {
        mantissa <<= 1;
        --exponent;
      }
      mantissa &= 0x3FFu;
      bits = sign | (exponent << 23) | (mantissa << 13);
    }
  } else if (exponent == 0x1F) {
    bits = sign | 0x7F800000u | (mantissa << 13);
  } else {
    bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(bits);
}

float bfloat16_to_float(std::uint16_t h) noexcept { return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16); }

SafetensorsArchive SafetensorsArchive::open(const std::filesystem::path& path) {
  SafetensorsArchive archive;
  if (path.string().ends_with(".index.json")) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::kModelLoad, "cannot open " + path.string());
    nlohmann::json index = nlohmann::json::parse(in, nullptr, false);
    if (index.is_discarded() || !index.contains("weight_map")) {
      throw Error(ErrorCode::kModelLoad, "malformed safetensors index " + path.string());
    }
    std::set<std::string> shards;
    for (const auto& [name, file] : index["weight_map"].items()) shards.insert(file.get<std::string>());
    for (const auto& shard : shards) archive.add_file(path.parent_path() / shard);
  } else {
    archive.add_file(path);
  }
  return archive;
}

void SafetensorsArchive::add_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kModelLoad, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw Error(ErrorCode::kModelLoad, path.string() + " is too short for safetensors");
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | bytes[static_cast<std::size_t>(i)];
  if (8 + header_len > bytes.size()) throw Error(ErrorCode::kModelLoad, path.string() + ": truncated header");
  nlohmann::json header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len),
                                                nullptr, false);
  if (header.is_discarded() || !header.is_object()) {
    throw Error(ErrorCode::kModelLoad, path.string() + ": malformed header");
  }
  const std::size_t data_start = 8 + header_len;
  const std::size_t file_index = files_.size();
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") continue;
    Entry e;
    e.dtype = info.at("dtype").get<std::string>();
    e.shape = info.at("shape").get<std::vector<std::int64_t>>();
    e.file = file_index;
    e.begin = data_start + info.at("data_offsets").at(0).get<std::size_t>();
    e.end = data_start + info.at("data_offsets").at(1).get<std::size_t>();
    if (e.end > bytes.size() || e.begin > e.end) {
      throw Error(ErrorCode::kModelLoad, path.string() + ": tensor " + name + " out of bounds");
    }
    tensors_[name] = std::move(e);
  }
  files_.push_back(std::move(bytes));
}

std::vector<std::int64_t> SafetensorsArchive::shape(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error(ErrorCode::kModelLoad, "missing tensor " + name);
  return it->second.shape;
}

std::vector<std::string> SafetensorsArchive::names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : tensors_) out.push_back(name);
  return out;
}

std::vector<double> SafetensorsArchive::values(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error(ErrorCode::kModelLoad, "missing tensor " + name);
  const Entry& e = it->second;
  const unsigned char* p = files_[e.file].data() + e.begin;
  const std::size_t nbytes = e.end - e.begin;
  std::size_t count = 1;
  for (auto dim : e.shape) count *= static_cast<std::size_t>(dim);

  std::vector<double> out(count);
  auto load16 = [p](std::size_t i) {
    return static_cast<std::uint16_t>(p[2 * i] | (static_cast<std::uint16_t>(p[2 * i + 1]) << 8));
  };
  auto expect = [&](std::size_t width) {
    if (nbytes != count * width) throw Error(ErrorCode::kModelLoad, "tensor " + name + " has inconsistent size");
  };
  if (e.dtype == "F32") {
    expect(4);
    for (std::size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, p + 4 * i, 4);
      out[i] = f;
    }
  } else if (e.dtype == "F64") {
    expect(8);
    std::memcpy(out.data(), p, 8 * count);
  } else if (e.dtype == "F16") {
    expect(2);
    for (std::size_t i = 0; i < count; ++i) out[i] = half_to_float(load16(i));
  } else if (e.dtype == "BF16") {
    expect(2);
    for (std::size_t i = 0; i < count; ++i) out[i] = bfloat16_to_float(load16(i));
  } else {
    throw Error(ErrorCode::kModelLoad, "tensor " + name + " has unsupported dtype " + e.dtype);
  }
  return out;
}

}  // namespace stsopt
