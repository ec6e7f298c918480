#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace stsopt {

/// Reader for the safetensors container (8-byte little-endian header length, JSON header,
/// raw tensor bytes). Supports F32, F16, BF16 and F64 payloads, converted on access.
class SafetensorsArchive {
 public:
  /// Loads a single file, or every shard named in a `*.safetensors.index.json`.
  static SafetensorsArchive open(const std::filesystem::path& path);

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  std::vector<std::int64_t> shape(const std::string& name) const;
  /// Tensor data converted to double, row-major.
  std::vector<double> values(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  struct Entry {
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::size_t file = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
  };

  void add_file(const std::filesystem::path& path);

  std::vector<std::vector<unsigned char>> files_;
  std::map<std::string, Entry> tensors_;
};

float half_to_float(std::uint16_t h) noexcept;
float bfloat16_to_float(std::uint16_t h) noexcept;

}  // namespace stsopt
