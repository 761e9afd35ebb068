#pragma once

// On-disk container shared by weight tensors, feature operators and LET heads.
//
//   FORGE-CONTAINER 1\n
//   <decimal header byte length>\n
//   <UTF-8 JSON header>\n
//   <payload>
//
// The payload is the concatenation of every block as contiguous little-endian
// IEEE-754 binary64 values in row-major order. The header lists each block's
// name, shape and element offset, the payload byte count, and an FNV-1a 64-bit
// checksum of the payload bytes. All other header fields are free-form metadata
// owned by the writer (kind, ranges, indices, ...).

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "forge/types.hpp"

namespace forge {

using Json = nlohmann::json;

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);
std::string checksum_file(const std::filesystem::path& path);

struct NamedBlock {
  std::string name;
  Matrix data;
};

class Container {
 public:
  Container() = default;
  explicit Container(Json meta) : meta_(std::move(meta)) {}

  Json& meta() { return meta_; }
  const Json& meta() const { return meta_; }

  void add(std::string name, Matrix data);
  const Matrix& block(std::string_view name) const;
  bool has_block(std::string_view name) const;
  const std::vector<NamedBlock>& blocks() const { return blocks_; }

  std::string to_bytes() const;
  static Container from_bytes(std::string_view bytes);

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  Json meta_ = Json::object();
  std::vector<NamedBlock> blocks_;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace forge
