#include "forge/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "forge/error.hpp"

namespace forge {
namespace {

constexpr std::string_view kMagic = "FORGE-CONTAINER 1\n";

void append_f64_le(std::string& out, double value) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(value);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xffU);
  out.append(buf, 8);
}

double read_f64_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[value & 0xfU];
    value >>= 4;
  }
  return s;
}

std::string checksum_file(const std::filesystem::path& path) {
  return "fnv1a64:" + hex64(fnv1a64(read_file(path)));
}

void Container::add(std::string name, Matrix data) {
  if (has_block(name)) throw InvalidArgument("duplicate container block '" + name + "'");
  blocks_.push_back({std::move(name), std::move(data)});
}

bool Container::has_block(std::string_view name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return true;
  return false;
}

const Matrix& Container::block(std::string_view name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return b.data;
  throw FormatError("container has no block '" + std::string(name) + "'");
}

std::string Container::to_bytes() const {
  std::string payload;
  Json blocks = Json::array();
  std::size_t offset = 0;
  for (const auto& b : blocks_) {
    const auto rows = b.data.rows();
    const auto cols = b.data.cols();
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) append_f64_le(payload, b.data(r, c));
    blocks.push_back({{"name", b.name}, {"rows", rows}, {"cols", cols}, {"offset", offset}});
    offset += static_cast<std::size_t>(rows * cols);
  }
  Json header = meta_;
  header["blocks"] = std::move(blocks);
  header["payload_bytes"] = payload.size();
  header["checksum"] = "fnv1a64:" + hex64(fnv1a64(payload));
  const std::string text = header.dump();

  std::string out;
  out.reserve(kMagic.size() + 24 + text.size() + payload.size());
  out.append(kMagic);
  out.append(std::to_string(text.size()));
  out.push_back('\n');
  out.append(text);
  out.push_back('\n');
  out.append(payload);
  return out;
}

Container Container::from_bytes(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) != kMagic) throw FormatError("missing container magic line");
  std::size_t pos = kMagic.size();
  const std::size_t nl = bytes.find('\n', pos);
  if (nl == std::string_view::npos) throw FormatError("truncated container header length");
  std::size_t header_len = 0;
  try {
    header_len = std::stoull(std::string(bytes.substr(pos, nl - pos)));
  } catch (const std::exception&) {
    throw FormatError("bad container header length");
  }
  pos = nl + 1;
  if (pos + header_len + 1 > bytes.size()) throw FormatError("truncated container header");
  Json header;
  try {
    header = Json::parse(bytes.substr(pos, header_len));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("container header is not valid JSON: ") + e.what());
  }
  pos += header_len;
  if (bytes[pos] != '\n') throw FormatError("container header not newline-terminated");
  ++pos;
  const std::string_view payload = bytes.substr(pos);
  if (!header.contains("payload_bytes") || header["payload_bytes"].get<std::size_t>() != payload.size())
    throw FormatError("container payload size mismatch");
  const std::string expected = header.value("checksum", std::string());
  if (expected != "fnv1a64:" + hex64(fnv1a64(payload))) throw FormatError("container checksum mismatch");

  Container c;
  for (const auto& b : header.at("blocks")) {
    const auto rows = b.at("rows").get<Eigen::Index>();
    const auto cols = b.at("cols").get<Eigen::Index>();
    const auto offset = b.at("offset").get<std::size_t>();
    if ((offset + static_cast<std::size_t>(rows * cols)) * 8 > payload.size())
      throw FormatError("container block exceeds payload");
    Matrix m(rows, cols);
    const char* p = payload.data() + offset * 8;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index col = 0; col < cols; ++col, p += 8) m(r, col) = read_f64_le(p);
    c.blocks_.push_back({b.at("name").get<std::string>(), std::move(m)});
  }
  header.erase("blocks");
  header.erase("payload_bytes");
  header.erase("checksum");
  c.meta_ = std::move(header);
  return c;
}

void Container::save(const std::filesystem::path& path) const { write_file(path, to_bytes()); }

Container Container::load(const std::filesystem::path& path) { return from_bytes(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace forge
