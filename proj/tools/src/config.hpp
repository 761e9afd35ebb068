#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <forge/container.hpp>

namespace forge::cli {

/// Invalid configuration; every entry is one `section.key: problem` line.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> diagnostics);
  const std::vector<std::string>& diagnostics() const { return diagnostics_; }

 private:
  std::vector<std::string> diagnostics_;
};

/// Flat sectioned text config (`[section]` then `key = value`, lists as `[a, b]`).
/// Top-level keys belong to the `run` section.
class Config {
 public:
  static Config load(const std::filesystem::path& path);
  static Config parse(const std::string& text);
  static Config from_json(const Json& j);

  bool has(const std::string& section, const std::string& key) const;
  const std::vector<std::string>* find(const std::string& section, const std::string& key) const;
  void set(const std::string& section, const std::string& key, std::vector<std::string> values);

  /// Unknown sections or keys, checked against the declared schema.
  std::vector<std::string> schema_problems() const;

  const std::map<std::string, std::map<std::string, std::vector<std::string>>>& values() const { return values_; }

 private:
  std::map<std::string, std::map<std::string, std::vector<std::string>>> values_;
};

/// Typed access to one section. Problems are collected, not thrown; values read
/// are recorded so the effective configuration can be written to a manifest.
class Section {
 public:
  Section(const Config& cfg, std::string name, std::vector<std::string>& problems, Json& effective);

  int integer(const std::string& key, int fallback, std::optional<int> min = {}, std::optional<int> max = {});
  double real(const std::string& key, double fallback, std::optional<double> min = {}, std::optional<double> max = {});
  bool boolean(const std::string& key, bool fallback);
  std::uint64_t seed(const std::string& key, std::uint64_t fallback);
  std::string text(const std::string& key, const std::string& fallback);
  std::string choice(const std::string& key, const std::string& fallback, const std::vector<std::string>& allowed);
  std::string required_text(const std::string& key);
  std::vector<std::string> list(const std::string& key, const std::vector<std::string>& fallback);
  std::vector<std::string> required_list(const std::string& key);
  std::vector<int> int_list(const std::string& key, const std::vector<int>& fallback, bool required = false);
  std::vector<double> real_list(const std::string& key, const std::vector<double>& fallback, bool required = false);

  /// Records a value computed from flags or the environment as effective.
  void override_value(const std::string& key, const std::string& value);
  const std::string& name() const { return name_; }

 private:
  const std::vector<std::string>* raw(const std::string& key) const;
  void problem(const std::string& key, const std::string& what);

  const Config& cfg_;
  std::string name_;
  std::vector<std::string>& problems_;
  Json& effective_;
  std::map<std::string, std::string> overrides_;
};

}  // namespace forge::cli
