#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <forge/container.hpp>

#include "config.hpp"

namespace forge::cli {

/// One invocation: the subcommand path, its flag options and the config.
struct Invocation {
  std::vector<std::string> command;  // e.g. {"head", "train"}
  Config config;
  std::filesystem::path out = "forge_out";
  std::optional<std::uint64_t> seed;  // --seed, applies to the command's own section
  std::optional<std::string> env_seed;  // FORGE_SEED, applies to every section
  std::optional<int> workers;
  bool verify = false;  // rerun: compare outputs with the manifest
  Json expected_outputs = Json::array();
};

/// Runs a pipeline step. Throws ConfigError for invalid configuration and
/// forge::Error (or std::exception) for runtime failures.
void execute(Invocation inv);

/// Rebuilds the invocation recorded in a manifest.
Invocation from_manifest(const std::filesystem::path& manifest, const std::optional<std::filesystem::path>& out);

/// Full command line entry point; returns the process exit code.
int run(int argc, char** argv);

}  // namespace forge::cli
