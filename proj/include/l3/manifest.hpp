#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace l3 {

inline constexpr const char* kToolVersion = "l3 0.1.0";

// One manifest per artifact-producing command, written next to the outputs:
// enough to replay the run and to tell whether inputs changed.
struct RunManifest {
  std::string command_line;
  std::string tool_version = kToolVersion;
  uint64_t seed = 0;
  std::string resolved_config;  // full flag/config dump after precedence
  std::vector<std::pair<std::string, uint64_t>> input_hashes;  // path -> fnv1a64
  std::vector<std::string> outputs;
  double wall_seconds = 0;

  void add_input(const std::string& path);
  void write(const std::string& path) const;
};

}  // namespace l3
