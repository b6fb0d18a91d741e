#include "l3/manifest.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "l3/serialize.hpp"

namespace l3 {

uint64_t fnv1a_bytes(const void* data, size_t n) {
  const auto* p = static_cast<const uint8_t*>(data);
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t fnv1a_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), ErrorKind::Io, "cannot open for hashing: " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    const auto n = static_cast<size_t>(is.gcount());
    for (size_t i = 0; i < n; ++i) {
      h ^= static_cast<uint8_t>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!is) break;
  }
  return h;
}

void RunManifest::add_input(const std::string& path) {
  input_hashes.emplace_back(path, fnv1a_file(path));
}

void RunManifest::write(const std::string& path) const {
  nlohmann::json j;
  j["command_line"] = command_line;
  j["tool_version"] = tool_version;
  j["seed"] = seed;
  j["resolved_config"] = resolved_config;
  nlohmann::json inputs = nlohmann::json::object();
  for (const auto& [p, h] : input_hashes) {
    char hex[32];
    std::snprintf(hex, sizeof(hex), "fnv1a64:%016llx", static_cast<unsigned long long>(h));
    inputs[p] = hex;
  }
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["wall_seconds"] = wall_seconds;
  std::ofstream os(path);
  check(os.good(), ErrorKind::Io, "cannot write manifest: " + path);
  os << j.dump(2) << "\n";
}

}  // namespace l3
