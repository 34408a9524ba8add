#include "icam/util.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <vector>
#include <algorithm>

#include <nlohmann/json.hpp>

namespace icam {

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::string config_hash(const nlohmann::json& config) { return to_hex(fnv1a64(config.dump())); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ (stream * 0xd1b54a32d192ed03ull));
}

int threads_from_env(int fallback) {
  if (const char* v = std::getenv("ICAM_THREADS")) {
    const int n = std::atoi(v);
    if (n >= 1) return n;
  }
  return fallback;
}

std::string directory_hash(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(std::filesystem::relative(e.path(), root));
  }
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) {
    std::ifstream in(root / f, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), {});
    acc += f.generic_string() + ":" + to_hex(fnv1a64(bytes)) + ";";
  }
  return to_hex(fnv1a64(acc));
}

}  // namespace icam
