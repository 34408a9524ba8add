#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json_fwd.hpp>

namespace icam {

std::uint64_t fnv1a64(std::string_view bytes);
std::string to_hex(std::uint64_t value);

/// Hash of the compact JSON dump; nlohmann orders object keys, so equal
/// configurations always hash equal.
std::string config_hash(const nlohmann::json& config);

/// Seed mixer for deriving independent per-record streams from (seed, index).
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Worker count from ICAM_THREADS (>= 1), or `fallback` when unset.
int threads_from_env(int fallback = 1);

/// Hash over the sorted relative paths and contents of every regular file.
std::string directory_hash(const std::filesystem::path& root);

inline constexpr const char* kVersion = "0.1.0";

}  // namespace icam
