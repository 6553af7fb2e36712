#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "dmil/policies.hpp"

namespace dmil {

inline constexpr int kCheckpointSchemaVersion = 1;

/// Trained parameters plus the state needed to resume: the method tag, the
/// scheduler's RNG state and the number of completed outer iterations.
struct Checkpoint {
  std::string method = "dmil";
  HierarchicalParams params;
  std::uint64_t rng_state = 0;
  std::size_t iteration = 0;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b);
};

/// {schema_version, method, K, shapes: {high, skill}, high, skills,
///  rng_state, iteration}. Doubles are written in shortest round-trip form,
/// so parsing gives back the same bits.
nlohmann::json checkpoint_to_json(const Checkpoint& checkpoint);
/// Throws SchemaError on a version mismatch or a malformed document.
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dmil
