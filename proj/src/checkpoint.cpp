#include "dmil/checkpoint.hpp"

#include <fstream>

#include "dmil/config.hpp"

namespace dmil {

using nlohmann::json;

bool operator==(const Checkpoint& a, const Checkpoint& b) {
  return a.method == b.method && a.rng_state == b.rng_state && a.iteration == b.iteration &&
         bitwise_equal(a.params, b.params);
}

json checkpoint_to_json(const Checkpoint& c) {
  json skills = json::array();
  for (const auto& s : c.params.skills) skills.push_back(s.to_vector());
  return {{"schema_version", kCheckpointSchemaVersion},
          {"method", c.method},
          {"K", c.params.K()},
          {"shapes", {{"high", c.params.high_shape.layer_sizes}, {"skill", c.params.skill_shape.layer_sizes}}},
          {"high", c.params.high.to_vector()},
          {"skills", skills},
          // Stored as a string: JSON readers outside C++ commonly lose
          // integer precision above 2^53.
          {"rng_state", std::to_string(c.rng_state)},
          {"iteration", c.iteration}};
}

Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object() || !j.contains("schema_version")) throw SchemaError("checkpoint has no schema_version");
  const int version = j.at("schema_version").get<int>();
  if (version != kCheckpointSchemaVersion)
    throw SchemaError("checkpoint schema_version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointSchemaVersion) + ")");
  try {
    Checkpoint c;
    c.method = j.at("method").get<std::string>();
    c.params.high_shape.layer_sizes = j.at("shapes").at("high").get<std::vector<std::size_t>>();
    c.params.skill_shape.layer_sizes = j.at("shapes").at("skill").get<std::vector<std::size_t>>();
    const auto high = j.at("high").get<std::vector<double>>();
    c.params.high = ParamVector::from(high);
    for (const auto& s : j.at("skills")) {
      const auto values = s.get<std::vector<double>>();
      c.params.skills.push_back(ParamVector::from(values));
    }
    if (j.at("K").get<std::size_t>() != c.params.K()) throw SchemaError("checkpoint K disagrees with its skills");
    c.rng_state = std::stoull(j.at("rng_state").get<std::string>());
    c.iteration = j.at("iteration").get<std::size_t>();
    c.params.validate();
    return c;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ContractError& e) {
    throw SchemaError(std::string("inconsistent checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << checkpoint_to_json(checkpoint).dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw SchemaError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace dmil
