#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mblm/model.hpp"

namespace mblm {

// Versioned little-endian container of named fp32 arrays plus a JSON
// metadata document. Model checkpoints and optimizer state share it.
struct ArrayFile {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> entries;
};

void write_array_file(const std::string& path, const ArrayFile& file);
ArrayFile read_array_file(const std::string& path);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

void save_checkpoint(const MblmModel& model, const std::string& path);
MblmModel load_checkpoint(const std::string& path);
// Loads parameter values into an already-built model of the same structure.
void restore_parameters(MblmModel& model, const std::string& path);

void save_adam_state(const Adam& opt, const std::vector<NamedParam>& params,
                     const std::string& path);
void load_adam_state(Adam& opt, const std::vector<NamedParam>& params, const std::string& path);

}  // namespace mblm
