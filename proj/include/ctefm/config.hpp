#pragma once

#include <string>

#include "ctefm/trainer.hpp"

namespace ctefm {

// Everything a training run needs, assembled from a flat key-value config
// file (TOML-style `key = value` lines or a JSON object). Unknown keys are
// rejected with the list of valid ones.
struct RunSetup {
  TrainConfig train;
  ModelConfig model;
  RegistryConfig registry;
  MelConfig mel;

  void finalize();  // links dependent dims; validates
};

RunSetup default_run_setup();
RunSetup load_run_config(const std::string& path);
RunSetup parse_run_config_json(const nlohmann::json& j);

}  // namespace ctefm
