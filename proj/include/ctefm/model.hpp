#pragma once

#include <nlohmann/json.hpp>

#include "ctefm/cfm.hpp"
#include "ctefm/cte.hpp"

namespace ctefm {

struct ModelConfig {
  CteConfig cte;
  VfConfig vf;
  FlowSchedule flow;

  // Keeps the dependent dims (cond/timbre/mel widths) coherent.
  void link(int n_mels);
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// All trainable state of the system: CTE (with AdaFusion weights) plus the
// CFM vector field, addressable by name for checkpoints and the optimizer.
struct CtefmModel {
  ModelConfig cfg;
  ParamStore params;
  CteParams cte;
  VfParams vf;

  explicit CtefmModel(const ModelConfig& config);
  // Seeded Gaussian init (1/sqrt(fan_in)); LN gains at 1, the final vector
  // field conv at zero, AdaFusion weights at 1.
  void init(std::uint64_t seed);
};

}  // namespace ctefm
