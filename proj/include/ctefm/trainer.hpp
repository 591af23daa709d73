#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ctefm/corpus.hpp"
#include "ctefm/losses.hpp"
#include "ctefm/model.hpp"
#include "ctefm/providers.hpp"

namespace ctefm {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 8;
  int max_iters = 5000;
  double weight_decay = 0.01;
  std::uint64_t seed = 1234;
  double reference_duration_s = 4.0;
  int euler_steps_eval = 20;
  double lambda_tim = 0.05;
  int timbre_warmup_iters = 0;  // timbre loss applies from step 0 by default
  double grad_clip = 1.0;
  int checkpoint_every = 1000;
  int threads = 0;  // 0 = hardware default, capped at batch size
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// One padded training example. The mask row is 1 over valid frames; compute
// paths read validity exclusively from it.
struct BatchItem {
  std::string id;
  Matrix x1;          // [max_frames x n_mels], zero rows past valid_frames
  Matrix f_c;         // [max_frames x content_dim], aligned to mel frames
  std::vector<Vector> ref_embs;  // per SV provider, from the reference segment
  Eigen::Index valid_frames = 0;
  bool short_reference = false;
};

struct TrainBatch {
  std::vector<BatchItem> items;
  Eigen::Index max_frames = 0;
  Matrix mask;  // [batch x max_frames], 1 for valid frames

  Eigen::Index total_valid_elements(int n_mels) const;
};

struct StepMetrics {
  double l_cfm = 0.0;
  double l_tim = 0.0;
  double l_total = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

struct ValMetrics {
  double l_cfm = 0.0;
  double secs_mean = 0.0;
  double mel_mse = 0.0;
  int n_items = 0;
};

// Loads and prepares a batch: mel target, aligned content features, 4 s
// reference segment embeddings from the same utterance. Unreadable files are
// skipped with a warning; an entirely empty batch is an error.
TrainBatch build_batch(const std::vector<ManifestItem>& items, const ProviderRegistry& registry,
                       Rng& rng, const TrainConfig& cfg, const MelConfig& mel_cfg);

class Trainer {
 public:
  Trainer(CtefmModel& model, const ProviderRegistry& registry, const TrainConfig& cfg,
          const MelConfig& mel_cfg);

  // One AdamW step on the joint objective; `iter` is the 0-based step index
  // used for loss sampling streams and bias correction.
  StepMetrics train_step(const TrainBatch& batch, int iter);

  // Read-only held-out metrics: CFM loss, SECS of 20-step samples against
  // the reference embeddings, and teacher-conditioned reconstruction MSE.
  ValMetrics validate(const std::vector<ManifestItem>& val_items, int euler_steps) const;

  const TrainConfig& config() const { return cfg_; }

 private:
  CtefmModel& model_;
  const ProviderRegistry& registry_;
  TrainConfig cfg_;
  MelConfig mel_cfg_;
};

// Joint loss for one item on a fresh tape; exposed for gradient tests.
// Returns the scalar root; `parts` receives (sse_cfm, n_elements, l_tim).
struct ItemLossParts {
  double sse = 0.0;
  Eigen::Index n_elements = 0;
  double l_tim = 0.0;
};
nn::Var item_loss_graph(nn::Tape& tape, CtefmModel& model, const ProviderRegistry& registry,
                        const BatchItem& item, double t, const Matrix& x0,
                        double inv_total_elements, double lambda_over_batch,
                        ItemLossParts* parts);

// ---- checkpoints: magic "CTEFMCK1", JSON header, float64 tensor payload ----

struct CheckpointState {
  int format_version = 1;
  std::int64_t iteration = 0;
  ModelConfig model_cfg;
  TrainConfig train_cfg;
  RegistryConfig registry_cfg;
};

void save_checkpoint(const std::string& path, const CtefmModel& model,
                     const CheckpointState& state);
// Rebuilds the model from the stored config and restores parameters and
// optimizer moments bit-exactly.
CheckpointState load_checkpoint(const std::string& path, std::unique_ptr<CtefmModel>& model);

// Appends one JSON line per step: iter, l_cfm, l_tim, l_total, grad_norm, wall_ms.
class MetricsLog {
 public:
  explicit MetricsLog(const std::string& path);
  void append(int iter, const StepMetrics& m);

 private:
  std::string path_;
};

struct TrainRunResult {
  std::string final_checkpoint;
  StepMetrics first, last;
};

// Full training loop with periodic checkpoints and a JSONL metrics log.
TrainRunResult run_training(const std::string& manifest_path, const std::string& out_dir,
                            CtefmModel& model, const ProviderRegistry& registry,
                            const TrainConfig& cfg, const RegistryConfig& reg_cfg,
                            const MelConfig& mel_cfg, std::int64_t start_iter = 0);

}  // namespace ctefm
