#pragma once

#include <string>

#include "ctefm/trainer.hpp"

namespace ctefm {

// Writes generated mel either as a tensor file ("identity-mel") or through
// an external vocoder process invoked as: <command> <mel-file> <out-file>.
struct VocoderAdapter {
  std::string id = "identity-mel";
  std::string command;  // required when id == "external"

  void write(const MelSpectrogram& mel, const std::string& output_path) const;
};

struct ConversionRequest {
  std::string source_path;
  std::string reference_path;
  std::string output_path;
  std::string checkpoint_path;
  int euler_steps = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ConversionResult {
  MelSpectrogram mel;
  std::vector<Vector> output_embs;  // per SV provider, from the generated mel
};

// Zero-shot conversion: content from the source, timbre from the reference,
// Euler-sampled mel written through the vocoder adapter.
ConversionResult convert(const ConversionRequest& req, const VocoderAdapter& vocoder = {});

struct EvalOptions {
  int n_pairs = 0;  // 0: one pair per held-out item
  int euler_steps = 20;
  std::uint64_t seed = 0;
};

// Pairs each held-out source with a random other-speaker reference,
// converts, and reports SECS per provider plus teacher-conditioned mel MSE.
nlohmann::json run_eval(const std::string& manifest_path, const std::string& checkpoint_path,
                        const EvalOptions& opts);

}  // namespace ctefm
