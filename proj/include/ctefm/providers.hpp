#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctefm/audio.hpp"
#include "ctefm/autograd.hpp"
#include "ctefm/mel.hpp"
#include "ctefm/rng.hpp"

namespace ctefm {

// Frame-level linguistic content features f_C, time-major.
struct ContentFeatures {
  Matrix frames;  // [T1 x D]
  double frame_rate = 0.0;
};

// Fixed-length speaker vector from one SV provider.
struct TimbreEmbedding {
  Vector vector;
  std::string provider_id;
};

class ContentProvider {
 public:
  virtual ~ContentProvider() = default;
  virtual ContentFeatures extract(const Utterance& utt) const = 0;
  virtual int dim() const = 0;
  virtual double frame_rate() const = 0;
  virtual std::string id() const = 0;
};

class SpeakerProvider {
 public:
  virtual ~SpeakerProvider() = default;
  virtual TimbreEmbedding embed(const Utterance& utt) const = 0;
  // Differentiable route: embedding of a (possibly generated) log-mel
  // matrix, built on the caller's tape so gradients reach the mel input.
  virtual nn::Var embed_mel(nn::Tape& tape, nn::Var mel) const = 0;
  // Same map evaluated without gradients.
  virtual Vector embed_mel_plain(const Matrix& mel) const = 0;
  virtual int dim() const = 0;
  virtual std::string id() const = 0;
};

// Deterministic content provider: per-frame band energies, z-scored along
// time within the utterance to strip global speaker coloration, then a fixed
// seeded projection to the content dimension.
class SyntheticContentProvider : public ContentProvider {
 public:
  SyntheticContentProvider(std::uint64_t seed, int dim = 256, double frame_rate = 50.0);
  ContentFeatures extract(const Utterance& utt) const override;
  int dim() const override { return dim_; }
  double frame_rate() const override { return frame_rate_; }
  std::string id() const override { return "synth-content"; }

 private:
  std::uint64_t seed_;
  int dim_;
  double frame_rate_;
  int n_bands_ = 64;
  Matrix projection_;  // [n_bands x dim]
};

// Deterministic SV provider: time-pooled log-mel statistics pushed through a
// fixed seeded two-layer map, length-normalized. Same map serves the audio
// route (via compute_mel) and the differentiable mel route used by the
// timbre loss.
class SyntheticSpeakerProvider : public SpeakerProvider {
 public:
  SyntheticSpeakerProvider(std::string id, std::uint64_t seed, int dim = 192,
                           MelConfig mel_cfg = {});
  TimbreEmbedding embed(const Utterance& utt) const override;
  nn::Var embed_mel(nn::Tape& tape, nn::Var mel) const override;
  Vector embed_mel_plain(const Matrix& mel) const override;
  int dim() const override { return dim_; }
  std::string id() const override { return id_; }

 private:
  std::string id_;
  std::uint64_t seed_;
  int dim_;
  MelConfig mel_cfg_;
  Matrix anchor_;  // [1 x n_mels] typical pooled log-mel, subtracted before projection
  Matrix smooth_;  // [n_mels x n_mels] spectral smoothing applied to pooled features
  Matrix w1_;      // [n_mels x dim]
  Matrix w2_;      // [dim x dim]
};

// Seeds and dimensions needed to rebuild the provider set; travels inside
// checkpoints so conversion sees the exact training-time providers.
struct RegistryConfig {
  std::uint64_t content_seed = 101;
  int content_dim = 256;
  double content_frame_rate = 50.0;
  std::vector<std::uint64_t> sv_seeds = {201, 202, 203};
  std::vector<int> sv_dims = {192, 192, 192};
  MelConfig mel;

  nlohmann::json to_json() const;
  static RegistryConfig from_json(const nlohmann::json& j);
};

// One content provider plus an ordered ensemble of speaker providers.
// Provider dimensions are fixed at registration time.
struct ProviderRegistry {
  std::unique_ptr<ContentProvider> content;
  std::vector<std::unique_ptr<SpeakerProvider>> speakers;
  nlohmann::json metadata;

  std::size_t n_speaker_providers() const { return speakers.size(); }
  int timbre_dim() const;  // sum of provider dims
  void validate() const;
};

ProviderRegistry build_registry(const RegistryConfig& cfg);

ContentFeatures extract_content(const Utterance& utt, const ProviderRegistry& registry);
std::vector<TimbreEmbedding> extract_speaker_embeddings(const Utterance& utt,
                                                        const ProviderRegistry& registry);

struct SegmentResult {
  Utterance segment;
  bool short_reference = false;  // whole utterance returned because it was too short
};

// Random fixed-length segment; offset uniform over the valid range. An
// utterance shorter than the requested duration is returned whole, flagged.
SegmentResult segment_reference(const Utterance& utt, double duration_s, Rng& rng);

// Linear interpolation of feature rows onto a new time axis of `target`
// rows, used to align content features with mel frames.
Matrix align_frames(const Matrix& frames, Eigen::Index target);

}  // namespace ctefm
