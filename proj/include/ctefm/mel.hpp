#pragma once

#include <cmath>

#include "ctefm/audio.hpp"
#include "ctefm/tensor_io.hpp"

namespace ctefm {

struct MelConfig {
  int n_fft = 1024;
  int win_length = 1024;
  int hop_length = 256;
  int n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = std::log(1e-5);

  void validate() const;
};

struct MelSpectrogram {
  Matrix frames;  // [n_frames x n_mels], log-mel energies clamped at log_floor
  int n_mels = 0;
  int hop_length = 0;
  int win_length = 0;

  Eigen::Index n_frames() const { return frames.rows(); }
};

// Log mel-spectrogram with center-padded framing:
// n_frames == floor(len(samples) / hop_length) + 1, frame k centered at
// k * hop_length. Energies are clamped at cfg.log_floor before the log.
// Throws "utterance-too-short" if the utterance is shorter than one window.
MelSpectrogram compute_mel(const Utterance& utt, const MelConfig& cfg = {});

// Frame count produced by compute_mel for a given sample count.
inline Eigen::Index mel_frame_count(std::size_t n_samples, const MelConfig& cfg = {}) {
  return static_cast<Eigen::Index>(n_samples / static_cast<std::size_t>(cfg.hop_length)) + 1;
}

}  // namespace ctefm
