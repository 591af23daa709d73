#pragma once

#include <string>
#include <vector>

namespace ctefm {

inline constexpr int kSampleRate = 16000;

// Raw mono waveform, the unit of ingestion and reference segmentation.
struct Utterance {
  std::vector<double> samples;  // amplitudes in [-1, 1]
  int sample_rate = kSampleRate;
  std::string id;

  double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
  // Throws unless the utterance is non-empty, 16 kHz and finite.
  void validate() const;
};

// Mono 16-bit PCM WAV at 16 kHz. Other rates, widths or channel counts are
// rejected with a descriptive error instead of being resampled silently.
Utterance read_wav(const std::string& path);
void write_wav(const std::string& path, const std::vector<double>& samples,
               int sample_rate = kSampleRate);

}  // namespace ctefm
