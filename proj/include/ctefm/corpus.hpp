#pragma once

#include <string>
#include <vector>

#include "ctefm/audio.hpp"
#include "ctefm/rng.hpp"

namespace ctefm {

// Harmonic signature defining one synthetic speaker: pitch base plus a
// smooth random spectral envelope. Identity lives entirely in the audio, so
// speaker providers can recover it from the waveform alone.
struct SyntheticSpeaker {
  double f0_base = 140.0;      // Hz
  double rolloff = 0.6;        // nepers per kHz
  double noise_level = 0.002;  // white-noise floor amplitude
  struct Bump {
    double center_hz;
    double width_hz;
    double gain;  // nepers
  };
  std::vector<Bump> envelope;

  double envelope_at(double hz) const;
};

SyntheticSpeaker make_speaker(std::uint64_t corpus_seed, int speaker_idx);

// Deterministic utterance audio for a speaker. Content (segment pattern,
// pitch contour wobble) is drawn from utt_seed only, so the same utt_seed
// spoken by two speakers shares its "text".
std::vector<double> render_utterance(const SyntheticSpeaker& speaker,
                                     std::uint64_t utt_seed, double duration_s,
                                     int sample_rate = kSampleRate);

struct ManifestItem {
  std::string path;  // resolved to an absolute/openable path on read
  std::string speaker_id;
  std::string split;  // "train" | "val"
};

std::vector<ManifestItem> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestItem>& items);

struct CorpusSpec {
  int n_speakers = 10;
  int n_utts = 10;  // per speaker; the last one lands in the "val" split
  std::uint64_t seed = 7;
  double min_duration_s = 1.2;
  double max_duration_s = 2.0;
  bool force = false;
};

// Writes WAVs plus manifest.jsonl under out_dir and returns the manifest
// path. Refuses a non-empty out_dir unless spec.force is set.
std::string synth_corpus(const std::string& out_dir, const CorpusSpec& spec);

}  // namespace ctefm
