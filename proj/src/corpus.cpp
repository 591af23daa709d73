#include "ctefm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ctefm {

namespace fs = std::filesystem;

namespace {
constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
}

double SyntheticSpeaker::envelope_at(double hz) const {
  double g = -rolloff * hz / 1000.0;
  for (const auto& b : envelope) {
    const double d = (hz - b.center_hz) / b.width_hz;
    g += b.gain * std::exp(-0.5 * d * d);
  }
  return g;
}

SyntheticSpeaker make_speaker(std::uint64_t corpus_seed, int speaker_idx) {
  Rng rng(Rng::derive(corpus_seed, Rng::hash_str("speaker"), static_cast<std::uint64_t>(speaker_idx)));
  SyntheticSpeaker spk;
  // golden-ratio stride spreads pitch across speaker indices; the jitter
  // keeps draws non-degenerate without risking near-identical voices
  const double stride = std::fmod(0.6180339887498949 * speaker_idx + 0.35, 1.0);
  const double jitter = std::fmod(stride + 0.10 * (rng.uniform() - 0.5) + 1.0, 1.0);
  spk.f0_base = 95.0 + 190.0 * jitter;
  spk.rolloff = 0.3 + 0.9 * rng.uniform();
  spk.noise_level = 0.001 + 0.003 * rng.uniform();
  const int n_bumps = 8;
  spk.envelope.reserve(n_bumps);
  for (int i = 0; i < n_bumps; ++i) {
    SyntheticSpeaker::Bump b;
    b.center_hz = 150.0 * std::pow(7000.0 / 150.0, rng.uniform());  // log-uniform
    b.width_hz = 200.0 + 1300.0 * rng.uniform();
    b.gain = 3.0 * rng.normal();
    spk.envelope.push_back(b);
  }
  return spk;
}

std::vector<double> render_utterance(const SyntheticSpeaker& speaker,
                                     std::uint64_t utt_seed, double duration_s,
                                     int sample_rate) {
  if (duration_s <= 0.0) throw std::runtime_error("utterance duration must be positive");
  Rng content(Rng::derive(utt_seed, Rng::hash_str("content")));
  Rng noise(Rng::derive(utt_seed, Rng::hash_str("noise")));

  const auto n = static_cast<std::size_t>(std::llround(duration_s * sample_rate));
  const int n_segments = std::max(2, static_cast<int>(std::lround(duration_s * 5.0)));
  const double seg_len = duration_s / n_segments;

  // Content: per segment, a few formant-like emphases plus a pitch offset.
  struct Segment {
    double f0_ratio;
    double amp;
    std::vector<SyntheticSpeaker::Bump> emphasis;
  };
  std::vector<Segment> segments(static_cast<std::size_t>(n_segments));
  for (auto& seg : segments) {
    seg.f0_ratio = 1.0 + 0.03 * content.normal();
    seg.amp = 0.6 + 0.4 * content.uniform();
    const int k = 2 + static_cast<int>(content.uniform_int(0, 1));
    for (int i = 0; i < k; ++i) {
      SyntheticSpeaker::Bump b;
      b.center_hz = 250.0 * std::pow(3500.0 / 250.0, content.uniform());
      b.width_hz = 150.0 + 500.0 * content.uniform();
      b.gain = 0.6 * content.normal();
      seg.emphasis.push_back(b);
    }
  }
  const double vibrato_rate = 4.0 + 2.0 * content.uniform();
  const double vibrato_depth = 0.006 + 0.010 * content.uniform();
  const double vibrato_phase = kTwoPi * content.uniform();

  const int max_harmonics = static_cast<int>(7600.0 / speaker.f0_base);
  std::vector<double> phase(static_cast<std::size_t>(max_harmonics) + 1, 0.0);
  std::vector<double> out(n, 0.0);

  for (std::size_t s = 0; s < n; ++s) {
    const double t = static_cast<double>(s) / sample_rate;
    const auto seg_idx = std::min<std::size_t>(static_cast<std::size_t>(t / seg_len),
                                               segments.size() - 1);
    const Segment& seg = segments[seg_idx];
    // smooth amplitude ramp at segment boundaries to avoid clicks
    const double into = t - static_cast<double>(seg_idx) * seg_len;
    const double ramp = std::min(1.0, std::min(into, seg_len - into) / 0.02 + 0.15);
    const double f0 =
        speaker.f0_base * seg.f0_ratio *
        (1.0 + vibrato_depth * std::sin(kTwoPi * vibrato_rate * t + vibrato_phase));

    double sample = 0.0;
    for (int k = 1; k <= max_harmonics; ++k) {
      const double fk = k * f0;
      if (fk > 7600.0) break;
      phase[static_cast<std::size_t>(k)] += kTwoPi * fk / sample_rate;
      double log_amp = speaker.envelope_at(fk) - 1.0;
      for (const auto& b : seg.emphasis) {
        const double d = (fk - b.center_hz) / b.width_hz;
        log_amp += b.gain * std::exp(-0.5 * d * d);
      }
      sample += std::exp(log_amp) * std::sin(phase[static_cast<std::size_t>(k)]);
    }
    out[s] = seg.amp * ramp * sample + speaker.noise_level * noise.normal();
  }

  double peak = 1e-9;
  for (double v : out) peak = std::max(peak, std::abs(v));
  const double gain = 0.6 / peak;
  for (double& v : out) v *= gain;
  return out;
}

std::vector<ManifestItem> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path);
  const fs::path base = fs::path(path).parent_path();
  std::vector<ManifestItem> items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("path") || !j.contains("speaker_id")) {
      throw std::runtime_error("bad manifest line " + std::to_string(line_no) + " in " + path);
    }
    ManifestItem item;
    fs::path p = j.at("path").get<std::string>();
    item.path = p.is_absolute() ? p.string() : (base / p).string();
    item.speaker_id = j.at("speaker_id").get<std::string>();
    item.split = j.value("split", "train");
    items.push_back(std::move(item));
  }
  if (items.empty()) throw std::runtime_error("empty manifest: " + path);
  return items;
}

void write_manifest(const std::string& path, const std::vector<ManifestItem>& items) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& item : items) {
    nlohmann::json j{{"path", item.path}, {"speaker_id", item.speaker_id}, {"split", item.split}};
    out << j.dump() << "\n";
  }
}

std::string synth_corpus(const std::string& out_dir, const CorpusSpec& spec) {
  if (spec.n_speakers < 1 || spec.n_utts < 1) {
    throw std::runtime_error("corpus needs at least one speaker and one utterance");
  }
  const fs::path dir(out_dir);
  if (fs::exists(dir) && !fs::is_empty(dir) && !spec.force) {
    throw std::runtime_error("output dir not empty (pass force to overwrite): " + out_dir);
  }
  fs::create_directories(dir);

  std::vector<ManifestItem> items;
  for (int s = 0; s < spec.n_speakers; ++s) {
    const SyntheticSpeaker spk = make_speaker(spec.seed, s);
    char spk_name[32];
    std::snprintf(spk_name, sizeof(spk_name), "spk%03d", s);
    for (int u = 0; u < spec.n_utts; ++u) {
      const std::uint64_t utt_seed =
          Rng::derive(spec.seed, Rng::hash_str("utt"), static_cast<std::uint64_t>(s),
                      static_cast<std::uint64_t>(u));
      Rng dur_rng(Rng::derive(utt_seed, Rng::hash_str("duration")));
      const double duration =
          spec.min_duration_s + (spec.max_duration_s - spec.min_duration_s) * dur_rng.uniform();
      const auto samples = render_utterance(spk, utt_seed, duration);

      char wav_name[64];
      std::snprintf(wav_name, sizeof(wav_name), "%s_utt%03d.wav", spk_name, u);
      write_wav((dir / wav_name).string(), samples);

      ManifestItem item;
      item.path = wav_name;  // relative to the manifest
      item.speaker_id = spk_name;
      item.split = (u == spec.n_utts - 1) ? "val" : "train";
      items.push_back(std::move(item));
    }
  }
  const std::string manifest_path = (dir / "manifest.jsonl").string();
  write_manifest(manifest_path, items);
  return manifest_path;
}

}  // namespace ctefm
