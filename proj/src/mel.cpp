#include "ctefm/mel.hpp"

#include <stdexcept>
#include <vector>

#include "ctefm/dsp.hpp"

namespace ctefm {

void MelConfig::validate() const {
  if (!(hop_length > 0 && win_length >= hop_length && n_fft >= win_length)) {
    throw std::runtime_error("mel config requires n_fft >= win_length >= hop_length > 0");
  }
  if ((n_fft & (n_fft - 1)) != 0) {
    throw std::runtime_error("mel config requires power-of-two n_fft");
  }
  if (n_mels < 1) throw std::runtime_error("mel config requires n_mels >= 1");
  if (!(fmax > fmin && fmin >= 0.0)) {
    throw std::runtime_error("mel config requires 0 <= fmin < fmax");
  }
}

MelSpectrogram compute_mel(const Utterance& utt, const MelConfig& cfg) {
  utt.validate();
  cfg.validate();
  if (utt.samples.size() < static_cast<std::size_t>(cfg.win_length)) {
    throw std::runtime_error("utterance-too-short: " + utt.id + " has " +
                             std::to_string(utt.samples.size()) + " samples, window is " +
                             std::to_string(cfg.win_length));
  }

  const auto n_frames = mel_frame_count(utt.samples.size(), cfg);
  const auto window = hann_window(cfg.win_length);
  const auto bank = mel_filterbank(cfg.n_mels, cfg.n_fft, utt.sample_rate, cfg.fmin, cfg.fmax);
  const double floor_energy = std::exp(cfg.log_floor);

  MelSpectrogram mel;
  mel.frames.resize(n_frames, cfg.n_mels);
  mel.n_mels = cfg.n_mels;
  mel.hop_length = cfg.hop_length;
  mel.win_length = cfg.win_length;

  std::vector<double> frame(static_cast<std::size_t>(cfg.n_fft), 0.0);
  const auto n = static_cast<std::ptrdiff_t>(utt.samples.size());
  for (Eigen::Index k = 0; k < n_frames; ++k) {
    // Window centered at k*hop; out-of-range samples are zero.
    const std::ptrdiff_t start =
        static_cast<std::ptrdiff_t>(k) * cfg.hop_length - cfg.win_length / 2;
    std::fill(frame.begin(), frame.end(), 0.0);
    for (int i = 0; i < cfg.win_length; ++i) {
      const std::ptrdiff_t s = start + i;
      if (s >= 0 && s < n) {
        frame[static_cast<std::size_t>(i)] =
            utt.samples[static_cast<std::size_t>(s)] * window[static_cast<std::size_t>(i)];
      }
    }
    const auto spec = power_spectrum(frame, cfg.n_fft);
    for (int m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      const auto& filt = bank[static_cast<std::size_t>(m)];
      for (std::size_t b = 0; b < spec.size(); ++b) e += filt[b] * spec[b];
      mel.frames(k, m) = std::log(std::max(e, floor_energy));
    }
  }
  return mel;
}

}  // namespace ctefm
