#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "ctefm/audio.hpp"
#include "ctefm/autograd.hpp"
#include "ctefm/rng.hpp"

namespace ctefm::test {

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    dir_ = std::filesystem::temp_directory_path() /
           ("ctefm_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  std::string path(const std::string& name = "") const {
    return name.empty() ? dir_.string() : (dir_ / name).string();
  }

 private:
  std::filesystem::path dir_;
};

inline Utterance make_sine(double freq_hz, double duration_s, double amp = 0.5,
                           const std::string& id = "sine") {
  Utterance utt;
  utt.id = id;
  const auto n = static_cast<std::size_t>(duration_s * kSampleRate);
  utt.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    utt.samples[i] =
        amp * std::sin(2.0 * 3.14159265358979323846 * freq_hz * static_cast<double>(i) / kSampleRate);
  }
  return utt;
}

inline Utterance make_noise(double duration_s, std::uint64_t seed, double amp = 0.3) {
  Utterance utt;
  utt.id = "noise-" + std::to_string(seed);
  Rng rng(seed);
  const auto n = static_cast<std::size_t>(duration_s * kSampleRate);
  utt.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) utt.samples[i] = amp * std::tanh(rng.normal());
  return utt;
}

// Central finite-difference check of an analytic gradient for one parameter
// (or plain matrix). `loss` must re-evaluate the objective from scratch.
// Entries where both sides are below `zero_tol` count as matching zeros.
inline double max_grad_rel_err(Matrix& value, const Matrix& analytic,
                               const std::function<double()>& loss, int n_probe,
                               std::uint64_t seed, double step = 1e-5,
                               double zero_tol = 1e-7) {
  Rng rng(seed);
  double worst = 0.0;
  for (int k = 0; k < n_probe; ++k) {
    const auto r = static_cast<Eigen::Index>(rng.uniform_int(0, value.rows() - 1));
    const auto c = static_cast<Eigen::Index>(rng.uniform_int(0, value.cols() - 1));
    const double keep = value(r, c);
    value(r, c) = keep + step;
    const double up = loss();
    value(r, c) = keep - step;
    const double down = loss();
    value(r, c) = keep;
    const double fd = (up - down) / (2.0 * step);
    const double g = analytic(r, c);
    const double mag = std::max(std::abs(fd), std::abs(g));
    if (mag < zero_tol) continue;
    worst = std::max(worst, std::abs(fd - g) / mag);
  }
  return worst;
}

}  // namespace ctefm::test
