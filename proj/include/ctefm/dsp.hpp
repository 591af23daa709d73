#pragma once

#include <complex>
#include <vector>

namespace ctefm {

// In-place radix-2 FFT; size must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& a);

// Power spectrum (|X|^2) of the first n_fft points of `frame`, zero-padded
// if shorter. Returns n_fft/2 + 1 bins.
std::vector<double> power_spectrum(const std::vector<double>& frame, int n_fft);

// Periodic Hann window of length n.
std::vector<double> hann_window(int n);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular mel filterbank (HTK-style mel scale, unit peak), returned as
// n_mels rows over n_fft/2+1 spectrum bins.
std::vector<std::vector<double>> mel_filterbank(int n_mels, int n_fft,
                                                double sample_rate, double fmin,
                                                double fmax);

// Center frequencies (Hz) of the filters produced by mel_filterbank.
std::vector<double> mel_filter_centers(int n_mels, double sample_rate,
                                       double fmin, double fmax);

}  // namespace ctefm
