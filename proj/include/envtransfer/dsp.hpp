#pragma once

#include <cmath>
#include <filesystem>
#include <span>
#include <vector>

#include "envtransfer/audio.hpp"
#include "envtransfer/grid.hpp"

namespace envtransfer {

inline constexpr int kFftSize = 1024;
inline constexpr int kHopSize = 256;
inline constexpr int kNumBins = kFftSize / 2 + 1;
inline constexpr int kNumMels = 80;
inline constexpr double kMelFmin = 0.0;
inline constexpr double kMelFmax = 8000.0;
inline constexpr double kMelFloor = 1e-5;

/// Natural log of the mel floor; the lowest value any unnormalized cell can take.
inline double log_mel_floor() { return std::log(kMelFloor); }

/// Min-max scaling constants persisted with checkpoints.
struct NormStats {
  double min_log_mel = 0.0;
  double max_log_mel = 0.0;

  bool valid() const noexcept { return max_log_mel > min_log_mel; }
  /// Lower bound fixed at the log floor, upper bound taken from data.
  static NormStats from_max(double max_log_mel) { return {log_mel_floor(), max_log_mel}; }
};

/// F x T log-mel grid (rows are mel channels). `stats` is meaningful only
/// when `normalized` is set.
struct MelSpectrogram {
  Grid values;
  bool normalized = false;
  NormStats stats{};

  std::size_t n_mels() const noexcept { return values.rows(); }
  std::size_t n_frames() const noexcept { return values.cols(); }
};

/// Number of centered frames for `n_samples`: floor(n / hop) + 1.
constexpr std::size_t frame_count(std::size_t n_samples) noexcept {
  return n_samples / kHopSize + 1;
}

std::vector<double> hann_window(int length = kFftSize);

/// Centered STFT (reflect padding of n_fft/2 on both ends), periodic Hann,
/// 513 x T complex output.
ComplexGrid stft(std::span<const float> samples);
inline ComplexGrid stft(const AudioSegment& a) { return stft(a.samples); }

BasicGrid<double> magnitude(const ComplexGrid& spec);

/// Inverse of stft via weighted overlap-add; output has `length` samples.
std::vector<float> istft(const ComplexGrid& spec, std::size_t length);

/// 80 x 513 Slaney-scale triangular filterbank spanning 0-8000 Hz with
/// Slaney area normalization (librosa defaults).
const BasicGrid<double>& mel_filterbank();
/// Center frequency in Hz of each mel channel.
std::vector<double> mel_center_frequencies();

/// Unnormalized log-mel: log(max(fb * |STFT|, 1e-5)).
MelSpectrogram mel_spectrogram(std::span<const float> samples);
inline MelSpectrogram mel_spectrogram(const AudioSegment& a) { return mel_spectrogram(a.samples); }
MelSpectrogram mel_from_magnitude(const BasicGrid<double>& mag);

/// v' = 2 (v - min) / (max - min) - 1, clamped to [-1, 1].
MelSpectrogram normalize(const MelSpectrogram& m, const NormStats& stats);
/// Inverse affine map of normalize (clamping is not undone).
MelSpectrogram denormalize(const MelSpectrogram& m, const NormStats& stats);

/// Surrogate vocoder: filterbank pseudo-inverse to a magnitude estimate,
/// then fast Griffin-Lim phase retrieval. Output has 256 * (T - 1) samples.
AudioSegment invert_mel(const MelSpectrogram& m, int n_iters = 60);

/// Mel file: see docs/formats.md.
void write_mel(const std::filesystem::path& path, const MelSpectrogram& m);
MelSpectrogram read_mel(const std::filesystem::path& path);

}  // namespace envtransfer
