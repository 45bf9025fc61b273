#pragma once

#include <span>

#include "envtransfer/dsp.hpp"
#include "envtransfer/grid.hpp"

namespace envtransfer {

/// Mean over frames (columns) of the RMS over frequency (rows) of A - B.
double lsd(const Grid& a, const Grid& b);

/// log10(max(|STFT|, 1e-5)) with the frontend's STFT settings.
Grid log10_spectrogram(std::span<const float> samples);
/// Unnormalized natural-log mel converted to log10.
Grid log10_mel(const MelSpectrogram& m);

/// STFT-domain LSD between two waveforms; the longer one is truncated.
double lsd_stft(std::span<const float> a, std::span<const float> b);
/// Mel-domain LSD (log10) between two unnormalized mel spectrograms.
double lsd_mel(const MelSpectrogram& a, const MelSpectrogram& b);

struct SsimOptions {
  int window = 7;
  double dynamic_range = 2.0;  // normalized mels span [-1, 1]
};

/// Mean SSIM over every fully contained window of a uniform filter.
double ssim(const Grid& a, const Grid& b, const SsimOptions& opt = {});

/// ||e||^2 is floored at this fraction of ||s_t||^2, capping scores at 120 dB.
inline constexpr double kSisnrFloor = 1e-12;

double sisnr(std::span<const double> estimate, std::span<const double> reference);
double sisnr(std::span<const float> estimate, std::span<const float> reference);
/// sisnr on flattened magnitude STFTs.
double sispnr(std::span<const float> estimate, std::span<const float> reference);

}  // namespace envtransfer
