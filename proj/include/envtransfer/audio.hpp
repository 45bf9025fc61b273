#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

namespace envtransfer {

inline constexpr int kSampleRate = 16000;

/// Mono waveform. After load_audio the rate is always kSampleRate and
/// every sample lies in [-1, 1].
struct AudioSegment {
  std::vector<float> samples;
  int sample_rate = kSampleRate;

  std::size_t n_samples() const noexcept { return samples.size(); }
  double seconds() const noexcept { return static_cast<double>(samples.size()) / sample_rate; }
};

/// Raw decoded WAV contents, interleaved channels, before any conversion.
struct WavData {
  int sample_rate = 0;
  int channels = 0;
  std::vector<float> interleaved;
};

/// Reads PCM 16/24/32-bit or IEEE float32 RIFF/WAVE files.
WavData read_wav(const std::filesystem::path& path);

/// Writes mono PCM 16-bit. Samples are clipped to [-1, 1] before quantizing.
void write_wav(const std::filesystem::path& path, std::span<const float> samples,
               int sample_rate = kSampleRate);

/// Windowed-sinc polyphase resampler (Kaiser window). Exact rational ratio
/// `to_rate / from_rate` after reduction by the gcd.
std::vector<float> resample(std::span<const float> input, int from_rate, int to_rate);

/// Decode, downmix to mono, resample to 16 kHz and peak-normalize only if
/// the peak exceeds 1.
AudioSegment load_audio(const std::filesystem::path& path);

/// Wraps an in-memory signal with the same downmix/resample/peak rules.
AudioSegment to_segment(std::span<const float> mono, int sample_rate);

enum class SegmentMode { random_crop, pad, center };

/// Fit the segment to `target_seconds`. Shorter inputs are zero-padded at the
/// end in every mode; longer inputs are cropped (centered, from the start in
/// pad mode, or at an offset drawn from `rng` in random_crop mode).
AudioSegment segment(const AudioSegment& a, double target_seconds, SegmentMode mode,
                     std::mt19937_64& rng);
AudioSegment segment(const AudioSegment& a, double target_seconds = 4.0,
                     SegmentMode mode = SegmentMode::center);

double rms(std::span<const float> x) noexcept;
float peak(std::span<const float> x) noexcept;

}  // namespace envtransfer
