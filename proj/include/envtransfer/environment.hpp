#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "envtransfer/audio.hpp"

namespace envtransfer {

/// Peaking-EQ section (RBJ cookbook biquad).
struct EqBand {
  double center_hz = 1000.0;
  double gain_db = 0.0;
  double q = 1.0;
};

enum class NoiseKind { none, white, pink, babble };

std::string to_string(NoiseKind k);
NoiseKind noise_kind_from_string(const std::string& s);

/// Parametric recording environment: microphone colouration (EQ), room
/// (RIR decay and direct ratio) and ambient noise.
struct EnvironmentSpec {
  std::string env_id;
  std::vector<EqBand> eq;
  double rir_rt60 = 0.0;
  double rir_direct_ratio = 1.0;
  NoiseKind noise_kind = NoiseKind::none;
  double snr_db = 30.0;

  /// Throws InvalidInput when an invariant does not hold.
  void validate() const;
  bool is_identity() const noexcept {
    return eq.empty() && rir_rt60 == 0.0 && noise_kind == NoiseKind::none;
  }

  static EnvironmentSpec clean() { return {"clean", {}, 0.0, 1.0, NoiseKind::none, 30.0}; }
};

void to_json(nlohmann::json& j, const EnvironmentSpec& e);
void from_json(const nlohmann::json& j, EnvironmentSpec& e);

/// Derives a child seed from a parent seed and a tag; used so every render
/// depends only on its own (utterance, environment, seed) triple.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

/// Direct impulse of height `direct_ratio` at index 0 followed by an
/// exponentially decaying Gaussian tail whose energy envelope falls 60 dB at
/// `rt60`. Direct energy is direct_ratio^2 and tail energy 1 - direct_ratio^2
/// before the final peak normalization. rt60 == 0 gives a unit impulse.
std::vector<float> synth_rir(double rt60, double direct_ratio, std::size_t length,
                             std::uint64_t seed);

/// Cascaded peaking biquads.
std::vector<float> apply_eq(std::span<const float> x, std::span<const EqBand> bands,
                            int sample_rate = kSampleRate);

/// RMS over 20 ms frames within 40 dB of the loudest frame.
double active_rms(std::span<const float> x);

std::vector<float> make_noise(NoiseKind kind, std::size_t length, std::uint64_t seed);

/// Scale `noise` so that active_rms(signal) / rms(noise) equals snr_db and add it.
void mix_at_snr(std::vector<float>& signal, std::span<const float> noise, double snr_db);

/// EQ -> RIR convolution (truncated to input length) -> noise at snr_db ->
/// peak limit to 1.
AudioSegment apply_environment(const AudioSegment& clean, const EnvironmentSpec& env,
                               std::uint64_t seed);

/// Parameters of the builtin speech surrogate: voiced syllables (harmonic
/// source through formant resonators), noise-burst consonants and pauses.
struct SurrogateVoice {
  double pitch_hz = 140.0;
  double pitch_spread = 0.15;
};

std::vector<float> synth_speech(const SurrogateVoice& voice, std::size_t length,
                                std::uint64_t seed);

/// Augmentation pools for the content input. Each IR and noise clip is used as-is.
struct AugmentationPools {
  std::vector<std::vector<float>> impulse_responses;
  std::vector<std::vector<float>> noises;

  static AugmentationPools synthetic(std::size_t n_irs, std::size_t n_noises,
                                     std::size_t noise_length, std::uint64_t seed);
};

/// Convolve with a random IR from the pool and mix a random noise clip
/// (looped or cropped) at an SNR drawn uniformly from `snr_range`.
AudioSegment augment_content(const AudioSegment& clean, const AugmentationPools& pools,
                             std::pair<double, double> snr_range, std::uint64_t seed);

}  // namespace envtransfer
