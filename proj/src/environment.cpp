#include "envtransfer/environment.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "envtransfer/errors.hpp"
#include "envtransfer/fft.hpp"

namespace envtransfer {
namespace {

struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;

  double process(double x) {
    const double y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = y;
    return y;
  }

  static Biquad normalized(double b0, double b1, double b2, double a0, double a1, double a2) {
    Biquad q;
    q.b0 = b0 / a0;
    q.b1 = b1 / a0;
    q.b2 = b2 / a0;
    q.a1 = a1 / a0;
    q.a2 = a2 / a0;
    return q;
  }

  static Biquad peaking(double f0, double gain_db, double q, int fs) {
    const double a = std::pow(10.0, gain_db / 40.0);
    const double w0 = 2.0 * M_PI * f0 / fs;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double c = std::cos(w0);
    return normalized(1 + alpha * a, -2 * c, 1 - alpha * a, 1 + alpha / a, -2 * c, 1 - alpha / a);
  }

  // Constant 0 dB peak gain band-pass.
  static Biquad bandpass(double f0, double q, int fs) {
    const double w0 = 2.0 * M_PI * f0 / fs;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double c = std::cos(w0);
    return normalized(alpha, 0, -alpha, 1 + alpha, -2 * c, 1 - alpha);
  }
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

void peak_limit(std::vector<float>& x) {
  const float p = peak(x);
  if (p > 1.0f) {
    for (float& v : x) v /= p;
  }
}

struct Vowel {
  double f1, f2, f3;
};
constexpr std::array<Vowel, 6> kVowels{{{730, 1090, 2440},
                                        {270, 2290, 3010},
                                        {300, 870, 2240},
                                        {530, 1840, 2480},
                                        {570, 840, 2410},
                                        {660, 1720, 2410}}};

}  // namespace

std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::white: return "white";
    case NoiseKind::pink: return "pink";
    case NoiseKind::babble: return "babble-surrogate";
  }
  return "none";
}

NoiseKind noise_kind_from_string(const std::string& s) {
  if (s == "none") return NoiseKind::none;
  if (s == "white") return NoiseKind::white;
  if (s == "pink") return NoiseKind::pink;
  if (s == "babble-surrogate" || s == "babble") return NoiseKind::babble;
  throw InvalidInput("unknown noise kind '" + s + "'");
}

void EnvironmentSpec::validate() const {
  if (env_id.empty()) throw InvalidInput("environment without env_id");
  if (!(rir_rt60 >= 0.0) || !std::isfinite(rir_rt60)) throw InvalidInput(env_id + ": rt60 must be >= 0");
  if (!(rir_direct_ratio > 0.0 && rir_direct_ratio <= 1.0)) {
    throw InvalidInput(env_id + ": direct ratio must lie in (0, 1]");
  }
  if (!std::isfinite(snr_db)) throw InvalidInput(env_id + ": snr_db must be finite");
  for (const auto& b : eq) {
    if (std::fabs(b.gain_db) > 12.0) throw InvalidInput(env_id + ": EQ gain outside +-12 dB");
    if (!(b.center_hz > 0.0 && b.center_hz < kSampleRate / 2.0) || !(b.q > 0.0)) {
      throw InvalidInput(env_id + ": bad EQ band");
    }
  }
}

void to_json(nlohmann::json& j, const EnvironmentSpec& e) {
  nlohmann::json bands = nlohmann::json::array();
  for (const auto& b : e.eq) bands.push_back({{"center_hz", b.center_hz}, {"gain_db", b.gain_db}, {"q", b.q}});
  j = {{"env_id", e.env_id},       {"eq", bands},
       {"rir_rt60", e.rir_rt60},   {"rir_direct_ratio", e.rir_direct_ratio},
       {"noise_kind", to_string(e.noise_kind)}, {"snr_db", e.snr_db}};
}

void from_json(const nlohmann::json& j, EnvironmentSpec& e) {
  e.env_id = j.at("env_id").get<std::string>();
  e.eq.clear();
  for (const auto& b : j.value("eq", nlohmann::json::array())) {
    e.eq.push_back({b.at("center_hz").get<double>(), b.at("gain_db").get<double>(), b.at("q").get<double>()});
  }
  e.rir_rt60 = j.value("rir_rt60", 0.0);
  e.rir_direct_ratio = j.value("rir_direct_ratio", 1.0);
  e.noise_kind = noise_kind_from_string(j.value("noise_kind", std::string("none")));
  e.snr_db = j.value("snr_db", 30.0);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return splitmix64(seed ^ splitmix64(h));
}

std::vector<float> synth_rir(double rt60, double direct_ratio, std::size_t length,
                             std::uint64_t seed) {
  if (!(rt60 >= 0.0)) throw InvalidInput("rt60 must be non-negative");
  if (!(direct_ratio > 0.0 && direct_ratio <= 1.0)) throw InvalidInput("direct ratio must lie in (0, 1]");
  if (length == 0) throw InvalidInput("RIR length must be positive");
  std::vector<float> h(length, 0.0f);
  if (rt60 == 0.0 || direct_ratio == 1.0 || length == 1) {
    h[0] = 1.0f;
    return h;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  // Amplitude envelope exp(-k n) gives energy exp(-2 k n); -60 dB at rt60.
  const double k = 3.0 * std::log(10.0) / (rt60 * kSampleRate);
  std::vector<double> tail(length, 0.0);
  double energy = 0.0;
  for (std::size_t n = 1; n < length; ++n) {
    tail[n] = gauss(rng) * std::exp(-k * static_cast<double>(n));
    energy += tail[n] * tail[n];
  }
  const double tail_gain = energy > 0.0 ? std::sqrt((1.0 - direct_ratio * direct_ratio) / energy) : 0.0;
  double p = direct_ratio;
  for (std::size_t n = 1; n < length; ++n) p = std::max(p, std::fabs(tail[n] * tail_gain));
  h[0] = static_cast<float>(direct_ratio / p);
  for (std::size_t n = 1; n < length; ++n) h[n] = static_cast<float>(tail[n] * tail_gain / p);
  return h;
}

std::vector<float> apply_eq(std::span<const float> x, std::span<const EqBand> bands, int sample_rate) {
  std::vector<float> y(x.begin(), x.end());
  for (const auto& b : bands) {
    Biquad f = Biquad::peaking(b.center_hz, b.gain_db, b.q, sample_rate);
    for (float& v : y) v = static_cast<float>(f.process(v));
  }
  return y;
}

double active_rms(std::span<const float> x) {
  constexpr std::size_t frame = kSampleRate / 50;
  std::vector<double> energies;
  for (std::size_t s = 0; s < x.size(); s += frame) {
    const std::size_t e = std::min(x.size(), s + frame);
    double acc = 0.0;
    for (std::size_t i = s; i < e; ++i) acc += double(x[i]) * x[i];
    energies.push_back(acc / static_cast<double>(e - s));
  }
  if (energies.empty()) return 0.0;
  const double loudest = *std::max_element(energies.begin(), energies.end());
  if (loudest <= 0.0) return 0.0;
  const double threshold = loudest * 1e-4;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t f = 0; f < energies.size(); ++f) {
    if (energies[f] >= threshold) {
      const std::size_t len = std::min(frame, x.size() - f * frame);
      acc += energies[f] * static_cast<double>(len);
      count += len;
    }
  }
  return std::sqrt(acc / static_cast<double>(count));
}

std::vector<float> make_noise(NoiseKind kind, std::size_t length, std::uint64_t seed) {
  std::vector<float> n(length, 0.0f);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  switch (kind) {
    case NoiseKind::none:
      return n;
    case NoiseKind::white:
      for (float& v : n) v = static_cast<float>(gauss(rng));
      break;
    case NoiseKind::pink: {
      // Paul Kellet's refined pink filter.
      double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
      for (float& v : n) {
        const double w = gauss(rng);
        b0 = 0.99886 * b0 + w * 0.0555179;
        b1 = 0.99332 * b1 + w * 0.0750759;
        b2 = 0.96900 * b2 + w * 0.1538520;
        b3 = 0.86650 * b3 + w * 0.3104856;
        b4 = 0.55000 * b4 + w * 0.5329522;
        b5 = -0.7616 * b5 - w * 0.0168980;
        v = static_cast<float>(b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362);
        b6 = w * 0.115926;
      }
      break;
    }
    case NoiseKind::babble: {
      std::uniform_real_distribution<double> pitch(90.0, 240.0);
      for (int talker = 0; talker < 6; ++talker) {
        const SurrogateVoice voice{pitch(rng), 0.2};
        const auto s = synth_speech(voice, length, derive_seed(seed, "talker" + std::to_string(talker)));
        for (std::size_t i = 0; i < length; ++i) n[i] += s[i];
      }
      break;
    }
  }
  const double r = rms(n);
  if (r > 0.0) {
    for (float& v : n) v = static_cast<float>(v / r);
  }
  return n;
}

void mix_at_snr(std::vector<float>& signal, std::span<const float> noise, double snr_db) {
  const double s = active_rms(signal);
  const double r = rms(noise.subspan(0, std::min(noise.size(), signal.size())));
  if (r <= 0.0 || s <= 0.0) return;
  const double gain = s / (r * std::pow(10.0, snr_db / 20.0));
  for (std::size_t i = 0; i < signal.size() && i < noise.size(); ++i) {
    signal[i] = static_cast<float>(signal[i] + gain * noise[i]);
  }
}

AudioSegment apply_environment(const AudioSegment& clean, const EnvironmentSpec& env,
                               std::uint64_t seed) {
  env.validate();
  AudioSegment out;
  out.sample_rate = clean.sample_rate;
  out.samples = apply_eq(clean.samples, env.eq, clean.sample_rate);
  if (env.rir_rt60 > 0.0 && env.rir_direct_ratio < 1.0) {
    const auto ir_len = std::min<std::size_t>(
        static_cast<std::size_t>(std::ceil(env.rir_rt60 * clean.sample_rate)) + 1, clean.n_samples());
    const auto h = synth_rir(env.rir_rt60, env.rir_direct_ratio, std::max<std::size_t>(ir_len, 1),
                             derive_seed(seed, "rir"));
    out.samples = convolve_truncated(out.samples, h);
  }
  if (env.noise_kind != NoiseKind::none) {
    const auto noise = make_noise(env.noise_kind, out.n_samples(), derive_seed(seed, "noise"));
    mix_at_snr(out.samples, noise, env.snr_db);
  }
  peak_limit(out.samples);
  return out;
}

std::vector<float> synth_speech(const SurrogateVoice& voice, std::size_t length,
                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * uni(rng); };
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr double fs = kSampleRate;

  std::vector<double> out(length, 0.0);
  std::size_t pos = static_cast<std::size_t>(between(0.05, 0.25) * fs);
  while (pos + static_cast<std::size_t>(0.15 * fs) < length) {
    // Consonant: band-passed noise burst.
    if (uni(rng) < 0.6) {
      const auto n = static_cast<std::size_t>(between(0.03, 0.09) * fs);
      Biquad bp = Biquad::bandpass(between(2000.0, 6000.0), between(1.0, 3.0), kSampleRate);
      const double amp = between(0.1, 0.35);
      for (std::size_t i = 0; i < n && pos + i < length; ++i) {
        const double env = std::sin(M_PI * static_cast<double>(i) / static_cast<double>(n));
        out[pos + i] += amp * env * bp.process(gauss(rng));
      }
      pos += n;
    }
    // Vowel: harmonic source with a gliding pitch through three formants.
    const auto n = static_cast<std::size_t>(between(0.12, 0.32) * fs);
    const double f_start = voice.pitch_hz * (1.0 + voice.pitch_spread * between(-1.0, 1.0));
    const double f_end = voice.pitch_hz * (1.0 + voice.pitch_spread * between(-1.0, 1.0));
    const Vowel& v = kVowels[static_cast<std::size_t>(uni(rng) * kVowels.size()) % kVowels.size()];
    std::array<Biquad, 3> formants{Biquad::bandpass(v.f1, 6.0, kSampleRate),
                                   Biquad::bandpass(v.f2, 8.0, kSampleRate),
                                   Biquad::bandpass(v.f3, 10.0, kSampleRate)};
    constexpr std::array<double, 3> gains{1.0, 0.6, 0.35};
    const double amp = between(0.5, 1.0);
    const std::size_t ramp = static_cast<std::size_t>(0.02 * fs);
    double phase = 0.0;
    for (std::size_t i = 0; i < n && pos + i < length; ++i) {
      const double frac = static_cast<double>(i) / static_cast<double>(n);
      const double f0 = f_start + (f_end - f_start) * frac;
      phase += 2.0 * M_PI * f0 / fs;
      double src = 0.0;
      const int harmonics = static_cast<int>(7500.0 / f0);
      for (int h = 1; h <= harmonics; ++h) src += std::sin(h * phase) / h;
      double y = 0.0;
      for (std::size_t k = 0; k < formants.size(); ++k) y += gains[k] * formants[k].process(src);
      double env = 1.0;
      if (i < ramp) env = 0.5 - 0.5 * std::cos(M_PI * static_cast<double>(i) / ramp);
      if (n - i < ramp) env = 0.5 - 0.5 * std::cos(M_PI * static_cast<double>(n - i) / ramp);
      out[pos + i] += amp * env * y;
    }
    pos += n;
    // Pause or short gap.
    pos += static_cast<std::size_t>((uni(rng) < 0.35 ? between(0.08, 0.25) : between(0.01, 0.04)) * fs);
  }
  double p = 0.0;
  for (double v : out) p = std::max(p, std::fabs(v));
  std::vector<float> y(length);
  const double scale = p > 0.0 ? 0.5 / p : 0.0;
  for (std::size_t i = 0; i < length; ++i) y[i] = static_cast<float>(out[i] * scale);
  return y;
}

AugmentationPools AugmentationPools::synthetic(std::size_t n_irs, std::size_t n_noises,
                                               std::size_t noise_length, std::uint64_t seed) {
  AugmentationPools pools;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> rt(0.1, 0.9), dr(0.3, 0.9);
  for (std::size_t i = 0; i < n_irs; ++i) {
    const double rt60 = rt(rng);
    const double ratio = dr(rng);
    const auto len = static_cast<std::size_t>(std::ceil(rt60 * kSampleRate)) + 1;
    pools.impulse_responses.push_back(
        synth_rir(rt60, ratio, len, derive_seed(seed, "aug-ir" + std::to_string(i))));
  }
  constexpr std::array<NoiseKind, 3> kinds{NoiseKind::white, NoiseKind::pink, NoiseKind::babble};
  for (std::size_t i = 0; i < n_noises; ++i) {
    pools.noises.push_back(make_noise(kinds[i % kinds.size()], noise_length,
                                      derive_seed(seed, "aug-noise" + std::to_string(i))));
  }
  return pools;
}

AudioSegment augment_content(const AudioSegment& clean, const AugmentationPools& pools,
                             std::pair<double, double> snr_range, std::uint64_t seed) {
  if (pools.impulse_responses.empty() || pools.noises.empty()) {
    throw InvalidInput("augmentation pools must be non-empty");
  }
  if (snr_range.first > snr_range.second) throw InvalidInput("snr range lower bound exceeds upper bound");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_ir(0, pools.impulse_responses.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_noise(0, pools.noises.size() - 1);
  std::uniform_real_distribution<double> pick_snr(snr_range.first, snr_range.second);
  const auto& ir = pools.impulse_responses[pick_ir(rng)];
  const auto& noise_src = pools.noises[pick_noise(rng)];
  const double snr = snr_range.first == snr_range.second ? snr_range.first : pick_snr(rng);

  AudioSegment out;
  out.sample_rate = clean.sample_rate;
  out.samples = ir.size() == 1 && ir[0] == 1.0f
                    ? clean.samples
                    : convolve_truncated(clean.samples, std::span<const float>(ir).first(
                                                            std::min(ir.size(), clean.n_samples())));
  if (noise_src.empty()) throw InvalidInput("empty noise clip in pool");
  std::uniform_int_distribution<std::size_t> pick_offset(0, noise_src.size() - 1);
  const std::size_t offset = pick_offset(rng);
  std::vector<float> noise(out.n_samples());
  for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = noise_src[(offset + i) % noise_src.size()];
  mix_at_snr(out.samples, noise, snr);
  peak_limit(out.samples);
  return out;
}

}  // namespace envtransfer
