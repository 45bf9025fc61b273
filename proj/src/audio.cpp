#include "envtransfer/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "envtransfer/errors.hpp"

namespace envtransfer {
namespace {

std::uint32_t le32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
std::uint16_t le16(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

void put32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
void put16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

// Zeroth-order modified Bessel function, series form.
double bessel_i0(double x) {
  double sum = 1.0, term = 1.0;
  const double q = x * x / 4.0;
  for (int k = 1; k < 64; ++k) {
    term *= q / (double(k) * k);
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

}  // namespace

WavData read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw IoError(path.string() + " is not a RIFF/WAVE file");
  }

  int format = 0, channels = 0, rate = 0, bits = 0;
  const unsigned char* payload = nullptr;
  std::size_t payload_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::size_t size = le32(chunk + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0 && body + 16 <= bytes.size()) {
      format = le16(chunk + 8);
      channels = le16(chunk + 10);
      rate = static_cast<int>(le32(chunk + 12));
      bits = le16(chunk + 22);
      if (format == 0xFFFE && size >= 40 && body + 26 <= bytes.size()) {
        format = le16(chunk + 8 + 24);  // WAVE_FORMAT_EXTENSIBLE subformat
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      payload = bytes.data() + body;
      payload_size = std::min(size, bytes.size() - body);
    }
    pos = body + size + (size & 1);
  }
  if (format == 0 || payload == nullptr) throw IoError(path.string() + ": missing fmt or data");
  if (channels <= 0 || rate <= 0) throw IoError(path.string() + ": bad channel count or rate");

  WavData wav;
  wav.sample_rate = rate;
  wav.channels = channels;
  const std::size_t width = static_cast<std::size_t>(bits / 8);
  if (width == 0) throw IoError(path.string() + ": unsupported bit depth");
  const std::size_t n = payload_size / width;
  wav.interleaved.resize(n);
  if (format == 1 && bits == 16) {
    for (std::size_t i = 0; i < n; ++i) {
      wav.interleaved[i] = static_cast<std::int16_t>(le16(payload + 2 * i)) / 32768.0f;
    }
  } else if (format == 1 && bits == 24) {
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned char* p = payload + 3 * i;
      std::int32_t v = (std::int32_t(p[0]) << 8) | (std::int32_t(p[1]) << 16) |
                       (std::int32_t(p[2]) << 24);
      wav.interleaved[i] = static_cast<float>((v >> 8) / 8388608.0);
    }
  } else if (format == 1 && bits == 32) {
    for (std::size_t i = 0; i < n; ++i) {
      wav.interleaved[i] =
          static_cast<float>(static_cast<std::int32_t>(le32(payload + 4 * i)) / 2147483648.0);
    }
  } else if (format == 3 && bits == 32) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = le32(payload + 4 * i);
      float f;
      std::memcpy(&f, &u, 4);
      wav.interleaved[i] = f;
    }
  } else {
    throw IoError(path.string() + ": unsupported WAV encoding (format " + std::to_string(format) +
                  ", " + std::to_string(bits) + " bits)");
  }
  wav.interleaved.resize(n - n % static_cast<std::size_t>(channels));
  return wav;
}

void write_wav(const std::filesystem::path& path, std::span<const float> samples, int sample_rate) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  os.write("RIFF", 4);
  put32(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  put32(os, 16);
  put16(os, 1);
  put16(os, 1);
  put32(os, static_cast<std::uint32_t>(sample_rate));
  put32(os, static_cast<std::uint32_t>(sample_rate * 2));
  put16(os, 2);
  put16(os, 16);
  os.write("data", 4);
  put32(os, data_bytes);
  for (float s : samples) {
    const float c = std::clamp(s, -1.0f, 1.0f);
    put16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lrint(c * 32767.0f))));
  }
  if (!os) throw IoError("short write to " + path.string());
}

std::vector<float> resample(std::span<const float> input, int from_rate, int to_rate) {
  if (from_rate <= 0 || to_rate <= 0) throw InvalidInput("sample rates must be positive");
  if (from_rate == to_rate) return {input.begin(), input.end()};
  const int g = std::gcd(from_rate, to_rate);
  const long up = to_rate / g;
  const long down = from_rate / g;

  // Low-pass at the lower of the two Nyquist rates, expressed at the
  // upsampled rate, with a small transition guard band.
  const double cutoff = 0.95 * 0.5 / static_cast<double>(std::max(up, down));
  const long half_taps_per_phase = 24;
  const long half_len = half_taps_per_phase * std::max(up, down);
  const double beta = 8.6;
  const double i0_beta = bessel_i0(beta);
  std::vector<double> h(static_cast<std::size_t>(2 * half_len + 1));
  for (long n = -half_len; n <= half_len; ++n) {
    const double x = static_cast<double>(n);
    const double sinc = n == 0 ? 2.0 * cutoff
                               : std::sin(2.0 * M_PI * cutoff * x) / (M_PI * x);
    const double r = x / static_cast<double>(half_len);
    const double w = bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0_beta;
    h[static_cast<std::size_t>(n + half_len)] = sinc * w * static_cast<double>(up);
  }

  const long n_in = static_cast<long>(input.size());
  const long n_out = (n_in * up + down - 1) / down;
  std::vector<float> out(static_cast<std::size_t>(n_out));
  for (long m = 0; m < n_out; ++m) {
    // Output sample m sits at position m*down on the upsampled grid; only
    // every up-th upsampled position carries an input sample (polyphase).
    const long centre = m * down;
    long k_lo = (centre - half_len + up - 1) / up;
    if (centre - half_len < 0) k_lo = -((half_len - centre) / up);
    const long k_hi = (centre + half_len) / up;
    double acc = 0.0;
    for (long k = std::max(0L, k_lo); k <= std::min(n_in - 1, k_hi); ++k) {
      const long tap = centre - k * up + half_len;
      if (tap < 0 || tap > 2 * half_len) continue;
      acc += h[static_cast<std::size_t>(tap)] * input[static_cast<std::size_t>(k)];
    }
    out[static_cast<std::size_t>(m)] = static_cast<float>(acc);
  }
  return out;
}

AudioSegment to_segment(std::span<const float> mono, int sample_rate) {
  AudioSegment a;
  a.samples = resample(mono, sample_rate, kSampleRate);
  a.sample_rate = kSampleRate;
  if (a.samples.empty()) throw InvalidInput("zero-length audio");
  for (float& s : a.samples) {
    if (!std::isfinite(s)) s = 0.0f;
  }
  const float p = peak(a.samples);
  if (p > 1.0f) {
    for (float& s : a.samples) s /= p;
  }
  return a;
}

AudioSegment load_audio(const std::filesystem::path& path) {
  const WavData wav = read_wav(path);
  const std::size_t frames = wav.interleaved.size() / static_cast<std::size_t>(wav.channels);
  if (frames == 0) throw InvalidInput(path.string() + " has zero-length audio");
  std::vector<float> mono(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (int c = 0; c < wav.channels; ++c) {
      acc += wav.interleaved[i * static_cast<std::size_t>(wav.channels) + static_cast<std::size_t>(c)];
    }
    mono[i] = static_cast<float>(acc / wav.channels);
  }
  return to_segment(mono, wav.sample_rate);
}

namespace {

AudioSegment fit(const AudioSegment& a, std::size_t target, std::size_t offset) {
  AudioSegment out;
  out.sample_rate = a.sample_rate;
  out.samples.assign(target, 0.0f);
  const std::size_t n = std::min(target, a.n_samples() - std::min(offset, a.n_samples()));
  std::copy_n(a.samples.begin() + static_cast<std::ptrdiff_t>(offset), n, out.samples.begin());
  return out;
}

std::size_t target_length(const AudioSegment& a, double target_seconds) {
  if (!(target_seconds > 0.0)) throw InvalidInput("target_seconds must be positive");
  return static_cast<std::size_t>(std::llround(target_seconds * a.sample_rate));
}

}  // namespace

AudioSegment segment(const AudioSegment& a, double target_seconds, SegmentMode mode,
                     std::mt19937_64& rng) {
  const std::size_t target = target_length(a, target_seconds);
  if (a.n_samples() <= target) return fit(a, target, 0);
  const std::size_t excess = a.n_samples() - target;
  switch (mode) {
    case SegmentMode::center:
      return fit(a, target, excess / 2);
    case SegmentMode::random_crop: {
      std::uniform_int_distribution<std::size_t> pick(0, excess);
      return fit(a, target, pick(rng));
    }
    case SegmentMode::pad:
      break;
  }
  return fit(a, target, 0);
}

AudioSegment segment(const AudioSegment& a, double target_seconds, SegmentMode mode) {
  if (mode == SegmentMode::random_crop) {
    throw InvalidInput("random_crop needs a caller-supplied rng");
  }
  std::mt19937_64 unused(0);
  return segment(a, target_seconds, mode, unused);
}

double rms(std::span<const float> x) noexcept {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (float v : x) acc += double(v) * v;
  return std::sqrt(acc / static_cast<double>(x.size()));
}

float peak(std::span<const float> x) noexcept {
  float p = 0.0f;
  for (float v : x) p = std::max(p, std::fabs(v));
  return p;
}

}  // namespace envtransfer
