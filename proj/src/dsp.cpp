#include "envtransfer/dsp.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <mutex>

#include "envtransfer/errors.hpp"
#include "envtransfer/fft.hpp"

namespace envtransfer {
namespace {

constexpr int kPad = kFftSize / 2;

// Index into x under repeated reflection about the end samples (numpy "reflect").
std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - m);
}

// Slaney mel scale.
constexpr double kMinLogHz = 1000.0;
constexpr double kLinScale = 200.0 / 3.0;
constexpr double kMinLogMel = kMinLogHz / kLinScale;
const double kLogStep = std::log(6.4) / 27.0;

double hz_to_mel(double hz) {
  return hz < kMinLogHz ? hz / kLinScale : kMinLogMel + std::log(hz / kMinLogHz) / kLogStep;
}
double mel_to_hz(double mel) {
  return mel < kMinLogMel ? mel * kLinScale : kMinLogHz * std::exp((mel - kMinLogMel) * kLogStep);
}

std::vector<double> mel_edges() {
  const double lo = hz_to_mel(kMelFmin), hi = hz_to_mel(kMelFmax);
  std::vector<double> f(kNumMels + 2);
  for (int i = 0; i < kNumMels + 2; ++i) f[i] = mel_to_hz(lo + (hi - lo) * i / (kNumMels + 1));
  return f;
}

// Nonzero bin span of each filter, used to skip zeros when projecting.
struct FilterSpan {
  int lo = 0, hi = 0;
};

const std::vector<FilterSpan>& filter_spans() {
  static const std::vector<FilterSpan> spans = [] {
    const auto& fb = mel_filterbank();
    std::vector<FilterSpan> s(kNumMels);
    for (int m = 0; m < kNumMels; ++m) {
      int lo = kNumBins, hi = 0;
      for (int k = 0; k < kNumBins; ++k) {
        if (fb(m, k) > 0.0) {
          lo = std::min(lo, k);
          hi = k + 1;
        }
      }
      s[m] = {lo, std::max(lo, hi)};
    }
    return s;
  }();
  return spans;
}

const BasicGrid<double>& filterbank_pinv() {
  static const BasicGrid<double> pinv = [] {
    const auto& fb = mel_filterbank();
    Eigen::MatrixXd a(kNumMels, kNumBins);
    for (int m = 0; m < kNumMels; ++m)
      for (int k = 0; k < kNumBins; ++k) a(m, k) = fb(m, k);
    const Eigen::MatrixXd p = a.completeOrthogonalDecomposition().pseudoInverse();
    BasicGrid<double> out(kNumBins, kNumMels);
    for (int k = 0; k < kNumBins; ++k)
      for (int m = 0; m < kNumMels; ++m) out(k, m) = p(k, m);
    return out;
  }();
  return pinv;
}

void check_mel_shape(const MelSpectrogram& m) {
  if (m.values.rows() != static_cast<std::size_t>(kNumMels)) {
    throw InvalidInput("mel spectrogram must have 80 channels, got " +
                       std::to_string(m.values.rows()));
  }
}

}  // namespace

std::vector<double> hann_window(int length) {
  std::vector<double> w(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / length);
  return w;
}

ComplexGrid stft(std::span<const float> samples) {
  if (samples.empty()) throw InvalidInput("stft of empty signal");
  static const std::vector<double> window = hann_window();
  const long n = static_cast<long>(samples.size());
  const std::size_t frames = frame_count(samples.size());
  const RealFft fft(kFftSize);
  ComplexGrid out(kNumBins, frames);
  std::vector<double> buf(kFftSize);
  std::vector<std::complex<double>> bins(kNumBins);
  for (std::size_t t = 0; t < frames; ++t) {
    const long start = static_cast<long>(t) * kHopSize - kPad;
    for (int i = 0; i < kFftSize; ++i) {
      buf[i] = window[i] * samples[reflect_index(start + i, n)];
    }
    fft.forward(buf, bins);
    for (int k = 0; k < kNumBins; ++k) out(k, t) = bins[k];
  }
  return out;
}

BasicGrid<double> magnitude(const ComplexGrid& spec) {
  BasicGrid<double> mag(spec.rows(), spec.cols());
  for (std::size_t i = 0; i < spec.size(); ++i) mag.values()[i] = std::abs(spec.values()[i]);
  return mag;
}

std::vector<float> istft(const ComplexGrid& spec, std::size_t length) {
  if (spec.rows() != static_cast<std::size_t>(kNumBins)) throw InvalidInput("istft expects 513 bins");
  static const std::vector<double> window = hann_window();
  const std::size_t frames = spec.cols();
  const std::size_t padded = (frames - 1) * kHopSize + kFftSize;
  std::vector<double> acc(padded, 0.0), norm(padded, 0.0);
  const RealFft fft(kFftSize);
  std::vector<std::complex<double>> bins(kNumBins);
  std::vector<double> frame(kFftSize);
  for (std::size_t t = 0; t < frames; ++t) {
    for (int k = 0; k < kNumBins; ++k) bins[k] = spec(k, t);
    fft.inverse(bins, frame);
    const std::size_t off = t * kHopSize;
    for (int i = 0; i < kFftSize; ++i) {
      acc[off + i] += window[i] * frame[i] / kFftSize;
      norm[off + i] += window[i] * window[i];
    }
  }
  std::vector<float> out(length, 0.0f);
  for (std::size_t i = 0; i < length && i + kPad < padded; ++i) {
    const double w = norm[i + kPad];
    out[i] = w > 1e-11 ? static_cast<float>(acc[i + kPad] / w) : 0.0f;
  }
  return out;
}

const BasicGrid<double>& mel_filterbank() {
  static const BasicGrid<double> fb = [] {
    const std::vector<double> f = mel_edges();
    BasicGrid<double> w(kNumMels, kNumBins);
    for (int m = 0; m < kNumMels; ++m) {
      const double lower_width = f[m + 1] - f[m];
      const double upper_width = f[m + 2] - f[m + 1];
      const double enorm = 2.0 / (f[m + 2] - f[m]);
      for (int k = 0; k < kNumBins; ++k) {
        const double hz = static_cast<double>(k) * kSampleRate / kFftSize;
        const double rise = (hz - f[m]) / lower_width;
        const double fall = (f[m + 2] - hz) / upper_width;
        w(m, k) = std::max(0.0, std::min(rise, fall)) * enorm;
      }
    }
    return w;
  }();
  return fb;
}

std::vector<double> mel_center_frequencies() {
  const std::vector<double> f = mel_edges();
  return {f.begin() + 1, f.end() - 1};
}

MelSpectrogram mel_from_magnitude(const BasicGrid<double>& mag) {
  if (mag.rows() != static_cast<std::size_t>(kNumBins)) throw InvalidInput("expected 513 bins");
  const auto& fb = mel_filterbank();
  const auto& spans = filter_spans();
  MelSpectrogram out;
  out.values = Grid(kNumMels, mag.cols());
  for (int m = 0; m < kNumMels; ++m) {
    for (std::size_t t = 0; t < mag.cols(); ++t) {
      double acc = 0.0;
      for (int k = spans[m].lo; k < spans[m].hi; ++k) acc += fb(m, k) * mag(k, t);
      out.values(m, t) = static_cast<float>(std::log(std::max(acc, kMelFloor)));
    }
  }
  return out;
}

MelSpectrogram mel_spectrogram(std::span<const float> samples) {
  return mel_from_magnitude(magnitude(stft(samples)));
}

MelSpectrogram normalize(const MelSpectrogram& m, const NormStats& stats) {
  if (!stats.valid()) throw InvalidInput("degenerate normalization stats (max <= min)");
  if (m.normalized) throw InvalidInput("mel spectrogram is already normalized");
  MelSpectrogram out = m;
  const double span = stats.max_log_mel - stats.min_log_mel;
  for (float& v : out.values.values()) {
    v = static_cast<float>(std::clamp(2.0 * (v - stats.min_log_mel) / span - 1.0, -1.0, 1.0));
  }
  out.normalized = true;
  out.stats = stats;
  return out;
}

MelSpectrogram denormalize(const MelSpectrogram& m, const NormStats& stats) {
  if (!stats.valid()) throw InvalidInput("degenerate normalization stats (max <= min)");
  if (!m.normalized) throw InvalidInput("mel spectrogram is not normalized");
  MelSpectrogram out = m;
  const double span = stats.max_log_mel - stats.min_log_mel;
  for (float& v : out.values.values()) {
    v = static_cast<float>((v + 1.0) * 0.5 * span + stats.min_log_mel);
  }
  out.normalized = false;
  out.stats = {};
  return out;
}

AudioSegment invert_mel(const MelSpectrogram& m, int n_iters) {
  if (m.normalized) throw InvalidInput("invert_mel expects an unnormalized mel spectrogram");
  check_mel_shape(m);
  const std::size_t frames = m.n_frames();
  if (frames < 1) throw InvalidInput("empty mel spectrogram");
  const auto& pinv = filterbank_pinv();

  BasicGrid<double> target(kNumBins, frames);
  std::vector<double> lin(kNumMels);
  for (std::size_t t = 0; t < frames; ++t) {
    for (int j = 0; j < kNumMels; ++j) lin[j] = std::exp(static_cast<double>(m.values(j, t)));
    for (int k = 0; k < kNumBins; ++k) {
      double acc = 0.0;
      for (int j = 0; j < kNumMels; ++j) acc += pinv(k, j) * lin[j];
      target(k, t) = std::max(acc, 0.0);
    }
  }

  const std::size_t length = kHopSize * (frames - 1);
  ComplexGrid spec(kNumBins, frames);
  for (std::size_t i = 0; i < spec.size(); ++i) spec.values()[i] = target.values()[i];

  // Fast Griffin-Lim: projection onto consistent spectrograms with momentum.
  constexpr double kMomentum = 0.99;
  ComplexGrid previous(kNumBins, frames);
  const std::size_t recon_len = std::max<std::size_t>(length, 1);
  for (int it = 0; it < n_iters; ++it) {
    const std::vector<float> wave = istft(spec, recon_len);
    const ComplexGrid rebuilt = stft(wave);
    for (std::size_t i = 0; i < spec.size(); ++i) {
      const std::complex<double> r = rebuilt.values()[i];
      std::complex<double> a = r - (kMomentum / (1.0 + kMomentum)) * previous.values()[i];
      const double mag = std::abs(a);
      const std::complex<double> phase = mag > 1e-16 ? a / mag : std::complex<double>(1.0, 0.0);
      spec.values()[i] = target.values()[i] * phase;
      previous.values()[i] = r;
    }
  }

  AudioSegment out;
  out.sample_rate = kSampleRate;
  out.samples = istft(spec, length);
  return out;
}

namespace {
constexpr char kMelMagic[4] = {'E', 'M', 'E', 'L'};
constexpr std::uint32_t kMelVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

void write_mel(const std::filesystem::path& path, const MelSpectrogram& m) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(kMelMagic, 4);
  put<std::uint32_t>(os, kMelVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(m.n_mels()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(m.n_frames()));
  put<std::uint32_t>(os, m.normalized ? 1u : 0u);
  put<std::uint32_t>(os, 0u);
  put<double>(os, m.stats.min_log_mel);
  put<double>(os, m.stats.max_log_mel);
  os.write(reinterpret_cast<const char*>(m.values.data()),
           static_cast<std::streamsize>(m.values.size() * sizeof(float)));
  if (!os) throw IoError("short write to " + path.string());
}

MelSpectrogram read_mel(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMelMagic, 4) != 0) throw IoError(path.string() + ": bad mel magic");
  if (get<std::uint32_t>(is) != kMelVersion) throw IoError(path.string() + ": unsupported version");
  const auto f = get<std::uint32_t>(is);
  const auto t = get<std::uint32_t>(is);
  const auto flags = get<std::uint32_t>(is);
  get<std::uint32_t>(is);
  MelSpectrogram m;
  m.normalized = (flags & 1u) != 0;
  m.stats.min_log_mel = get<double>(is);
  m.stats.max_log_mel = get<double>(is);
  std::vector<float> data(std::size_t(f) * t);
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!is) throw IoError(path.string() + ": truncated mel payload");
  m.values = Grid(f, t, std::move(data));
  return m;
}

}  // namespace envtransfer
