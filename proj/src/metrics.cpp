#include "envtransfer/metrics.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include "envtransfer/errors.hpp"

namespace envtransfer {

double lsd(const Grid& a, const Grid& b) {
  require_same_shape(a, b, "lsd");
  if (a.empty()) throw InvalidInput("lsd of an empty grid");
  double total = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) {
      const double d = static_cast<double>(a(r, c)) - b(r, c);
      acc += d * d;
    }
    total += std::sqrt(acc / static_cast<double>(a.rows()));
  }
  return total / static_cast<double>(a.cols());
}

Grid log10_spectrogram(std::span<const float> samples) {
  const auto mag = magnitude(stft(samples));
  Grid out(mag.rows(), mag.cols());
  for (std::size_t i = 0; i < mag.size(); ++i) {
    out.values()[i] = static_cast<float>(std::log10(std::max(mag.values()[i], kMelFloor)));
  }
  return out;
}

Grid log10_mel(const MelSpectrogram& m) {
  if (m.normalized) throw InvalidInput("log10_mel expects an unnormalized mel spectrogram");
  Grid out = m.values;
  for (float& v : out.values()) v = static_cast<float>(v / std::numbers::ln10);
  return out;
}

double lsd_stft(std::span<const float> a, std::span<const float> b) {
  const std::size_t n = std::min(a.size(), b.size());
  if (n == 0) throw InvalidInput("lsd_stft of an empty waveform");
  return lsd(log10_spectrogram(a.first(n)), log10_spectrogram(b.first(n)));
}

double lsd_mel(const MelSpectrogram& a, const MelSpectrogram& b) { return lsd(log10_mel(a), log10_mel(b)); }

double ssim(const Grid& a, const Grid& b, const SsimOptions& opt) {
  require_same_shape(a, b, "ssim");
  const auto w = static_cast<std::size_t>(opt.window);
  if (opt.window < 1 || a.rows() < w || a.cols() < w) {
    throw InvalidInput("ssim needs a grid of at least " + std::to_string(opt.window) + "x" +
                       std::to_string(opt.window));
  }
  const double c1 = std::pow(0.01 * opt.dynamic_range, 2);
  const double c2 = std::pow(0.03 * opt.dynamic_range, 2);
  const double n = static_cast<double>(w * w);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r0 = 0; r0 + w <= a.rows(); ++r0) {
    for (std::size_t c0 = 0; c0 + w <= a.cols(); ++c0) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t r = r0; r < r0 + w; ++r) {
        for (std::size_t c = c0; c < c0 + w; ++c) {
          const double x = a(r, c), y = b(r, c);
          sa += x;
          sb += y;
          saa += x * x;
          sbb += y * y;
          sab += x * y;
        }
      }
      const double ma = sa / n, mb = sb / n;
      const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double sisnr(std::span<const double> estimate, std::span<const double> reference) {
  if (estimate.size() != reference.size()) throw InvalidInput("sisnr needs equal lengths");
  double ss = 0.0, es = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    ss += reference[i] * reference[i];
    es += estimate[i] * reference[i];
  }
  if (!(ss > 0.0)) throw InvalidInput("sisnr reference is all zero");
  const double scale = es / ss;
  double target = 0.0, err = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double st = scale * reference[i];
    const double e = estimate[i] - st;
    target += st * st;
    err += e * e;
  }
  if (!(target > 0.0)) return 10.0 * std::log10(kSisnrFloor);  // orthogonal or silent estimate
  return 10.0 * std::log10(target / std::max(err, kSisnrFloor * target));
}

double sisnr(std::span<const float> estimate, std::span<const float> reference) {
  std::vector<double> e(estimate.begin(), estimate.end());
  std::vector<double> r(reference.begin(), reference.end());
  return sisnr(e, r);
}

double sispnr(std::span<const float> estimate, std::span<const float> reference) {
  if (estimate.size() != reference.size()) throw InvalidInput("sispnr needs equal lengths");
  const auto e = magnitude(stft(estimate));
  const auto r = magnitude(stft(reference));
  return sisnr(std::span<const double>(e.values()), std::span<const double>(r.values()));
}

}  // namespace envtransfer
