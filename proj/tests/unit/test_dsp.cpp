#include <catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <numbers>

#include "../support.hpp"
#include "envtransfer/dsp.hpp"
#include "envtransfer/errors.hpp"
#include "envtransfer/fft.hpp"

using namespace envtransfer;
using Catch::Approx;

namespace {

// Direct-sum oracle for one centered STFT frame with reflect padding.
std::vector<std::complex<double>> oracle_frame(const std::vector<float>& x, std::size_t frame) {
  const long n = static_cast<long>(x.size());
  auto at = [&](long i) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
    return static_cast<double>(x[static_cast<std::size_t>(i)]);
  };
  std::vector<std::complex<double>> out(513);
  const long start = static_cast<long>(frame) * 256 - 512;
  for (int k = 0; k < 513; ++k) {
    std::complex<double> acc = 0.0;
    for (int m = 0; m < 1024; ++m) {
      const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * m / 1024.0);
      acc += w * at(start + m) * std::polar(1.0, -2.0 * std::numbers::pi * k * m / 1024.0);
    }
    out[static_cast<std::size_t>(k)] = acc;
  }
  return out;
}

double hz_to_mel_slaney(double hz) {
  const double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return hz < min_log_hz ? hz / f_sp : min_log_mel + std::log(hz / min_log_hz) / logstep;
}

double mel_to_hz_slaney(double mel) {
  const double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return mel < min_log_mel ? mel * f_sp : min_log_hz * std::exp(logstep * (mel - min_log_mel));
}

}  // namespace

TEST_CASE("frame count law T = floor(n / 256) + 1") {
  for (std::size_t n : {1u, 255u, 256u, 257u, 1000u, 64000u}) {
    std::vector<float> x(n, 0.1f);
    if (n >= 2) x[n / 2] = 0.5f;
    CHECK(stft(x).cols() == n / 256 + 1);
    CHECK(frame_count(n) == n / 256 + 1);
  }
  CHECK(frame_count(64000) == 251);
}

TEST_CASE("stft matches a direct-sum oracle") {
  const auto x = testing::gaussian_noise(4000, 3, 0.3);
  const auto s = stft(x);
  REQUIRE(s.rows() == 513);
  REQUIRE(s.cols() == 16);
  for (std::size_t frame : {0u, 1u, 7u, 15u}) {
    const auto ref = oracle_frame(x, frame);
    double err = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < 513; ++k) {
      err = std::max(err, std::abs(s(k, frame) - ref[k]));
      scale = std::max(scale, std::abs(ref[k]));
    }
    CHECK(err < 1e-9 * std::max(1.0, scale));
  }
}

TEST_CASE("stft of silence is all zero") {
  const std::vector<float> z(5000, 0.0f);
  for (const auto& c : stft(z).values()) REQUIRE(c == std::complex<double>(0.0, 0.0));
}

TEST_CASE("1000 Hz sine peaks at bin 64 in every interior frame") {
  const auto x = testing::sine(1000.0, 1.0, 16000);
  const auto mag = magnitude(stft(x));
  // Edge frames see the reflected signal, whose phase jump smears the peak.
  for (std::size_t c = 2; c + 2 < mag.cols(); ++c) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < mag.rows(); ++k) {
      if (mag(k, c) > mag(best, c)) best = k;
    }
    REQUIRE(best == static_cast<std::size_t>(std::lround(1000.0 * 1024 / 16000)));
  }
}

TEST_CASE("istft inverts stft") {
  const auto x = testing::gaussian_noise(9000, 5, 0.2);
  const auto y = istft(stft(x), x.size());
  REQUIRE(y.size() == x.size());
  double err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, static_cast<double>(std::abs(x[i] - y[i])));
  CHECK(err < 1e-5);
}

TEST_CASE("RealFft forward/inverse and truncated convolution") {
  RealFft fft(64);
  std::vector<double> in(64), back(64);
  for (int i = 0; i < 64; ++i) in[static_cast<std::size_t>(i)] = std::sin(0.3 * i) + 0.1 * i;
  std::vector<std::complex<double>> spec(33);
  fft.forward(in, spec);
  fft.inverse(spec, back);
  for (int i = 0; i < 64; ++i) REQUIRE(back[static_cast<std::size_t>(i)] / 64.0 == Approx(in[static_cast<std::size_t>(i)]).margin(1e-12));

  const std::vector<float> x{1, 2, 3, 4, 5};
  const std::vector<float> h{1, -1, 0.5f};
  const auto y = convolve_truncated(x, h);
  const std::vector<float> expect{1, 1, 1.5f, 2, 2.5f};
  REQUIRE(y.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(y[i] == Approx(expect[i]).margin(1e-5));
}

TEST_CASE("mel filterbank matches an independent Slaney construction") {
  const auto& fb = mel_filterbank();
  REQUIRE(fb.rows() == 80);
  REQUIRE(fb.cols() == 513);
  const double mmin = hz_to_mel_slaney(0.0), mmax = hz_to_mel_slaney(8000.0);
  std::vector<double> edges(82);
  for (int i = 0; i < 82; ++i) edges[static_cast<std::size_t>(i)] = mel_to_hz_slaney(mmin + (mmax - mmin) * i / 81.0);
  double worst = 0.0;
  for (std::size_t m = 0; m < 80; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    const double enorm = 2.0 / (hi - lo);
    for (std::size_t k = 0; k < 513; ++k) {
      const double f = 8000.0 * static_cast<double>(k) / 512.0;
      const double w = std::max(0.0, std::min((f - lo) / (c - lo), (hi - f) / (hi - c))) * enorm;
      worst = std::max(worst, std::abs(w - fb(m, k)));
    }
  }
  CHECK(worst < 1e-9);
  const auto centers = mel_center_frequencies();
  REQUIRE(centers.size() == 80);
  CHECK(centers.front() > 0.0);
  CHECK(centers.back() < 8000.0);
}

TEST_CASE("silence maps to the log floor in every cell") {
  const std::vector<float> z(16000, 0.0f);
  const auto m = mel_spectrogram(z);
  CHECK(m.n_mels() == 80);
  CHECK(m.n_frames() == 63);
  CHECK_FALSE(m.normalized);
  for (float v : m.values.values()) REQUIRE(v == Approx(std::log(1e-5)).margin(1e-6));
  CHECK(log_mel_floor() == Approx(-11.5129).margin(1e-4));
}

TEST_CASE("mel values never fall below the floor") {
  const auto m = mel_spectrogram(testing::gaussian_noise(8000, 9, 0.1));
  for (float v : m.values.values()) REQUIRE(v >= static_cast<float>(log_mel_floor()) - 1e-6f);
}

TEST_CASE("normalize / denormalize round trip and range") {
  const auto m = mel_spectrogram(testing::gaussian_noise(20000, 11, 0.3));
  double hi = log_mel_floor();
  for (float v : m.values.values()) hi = std::max(hi, static_cast<double>(v));
  const auto stats = NormStats::from_max(hi);
  const auto n = normalize(m, stats);
  CHECK(n.normalized);
  for (float v : n.values.values()) REQUIRE((v >= -1.0f && v <= 1.0f));
  const auto back = denormalize(n, stats);
  CHECK_FALSE(back.normalized);
  double worst = 0.0;
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(back.values.values()[i]) - m.values.values()[i]));
  }
  CHECK(worst < 1e-6);

  CHECK_THROWS_AS(normalize(m, NormStats{1.0, 1.0}), InvalidInput);
  CHECK_THROWS_AS(normalize(n, stats), InvalidInput);
  CHECK_THROWS_AS(denormalize(m, stats), InvalidInput);
}

TEST_CASE("mel file round trip") {
  testing::TempDir dir("mel");
  auto m = mel_spectrogram(testing::gaussian_noise(6000, 2, 0.2));
  m = normalize(m, NormStats::from_max(2.0));
  write_mel(dir / "x.emel", m);
  const auto r = read_mel(dir / "x.emel");
  CHECK(r.normalized);
  CHECK(r.stats.min_log_mel == m.stats.min_log_mel);
  CHECK(r.stats.max_log_mel == m.stats.max_log_mel);
  CHECK(r.values == m.values);
  CHECK_THROWS_AS(read_mel(dir / "missing.emel"), IoError);
}

TEST_CASE("invert_mel produces a waveform whose mel is close to the input") {
  const auto x = testing::sine(440.0, 1.0, 16000, 0.3);
  const auto m = mel_spectrogram(x);
  const auto y = invert_mel(m, 40);
  REQUIRE(y.n_samples() == 256 * (m.n_frames() - 1));
  const auto m2 = mel_spectrogram(y);
  REQUIRE(m2.n_frames() == m.n_frames());
  // Compare the strong cells only; the silent floor is not informative.
  double err = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < 80; ++r) {
    for (std::size_t c = 4; c + 4 < m.n_frames(); ++c) {
      if (m.values(r, c) > -4.0f) {
        err += std::abs(m.values(r, c) - m2.values(r, c));
        ++n;
      }
    }
  }
  REQUIRE(n > 0);
  CHECK(err / static_cast<double>(n) < 0.5);
  CHECK_THROWS_AS(invert_mel(normalize(m, NormStats::from_max(1.0))), InvalidInput);
}
