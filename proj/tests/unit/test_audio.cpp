#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "../support.hpp"
#include "envtransfer/audio.hpp"
#include "envtransfer/errors.hpp"

using namespace envtransfer;
using Catch::Approx;

namespace {

// Minimal independent WAV writer for stereo / float / other-rate fixtures.
void write_raw_wav(const std::filesystem::path& p, const std::vector<float>& interleaved, int channels, int rate,
                   bool float32) {
  std::ofstream out(p, std::ios::binary);
  auto u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto u16 = [&](std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };
  const std::uint16_t bits = float32 ? 32 : 16;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(interleaved.size() * bits / 8);
  out.write("RIFF", 4);
  u32(36 + data_bytes);
  out.write("WAVEfmt ", 8);
  u32(16);
  u16(float32 ? 3 : 1);
  u16(static_cast<std::uint16_t>(channels));
  u32(static_cast<std::uint32_t>(rate));
  u32(static_cast<std::uint32_t>(rate * channels * bits / 8));
  u16(static_cast<std::uint16_t>(channels * bits / 8));
  u16(bits);
  out.write("data", 4);
  u32(data_bytes);
  for (float v : interleaved) {
    if (float32) {
      out.write(reinterpret_cast<const char*>(&v), 4);
    } else {
      const auto s = static_cast<std::int16_t>(std::lround(std::clamp(v, -1.0f, 1.0f) * 32767.0f));
      out.write(reinterpret_cast<const char*>(&s), 2);
    }
  }
}

}  // namespace

TEST_CASE("2 s at 48 kHz loads as 32000 samples at 16 kHz") {
  testing::TempDir dir("audio");
  write_raw_wav(dir / "a.wav", testing::sine(440, 2.0, 48000), 1, 48000, false);
  const auto a = load_audio(dir / "a.wav");
  CHECK(a.sample_rate == 16000);
  CHECK(a.n_samples() == 32000);
}

TEST_CASE("stereo with identical channels equals either channel") {
  testing::TempDir dir("audio");
  const auto mono = testing::sine(300, 0.5, 16000, 0.4);
  std::vector<float> stereo;
  for (float v : mono) {
    stereo.push_back(v);
    stereo.push_back(v);
  }
  write_raw_wav(dir / "s.wav", stereo, 2, 16000, true);
  const auto a = load_audio(dir / "s.wav");
  REQUIRE(a.n_samples() == mono.size());
  for (std::size_t i = 0; i < mono.size(); ++i) REQUIRE(a.samples[i] == mono[i]);
}

TEST_CASE("resampled 440 Hz sine peaks at 440 +- 2 Hz") {
  const auto x = testing::sine(440, 1.0, 48000);
  const auto y = resample(x, 48000, 16000);
  REQUIRE(y.size() == 16000);
  // Dense direct-DFT scan of the output, independent of the library FFT.
  double best_hz = 0.0, best = -1.0;
  for (double hz = 300.0; hz <= 600.0; hz += 0.25) {
    const double m = testing::dft_magnitude(y, hz, 16000);
    if (m > best) {
      best = m;
      best_hz = hz;
    }
  }
  CHECK(std::abs(best_hz - 440.0) <= 2.0);
  // Amplitude preserved in the passband.
  CHECK(best / (y.size() / 2.0) == Approx(0.5).margin(0.01));
}

TEST_CASE("resampler rejects content above the new Nyquist") {
  const auto x = testing::sine(12000, 0.5, 48000);
  const auto y = resample(x, 48000, 16000);
  CHECK(rms(std::span<const float>(y).subspan(200, y.size() - 400)) < 0.01);
}

TEST_CASE("load_audio peak-normalizes only above 1") {
  testing::TempDir dir("audio");
  std::vector<float> loud = testing::sine(200, 0.25, 16000, 2.0);
  write_raw_wav(dir / "loud.wav", loud, 1, 16000, true);
  CHECK(peak(load_audio(dir / "loud.wav").samples) == Approx(1.0f).margin(1e-4));
  std::vector<float> quiet = testing::sine(200, 0.25, 16000, 0.3);
  write_raw_wav(dir / "quiet.wav", quiet, 1, 16000, true);
  CHECK(peak(load_audio(dir / "quiet.wav").samples) == Approx(0.3f).margin(1e-4));
}

TEST_CASE("load_audio errors") {
  testing::TempDir dir("audio");
  CHECK_THROWS_AS(load_audio(dir / "missing.wav"), IoError);
  {
    std::ofstream(dir / "junk.wav") << "not a wav file at all";
  }
  CHECK_THROWS_AS(load_audio(dir / "junk.wav"), IoError);
  write_raw_wav(dir / "empty.wav", {}, 1, 16000, false);
  CHECK_THROWS_AS(load_audio(dir / "empty.wav"), InvalidInput);
}

TEST_CASE("write_wav / read_wav round trip within 16-bit quantization") {
  testing::TempDir dir("audio");
  const auto x = testing::sine(1000, 0.1, 16000, 0.8);
  write_wav(dir / "sub" / "x.wav", x);
  const auto w = read_wav(dir / "sub" / "x.wav");
  CHECK(w.sample_rate == 16000);
  CHECK(w.channels == 1);
  REQUIRE(w.interleaved.size() == x.size());
  for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(std::abs(w.interleaved[i] - x[i]) < 1.0 / 32767.0);
}

TEST_CASE("segment modes") {
  AudioSegment six;
  six.samples.resize(6 * 16000);
  for (std::size_t i = 0; i < six.samples.size(); ++i) six.samples[i] = static_cast<float>(i);

  SECTION("center keeps the middle 4 s") {
    const auto s = segment(six, 4.0, SegmentMode::center);
    REQUIRE(s.n_samples() == 64000);
    CHECK(s.samples.front() == 16000.0f);
    CHECK(s.samples.back() == 79999.0f);
  }
  SECTION("pad zero-fills short inputs") {
    AudioSegment one;
    one.samples.assign(16000, 0.25f);
    const auto s = segment(one, 4.0, SegmentMode::pad);
    REQUIRE(s.n_samples() == 64000);
    CHECK(s.samples[15999] == 0.25f);
    for (std::size_t i = 16000; i < 64000; ++i) REQUIRE(s.samples[i] == 0.0f);
  }
  SECTION("random crop is reproducible for a fixed seed") {
    std::mt19937_64 a(42), b(42);
    const auto s1 = segment(six, 4.0, SegmentMode::random_crop, a);
    const auto s2 = segment(six, 4.0, SegmentMode::random_crop, b);
    REQUIRE(s1.n_samples() == 64000);
    CHECK(s1.samples == s2.samples);
    // Contiguous crop.
    CHECK(s1.samples.back() - s1.samples.front() == 63999.0f);
  }
  SECTION("random crop needs a generator") {
    CHECK_THROWS_AS(segment(six, 4.0, SegmentMode::random_crop), InvalidInput);
  }
}
