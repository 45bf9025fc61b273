#include "../catch_torch.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "../support.hpp"
#include "envtransfer/evaluation.hpp"
#include "envtransfer/metrics.hpp"

using namespace envtransfer;
using Catch::Approx;

namespace {

Grid random_grid(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Grid g(r, c);
  for (float& v : g.values()) v = static_cast<float>(u(rng));
  return g;
}

// Direct two-pass SSIM over every 7x7 window.
double ssim_oracle(const Grid& a, const Grid& b) {
  const double c1 = 0.02 * 0.02, c2 = 0.06 * 0.06;
  double total = 0.0;
  int count = 0;
  for (std::size_t r0 = 0; r0 + 7 <= a.rows(); ++r0) {
    for (std::size_t c0 = 0; c0 + 7 <= a.cols(); ++c0) {
      double ma = 0, mb = 0;
      for (std::size_t r = r0; r < r0 + 7; ++r)
        for (std::size_t c = c0; c < c0 + 7; ++c) {
          ma += a(r, c) / 49.0;
          mb += b(r, c) / 49.0;
        }
      double va = 0, vb = 0, cov = 0;
      for (std::size_t r = r0; r < r0 + 7; ++r)
        for (std::size_t c = c0; c < c0 + 7; ++c) {
          va += (a(r, c) - ma) * (a(r, c) - ma) / 49.0;
          vb += (b(r, c) - mb) * (b(r, c) - mb) / 49.0;
          cov += (a(r, c) - ma) * (b(r, c) - mb) / 49.0;
        }
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / count;
}

EmbeddingTable clustered_table() {
  // Three environments around orthogonal directions with small jitter.
  EmbeddingTable t;
  t.dim = 4;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> jitter(0.0, 0.1);
  const char* envs[3] = {"a", "b", "c"};
  for (int e = 0; e < 3; ++e) {
    for (int k = 0; k < 6; ++k) {
      EmbeddingRow row{"u" + std::to_string(k), envs[e], std::vector<float>(4), std::nullopt};
      for (int d = 0; d < 4; ++d) row.z[d] = static_cast<float>((d == e ? 1.0 : 0.0) + jitter(rng));
      t.rows.push_back(row);
    }
  }
  return t;
}

}  // namespace

TEST_CASE("lsd examples") {
  const Grid a = random_grid(6, 9, 1);
  CHECK(lsd(a, a) == 0.0);
  Grid base(6, 9), shifted(6, 9);
  for (std::size_t i = 0; i < base.size(); ++i) {
    base.values()[i] = static_cast<float>(static_cast<int>(i % 17) - 8) / 8.0f;
    shifted.values()[i] = base.values()[i] + 1.0f;
  }
  CHECK(lsd(shifted, base) == 1.0);
  const Grid b = random_grid(6, 9, 2);
  CHECK(lsd(a, b) == lsd(b, a));
  // Two frames: sqrt((9 + 16) / 2) and 0.
  Grid z(2, 2), p(2, 2);
  p(0, 0) = 3.0f;
  p(1, 0) = 4.0f;
  CHECK(lsd(z, p) == Approx(std::sqrt(12.5) / 2.0).epsilon(1e-12));
  CHECK_THROWS_AS(lsd(a, Grid(6, 8)), InvalidInput);
}

TEST_CASE("lsd on waveforms and mels") {
  const auto s = testing::gaussian_noise(16000, 4, 0.1);
  CHECK(lsd_stft(s, s) == 0.0);
  std::vector<float> louder(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) louder[i] = 10.0f * s[i];
  // A 10x gain is +1 in log10 magnitude wherever the floor is inactive.
  CHECK(lsd_stft(louder, s) == Approx(1.0).margin(0.01));
  const auto m = mel_spectrogram(s);
  CHECK(lsd_mel(m, m) == 0.0);
  auto norm = normalize(m, NormStats::from_max(2.0));
  CHECK_THROWS_AS(log10_mel(norm), InvalidInput);
  // log10_mel is the natural-log mel divided by ln 10.
  const auto l = log10_mel(m);
  CHECK(l(5, 7) == Approx(m.values(5, 7) / std::log(10.0)).epsilon(1e-6));
}

TEST_CASE("ssim examples and oracle") {
  const Grid a = random_grid(12, 15, 5);
  const Grid b = random_grid(12, 15, 6);
  CHECK(ssim(a, a) == Approx(1.0).epsilon(1e-12));
  CHECK(ssim(a, b) == Approx(ssim(b, a)).epsilon(1e-12));
  CHECK(ssim(a, b) == Approx(ssim_oracle(a, b)).epsilon(1e-9));
  Grid a_neg = a;
  for (float& v : a_neg.values()) v = -v;
  CHECK(ssim(a, a_neg) == Approx(ssim_oracle(a, a_neg)).epsilon(1e-9));

  // A zero-sum 7x7 tile repeated over the grid makes every window zero-mean
  // and a permutation of the tile, so ssim(X, -X) = (c2 - 2v) / (c2 + 2v).
  Grid tile = random_grid(7, 7, 9);
  double sum = 0.0;
  for (float v : tile.values()) sum += v;
  for (float& v : tile.values()) v = static_cast<float>(v - sum / 49.0);
  Grid x(16, 20), neg(16, 20);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 20; ++c) {
      x(r, c) = tile(r % 7, c % 7);
      neg(r, c) = -x(r, c);
    }
  double mean = 0.0, var = 0.0;
  for (float v : tile.values()) mean += v / 49.0;
  for (float v : tile.values()) var += (v - mean) * (v - mean) / 49.0;
  const double c2 = 0.06 * 0.06;
  const double s_neg = ssim(x, neg);
  CHECK(s_neg < 0.0);
  CHECK(s_neg >= -1.0);
  CHECK(s_neg == Approx((c2 - 2 * var) / (c2 + 2 * var)).epsilon(1e-5));
  CHECK_THROWS_AS(ssim(Grid(6, 20), Grid(6, 20)), InvalidInput);
}

TEST_CASE("sisnr scale invariance and orthogonal noise") {
  const auto s = testing::gaussian_noise(8000, 7, 0.3);
  const double top = sisnr(s, s);
  std::vector<float> s2(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) s2[i] = 2.0f * s[i];
  CHECK(sisnr(s2, s) == top);
  const auto noisy = testing::gaussian_noise(8000, 8, 0.1);
  std::vector<double> base(noisy.begin(), noisy.end());
  for (std::size_t i = 0; i < base.size(); ++i) base[i] += s[i];
  const std::vector<double> ref(s.begin(), s.end());
  const double b0 = sisnr(base, ref);
  for (double a : {0.5, 3.0}) {
    std::vector<double> scaled(base);
    for (double& v : scaled) v *= a;
    CHECK(std::abs(sisnr(scaled, ref) - b0) < 1e-6);
  }

  // Orthogonal noise at one tenth of the signal energy.
  std::vector<double> n(ref.size());
  const auto raw = testing::gaussian_noise(ref.size(), 9, 1.0);
  double dot = 0, ss = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    dot += raw[i] * ref[i];
    ss += ref[i] * ref[i];
  }
  double nn = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    n[i] = raw[i] - dot / ss * ref[i];
    nn += n[i] * n[i];
  }
  std::vector<double> est(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) est[i] = ref[i] + n[i] * std::sqrt(0.1 * ss / nn);
  CHECK(sisnr(est, ref) == Approx(10.0).margin(0.01));

  CHECK_THROWS_AS(sisnr(s, std::vector<float>(s.size(), 0.0f)), InvalidInput);
  CHECK_THROWS_AS(sisnr(s, std::vector<float>(3, 1.0f)), InvalidInput);
}

TEST_CASE("sispnr is magnitude-domain sisnr") {
  const auto s = testing::gaussian_noise(16000, 10, 0.2);
  std::vector<float> s2(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) s2[i] = 2.0f * s[i];
  CHECK(sispnr(s, s) == sisnr(s, s));
  CHECK(sispnr(s2, s) == sispnr(s, s));
  std::vector<float> delayed(s.size(), 0.0f);
  for (std::size_t i = 4; i < s.size(); ++i) delayed[i] = s[i - 4];
  CHECK(sispnr(delayed, s) > sisnr(delayed, s) + 10.0);
}

TEST_CASE("report aggregates are exact means; identity environment has zero unprocessed LSD") {
  testing::TempDir dir("eval");
  CorpusSource src;
  src.n_utterances = 6;
  src.utterances_per_speaker = 1;
  src.seconds = 1.0;
  src.test_fraction = 0.5;
  auto envs = std::vector<EnvironmentSpec>{EnvironmentSpec::clean(), EnvironmentSpec::clean()};
  envs[1].env_id = "copy";
  generate_corpus(src, envs, dir.path(), 3);
  const CorpusData data(read_manifest(dir.path()), dir.path(), Split::test);
  const auto stats = data.fit_norm_stats();
  const TransferFn passthrough = [](const MelSpectrogram& x, const MelSpectrogram&, std::uint64_t) { return x; };
  EvalOptions opt;
  opt.griffin_lim_iters = 4;
  const auto report = evaluate_testcase(data, Task::env_to_clean, 5, 11, stats, passthrough, opt);
  CHECK(report.rows_for(kSystemModel).size() == 5);
  CHECK(report.rows_for(kSystemUnprocessed).size() == 5);
  CHECK(report.rows_for(kSystemTargetMel).size() == 5);
  for (const auto& row : report.rows_for(kSystemUnprocessed)) {
    CHECK(row.content_env == "copy");
    CHECK(row.target_env == "clean");
    CHECK(row.lsd_mel == Approx(0.0).margin(1e-12));
    CHECK(row.sisnr.has_value());
  }
  for (const std::string sys : {kSystemModel, kSystemUnprocessed, kSystemTargetMel}) {
    const auto rows = report.rows_for(sys);
    double lsd_sum = 0, ssim_sum = 0;
    for (const auto& r : rows) {
      lsd_sum += r.lsd_mel;
      ssim_sum += r.ssim;
    }
    const auto agg = report.aggregate(sys);
    CHECK(agg.count == rows.size());
    CHECK(agg.lsd_mel == Approx(lsd_sum / rows.size()).epsilon(1e-12));
    CHECK(agg.ssim == Approx(ssim_sum / rows.size()).epsilon(1e-12));
  }
  // Rows are sorted by pair id.
  for (std::size_t i = 1; i < report.rows.size(); ++i) CHECK(report.rows[i - 1].pair_id <= report.rows[i].pair_id);

  report.write_tsv(dir / "eval.tsv");
  std::ifstream in(dir / "eval.tsv");
  std::string header;
  std::getline(in, header);
  CHECK(header.find("pesq_wb") != std::string::npos);
  CHECK(header.find("lsd_mel") != std::string::npos);

  const auto clean_to_env = evaluate_testcase(data, Task::clean_to_env, 3, 11, stats, passthrough, opt);
  for (const auto& r : clean_to_env.rows) CHECK_FALSE(r.sisnr.has_value());
  CHECK_THROWS_AS(evaluate_testcase(data, Task::env_to_clean, 0, 1, stats, passthrough, opt), InvalidInput);
}

TEST_CASE("cosine similarity, kNN and separation on a constructed table") {
  const std::vector<float> x{1, 0}, y{0, 2}, z{-3, 0};
  CHECK(cosine_similarity(x, y) == Approx(0.0).margin(1e-12));
  CHECK(cosine_similarity(x, z) == Approx(-1.0));
  CHECK(cosine_similarity(x, x) == Approx(1.0));
  const auto t = clustered_table();
  CHECK(knn_accuracy(t, 5) == 1.0);
  const auto sep = cosine_separation(t);
  CHECK(sep.intra > 0.9);
  CHECK(sep.margin() > 0.5);

  // Shuffled labels drop to chance territory.
  auto shuffled = t;
  for (std::size_t i = 0; i < shuffled.rows.size(); ++i) shuffled.rows[i].env_id = std::string(1, static_cast<char>('a' + i % 3));
  CHECK(knn_accuracy(shuffled, 5) < 0.7);
}

TEST_CASE("projection and embedding table round trip") {
  auto t = clustered_table();
  project_2d(t);
  for (const auto& r : t.rows) REQUIRE(r.projection.has_value());
  testing::TempDir dir("emb");
  write_embeddings(dir / "e.tsv", t);
  const auto back = read_embeddings(dir / "e.tsv");
  CHECK(back.dim == 4);
  REQUIRE(back.rows.size() == t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    CHECK(back.rows[i].env_id == t.rows[i].env_id);
    for (std::size_t d = 0; d < 4; ++d) CHECK(back.rows[i].z[d] == Approx(t.rows[i].z[d]).epsilon(1e-6));
    CHECK((*back.rows[i].projection)[0] == Approx((*t.rows[i].projection)[0]).margin(1e-6));
  }
  // Points on a line have no second component.
  EmbeddingTable line;
  line.dim = 3;
  for (int k = 0; k < 5; ++k) line.rows.push_back({"u", "e", {float(k), float(2 * k), float(-k)}, std::nullopt});
  project_2d(line);
  for (const auto& r : line.rows) CHECK((*r.projection)[1] == Approx(0.0).margin(1e-5));
}

TEST_CASE("exported embeddings cover every clip deterministically") {
  testing::TempDir dir("emb");
  CorpusSource src;
  src.n_utterances = 4;
  src.utterances_per_speaker = 1;
  src.seconds = 1.0;
  generate_corpus(src, default_environments(2, 1), dir.path(), 5);
  const CorpusData data(read_manifest(dir.path()), dir.path());
  torch::manual_seed(1);
  auto enc = make_encoder(ModelConfig{});
  const auto stats = data.fit_norm_stats();
  const auto a = export_embeddings(*enc, data, stats);
  const auto b = export_embeddings(*enc, data, stats);
  CHECK(a.rows.size() == data.keys().size());
  CHECK(a.dim == 80);
  for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].z == b.rows[i].z);
}
