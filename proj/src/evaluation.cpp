#include "envtransfer/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <Eigen/Dense>

#include "envtransfer/environment.hpp"
#include "envtransfer/errors.hpp"
#include "envtransfer/training.hpp"

namespace envtransfer {
namespace fs = std::filesystem;

namespace {

std::vector<float> fit_length(std::span<const float> x, std::size_t n) {
  std::vector<float> out(n, 0.0f);
  std::copy_n(x.begin(), std::min(n, x.size()), out.begin());
  return out;
}

MelSpectrogram fit_frames(const MelSpectrogram& m, std::size_t frames) {
  MelSpectrogram out = m;
  out.values = Grid(m.n_mels(), frames);
  for (std::size_t r = 0; r < m.n_mels(); ++r) {
    for (std::size_t c = 0; c < frames; ++c) {
      out.values(r, c) = m.values(r, std::min(c, m.n_frames() - 1));
    }
  }
  return out;
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "NA";
  std::ostringstream s;
  s << std::setprecision(6) << *v;
  return s.str();
}

template <typename Get>
std::optional<double> mean_of(const std::vector<EvalRow>& rows, Get get) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (auto v = get(r)) {
      acc += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return acc / static_cast<double>(n);
}

}  // namespace

std::vector<EvalRow> EvalReport::rows_for(const std::string& system) const {
  std::vector<EvalRow> out;
  for (const auto& r : rows) {
    if (r.system == system) out.push_back(r);
  }
  return out;
}

EvalAggregate EvalReport::aggregate(const std::string& system) const {
  const auto rs = rows_for(system);
  EvalAggregate a;
  a.count = rs.size();
  if (rs.empty()) return a;
  a.lsd_stft = mean_of(rs, [](const EvalRow& r) { return r.lsd_stft; });
  a.lsd_mel = *mean_of(rs, [](const EvalRow& r) { return std::optional<double>(r.lsd_mel); });
  a.ssim = *mean_of(rs, [](const EvalRow& r) { return std::optional<double>(r.ssim); });
  a.sispnr = mean_of(rs, [](const EvalRow& r) { return r.sispnr; });
  a.sisnr = mean_of(rs, [](const EvalRow& r) { return r.sisnr; });
  return a;
}

std::vector<std::string> EvalReport::systems() const {
  std::set<std::string> s;
  for (const auto& r : rows) s.insert(r.system);
  return {s.begin(), s.end()};
}

void EvalReport::write_tsv(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "pair_id\tsystem\tutterance_id\tcontent_env\treference_utterance_id\ttarget_env\t"
         "lsd_stft\tlsd_mel\tssim\tsispnr\tsisnr\tpesq_wb\n";
  for (const auto& r : rows) {
    out << r.pair_id << '\t' << r.system << '\t' << r.utterance_id << '\t' << r.content_env << '\t'
        << r.reference_utterance_id << '\t' << r.target_env << '\t' << fmt(r.lsd_stft) << '\t'
        << fmt(r.lsd_mel) << '\t' << fmt(r.ssim) << '\t' << fmt(r.sispnr) << '\t' << fmt(r.sisnr) << "\tNA\n";
  }
  out << "\n# summary test_case=" << to_string(test_case) << " pairs=" << n_pairs << '\n';
  out << summary();
  if (!out) throw IoError("failed writing " + path.string());
}

std::string EvalReport::summary() const {
  std::ostringstream s;
  s << "# system\tcount\tlsd_stft\tlsd_mel\tssim\tsispnr\tsisnr\n";
  for (const auto& sys : systems()) {
    const auto a = aggregate(sys);
    s << "# " << sys << '\t' << a.count << '\t' << fmt(a.lsd_stft) << '\t' << fmt(a.lsd_mel) << '\t'
      << fmt(a.ssim) << '\t' << fmt(a.sispnr) << '\t' << fmt(a.sisnr) << '\n';
  }
  return s.str();
}

EvalReport evaluate_testcase(const CorpusData& data, Task test_case, std::size_t n_pairs, std::uint64_t seed,
                             const NormStats& stats, const TransferFn& system, const EvalOptions& options) {
  if (n_pairs == 0) throw InvalidInput("evaluation needs at least one pair");
  if (test_case == Task::train) throw InvalidInput("'train' is not an evaluation test case");
  SamplerOptions sopt;
  sopt.p_aug = 0.0;
  TripletSampler sampler(data, sopt);

  EvalReport report;
  report.test_case = test_case;
  report.n_pairs = n_pairs;
  const bool waveforms = options.griffin_lim_iters > 0;
  const bool to_clean = test_case == Task::env_to_clean;

  for (std::size_t i = 0; i < n_pairs; ++i) {
    char id[24];
    std::snprintf(id, sizeof id, "p%04zu", i);
    const auto pair_seed = derive_seed(seed, std::string("pair/") + id);
    const Triplet t = sampler.sample(test_case, pair_seed);
    const auto& y_audio = data.audio(t.ids.utterance_id, t.ids.y_env).samples;
    const auto& x_audio = data.audio(t.ids.utterance_id, t.ids.x_env).samples;
    const auto y_norm = normalize(t.y, stats);

    auto base_row = [&](const char* sys) {
      EvalRow r;
      r.pair_id = id;
      r.system = sys;
      r.utterance_id = t.ids.utterance_id;
      r.content_env = t.ids.x_env;
      r.reference_utterance_id = t.ids.r_utterance_id;
      r.target_env = t.ids.y_env;
      return r;
    };
    // Scores a candidate mel (and optional waveform) against the ground truth.
    auto score = [&](EvalRow& row, const MelSpectrogram& mel, const std::vector<float>* wave) {
      row.lsd_mel = lsd_mel(mel, t.y);
      row.ssim = ssim(normalize(mel, stats).values, y_norm.values);
      if (wave) {
        const auto w = fit_length(*wave, y_audio.size());
        row.lsd_stft = lsd_stft(w, y_audio);
        if (to_clean) {
          row.sisnr = sisnr(w, y_audio);
          row.sispnr = sispnr(w, y_audio);
        }
      }
    };

    if (system) {
      EvalRow row = base_row(kSystemModel);
      const auto out = denormalize(system(normalize(t.x, stats), normalize(t.r, stats),
                                          derive_seed(pair_seed, "sample")),
                                   stats);
      if (out.n_frames() != t.y.n_frames()) throw InvalidInput("system output length differs from the target");
      std::vector<float> wave;
      if (waveforms) wave = invert_mel(out, options.griffin_lim_iters).samples;
      score(row, out, waveforms ? &wave : nullptr);
      report.rows.push_back(std::move(row));
    }
    {
      EvalRow row = base_row(kSystemUnprocessed);
      std::vector<float> wave(x_audio.begin(), x_audio.end());
      score(row, t.x, waveforms ? &wave : nullptr);
      report.rows.push_back(std::move(row));
    }
    if (options.include_target_mel && waveforms) {
      EvalRow row = base_row(kSystemTargetMel);
      const auto wave = invert_mel(t.y, options.griffin_lim_iters).samples;
      const auto remel = fit_frames(mel_spectrogram(fit_length(wave, y_audio.size())), t.y.n_frames());
      score(row, remel, &wave);
      report.rows.push_back(std::move(row));
    }
  }
  std::stable_sort(report.rows.begin(), report.rows.end(), [](const EvalRow& a, const EvalRow& b) {
    return std::tie(a.pair_id, a.system) < std::tie(b.pair_id, b.system);
  });
  return report;
}

EvalReport evaluate_testcase(LoadedModel& model, const CorpusData& data, Task test_case, std::size_t n_pairs,
                             std::uint64_t seed, const EvalOptions& options) {
  TransferFn fn = [&model](const MelSpectrogram& x, const MelSpectrogram& r, std::uint64_t s) {
    return transfer_mel(model.model, model.info.schedule, x, r, s);
  };
  return evaluate_testcase(data, test_case, n_pairs, seed, model.info.stats, fn, options);
}

// ---------------------------------------------------------------- embeddings

EmbeddingTable export_embeddings(EnvironmentEncoderImpl& encoder, const CorpusData& data, const NormStats& stats,
                                 bool with_projection) {
  encoder.eval();
  EmbeddingTable table;
  for (const auto& [utt, env] : data.keys()) {
    EmbeddingRow row{utt, env, embed(encoder, normalize(data.mel(utt, env), stats)), std::nullopt};
    table.dim = row.z.size();
    table.rows.push_back(std::move(row));
  }
  if (with_projection && table.rows.size() >= 2) project_2d(table);
  return table;
}

void project_2d(EmbeddingTable& table) {
  const auto n = static_cast<Eigen::Index>(table.rows.size());
  const auto d = static_cast<Eigen::Index>(table.dim);
  if (n < 2 || d < 2) throw InvalidInput("projection needs at least two rows of dimension >= 2");
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = table.rows[static_cast<std::size_t>(i)].z[static_cast<std::size_t>(j)];
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Eigen::MatrixXd basis(d, 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
    Eigen::Index idx;
    v.cwiseAbs().maxCoeff(&idx);
    if (v(idx) < 0) v = -v;  // fix the sign so exports are reproducible
    basis.col(k) = v;
  }
  const Eigen::MatrixXd p = x * basis;
  for (Eigen::Index i = 0; i < n; ++i) table.rows[static_cast<std::size_t>(i)].projection = {{p(i, 0), p(i, 1)}};
}

void write_embeddings(const fs::path& path, const EmbeddingTable& table) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  const bool proj = !table.rows.empty() && table.rows.front().projection.has_value();
  out << "utterance_id\tenv_id";
  for (std::size_t k = 0; k < table.dim; ++k) out << "\tz" << k;
  if (proj) out << "\tpc1\tpc2";
  out << '\n';
  out << std::setprecision(9);
  for (const auto& r : table.rows) {
    out << r.utterance_id << '\t' << r.env_id;
    for (float v : r.z) out << '\t' << v;
    if (proj) out << '\t' << (*r.projection)[0] << '\t' << (*r.projection)[1];
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

EmbeddingTable read_embeddings(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput(path.string() + " is empty");
  std::vector<std::string> header;
  {
    std::istringstream s(line);
    std::string f;
    while (std::getline(s, f, '\t')) header.push_back(f);
  }
  if (header.size() < 3 || header[0] != "utterance_id" || header[1] != "env_id") {
    throw InvalidInput(path.string() + ": not an embedding table");
  }
  EmbeddingTable table;
  const bool proj = header.back() == "pc2";
  table.dim = header.size() - 2 - (proj ? 2 : 0);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream s(line);
    EmbeddingRow row;
    std::getline(s, row.utterance_id, '\t');
    std::getline(s, row.env_id, '\t');
    std::string f;
    while (std::getline(s, f, '\t')) row.z.push_back(std::stof(f));
    if (proj) {
      if (row.z.size() != table.dim + 2) throw InvalidInput(path.string() + ": ragged row");
      row.projection = {{row.z[table.dim], row.z[table.dim + 1]}};
      row.z.resize(table.dim);
    }
    if (row.z.size() != table.dim) throw InvalidInput(path.string() + ": ragged row");
    table.rows.push_back(std::move(row));
  }
  return table;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw InvalidInput("cosine similarity of different dimensions");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

double knn_accuracy(const EmbeddingTable& table, int k) {
  const auto n = table.rows.size();
  if (n < 2 || k < 1) throw InvalidInput("k-NN needs at least two rows and k >= 1");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> sims;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) sims.emplace_back(cosine_similarity(table.rows[i].z, table.rows[j].z), j);
    }
    const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), sims.size());
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(kk), sims.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    std::map<std::string, std::pair<int, double>> votes;
    for (std::size_t m = 0; m < kk; ++m) {
      auto& v = votes[table.rows[sims[m].second].env_id];
      v.first += 1;
      v.second += sims[m].first;
    }
    const auto best = std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) {
      return std::tie(a.second.first, a.second.second) < std::tie(b.second.first, b.second.second);
    });
    if (best->first == table.rows[i].env_id) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

CosineSeparation cosine_separation(const EmbeddingTable& table) {
  double intra = 0, inter = 0;
  std::size_t ni = 0, ne = 0;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    for (std::size_t j = i + 1; j < table.rows.size(); ++j) {
      const double c = cosine_similarity(table.rows[i].z, table.rows[j].z);
      if (table.rows[i].env_id == table.rows[j].env_id) {
        intra += c;
        ++ni;
      } else {
        inter += c;
        ++ne;
      }
    }
  }
  if (ni == 0 || ne == 0) throw InvalidInput("cosine separation needs repeated and distinct environments");
  return {intra / static_cast<double>(ni), inter / static_cast<double>(ne)};
}

}  // namespace envtransfer
