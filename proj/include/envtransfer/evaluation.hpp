#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "envtransfer/checkpoint.hpp"
#include "envtransfer/corpus.hpp"
#include "envtransfer/metrics.hpp"

namespace envtransfer {

/// System labels used in reports.
inline constexpr const char* kSystemModel = "model";
inline constexpr const char* kSystemUnprocessed = "unprocessed";
inline constexpr const char* kSystemTargetMel = "target_mel";

struct EvalRow {
  std::string pair_id;
  std::string system;
  std::string utterance_id;
  std::string content_env;
  std::string reference_utterance_id;
  std::string target_env;
  std::optional<double> lsd_stft;  // needs a waveform
  double lsd_mel = 0.0;
  double ssim = 0.0;
  std::optional<double> sispnr;
  std::optional<double> sisnr;
};

struct EvalAggregate {
  std::size_t count = 0;
  std::optional<double> lsd_stft;
  double lsd_mel = 0.0;
  double ssim = 0.0;
  std::optional<double> sispnr;
  std::optional<double> sisnr;
};

struct EvalReport {
  Task test_case = Task::env_to_clean;
  std::size_t n_pairs = 0;
  std::vector<EvalRow> rows;  // sorted by (pair_id, system)

  std::vector<EvalRow> rows_for(const std::string& system) const;
  /// Exact means of the system's rows.
  EvalAggregate aggregate(const std::string& system) const;
  std::vector<std::string> systems() const;

  /// Tab-separated rows; the pesq_wb column is reserved and always "NA".
  void write_tsv(const std::filesystem::path& path) const;
  std::string summary() const;
};

/// Normalized X and R in, normalized Y out.
using TransferFn = std::function<MelSpectrogram(const MelSpectrogram& x, const MelSpectrogram& r, std::uint64_t seed)>;

struct EvalOptions {
  /// Griffin-Lim iterations for the surrogate waveforms; 0 skips STFT-domain
  /// LSD and the waveform metrics.
  int griffin_lim_iters = 32;
  bool include_target_mel = true;
};

/// Samples n_pairs triplets of `test_case` from `data`, runs `system` (may be
/// empty: baseline rows only) and scores against the paired ground truth.
EvalReport evaluate_testcase(const CorpusData& data, Task test_case, std::size_t n_pairs, std::uint64_t seed,
                             const NormStats& stats, const TransferFn& system, const EvalOptions& options = {});
EvalReport evaluate_testcase(LoadedModel& model, const CorpusData& data, Task test_case, std::size_t n_pairs,
                             std::uint64_t seed, const EvalOptions& options = {});

// ---------------------------------------------------------------- embeddings

struct EmbeddingRow {
  std::string utterance_id;
  std::string env_id;
  std::vector<float> z;
  std::optional<std::array<double, 2>> projection;
};

struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<EmbeddingRow> rows;
};

/// One row per clip of `data`, in manifest order.
EmbeddingTable export_embeddings(EnvironmentEncoderImpl& encoder, const CorpusData& data, const NormStats& stats,
                                 bool with_projection = true);
/// Fills each row's 2-D principal-component projection.
void project_2d(EmbeddingTable& table);

void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable read_embeddings(const std::filesystem::path& path);

double cosine_similarity(std::span<const float> a, std::span<const float> b);
/// Leave-one-out k-nearest-neighbour accuracy under cosine similarity.
/// Vote ties go to the label with the larger summed similarity.
double knn_accuracy(const EmbeddingTable& table, int k = 5);

struct CosineSeparation {
  double intra = 0.0;  // mean over distinct same-environment pairs
  double inter = 0.0;  // mean over different-environment pairs
  double margin() const noexcept { return intra - inter; }
};
CosineSeparation cosine_separation(const EmbeddingTable& table);

}  // namespace envtransfer
