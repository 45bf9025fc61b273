#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "envtransfer/audio.hpp"
#include "envtransfer/dsp.hpp"
#include "envtransfer/environment.hpp"

namespace envtransfer {

enum class Split { train, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string utterance_id;
  std::string env_id;
  std::string speaker_id;
  Split split = Split::train;
  std::filesystem::path relpath;
};

/// Paired corpus: every utterance rendered in every listed environment,
/// always including "clean".
struct CorpusManifest {
  std::vector<ManifestEntry> entries;
  std::vector<EnvironmentSpec> environments;

  /// Throws InvalidInput on duplicate (utterance, env) pairs, duplicate
  /// env ids, or utterances missing their clean rendering.
  void validate() const;
};

inline constexpr const char* kManifestFile = "manifest.tsv";
inline constexpr const char* kEnvironmentsFile = "environments.json";

void write_manifest(const std::filesystem::path& dir, const CorpusManifest& manifest);
/// Reads manifest.tsv (+ environments.json when present). When the directory
/// has no manifest the `<dir>/<env_id>/<utterance_id>.wav` layout is scanned.
CorpusManifest read_manifest(const std::filesystem::path& dir);
/// Builds a manifest from the on-disk layout alone. Speaker ids are the
/// utterance id up to the first '_'; the last fifth of speakers (sorted)
/// is tagged as test.
CorpusManifest scan_layout(const std::filesystem::path& dir);

/// Clean "clean" environment followed by `n - 1` distinct degraded ones.
std::vector<EnvironmentSpec> default_environments(std::size_t n, std::uint64_t seed);

struct CorpusSource {
  /// Directory of clean WAVs; empty selects the builtin speech surrogate.
  std::filesystem::path clean_dir;
  std::size_t n_utterances = 50;
  std::size_t utterances_per_speaker = 5;
  double test_fraction = 0.2;
  double seconds = 4.0;
};

/// Renders every clean utterance through every environment into
/// `<out_dir>/<env_id>/<utterance_id>.wav` and writes the manifest.
CorpusManifest generate_corpus(const CorpusSource& source, const std::vector<EnvironmentSpec>& envs,
                               const std::filesystem::path& out_dir, std::uint64_t seed);

enum class Task { env_to_clean, clean_to_env, env_to_env, train };
std::string to_string(Task t);
Task task_from_string(const std::string& s);

/// Audio and unnormalized log-mels of a manifest, segmented to 4 s.
class CorpusData {
 public:
  CorpusData(CorpusManifest manifest, std::filesystem::path root,
             std::optional<Split> split = std::nullopt, double seconds = 4.0);

  const CorpusManifest& manifest() const noexcept { return manifest_; }
  const std::filesystem::path& root() const noexcept { return root_; }
  const AudioSegment& audio(const std::string& utt, const std::string& env) const;
  const MelSpectrogram& mel(const std::string& utt, const std::string& env) const;
  bool has(const std::string& utt, const std::string& env) const;

  const std::vector<std::string>& env_ids() const noexcept { return env_ids_; }
  const std::vector<std::string>& utterances_in(const std::string& env) const;
  const std::string& env_of_entry(std::size_t i) const { return keys_[i].second; }
  /// (utterance, env) keys in manifest order.
  const std::vector<std::pair<std::string, std::string>>& keys() const noexcept { return keys_; }

  /// min fixed at the log floor, max over every loaded mel cell.
  NormStats fit_norm_stats() const;

 private:
  CorpusManifest manifest_;
  std::filesystem::path root_;
  std::vector<std::pair<std::string, std::string>> keys_;
  std::map<std::pair<std::string, std::string>, std::pair<AudioSegment, MelSpectrogram>> items_;
  std::map<std::string, std::vector<std::string>> by_env_;
  std::vector<std::string> env_ids_;
};

struct TripletIds {
  std::string utterance_id;  // shared by X and Y
  std::string x_env;         // "augmented" when X came from augment_content
  std::string y_env;         // shared by R and Y
  std::string r_utterance_id;
  bool augmented = false;
};

/// Content X, reference R and target Y, all unnormalized.
struct Triplet {
  MelSpectrogram x, r, y;
  TripletIds ids;
};

struct SamplerOptions {
  double p_aug = 0.5;
  std::pair<double, double> snr_range{5.0, 30.0};
  /// Precomputed augmented variants per utterance; 0 renders on every draw.
  std::size_t bank_variants = 0;
  std::uint64_t pool_seed = 0xA0612;
};

/// Draws triplets under the pairing rules: X and Y share the utterance, R
/// and Y share the environment, and R is always a different utterance.
class TripletSampler {
 public:
  TripletSampler(const CorpusData& data, SamplerOptions options = {});

  Triplet sample(Task task, std::uint64_t seed) const;
  /// Enhancer training pair: x is a degraded or augmented rendering, y the
  /// clean rendering of the same utterance; r is left empty.
  Triplet content_pair(std::uint64_t seed) const;
  const SamplerOptions& options() const noexcept { return options_; }

 private:
  MelSpectrogram augmented_mel(const std::string& utt, std::mt19937_64& rng) const;

  const CorpusData& data_;
  SamplerOptions options_;
  AugmentationPools pools_;
  std::map<std::string, std::vector<MelSpectrogram>> bank_;
};

Triplet sample_triplet(const CorpusData& data, Task task, std::uint64_t seed,
                       const SamplerOptions& options = {});

}  // namespace envtransfer
