#include "envtransfer/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "envtransfer/errors.hpp"

namespace envtransfer {
namespace fs = std::filesystem;

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw InvalidInput("unknown split '" + s + "'");
}

std::string to_string(Task t) {
  switch (t) {
    case Task::env_to_clean: return "env_to_clean";
    case Task::clean_to_env: return "clean_to_env";
    case Task::env_to_env: return "env_to_env";
    case Task::train: return "train";
  }
  return "train";
}

Task task_from_string(const std::string& s) {
  if (s == "env_to_clean" || s == "env-to-clean") return Task::env_to_clean;
  if (s == "clean_to_env" || s == "clean-to-env") return Task::clean_to_env;
  if (s == "env_to_env" || s == "env-to-env") return Task::env_to_env;
  if (s == "train") return Task::train;
  throw InvalidInput("unknown task '" + s + "'");
}

void CorpusManifest::validate() const {
  std::set<std::string> env_ids;
  for (const auto& e : environments) {
    e.validate();
    if (!env_ids.insert(e.env_id).second) throw InvalidInput("duplicate env_id '" + e.env_id + "'");
  }
  std::set<std::pair<std::string, std::string>> seen;
  std::set<std::string> utts, clean_utts;
  for (const auto& e : entries) {
    if (!seen.insert({e.utterance_id, e.env_id}).second) {
      throw InvalidInput("duplicate manifest entry (" + e.utterance_id + ", " + e.env_id + ")");
    }
    utts.insert(e.utterance_id);
    if (e.env_id == "clean") clean_utts.insert(e.utterance_id);
  }
  for (const auto& u : utts) {
    if (!clean_utts.count(u)) throw InvalidInput("utterance '" + u + "' has no clean rendering");
  }
}

void write_manifest(const fs::path& dir, const CorpusManifest& manifest) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream os(dir / kManifestFile);
  if (!os) throw IoError("cannot write " + (dir / kManifestFile).string());
  os << "utterance_id\tenv_id\tspeaker_id\tsplit\trelpath\n";
  for (const auto& e : manifest.entries) {
    os << e.utterance_id << '\t' << e.env_id << '\t' << e.speaker_id << '\t' << to_string(e.split)
       << '\t' << e.relpath.generic_string() << '\n';
  }
  nlohmann::json envs = manifest.environments;
  std::ofstream js(dir / kEnvironmentsFile);
  if (!js) throw IoError("cannot write " + (dir / kEnvironmentsFile).string());
  js << envs.dump(2) << '\n';
  if (!os || !js) throw IoError("short write in " + dir.string());
}

CorpusManifest read_manifest(const fs::path& dir) {
  if (!fs::exists(dir / kManifestFile)) return scan_layout(dir);
  std::ifstream is(dir / kManifestFile);
  if (!is) throw IoError("cannot open " + (dir / kManifestFile).string());
  CorpusManifest m;
  std::string line;
  std::getline(is, line);
  if (line.rfind("utterance_id\t", 0) != 0) throw IoError("manifest has an unexpected header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, '\t');) cols.push_back(c);
    if (cols.size() != 5) throw IoError("manifest row with " + std::to_string(cols.size()) + " columns");
    m.entries.push_back({cols[0], cols[1], cols[2], split_from_string(cols[3]), fs::path(cols[4])});
  }
  if (fs::exists(dir / kEnvironmentsFile)) {
    std::ifstream js(dir / kEnvironmentsFile);
    m.environments = nlohmann::json::parse(js).get<std::vector<EnvironmentSpec>>();
  }
  m.validate();
  return m;
}

CorpusManifest scan_layout(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  CorpusManifest m;
  std::set<std::string> speakers;
  for (const auto& env_dir : fs::directory_iterator(dir)) {
    if (!env_dir.is_directory()) continue;
    for (const auto& f : fs::directory_iterator(env_dir.path())) {
      if (f.path().extension() != ".wav") continue;
      const std::string utt = f.path().stem().string();
      const std::string speaker = utt.substr(0, utt.find('_'));
      speakers.insert(speaker);
      m.entries.push_back({utt, env_dir.path().filename().string(), speaker, Split::train,
                           fs::relative(f.path(), dir)});
    }
  }
  if (m.entries.empty()) throw IoError("no <env>/<utt>.wav files under " + dir.string());
  std::vector<std::string> sorted(speakers.begin(), speakers.end());
  const std::size_t n_test = sorted.size() >= 2 ? std::max<std::size_t>(1, sorted.size() / 5) : 0;
  const std::set<std::string> test(sorted.end() - static_cast<std::ptrdiff_t>(n_test), sorted.end());
  for (auto& e : m.entries) {
    if (test.count(e.speaker_id)) e.split = Split::test;
  }
  std::sort(m.entries.begin(), m.entries.end(), [](const auto& a, const auto& b) {
    return std::tie(a.env_id, a.utterance_id) < std::tie(b.env_id, b.utterance_id);
  });
  m.validate();
  return m;
}

std::vector<EnvironmentSpec> default_environments(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw InvalidInput("need at least two environments including clean");
  std::vector<EnvironmentSpec> envs{EnvironmentSpec::clean()};
  const std::vector<EnvironmentSpec> presets{
      {"room_white", {{200.0, -6.0, 0.7}, {4000.0, 6.0, 1.0}}, 0.6, 0.5, NoiseKind::white, 10.0},
      {"box_pink", {{800.0, 8.0, 1.5}, {6000.0, -10.0, 0.8}}, 0.25, 0.7, NoiseKind::pink, 5.0},
      {"hall_babble", {{3000.0, -8.0, 0.7}}, 0.9, 0.4, NoiseKind::babble, 8.0},
  };
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (std::size_t i = 1; i < n; ++i) {
    if (i - 1 < presets.size()) {
      envs.push_back(presets[i - 1]);
      continue;
    }
    EnvironmentSpec e;
    e.env_id = "env" + std::to_string(i);
    const int bands = 1 + static_cast<int>(uni(rng) * 3);
    for (int b = 0; b < bands; ++b) {
      e.eq.push_back({150.0 * std::pow(40.0, uni(rng)), -12.0 + 24.0 * uni(rng), 0.5 + 2.0 * uni(rng)});
    }
    e.rir_rt60 = 0.1 + 0.9 * uni(rng);
    e.rir_direct_ratio = 0.3 + 0.6 * uni(rng);
    e.noise_kind = static_cast<NoiseKind>(1 + static_cast<int>(uni(rng) * 3) % 3);
    e.snr_db = 0.0 + 20.0 * uni(rng);
    envs.push_back(e);
  }
  return envs;
}

CorpusManifest generate_corpus(const CorpusSource& source, const std::vector<EnvironmentSpec>& envs,
                               const fs::path& out_dir, std::uint64_t seed) {
  if (envs.size() < 2) throw InvalidInput("need at least two environments");
  if (std::none_of(envs.begin(), envs.end(), [](const auto& e) { return e.env_id == "clean"; })) {
    throw InvalidInput("environment list must include \"clean\"");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create " + out_dir.string());

  struct Clean {
    std::string utt, speaker;
    AudioSegment audio;
  };
  std::vector<Clean> cleans;
  if (source.clean_dir.empty()) {
    const std::size_t per = std::max<std::size_t>(1, source.utterances_per_speaker);
    const auto n_samples = static_cast<std::size_t>(std::llround(source.seconds * kSampleRate));
    for (std::size_t u = 0; u < source.n_utterances; ++u) {
      const std::size_t spk = u / per;
      std::mt19937_64 voice_rng(derive_seed(seed, "speaker" + std::to_string(spk)));
      std::uniform_real_distribution<double> pitch(85.0, 260.0);
      const SurrogateVoice voice{pitch(voice_rng), 0.15};
      char utt[16], speaker[16];
      std::snprintf(utt, sizeof utt, "u%04zu", u);
      std::snprintf(speaker, sizeof speaker, "spk%02zu", spk);
      AudioSegment a;
      a.samples = synth_speech(voice, n_samples, derive_seed(seed, std::string("utt") + utt));
      cleans.push_back({utt, speaker, std::move(a)});
    }
  } else {
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(source.clean_dir)) {
      if (f.path().extension() == ".wav") files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string utt = f.stem().string();
      cleans.push_back({utt, utt.substr(0, utt.find('_')), load_audio(f)});
    }
  }
  if (cleans.empty()) throw InvalidInput("no clean utterances to render");

  std::vector<std::string> speakers;
  for (const auto& c : cleans) {
    if (std::find(speakers.begin(), speakers.end(), c.speaker) == speakers.end()) speakers.push_back(c.speaker);
  }
  std::sort(speakers.begin(), speakers.end());
  std::size_t n_test = static_cast<std::size_t>(std::llround(source.test_fraction * speakers.size()));
  if (speakers.size() >= 2) n_test = std::clamp<std::size_t>(n_test, 1, speakers.size() - 1);
  else n_test = 0;
  const std::set<std::string> test_speakers(speakers.end() - static_cast<std::ptrdiff_t>(n_test), speakers.end());

  CorpusManifest manifest;
  manifest.environments = envs;
  for (const auto& env : envs) {
    for (const auto& c : cleans) {
      const AudioSegment rendered =
          env.is_identity() ? c.audio
                            : apply_environment(c.audio, env, derive_seed(seed, c.utt + "/" + env.env_id));
      const fs::path rel = fs::path(env.env_id) / (c.utt + ".wav");
      write_wav(out_dir / rel, rendered.samples);
      manifest.entries.push_back({c.utt, env.env_id, c.speaker,
                                  test_speakers.count(c.speaker) ? Split::test : Split::train, rel});
    }
  }
  manifest.validate();
  write_manifest(out_dir, manifest);
  return manifest;
}

CorpusData::CorpusData(CorpusManifest manifest, fs::path root, std::optional<Split> split,
                       double seconds)
    : manifest_(std::move(manifest)), root_(std::move(root)) {
  for (const auto& e : manifest_.entries) {
    if (split && e.split != *split) continue;
    AudioSegment a = segment(load_audio(root_ / e.relpath), seconds, SegmentMode::center);
    MelSpectrogram mel = mel_spectrogram(a);
    keys_.emplace_back(e.utterance_id, e.env_id);
    items_.emplace(std::pair{e.utterance_id, e.env_id}, std::pair{std::move(a), std::move(mel)});
    auto& list = by_env_[e.env_id];
    list.push_back(e.utterance_id);
  }
  for (auto& [env, utts] : by_env_) {
    std::sort(utts.begin(), utts.end());
    env_ids_.push_back(env);
  }
  if (keys_.empty()) throw InvalidInput("corpus selection is empty");
}

const AudioSegment& CorpusData::audio(const std::string& utt, const std::string& env) const {
  auto it = items_.find({utt, env});
  if (it == items_.end()) throw InvalidInput("no audio for (" + utt + ", " + env + ")");
  return it->second.first;
}

const MelSpectrogram& CorpusData::mel(const std::string& utt, const std::string& env) const {
  auto it = items_.find({utt, env});
  if (it == items_.end()) throw InvalidInput("no mel for (" + utt + ", " + env + ")");
  return it->second.second;
}

bool CorpusData::has(const std::string& utt, const std::string& env) const {
  return items_.count({utt, env}) != 0;
}

const std::vector<std::string>& CorpusData::utterances_in(const std::string& env) const {
  static const std::vector<std::string> none;
  auto it = by_env_.find(env);
  return it == by_env_.end() ? none : it->second;
}

NormStats CorpusData::fit_norm_stats() const {
  double hi = log_mel_floor();
  for (const auto& [key, item] : items_) {
    for (float v : item.second.values.values()) hi = std::max(hi, static_cast<double>(v));
  }
  if (!(hi > log_mel_floor())) throw InvalidInput("corpus is silent; cannot fit normalization");
  return NormStats::from_max(hi);
}

TripletSampler::TripletSampler(const CorpusData& data, SamplerOptions options)
    : data_(data), options_(options) {
  if (options_.p_aug > 0.0) {
    pools_ = AugmentationPools::synthetic(16, 4, 4 * kSampleRate, options_.pool_seed);
  }
  if (options_.p_aug > 0.0 && options_.bank_variants > 0) {
    for (const auto& utt : data_.utterances_in("clean")) {
      auto& variants = bank_[utt];
      for (std::size_t k = 0; k < options_.bank_variants; ++k) {
        const auto seed = derive_seed(options_.pool_seed, utt + "#" + std::to_string(k));
        variants.push_back(
            mel_spectrogram(augment_content(data_.audio(utt, "clean"), pools_, options_.snr_range, seed)));
      }
    }
  }
}

MelSpectrogram TripletSampler::augmented_mel(const std::string& utt, std::mt19937_64& rng) const {
  if (auto it = bank_.find(utt); it != bank_.end() && !it->second.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, it->second.size() - 1);
    return it->second[pick(rng)];
  }
  return mel_spectrogram(augment_content(data_.audio(utt, "clean"), pools_, options_.snr_range, rng()));
}

Triplet TripletSampler::sample(Task task, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  auto pick = [&rng](const auto& v) -> decltype(auto) {
    std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
    return v[d(rng)];
  };

  const auto& envs = data_.env_ids();
  const bool has_clean = std::find(envs.begin(), envs.end(), "clean") != envs.end();
  std::vector<std::string> degraded;
  for (const auto& e : envs) {
    if (e != "clean") degraded.push_back(e);
  }

  std::string y_env, x_env;
  switch (task) {
    case Task::env_to_clean:
      if (!has_clean || degraded.empty()) throw InvalidInput("env_to_clean needs clean and degraded environments");
      y_env = "clean";
      x_env = pick(degraded);
      break;
    case Task::clean_to_env:
      if (!has_clean || degraded.empty()) throw InvalidInput("clean_to_env needs clean and degraded environments");
      y_env = pick(degraded);
      x_env = "clean";
      break;
    case Task::env_to_env: {
      if (degraded.size() < 2) throw InvalidInput("env_to_env needs two degraded environments");
      y_env = pick(degraded);
      std::vector<std::string> others;
      for (const auto& e : degraded) {
        if (e != y_env) others.push_back(e);
      }
      x_env = pick(others);
      break;
    }
    case Task::train: {
      if (envs.size() < 2) throw InvalidInput("training needs at least two environments");
      y_env = pick(envs);
      std::vector<std::string> others;
      for (const auto& e : envs) {
        if (e != y_env) others.push_back(e);
      }
      x_env = pick(others);
      break;
    }
  }

  // Utterances available in both the target environment and the content environment.
  std::vector<std::string> candidates;
  for (const auto& u : data_.utterances_in(y_env)) {
    if (data_.has(u, x_env)) candidates.push_back(u);
  }
  if (candidates.empty() || data_.utterances_in(y_env).size() < 2) {
    throw InvalidInput("environment '" + y_env + "' needs at least two utterances");
  }
  const std::string utt = pick(candidates);
  std::vector<std::string> refs;
  for (const auto& u : data_.utterances_in(y_env)) {
    if (u != utt) refs.push_back(u);
  }
  const std::string r_utt = pick(refs);

  Triplet t;
  t.ids = {utt, x_env, y_env, r_utt, false};
  t.y = data_.mel(utt, y_env);
  t.r = data_.mel(r_utt, y_env);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (task == Task::train && options_.p_aug > 0.0 && coin(rng) < options_.p_aug && data_.has(utt, "clean")) {
    t.x = augmented_mel(utt, rng);
    t.ids.x_env = "augmented";
    t.ids.augmented = true;
  } else {
    t.x = data_.mel(utt, x_env);
  }
  return t;
}

Triplet TripletSampler::content_pair(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  const auto& cleans = data_.utterances_in("clean");
  if (cleans.empty()) throw InvalidInput("enhancer training needs clean renderings");
  std::vector<std::string> degraded;
  for (const auto& e : data_.env_ids()) {
    if (e != "clean") degraded.push_back(e);
  }
  std::uniform_int_distribution<std::size_t> pick_utt(0, cleans.size() - 1);
  const std::string utt = cleans[pick_utt(rng)];
  std::vector<std::string> envs;
  for (const auto& e : degraded) {
    if (data_.has(utt, e)) envs.push_back(e);
  }
  const bool can_augment = options_.p_aug > 0.0;
  if (envs.empty() && !can_augment) {
    throw InvalidInput("utterance '" + utt + "' has no degraded rendering to pair with clean");
  }

  Triplet t;
  t.y = data_.mel(utt, "clean");
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (can_augment && (envs.empty() || coin(rng) < options_.p_aug)) {
    t.x = augmented_mel(utt, rng);
    t.ids = {utt, "augmented", "clean", "", true};
  } else {
    std::uniform_int_distribution<std::size_t> pick_env(0, envs.size() - 1);
    const std::string env = envs[pick_env(rng)];
    t.x = data_.mel(utt, env);
    t.ids = {utt, env, "clean", "", false};
  }
  return t;
}

Triplet sample_triplet(const CorpusData& data, Task task, std::uint64_t seed,
                       const SamplerOptions& options) {
  return TripletSampler(data, options).sample(task, seed);
}

}  // namespace envtransfer
