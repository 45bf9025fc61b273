#include "envtransfer/cli.hpp"

#include <deque>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "envtransfer/corpus.hpp"
#include "envtransfer/diffusion.hpp"
#include "envtransfer/errors.hpp"
#include "envtransfer/evaluation.hpp"
#include "envtransfer/training.hpp"

namespace envtransfer {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Flags that were given on the command line, applied on top of the config
/// file as JSON-pointer assignments.
class Overrides {
 public:
  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& pointer, const std::string& help) {
    auto storage = std::make_shared<T>();
    auto* opt = app->add_option(flag, *storage, help);
    fns_.emplace_back([opt, pointer, storage](json& j) {
      if (opt->count() > 0) j[json::json_pointer(pointer)] = *storage;
    });
    return opt;
  }

  /// Boolean switch; stores `value` at `pointer` when present.
  CLI::Option* add_switch(CLI::App* app, const std::string& flag, const std::string& pointer, bool value,
                          const std::string& help) {
    auto* opt = app->add_flag(flag, help);
    fns_.emplace_back([opt, pointer, value](json& j) {
      if (opt->count() > 0) j[json::json_pointer(pointer)] = value;
    });
    return opt;
  }

  void apply(json& j) const {
    for (const auto& f : fns_) f(j);
  }

 private:
  std::vector<std::function<void(json&)>> fns_;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  try {
    json j;
    in >> j;
    if (!j.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_snapshot(const fs::path& dir, const std::string& command, json j) {
  fs::create_directories(dir);
  j["command"] = command;
  std::ofstream out(dir / "resolved_config.json");
  if (!out) throw IoError("cannot write " + (dir / "resolved_config.json").string());
  out << j.dump(2) << '\n';
}

template <typename T>
T take(const json& j, const char* key, T fallback) {
  try {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known) {
  for (const auto& item : j.items()) {
    if (item.key() == "command") continue;
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return item.key() == k; })) {
      throw ConfigError("unknown config key '" + item.key() + "'");
    }
  }
}

fs::path required_path(const json& j, const char* key) {
  const auto s = take<std::string>(j, key, "");
  if (s.empty()) throw ConfigError(std::string("'") + key + "' is required");
  return s;
}

// ---------------------------------------------------------------- commands

int cmd_synth(const json& j, std::ostream& out) {
  reject_unknown(j, {"out_dir", "envs", "utts", "utts_per_speaker", "test_fraction", "seconds", "seed", "clean_dir"});
  const fs::path out_dir = required_path(j, "out_dir");
  CorpusSource src;
  src.clean_dir = take<std::string>(j, "clean_dir", "");
  src.n_utterances = take<std::size_t>(j, "utts", 50);
  src.utterances_per_speaker = take<std::size_t>(j, "utts_per_speaker", 5);
  src.test_fraction = take<double>(j, "test_fraction", 0.2);
  src.seconds = take<double>(j, "seconds", 4.0);
  const auto n_envs = take<std::size_t>(j, "envs", 3);
  const auto seed = take<std::uint64_t>(j, "seed", 0);
  json resolved = {{"out_dir", out_dir.string()}, {"envs", n_envs}, {"utts", src.n_utterances},
                   {"utts_per_speaker", src.utterances_per_speaker}, {"test_fraction", src.test_fraction},
                   {"seconds", src.seconds}, {"seed", seed}, {"clean_dir", src.clean_dir.string()}};
  const auto manifest = generate_corpus(src, default_environments(n_envs, seed), out_dir, seed);
  write_snapshot(out_dir, "synth-data", resolved);
  out << "wrote " << manifest.entries.size() << " clips in " << manifest.environments.size()
      << " environments to " << out_dir.string() << '\n';
  return kExitOk;
}

TrainConfig train_config(const json& j, Stage stage) {
  TrainConfig cfg = stage == Stage::enhancer ? TrainConfig::enhancer_defaults() : TrainConfig::joint_defaults();
  json body = j;
  body.erase("command");
  from_json(body, cfg);
  cfg.stage = stage;
  cfg.validate();
  return cfg;
}

int cmd_train(const json& j, Stage stage, std::ostream& out) {
  const TrainConfig cfg = train_config(j, stage);
  if (cfg.out_dir.empty()) throw ConfigError("'out_dir' is required");
  json resolved = cfg;
  write_snapshot(cfg.out_dir, stage == Stage::enhancer ? "train-enhancer" : "train", resolved);
  const TrainResult r = stage == Stage::enhancer ? train_enhancer(cfg) : train_joint(cfg);
  out << "trained " << cfg.model.tag() << " (" << to_string(stage) << ") for " << cfg.total_steps
      << " steps; loss first100=" << head_mean(r.losses, 100) << " last100=" << tail_mean(r.losses, 100)
      << "; checkpoint " << r.checkpoint.string() << '\n';
  return kExitOk;
}

int cmd_transfer(const json& j, std::ostream& out) {
  reject_unknown(j, {"content", "reference", "ckpt", "out_dir", "seed", "griffin_lim_iters"});
  const fs::path content = required_path(j, "content");
  const fs::path reference = required_path(j, "reference");
  const fs::path ckpt = required_path(j, "ckpt");
  const fs::path out_dir = required_path(j, "out_dir");
  const auto seed = take<std::uint64_t>(j, "seed", 0);
  const int iters = take<int>(j, "griffin_lim_iters", 60);
  for (const auto& p : {content, reference, ckpt}) {
    if (!fs::exists(p)) throw IoError("no such file: " + p.string());
  }
  write_snapshot(out_dir, "transfer",
                 {{"content", content.string()}, {"reference", reference.string()}, {"ckpt", ckpt.string()},
                  {"out_dir", out_dir.string()}, {"seed", seed}, {"griffin_lim_iters", iters}});
  const auto r = transfer(content, reference, ckpt, out_dir, seed, iters);
  out << "wrote " << r.mel_path.string() << " (" << r.mel.n_mels() << "x" << r.mel.n_frames() << ") and "
      << r.wav_path.string() << '\n';
  return kExitOk;
}

std::optional<Split> split_of(const std::string& s) {
  if (s == "all") return std::nullopt;
  return split_from_string(s);
}

int cmd_evaluate(const json& j, std::ostream& out) {
  reject_unknown(j, {"ckpt", "data_dir", "out_dir", "cases", "pairs", "seed", "griffin_lim_iters", "split"});
  const fs::path ckpt = required_path(j, "ckpt");
  const fs::path data_dir = required_path(j, "data_dir");
  const fs::path out_dir = required_path(j, "out_dir");
  auto cases = take<std::vector<std::string>>(j, "cases", {"env_to_clean", "clean_to_env", "env_to_env"});
  const auto pairs = take<std::size_t>(j, "pairs", 50);
  const auto seed = take<std::uint64_t>(j, "seed", 0);
  const int iters = take<int>(j, "griffin_lim_iters", 32);
  const auto split = take<std::string>(j, "split", "test");
  std::vector<Task> tasks;
  for (const auto& c : cases) tasks.push_back(task_from_string(c));
  write_snapshot(out_dir, "evaluate",
                 {{"ckpt", ckpt.string()}, {"data_dir", data_dir.string()}, {"out_dir", out_dir.string()},
                  {"cases", cases}, {"pairs", pairs}, {"seed", seed}, {"griffin_lim_iters", iters},
                  {"split", split}});
  auto model = load_model(ckpt);
  const CorpusData data(read_manifest(data_dir), data_dir, split_of(split));
  EvalOptions opt;
  opt.griffin_lim_iters = iters;
  for (Task t : tasks) {
    const auto report = evaluate_testcase(model, data, t, pairs, seed, opt);
    const auto path = out_dir / ("eval_" + to_string(t) + ".tsv");
    report.write_tsv(path);
    out << "== " << to_string(t) << " (" << pairs << " pairs) -> " << path.string() << '\n' << report.summary();
  }
  return kExitOk;
}

int cmd_embed(const json& j, std::ostream& out) {
  reject_unknown(j, {"ckpt", "data_dir", "out_dir", "split", "projection", "k"});
  const fs::path ckpt = required_path(j, "ckpt");
  const fs::path data_dir = required_path(j, "data_dir");
  const fs::path out_dir = required_path(j, "out_dir");
  const auto split = take<std::string>(j, "split", "test");
  const bool projection = take<bool>(j, "projection", true);
  const int k = take<int>(j, "k", 5);
  write_snapshot(out_dir, "embed",
                 {{"ckpt", ckpt.string()}, {"data_dir", data_dir.string()}, {"out_dir", out_dir.string()},
                  {"split", split}, {"projection", projection}, {"k", k}});
  auto model = load_model(ckpt);
  const CorpusData data(read_manifest(data_dir), data_dir, split_of(split));
  const auto table = export_embeddings(*model.model.encoder, data, model.info.stats, projection);
  write_embeddings(out_dir / "embeddings.tsv", table);
  const double acc = knn_accuracy(table, k);
  const auto sep = cosine_separation(table);
  const json analysis = {{"clips", table.rows.size()}, {"dim", table.dim}, {"k", k}, {"knn_accuracy", acc},
                         {"intra_cosine", sep.intra}, {"inter_cosine", sep.inter}, {"margin", sep.margin()}};
  std::ofstream a(out_dir / "analysis.json");
  a << analysis.dump(2) << '\n';
  out << "wrote " << table.rows.size() << " embeddings (C=" << table.dim << "); knn@" << k << " accuracy " << acc
      << ", intra cosine " << sep.intra << ", inter cosine " << sep.inter << '\n';
  return kExitOk;
}

int cmd_schedule(const json& j, std::ostream& out) {
  reject_unknown(j, {"T", "beta_start", "beta_end", "dump"});
  const ScheduleParams p{take<int>(j, "T", ScheduleDefaults::steps),
                         take<double>(j, "beta_start", ScheduleDefaults::beta_start),
                         take<double>(j, "beta_end", ScheduleDefaults::beta_end)};
  const auto dump = take<std::string>(j, "dump", "");
  const auto s = p.build();
  const auto r = check_schedule(s);
  auto yn = [](bool b) { return b ? "ok" : "VIOLATED"; };
  out << std::setprecision(10);
  out << "T = " << s.steps() << ", beta = [" << s.beta(1) << ", " << s.beta(s.steps()) << "]\n";
  out << "beta in (0,1):              " << yn(r.beta_in_range) << '\n';
  out << "beta strictly increasing:   " << yn(r.beta_increasing) << '\n';
  out << "alpha_bar strictly decr.:   " << yn(r.alpha_bar_decreasing) << '\n';
  out << "posterior_var[1] = " << s.posterior_variance(1) << ":   " << yn(r.first_posterior_zero) << '\n';
  out << "0 <= posterior_var <= beta: " << yn(r.posterior_bounded) << '\n';
  out << "alpha_bar[T] = " << r.terminal_alpha_bar << " < 0.05: " << yn(r.terminal_near_gaussian) << '\n';
  if (!dump.empty()) write_schedule(dump, s);
  if (!r.ok()) {
    for (const auto& v : r.violations) out << "violation: " << v << '\n';
    return kExitError;
  }
  return kExitOk;
}

void add_train_flags(CLI::App* app, Overrides& ov) {
  ov.add<std::string>(app, "--data", "/data_dir", "corpus directory (manifest.tsv)");
  ov.add<std::string>(app, "--out", "/out_dir", "output directory");
  ov.add<std::int64_t>(app, "--steps", "/total_steps", "total optimizer steps");
  ov.add<int>(app, "--batch-size", "/batch_size", "batch size");
  ov.add<double>(app, "--lr", "/lr_start", "initial learning rate");
  ov.add<std::int64_t>(app, "--halving-interval", "/lr_halving_interval", "steps between lr halvings");
  ov.add<std::uint64_t>(app, "--seed", "/seed", "random seed");
  ov.add<double>(app, "--p-aug", "/p_aug", "probability of an augmented content input");
  ov.add<int>(app, "--crop", "/crop_frames", "training crop length in frames");
  ov.add<std::int64_t>(app, "--log-every", "/log_every", "loss log cadence");
  ov.add<std::int64_t>(app, "--checkpoint-every", "/checkpoint_every", "checkpoint cadence");
  ov.add<std::string>(app, "--decoder", "/model/decoder", "wavenet | unet");
  ov.add<std::string>(app, "--encoder", "/model/encoder", "r1 | r2");
  ov.add<int>(app, "--T", "/schedule/T", "diffusion steps");
  ov.add<double>(app, "--beta-start", "/schedule/beta_start", "first beta");
  ov.add<double>(app, "--beta-end", "/schedule/beta_end", "last beta");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Recording-environment transfer: data synthesis, training, inference and evaluation"};
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, Overrides> overrides;

  auto add_cmd = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON config file; flags override its values");
    return sub;
  };

  auto* synth = add_cmd("synth-data", "render a paired synthetic corpus");
  {
    auto& ov = overrides["synth-data"];
    ov.add<std::string>(synth, "--out", "/out_dir", "output directory");
    ov.add<std::size_t>(synth, "--envs", "/envs", "number of environments including clean");
    ov.add<std::size_t>(synth, "--utts", "/utts", "number of utterances");
    ov.add<std::size_t>(synth, "--utts-per-speaker", "/utts_per_speaker", "utterances per surrogate speaker");
    ov.add<double>(synth, "--test-fraction", "/test_fraction", "fraction of speakers held out");
    ov.add<double>(synth, "--seconds", "/seconds", "clip length");
    ov.add<std::uint64_t>(synth, "--seed", "/seed", "random seed");
    ov.add<std::string>(synth, "--clean-dir", "/clean_dir", "directory of clean WAVs instead of the surrogate");
  }
  auto* train_enh = add_cmd("train-enhancer", "stage one: train the content enhancer");
  add_train_flags(train_enh, overrides["train-enhancer"]);
  auto* train = add_cmd("train", "stage two: train encoder and decoder jointly");
  {
    auto& ov = overrides["train"];
    add_train_flags(train, ov);
    ov.add<std::string>(train, "--enhancer-ckpt", "/enhancer_ckpt", "checkpoint from train-enhancer");
    ov.add_switch(train, "--no-enhancer", "/model/use_enhancer", false, "condition on the raw content input");
  }
  auto* xfer = add_cmd("transfer", "render content in the reference's environment");
  {
    auto& ov = overrides["transfer"];
    ov.add<std::string>(xfer, "--content", "/content", "content WAV");
    ov.add<std::string>(xfer, "--reference", "/reference", "reference WAV");
    ov.add<std::string>(xfer, "--ckpt", "/ckpt", "model checkpoint");
    ov.add<std::string>(xfer, "--out", "/out_dir", "output directory");
    ov.add<std::uint64_t>(xfer, "--seed", "/seed", "sampling seed");
    ov.add<int>(xfer, "--gl-iters", "/griffin_lim_iters", "phase-retrieval iterations");
  }
  auto* eval = add_cmd("evaluate", "objective metrics on the test cases");
  {
    auto& ov = overrides["evaluate"];
    ov.add<std::string>(eval, "--ckpt", "/ckpt", "model checkpoint");
    ov.add<std::string>(eval, "--data", "/data_dir", "corpus directory");
    ov.add<std::string>(eval, "--out", "/out_dir", "output directory");
    ov.add<std::vector<std::string>>(eval, "--case", "/cases", "env_to_clean | clean_to_env | env_to_env");
    ov.add<std::size_t>(eval, "--pairs", "/pairs", "pairs per test case");
    ov.add<std::uint64_t>(eval, "--seed", "/seed", "random seed");
    ov.add<int>(eval, "--gl-iters", "/griffin_lim_iters", "phase-retrieval iterations (0 skips waveforms)");
    ov.add<std::string>(eval, "--split", "/split", "train | test | all");
  }
  auto* emb = add_cmd("embed", "export environment embeddings and their separation statistics");
  {
    auto& ov = overrides["embed"];
    ov.add<std::string>(emb, "--ckpt", "/ckpt", "model checkpoint");
    ov.add<std::string>(emb, "--data", "/data_dir", "corpus directory");
    ov.add<std::string>(emb, "--out", "/out_dir", "output directory");
    ov.add<std::string>(emb, "--split", "/split", "train | test | all");
    ov.add<int>(emb, "--k", "/k", "neighbours for k-NN accuracy");
    ov.add_switch(emb, "--no-projection", "/projection", false, "skip the 2-D principal components");
  }
  auto* sched = add_cmd("schedule-check", "print the noise-schedule invariant report");
  {
    auto& ov = overrides["schedule-check"];
    ov.add<int>(sched, "--T", "/T", "diffusion steps");
    ov.add<double>(sched, "--beta-start", "/beta_start", "first beta");
    ov.add<double>(sched, "--beta-end", "/beta_end", "last beta");
    ov.add<std::string>(sched, "--dump", "/dump", "write the schedule as JSON");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    for (auto* sub : app.get_subcommands()) out << sub->help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    err << "run with --help for usage\n";
    return kExitUsage;
  }

  auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    json j = config_path.empty() ? json::object() : read_json_file(config_path);
    overrides[name].apply(j);
    if (name == "synth-data") return cmd_synth(j, out);
    if (name == "train-enhancer") return cmd_train(j, Stage::enhancer, out);
    if (name == "train") return cmd_train(j, Stage::joint, out);
    if (name == "transfer") return cmd_transfer(j, out);
    if (name == "evaluate") return cmd_evaluate(j, out);
    if (name == "embed") return cmd_embed(j, out);
    if (name == "schedule-check") return cmd_schedule(j, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
  err << "usage error: unknown subcommand " << name << '\n';
  return kExitUsage;
}

}  // namespace envtransfer
