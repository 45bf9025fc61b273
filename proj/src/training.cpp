#include "envtransfer/training.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "envtransfer/environment.hpp"
#include "envtransfer/errors.hpp"

namespace envtransfer {
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr_start > 0.0)) throw ConfigError("lr_start must be > 0");
  if (lr_halving_interval < 1) throw ConfigError("lr_halving_interval must be >= 1");
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (p_aug < 0.0 || p_aug > 1.0) throw ConfigError("p_aug must lie in [0, 1]");
  if (crop_frames < 16 || ref_crop_frames < kMinReferenceFrames) {
    throw ConfigError("crop lengths must be at least 16 frames");
  }
  if (weight_decay < 0.0 || grad_clip <= 0.0) throw ConfigError("weight_decay >= 0 and grad_clip > 0 required");
  if (log_every < 1 || checkpoint_every < 1) throw ConfigError("log/checkpoint cadence must be >= 1");
  try {
    (void)schedule.build();
  } catch (const InvalidInput& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
}

TrainConfig TrainConfig::enhancer_defaults() {
  TrainConfig c;
  c.stage = Stage::enhancer;
  c.total_steps = 2000;
  c.lr_halving_interval = 400;
  c.checkpoint_every = 500;
  return c;
}

TrainConfig TrainConfig::joint_defaults() { return TrainConfig{}; }

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage", to_string(c.stage)},
       {"batch_size", c.batch_size},
       {"lr_start", c.lr_start},
       {"lr_halving_interval", c.lr_halving_interval},
       {"total_steps", c.total_steps},
       {"seed", c.seed},
       {"data_dir", c.data_dir.string()},
       {"out_dir", c.out_dir.string()},
       {"enhancer_ckpt", c.enhancer_ckpt.string()},
       {"model", c.model},
       {"p_aug", c.p_aug},
       {"aug_bank_variants", c.aug_bank_variants},
       {"crop_frames", c.crop_frames},
       {"ref_crop_frames", c.ref_crop_frames},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"log_every", c.log_every},
       {"checkpoint_every", c.checkpoint_every},
       {"schedule", {{"T", c.schedule.steps}, {"beta_start", c.schedule.beta_start},
                     {"beta_end", c.schedule.beta_end}}}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known = {
      "stage", "batch_size", "lr_start", "lr_halving_interval", "total_steps", "seed", "data_dir",
      "out_dir", "enhancer_ckpt", "model", "p_aug", "aug_bank_variants", "crop_frames",
      "ref_crop_frames", "weight_decay", "grad_clip", "log_every", "checkpoint_every", "schedule"};
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      throw ConfigError("unknown training config key '" + item.key() + "'");
    }
  }
  try {
    if (j.contains("stage")) c.stage = stage_from_string(j.at("stage").get<std::string>());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_start = j.value("lr_start", c.lr_start);
    c.lr_halving_interval = j.value("lr_halving_interval", c.lr_halving_interval);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("enhancer_ckpt")) c.enhancer_ckpt = j.at("enhancer_ckpt").get<std::string>();
    if (j.contains("model")) {
      nlohmann::json merged = c.model;
      merged.erase("embedding_dim");
      merged.update(j.at("model"));
      c.model = merged.get<ModelConfig>();
    }
    c.p_aug = j.value("p_aug", c.p_aug);
    c.aug_bank_variants = j.value("aug_bank_variants", c.aug_bank_variants);
    c.crop_frames = j.value("crop_frames", c.crop_frames);
    c.ref_crop_frames = j.value("ref_crop_frames", c.ref_crop_frames);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.log_every = j.value("log_every", c.log_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      c.schedule.steps = s.value("T", c.schedule.steps);
      c.schedule.beta_start = s.value("beta_start", c.schedule.beta_start);
      c.schedule.beta_end = s.value("beta_end", c.schedule.beta_end);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
}

double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  return cfg.lr_start * std::pow(0.5, static_cast<double>(step / cfg.lr_halving_interval));
}

// ---------------------------------------------------------------- batches

namespace {

/// Columns [start, start + len) of g; edge-replicated past the end.
Grid crop(const Grid& g, std::size_t start, std::size_t len) {
  Grid out(g.rows(), len);
  for (std::size_t r = 0; r < g.rows(); ++r) {
    for (std::size_t c = 0; c < len; ++c) out(r, c) = g(r, std::min(start + c, g.cols() - 1));
  }
  return out;
}

std::size_t crop_start(std::size_t frames, std::size_t len, std::mt19937_64& rng) {
  if (frames <= len) return 0;
  return std::uniform_int_distribution<std::size_t>(0, frames - len)(rng);
}

torch::Tensor stack(const std::vector<Grid>& grids) {
  std::vector<const Grid*> ptrs;
  for (const auto& g : grids) ptrs.push_back(&g);
  return to_batch(ptrs);
}

std::uint64_t item_seed(const TrainConfig& cfg, std::int64_t step, int i) {
  return derive_seed(cfg.seed, "batch/" + std::to_string(step) + "/" + std::to_string(i));
}

}  // namespace

Batch enhancer_batch(const TripletSampler& sampler, const TrainConfig& cfg, const NormStats& stats,
                     std::int64_t step) {
  std::vector<Grid> xs, ys;
  const auto len = static_cast<std::size_t>(cfg.crop_frames);
  for (int i = 0; i < cfg.batch_size; ++i) {
    const auto seed = item_seed(cfg, step, i);
    Triplet t = sampler.content_pair(seed);
    std::mt19937_64 rng(derive_seed(seed, "crop"));
    const auto start = crop_start(t.y.n_frames(), len, rng);
    xs.push_back(crop(normalize(t.x, stats).values, start, len));
    ys.push_back(crop(normalize(t.y, stats).values, start, len));
  }
  return {stack(xs), torch::Tensor(), stack(ys)};
}

Batch joint_batch(const TripletSampler& sampler, const TrainConfig& cfg, const NormStats& stats,
                  std::int64_t step) {
  std::vector<Grid> xs, rs, ys;
  const auto len = static_cast<std::size_t>(cfg.crop_frames);
  const auto ref_len = static_cast<std::size_t>(cfg.ref_crop_frames);
  for (int i = 0; i < cfg.batch_size; ++i) {
    const auto seed = item_seed(cfg, step, i);
    Triplet t = sampler.sample(Task::train, seed);
    std::mt19937_64 rng(derive_seed(seed, "crop"));
    const auto start = crop_start(t.y.n_frames(), len, rng);
    const auto ref_start = crop_start(t.r.n_frames(), ref_len, rng);
    xs.push_back(crop(normalize(t.x, stats).values, start, len));
    ys.push_back(crop(normalize(t.y, stats).values, start, len));
    rs.push_back(crop(normalize(t.r, stats).values, ref_start, ref_len));
  }
  return {stack(xs), stack(rs), stack(ys)};
}

// ---------------------------------------------------------------- trainers

namespace {

void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
}

std::unique_ptr<torch::optim::AdamW> make_optimizer(std::vector<torch::Tensor> params, const TrainConfig& cfg) {
  return std::make_unique<torch::optim::AdamW>(
      std::move(params), torch::optim::AdamWOptions(cfg.lr_start).weight_decay(cfg.weight_decay));
}

}  // namespace

EnhancerTrainer::EnhancerTrainer(const TrainConfig& cfg, ContentEnhancer enhancer)
    : cfg_(cfg), enhancer_(std::move(enhancer)), opt_(make_optimizer(enhancer_->parameters(), cfg)) {
  cfg_.validate();
}

double EnhancerTrainer::step(const torch::Tensor& x, const torch::Tensor& x_clean) {
  enhancer_->train();
  set_lr(*opt_, learning_rate(cfg_, step_));
  opt_->zero_grad();
  auto loss = (enhancer_->forward(x) - x_clean).abs().mean();
  loss.backward();
  torch::nn::utils::clip_grad_norm_(enhancer_->parameters(), cfg_.grad_clip);
  opt_->step();
  ++step_;
  return loss.item<double>();
}

JointTrainer::JointTrainer(const TrainConfig& cfg, TransferModel& model)
    : cfg_(cfg), model_(model), schedule_(cfg.schedule.build()) {
  cfg_.validate();
  if (cfg_.model.embedding_dim() != model_.config.embedding_dim() ||
      cfg_.model.decoder != model_.config.decoder) {
    throw InvalidInput("training config and model disagree on the decoder kind / embedding size");
  }
  const int T = schedule_.steps();
  std::vector<float> a(static_cast<std::size_t>(T + 1)), b(static_cast<std::size_t>(T + 1));
  for (int t = 0; t <= T; ++t) {
    a[static_cast<std::size_t>(t)] = static_cast<float>(std::sqrt(schedule_.alpha_bar(t)));
    b[static_cast<std::size_t>(t)] = static_cast<float>(std::sqrt(1.0 - schedule_.alpha_bar(t)));
  }
  sqrt_ab_ = torch::tensor(a);
  sqrt_one_minus_ab_ = torch::tensor(b);
  opt_ = make_optimizer(model_.joint_parameters(), cfg_);
  if (model_.enhancer) {
    for (auto& p : model_.enhancer->parameters()) p.set_requires_grad(false);
  }
}

torch::Tensor JointTrainer::loss(const torch::Tensor& x, const torch::Tensor& r, const torch::Tensor& y0) {
  const auto batch = y0.size(0);
  auto t = torch::randint(1, schedule_.steps() + 1, {batch}, torch::kLong);
  auto eps = torch::randn_like(y0);
  auto y_t = sqrt_ab_.index_select(0, t).view({batch, 1, 1}) * y0 +
             sqrt_one_minus_ab_.index_select(0, t).view({batch, 1, 1}) * eps;
  auto x_c = model_.content(x);
  auto z = model_.encoder->forward(r);
  auto cond = model_.decoder->condition(x_c, z);
  return torch::mse_loss(model_.decoder->forward(y_t, t, cond), eps);
}

double JointTrainer::step(const torch::Tensor& x, const torch::Tensor& r, const torch::Tensor& y0) {
  model_.train_mode();
  set_lr(*opt_, learning_rate(cfg_, step_));
  opt_->zero_grad();
  auto l = loss(x, r, y0);
  l.backward();
  double sq = 0.0;
  for (const auto& p : model_.encoder->parameters()) {
    if (p.grad().defined()) sq += p.grad().pow(2).sum().item<double>();
  }
  encoder_grad_norm_ = std::sqrt(sq);
  torch::nn::utils::clip_grad_norm_(model_.joint_parameters(), cfg_.grad_clip);
  opt_->step();
  ++step_;
  return l.item<double>();
}

double JointTrainer::evaluate(const torch::Tensor& x, const torch::Tensor& r, const torch::Tensor& y0) {
  model_.eval();
  torch::NoGradGuard no_grad;
  return loss(x, r, y0).item<double>();
}

// ---------------------------------------------------------------- runs

double tail_mean(const std::vector<double>& v, std::size_t n) {
  if (v.empty()) return 0.0;
  n = std::min(n, v.size());
  double acc = 0.0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) acc += v[i];
  return acc / static_cast<double>(n);
}

double head_mean(const std::vector<double>& v, std::size_t n) {
  if (v.empty()) return 0.0;
  n = std::min(n, v.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += v[i];
  return acc / static_cast<double>(n);
}

namespace {

class LossLog {
 public:
  explicit LossLog(const fs::path& path) : out_(path) {
    if (!out_) throw IoError("cannot write " + path.string());
    out_ << "step\tlr\tloss\n";
  }

  void add(std::int64_t step, double lr, double loss, std::int64_t every, TrainResult& result) {
    acc_ += loss;
    ++n_;
    if ((step + 1) % every == 0) flush(step, lr, result);
  }

  void flush(std::int64_t step, double lr, TrainResult& result) {
    if (n_ == 0) return;
    LossRecord rec{step + 1, lr, acc_ / static_cast<double>(n_)};
    result.log.push_back(rec);
    out_ << rec.step << '\t' << rec.lr << '\t' << rec.loss << '\n';
    out_.flush();
    acc_ = 0.0;
    n_ = 0;
  }

 private:
  std::ofstream out_;
  double acc_ = 0.0;
  std::int64_t n_ = 0;
};

SamplerOptions sampler_options(const TrainConfig& cfg) {
  SamplerOptions o;
  o.p_aug = cfg.p_aug;
  o.bank_variants = cfg.aug_bank_variants;
  o.pool_seed = derive_seed(cfg.seed, "augmentation-pools");
  return o;
}

CorpusData load_train_split(const TrainConfig& cfg) {
  if (cfg.data_dir.empty()) throw ConfigError("data_dir is required");
  return CorpusData(read_manifest(cfg.data_dir), cfg.data_dir, Split::train);
}

}  // namespace

TrainResult train_enhancer(const TrainConfig& cfg, const CorpusData& train) {
  cfg.validate();
  if (!cfg.model.use_enhancer) throw ConfigError("model config disables the enhancer; nothing to train");
  if (cfg.out_dir.empty()) throw ConfigError("out_dir is required");
  fs::create_directories(cfg.out_dir);
  torch::manual_seed(cfg.seed);

  TrainResult result;
  result.stats = train.fit_norm_stats();
  TripletSampler sampler(train, sampler_options(cfg));
  EnhancerTrainer trainer(cfg, ContentEnhancer(cfg.model));
  LossLog log(cfg.out_dir / kLossLog);
  result.checkpoint = cfg.out_dir / kEnhancerCheckpoint;
  CheckpointInfo info{Stage::enhancer, cfg.model, result.stats, cfg.schedule, 0};

  for (std::int64_t s = 0; s < cfg.total_steps; ++s) {
    const double lr = trainer.current_lr();
    Batch b = enhancer_batch(sampler, cfg, result.stats, s);
    const double l = trainer.step(b.x, b.y);
    result.losses.push_back(l);
    log.add(s, lr, l, cfg.log_every, result);
    if ((s + 1) % cfg.checkpoint_every == 0 || s + 1 == cfg.total_steps) {
      info.step = s + 1;
      save_enhancer(result.checkpoint, trainer.enhancer(), info);
    }
  }
  log.flush(cfg.total_steps - 1, trainer.current_lr(), result);
  return result;
}

TrainResult train_enhancer(const TrainConfig& cfg) { return train_enhancer(cfg, load_train_split(cfg)); }

TrainResult train_joint(const TrainConfig& cfg, const CorpusData& train) {
  cfg.validate();
  if (cfg.out_dir.empty()) throw ConfigError("out_dir is required");
  if (cfg.model.use_enhancer && cfg.enhancer_ckpt.empty()) {
    throw ConfigError("joint training needs a trained enhancer checkpoint (run train-enhancer first) "
                      "or a model config with use_enhancer = false");
  }
  fs::create_directories(cfg.out_dir);
  torch::manual_seed(cfg.seed);

  TrainResult result;
  TransferModel model(cfg.model);
  if (cfg.model.use_enhancer) {
    const auto info = read_checkpoint_info(cfg.enhancer_ckpt);
    if (info.stage != Stage::enhancer) throw ConfigError(cfg.enhancer_ckpt.string() + " is not an enhancer checkpoint");
    load_enhancer(cfg.enhancer_ckpt, model.enhancer);
    result.stats = info.stats;
  } else {
    result.stats = train.fit_norm_stats();
  }

  TripletSampler sampler(train, sampler_options(cfg));
  JointTrainer trainer(cfg, model);
  LossLog log(cfg.out_dir / kLossLog);
  result.checkpoint = cfg.out_dir / kModelCheckpoint;
  CheckpointInfo info{Stage::joint, cfg.model, result.stats, cfg.schedule, 0};

  for (std::int64_t s = 0; s < cfg.total_steps; ++s) {
    const double lr = trainer.current_lr();
    Batch b = joint_batch(sampler, cfg, result.stats, s);
    const double l = trainer.step(b.x, b.r, b.y);
    if (!std::isfinite(l)) throw std::runtime_error("training diverged at step " + std::to_string(s));
    result.losses.push_back(l);
    log.add(s, lr, l, cfg.log_every, result);
    if ((s + 1) % cfg.checkpoint_every == 0 || s + 1 == cfg.total_steps) {
      info.step = s + 1;
      save_model(result.checkpoint, model, info);
    }
  }
  log.flush(cfg.total_steps - 1, trainer.current_lr(), result);
  return result;
}

TrainResult train_joint(const TrainConfig& cfg) { return train_joint(cfg, load_train_split(cfg)); }

// ---------------------------------------------------------------- inference

MelSpectrogram transfer_mel(TransferModel& model, const ScheduleParams& schedule, const MelSpectrogram& x,
                            const MelSpectrogram& r, std::uint64_t seed) {
  if (!x.normalized || !r.normalized) throw InvalidInput("transfer expects normalized mels");
  model.eval();
  torch::NoGradGuard no_grad;
  auto x_c = model.content(to_tensor(x.values));
  auto z = model.encoder->forward(to_tensor(r.values));
  auto cond = model.decoder->condition(x_c, z);
  const Grid x_c_grid = to_grid(x_c);
  auto z_c = z.contiguous();
  const std::vector<float> z_r(z_c.data_ptr<float>(), z_c.data_ptr<float>() + z_c.numel());

  auto denoiser = [&](const Grid& y, int t, const Grid&, std::span<const float>) {
    return to_grid(model.decoder->forward(to_tensor(y), torch::full({1}, t, torch::kLong), cond));
  };
  std::mt19937_64 rng(seed);
  Grid y0 = sample(denoiser, x_c_grid, z_r, kNumMels, x.n_frames(), schedule.build(), rng);
  for (float& v : y0.values()) v = std::clamp(v, -1.0f, 1.0f);
  return {std::move(y0), true, x.stats};
}

TransferOutputs transfer(const fs::path& content, const fs::path& reference, const fs::path& checkpoint,
                         const fs::path& out_dir, std::uint64_t seed, int griffin_lim_iters) {
  auto loaded = load_model(checkpoint);
  const auto& stats = loaded.info.stats;
  const auto x = normalize(mel_spectrogram(segment(load_audio(content))), stats);
  const auto r = normalize(mel_spectrogram(segment(load_audio(reference))), stats);
  const auto y = transfer_mel(loaded.model, loaded.info.schedule, x, r, seed);

  TransferOutputs out;
  out.mel = denormalize(y, stats);
  out.waveform = invert_mel(out.mel, griffin_lim_iters);
  fs::create_directories(out_dir);
  out.mel_path = out_dir / "transfer.emel";
  out.wav_path = out_dir / "transfer.wav";
  out.meta_path = out_dir / "transfer.json";
  write_mel(out.mel_path, out.mel);
  write_wav(out.wav_path, out.waveform.samples, kSampleRate);
  const nlohmann::json meta = {
      {"content", fs::absolute(content).string()},
      {"reference", fs::absolute(reference).string()},
      {"checkpoint", fs::absolute(checkpoint).string()},
      {"model", loaded.info.model.tag()},
      {"seed", seed},
      {"n_mels", out.mel.n_mels()},
      {"n_frames", out.mel.n_frames()},
      {"griffin_lim_iters", griffin_lim_iters},
      {"schedule", {{"T", loaded.info.schedule.steps}, {"beta_start", loaded.info.schedule.beta_start},
                    {"beta_end", loaded.info.schedule.beta_end}}},
      {"norm_stats", {{"min_log_mel", stats.min_log_mel}, {"max_log_mel", stats.max_log_mel}}}};
  std::ofstream m(out.meta_path);
  if (!m) throw IoError("cannot write " + out.meta_path.string());
  m << meta.dump(2) << '\n';
  return out;
}

}  // namespace envtransfer
