#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "envtransfer/checkpoint.hpp"
#include "envtransfer/corpus.hpp"
#include "envtransfer/diffusion.hpp"
#include "envtransfer/models.hpp"

namespace envtransfer {

struct TrainConfig {
  Stage stage = Stage::joint;
  int batch_size = 8;
  double lr_start = 8e-4;
  std::int64_t lr_halving_interval = 4000;
  std::int64_t total_steps = 20000;
  std::uint64_t seed = 0;

  std::filesystem::path data_dir;       // corpus root with manifest.tsv
  std::filesystem::path out_dir;        // checkpoints, loss log, config snapshot
  std::filesystem::path enhancer_ckpt;  // joint stage input

  ModelConfig model;
  double p_aug = 0.5;
  std::size_t aug_bank_variants = 8;
  int crop_frames = 32;      // training crop of X and Y
  int ref_crop_frames = 96;  // training crop of R
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  std::int64_t log_every = 100;
  std::int64_t checkpoint_every = 1000;
  ScheduleParams schedule;

  /// Throws ConfigError on any out-of-range field.
  void validate() const;

  /// Desk-scale presets for each stage.
  static TrainConfig enhancer_defaults();
  static TrainConfig joint_defaults();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Fields absent from `j` keep the values already in `c`.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// lr_start * 0.5^floor(step / lr_halving_interval).
double learning_rate(const TrainConfig& cfg, std::int64_t step);

/// One normalized training batch; tensors are [B, 80, frames].
struct Batch {
  torch::Tensor x, r, y;
};

/// Draws `batch_size` items deterministically from (seed, step): each item
/// uses its own derived seed so the order never depends on scheduling.
Batch enhancer_batch(const TripletSampler& sampler, const TrainConfig& cfg, const NormStats& stats,
                     std::int64_t step);
Batch joint_batch(const TripletSampler& sampler, const TrainConfig& cfg, const NormStats& stats,
                  std::int64_t step);

/// Stage one: L1 between enhance(X) and X_clean.
class EnhancerTrainer {
 public:
  EnhancerTrainer(const TrainConfig& cfg, ContentEnhancer enhancer);

  /// Loss on the batch before the update; advances the step counter.
  double step(const torch::Tensor& x, const torch::Tensor& x_clean);
  std::int64_t steps_done() const noexcept { return step_; }
  double current_lr() const { return learning_rate(cfg_, step_); }
  ContentEnhancer& enhancer() noexcept { return enhancer_; }

 private:
  TrainConfig cfg_;
  ContentEnhancer enhancer_;
  std::unique_ptr<torch::optim::AdamW> opt_;
  std::int64_t step_ = 0;
};

/// Stage two: epsilon regression through decoder and encoder with the
/// enhancer frozen.
class JointTrainer {
 public:
  JointTrainer(const TrainConfig& cfg, TransferModel& model);

  /// x is the raw content batch; X_c is formed inside without gradient.
  double step(const torch::Tensor& x, const torch::Tensor& r, const torch::Tensor& y0);
  /// Same loss without an update, for held-out monitoring.
  double evaluate(const torch::Tensor& x, const torch::Tensor& r, const torch::Tensor& y0);

  std::int64_t steps_done() const noexcept { return step_; }
  double current_lr() const { return learning_rate(cfg_, step_); }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  /// L2 norm of the encoder gradient left by the most recent step.
  double last_encoder_grad_norm() const noexcept { return encoder_grad_norm_; }

 private:
  torch::Tensor loss(const torch::Tensor& x, const torch::Tensor& r, const torch::Tensor& y0);

  TrainConfig cfg_;
  TransferModel& model_;
  NoiseSchedule schedule_;
  torch::Tensor sqrt_ab_, sqrt_one_minus_ab_;
  std::unique_ptr<torch::optim::AdamW> opt_;
  std::int64_t step_ = 0;
  double encoder_grad_norm_ = 0.0;
};

struct LossRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::vector<double> losses;       // one per step
  std::vector<LossRecord> log;      // windowed means as written to loss.tsv
  NormStats stats;
};

inline constexpr const char* kEnhancerCheckpoint = "enhancer.ckpt";
inline constexpr const char* kModelCheckpoint = "model.ckpt";
inline constexpr const char* kLossLog = "loss.tsv";

/// Runs stage one on the train split and writes <out_dir>/enhancer.ckpt.
TrainResult train_enhancer(const TrainConfig& cfg, const CorpusData& train);
TrainResult train_enhancer(const TrainConfig& cfg);
/// Runs stage two and writes <out_dir>/model.ckpt. Needs cfg.enhancer_ckpt
/// unless the model runs without an enhancer.
TrainResult train_joint(const TrainConfig& cfg, const CorpusData& train);
TrainResult train_joint(const TrainConfig& cfg);

/// Mean of the last `n` entries (or all when fewer).
double tail_mean(const std::vector<double>& v, std::size_t n);
double head_mean(const std::vector<double>& v, std::size_t n);

// ---------------------------------------------------------------- inference

/// Normalized X and R in, normalized Y0 out (same frame count as X).
MelSpectrogram transfer_mel(TransferModel& model, const ScheduleParams& schedule, const MelSpectrogram& x,
                            const MelSpectrogram& r, std::uint64_t seed);

struct TransferOutputs {
  MelSpectrogram mel;  // unnormalized
  AudioSegment waveform;
  std::filesystem::path mel_path, wav_path, meta_path;
};

TransferOutputs transfer(const std::filesystem::path& content, const std::filesystem::path& reference,
                         const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir,
                         std::uint64_t seed, int griffin_lim_iters = 60);

}  // namespace envtransfer
