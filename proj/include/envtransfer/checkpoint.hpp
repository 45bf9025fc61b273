#pragma once

// Checkpoint container: "ETCK" magic, u32 version, u64 header length, a JSON
// header (stage, model config, norm stats, schedule, tensor table) and then
// raw little-endian float32 tensor data. See docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "envtransfer/diffusion.hpp"
#include "envtransfer/dsp.hpp"
#include "envtransfer/models.hpp"

namespace envtransfer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Stage { enhancer, joint };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct CheckpointInfo {
  Stage stage = Stage::joint;
  ModelConfig model;
  NormStats stats;
  ScheduleParams schedule;
  std::int64_t step = 0;
};

/// Named modules whose parameters and buffers are stored under "<name>.".
using ModuleSet = std::vector<std::pair<std::string, torch::nn::Module*>>;

void save_checkpoint(const std::filesystem::path& path, const CheckpointInfo& info, const ModuleSet& modules);
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);
/// Copies stored tensors into the modules. Every parameter and buffer of
/// every module must be present with a matching shape (ConfigError otherwise).
CheckpointInfo load_checkpoint(const std::filesystem::path& path, const ModuleSet& modules);

/// Enhancer-only checkpoint written by the first training stage.
void save_enhancer(const std::filesystem::path& path, ContentEnhancer& enhancer, const CheckpointInfo& info);
/// Full model: enhancer (when used), encoder and decoder.
void save_model(const std::filesystem::path& path, TransferModel& model, const CheckpointInfo& info);

struct LoadedModel {
  CheckpointInfo info;
  TransferModel model;
};

LoadedModel load_model(const std::filesystem::path& path);
/// Loads the enhancer weights of an enhancer-stage checkpoint.
CheckpointInfo load_enhancer(const std::filesystem::path& path, ContentEnhancer& enhancer);

}  // namespace envtransfer
