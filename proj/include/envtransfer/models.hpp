#pragma once

#include <torch/torch.h>

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "envtransfer/dsp.hpp"
#include "envtransfer/grid.hpp"

namespace envtransfer {

enum class DecoderKind { wavenet, unet };
enum class EncoderKind { r1, r2 };

std::string to_string(DecoderKind k);
std::string to_string(EncoderKind k);
DecoderKind decoder_kind_from_string(const std::string& s);
EncoderKind encoder_kind_from_string(const std::string& s);

/// Architecture of one transfer model. Widths are desk-scale; every
/// mechanism of the full-size networks is kept.
struct ModelConfig {
  DecoderKind decoder = DecoderKind::unet;
  EncoderKind encoder = EncoderKind::r2;
  bool use_enhancer = true;

  int enhancer_base_channels = 8;
  int enhancer_stages = 4;

  int encoder_channels = 64;     // r2 trunk and r1 projection width
  int encoder_attention = 32;    // attentive pooling bottleneck
  int encoder_res2_scale = 4;

  int wavenet_blocks = 12;
  int wavenet_channels = 64;
  int wavenet_dilation_cycle = 4;  // dilations 1, 2, 4, 8 repeated

  int unet_base_channels = 8;
  int unet_scales = 3;

  int step_embedding = 64;

  /// Conditioning width C: 256 for WaveNet, 80 (one per mel bin) for U-Net.
  int embedding_dim() const noexcept { return decoder == DecoderKind::wavenet ? 256 : kNumMels; }
  /// Short ablation tag such as "U-R2-C".
  std::string tag() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Minimum reference length the encoders accept, in frames.
inline constexpr int kMinReferenceFrames = 16;

/// Encoder-decoder over the mel grid with strided 2-D downsampling, residual
/// blocks and skip connections. The output layer is zero-initialized and
/// added to the input, so an untrained enhancer is the identity.
class ContentEnhancerImpl : public torch::nn::Module {
 public:
  explicit ContentEnhancerImpl(const ModelConfig& cfg);
  /// x: [B, 80, T] normalized log-mel -> same shape.
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int stages_;
  torch::nn::Conv2d stem_{nullptr}, head_{nullptr};
  torch::nn::ModuleList enc_, down_, up_, dec_;
  torch::nn::Sequential mid_{nullptr};
};
TORCH_MODULE(ContentEnhancer);

/// Maps a reference mel [B, 80, T2] to an embedding [B, C].
class EnvironmentEncoderImpl : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& r) = 0;
};

/// Baseline (R1): kernel-1 convolution, attentive statistics pooling,
/// batch normalization, linear map to C.
std::shared_ptr<EnvironmentEncoderImpl> make_baseline_encoder(const ModelConfig& cfg);
/// R2: ECAPA-TDNN-style trunk (SE-Res2 dilated blocks, multi-layer feature
/// aggregation, context-aware attentive statistics pooling), no
/// classification head, final linear layer sized to C.
std::shared_ptr<EnvironmentEncoderImpl> make_ecapa_encoder(const ModelConfig& cfg);
std::shared_ptr<EnvironmentEncoderImpl> make_encoder(const ModelConfig& cfg);

/// epsilon-prediction network with its conditioning scheme.
class DiffusionDecoderImpl : public torch::nn::Module {
 public:
  /// x_c: [B, 80, T], z: [B, C] -> conditioning grid [B, C_cond, T].
  virtual torch::Tensor condition(const torch::Tensor& x_c, const torch::Tensor& z) = 0;
  /// y_t: [B, 80, T], t: [B] int64 in 1..T_steps, cond from condition().
  virtual torch::Tensor forward(const torch::Tensor& y_t, const torch::Tensor& t,
                                const torch::Tensor& cond) = 0;
};

std::shared_ptr<DiffusionDecoderImpl> make_wavenet_decoder(const ModelConfig& cfg);
std::shared_ptr<DiffusionDecoderImpl> make_unet_decoder(const ModelConfig& cfg);
std::shared_ptr<DiffusionDecoderImpl> make_decoder(const ModelConfig& cfg);

/// U-Net scheme: z_r repeated over time and stacked under X_c -> [B, 160, T].
torch::Tensor concat_condition(const torch::Tensor& x_c, const torch::Tensor& z);
/// WaveNet scheme: per-frame linear map of X_c to C channels plus z_r
/// broadcast over time -> [B, C, T].
torch::Tensor project_sum_condition(torch::nn::Linear& projection, const torch::Tensor& x_c,
                                    const torch::Tensor& z);

/// Sinusoidal embedding of integer steps: [B] -> [B, dim].
torch::Tensor step_embedding(const torch::Tensor& t, int dim);

/// The three networks of one ablation variant. `enhancer` is null when the
/// variant runs on the raw content input.
struct TransferModel {
  ModelConfig config;
  ContentEnhancer enhancer{nullptr};
  std::shared_ptr<EnvironmentEncoderImpl> encoder;
  std::shared_ptr<DiffusionDecoderImpl> decoder;

  explicit TransferModel(const ModelConfig& cfg);

  /// X_c: the enhanced content, or X itself when the enhancer is disabled.
  torch::Tensor content(const torch::Tensor& x);
  void eval();
  void train_mode();
  /// Encoder and decoder parameters (the jointly trained set).
  std::vector<torch::Tensor> joint_parameters() const;
};

torch::Tensor to_tensor(const Grid& g);  // [1, rows, cols]
Grid to_grid(const torch::Tensor& t);    // accepts [rows, cols] or [1, rows, cols]
torch::Tensor to_batch(const std::vector<const Grid*>& grids);

/// Single-clip inference helpers on normalized mels.
MelSpectrogram enhance(ContentEnhancer& enhancer, const MelSpectrogram& x);
std::vector<float> embed(EnvironmentEncoderImpl& encoder, const MelSpectrogram& r);

/// FNV-1a hash over every parameter and buffer, in registration order.
std::uint64_t parameter_hash(const torch::nn::Module& m);
std::size_t parameter_count(const torch::nn::Module& m);

}  // namespace envtransfer
