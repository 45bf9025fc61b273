#include "envtransfer/models.hpp"

#include <cmath>
#include <cstring>

#include "envtransfer/errors.hpp"

namespace envtransfer {
namespace F = torch::nn::functional;
namespace nn = torch::nn;

std::string to_string(DecoderKind k) { return k == DecoderKind::wavenet ? "wavenet" : "unet"; }
std::string to_string(EncoderKind k) { return k == EncoderKind::r1 ? "r1" : "r2"; }

DecoderKind decoder_kind_from_string(const std::string& s) {
  if (s == "wavenet" || s == "W" || s == "w") return DecoderKind::wavenet;
  if (s == "unet" || s == "U" || s == "u") return DecoderKind::unet;
  throw InvalidInput("unknown decoder kind '" + s + "'");
}

EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "r1" || s == "R1") return EncoderKind::r1;
  if (s == "r2" || s == "R2") return EncoderKind::r2;
  throw InvalidInput("unknown encoder kind '" + s + "'");
}

std::string ModelConfig::tag() const {
  std::string t = decoder == DecoderKind::wavenet ? "W" : "U";
  t += encoder == EncoderKind::r1 ? "-R1" : "-R2";
  if (use_enhancer) t += "-C";
  return t;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"decoder", to_string(c.decoder)},
       {"encoder", to_string(c.encoder)},
       {"use_enhancer", c.use_enhancer},
       {"enhancer_base_channels", c.enhancer_base_channels},
       {"enhancer_stages", c.enhancer_stages},
       {"encoder_channels", c.encoder_channels},
       {"encoder_attention", c.encoder_attention},
       {"encoder_res2_scale", c.encoder_res2_scale},
       {"wavenet_blocks", c.wavenet_blocks},
       {"wavenet_channels", c.wavenet_channels},
       {"wavenet_dilation_cycle", c.wavenet_dilation_cycle},
       {"unet_base_channels", c.unet_base_channels},
       {"unet_scales", c.unet_scales},
       {"step_embedding", c.step_embedding},
       {"embedding_dim", c.embedding_dim()}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.decoder = decoder_kind_from_string(j.value("decoder", to_string(d.decoder)));
  c.encoder = encoder_kind_from_string(j.value("encoder", to_string(d.encoder)));
  c.use_enhancer = j.value("use_enhancer", d.use_enhancer);
  c.enhancer_base_channels = j.value("enhancer_base_channels", d.enhancer_base_channels);
  c.enhancer_stages = j.value("enhancer_stages", d.enhancer_stages);
  c.encoder_channels = j.value("encoder_channels", d.encoder_channels);
  c.encoder_attention = j.value("encoder_attention", d.encoder_attention);
  c.encoder_res2_scale = j.value("encoder_res2_scale", d.encoder_res2_scale);
  c.wavenet_blocks = j.value("wavenet_blocks", d.wavenet_blocks);
  c.wavenet_channels = j.value("wavenet_channels", d.wavenet_channels);
  c.wavenet_dilation_cycle = j.value("wavenet_dilation_cycle", d.wavenet_dilation_cycle);
  c.unet_base_channels = j.value("unet_base_channels", d.unet_base_channels);
  c.unet_scales = j.value("unet_scales", d.unet_scales);
  c.step_embedding = j.value("step_embedding", d.step_embedding);
  if (j.contains("embedding_dim") && j.at("embedding_dim").get<int>() != c.embedding_dim()) {
    throw ConfigError("embedding_dim does not match the decoder kind");
  }
}

namespace {

void check_mel_batch(const torch::Tensor& x, const char* what) {
  if (x.dim() != 3 || x.size(1) != kNumMels) {
    throw InvalidInput(std::string(what) + ": expected [B, 80, T], got " + std::to_string(x.dim()) +
                       "-d tensor" + (x.dim() >= 2 ? " with " + std::to_string(x.size(1)) + " rows" : ""));
  }
}

int groups_for(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

// Pads the time axis on the right to a multiple of `multiple`.
torch::Tensor pad_time(const torch::Tensor& x, std::int64_t multiple) {
  const std::int64_t t = x.size(-1);
  const std::int64_t extra = (multiple - t % multiple) % multiple;
  if (extra == 0) return x;
  return F::pad(x, F::PadFuncOptions({0, extra, 0, 0}).mode(torch::kReplicate));
}

// ---------------------------------------------------------------- enhancer

class EnhancerBlockImpl : public nn::Module {
 public:
  EnhancerBlockImpl(int in, int out)
      : norm1_(register_module("norm1", nn::GroupNorm(groups_for(in), in))),
        conv1_(register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)))),
        norm2_(register_module("norm2", nn::GroupNorm(groups_for(out), out))),
        conv2_(register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)))) {
    if (in != out) skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = conv1_(F::leaky_relu(norm1_(x), F::LeakyReLUFuncOptions().negative_slope(0.01)));
    h = conv2_(F::leaky_relu(norm2_(h), F::LeakyReLUFuncOptions().negative_slope(0.01)));
    return h + (skip_ ? skip_(x) : x);
  }

 private:
  nn::GroupNorm norm1_;
  nn::Conv2d conv1_;
  nn::GroupNorm norm2_;
  nn::Conv2d conv2_;
  nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(EnhancerBlock);

}  // namespace

ContentEnhancerImpl::ContentEnhancerImpl(const ModelConfig& cfg) : stages_(cfg.enhancer_stages) {
  if (stages_ < 1 || kNumMels % (1 << stages_) != 0) {
    throw InvalidInput("enhancer stages must divide the 80 mel rows evenly");
  }
  const int base = cfg.enhancer_base_channels;
  auto ch = [base](int s) { return base << s; };
  stem_ = register_module("stem", nn::Conv2d(nn::Conv2dOptions(1, base, 3).padding(1)));
  enc_ = register_module("enc", nn::ModuleList());
  down_ = register_module("down", nn::ModuleList());
  up_ = register_module("up", nn::ModuleList());
  dec_ = register_module("dec", nn::ModuleList());
  for (int s = 0; s < stages_; ++s) {
    enc_->push_back(EnhancerBlock(ch(s), ch(s)));
    down_->push_back(nn::Conv2d(nn::Conv2dOptions(ch(s), ch(s + 1), 3).stride(2).padding(1)));
  }
  mid_ = register_module("mid", nn::Sequential(EnhancerBlock(ch(stages_), ch(stages_)),
                                               EnhancerBlock(ch(stages_), ch(stages_))));
  for (int s = 0; s < stages_; ++s) {
    up_->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(ch(s + 1), ch(s), 2).stride(2)));
    dec_->push_back(EnhancerBlock(2 * ch(s), ch(s)));
  }
  head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(base, 1, 3).padding(1)));
  torch::NoGradGuard no_grad;
  head_->weight.zero_();
  head_->bias.zero_();
}

torch::Tensor ContentEnhancerImpl::forward(const torch::Tensor& x) {
  check_mel_batch(x, "enhance");
  const auto frames = x.size(2);
  // Channels-last layout takes the fast oneDNN convolution path on CPU.
  auto h = stem_(pad_time(x.unsqueeze(1), 1 << stages_).contiguous(torch::MemoryFormat::ChannelsLast));
  std::vector<torch::Tensor> skips;
  for (int s = 0; s < stages_; ++s) {
    h = enc_->at<EnhancerBlockImpl>(static_cast<std::size_t>(s)).forward(h);
    skips.push_back(h);
    h = down_->at<nn::Conv2dImpl>(static_cast<std::size_t>(s)).forward(h);
  }
  h = mid_->forward(h);
  for (int s = stages_ - 1; s >= 0; --s) {
    h = up_->at<nn::ConvTranspose2dImpl>(static_cast<std::size_t>(s)).forward(h);
    h = dec_->at<EnhancerBlockImpl>(static_cast<std::size_t>(s))
            .forward(torch::cat({h, skips[static_cast<std::size_t>(s)]}, 1));
  }
  auto residual = head_(h).squeeze(1).narrow(2, 0, frames);
  return x + residual;
}

// ---------------------------------------------------------------- encoders

namespace {

class AttentiveStatsPoolImpl : public nn::Module {
 public:
  AttentiveStatsPoolImpl(int channels, int hidden, bool global_context) : global_(global_context) {
    conv1_ = register_module(
        "conv1", nn::Conv1d(nn::Conv1dOptions(global_ ? 3 * channels : channels, hidden, 1)));
    if (global_) norm_ = register_module("norm", nn::BatchNorm1d(hidden));
    conv2_ = register_module("conv2", nn::Conv1d(nn::Conv1dOptions(hidden, channels, 1)));
  }

  /// h: [B, C, T] -> [B, 2C] (weighted mean and standard deviation).
  torch::Tensor forward(const torch::Tensor& h) {
    torch::Tensor ctx = h;
    if (global_) {
      const auto frames = h.size(2);
      auto mean = h.mean(2, true);
      auto sd = torch::sqrt(torch::var(h, 2, /*unbiased=*/false, /*keepdim=*/true).clamp_min(1e-5));
      ctx = torch::cat({h, mean.expand({-1, -1, frames}), sd.expand({-1, -1, frames})}, 1);
    }
    auto a = conv1_(ctx);
    a = global_ ? torch::tanh(norm_(torch::relu(a))) : torch::tanh(a);
    auto w = torch::softmax(conv2_(a), 2);
    auto mu = (h * w).sum(2);
    auto var = (h * h * w).sum(2) - mu * mu;
    return torch::cat({mu, torch::sqrt(var.clamp_min(1e-5))}, 1);
  }

 private:
  bool global_;
  nn::Conv1d conv1_{nullptr}, conv2_{nullptr};
  nn::BatchNorm1d norm_{nullptr};
};
TORCH_MODULE(AttentiveStatsPool);

void check_reference(const torch::Tensor& r) {
  check_mel_batch(r, "embed");
  if (r.size(2) < kMinReferenceFrames) {
    throw InvalidInput("reference has " + std::to_string(r.size(2)) + " frames; at least " +
                       std::to_string(kMinReferenceFrames) + " are required");
  }
}

class BaselineEncoderImpl : public EnvironmentEncoderImpl {
 public:
  explicit BaselineEncoderImpl(const ModelConfig& cfg) {
    const int ch = cfg.encoder_channels;
    conv_ = register_module("conv", nn::Conv1d(nn::Conv1dOptions(kNumMels, ch, 1)));
    norm_ = register_module("norm", nn::BatchNorm1d(ch));
    pool_ = register_module("pool", AttentiveStatsPool(ch, cfg.encoder_attention, false));
    pooled_norm_ = register_module("pooled_norm", nn::BatchNorm1d(2 * ch));
    fc_ = register_module("fc", nn::Linear(2 * ch, cfg.embedding_dim()));
  }

  torch::Tensor forward(const torch::Tensor& r) override {
    check_reference(r);
    auto h = norm_(torch::relu(conv_(r)));
    return fc_(pooled_norm_(pool_(h)));
  }

 private:
  nn::Conv1d conv_{nullptr};
  nn::BatchNorm1d norm_{nullptr}, pooled_norm_{nullptr};
  AttentiveStatsPool pool_{nullptr};
  nn::Linear fc_{nullptr};
};

// Conv1d -> ReLU -> BatchNorm, "same" length.
class TdnnUnitImpl : public nn::Module {
 public:
  TdnnUnitImpl(int in, int out, int kernel, int dilation)
      : conv_(register_module("conv", nn::Conv1d(nn::Conv1dOptions(in, out, kernel)
                                                     .dilation(dilation)
                                                     .padding(dilation * (kernel - 1) / 2)))),
        norm_(register_module("norm", nn::BatchNorm1d(out))) {}

  torch::Tensor forward(const torch::Tensor& x) { return norm_(torch::relu(conv_(x))); }

 private:
  nn::Conv1d conv_;
  nn::BatchNorm1d norm_;
};
TORCH_MODULE(TdnnUnit);

class SeRes2BlockImpl : public nn::Module {
 public:
  SeRes2BlockImpl(int channels, int kernel, int dilation, int scale) : scale_(scale) {
    if (channels % scale != 0) throw InvalidInput("encoder width must be divisible by the Res2 scale");
    const int width = channels / scale;
    pre_ = register_module("pre", TdnnUnit(channels, channels, 1, 1));
    branches_ = register_module("branches", nn::ModuleList());
    for (int i = 0; i < scale - 1; ++i) branches_->push_back(TdnnUnit(width, width, kernel, dilation));
    post_ = register_module("post", TdnnUnit(channels, channels, 1, 1));
    const int bottleneck = std::max(8, channels / 4);
    se_down_ = register_module("se_down", nn::Linear(channels, bottleneck));
    se_up_ = register_module("se_up", nn::Linear(bottleneck, channels));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = pre_(x);
    auto parts = h.chunk(scale_, 1);
    std::vector<torch::Tensor> outs;
    torch::Tensor carry;
    for (int i = 0; i < scale_ - 1; ++i) {
      auto in = i == 0 ? parts[0] : parts[static_cast<std::size_t>(i)] + carry;
      carry = branches_->at<TdnnUnitImpl>(static_cast<std::size_t>(i)).forward(in);
      outs.push_back(carry);
    }
    outs.push_back(parts[static_cast<std::size_t>(scale_ - 1)]);
    h = post_(torch::cat(outs, 1));
    auto s = torch::sigmoid(se_up_(torch::relu(se_down_(h.mean(2)))));
    return h * s.unsqueeze(2) + x;
  }

 private:
  int scale_;
  TdnnUnit pre_{nullptr}, post_{nullptr};
  nn::ModuleList branches_;
  nn::Linear se_down_{nullptr}, se_up_{nullptr};
};
TORCH_MODULE(SeRes2Block);

class EcapaEncoderImpl : public EnvironmentEncoderImpl {
 public:
  explicit EcapaEncoderImpl(const ModelConfig& cfg) {
    const int ch = cfg.encoder_channels;
    stem_ = register_module("stem", TdnnUnit(kNumMels, ch, 5, 1));
    block1_ = register_module("block1", SeRes2Block(ch, 3, 2, cfg.encoder_res2_scale));
    block2_ = register_module("block2", SeRes2Block(ch, 3, 3, cfg.encoder_res2_scale));
    block3_ = register_module("block3", SeRes2Block(ch, 3, 4, cfg.encoder_res2_scale));
    aggregate_ = register_module("aggregate", nn::Conv1d(nn::Conv1dOptions(3 * ch, 3 * ch, 1)));
    pool_ = register_module("pool", AttentiveStatsPool(3 * ch, cfg.encoder_attention, true));
    pooled_norm_ = register_module("pooled_norm", nn::BatchNorm1d(6 * ch));
    fc_ = register_module("fc", nn::Linear(6 * ch, cfg.embedding_dim()));
  }

  torch::Tensor forward(const torch::Tensor& r) override {
    check_reference(r);
    auto x0 = stem_(r);
    auto x1 = block1_(x0);
    auto x2 = block2_(x0 + x1);
    auto x3 = block3_(x0 + x1 + x2);
    auto h = torch::relu(aggregate_(torch::cat({x1, x2, x3}, 1)));
    return fc_(pooled_norm_(pool_(h)));
  }

 private:
  TdnnUnit stem_{nullptr};
  SeRes2Block block1_{nullptr}, block2_{nullptr}, block3_{nullptr};
  nn::Conv1d aggregate_{nullptr};
  AttentiveStatsPool pool_{nullptr};
  nn::BatchNorm1d pooled_norm_{nullptr};
  nn::Linear fc_{nullptr};
};

}  // namespace

std::shared_ptr<EnvironmentEncoderImpl> make_baseline_encoder(const ModelConfig& cfg) {
  return std::make_shared<BaselineEncoderImpl>(cfg);
}
std::shared_ptr<EnvironmentEncoderImpl> make_ecapa_encoder(const ModelConfig& cfg) {
  return std::make_shared<EcapaEncoderImpl>(cfg);
}
std::shared_ptr<EnvironmentEncoderImpl> make_encoder(const ModelConfig& cfg) {
  return cfg.encoder == EncoderKind::r1 ? make_baseline_encoder(cfg) : make_ecapa_encoder(cfg);
}

// ---------------------------------------------------------------- decoders

torch::Tensor step_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  auto freqs = torch::exp(torch::arange(half, torch::kFloat32) * (-std::log(10000.0) / std::max(1, half - 1)));
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

torch::Tensor concat_condition(const torch::Tensor& x_c, const torch::Tensor& z) {
  check_mel_batch(x_c, "build_condition");
  if (z.dim() != 2 || z.size(0) != x_c.size(0) || z.size(1) != kNumMels) {
    throw InvalidInput("U-Net conditioning needs a [B, 80] embedding");
  }
  return torch::cat({x_c, z.unsqueeze(2).expand({-1, -1, x_c.size(2)})}, 1);
}

torch::Tensor project_sum_condition(nn::Linear& projection, const torch::Tensor& x_c,
                                    const torch::Tensor& z) {
  check_mel_batch(x_c, "build_condition");
  const auto c = projection->options.out_features();
  if (z.dim() != 2 || z.size(0) != x_c.size(0) || z.size(1) != c) {
    throw InvalidInput("WaveNet conditioning needs a [B, " + std::to_string(c) + "] embedding");
  }
  auto projected = projection(x_c.transpose(1, 2)).transpose(1, 2);
  return projected + z.unsqueeze(2);
}

namespace {

class StepMlpImpl : public nn::Module {
 public:
  StepMlpImpl(int dim, int out) : dim_(dim) {
    fc1_ = register_module("fc1", nn::Linear(dim, 4 * dim));
    fc2_ = register_module("fc2", nn::Linear(4 * dim, out));
  }
  torch::Tensor forward(const torch::Tensor& t) {
    return fc2_(torch::silu(fc1_(step_embedding(t, dim_))));
  }

 private:
  int dim_;
  nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(StepMlp);

class WaveNetBlockImpl : public nn::Module {
 public:
  WaveNetBlockImpl(int channels, int cond_channels, int dilation) : channels_(channels) {
    step_ = register_module("step", nn::Linear(channels, channels));
    dilated_ = register_module(
        "dilated", nn::Conv1d(nn::Conv1dOptions(channels, 2 * channels, 3).dilation(dilation).padding(dilation)));
    cond_ = register_module("cond", nn::Conv1d(nn::Conv1dOptions(cond_channels, 2 * channels, 1)));
    out_ = register_module("out", nn::Conv1d(nn::Conv1dOptions(channels, 2 * channels, 1)));
  }

  /// Returns (residual output, skip contribution).
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, const torch::Tensor& step,
                                                  const torch::Tensor& cond) {
    auto y = x + step_(step).unsqueeze(2);
    auto a = dilated_(y) + cond_(cond);
    auto parts = a.chunk(2, 1);
    auto gated = torch::tanh(parts[0]) * torch::sigmoid(parts[1]);
    auto o = out_(gated).chunk(2, 1);
    return {(x + o[0]) / std::sqrt(2.0), o[1]};
  }

 private:
  int channels_;
  nn::Linear step_{nullptr};
  nn::Conv1d dilated_{nullptr}, cond_{nullptr}, out_{nullptr};
};
TORCH_MODULE(WaveNetBlock);

class WaveNetDecoderImpl : public DiffusionDecoderImpl {
 public:
  explicit WaveNetDecoderImpl(const ModelConfig& cfg) : embed_dim_(cfg.embedding_dim()) {
    const int r = cfg.wavenet_channels;
    projection_ = register_module("cond_projection", nn::Linear(kNumMels, embed_dim_));
    input_ = register_module("input", nn::Conv1d(nn::Conv1dOptions(kNumMels, r, 1)));
    step_ = register_module("step_mlp", StepMlp(cfg.step_embedding, r));
    blocks_ = register_module("blocks", nn::ModuleList());
    for (int i = 0; i < cfg.wavenet_blocks; ++i) {
      blocks_->push_back(WaveNetBlock(r, embed_dim_, 1 << (i % std::max(1, cfg.wavenet_dilation_cycle))));
    }
    skip_ = register_module("skip", nn::Conv1d(nn::Conv1dOptions(r, r, 1)));
    output_ = register_module("output", nn::Conv1d(nn::Conv1dOptions(r, kNumMels, 1)));
  }

  torch::Tensor condition(const torch::Tensor& x_c, const torch::Tensor& z) override {
    return project_sum_condition(projection_, x_c, z);
  }

  torch::Tensor forward(const torch::Tensor& y_t, const torch::Tensor& t, const torch::Tensor& cond) override {
    check_mel_batch(y_t, "decoder_predict");
    if (cond.dim() != 3 || cond.size(1) != embed_dim_ || cond.size(2) != y_t.size(2) ||
        cond.size(0) != y_t.size(0)) {
      throw InvalidInput("WaveNet condition shape does not match y_t");
    }
    auto h = torch::relu(input_(y_t));
    auto step = step_(t);
    torch::Tensor skip = torch::zeros_like(h);
    for (std::size_t i = 0; i < blocks_->size(); ++i) {
      auto [res, sk] = blocks_->at<WaveNetBlockImpl>(i).forward(h, step, cond);
      h = res;
      skip = skip + sk;
    }
    skip = skip / std::sqrt(static_cast<double>(blocks_->size()));
    return output_(torch::relu(skip_(skip)));
  }

 private:
  int embed_dim_;
  nn::Linear projection_{nullptr};
  nn::Conv1d input_{nullptr}, skip_{nullptr}, output_{nullptr};
  StepMlp step_{nullptr};
  nn::ModuleList blocks_;
};

class UNetBlockImpl : public nn::Module {
 public:
  UNetBlockImpl(int in, int out, int step_dim) {
    norm1_ = register_module("norm1", nn::GroupNorm(groups_for(in), in));
    conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
    step_ = register_module("step", nn::Linear(step_dim, out));
    norm2_ = register_module("norm2", nn::GroupNorm(groups_for(out), out));
    conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
    if (in != out) skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& step) {
    auto h = conv1_(torch::silu(norm1_(x)));
    h = h + step_(step).unsqueeze(2).unsqueeze(3);
    h = conv2_(torch::silu(norm2_(h)));
    return h + (skip_ ? skip_(x) : x);
  }

 private:
  nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  nn::Linear step_{nullptr};
};
TORCH_MODULE(UNetBlock);

class UNetDecoderImpl : public DiffusionDecoderImpl {
 public:
  explicit UNetDecoderImpl(const ModelConfig& cfg) : scales_(cfg.unet_scales) {
    if (scales_ < 1 || kNumMels % (1 << (scales_ - 1)) != 0) {
      throw InvalidInput("U-Net scales must divide the 80 mel rows evenly");
    }
    const int base = cfg.unet_base_channels;
    const int step_dim = 4 * cfg.step_embedding;
    auto ch = [base](int s) { return base << s; };
    step_ = register_module("step_mlp", StepMlp(cfg.step_embedding, step_dim));
    stem_ = register_module("stem", nn::Conv2d(nn::Conv2dOptions(3, base, 3).padding(1)));
    enc_ = register_module("enc", nn::ModuleList());
    down_ = register_module("down", nn::ModuleList());
    dec_ = register_module("dec", nn::ModuleList());
    up_ = register_module("up", nn::ModuleList());
    for (int s = 0; s < scales_; ++s) {
      enc_->push_back(UNetBlock(s == 0 ? base : ch(s - 1), ch(s), step_dim));
      if (s + 1 < scales_) {
        down_->push_back(nn::Conv2d(nn::Conv2dOptions(ch(s), ch(s), 3).stride(2).padding(1)));
      }
    }
    mid_ = register_module("mid", UNetBlock(ch(scales_ - 1), ch(scales_ - 1), step_dim));
    for (int s = 0; s < scales_; ++s) {
      dec_->push_back(UNetBlock(2 * ch(s), ch(s), step_dim));
      if (s > 0) up_->push_back(nn::Conv2d(nn::Conv2dOptions(ch(s), ch(s - 1), 3).padding(1)));
    }
    out_norm_ = register_module("out_norm", nn::GroupNorm(groups_for(base), base));
    head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(base, 1, 3).padding(1)));
  }

  torch::Tensor condition(const torch::Tensor& x_c, const torch::Tensor& z) override {
    return concat_condition(x_c, z);
  }

  torch::Tensor forward(const torch::Tensor& y_t, const torch::Tensor& t, const torch::Tensor& cond) override {
    check_mel_batch(y_t, "decoder_predict");
    if (cond.dim() != 3 || cond.size(1) != 2 * kNumMels || cond.size(2) != y_t.size(2) ||
        cond.size(0) != y_t.size(0)) {
      throw InvalidInput("U-Net condition shape does not match y_t");
    }
    const auto frames = y_t.size(2);
    // Stacked condition rows become two image channels aligned with the mel bins.
    auto x = torch::cat({y_t.unsqueeze(1), cond.view({cond.size(0), 2, kNumMels, frames})}, 1);
    x = pad_time(x, 1 << (scales_ - 1)).contiguous(torch::MemoryFormat::ChannelsLast);
    auto step = step_(t);
    auto h = stem_(x);
    std::vector<torch::Tensor> skips;
    for (int s = 0; s < scales_; ++s) {
      h = enc_->at<UNetBlockImpl>(static_cast<std::size_t>(s)).forward(h, step);
      skips.push_back(h);
      if (s + 1 < scales_) h = down_->at<nn::Conv2dImpl>(static_cast<std::size_t>(s)).forward(h);
    }
    h = mid_(h, step);
    for (int s = scales_ - 1; s >= 0; --s) {
      h = dec_->at<UNetBlockImpl>(static_cast<std::size_t>(s))
              .forward(torch::cat({h, skips[static_cast<std::size_t>(s)]}, 1), step);
      if (s > 0) {
        h = F::interpolate(h, F::InterpolateFuncOptions()
                                  .scale_factor(std::vector<double>{2.0, 2.0})
                                  .mode(torch::kNearest));
        h = up_->at<nn::Conv2dImpl>(static_cast<std::size_t>(s - 1)).forward(h);
      }
    }
    return head_(torch::silu(out_norm_(h))).squeeze(1).narrow(2, 0, frames);
  }

 private:
  int scales_;
  StepMlp step_{nullptr};
  nn::Conv2d stem_{nullptr}, head_{nullptr};
  nn::ModuleList enc_, down_, dec_, up_;
  UNetBlock mid_{nullptr};
  nn::GroupNorm out_norm_{nullptr};
};

}  // namespace

std::shared_ptr<DiffusionDecoderImpl> make_wavenet_decoder(const ModelConfig& cfg) {
  return std::make_shared<WaveNetDecoderImpl>(cfg);
}
std::shared_ptr<DiffusionDecoderImpl> make_unet_decoder(const ModelConfig& cfg) {
  return std::make_shared<UNetDecoderImpl>(cfg);
}
std::shared_ptr<DiffusionDecoderImpl> make_decoder(const ModelConfig& cfg) {
  return cfg.decoder == DecoderKind::wavenet ? make_wavenet_decoder(cfg) : make_unet_decoder(cfg);
}

// ---------------------------------------------------------------- bundle

TransferModel::TransferModel(const ModelConfig& cfg)
    : config(cfg), encoder(make_encoder(cfg)), decoder(make_decoder(cfg)) {
  if (cfg.use_enhancer) enhancer = ContentEnhancer(cfg);
}

torch::Tensor TransferModel::content(const torch::Tensor& x) {
  if (!config.use_enhancer) return x;
  torch::NoGradGuard no_grad;
  return enhancer->forward(x);
}

void TransferModel::eval() {
  if (enhancer) enhancer->eval();
  encoder->eval();
  decoder->eval();
}

void TransferModel::train_mode() {
  // The enhancer stays in inference mode: its parameters are frozen here.
  if (enhancer) enhancer->eval();
  encoder->train();
  decoder->train();
}

std::vector<torch::Tensor> TransferModel::joint_parameters() const {
  auto params = encoder->parameters();
  auto dec = decoder->parameters();
  params.insert(params.end(), dec.begin(), dec.end());
  return params;
}

torch::Tensor to_tensor(const Grid& g) {
  return torch::from_blob(const_cast<float*>(g.data()),
                          {1, static_cast<std::int64_t>(g.rows()), static_cast<std::int64_t>(g.cols())},
                          torch::kFloat32)
      .clone();
}

Grid to_grid(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  if (c.dim() == 3 && c.size(0) == 1) c = c.squeeze(0);
  if (c.dim() != 2) throw InvalidInput("to_grid expects a 2-d tensor");
  std::vector<float> data(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
  return Grid(static_cast<std::size_t>(c.size(0)), static_cast<std::size_t>(c.size(1)), std::move(data));
}

torch::Tensor to_batch(const std::vector<const Grid*>& grids) {
  if (grids.empty()) throw InvalidInput("empty batch");
  std::vector<torch::Tensor> parts;
  parts.reserve(grids.size());
  for (const Grid* g : grids) {
    if (!g->same_shape(*grids.front())) throw InvalidInput("batch grids differ in shape");
    parts.push_back(to_tensor(*g));
  }
  return torch::cat(parts, 0);
}

MelSpectrogram enhance(ContentEnhancer& enhancer, const MelSpectrogram& x) {
  if (!x.normalized) throw InvalidInput("enhance expects a normalized mel spectrogram");
  torch::NoGradGuard no_grad;
  MelSpectrogram out = x;
  out.values = to_grid(enhancer->forward(to_tensor(x.values)));
  return out;
}

std::vector<float> embed(EnvironmentEncoderImpl& encoder, const MelSpectrogram& r) {
  if (!r.normalized) throw InvalidInput("embed expects a normalized mel spectrogram");
  torch::NoGradGuard no_grad;
  auto z = encoder.forward(to_tensor(r.values)).contiguous();
  return {z.data_ptr<float>(), z.data_ptr<float>() + z.numel()};
}

std::uint64_t parameter_hash(const nn::Module& m) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const torch::Tensor& t) {
    auto c = t.detach().contiguous();
    const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
    const auto n = static_cast<std::size_t>(c.numel()) * c.element_size();
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& p : m.parameters()) mix(p);
  for (const auto& b : m.buffers()) mix(b);
  return h;
}

std::size_t parameter_count(const nn::Module& m) {
  std::size_t n = 0;
  for (const auto& p : m.parameters()) n += static_cast<std::size_t>(p.numel());
  return n;
}

}  // namespace envtransfer
