#include "../catch_torch.hpp"

#include <fstream>

#include "../support.hpp"
#include "envtransfer/errors.hpp"
#include "envtransfer/training.hpp"

using namespace envtransfer;
using Catch::Approx;

namespace {

const testing::TempDir& corpus_dir() {
  static testing::TempDir dir("train_corpus");
  static const bool ready = [] {
    CorpusSource src;
    src.n_utterances = 8;
    src.utterances_per_speaker = 2;
    src.seconds = 1.5;
    generate_corpus(src, default_environments(3, 5), dir.path(), 21);
    return true;
  }();
  (void)ready;
  return dir;
}

const CorpusData& train_split() {
  static CorpusData data(read_manifest(corpus_dir().path()), corpus_dir().path(), Split::train);
  return data;
}

TrainConfig small_config(const std::filesystem::path& out) {
  TrainConfig c;
  c.batch_size = 2;
  c.total_steps = 3;
  c.lr_halving_interval = 100;
  c.log_every = 1;
  c.checkpoint_every = 2;
  c.aug_bank_variants = 1;
  c.out_dir = out;
  c.data_dir = corpus_dir().path();
  c.schedule = ScheduleParams{20, 1e-3, 0.3};
  return c;
}

}  // namespace

TEST_CASE("learning rate halves every interval") {
  TrainConfig c;
  c.lr_start = 8e-4;
  c.lr_halving_interval = 500;
  CHECK(learning_rate(c, 0) == 8e-4);
  CHECK(learning_rate(c, 499) == 8e-4);
  CHECK(learning_rate(c, 500) == 4e-4);
  CHECK(learning_rate(c, 1000) == Approx(2e-4).epsilon(1e-15));
  for (std::int64_t s = 0; s < 5000; s += 37) {
    REQUIRE(learning_rate(c, s) == Approx(8e-4 * std::pow(0.5, static_cast<double>(s / 500))).epsilon(1e-15));
  }
}

TEST_CASE("train config validation and json") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.lr_start = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.total_steps = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.schedule.beta_end = 2.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  c.batch_size = 5;
  c.model.decoder = DecoderKind::wavenet;
  nlohmann::json j = c;
  TrainConfig back;
  j.get_to(back);
  CHECK(back.batch_size == 5);
  CHECK(back.model.decoder == DecoderKind::wavenet);

  TrainConfig partial;
  nlohmann::json p = {{"lr_start", 1e-3}};
  p.get_to(partial);
  CHECK(partial.lr_start == 1e-3);
  CHECK(partial.batch_size == TrainConfig{}.batch_size);
  CHECK_THROWS_AS(nlohmann::json({{"learning_rate", 1}}).get<TrainConfig>(), ConfigError);
}

TEST_CASE("batches are deterministic per step and normalized") {
  const auto& data = train_split();
  testing::TempDir out("train");
  auto cfg = small_config(out.path());
  const auto stats = data.fit_norm_stats();
  SamplerOptions opt;
  opt.bank_variants = 1;
  const TripletSampler sampler(data, opt);
  const auto a = joint_batch(sampler, cfg, stats, 4);
  const auto b = joint_batch(sampler, cfg, stats, 4);
  const auto c = joint_batch(sampler, cfg, stats, 5);
  CHECK(a.x.sizes() == torch::IntArrayRef({2, 80, cfg.crop_frames}));
  CHECK(a.r.sizes() == torch::IntArrayRef({2, 80, cfg.ref_crop_frames}));
  CHECK(torch::equal(a.x, b.x));
  CHECK(torch::equal(a.r, b.r));
  CHECK_FALSE(torch::equal(a.y, c.y));
  CHECK(a.y.min().item<float>() >= -1.0f);
  CHECK(a.y.max().item<float>() <= 1.0f);
}

TEST_CASE("enhancer loss at step 0 equals the unprocessed distance") {
  const auto& data = train_split();
  testing::TempDir out("train");
  auto cfg = small_config(out.path());
  const auto stats = data.fit_norm_stats();
  const TripletSampler sampler(data, SamplerOptions{});
  const auto b = enhancer_batch(sampler, cfg, stats, 0);
  const double unprocessed = (b.x - b.y).abs().mean().item<double>();
  torch::manual_seed(1);
  EnhancerTrainer trainer(cfg, ContentEnhancer(cfg.model));
  CHECK(trainer.step(b.x, b.y) == Approx(unprocessed).epsilon(1e-6));
  CHECK(trainer.steps_done() == 1);
}

TEST_CASE("joint training leaves the enhancer untouched and reaches the encoder") {
  const auto& data = train_split();
  testing::TempDir out("train");
  auto cfg = small_config(out.path());
  const auto stats = data.fit_norm_stats();
  const TripletSampler sampler(data, SamplerOptions{});
  torch::manual_seed(2);
  TransferModel model(cfg.model);
  {
    torch::NoGradGuard ng;
    for (auto& p : model.enhancer->parameters()) p.add_(torch::randn_like(p) * 0.01);
  }
  const auto before = parameter_hash(*model.enhancer);
  const auto enc_before = parameter_hash(*model.encoder);
  JointTrainer trainer(cfg, model);
  for (std::int64_t s = 0; s < 3; ++s) {
    const auto b = joint_batch(sampler, cfg, stats, s);
    const double l = trainer.step(b.x, b.r, b.y);
    CHECK(std::isfinite(l));
    if (s == 0) CHECK(trainer.last_encoder_grad_norm() > 0.0);
  }
  CHECK(parameter_hash(*model.enhancer) == before);
  CHECK(parameter_hash(*model.encoder) != enc_before);

  auto mismatch = cfg;
  mismatch.model.decoder = DecoderKind::wavenet;
  CHECK_THROWS_AS(JointTrainer(mismatch, model), InvalidInput);
}

TEST_CASE("joint stage refuses to start without an enhancer checkpoint") {
  testing::TempDir out("train");
  auto cfg = small_config(out.path());
  CHECK_THROWS_AS(train_joint(cfg, train_split()), ConfigError);
  cfg.enhancer_ckpt = out / "missing.ckpt";
  CHECK_THROWS_AS(train_joint(cfg, train_split()), IoError);
}

TEST_CASE("two-stage pipeline writes checkpoints and logs; transfer is reproducible") {
  testing::TempDir out("train");
  auto ecfg = small_config(out / "enh");
  ecfg.stage = Stage::enhancer;
  const auto er = train_enhancer(ecfg, train_split());
  REQUIRE(std::filesystem::exists(er.checkpoint));
  CHECK(er.losses.size() == 3);
  CHECK(read_checkpoint_info(er.checkpoint).stage == Stage::enhancer);

  auto jcfg = small_config(out / "joint");
  jcfg.enhancer_ckpt = er.checkpoint;
  const auto jr = train_joint(jcfg, train_split());
  REQUIRE(std::filesystem::exists(jr.checkpoint));
  CHECK(jr.stats.max_log_mel == er.stats.max_log_mel);
  std::ifstream log(out / "joint" / kLossLog);
  std::string header;
  std::getline(log, header);
  CHECK(header == "step\tlr\tloss");
  const auto info = read_checkpoint_info(jr.checkpoint);
  CHECK(info.step == 3);
  CHECK(info.schedule == jcfg.schedule);

  // The enhancer weights in the joint checkpoint are the stage-one weights.
  ContentEnhancer stage_one(ModelConfig{});
  load_enhancer(er.checkpoint, stage_one);
  CHECK(parameter_hash(*load_model(jr.checkpoint).model.enhancer) == parameter_hash(*stage_one));

  const auto root = corpus_dir().path();
  const auto content = root / "room_white" / "u0000.wav";
  const auto reference = root / "clean" / "u0003.wav";
  REQUIRE(std::filesystem::exists(content));
  const auto a = transfer(content, reference, jr.checkpoint, out / "t1", 42, 4);
  const auto b = transfer(content, reference, jr.checkpoint, out / "t2", 42, 4);
  const auto c = transfer(content, reference, jr.checkpoint, out / "t3", 43, 4);
  CHECK(a.mel.n_mels() == 80);
  CHECK(a.mel.n_frames() == 251);
  CHECK(a.mel.values.values() == b.mel.values.values());
  CHECK(a.mel.values.values() != c.mel.values.values());
  CHECK(read_mel(a.mel_path).values.values() == a.mel.values.values());
  CHECK(load_audio(a.wav_path).n_samples() == 64000);
  CHECK(std::filesystem::exists(a.meta_path));
  CHECK_THROWS_AS(transfer(root / "nope.wav", reference, jr.checkpoint, out / "t4", 1, 4), IoError);
  CHECK_THROWS_AS(transfer(content, reference, er.checkpoint, out / "t5", 1, 4), ConfigError);
}

TEST_CASE("ablation without the enhancer never builds one") {
  testing::TempDir out("train");
  auto cfg = small_config(out.path());
  cfg.model.use_enhancer = false;
  cfg.model.decoder = DecoderKind::wavenet;
  cfg.model.encoder = EncoderKind::r1;
  const auto r = train_joint(cfg, train_split());
  auto loaded = load_model(r.checkpoint);
  CHECK_FALSE(static_cast<bool>(loaded.model.enhancer));
  const auto x = torch::rand({1, 80, 20});
  CHECK(torch::equal(loaded.model.content(x), x));
  auto no_enh = cfg;
  CHECK_THROWS_AS(train_enhancer(no_enh, train_split()), ConfigError);
}

TEST_CASE("loss summaries") {
  const std::vector<double> v{4, 3, 2, 1};
  CHECK(head_mean(v, 2) == 3.5);
  CHECK(tail_mean(v, 2) == 1.5);
  CHECK(tail_mean(v, 10) == 2.5);
}
