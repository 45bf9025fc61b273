#include "../catch_torch.hpp"

#include <fstream>
#include <sstream>

#include "../support.hpp"
#include "envtransfer/cli.hpp"

using namespace envtransfer;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "envtransfer");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("schedule-check reports the invariants") {
  const auto ok = cli({"schedule-check", "--T", "100", "--beta-start", "1e-4", "--beta-end", "0.06"});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("posterior_var[1] = 0:") != std::string::npos);
  CHECK(ok.out.find("VIOLATED") == std::string::npos);

  const auto shallow = cli({"schedule-check", "--T", "10", "--beta-end", "0.02"});
  CHECK(shallow.code == 1);
  CHECK(shallow.out.find("alpha_bar_T >= 0.05") != std::string::npos);

  const auto inverted = cli({"schedule-check", "--beta-start", "0.1", "--beta-end", "0.05"});
  CHECK(inverted.code == 1);
  CHECK(inverted.err.rfind("error:", 0) == 0);

  testing::TempDir dir("cli");
  CHECK(cli({"schedule-check", "--dump", (dir / "s.json").string()}).code == 0);
  CHECK(std::filesystem::exists(dir / "s.json"));
}

TEST_CASE("usage errors exit 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"schedule-check", "--no-such-flag"}).code == 2);
  CHECK(cli({"schedule-check", "--T", "abc"}).code == 2);
}

TEST_CASE("transfer with a missing file is an I/O error") {
  testing::TempDir dir("cli");
  const auto r = cli({"transfer", "--content", (dir / "a.wav").string(), "--reference", (dir / "b.wav").string(),
                      "--ckpt", (dir / "c").string(), "--out", (dir / "o").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("no such file") != std::string::npos);
}

TEST_CASE("synth-data is deterministic and reproducible from its snapshot") {
  testing::TempDir dir("cli");
  const std::vector<std::string> common{"--envs", "3", "--utts", "4", "--utts-per-speaker", "2", "--seconds", "0.5",
                                        "--seed", "7"};
  auto a = std::vector<std::string>{"synth-data", "--out", (dir / "a").string()};
  auto b = std::vector<std::string>{"synth-data", "--out", (dir / "b").string()};
  a.insert(a.end(), common.begin(), common.end());
  b.insert(b.end(), common.begin(), common.end());
  REQUIRE(cli(a).code == 0);
  REQUIRE(cli(b).code == 0);
  CHECK(slurp(dir / "a/manifest.tsv") == slurp(dir / "b/manifest.tsv"));
  CHECK(slurp(dir / "a/environments.json") == slurp(dir / "b/environments.json"));

  const auto snap = dir / "a/resolved_config.json";
  REQUIRE(std::filesystem::exists(snap));
  REQUIRE(cli({"synth-data", "--config", snap.string(), "--out", (dir / "c").string()}).code == 0);
  CHECK(slurp(dir / "a/manifest.tsv") == slurp(dir / "c/manifest.tsv"));
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir / "a")) {
    if (entry.path().extension() != ".wav") continue;
    const auto rel = std::filesystem::relative(entry.path(), dir / "a");
    REQUIRE(slurp(entry.path()) == slurp(dir / "c" / rel));
  }

  std::ofstream(dir / "bad.json") << R"({"out_dir": "x", "utterances": 3})";
  CHECK(cli({"synth-data", "--config", (dir / "bad.json").string()}).code == 1);
  CHECK(cli({"synth-data", "--config", (dir / "missing.json").string()}).code == 1);
}

TEST_CASE("train, transfer, evaluate and embed through the command line") {
  testing::TempDir dir("cli");
  const auto data = (dir / "data").string();
  REQUIRE(cli({"synth-data", "--out", data, "--envs", "3", "--utts", "6", "--utts-per-speaker", "1", "--seconds",
               "1", "--test-fraction", "0.5", "--seed", "3"})
              .code == 0);
  const auto joint_order = cli({"train", "--data", data, "--out", (dir / "j0").string(), "--steps", "2"});
  CHECK(joint_order.code == 1);
  CHECK(joint_order.err.find("enhancer") != std::string::npos);

  const auto enh = cli({"train-enhancer", "--data", data, "--out", (dir / "enh").string(), "--steps", "2",
                        "--batch-size", "2"});
  REQUIRE(enh.code == 0);
  const auto joint = cli({"train", "--data", data, "--out", (dir / "joint").string(), "--steps", "2", "--batch-size",
                          "2", "--enhancer-ckpt", (dir / "enh/enhancer.ckpt").string(), "--T", "10",
                          "--beta-end", "0.5"});
  REQUIRE(joint.code == 0);
  const auto ckpt = (dir / "joint/model.ckpt").string();
  REQUIRE(std::filesystem::exists(ckpt));
  CHECK(std::filesystem::exists(dir / "joint/loss.tsv"));
  CHECK(std::filesystem::exists(dir / "joint/resolved_config.json"));

  const auto content = (dir / "data/room_white/u0000.wav").string();
  const auto reference = (dir / "data/clean/u0001.wav").string();
  const auto t1 = cli({"transfer", "--content", content, "--reference", reference, "--ckpt", ckpt, "--out",
                       (dir / "t1").string(), "--seed", "5", "--gl-iters", "2"});
  const auto t2 = cli({"transfer", "--content", content, "--reference", reference, "--ckpt", ckpt, "--out",
                       (dir / "t2").string(), "--seed", "5", "--gl-iters", "2"});
  REQUIRE(t1.code == 0);
  REQUIRE(t2.code == 0);
  CHECK(slurp(dir / "t1/transfer.emel") == slurp(dir / "t2/transfer.emel"));
  CHECK(std::filesystem::exists(dir / "t1/transfer.wav"));

  const auto ev = cli({"evaluate", "--ckpt", ckpt, "--data", data, "--out", (dir / "eval").string(), "--case",
                       "env_to_clean", "--pairs", "2", "--gl-iters", "0"});
  REQUIRE(ev.code == 0);
  CHECK(std::filesystem::exists(dir / "eval/eval_env_to_clean.tsv"));
  CHECK_FALSE(std::filesystem::exists(dir / "eval/eval_env_to_env.tsv"));

  const auto em = cli({"embed", "--ckpt", ckpt, "--data", data, "--out", (dir / "emb").string()});
  REQUIRE(em.code == 0);
  CHECK(std::filesystem::exists(dir / "emb/embeddings.tsv"));
  CHECK(std::filesystem::exists(dir / "emb/analysis.json"));

  CHECK(cli({"evaluate", "--ckpt", ckpt, "--data", data, "--out", (dir / "e2").string(), "--case", "sideways"})
            .code == 1);
}
