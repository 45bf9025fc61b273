#include "envtransfer/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "envtransfer/errors.hpp"

namespace envtransfer {
namespace {

constexpr std::array<char, 4> kMagic{'E', 'T', 'C', 'K'};

std::vector<std::pair<std::string, torch::Tensor>> collect(const ModuleSet& modules) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& [prefix, module] : modules) {
    for (const auto& item : module->named_parameters(true)) out.emplace_back(prefix + "." + item.key(), item.value());
    for (const auto& item : module->named_buffers(true)) out.emplace_back(prefix + "." + item.key(), item.value());
  }
  return out;
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError("truncated checkpoint " + path.string());
  return v;
}

struct Parsed {
  CheckpointInfo info;
  nlohmann::json tensors;
  std::streamoff data_start = 0;
};

Parsed parse_header(std::ifstream& in, const std::filesystem::path& path) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  if (magic != kMagic) throw ConfigError(path.string() + " is not a checkpoint file");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw ConfigError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get<std::uint64_t>(in, path);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("truncated checkpoint " + path.string());
  Parsed p;
  try {
    const auto j = nlohmann::json::parse(text);
    p.info.stage = stage_from_string(j.at("stage").get<std::string>());
    p.info.model = j.at("model").get<ModelConfig>();
    p.info.stats = {j.at("norm_stats").at("min_log_mel").get<double>(),
                    j.at("norm_stats").at("max_log_mel").get<double>()};
    const auto& s = j.at("schedule");
    p.info.schedule = {s.at("T").get<int>(), s.at("beta_start").get<double>(), s.at("beta_end").get<double>()};
    p.info.step = j.at("step").get<std::int64_t>();
    p.tensors = j.at("tensors");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  p.data_start = in.tellg();
  return p;
}

}  // namespace

std::string to_string(Stage s) { return s == Stage::enhancer ? "enhancer" : "joint"; }

Stage stage_from_string(const std::string& s) {
  if (s == "enhancer") return Stage::enhancer;
  if (s == "joint") return Stage::joint;
  throw ConfigError("unknown training stage '" + s + "'");
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointInfo& info, const ModuleSet& modules) {
  const auto tensors = collect(modules);
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    table.push_back({{"name", name}, {"shape", t.sizes().vec()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.numel());
  }
  const nlohmann::json header = {
      {"stage", to_string(info.stage)},
      {"model", info.model},
      {"norm_stats", {{"min_log_mel", info.stats.min_log_mel}, {"max_log_mel", info.stats.max_log_mel}}},
      {"schedule", {{"T", info.schedule.steps}, {"beta_start", info.schedule.beta_start},
                    {"beta_end", info.schedule.beta_end}}},
      {"step", info.step},
      {"tensors", table}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling then rename so a crash never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& entry : tensors) {
      auto c = entry.second.detach().to(torch::kFloat32).contiguous();
      out.write(reinterpret_cast<const char*>(c.data_ptr<float>()),
                static_cast<std::streamsize>(c.numel() * sizeof(float)));
    }
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return parse_header(in, path).info;
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, const ModuleSet& modules) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const Parsed p = parse_header(in, path);
  std::map<std::string, nlohmann::json> index;
  for (const auto& t : p.tensors) index[t.at("name").get<std::string>()] = t;

  torch::NoGradGuard no_grad;
  for (auto& [name, tensor] : collect(modules)) {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError(path.string() + " has no tensor '" + name + "'");
    const auto shape = it->second.at("shape").get<std::vector<std::int64_t>>();
    if (shape != tensor.sizes().vec()) {
      throw ConfigError(path.string() + ": shape mismatch for '" + name + "'");
    }
    const auto offset = it->second.at("offset").get<std::uint64_t>();
    std::vector<float> buf(static_cast<std::size_t>(tensor.numel()));
    in.seekg(p.data_start + static_cast<std::streamoff>(offset * sizeof(float)));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint " + path.string());
    auto src = torch::from_blob(buf.data(), shape, torch::kFloat32).to(tensor.dtype());
    tensor.copy_(src);
  }
  return p.info;
}

void save_enhancer(const std::filesystem::path& path, ContentEnhancer& enhancer, const CheckpointInfo& info) {
  CheckpointInfo i = info;
  i.stage = Stage::enhancer;
  save_checkpoint(path, i, {{"enhancer", enhancer.get()}});
}

namespace {
ModuleSet model_modules(TransferModel& model) {
  ModuleSet set;
  if (model.enhancer) set.emplace_back("enhancer", model.enhancer.get());
  set.emplace_back("encoder", model.encoder.get());
  set.emplace_back("decoder", model.decoder.get());
  return set;
}
}  // namespace

void save_model(const std::filesystem::path& path, TransferModel& model, const CheckpointInfo& info) {
  CheckpointInfo i = info;
  i.stage = Stage::joint;
  i.model = model.config;
  save_checkpoint(path, i, model_modules(model));
}

LoadedModel load_model(const std::filesystem::path& path) {
  const auto info = read_checkpoint_info(path);
  if (info.stage != Stage::joint) {
    throw ConfigError(path.string() + " is an enhancer checkpoint; transfer needs a jointly trained model");
  }
  if (!info.stats.valid()) throw ConfigError(path.string() + " carries degenerate normalization stats");
  LoadedModel out{info, TransferModel(info.model)};
  load_checkpoint(path, model_modules(out.model));
  out.model.eval();
  return out;
}

CheckpointInfo load_enhancer(const std::filesystem::path& path, ContentEnhancer& enhancer) {
  return load_checkpoint(path, {{"enhancer", enhancer.get()}});
}

}  // namespace envtransfer
