#include "envtransfer/diffusion.hpp"

#include <fstream>

#include <json.hpp>

namespace envtransfer {

void write_schedule(const std::filesystem::path& path, const NoiseSchedule& s) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  nlohmann::json j = {{"T", s.steps()}, {"beta", s.betas()}};
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

NoiseSchedule read_schedule(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto betas = j.at("beta").get<std::vector<double>>();
  if (j.at("T").get<int>() != static_cast<int>(betas.size())) {
    throw ConfigError(path.string() + ": T does not match the beta count");
  }
  return NoiseSchedule(std::move(betas));
}

}  // namespace envtransfer
