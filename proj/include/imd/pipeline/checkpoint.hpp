#pragma once

// Checkpoint = directory of IMDT tensors plus manifest.json mapping each
// parameter name to its file and recording the model spec.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "imd/pipeline/model.hpp"

namespace imd::pipeline {

struct Checkpoint {
  ModelSpec spec;
  ParamSet<float> params;
  long step = 0;
};

/// Lines "path: expected -> found" for every leaf where two JSON documents differ.
inline std::string json_diff(const nlohmann::json& expected, const nlohmann::json& found) {
  std::string out;
  for (const auto& op : nlohmann::json::diff(expected, found)) {
    const std::string path = op["path"].get<std::string>();
    const std::string kind = op["op"].get<std::string>();
    const auto want = nlohmann::json::json_pointer(path);
    std::string before = expected.contains(want) ? expected[want].dump() : "<absent>";
    std::string after = kind == "remove" ? "<absent>" : op["value"].dump();
    out += "  " + path + ": " + before + " -> " + after + "\n";
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& dir, const ParamSet<float>& params, const ModelSpec& spec,
                            long step) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, t] : params) {
    const std::string file = name + ".imdt";
    write_tensor(dir / file, t);
    tensors[name] = file;
  }
  const nlohmann::json manifest = {
      {"format", "imd-checkpoint"}, {"version", 1}, {"step", step}, {"spec", to_json(spec)}, {"tensors", tensors}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

/// Loads a checkpoint; when `expected` is given its spec must equal the stored one.
inline Checkpoint load_checkpoint(const std::filesystem::path& dir, const std::optional<ModelSpec>& expected = {}) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw Error("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(dir.string() + "/manifest.json: " + e.what());
  }
  if (manifest.value("format", "") != "imd-checkpoint") throw Error(dir.string() + " is not an imd checkpoint");
  Checkpoint ck;
  ck.spec = model_spec_from_json(manifest.at("spec"));
  ck.step = manifest.value("step", 0L);
  if (expected) {
    const auto want = to_json(*expected), have = to_json(ck.spec);
    if (want != have)
      throw SpecMismatch("checkpoint " + dir.string() + " was written for a different model spec", json_diff(want, have));
  }
  for (const auto& [name, file] : manifest.at("tensors").items())
    ck.params.emplace(name, read_tensor_as<float>(dir / file.get<std::string>()));
  const auto reference = init_params(ck.spec, 0);
  for (const auto& [name, t] : reference) {
    auto it = ck.params.find(name);
    if (it == ck.params.end()) throw Error("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape != t.shape)
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape) + ", spec needs " +
                       shape_str(t.shape));
  }
  return ck;
}

}  // namespace imd::pipeline
