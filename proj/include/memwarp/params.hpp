#pragma once

#include "memwarp/io.hpp"
#include "memwarp/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace memwarp {

template <typename T>
struct ParamEntry {
  std::vector<int> shape;
  ArrayX<T> value;
  ArrayX<T> grad;

  Eigen::Index size() const { return value.size(); }
};

// Flat registry of named trainable arrays with paired gradient buffers.
template <typename T>
struct ModelParams {
  std::map<std::string, ParamEntry<T>> entries;

  ParamEntry<T>& add(const std::string& name, std::vector<int> shape) {
    if (entries.count(name))
      throw std::invalid_argument("ModelParams: duplicate name " + name);
    Eigen::Index n = 1;
    for (int d : shape) n *= d;
    auto& e = entries[name];
    e.shape = std::move(shape);
    e.value = ArrayX<T>::Zero(n);
    e.grad = ArrayX<T>::Zero(n);
    return e;
  }

  ParamEntry<T>& at(const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw std::invalid_argument("ModelParams: unknown name " + name);
    return it->second;
  }
  const ParamEntry<T>& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end())
      throw std::invalid_argument("ModelParams: unknown name " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return entries.count(name) != 0; }

  void zero_grads() {
    for (auto& [name, e] : entries) e.grad.setZero();
  }

  Eigen::Index total_size() const {
    Eigen::Index n = 0;
    for (auto& [name, e] : entries) n += e.size();
    return n;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (auto& [name, e] : entries) {
      auto& o = out.entries[name];
      o.shape = e.shape;
      o.value = e.value.template cast<U>();
      o.grad = ArrayX<U>::Zero(e.value.size());
    }
    return out;
  }
};

// Uniform fan-in initialization for a conv weight, zero bias.
template <typename T>
void init_conv(ParamEntry<T>& w, int fan_in, std::mt19937& rng) {
  const double limit = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> u(-limit, limit);
  for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value[i] = T(u(rng));
}

// Checkpoint: manifest.json naming one tensor file per parameter slice.
template <typename T>
void save_checkpoint(const ModelParams<T>& params,
                     const std::filesystem::path& dir,
                     const nlohmann::json& extra = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "memwarp-checkpoint";
  manifest["version"] = 1;
  if (!extra.is_null() && !extra.empty()) manifest["model"] = extra;
  auto& list = manifest["params"] = nlohmann::json::array();
  int idx = 0;
  for (auto& [name, e] : params.entries) {
    const std::string file = "p" + std::to_string(idx++) + ".mwtn";
    FeatureMap<T> flat(1, 1, static_cast<int>(e.size()));
    flat.data = e.value;
    write_tensor(dir / file, flat);
    list.push_back({{"name", name}, {"file", file}, {"shape", e.shape}});
  }
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw FormatError("save_checkpoint: write failed in " + dir.string());
}

template <typename T>
nlohmann::json load_checkpoint(ModelParams<T>& params,
                               const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is)
    throw FormatError("load_checkpoint: missing manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_checkpoint: bad manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "memwarp-checkpoint")
    throw FormatError("load_checkpoint: not a checkpoint manifest");
  params.entries.clear();
  for (const auto& item : manifest.at("params")) {
    const std::string name = item.at("name");
    const std::vector<int> shape = item.at("shape");
    auto m = read_tensor(dir / item.at("file").get<std::string>());
    auto& e = params.add(name, shape);
    if (m.data.size() != e.value.size())
      throw FormatError("load_checkpoint: size mismatch for " + name);
    e.value = m.data.template cast<T>();
  }
  return manifest.value("model", nlohmann::json::object());
}

}  // namespace memwarp
