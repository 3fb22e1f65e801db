#include "sambay/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <set>

namespace sambay {

namespace fs = std::filesystem;

namespace {

std::string norm_name(NormKind k) { return k == NormKind::RMS ? "rms" : "layer"; }

NormKind parse_norm(const std::string& s) {
  if (s == "rms") return NormKind::RMS;
  if (s == "layer") return NormKind::Layer;
  throw ConfigError("config: norm must be \"rms\" or \"layer\", got \"" + s + "\"");
}

template <typename V>
V get_as(const json& j, const std::string& key) {
  try {
    if constexpr (std::is_same_v<V, std::size_t>) {
      if (!j.is_number_integer() || j.get<long long>() < 0) throw ConfigError("");
    } else if constexpr (std::is_same_v<V, bool>) {
      if (!j.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_same_v<V, double>) {
      if (!j.is_number()) throw ConfigError("");
    } else {
      if (!j.is_string()) throw ConfigError("");
    }
    return j.get<V>();
  } catch (const std::exception&) {
    throw ConfigError("config: key \"" + key + "\" has the wrong type (" + j.dump() + ")");
  }
}

std::string file_for(const std::string& name) {
  std::string f = name;
  for (char& c : f) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-';
    if (!ok) c = '_';
  }
  return f + ".bin";
}

template <typename S>
void write_le(std::ofstream& out, const S* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(S)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      char b[sizeof(S)];
      std::memcpy(b, data + i, sizeof(S));
      std::reverse(b, b + sizeof(S));
      out.write(b, sizeof(S));
    }
  }
}

template <typename S>
std::vector<S> read_le(const fs::path& path, std::size_t n) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != n * sizeof(S)) {
    throw IoError(path.string() + ": expected " + std::to_string(n * sizeof(S)) + " bytes, found " +
                  std::to_string(size));
  }
  in.seekg(0);
  std::vector<S> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("short read from " + path.string());
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& x : v) {
      char b[sizeof(S)];
      std::memcpy(b, &x, sizeof(S));
      std::reverse(b, b + sizeof(S));
      std::memcpy(&x, b, sizeof(S));
    }
  }
  return v;
}

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

json config_to_json(const ModelConfig& c) {
  return json{{"arch", arch_name(c.arch)},
              {"depth", c.depth},
              {"aspect_ratio", c.aspect_ratio},
              {"width", c.width},
              {"attn_width", c.attn_width},
              {"head_dim", c.head_dim},
              {"kv_group", c.kv_group},
              {"mlp_width", c.mlp_width},
              {"window", c.window},
              {"vocab_size", c.vocab_size},
              {"parameterization", parameterization_name(c.parameterization)},
              {"tie_embeddings", c.tie_embeddings},
              {"norm", norm_name(c.norm)},
              {"norm_eps", c.norm_eps},
              {"ssm_state", c.ssm_state},
              {"conv_kernel", c.conv_kernel},
              {"dt_rank", c.dt_rank},
              {"normalized_gmu", c.normalized_gmu},
              {"base_width", c.base_width},
              {"rope_base", c.rope_base},
              {"init_std", c.init_std}};
}

ModelConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  ModelConfig c;
  static const std::set<std::string> known{
      "arch",      "depth",     "aspect_ratio",   "width",          "attn_width", "head_dim",
      "kv_group",  "mlp_width", "window",         "vocab_size",     "parameterization",
      "tie_embeddings", "norm", "norm_eps",       "ssm_state",      "conv_kernel", "dt_rank",
      "normalized_gmu", "base_width", "rope_base", "init_std"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("config: unknown key \"" + k + "\"");
  }
  auto sz = [&](const char* k, std::size_t& dst) {
    if (j.contains(k)) dst = get_as<std::size_t>(j.at(k), k);
  };
  if (j.contains("arch")) c.arch = parse_arch(get_as<std::string>(j.at("arch"), "arch"));
  sz("depth", c.depth);
  sz("aspect_ratio", c.aspect_ratio);
  sz("width", c.width);
  sz("attn_width", c.attn_width);
  sz("head_dim", c.head_dim);
  sz("kv_group", c.kv_group);
  sz("mlp_width", c.mlp_width);
  sz("window", c.window);
  sz("vocab_size", c.vocab_size);
  sz("ssm_state", c.ssm_state);
  sz("conv_kernel", c.conv_kernel);
  sz("dt_rank", c.dt_rank);
  sz("base_width", c.base_width);
  if (j.contains("parameterization"))
    c.parameterization = parse_parameterization(get_as<std::string>(j.at("parameterization"), "parameterization"));
  if (j.contains("tie_embeddings")) c.tie_embeddings = get_as<bool>(j.at("tie_embeddings"), "tie_embeddings");
  if (j.contains("normalized_gmu")) c.normalized_gmu = get_as<bool>(j.at("normalized_gmu"), "normalized_gmu");
  if (j.contains("norm")) c.norm = parse_norm(get_as<std::string>(j.at("norm"), "norm"));
  if (j.contains("norm_eps")) c.norm_eps = get_as<double>(j.at("norm_eps"), "norm_eps");
  if (j.contains("rope_base")) c.rope_base = get_as<double>(j.at("rope_base"), "rope_base");
  if (j.contains("init_std")) c.init_std = get_as<double>(j.at("init_std"), "init_std");
  c.validate();
  return c;
}

ModelConfig load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j.contains("model") ? j.at("model") : j);
}

template <typename T>
void save_tensors(const fs::path& dir, const std::map<std::string, Tensor<T>>& tensors, const json& config,
                  const json& meta) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json list = json::array();
  for (const auto& [name, t] : tensors) {
    const std::string file = file_for(name);
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / file).string());
    const auto d = t.data();
    write_le(out, d.data(), d.size());
    if (!out) throw IoError("write failed for " + (dir / file).string());
    list.push_back({{"name", name}, {"file", file}, {"dtype", dtype_name<T>()}, {"shape", t.shape()}});
  }
  json manifest{{"format", "sambay-tensors"}, {"version", 1}, {"tensors", list}, {"config", config}, {"meta", meta}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

template <typename T>
std::map<std::string, Tensor<T>> load_tensors(const fs::path& dir, json* manifest_out) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::parse_error& e) {
    throw IoError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "sambay-tensors" || !manifest.contains("tensors")) {
    throw IoError((dir / "manifest.json").string() + ": not a tensor manifest");
  }
  std::map<std::string, Tensor<T>> out;
  try {
    for (const auto& e : manifest.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto file = e.at("file").get<std::string>();
      const auto dtype = e.at("dtype").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      if (file.find('/') != std::string::npos || file.find("..") != std::string::npos) {
        throw IoError("manifest: bad file name " + file);
      }
      const std::size_t n = numel(shape);
      std::vector<T> values(n);
      if (dtype == "f32") {
        const auto raw = read_le<float>(dir / file, n);
        std::copy(raw.begin(), raw.end(), values.begin());
      } else if (dtype == "f64") {
        const auto raw = read_le<double>(dir / file, n);
        std::transform(raw.begin(), raw.end(), values.begin(), [](double x) { return static_cast<T>(x); });
      } else {
        throw IoError("manifest: unknown dtype " + dtype);
      }
      out.emplace(name, Tensor<T>(shape, std::move(values)));
    }
  } catch (const json::exception& e) {
    throw IoError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (manifest_out) *manifest_out = manifest;
  return out;
}

template <typename T>
void save_model(const fs::path& dir, const Model<T>& model, const json& meta) {
  std::map<std::string, Tensor<T>> tensors;
  for (std::size_t i = 0; i < model.specs().size(); ++i) tensors.emplace(model.specs()[i].name, model.params()[i]);
  save_tensors(dir, tensors, config_to_json(model.config()), meta);
}

template <typename T>
Model<T> load_model(const fs::path& dir, json* manifest) {
  json m;
  auto tensors = load_tensors<T>(dir, &m);
  if (!m.contains("config") || m.at("config").empty()) {
    throw IoError((dir / "manifest.json").string() + ": no model config");
  }
  const ModelConfig cfg = config_from_json(m.at("config"));
  if (manifest) *manifest = m;
  return Model<T>::from_tensors(cfg, tensors);
}

#define SAMBAY_INSTANTIATE_CHECKPOINT(T)                                                               \
  template void save_tensors<T>(const fs::path&, const std::map<std::string, Tensor<T>>&, const json&, \
                                const json&);                                                          \
  template std::map<std::string, Tensor<T>> load_tensors<T>(const fs::path&, json*);                  \
  template void save_model<T>(const fs::path&, const Model<T>&, const json&);                          \
  template Model<T> load_model<T>(const fs::path&, json*);

SAMBAY_INSTANTIATE_CHECKPOINT(float)
SAMBAY_INSTANTIATE_CHECKPOINT(double)

}  // namespace sambay
