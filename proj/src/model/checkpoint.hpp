#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "core/param_store.hpp"
#include "core/tensor.hpp"
#include "model/config.hpp"

namespace punet {

// Checkpoint = a directory of PTNSR files plus manifest.json:
//
//   {
//     "format": "punet-checkpoint-v1",
//     "model": { ...UNetConfig fields... },
//     "params": [ {"name", "file", "group", "shape", "frozen"}, ... ],
//     "optimizer": { "step": t, "params": ["name", ...] },   // optional
//     "train_state": { "epochs_done": e }                    // optional
//   }
//
// Parameter files are the name with '/' replaced by '_'. Optimizer moment
// tensors live under optim/ as m_<file> and v_<file>.

struct CheckpointData {
  UNetConfig model;
  ParamStore<float> params;
  std::map<std::string, Tensor<float>> optim_m;
  std::map<std::string, Tensor<float>> optim_v;
  long optim_step = 0;
  int epochs_done = 0;
  bool has_optimizer = false;
};

namespace ckpt_detail {

inline std::string file_of(const std::string& name) {
  std::string f = name;
  for (auto& c : f) {
    if (c == '/') c = '_';
  }
  return f + ".ptnsr";
}

inline nlohmann::json config_to_json(const UNetConfig& c) {
  return nlohmann::json{{"stages", c.stages},
                        {"base_channels", c.base_channels},
                        {"input_h", c.input_h},
                        {"input_w", c.input_w},
                        {"classes", c.classes},
                        {"heads", c.heads},
                        {"ffn_ratio", c.ffn_ratio},
                        {"prompt_dim", c.prompt_dim},
                        {"prompt_tokens", c.prompt_tokens},
                        {"insertion", insertion_name(c.insertion)},
                        {"raters", c.raters},
                        {"seg_heads", c.seg_heads},
                        {"use_prompts", c.use_prompts}};
}

inline UNetConfig config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.stages = j.at("stages").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.input_h = j.at("input_h").get<int>();
  c.input_w = j.at("input_w").get<int>();
  c.classes = j.at("classes").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_ratio = j.at("ffn_ratio").get<int>();
  c.prompt_dim = j.at("prompt_dim").get<int>();
  c.prompt_tokens = j.at("prompt_tokens").get<int>();
  c.insertion = insertion_from_name(j.at("insertion").get<std::string>());
  c.raters = j.at("raters").get<int>();
  c.seg_heads = j.at("seg_heads").get<int>();
  c.use_prompts = j.at("use_prompts").get<bool>();
  return c;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::filesystem::path& dir, const CheckpointData& ck) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  nlohmann::json manifest;
  manifest["format"] = "punet-checkpoint-v1";
  manifest["model"] = ckpt_detail::config_to_json(ck.model);
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, e] : ck.params.entries()) {
    std::string file = ckpt_detail::file_of(name);
    write_ptnsr(dir / file, e.value);
    params.push_back({{"name", name},
                      {"file", file},
                      {"group", ParamStore<float>::group_of(name)},
                      {"shape", e.value.shape},
                      {"frozen", e.frozen}});
  }
  manifest["params"] = params;
  if (ck.has_optimizer) {
    fs::create_directories(dir / "optim", ec);
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, m] : ck.optim_m) {
      std::string file = ckpt_detail::file_of(name);
      write_ptnsr(dir / "optim" / ("m_" + file), m);
      write_ptnsr(dir / "optim" / ("v_" + file), ck.optim_v.at(name));
      names.push_back(name);
    }
    manifest["optimizer"] = {{"step", ck.optim_step}, {"params", names}};
  }
  manifest["train_state"] = {{"epochs_done", ck.epochs_done}};
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write checkpoint manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

inline CheckpointData load_checkpoint(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::path mf = dir / "manifest.json";
  std::ifstream f(mf);
  if (!f) throw IoError("missing checkpoint manifest: " + mf.string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest " + mf.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "punet-checkpoint-v1") {
    throw IoError("unsupported checkpoint format in " + mf.string());
  }
  CheckpointData ck;
  ck.model = ckpt_detail::config_from_json(manifest.at("model"));
  for (const auto& p : manifest.at("params")) {
    std::string name = p.at("name").get<std::string>();
    Tensor<float> t = read_ptnsr(dir / p.at("file").get<std::string>());
    ck.params.add(name, std::move(t), p.at("frozen").get<bool>());
  }
  if (manifest.contains("optimizer")) {
    ck.has_optimizer = true;
    ck.optim_step = manifest["optimizer"].at("step").get<long>();
    for (const auto& n : manifest["optimizer"].at("params")) {
      std::string name = n.get<std::string>();
      std::string file = ckpt_detail::file_of(name);
      ck.optim_m.emplace(name, read_ptnsr(dir / "optim" / ("m_" + file)));
      ck.optim_v.emplace(name, read_ptnsr(dir / "optim" / ("v_" + file)));
    }
  }
  if (manifest.contains("train_state")) {
    ck.epochs_done = manifest["train_state"].value("epochs_done", 0);
  }
  return ck;
}

}  // namespace punet
