#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/gradcheck.hpp"
#include "core/parallel.hpp"
#include "data/synth.hpp"
#include "eval/evaluation.hpp"
#include "model/checkpoint.hpp"
#include "model/punet.hpp"
#include "train/training.hpp"

namespace punet {

// ---------------------------------------------------------------------------
// Run configuration: one flat key set with defaults, loadable from JSON,
// overridable via key=value pairs. Unknown keys are rejected; every run
// writes its resolved configuration next to its outputs.
// ---------------------------------------------------------------------------

struct RunConfig {
  // model
  int stages = 3;
  int base_channels = 16;
  int input_h = 64;
  int input_w = 64;
  int classes = 2;
  int heads = 2;
  int ffn_ratio = 4;
  int prompt_dim = 16;
  int prompt_tokens = 1;
  std::string insertion = "both";
  int raters = 6;
  std::string variant = "punet";  // punet | plain | multihead | labelsampling

  // data
  int n_scenes = 64;
  int test_scenes = 16;
  std::vector<int> rater_dilations = {-2, -1, 0, 0, 1, 2};
  std::vector<double> rater_jitters = {0.5, 0.9, 0.7, 1.1, 1.3, 1.5};
  std::string domain = "source";
  double target_shift = 0.08;
  double target_contrast = 1.0;
  double noise_amp = 0.02;
  double edge_width = 1.8;

  // training
  double base_lr = 0.01;
  std::vector<int> lr_drop_epochs = {8, 13, 17};
  double lr_drop_factor = 10.0;
  int epochs = 20;
  int batch_size = 4;
  double dice_smooth = 1.0;
  std::string strategy = "mix";
  std::string mode = "prompt";
  bool enforce_prompt_budget = true;

  // evaluation / misc
  int overlay_scenes = 2;
  int threads = 1;
  std::uint64_t seed = 1;
  bool seed_explicit = false;

  // ablation budgets
  int ablation_seeds = 3;
  int ablation_pretrain_epochs = 12;
  int ablation_epochs = 6;

  void validate() const {
    model_config().validate();
    if (static_cast<int>(rater_dilations.size()) != raters ||
        static_cast<int>(rater_jitters.size()) != raters) {
      throw ConfigError("rater_dilations/rater_jitters must have one entry per rater");
    }
    if (n_scenes < 1 || test_scenes < 1) throw ConfigError("scene counts must be >= 1");
    if (epochs < 1 || batch_size < 1) throw ConfigError("epochs and batch_size must be >= 1");
    if (!(dice_smooth > 0)) throw ConfigError("dice_smooth must be positive");
    if (domain != "source" && domain != "target") {
      throw ConfigError("domain must be source|target");
    }
    if (variant != "punet" && variant != "plain" && variant != "multihead" &&
        variant != "labelsampling") {
      throw ConfigError("variant must be punet|plain|multihead|labelsampling");
    }
    (void)strategy_from_name(strategy);
    (void)mode_from_name(mode);
  }

  UNetConfig model_config() const {
    UNetConfig c;
    c.stages = stages;
    c.base_channels = base_channels;
    c.input_h = input_h;
    c.input_w = input_w;
    c.classes = classes;
    c.heads = heads;
    c.ffn_ratio = ffn_ratio;
    c.prompt_dim = prompt_dim;
    c.prompt_tokens = prompt_tokens;
    c.insertion = insertion_from_name(insertion);
    c.raters = raters;
    c.seg_heads = variant == "multihead" ? raters : 1;
    c.use_prompts = variant == "punet";
    return c;
  }

  std::vector<RaterProfile> profiles() const {
    std::vector<RaterProfile> out;
    for (int j = 0; j < raters; ++j) {
      out.push_back({j + 1, rater_dilations[static_cast<std::size_t>(j)],
                     rater_jitters[static_cast<std::size_t>(j)], 11 * (j + 1)});
    }
    return out;
  }

  SynthConfig synth_config() const {
    SynthConfig s;
    s.height = input_h;
    s.width = input_w;
    s.classes = classes;
    s.noise_amp = noise_amp;
    s.edge_width = edge_width;
    if (domain == "target") {
      s.brightness_shift = target_shift;
      s.contrast = target_contrast;
    }
    return s;
  }

  Schedule schedule() const { return Schedule{base_lr, lr_drop_epochs, lr_drop_factor, epochs}; }
};

namespace cfg_detail {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace cfg_detail

inline const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = {
      "stages", "base_channels", "input_h", "input_w", "classes", "heads", "ffn_ratio",
      "prompt_dim", "prompt_tokens", "insertion", "raters", "variant", "n_scenes",
      "test_scenes", "rater_dilations", "rater_jitters", "domain", "target_shift",
      "target_contrast", "noise_amp", "edge_width", "base_lr", "lr_drop_epochs",
      "lr_drop_factor", "epochs", "batch_size", "dice_smooth", "strategy", "mode",
      "enforce_prompt_budget", "overlay_scenes", "threads", "seed", "ablation_seeds",
      "ablation_pretrain_epochs", "ablation_epochs"};
  return keys;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return nlohmann::json{{"stages", c.stages},
                        {"base_channels", c.base_channels},
                        {"input_h", c.input_h},
                        {"input_w", c.input_w},
                        {"classes", c.classes},
                        {"heads", c.heads},
                        {"ffn_ratio", c.ffn_ratio},
                        {"prompt_dim", c.prompt_dim},
                        {"prompt_tokens", c.prompt_tokens},
                        {"insertion", c.insertion},
                        {"raters", c.raters},
                        {"variant", c.variant},
                        {"n_scenes", c.n_scenes},
                        {"test_scenes", c.test_scenes},
                        {"rater_dilations", c.rater_dilations},
                        {"rater_jitters", c.rater_jitters},
                        {"domain", c.domain},
                        {"target_shift", c.target_shift},
                        {"target_contrast", c.target_contrast},
                        {"noise_amp", c.noise_amp},
                        {"edge_width", c.edge_width},
                        {"base_lr", c.base_lr},
                        {"lr_drop_epochs", c.lr_drop_epochs},
                        {"lr_drop_factor", c.lr_drop_factor},
                        {"epochs", c.epochs},
                        {"batch_size", c.batch_size},
                        {"dice_smooth", c.dice_smooth},
                        {"strategy", c.strategy},
                        {"mode", c.mode},
                        {"enforce_prompt_budget", c.enforce_prompt_budget},
                        {"overlay_scenes", c.overlay_scenes},
                        {"threads", c.threads},
                        {"seed", c.seed},
                        {"ablation_seeds", c.ablation_seeds},
                        {"ablation_pretrain_epochs", c.ablation_pretrain_epochs},
                        {"ablation_epochs", c.ablation_epochs}};
}

inline void apply_json(RunConfig& c, const nlohmann::json& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& keys = run_config_keys();
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) {
      throw ConfigError("unknown config key: '" + it.key() + "'");
    }
  }
  using cfg_detail::read_key;
  read_key(j, "stages", c.stages);
  read_key(j, "base_channels", c.base_channels);
  read_key(j, "input_h", c.input_h);
  read_key(j, "input_w", c.input_w);
  read_key(j, "classes", c.classes);
  read_key(j, "heads", c.heads);
  read_key(j, "ffn_ratio", c.ffn_ratio);
  read_key(j, "prompt_dim", c.prompt_dim);
  read_key(j, "prompt_tokens", c.prompt_tokens);
  read_key(j, "insertion", c.insertion);
  read_key(j, "raters", c.raters);
  read_key(j, "variant", c.variant);
  read_key(j, "n_scenes", c.n_scenes);
  read_key(j, "test_scenes", c.test_scenes);
  read_key(j, "rater_dilations", c.rater_dilations);
  read_key(j, "rater_jitters", c.rater_jitters);
  read_key(j, "domain", c.domain);
  read_key(j, "target_shift", c.target_shift);
  read_key(j, "target_contrast", c.target_contrast);
  read_key(j, "noise_amp", c.noise_amp);
  read_key(j, "edge_width", c.edge_width);
  read_key(j, "base_lr", c.base_lr);
  read_key(j, "lr_drop_epochs", c.lr_drop_epochs);
  read_key(j, "lr_drop_factor", c.lr_drop_factor);
  read_key(j, "epochs", c.epochs);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "dice_smooth", c.dice_smooth);
  read_key(j, "strategy", c.strategy);
  read_key(j, "mode", c.mode);
  read_key(j, "enforce_prompt_budget", c.enforce_prompt_budget);
  read_key(j, "overlay_scenes", c.overlay_scenes);
  read_key(j, "threads", c.threads);
  if (j.contains("seed")) {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.seed_explicit = true;
  }
  read_key(j, "ablation_seeds", c.ablation_seeds);
  read_key(j, "ablation_pretrain_epochs", c.ablation_pretrain_epochs);
  read_key(j, "ablation_epochs", c.ablation_epochs);
}

inline void load_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config JSON " + path.string() + ": " + e.what());
  }
  apply_json(c, j);
}

// key=value override, values parsed per key. Arrays use comma separation.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  auto parse_ints = [](const std::string& s) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
      std::size_t next = s.find(',', pos);
      if (next == std::string::npos) next = s.size();
      out.push_back(std::stoi(s.substr(pos, next - pos)));
      pos = next + 1;
    }
    return out;
  };
  auto parse_doubles = [](const std::string& s) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
      std::size_t next = s.find(',', pos);
      if (next == std::string::npos) next = s.size();
      out.push_back(std::stod(s.substr(pos, next - pos)));
      pos = next + 1;
    }
    return out;
  };
  try {
    nlohmann::json j;
    if (key == "insertion" || key == "variant" || key == "domain" || key == "strategy" ||
        key == "mode") {
      j[key] = value;
    } else if (key == "rater_dilations" || key == "lr_drop_epochs") {
      j[key] = parse_ints(value);
    } else if (key == "rater_jitters") {
      j[key] = parse_doubles(value);
    } else if (key == "target_shift" || key == "target_contrast" || key == "noise_amp" ||
               key == "edge_width" || key == "base_lr" || key == "lr_drop_factor" ||
               key == "dice_smooth") {
      j[key] = std::stod(value);
    } else if (key == "enforce_prompt_budget") {
      j[key] = value == "true" || value == "1";
    } else if (key == "seed") {
      j[key] = static_cast<std::uint64_t>(std::stoull(value));
    } else {
      j[key] = std::stoi(value);
    }
    apply_json(c, j);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse value '" + value + "' for key '" + key + "'");
  }
}

// PUNET_SEED applies when neither file nor flag set an explicit seed.
inline void finalize_seed(RunConfig& c) {
  if (c.seed_explicit) return;
  if (const char* env = std::getenv("PUNET_SEED")) {
    c.seed = static_cast<std::uint64_t>(std::strtoull(env, nullptr, 10));
    c.seed_explicit = true;
  }
}

inline void write_resolved_config(const RunConfig& c, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream f(dir / "resolved_config.json");
  if (!f) throw IoError("cannot write resolved config in " + dir.string());
  f << run_config_to_json(c).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

inline Dataset build_dataset_parallel(const DatasetConfig& cfg, int threads) {
  if (cfg.profiles.empty()) throw ConfigError("build_dataset: need at least one rater profile");
  Dataset ds;
  ds.cfg = cfg;
  ds.images.resize(static_cast<std::size_t>(cfg.n_scenes));
  ds.raters.resize(static_cast<std::size_t>(cfg.n_scenes));
  ds.mv.resize(static_cast<std::size_t>(cfg.n_scenes));
  parallel_for(cfg.n_scenes, threads, [&](int k) {
    std::uint64_t scene_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(k));
    SyntheticScene sc = generate_scene_params(scene_seed, cfg.synth);
    ds.images[static_cast<std::size_t>(k)] = render_image(sc, cfg.synth);
    std::vector<Tensor<float>> masks;
    masks.reserve(cfg.profiles.size());
    for (const auto& prof : cfg.profiles) masks.push_back(render_rater_mask(sc, prof, cfg.synth));
    ds.mv[static_cast<std::size_t>(k)] = majority_vote(masks);
    ds.raters[static_cast<std::size_t>(k)] = std::move(masks);
  });
  return ds;
}

struct SynthSummary {
  int scenes = 0;
  int raters = 0;
  int samples = 0;
};

inline SynthSummary run_synth(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  DatasetConfig dc;
  dc.n_scenes = cfg.n_scenes;
  dc.profiles = cfg.profiles();
  dc.synth = cfg.synth_config();
  dc.seed = cfg.seed;
  Dataset ds = build_dataset_parallel(dc, cfg.threads);
  save_dataset(out_dir, ds);
  write_resolved_config(cfg, out_dir);
  return SynthSummary{ds.n_scenes(), ds.n_raters(), ds.n_samples()};
}

// source/, target_train/, target_test/ under one root; seeds derived from the
// base seed so the three sets are disjoint scene populations.
inline void run_synth_suite(const RunConfig& cfg, const std::filesystem::path& root) {
  RunConfig c = cfg;
  c.domain = "source";
  c.seed = derive_seed(cfg.seed, 101);
  c.seed_explicit = true;
  run_synth(c, root / "source");
  c.domain = "target";
  c.seed = derive_seed(cfg.seed, 102);
  run_synth(c, root / "target_train");
  c.n_scenes = cfg.test_scenes;
  c.seed = derive_seed(cfg.seed, 103);
  run_synth(c, root / "target_test");
}

// ---------------------------------------------------------------------------
// Training entry points
// ---------------------------------------------------------------------------

namespace pipeline_detail {

inline void check_dataset_model(const Dataset& ds, const UNetConfig& mc) {
  if (ds.cfg.synth.height != mc.input_h || ds.cfg.synth.width != mc.input_w) {
    throw ConfigError("dataset " + std::to_string(ds.cfg.synth.width) + "x" +
                      std::to_string(ds.cfg.synth.height) + " does not match model input " +
                      std::to_string(mc.input_w) + "x" + std::to_string(mc.input_h));
  }
  if (ds.cfg.synth.classes != mc.classes) {
    throw ConfigError("dataset classes " + std::to_string(ds.cfg.synth.classes) +
                      " vs model classes " + std::to_string(mc.classes));
  }
  if (mc.use_prompts && ds.n_raters() != mc.raters) {
    throw ConfigError("dataset raters " + std::to_string(ds.n_raters()) + " vs model raters " +
                      std::to_string(mc.raters));
  }
}

}  // namespace pipeline_detail

// Full-mode training on a source dataset's fusion labels (or the configured
// baseline variant's native strategy).
inline TrainResult run_pretrain(const RunConfig& cfg, const std::filesystem::path& dataset_dir,
                                const std::filesystem::path& out_dir) {
  cfg.validate();
  Dataset ds = load_dataset(dataset_dir);
  UNetConfig mc = cfg.model_config();
  pipeline_detail::check_dataset_model(ds, mc);
  PUNet<float> model(mc);
  ParamStore<float> params = model.init_params(cfg.seed);
  TrainOptions opt;
  opt.schedule = cfg.schedule();
  opt.mode = FineTuneMode::Full;
  opt.batch_size = cfg.batch_size;
  opt.dice_smooth = cfg.dice_smooth;
  opt.seed = cfg.seed;
  opt.out_dir = out_dir;
  TrainResult res;
  if (cfg.variant == "multihead") {
    res = baseline_multihead(model, params, ds, opt);
  } else if (cfg.variant == "labelsampling") {
    res = baseline_label_sampling(model, params, ds, opt);
  } else {
    // PU-Net pretraining: fusion labels through the aggregation prompt.
    opt.strategy = cfg.variant == "punet" ? TrainingStrategy::FusionOnly
                                          : strategy_from_name(cfg.strategy);
    res = train(model, params, ds, opt);
  }
  write_resolved_config(cfg, out_dir);
  return res;
}

struct FinetuneResult {
  TrainResult train;
  std::size_t trainable = 0;
  std::size_t total = 0;
};

inline FinetuneResult run_finetune(const RunConfig& cfg, const std::filesystem::path& dataset_dir,
                                   const std::filesystem::path& init_ckpt,
                                   const std::filesystem::path& out_dir, bool resume) {
  cfg.validate();
  Dataset ds = load_dataset(dataset_dir);
  CheckpointData start = load_checkpoint(init_ckpt);
  pipeline_detail::check_dataset_model(ds, start.model);
  PUNet<float> model(start.model);

  FineTuneMode mode = mode_from_name(cfg.mode);
  TrainOptions opt;
  opt.schedule = cfg.schedule();
  opt.mode = mode;
  opt.strategy = strategy_from_name(cfg.strategy);
  opt.batch_size = cfg.batch_size;
  opt.dice_smooth = cfg.dice_smooth;
  opt.seed = cfg.seed;
  opt.out_dir = out_dir;

  ParamStore<float> params = start.params;
  AdamState<float> adam;
  int start_epoch = 0;
  if (resume) {
    CheckpointData prev = load_checkpoint(out_dir);
    params = prev.params;
    adam.t = prev.optim_step;
    for (auto& [n, m] : prev.optim_m) adam.m.emplace(n, m);
    for (auto& [n, v] : prev.optim_v) adam.v.emplace(n, v);
    start_epoch = prev.epochs_done;
  }

  model.apply_partition(params, mode);
  FinetuneResult out;
  out.trainable = params.trainable_params();
  out.total = params.total_params();
  if (mode == FineTuneMode::PromptAndHead && cfg.enforce_prompt_budget) {
    double ratio = static_cast<double>(out.trainable) / static_cast<double>(out.total);
    if (ratio > 0.01) {
      throw ConfigError("prompt fine-tune budget exceeded: trainable ratio " +
                        std::to_string(100.0 * ratio) +
                        "% > 1% (set enforce_prompt_budget=false to override)");
    }
  }
  out.train = train(model, params, ds, opt, &adam, start_epoch);
  write_resolved_config(cfg, out_dir);
  return out;
}

inline EvalMatrix run_eval(const RunConfig& cfg, const std::filesystem::path& ckpt_dir,
                           const std::filesystem::path& dataset_dir,
                           const std::filesystem::path& report_dir) {
  cfg.validate();
  Dataset ds = load_dataset(dataset_dir);
  CheckpointData ck = load_checkpoint(ckpt_dir);
  pipeline_detail::check_dataset_model(ds, ck.model);
  PUNet<float> model(ck.model);
  EvalMatrix m = evaluate_matrix(model, ck.params, ds);
  write_eval_report(report_dir, model, ck.params, ds, m, cfg.overlay_scenes);
  write_resolved_config(cfg, report_dir);
  return m;
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double mv_disc = 0, mv_cup = 0;
  double mean_all = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::map<std::string, double> summary_mv;    // variant -> mean over seeds of (disc+cup)/2 at the MV cell
  std::map<std::string, double> summary_mean;  // variant -> mean over seeds of the all-cells mean
  bool ordering_ok = true;
  std::string note;
};

namespace pipeline_detail {

inline AblationRow eval_row(const std::string& variant, std::uint64_t seed,
                            const PUNet<float>& model, const ParamStore<float>& params,
                            const Dataset& test) {
  EvalMatrix m = evaluate_matrix(model, params, test);
  AblationRow row;
  row.variant = variant;
  row.seed = seed;
  row.mv_disc = m.cells.back().back()[0];
  row.mv_cup = m.cells.back().back()[1];
  row.mean_all = m.mean_all_cells();
  return row;
}

// One pretrain -> prompt-finetune pipeline with the ablation budget.
inline AblationRow ablation_pipeline(const RunConfig& cfg, const std::string& variant,
                                     Insertion insertion, TrainingStrategy strategy,
                                     std::uint64_t seed, const Dataset& source,
                                     const Dataset& target_train, const Dataset& target_test) {
  UNetConfig mc = cfg.model_config();
  mc.insertion = insertion;
  PUNet<float> model(mc);
  ParamStore<float> params = model.init_params(seed);

  TrainOptions pre;
  pre.schedule = cfg.schedule();
  pre.schedule.epochs = cfg.ablation_pretrain_epochs;
  pre.mode = FineTuneMode::Full;
  pre.strategy = TrainingStrategy::FusionOnly;
  pre.batch_size = cfg.batch_size;
  pre.dice_smooth = cfg.dice_smooth;
  pre.seed = seed;
  train(model, params, source, pre);

  TrainOptions ft;
  ft.schedule = cfg.schedule();
  ft.schedule.epochs = cfg.ablation_epochs;
  ft.mode = FineTuneMode::PromptAndHead;
  ft.strategy = strategy;
  ft.batch_size = cfg.batch_size;
  ft.dice_smooth = cfg.dice_smooth;
  ft.seed = derive_seed(seed, 7);
  train(model, params, target_train, ft);

  return eval_row(variant, seed, model, params, target_test);
}

inline void write_ablation_files(const std::filesystem::path& dir, const std::string& name,
                                 const AblationReport& rep,
                                 const std::vector<std::string>& reference_lines) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  {
    std::ofstream f(dir / ("ablation_" + name + ".csv"));
    if (!f) throw IoError("cannot write ablation report in " + dir.string());
    f << "variant,seed,mv_disc,mv_cup,mean_all_cells\n";
    char buf[160];
    for (const auto& r : rep.rows) {
      std::snprintf(buf, sizeof(buf), "%s,%llu,%.6f,%.6f,%.6f\n", r.variant.c_str(),
                    static_cast<unsigned long long>(r.seed), r.mv_disc, r.mv_cup, r.mean_all);
      f << buf;
    }
  }
  {
    std::ofstream f(dir / ("ablation_" + name + ".md"));
    f << "# Ablation: " << name << "\n\n";
    f << "| variant | MV Dice (disc, cup) mean | all-cells mean |\n|---|---|---|\n";
    char buf[160];
    for (const auto& [v, mv] : rep.summary_mv) {
      std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.4f |\n", v.c_str(), mv,
                    rep.summary_mean.at(v));
      f << buf;
    }
    f << "\n" << rep.note << "\n\n";
    for (const auto& line : reference_lines) f << line << "\n";
  }
}

}  // namespace pipeline_detail

// Trains DownOnly / UpOnly / Both under identical budgets and reports the
// MV-labelled Dice ordering. A deviation from Both >= Up >= Down is flagged
// in the note rather than treated as a failure.
inline AblationReport run_ablation_locations(const RunConfig& cfg,
                                             const std::filesystem::path& data_root,
                                             const std::filesystem::path& out_dir) {
  cfg.validate();
  Dataset source = load_dataset(data_root / "source");
  Dataset ttrain = load_dataset(data_root / "target_train");
  Dataset ttest = load_dataset(data_root / "target_test");
  AblationReport rep;
  const std::vector<std::pair<std::string, Insertion>> schemes = {
      {"down", Insertion::DownOnly}, {"up", Insertion::UpOnly}, {"both", Insertion::Both}};
  for (int s = 0; s < cfg.ablation_seeds; ++s) {
    std::uint64_t seed = derive_seed(cfg.seed, 500 + static_cast<std::uint64_t>(s));
    for (const auto& [name, ins] : schemes) {
      rep.rows.push_back(pipeline_detail::ablation_pipeline(
          cfg, name, ins, TrainingStrategy::Mix, seed, source, ttrain, ttest));
    }
  }
  for (const auto& [name, ins] : schemes) {
    double mv = 0, mean = 0;
    int n = 0;
    for (const auto& r : rep.rows) {
      if (r.variant == name) {
        mv += 0.5 * (r.mv_disc + r.mv_cup);
        mean += r.mean_all;
        ++n;
      }
    }
    rep.summary_mv[name] = mv / n;
    rep.summary_mean[name] = mean / n;
  }
  rep.ordering_ok = rep.summary_mv["both"] >= rep.summary_mv["up"] &&
                    rep.summary_mv["up"] >= rep.summary_mv["down"];
  rep.note = rep.ordering_ok
                 ? "ordering both >= up >= down holds on MV-labelled Dice"
                 : "DEVIATION: desk-scale ordering differs from both >= up >= down";
  pipeline_detail::write_ablation_files(
      out_dir, "locations", rep,
      {"Reference at publication scale (RIGA, MV column): both (96.58, 85.70), "
       "up (93.07, 81.54), down (92.80, 78.29)."});
  return rep;
}

// Trains IndividualOnly / FusionOnly / Mix prompt fine-tunes from the same
// pretraining budget and compares the all-cells mean Dice.
inline AblationReport run_ablation_strategy(const RunConfig& cfg,
                                            const std::filesystem::path& data_root,
                                            const std::filesystem::path& out_dir) {
  cfg.validate();
  Dataset source = load_dataset(data_root / "source");
  Dataset ttrain = load_dataset(data_root / "target_train");
  Dataset ttest = load_dataset(data_root / "target_test");
  AblationReport rep;
  const std::vector<std::pair<std::string, TrainingStrategy>> strategies = {
      {"individual", TrainingStrategy::IndividualOnly},
      {"fusion", TrainingStrategy::FusionOnly},
      {"mix", TrainingStrategy::Mix}};
  for (int s = 0; s < cfg.ablation_seeds; ++s) {
    std::uint64_t seed = derive_seed(cfg.seed, 900 + static_cast<std::uint64_t>(s));
    for (const auto& [name, strat] : strategies) {
      rep.rows.push_back(pipeline_detail::ablation_pipeline(
          cfg, name, cfg.model_config().insertion, strat, seed, source, ttrain, ttest));
    }
  }
  for (const auto& [name, strat] : strategies) {
    double mv = 0, mean = 0;
    int n = 0;
    for (const auto& r : rep.rows) {
      if (r.variant == name) {
        mv += 0.5 * (r.mv_disc + r.mv_cup);
        mean += r.mean_all;
        ++n;
      }
    }
    rep.summary_mv[name] = mv / n;
    rep.summary_mean[name] = mean / n;
  }
  rep.ordering_ok = rep.summary_mean["mix"] >= rep.summary_mean["individual"] &&
                    rep.summary_mean["mix"] >= rep.summary_mean["fusion"];
  rep.note = rep.ordering_ok ? "mix-training mean Dice >= individual-only and fusion-only"
                             : "DEVIATION: mix-training did not dominate at desk scale";
  pipeline_detail::write_ablation_files(
      out_dir, "strategy", rep,
      {"Reference at publication scale (RIGA, MV column): mix (96.58, 85.70), "
       "fusion (96.33, 78.11), individual (95.66, 80.62)."});
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient checking suite (primitives + full-model composite)
// ---------------------------------------------------------------------------

// Full PU-Net forward + Dice loss, f64, checked on a 4-parameter probe set
// against central differences. Runs at a small config; every path of the
// architecture (conv, ITB, prompt, stage map, head) contributes a probe.
inline GradCheckResult composite_gradcheck(std::uint64_t seed = 33) {
  UNetConfig mc;
  mc.stages = 2;
  mc.base_channels = 8;
  mc.input_h = 16;
  mc.input_w = 16;
  mc.heads = 2;
  mc.prompt_dim = 8;
  mc.raters = 3;
  PUNet<double> model(mc);
  ParamStore<double> params = model.init_params(seed);
  // Kick every tensor off the zero-init saddle so all probe gradients are
  // informative.
  Rng noise(derive_seed(seed, 0x7e57));
  for (auto& [name, e] : params.entries()) {
    for (auto& v : e.value.data) v += noise.uniform(-0.05, 0.05);
  }

  SynthConfig sc;
  sc.height = 16;
  sc.width = 16;
  Rng srng(derive_seed(seed, 0x1317));
  SyntheticScene scene = generate_scene_params(srng.next_u64(), sc);
  Tensor<double> img = render_image(scene, sc).cast<double>();
  Tensor<double> target =
      render_rater_mask(scene, RaterProfile{1, 0, 0.0, 1}, sc).cast<double>();

  const RaterTag tag = RaterTag::rater(1);
  auto loss_of = [&](const ParamStore<double>& ps) {
    Tape<double> tape;
    BoundParams<double> bound = bind_params(tape, ps);
    Var<double> x = tape.leaf(img, false);
    Var<double> t = tape.leaf(target, false);
    Var<double> logits = model.forward(bound, x, tag);
    return dice_loss(logits, t, 1.0);
  };

  // Autodiff gradients once.
  Tape<double> tape;
  BoundParams<double> bound = bind_params(tape, params);
  Var<double> x = tape.leaf(img, false);
  Var<double> tv = tape.leaf(target, false);
  Var<double> loss = dice_loss(model.forward(bound, x, tag), tv, 1.0);
  tape.backward(loss);
  auto grads = collect_grads(tape, bound, params);

  const std::vector<std::pair<std::string, std::size_t>> probes = {
      {"backbone/stem/w", 5}, {"itb/0/msa/h0/wq", 3}, {"prompt/r1", 0}, {"stage_map/0/w", 2}};
  double h = 1e-5;
  double max_err = 0.0;
  for (const auto& [name, idx] : probes) {
    ParamStore<double> ps = params;
    ps.value(name).data[idx] += h;
    double fp = loss_of(ps).val().data[0];
    ps.value(name).data[idx] -= 2 * h;
    double fm = loss_of(ps).val().data[0];
    double fd = (fp - fm) / (2 * h);
    double ad = grads.at(name).data[idx];
    max_err = std::max(max_err, gradcheck_detail::rel_err(ad, fd));
  }
  GradCheckResult res;
  res.name = "punet_dice_composite";
  res.tol = 1e-3;
  res.max_rel_err = max_err;
  res.pass = max_err < res.tol;
  return res;
}

inline std::vector<GradCheckResult> run_gradcheck_suite() {
  std::vector<GradCheckResult> results = primitive_gradchecks();
  results.push_back(composite_gradcheck());
  return results;
}

}  // namespace punet
