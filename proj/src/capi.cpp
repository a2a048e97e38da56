#include "punet/punet.h"

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include "core/errors.hpp"
#include "pipeline.hpp"

// C ABI veneer over the C++ core: opaque handles, integer status codes, and
// a thread-local last-error string.

namespace {

thread_local std::string g_last_error;

void set_last_error(const std::string& msg) { g_last_error = msg; }

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return PUNET_OK;
  } catch (const punet::NumericError& e) {
    set_last_error(e.what());
    return PUNET_ERR_NUMERIC;
  } catch (const punet::IoError& e) {
    set_last_error(e.what());
    return PUNET_ERR_IO;
  } catch (const std::exception& e) {
    // ConfigError, ArgError, DimError, ContractError and anything unexpected
    // all fall into the config/usage bucket.
    set_last_error(e.what());
    return PUNET_ERR_CONFIG;
  }
}

punet::RunConfig finalized(const punet::RunConfig& cfg) {
  punet::RunConfig c = cfg;
  punet::finalize_seed(c);
  c.validate();
  return c;
}

}  // namespace

struct punet_config {
  punet::RunConfig cfg;
};

struct punet_model {
  punet::CheckpointData ck;
  punet::PUNet<float> net;

  explicit punet_model(punet::CheckpointData data)
      : ck(std::move(data)), net(ck.model) {}
};

extern "C" {

const char* punet_version(void) { return "punet 0.1.0"; }

const char* punet_last_error(void) { return g_last_error.c_str(); }

punet_config* punet_config_create(void) { return new punet_config(); }

void punet_config_free(punet_config* cfg) { delete cfg; }

int punet_config_load(punet_config* cfg, const char* json_path) {
  if (!cfg || !json_path) {
    set_last_error("punet_config_load: null argument");
    return PUNET_ERR_CONFIG;
  }
  return guarded([&] { punet::load_config_file(cfg->cfg, json_path); });
}

int punet_config_set(punet_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) {
    set_last_error("punet_config_set: null argument");
    return PUNET_ERR_CONFIG;
  }
  return guarded([&] { punet::set_config_value(cfg->cfg, key, value); });
}

int punet_config_write(const punet_config* cfg, const char* json_path) {
  if (!cfg || !json_path) {
    set_last_error("punet_config_write: null argument");
    return PUNET_ERR_CONFIG;
  }
  return guarded([&] {
    std::ofstream f(json_path);
    if (!f) throw punet::IoError(std::string("cannot write config: ") + json_path);
    f << punet::run_config_to_json(cfg->cfg).dump(2) << "\n";
  });
}

int punet_synth(const punet_config* cfg, const char* out_dir, int suite, int* scenes,
                int* samples) {
  if (!cfg || !out_dir) {
    set_last_error("punet_synth: null argument");
    return PUNET_ERR_CONFIG;
  }
  return guarded([&] {
    punet::RunConfig c = finalized(cfg->cfg);
    if (suite) {
      punet::run_synth_suite(c, out_dir);
      punet::RunConfig src = c;
      src.domain = "source";
      if (scenes) *scenes = c.n_scenes;
      if (samples) *samples = c.n_scenes * (c.raters + 1);
    } else {
      punet::SynthSummary s = punet::run_synth(c, out_dir);
      if (scenes) *scenes = s.scenes;
      if (samples) *samples = s.samples;
    }
  });
}

int punet_pretrain(const punet_config* cfg, const char* dataset_dir, const char* out_dir) {
  if (!cfg || !dataset_dir || !out_dir) {
    set_last_error("punet_pretrain: null argument");
    return PUNET_ERR_CONFIG;
  }
  return guarded([&] { punet::run_pretrain(finalized(cfg->cfg), dataset_dir, out_dir); });
}

int punet_finetune(const punet_config* cfg, const char* dataset_dir, const char* init_ckpt_dir,
                   const char* out_dir, int resume, uint64_t* trainable, uint64_t* total) {
  if (!cfg || !dataset_dir || !init_ckpt_dir || !out_dir) {
    set_last_error("punet_finetune: null argument");
    return PUNET_ERR_CONFIG;
  }
  return guarded([&] {
    punet::FinetuneResult r = punet::run_finetune(finalized(cfg->cfg), dataset_dir,
                                                  init_ckpt_dir, out_dir, resume != 0);
    if (trainable) *trainable = r.trainable;
    if (total) *total = r.total;
  });
}

int punet_eval(const punet_config* cfg, const char* ckpt_dir, const char* dataset_dir,
               const char* report_dir) {
  if (!cfg || !ckpt_dir || !dataset_dir || !report_dir) {
    set_last_error("punet_eval: null argument");
    return PUNET_ERR_CONFIG;
  }
  return guarded(
      [&] { punet::run_eval(finalized(cfg->cfg), ckpt_dir, dataset_dir, report_dir); });
}

int punet_ablate(const punet_config* cfg, const char* which, const char* data_root,
                 const char* out_dir) {
  if (!cfg || !which || !data_root || !out_dir) {
    set_last_error("punet_ablate: null argument");
    return PUNET_ERR_CONFIG;
  }
  return guarded([&] {
    punet::RunConfig c = finalized(cfg->cfg);
    std::string w = which;
    if (w == "locations") {
      punet::run_ablation_locations(c, data_root, out_dir);
    } else if (w == "strategy") {
      punet::run_ablation_strategy(c, data_root, out_dir);
    } else {
      throw punet::ConfigError("unknown ablation '" + w + "' (expected locations|strategy)");
    }
  });
}

int punet_gradcheck(int verbose, double* max_rel_err) {
  bool all_pass = true;
  double worst = 0.0;
  int rc = guarded([&] {
    auto results = punet::run_gradcheck_suite();
    for (const auto& r : results) {
      worst = std::max(worst, r.max_rel_err);
      all_pass = all_pass && r.pass;
      if (verbose) {
        std::printf("%-24s max_rel_err=%.3e tol=%.0e %s\n", r.name.c_str(), r.max_rel_err,
                    r.tol, r.pass ? "ok" : "FAIL");
      }
    }
  });
  if (max_rel_err) *max_rel_err = worst;
  if (rc != PUNET_OK) return rc;
  if (!all_pass) {
    set_last_error("gradient check failed; worst relative error " + std::to_string(worst));
    return PUNET_ERR_NUMERIC;
  }
  return PUNET_OK;
}

punet_model* punet_model_open(const char* ckpt_dir) {
  if (!ckpt_dir) {
    set_last_error("punet_model_open: null path");
    return nullptr;
  }
  try {
    punet_model* m = new punet_model(punet::load_checkpoint(ckpt_dir));
    g_last_error.clear();
    return m;
  } catch (const std::exception& e) {
    set_last_error(e.what());
    return nullptr;
  }
}

void punet_model_free(punet_model* model) { delete model; }

int punet_model_input_size(const punet_model* model, int* h, int* w) {
  if (!model) {
    set_last_error("punet_model_input_size: null model");
    return PUNET_ERR_CONFIG;
  }
  if (h) *h = model->ck.model.input_h;
  if (w) *w = model->ck.model.input_w;
  return PUNET_OK;
}

int punet_model_classes(const punet_model* model) {
  return model ? model->ck.model.classes : -1;
}

int punet_model_raters(const punet_model* model) {
  return model ? model->ck.model.raters : -1;
}

int punet_model_predict(const punet_model* model, const float* image, int rater,
                        float* logits_out) {
  if (!model || !image || !logits_out) {
    set_last_error("punet_model_predict: null argument");
    return PUNET_ERR_CONFIG;
  }
  return guarded([&] {
    const punet::UNetConfig& mc = model->ck.model;
    punet::Tensor<float> x({mc.input_h, mc.input_w, 3},
                           std::vector<float>(image, image + static_cast<std::size_t>(mc.input_h) *
                                                                 mc.input_w * 3));
    punet::Tape<float> tape;
    auto bound = punet::bind_params_const(tape, model->ck.params);
    punet::Var<float> xv = tape.leaf(std::move(x), false);
    std::optional<punet::RaterTag> tag;
    if (mc.use_prompts) tag = punet::RaterTag{rater};
    punet::Var<float> logits = model->net.forward(bound, xv, tag);
    const auto& lv = logits.val();
    std::copy(lv.data.begin(), lv.data.end(), logits_out);
  });
}

}  // extern "C"
