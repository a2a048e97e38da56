// Command-line front end for the punet shared library. Every subcommand is a
// thin wrapper over the C API: build a config from file + flag overrides,
// call the corresponding entry point, surface its exit code.

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "punet/punet.h"

namespace {

struct ConfigHandle {
  punet_config* cfg = punet_config_create();
  ~ConfigHandle() { punet_config_free(cfg); }
};

int fail(int rc) {
  std::fprintf(stderr, "error: %s\n", punet_last_error());
  return rc;
}

// Shared options: --config file first, then typed flags, then raw --set pairs.
struct CommonOpts {
  std::string config_file;
  std::vector<std::string> sets;
  std::string seed;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--config", c.config_file, "JSON config file (flat keys; see README)");
  cmd->add_option("--set", c.sets,
                  "Override one config key, e.g. --set epochs=8 (repeatable)");
  cmd->add_option("--seed", c.seed, "Run seed (overrides config file and PUNET_SEED)");
}

int apply_common(ConfigHandle& h, const CommonOpts& c) {
  if (!c.config_file.empty()) {
    int rc = punet_config_load(h.cfg, c.config_file.c_str());
    if (rc != PUNET_OK) return rc;
  }
  for (const auto& kv : c.sets) {
    auto pos = kv.find('=');
    if (pos == std::string::npos) {
      std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
      return PUNET_ERR_CONFIG;
    }
    int rc = punet_config_set(h.cfg, kv.substr(0, pos).c_str(), kv.substr(pos + 1).c_str());
    if (rc != PUNET_OK) return rc;
  }
  if (!c.seed.empty()) {
    int rc = punet_config_set(h.cfg, "seed", c.seed.c_str());
    if (rc != PUNET_OK) return rc;
  }
  return PUNET_OK;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"punet: rater-aware prompt segmentation pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(punet_version()));

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-rater dataset");
  CommonOpts synth_common;
  add_common(synth, synth_common);
  std::string synth_out;
  bool synth_suite = false;
  std::string synth_domain;
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_flag("--suite", synth_suite,
                  "Write source/, target_train/, target_test/ under --out");
  synth->add_option("--domain", synth_domain, "source|target (single dataset only)");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Train all parameters on a source dataset");
  CommonOpts pre_common;
  add_common(pre, pre_common);
  std::string pre_data, pre_out;
  pre->add_option("--data", pre_data, "Training dataset directory")->required();
  pre->add_option("--out", pre_out, "Checkpoint output directory")->required();

  // finetune
  auto* ft = app.add_subcommand("finetune", "Fine-tune a pretrained checkpoint");
  CommonOpts ft_common;
  add_common(ft, ft_common);
  std::string ft_data, ft_ckpt, ft_out, ft_mode, ft_strategy;
  bool ft_resume = false;
  ft->add_option("--data", ft_data, "Training dataset directory")->required();
  ft->add_option("--ckpt", ft_ckpt, "Pretrained checkpoint directory")->required();
  ft->add_option("--out", ft_out, "Checkpoint output directory")->required();
  ft->add_option("--mode", ft_mode, "full|head|prompt (default from config: prompt)");
  ft->add_option("--strategy", ft_strategy, "mix|individual|fusion (default: mix)");
  ft->add_flag("--resume", ft_resume, "Continue a partially trained --out directory");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a test dataset");
  CommonOpts ev_common;
  add_common(ev, ev_common);
  std::string ev_data, ev_ckpt, ev_out;
  ev->add_option("--data", ev_data, "Test dataset directory")->required();
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint directory")->required();
  ev->add_option("--out", ev_out, "Report output directory")->required();

  // ablate
  auto* ab = app.add_subcommand("ablate", "Run the locations or strategy ablation");
  CommonOpts ab_common;
  add_common(ab, ab_common);
  std::string ab_which, ab_root, ab_out;
  ab->add_option("which", ab_which, "locations|strategy")->required();
  ab->add_option("--data", ab_root,
                 "Dataset root containing source/, target_train/, target_test/")
      ->required();
  ab->add_option("--out", ab_out, "Report output directory")->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  bool gc_quiet = false;
  gc->add_flag("--quiet", gc_quiet, "Only report the overall result");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return PUNET_ERR_CONFIG;
  }

  ConfigHandle h;

  if (synth->parsed()) {
    int rc = apply_common(h, synth_common);
    if (rc != PUNET_OK) return fail(rc);
    if (!synth_domain.empty()) {
      rc = punet_config_set(h.cfg, "domain", synth_domain.c_str());
      if (rc != PUNET_OK) return fail(rc);
    }
    int scenes = 0, samples = 0;
    rc = punet_synth(h.cfg, synth_out.c_str(), synth_suite ? 1 : 0, &scenes, &samples);
    if (rc != PUNET_OK) return fail(rc);
    if (synth_suite) {
      std::printf("wrote dataset suite to %s (source: %d scenes, %d samples)\n",
                  synth_out.c_str(), scenes, samples);
    } else {
      std::printf("wrote %d scenes (%d samples) to %s\n", scenes, samples, synth_out.c_str());
    }
    return 0;
  }

  if (pre->parsed()) {
    int rc = apply_common(h, pre_common);
    if (rc != PUNET_OK) return fail(rc);
    rc = punet_pretrain(h.cfg, pre_data.c_str(), pre_out.c_str());
    if (rc != PUNET_OK) return fail(rc);
    std::printf("pretrained checkpoint written to %s\n", pre_out.c_str());
    return 0;
  }

  if (ft->parsed()) {
    int rc = apply_common(h, ft_common);
    if (rc != PUNET_OK) return fail(rc);
    if (!ft_mode.empty()) {
      rc = punet_config_set(h.cfg, "mode", ft_mode.c_str());
      if (rc != PUNET_OK) return fail(rc);
    }
    if (!ft_strategy.empty()) {
      rc = punet_config_set(h.cfg, "strategy", ft_strategy.c_str());
      if (rc != PUNET_OK) return fail(rc);
    }
    uint64_t trainable = 0, total = 0;
    rc = punet_finetune(h.cfg, ft_data.c_str(), ft_ckpt.c_str(), ft_out.c_str(),
                        ft_resume ? 1 : 0, &trainable, &total);
    if (rc != PUNET_OK) return fail(rc);
    std::printf("fine-tuned checkpoint written to %s\n", ft_out.c_str());
    std::printf("trainable parameters: %llu / %llu (%.4f%%)\n",
                static_cast<unsigned long long>(trainable),
                static_cast<unsigned long long>(total),
                100.0 * static_cast<double>(trainable) / static_cast<double>(total));
    return 0;
  }

  if (ev->parsed()) {
    int rc = apply_common(h, ev_common);
    if (rc != PUNET_OK) return fail(rc);
    rc = punet_eval(h.cfg, ev_ckpt.c_str(), ev_data.c_str(), ev_out.c_str());
    if (rc != PUNET_OK) return fail(rc);
    std::printf("evaluation report written to %s\n", ev_out.c_str());
    return 0;
  }

  if (ab->parsed()) {
    int rc = apply_common(h, ab_common);
    if (rc != PUNET_OK) return fail(rc);
    rc = punet_ablate(h.cfg, ab_which.c_str(), ab_root.c_str(), ab_out.c_str());
    if (rc != PUNET_OK) return fail(rc);
    std::printf("ablation report written to %s\n", ab_out.c_str());
    return 0;
  }

  if (gc->parsed()) {
    double worst = 0.0;
    int rc = punet_gradcheck(gc_quiet ? 0 : 1, &worst);
    if (rc != PUNET_OK) return fail(rc);
    std::printf("all gradient checks passed (worst relative error %.3e)\n", worst);
    return 0;
  }

  return PUNET_ERR_CONFIG;
}
