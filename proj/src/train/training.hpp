#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "core/ops.hpp"
#include "core/param_store.hpp"
#include "core/rng.hpp"
#include "data/synth.hpp"
#include "model/checkpoint.hpp"
#include "model/config.hpp"
#include "model/punet.hpp"

namespace punet {

// ---------------------------------------------------------------------------
// Dice loss
// ---------------------------------------------------------------------------

// Soft Dice over sigmoid probabilities, one term per class channel, then the
// class mean: 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s). Channels are
// sigmoid-independent because disc/cup are nested, not exclusive.
template <typename S>
Var<S> dice_loss(Var<S> logits, Var<S> target, S smooth) {
  if (!(smooth > S(0))) throw ArgError("dice_loss: smooth must be positive");
  if (logits.shape() != target.shape()) {
    throw DimError("dice_loss: logits " + logits.val().shape_str() + " vs target " +
                   target.val().shape_str());
  }
  Var<S> p = sigmoid(logits);
  Var<S> inter = channel_sums(mul(p, target));
  Var<S> denom = add_scalar(add(channel_sums(p), channel_sums(target)), smooth);
  Var<S> numer = add_scalar(scale(inter, S(2)), smooth);
  return add_scalar(scale(mean_all(div(numer, denom)), S(-1)), S(1));
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

template <typename S>
struct AdamState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;

  std::map<std::string, Tensor<S>> m;
  std::map<std::string, Tensor<S>> v;
  long t = 0;
};

// Bias-corrected Adam update over the non-frozen parameters. The gradient map
// must cover exactly the trainable set: a missing gradient or a gradient for
// a frozen parameter is a contract violation.
template <typename S>
void adam_step(ParamStore<S>& params, const std::map<std::string, Tensor<S>>& grads,
               AdamState<S>& st, S lr) {
  for (const auto& [name, g] : grads) {
    if (!params.has(name)) throw ContractError("adam_step: gradient for unknown param " + name);
    if (params.frozen(name)) {
      throw ContractError("adam_step: gradient supplied for frozen param " + name);
    }
  }
  st.t += 1;
  double bc1 = 1.0 - std::pow(AdamState<S>::beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(AdamState<S>::beta2, static_cast<double>(st.t));
  for (auto& [name, e] : params.entries()) {
    if (e.frozen) continue;
    auto git = grads.find(name);
    if (git == grads.end()) {
      throw ContractError("adam_step: missing gradient for trainable param " + name);
    }
    const Tensor<S>& g = git->second;
    require_same_shape(g.shape, e.value.shape, "adam_step");
    auto [mit, minserted] = st.m.emplace(name, Tensor<S>::zeros(e.value.shape));
    auto [vit, vinserted] = st.v.emplace(name, Tensor<S>::zeros(e.value.shape));
    Tensor<S>& m = mit->second;
    Tensor<S>& v = vit->second;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      double gi = static_cast<double>(g.data[i]);
      double mi = AdamState<S>::beta1 * static_cast<double>(m.data[i]) +
                  (1.0 - AdamState<S>::beta1) * gi;
      double vi = AdamState<S>::beta2 * static_cast<double>(v.data[i]) +
                  (1.0 - AdamState<S>::beta2) * gi * gi;
      m.data[i] = static_cast<S>(mi);
      v.data[i] = static_cast<S>(vi);
      double mhat = mi / bc1;
      double vhat = vi / bc2;
      e.value.data[i] -= static_cast<S>(static_cast<double>(lr) * mhat /
                                        (std::sqrt(vhat) + AdamState<S>::eps));
    }
  }
}

struct Schedule {
  double base_lr = 0.01;
  std::vector<int> drop_epochs = {8, 13, 17};  // desk default; the reference
                                               // run uses {10, 20, 30} over 60
  double drop_factor = 10.0;
  int epochs = 20;
};

inline Schedule paper_schedule() { return Schedule{0.01, {10, 20, 30}, 10.0, 60}; }

inline double lr_at(const Schedule& s, int epoch) {
  if (epoch < 0) throw ArgError("lr_at: negative epoch");
  int drops = 0;
  for (int d : s.drop_epochs) {
    if (epoch >= d) ++drops;
  }
  return s.base_lr / std::pow(s.drop_factor, drops);
}

// ---------------------------------------------------------------------------
// Epoch samplers
// ---------------------------------------------------------------------------

// One epoch's ordered (scene, tag) stream. Mix enumerates every (scene, tag)
// pair over {c, r1..rR} once, in an order shuffled per (seed, epoch);
// IndividualOnly/FusionOnly restrict the tag set.
inline std::vector<std::pair<int, RaterTag>> epoch_samples(const Dataset& ds,
                                                           TrainingStrategy strategy,
                                                           std::uint64_t seed, int epoch) {
  if (ds.n_scenes() == 0) throw ConfigError("sampler: empty dataset");
  std::vector<RaterTag> tags;
  if (strategy != TrainingStrategy::IndividualOnly) tags.push_back(RaterTag::aggregate());
  if (strategy != TrainingStrategy::FusionOnly) {
    for (int j = 1; j <= ds.n_raters(); ++j) tags.push_back(RaterTag::rater(j));
  }
  if (tags.empty()) throw ConfigError("sampler: strategy selects no label subset");
  std::vector<std::pair<int, RaterTag>> out;
  out.reserve(static_cast<std::size_t>(ds.n_scenes()) * tags.size());
  for (int k = 0; k < ds.n_scenes(); ++k) {
    for (const auto& t : tags) out.emplace_back(k, t);
  }
  Rng rng(derive_seed(seed, 0x5a3c1e0ULL + static_cast<std::uint64_t>(epoch)));
  shuffle_inplace(out, rng);
  return out;
}

// Label-sampling baseline stream: each scene once per epoch, with a uniformly
// drawn individual rater's label.
inline std::vector<std::pair<int, RaterTag>> label_sampling_samples(const Dataset& ds,
                                                                    std::uint64_t seed,
                                                                    int epoch) {
  if (ds.n_scenes() == 0) throw ConfigError("sampler: empty dataset");
  std::vector<std::pair<int, RaterTag>> out;
  out.reserve(static_cast<std::size_t>(ds.n_scenes()));
  Rng rng(derive_seed(seed, 0x1abe15ULL + static_cast<std::uint64_t>(epoch)));
  for (int k = 0; k < ds.n_scenes(); ++k) {
    out.emplace_back(k, RaterTag::rater(1 + static_cast<int>(rng.below(
                            static_cast<std::uint64_t>(ds.n_raters())))));
  }
  shuffle_inplace(out, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
  Schedule schedule;
  TrainingStrategy strategy = TrainingStrategy::Mix;
  FineTuneMode mode = FineTuneMode::Full;
  int batch_size = 4;
  double dice_smooth = 1.0;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir;   // empty: keep everything in memory
  bool label_sampling = false;     // baseline: overrides `strategy`
  bool multihead = false;          // head j follows the sample's rater tag
  int stop_after_epochs = -1;      // early clean stop (checkpoint-resume tests)
};

struct TrainResult {
  std::vector<double> epoch_mean_loss;
  int epochs_done = 0;
};

// Runs epochs of sampler -> forward -> dice loss -> backward -> adam step.
// Gradients are averaged over each batch in sample order. When out_dir is
// set, a checkpoint (with optimizer state) is written after every epoch and
// per-sample loss rows are appended to train_log.csv.
template <typename S>
TrainResult train(const PUNet<S>& model, ParamStore<S>& params, const Dataset& ds,
                  const TrainOptions& opt, AdamState<S>* adam_in = nullptr,
                  int start_epoch = 0) {
  model.apply_partition(params, opt.mode);
  AdamState<S> local_adam;
  AdamState<S>& adam = adam_in ? *adam_in : local_adam;
  TrainResult res;
  res.epochs_done = start_epoch;

  std::ofstream log;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    bool fresh = start_epoch == 0;
    log.open(opt.out_dir / "train_log.csv", fresh ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open train log in " + opt.out_dir.string());
    if (fresh) log << "epoch,step,tag,loss,lr\n";
  }

  int end_epoch = opt.stop_after_epochs >= 0
                      ? std::min(opt.stop_after_epochs, opt.schedule.epochs)
                      : opt.schedule.epochs;
  long step = static_cast<long>(start_epoch) *
              static_cast<long>(opt.label_sampling
                                    ? ds.n_scenes()
                                    : static_cast<int>(epoch_samples(ds, opt.strategy, opt.seed, 0).size()));

  for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
    double lr = lr_at(opt.schedule, epoch);
    auto order = opt.label_sampling ? label_sampling_samples(ds, opt.seed, epoch)
                                    : epoch_samples(ds, opt.strategy, opt.seed, epoch);
    double loss_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t bend = std::min(order.size(), i + static_cast<std::size_t>(opt.batch_size));
      std::map<std::string, Tensor<S>> acc;
      S inv_b = S(1) / static_cast<S>(bend - i);
      for (std::size_t s = i; s < bend; ++s) {
        auto [scene, tag] = order[s];
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params);
        Var<S> x = tape.leaf(ds.images[static_cast<std::size_t>(scene)].template cast<S>(), false);
        Var<S> target = tape.leaf(ds.mask_for(scene, tag).template cast<S>(), false);
        std::optional<RaterTag> ftag;
        if (model.config().use_prompts) ftag = tag;
        int seg_head = opt.multihead ? tag.value : 1;
        Var<S> logits = model.forward(bound, x, ftag, seg_head);
        Var<S> loss = dice_loss(logits, target, static_cast<S>(opt.dice_smooth));
        double lval = static_cast<double>(loss.val().data[0]);
        if (!std::isfinite(lval)) {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + " (scene " + std::to_string(scene) +
                             ", tag " + tag.name() + ", lr " + std::to_string(lr) + ")");
        }
        tape.backward(loss);
        auto grads = collect_grads(tape, bound, params);
        for (auto& [name, g] : grads) {
          auto [it, inserted] = acc.emplace(name, Tensor<S>::zeros(g.shape));
          Tensor<S>& a = it->second;
          for (std::size_t e2 = 0; e2 < g.numel(); ++e2) a.data[e2] += g.data[e2] * inv_b;
        }
        loss_sum += lval;
        if (log.is_open()) {
          char row[128];
          std::snprintf(row, sizeof(row), "%d,%ld,%s,%.6f,%.6g\n", epoch, step,
                        tag.name().c_str(), lval, lr);
          log << row;
        }
        ++step;
      }
      adam_step(params, acc, adam, static_cast<S>(lr));
      i = bend;
    }
    res.epoch_mean_loss.push_back(loss_sum / static_cast<double>(order.size()));
    res.epochs_done = epoch + 1;

    if (!opt.out_dir.empty()) {
      CheckpointData ck;
      ck.model = model.config();
      ck.params = params.template cast<float>();
      ck.has_optimizer = true;
      ck.optim_step = adam.t;
      for (const auto& [n, m] : adam.m) ck.optim_m.emplace(n, m.template cast<float>());
      for (const auto& [n, v] : adam.v) ck.optim_v.emplace(n, v.template cast<float>());
      ck.epochs_done = epoch + 1;
      save_checkpoint(opt.out_dir, ck);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Table-1 baseline strategies
// ---------------------------------------------------------------------------

// Shared backbone without prompts, one segmentation head per rater; head j
// sees only rater j's labels.
template <typename S>
TrainResult baseline_multihead(const PUNet<S>& model, ParamStore<S>& params, const Dataset& ds,
                               const TrainOptions& base_opt) {
  if (model.config().seg_heads != ds.n_raters()) {
    throw ConfigError("baseline_multihead: model needs one head per rater");
  }
  TrainOptions opt = base_opt;
  opt.strategy = TrainingStrategy::IndividualOnly;
  opt.multihead = true;
  opt.mode = FineTuneMode::Full;
  return train(model, params, ds, opt);
}

// Single head, no prompts; every step draws a rater's label uniformly.
template <typename S>
TrainResult baseline_label_sampling(const PUNet<S>& model, ParamStore<S>& params,
                                    const Dataset& ds, const TrainOptions& base_opt) {
  TrainOptions opt = base_opt;
  opt.label_sampling = true;
  opt.mode = FineTuneMode::Full;
  return train(model, params, ds, opt);
}

}  // namespace punet
