#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "core/ops.hpp"
#include "core/param_store.hpp"
#include "core/rng.hpp"
#include "model/config.hpp"

namespace punet {

// One ITB site: between two adjacent downsampling layers (encoder) or two
// adjacent upsampling layers (decoder). `dim` is the channel count of the
// feature map at the site, which the prompt tokens must match.
struct InsertionPoint {
  bool in_encoder;
  int gap;  // 1..N-1
  int dim;
};

// The PU-Net architecture: conv encoder/decoder with skip connections,
// transformer blocks implanted between adjacent stages, a prompt bank with
// per-site channel-wise FCs carrying the prompt across width changes, and a
// 1x1 segmentation head.
//
// The class holds only structure; parameters live in a ParamStore and are
// bound onto a tape per forward pass, so a model instance is read-only and
// shareable during inference.
template <typename S>
class PUNet {
 public:
  struct ForwardStats {
    int itb_calls = 0;
  };

  explicit PUNet(UNetConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    for (int i = 1; i < cfg_.stages; ++i) {
      if (cfg_.insertion != Insertion::UpOnly) {
        points_.push_back({true, i, cfg_.channels(i)});
      }
    }
    for (int j = 1; j < cfg_.stages; ++j) {
      if (cfg_.insertion != Insertion::DownOnly) {
        points_.push_back({false, j, cfg_.channels(cfg_.stages - j)});
      }
    }
  }

  const UNetConfig& config() const { return cfg_; }
  const std::vector<InsertionPoint>& points() const { return points_; }

  // Prompt width entering site k (the previous site's width, or the stage-0
  // embedding width for the first site).
  int prompt_dim_entering(int k) const {
    return k == 0 ? cfg_.prompt_dim : points_[static_cast<std::size_t>(k - 1)].dim;
  }

  std::string head_param(int seg_head, const char* leaf) const {
    if (cfg_.seg_heads == 1) return std::string("head/") + leaf;
    return "head/h" + std::to_string(seg_head) + "/" + leaf;
  }

  // -------------------------------------------------------------------------
  // Parameter construction
  // -------------------------------------------------------------------------

  ParamStore<S> init_params(std::uint64_t seed) const {
    ParamStore<S> ps;
    auto stream = [seed](const std::string& name) {
      std::uint64_t h = 1469598103934665603ULL;
      for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
      }
      return Rng(derive_seed(seed, h));
    };

    auto conv = [&](const std::string& base, int kh, int kw, int cin, int cout) {
      Rng rng = stream(base);
      double bound = std::sqrt(6.0 / (kh * kw * cin));
      Tensor<S> w = Tensor<S>::zeros({kh, kw, cin, cout});
      for (auto& v : w.data) v = static_cast<S>(rng.uniform(-bound, bound));
      ps.add(base + "/w", std::move(w));
      ps.add(base + "/b", Tensor<S>::zeros({cout}));
    };
    auto linear = [&](const std::string& base, const char* wn, const char* bn, int din, int dout,
                      bool zero_init) {
      Rng rng = stream(base + "/" + wn);
      Tensor<S> w = Tensor<S>::zeros({din, dout});
      if (!zero_init) {
        double bound = std::sqrt(6.0 / (din + dout));
        for (auto& v : w.data) v = static_cast<S>(rng.uniform(-bound, bound));
      }
      ps.add(base + "/" + wn, std::move(w));
      ps.add(base + "/" + bn, Tensor<S>::zeros({dout}));
    };

    int n = cfg_.stages;
    conv("backbone/stem", 3, 3, 3, cfg_.channels(0));
    for (int i = 1; i <= n; ++i) {
      conv("backbone/down" + std::to_string(i), 3, 3, cfg_.channels(i - 1), cfg_.channels(i));
    }
    int cb = cfg_.channels(n);
    conv("backbone/bott1", 3, 3, cb, 2 * cb);
    conv("backbone/bott_mid", 1, 1, 2 * cb, 2 * cb);
    conv("backbone/bott2", 3, 3, 2 * cb, cb);
    for (int j = 1; j <= n; ++j) {
      int cin = cfg_.channels(n - j + 1), cout = cfg_.channels(n - j);
      conv("backbone/up" + std::to_string(j), 3, 3, cin, cout);
      conv("backbone/fuse" + std::to_string(j), 1, 1, 2 * cout, cout);
    }
    if (cfg_.seg_heads == 1) {
      conv("head", 1, 1, cfg_.channels(0), cfg_.classes);
    } else {
      for (int k = 1; k <= cfg_.seg_heads; ++k) {
        conv("head/h" + std::to_string(k), 1, 1, cfg_.channels(0), cfg_.classes);
      }
    }

    for (std::size_t k = 0; k < points_.size(); ++k) {
      std::string base = "itb/" + std::to_string(k);
      int d = points_[k].dim;
      int dh = d / cfg_.heads;
      for (int h = 0; h < cfg_.heads; ++h) {
        std::string hb = base + "/msa/h" + std::to_string(h);
        linear(hb, "wq", "bq", d, dh, false);
        linear(hb, "wk", "bk", d, dh, false);
        linear(hb, "wv", "bv", d, dh, false);
        // Zero-init output projection: the block starts as the identity and
        // the residual branch grows during training.
        ps.add(hb + "/wo", Tensor<S>::zeros({dh, d}));
      }
      ps.add(base + "/msa/bo", Tensor<S>::zeros({d}));
      ps.add(base + "/ln1/gamma", Tensor<S>::full({d}, S(1)));
      ps.add(base + "/ln1/beta", Tensor<S>::zeros({d}));
      ps.add(base + "/ln2/gamma", Tensor<S>::full({d}, S(1)));
      ps.add(base + "/ln2/beta", Tensor<S>::zeros({d}));
      linear(base + "/ffn", "w1", "b1", d, cfg_.ffn_ratio * d, false);
      linear(base + "/ffn", "w2", "b2", cfg_.ffn_ratio * d, d, true);
    }

    if (cfg_.use_prompts) {
      for (int r = 0; r <= cfg_.raters; ++r) {
        RaterTag tag{r};
        Rng rng = stream("prompt/" + tag.name());
        Tensor<S> p = Tensor<S>::zeros({cfg_.prompt_tokens, cfg_.prompt_dim});
        for (auto& v : p.data) v = static_cast<S>(rng.normal(0.0, 0.02));
        ps.add("prompt/" + tag.name(), std::move(p));
      }
      for (std::size_t k = 0; k < points_.size(); ++k) {
        int din = prompt_dim_entering(static_cast<int>(k));
        int dout = points_[k].dim;
        // Identity-like init keeps the prompt's distribution across width
        // changes at the start of training.
        Tensor<S> w = Tensor<S>::zeros({din, dout});
        for (int i = 0; i < std::min(din, dout); ++i) w.at(i, i) = S(1);
        ps.add("stage_map/" + std::to_string(k) + "/w", std::move(w));
        ps.add("stage_map/" + std::to_string(k) + "/b", Tensor<S>::zeros({dout}));
      }
    }
    return ps;
  }

  // -------------------------------------------------------------------------
  // Forward pieces
  // -------------------------------------------------------------------------

  // Channel-wise FC carrying prompt tokens into site k.
  Var<S> prompt_propagate(const BoundParams<S>& p, int k, Var<S> prompt) const {
    std::string base = "stage_map/" + std::to_string(k);
    Var<S> w = p[base + "/w"];
    if (prompt.shape().size() != 2 || prompt.shape()[1] != w.shape()[0]) {
      throw DimError("prompt_propagate: prompt " + prompt.val().shape_str() + " vs map " +
                     w.val().shape_str());
    }
    return add_rowvec(matmul(prompt, w), p[base + "/b"]);
  }

  // One transformer encoder layer over [imaging tokens ; prompt tokens].
  // Returns the restored feature map and the updated prompt tokens.
  std::pair<Var<S>, Var<S>> itb_forward(const BoundParams<S>& p, int k, Var<S> feat,
                                        std::optional<Var<S>> prompt) const {
    const Tensor<S>& fv = feat.val();
    if (fv.rank() != 3) throw DimError("itb_forward: expected HWC feature map");
    int h = fv.dim(0), w = fv.dim(1), c = fv.dim(2);
    int n_img = h * w;
    if (prompt && (prompt->shape().size() != 2 || prompt->shape()[1] != c)) {
      throw DimError("itb_forward: prompt dim " +
                     Tensor<S>::shape_str(prompt->shape()) + " does not match feature channels " +
                     std::to_string(c));
    }

    Var<S> tokens = reshape(feat, {n_img, c});
    Var<S> z_in = prompt ? concat_rows(tokens, *prompt) : tokens;

    std::string base = "itb/" + std::to_string(k);
    int dh = c / cfg_.heads;
    Var<S> msa_sum{};
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      std::string hb = base + "/msa/h" + std::to_string(hd);
      Var<S> q = add_rowvec(matmul(z_in, p[hb + "/wq"]), p[hb + "/bq"]);
      Var<S> kk = add_rowvec(matmul(z_in, p[hb + "/wk"]), p[hb + "/bk"]);
      Var<S> v = add_rowvec(matmul(z_in, p[hb + "/wv"]), p[hb + "/bv"]);
      Var<S> att = softmax_rows(scale(matmul_nt(q, kk), S(1) / static_cast<S>(std::sqrt(dh))));
      Var<S> ctx = matmul(att, v);
      Var<S> proj = matmul(ctx, p[hb + "/wo"]);
      msa_sum = hd == 0 ? proj : add(msa_sum, proj);
    }
    Var<S> msa = add_rowvec(msa_sum, p[base + "/msa/bo"]);

    constexpr S ln_eps = static_cast<S>(1e-5);
    Var<S> z_hidden =
        add(layer_norm(msa, p[base + "/ln1/gamma"], p[base + "/ln1/beta"], ln_eps), z_in);
    Var<S> ffn = add_rowvec(
        matmul(gelu(add_rowvec(matmul(z_hidden, p[base + "/ffn/w1"]), p[base + "/ffn/b1"])),
               p[base + "/ffn/w2"]),
        p[base + "/ffn/b2"]);
    Var<S> z_out =
        add(layer_norm(ffn, p[base + "/ln2/gamma"], p[base + "/ln2/beta"], ln_eps), z_hidden);

    if (!prompt) {
      return {reshape(z_out, {h, w, c}), Var<S>{}};
    }
    auto [img, prm] = split_rows(z_out, n_img);
    return {reshape(img, {h, w, c}), prm};
  }

  Var<S> forward(const BoundParams<S>& p, Var<S> x, std::optional<RaterTag> tag,
                 int seg_head = 1, ForwardStats* stats = nullptr) const {
    const Tensor<S>& xv = x.val();
    if (xv.rank() != 3 || xv.dim(0) != cfg_.input_h || xv.dim(1) != cfg_.input_w ||
        xv.dim(2) != 3) {
      throw DimError("forward: expected " + std::to_string(cfg_.input_h) + "x" +
                     std::to_string(cfg_.input_w) + "x3 input, got " + xv.shape_str());
    }
    std::optional<Var<S>> prompt;
    if (cfg_.use_prompts) {
      if (!tag) throw ArgError("forward: rater tag required for a prompt-bearing model");
      if (tag->value < 0 || tag->value > cfg_.raters) {
        throw ArgError("forward: unknown rater tag " + std::to_string(tag->value) +
                       " (have raters 1.." + std::to_string(cfg_.raters) + " plus aggregate)");
      }
      prompt = p["prompt/" + tag->name()];
    }
    if (seg_head < 1 || seg_head > cfg_.seg_heads) {
      throw ArgError("forward: segmentation head " + std::to_string(seg_head) + " out of range");
    }

    auto cv = [&](const std::string& base, Var<S> in, int stride, int pad) {
      return gelu(conv2d(in, p[base + "/w"], p[base + "/b"], stride, pad));
    };

    int n = cfg_.stages;
    int next_point = 0;
    auto run_point = [&](bool encoder, int gap, Var<S>& f) {
      if (next_point >= static_cast<int>(points_.size())) return;
      const InsertionPoint& pt = points_[static_cast<std::size_t>(next_point)];
      if (pt.in_encoder != encoder || pt.gap != gap) return;
      if (prompt) {
        Var<S> carried = prompt_propagate(p, next_point, *prompt);
        auto [f2, p2] = itb_forward(p, next_point, f, carried);
        f = f2;
        prompt = p2;
      } else {
        auto [f2, p2] = itb_forward(p, next_point, f, std::nullopt);
        f = f2;
      }
      if (stats) stats->itb_calls++;
      ++next_point;
    };

    std::vector<Var<S>> skips;
    Var<S> f = cv("backbone/stem", x, 1, 1);
    skips.push_back(f);
    for (int i = 1; i <= n; ++i) {
      f = cv("backbone/down" + std::to_string(i), f, 2, 1);
      if (i < n) run_point(true, i, f);
      skips.push_back(f);
    }

    f = cv("backbone/bott1", f, 1, 1);
    f = cv("backbone/bott_mid", f, 1, 0);
    f = cv("backbone/bott2", f, 1, 1);

    for (int j = 1; j <= n; ++j) {
      f = upsample_nearest(f, 2);
      f = cv("backbone/up" + std::to_string(j), f, 1, 1);
      f = concat_channels(f, skips[static_cast<std::size_t>(n - j)]);
      f = cv("backbone/fuse" + std::to_string(j), f, 1, 0);
      if (j < n) run_point(false, j, f);
    }

    return conv2d(f, p[head_param(seg_head, "w")], p[head_param(seg_head, "b")], 1, 0);
  }

  // Freeze assignment per fine-tune mode. PromptAndHead leaves exactly the
  // prompt embeddings, every channel-wise FC, and the segmentation head
  // trainable.
  void apply_partition(ParamStore<S>& ps, FineTuneMode mode) const {
    switch (mode) {
      case FineTuneMode::Full:
        ps.unfreeze_all();
        break;
      case FineTuneMode::HeadOnly:
        ps.freeze_all();
        for (auto& [name, e] : ps.entries()) {
          if (ParamStore<S>::group_of(name) == "head") e.frozen = false;
        }
        break;
      case FineTuneMode::PromptAndHead:
        ps.freeze_all();
        for (auto& [name, e] : ps.entries()) {
          std::string g = ParamStore<S>::group_of(name);
          if (g == "head" || g == "prompt" || g == "stage_map") e.frozen = false;
        }
        break;
    }
  }

 private:
  UNetConfig cfg_;
  std::vector<InsertionPoint> points_;
};

}  // namespace punet
