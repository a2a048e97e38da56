#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "core/param_store.hpp"
#include "core/tensor.hpp"
#include "data/synth.hpp"
#include "model/config.hpp"
#include "model/punet.hpp"
#include "train/training.hpp"

namespace punet {

// ---------------------------------------------------------------------------
// Dice coefficient
// ---------------------------------------------------------------------------

// 2|A n B| / (|A| + |B|) over binary masks; both-empty pairs score 1.0.
inline double dice_coefficient(const Tensor<float>& a, const Tensor<float>& b) {
  require_same_shape(a.shape, b.shape, "dice_coefficient");
  double inter = 0, ca = 0, cb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    float av = a.data[i], bv = b.data[i];
    if ((av != 0.0f && av != 1.0f) || (bv != 0.0f && bv != 1.0f)) {
      throw ContractError("dice_coefficient: non-binary mask entry");
    }
    inter += (av == 1.0f && bv == 1.0f) ? 1 : 0;
    ca += av;
    cb += bv;
  }
  if (ca + cb == 0) return 1.0;
  return 2.0 * inter / (ca + cb);
}

// Per-class Dice of two H x W x C binary masks.
inline std::vector<double> dice_per_class(const Tensor<float>& pred, const Tensor<float>& gt) {
  require_same_shape(pred.shape, gt.shape, "dice_per_class");
  int c = pred.shape.back();
  std::vector<double> inter(static_cast<std::size_t>(c), 0), ca(static_cast<std::size_t>(c), 0),
      cb(static_cast<std::size_t>(c), 0);
  std::size_t rows = pred.numel() / static_cast<std::size_t>(c);
  for (std::size_t r = 0; r < rows; ++r) {
    for (int j = 0; j < c; ++j) {
      float pv = pred.data[r * static_cast<std::size_t>(c) + j];
      float gv = gt.data[r * static_cast<std::size_t>(c) + j];
      if ((pv != 0.0f && pv != 1.0f) || (gv != 0.0f && gv != 1.0f)) {
        throw ContractError("dice_per_class: non-binary mask entry");
      }
      inter[static_cast<std::size_t>(j)] += (pv == 1.0f && gv == 1.0f) ? 1 : 0;
      ca[static_cast<std::size_t>(j)] += pv;
      cb[static_cast<std::size_t>(j)] += gv;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(c));
  for (int j = 0; j < c; ++j) {
    double denom = ca[static_cast<std::size_t>(j)] + cb[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(j)] = denom == 0 ? 1.0 : 2.0 * inter[static_cast<std::size_t>(j)] / denom;
  }
  return out;
}

// Sigmoid(logit) >= 0.5 is logit >= 0.
inline Tensor<float> binarize_logits(const Tensor<float>& logits) {
  Tensor<float> out = Tensor<float>::zeros(logits.shape);
  for (std::size_t i = 0; i < logits.numel(); ++i) out.data[i] = logits.data[i] >= 0.0f ? 1.0f : 0.0f;
  return out;
}

// ---------------------------------------------------------------------------
// Prompt x label-source evaluation matrix
// ---------------------------------------------------------------------------

struct EvalMatrix {
  std::vector<std::string> rows;                            // prompt identifiers
  std::vector<std::string> cols;                            // label sources
  std::vector<std::vector<std::array<double, 2>>> cells;    // (disc, cup) per cell
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;

  double cell_mean(std::size_t i, std::size_t j) const {
    return 0.5 * (cells[i][j][0] + cells[i][j][1]);
  }

  double mean_all_cells() const {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < cols.size(); ++j) {
        s += cell_mean(i, j);
        ++n;
      }
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }

  std::string to_csv() const {
    std::string s = "prompt";
    for (const auto& c : cols) s += "," + c + "_disc," + c + "_cup";
    s += "\n";
    char buf[64];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      s += rows[i];
      for (std::size_t j = 0; j < cols.size(); ++j) {
        std::snprintf(buf, sizeof(buf), ",%.6f,%.6f", cells[i][j][0], cells[i][j][1]);
        s += buf;
      }
      s += "\n";
    }
    return s;
  }

  // Pair-per-cell table in percent, mirroring the usual (disc, cup) layout.
  std::string to_markdown() const {
    std::string s = "| Prompt |";
    for (const auto& c : cols) s += " " + c + " |";
    s += "\n|---|";
    for (std::size_t j = 0; j < cols.size(); ++j) s += "---|";
    s += "\n";
    char buf[64];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      s += "| " + rows[i] + " |";
      for (std::size_t j = 0; j < cols.size(); ++j) {
        std::snprintf(buf, sizeof(buf), " (%.2f, %.2f) |", 100.0 * cells[i][j][0],
                      100.0 * cells[i][j][1]);
        s += buf;
      }
      s += "\n";
    }
    return s;
  }
};

// Mean (disc, cup) Dice of every prompt against every label source over the
// test set. Predictions are binarized at sigmoid 0.5.
inline EvalMatrix evaluate_matrix(const PUNet<float>& model, const ParamStore<float>& params,
                                  const Dataset& test) {
  const UNetConfig& cfg = model.config();
  int r = test.n_raters();
  EvalMatrix m;
  for (int j = 1; j <= r; ++j) m.rows.push_back("P_r" + std::to_string(j));
  m.rows.push_back("P_c");
  for (int j = 1; j <= r; ++j) m.cols.push_back("rater" + std::to_string(j));
  m.cols.push_back("mv");
  m.cells.assign(m.rows.size(),
                 std::vector<std::array<double, 2>>(m.cols.size(), {0.0, 0.0}));
  m.trainable_params = params.trainable_params();
  m.total_params = params.total_params();

  // Row order r1..rR then c, so row i uses tag (i+1) % (R+1) in RaterTag terms.
  for (int scene = 0; scene < test.n_scenes(); ++scene) {
    for (std::size_t i = 0; i < m.rows.size(); ++i) {
      RaterTag tag = i + 1 <= static_cast<std::size_t>(r) ? RaterTag::rater(static_cast<int>(i) + 1)
                                                          : RaterTag::aggregate();
      Tape<float> tape;
      BoundParams<float> bound = bind_params_const(tape, params);
      Var<float> x = tape.leaf(test.images[static_cast<std::size_t>(scene)], false);
      Var<float> logits = model.forward(bound, x, cfg.use_prompts ? std::optional<RaterTag>(tag)
                                                                  : std::nullopt);
      Tensor<float> pred = binarize_logits(logits.val());
      for (std::size_t j = 0; j < m.cols.size(); ++j) {
        RaterTag src = j + 1 <= static_cast<std::size_t>(r)
                           ? RaterTag::rater(static_cast<int>(j) + 1)
                           : RaterTag::aggregate();
        std::vector<double> d = dice_per_class(pred, test.mask_for(scene, src));
        m.cells[i][j][0] += d[0];
        m.cells[i][j][1] += d.size() > 1 ? d[1] : d[0];
      }
    }
  }
  double inv = 1.0 / static_cast<double>(test.n_scenes());
  for (auto& row : m.cells) {
    for (auto& c : row) {
      c[0] *= inv;
      c[1] *= inv;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Parameter accounting report
// ---------------------------------------------------------------------------

inline std::string params_report(const ParamStore<float>& params) {
  std::string s;
  char buf[160];
  for (const auto& g : params.groups()) {
    std::snprintf(buf, sizeof(buf), "group %-10s %10zu\n", g.c_str(), params.count_params({g}));
    s += buf;
  }
  std::size_t total = params.total_params();
  std::size_t trainable = params.trainable_params();
  std::snprintf(buf, sizeof(buf), "total              %10zu\ntrainable          %10zu\n",
                total, trainable);
  s += buf;
  std::snprintf(buf, sizeof(buf), "trainable ratio    %10.4f%%\n",
                100.0 * static_cast<double>(trainable) / static_cast<double>(total));
  s += buf;
  // Reference point at publication scale: prompt fine-tuning updates 0.10M of
  // a 29.94M-parameter network, about 0.33%.
  std::snprintf(buf, sizeof(buf),
                "reference scale    0.10M / 29.94M = %.4f%% (prompt fine-tuning)\n",
                100.0 * 0.10 / 29.94);
  s += buf;
  return s;
}

// ---------------------------------------------------------------------------
// PPM overlays
// ---------------------------------------------------------------------------

// Lossless binary PPM (P6), exactly: "P6\n<w> <h>\n255\n" + H*W RGB bytes.
inline void write_ppm(const std::filesystem::path& path, const Tensor<float>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3) throw DimError("write_ppm: expected H x W x 3");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f << "P6\n" << rgb.dim(1) << " " << rgb.dim(0) << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(rgb.dim(1)) * 3);
  for (int y = 0; y < rgb.dim(0); ++y) {
    for (int x = 0; x < rgb.dim(1); ++x) {
      for (int c = 0; c < 3; ++c) {
        float v = rgb.at(y, x, c);
        v = std::min(1.0f, std::max(0.0f, v));
        row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<long>(row.size()));
  }
  if (!f) throw IoError("write failed: " + path.string());
}

inline Tensor<float> read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0) {
    throw IoError("not a supported PPM file: " + path.string());
  }
  f.get();  // single whitespace after header
  Tensor<float> out = Tensor<float>::zeros({h, w, 3});
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<long>(buf.size()));
  if (!f) throw IoError("truncated PPM file: " + path.string());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    out.data[i] = static_cast<float>(buf[i]) / 255.0f;
  }
  return out;
}

// Boundary pixels of one mask channel: set pixels with a 4-neighbour outside
// the mask (or at the image border).
inline bool is_contour(const Tensor<float>& mask, int y, int x, int c) {
  if (mask.at(y, x, c) != 1.0f) return false;
  int h = mask.dim(0), w = mask.dim(1);
  if (y == 0 || y == h - 1 || x == 0 || x == w - 1) return true;
  return mask.at(y - 1, x, c) == 0.0f || mask.at(y + 1, x, c) == 0.0f ||
         mask.at(y, x - 1, c) == 0.0f || mask.at(y, x + 1, c) == 0.0f;
}

// GT contours in green/cyan, predicted contours in red/magenta, drawn over
// the input image. Channel 0 = disc, channel 1 = cup.
inline Tensor<float> overlay_image(const Tensor<float>& image, const Tensor<float>& pred,
                                   const Tensor<float>& gt) {
  require_same_shape(pred.shape, gt.shape, "overlay_image");
  if (image.dim(0) != pred.dim(0) || image.dim(1) != pred.dim(1)) {
    throw DimError("overlay_image: image/mask extents differ");
  }
  Tensor<float> out = image;
  auto paint = [&out](int y, int x, float r, float g, float b) {
    out.at(y, x, 0) = r;
    out.at(y, x, 1) = g;
    out.at(y, x, 2) = b;
  };
  int classes = pred.dim(2);
  for (int y = 0; y < out.dim(0); ++y) {
    for (int x = 0; x < out.dim(1); ++x) {
      for (int c = 0; c < classes; ++c) {
        if (is_contour(gt, y, x, c)) {
          if (c == 0) paint(y, x, 0.0f, 0.9f, 0.1f);
          else paint(y, x, 0.0f, 0.8f, 0.8f);
        }
      }
      for (int c = 0; c < classes; ++c) {
        if (is_contour(pred, y, x, c)) {
          if (c == 0) paint(y, x, 1.0f, 0.1f, 0.1f);
          else paint(y, x, 1.0f, 0.2f, 1.0f);
        }
      }
    }
  }
  return out;
}

inline void render_overlay(const std::filesystem::path& path, const Tensor<float>& image,
                           const Tensor<float>& pred, const Tensor<float>& gt) {
  write_ppm(path, overlay_image(image, pred, gt));
}

// ---------------------------------------------------------------------------
// Full evaluation report directory
// ---------------------------------------------------------------------------

// report/: eval_matrix.csv, eval_matrix.md, params.txt,
// overlays/scene<k>_prompt<r>.ppm for the first `overlay_scenes` scenes.
inline void write_eval_report(const std::filesystem::path& dir, const PUNet<float>& model,
                              const ParamStore<float>& params, const Dataset& test,
                              const EvalMatrix& matrix, int overlay_scenes = 2) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "overlays", ec);
  {
    std::ofstream f(dir / "eval_matrix.csv");
    if (!f) throw IoError("cannot write eval_matrix.csv in " + dir.string());
    f << matrix.to_csv();
  }
  {
    std::ofstream f(dir / "eval_matrix.md");
    f << matrix.to_markdown();
  }
  {
    std::ofstream f(dir / "params.txt");
    f << params_report(params);
  }
  int n_over = std::min(overlay_scenes, test.n_scenes());
  const UNetConfig& cfg = model.config();
  for (int k = 0; k < n_over; ++k) {
    for (int t = 0; t <= test.n_raters(); ++t) {
      RaterTag tag = t == test.n_raters() ? RaterTag::aggregate() : RaterTag::rater(t + 1);
      Tape<float> tape;
      BoundParams<float> bound = bind_params_const(tape, params);
      Var<float> x = tape.leaf(test.images[static_cast<std::size_t>(k)], false);
      Var<float> logits = model.forward(bound, x, cfg.use_prompts ? std::optional<RaterTag>(tag)
                                                                  : std::nullopt);
      Tensor<float> pred = binarize_logits(logits.val());
      render_overlay(dir / "overlays" /
                         ("scene" + std::to_string(k) + "_prompt" + tag.name() + ".ppm"),
                     test.images[static_cast<std::size_t>(k)], pred, test.mask_for(k, tag));
    }
  }
}

}  // namespace punet
