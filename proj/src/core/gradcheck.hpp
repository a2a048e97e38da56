#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "core/ops.hpp"
#include "core/rng.hpp"
#include "core/tape.hpp"
#include "core/tensor.hpp"

namespace punet {

// Central finite-difference gradient checking, always in f64. This is the
// independent oracle for every differentiable primitive and for the full
// model composite; it is also exposed through the `gradcheck` CLI command.

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 1e-4;
  bool pass = false;
};

namespace gradcheck_detail {

inline double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
  return std::fabs(a - b) / denom;
}

}  // namespace gradcheck_detail

// `build` maps leaf vars (one per input tensor) to a scalar loss var on the
// given tape. Gradients w.r.t. every input are compared against central
// differences with step h.
inline GradCheckResult check_gradients(
    const std::string& name, std::vector<Tensor<double>> inputs,
    const std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>& build,
    double tol = 1e-4, double h = 1e-5) {
  GradCheckResult res;
  res.name = name;
  res.tol = tol;

  auto eval = [&](const std::vector<Tensor<double>>& xs) -> double {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.leaf(x, false));
    Var<double> loss = build(tape, vars);
    return loss.val().data[0];
  };

  // Autodiff gradients.
  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
  Var<double> loss = build(tape, vars);
  tape.backward(loss);

  double max_err = 0.0;
  for (std::size_t vi = 0; vi < inputs.size(); ++vi) {
    Tensor<double> ad = tape.grad_live(vars[vi].id)
                            ? tape.grad(vars[vi].id)
                            : Tensor<double>::zeros(inputs[vi].shape);
    for (std::size_t i = 0; i < inputs[vi].numel(); ++i) {
      std::vector<Tensor<double>> xs = inputs;
      xs[vi].data[i] += h;
      double fp = eval(xs);
      xs[vi].data[i] -= 2 * h;
      double fm = eval(xs);
      double fd = (fp - fm) / (2 * h);
      max_err = std::max(max_err, gradcheck_detail::rel_err(ad.data[i], fd));
    }
  }
  res.max_rel_err = max_err;
  res.pass = max_err < tol;
  return res;
}

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

// Scalarizes a tensor output with a fixed random weighting so every output
// element influences the loss.
inline Var<double> weighted_sum(Tape<double>& tape, Var<double> out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w = Tensor<double>::zeros(out.shape());
  for (auto& v : w.data) v = rng.uniform(-1.0, 1.0);
  Var<double> wv = tape.leaf(std::move(w), false);
  return sum_all(mul(out, wv));
}

// Finite-difference checks for every differentiable primitive. Model-level
// composites are appended by the caller (see pipeline::run_gradcheck).
inline std::vector<GradCheckResult> primitive_gradchecks(std::uint64_t seed = 17) {
  std::vector<GradCheckResult> out;
  Rng rng(seed);

  out.push_back(check_gradients(
      "matmul", {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, matmul(v[0], v[1]), 101);
      }));

  out.push_back(check_gradients(
      "matmul_nt", {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, matmul_nt(v[0], v[1]), 102);
      }));

  out.push_back(check_gradients(
      "conv2d_s1p1",
      {random_tensor({5, 6, 3}, rng), random_tensor({3, 3, 3, 4}, rng, 0.5),
       random_tensor({4}, rng, 0.1)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, conv2d(v[0], v[1], v[2], 1, 1), 103);
      }));

  out.push_back(check_gradients(
      "conv2d_s2p1",
      {random_tensor({6, 6, 2}, rng), random_tensor({3, 3, 2, 3}, rng, 0.5),
       random_tensor({3}, rng, 0.1)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, conv2d(v[0], v[1], v[2], 2, 1), 104);
      }));

  out.push_back(check_gradients(
      "conv2d_1x1", {random_tensor({4, 4, 3}, rng), random_tensor({1, 1, 3, 2}, rng),
                     random_tensor({2}, rng, 0.1)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, conv2d(v[0], v[1], v[2], 1, 0), 105);
      }));

  out.push_back(check_gradients(
      "upsample_nearest", {random_tensor({3, 4, 2}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, upsample_nearest(v[0], 2), 106);
      }));

  out.push_back(check_gradients(
      "concat_rows", {random_tensor({3, 4}, rng), random_tensor({2, 4}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, concat_rows(v[0], v[1]), 107);
      }));

  out.push_back(check_gradients(
      "split_rows", {random_tensor({5, 3}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        auto [a, b] = split_rows(v[0], 2);
        return add(weighted_sum(t, a, 108), weighted_sum(t, b, 109));
      }));

  out.push_back(check_gradients(
      "concat_channels", {random_tensor({3, 3, 2}, rng), random_tensor({3, 3, 3}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, concat_channels(v[0], v[1]), 110);
      }));

  out.push_back(check_gradients(
      "softmax", {random_tensor({4, 6}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, softmax_rows(v[0]), 111);
      }));

  out.push_back(check_gradients(
      "layer_norm",
      {random_tensor({4, 5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, layer_norm(v[0], v[1], v[2], 1e-5), 112);
      }));

  out.push_back(check_gradients(
      "gelu", {random_tensor({3, 5}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, gelu(v[0]), 113);
      }));

  out.push_back(check_gradients(
      "sigmoid", {random_tensor({3, 5}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, sigmoid(v[0]), 114);
      }));

  out.push_back(check_gradients(
      "add_sub_mul", {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, mul(add(v[0], v[1]), sub(v[0], v[1])), 115);
      }));

  out.push_back(check_gradients(
      "div", {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng, 0.3)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        // Keep the denominator away from zero.
        Var<double> den = add_scalar(mul(v[1], v[1]), 0.5);
        return weighted_sum(t, div(v[0], den), 116);
      }));

  out.push_back(check_gradients(
      "add_rowvec", {random_tensor({4, 3}, rng), random_tensor({3}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, add_rowvec(v[0], v[1]), 117);
      }));

  out.push_back(check_gradients(
      "channel_sums", {random_tensor({3, 4, 5}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, channel_sums(v[0]), 118);
      }));

  out.push_back(check_gradients(
      "scale_add_scalar_mean", {random_tensor({4, 4}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return mean_all(add_scalar(scale(v[0], 2.5), 0.75));
      }));

  out.push_back(check_gradients(
      "reshape", {random_tensor({2, 6}, rng)},
      [](Tape<double>& t, std::vector<Var<double>>& v) {
        return weighted_sum(t, reshape(v[0], {3, 4}), 119);
      }));

  return out;
}

}  // namespace punet
