#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "core/tape.hpp"
#include "core/tensor.hpp"

namespace punet {

// Differentiable primitives. Forward kernels write fresh buffers; backward
// kernels accumulate into pre-zeroed gradient buffers. Inner loops run over
// the last (contiguous) axis so the compiler can vectorize them.

namespace detail {

#if defined(__GNUC__)
// 16-lane float vector, unaligned loads allowed. Output rows at the widths
// the model actually uses (multiples of 16) accumulate in registers across
// the whole reduction; the scalar loop below round-trips the output row
// through memory every iteration and runs several times slower.
typedef float vf16 __attribute__((vector_size(64), aligned(4)));

template <int NV>
void mm_nn_vec_f32(const float* __restrict__ a, const float* __restrict__ b,
                   float* __restrict__ c, int m, int k, bool acc) {
  constexpr int n = NV * 16;
  for (int i = 0; i < m; ++i) {
    vf16 accv[NV];
    float* __restrict__ crow = c + static_cast<std::size_t>(i) * n;
    if (acc) {
      std::memcpy(accv, crow, sizeof(accv));
    } else {
      for (int q = 0; q < NV; ++q) accv[q] = vf16{};
    }
    const float* __restrict__ arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      float s = arow[p];
      const vf16* brow = reinterpret_cast<const vf16*>(b + static_cast<std::size_t>(p) * n);
      for (int q = 0; q < NV; ++q) accv[q] += s * brow[q];
    }
    std::memcpy(crow, accv, sizeof(accv));
  }
}

inline bool mm_nn_dispatch_f32(const float* a, const float* b, float* c, int m, int k, int n,
                               bool acc) {
  switch (n) {
    case 16: mm_nn_vec_f32<1>(a, b, c, m, k, acc); return true;
    case 32: mm_nn_vec_f32<2>(a, b, c, m, k, acc); return true;
    case 64: mm_nn_vec_f32<4>(a, b, c, m, k, acc); return true;
    case 128: mm_nn_vec_f32<8>(a, b, c, m, k, acc); return true;
    default: return false;
  }
}
#endif

// c[m x n] (+)= a[m x k] * b[k x n]
template <typename S>
void mm_nn(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c, int m, int k,
           int n, bool acc) {
#if defined(__GNUC__)
  if constexpr (std::is_same_v<S, float>) {
    if (mm_nn_dispatch_f32(a, b, c, m, k, n, acc)) return;
  }
#endif
  if (!acc) std::fill(c, c + static_cast<std::size_t>(m) * n, S(0));
  for (int i = 0; i < m; ++i) {
    const S* __restrict__ arow = a + static_cast<std::size_t>(i) * k;
    S* __restrict__ crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      S s = arow[p];
      const S* __restrict__ brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T. For wide n with a short reduction the
// dot-product form defeats vectorization, so materialize b^T and run the
// streaming kernel instead.
template <typename S>
void mm_nt(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c, int m, int k,
           int n, bool acc) {
  if (n >= 64 && k <= 64) {
    std::vector<S> bt(static_cast<std::size_t>(k) * n);
    for (int j = 0; j < n; ++j) {
      for (int p = 0; p < k; ++p) {
        bt[static_cast<std::size_t>(p) * n + j] = b[static_cast<std::size_t>(j) * k + p];
      }
    }
    mm_nn(a, bt.data(), c, m, k, n, acc);
    return;
  }
  for (int i = 0; i < m; ++i) {
    const S* __restrict__ arow = a + static_cast<std::size_t>(i) * k;
    S* __restrict__ crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* __restrict__ brow = b + static_cast<std::size_t>(j) * k;
      S s = S(0);
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

// c[k x n] += a[m x k]^T * g[m x n]
template <typename S>
void mm_tn_acc(const S* __restrict__ a, const S* __restrict__ g, S* __restrict__ c, int m,
               int k, int n) {
  if (n <= 32 && m >= 128) {
    // c^T = g^T * a keeps the reduction over the wide m axis: transpose the
    // narrow g, multiply, transpose-add the narrow result.
    std::vector<S> gt(static_cast<std::size_t>(n) * m);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        gt[static_cast<std::size_t>(j) * m + i] = g[static_cast<std::size_t>(i) * n + j];
      }
    }
    std::vector<S> ct(static_cast<std::size_t>(n) * k);
    mm_nn(gt.data(), a, ct.data(), n, m, k, false);
    for (int p = 0; p < k; ++p) {
      for (int j = 0; j < n; ++j) {
        c[static_cast<std::size_t>(p) * n + j] += ct[static_cast<std::size_t>(j) * k + p];
      }
    }
    return;
  }
  for (int i = 0; i < m; ++i) {
    const S* __restrict__ arow = a + static_cast<std::size_t>(i) * k;
    const S* __restrict__ grow = g + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      S s = arow[p];
      S* __restrict__ crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += s * grow[j];
    }
  }
}

inline int conv_out_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// exp for the f32 softmax path: 2^(x*log2e) with a degree-5 polynomial for
// the fractional part. Max relative error ~3e-7, vectorizes cleanly. The f64
// overload stays on std::exp so gradient checks see full precision.
inline float fast_exp(float x) {
  if (x < -87.0f) return 0.0f;
  float z = x * 1.44269504088896341f;
  float zi = std::floor(z);
  float zf = z - zi;
  float p = 1.0f +
            zf * (0.693147180559945f +
                  zf * (0.240226506959101f +
                        zf * (0.055504108664822f +
                              zf * (0.009618129107628f + zf * 0.001333355814670f))));
  std::int32_t e = static_cast<std::int32_t>(zi);
  std::uint32_t bits;
  std::memcpy(&bits, &p, 4);
  bits += static_cast<std::uint32_t>(e) << 23;
  float r;
  std::memcpy(&r, &bits, 4);
  return r;
}
inline double fast_exp(double x) { return std::exp(x); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<S> out = a.val();
  const Tensor<S>& bv = b.val();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
  bool rq = a.requires_grad() || b.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int ai = a.id, bi = b.id;
  return t.push(std::move(out), true, [ai, bi](Tape<S>& tp, const Tensor<S>& g) {
    if (tp.needs_grad(ai)) {
      Tensor<S>& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    }
    if (tp.needs_grad(bi)) {
      Tensor<S>& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
    }
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<S> out = a.val();
  const Tensor<S>& bv = b.val();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
  bool rq = a.requires_grad() || b.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int ai = a.id, bi = b.id;
  return t.push(std::move(out), true, [ai, bi](Tape<S>& tp, const Tensor<S>& g) {
    if (tp.needs_grad(ai)) {
      Tensor<S>& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    }
    if (tp.needs_grad(bi)) {
      Tensor<S>& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] -= g.data[i];
    }
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<S> out = a.val();
  const Tensor<S>& bv = b.val();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
  bool rq = a.requires_grad() || b.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int ai = a.id, bi = b.id;
  return t.push(std::move(out), true, [ai, bi](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& av = tp.val(ai);
    const Tensor<S>& bv2 = tp.val(bi);
    if (tp.needs_grad(ai)) {
      Tensor<S>& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
    }
    if (tp.needs_grad(bi)) {
      Tensor<S>& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * av.data[i];
    }
  });
}

template <typename S>
Var<S> div(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require_same_shape(a.shape(), b.shape(), "div");
  Tensor<S> out = a.val();
  const Tensor<S>& bv = b.val();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] /= bv.data[i];
  bool rq = a.requires_grad() || b.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int ai = a.id, bi = b.id;
  return t.push(std::move(out), true, [ai, bi](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& av = tp.val(ai);
    const Tensor<S>& bv2 = tp.val(bi);
    if (tp.needs_grad(ai)) {
      Tensor<S>& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] / bv2.data[i];
    }
    if (tp.needs_grad(bi)) {
      Tensor<S>& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        gb.data[i] -= g.data[i] * av.data[i] / (bv2.data[i] * bv2.data[i]);
      }
    }
  });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  Tensor<S> out = a.val();
  for (auto& v : out.data) v *= c;
  if (!a.requires_grad()) return t.push(std::move(out), false, nullptr);
  int ai = a.id;
  return t.push(std::move(out), true, [ai, c](Tape<S>& tp, const Tensor<S>& g) {
    Tensor<S>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * c;
  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  Tensor<S> out = a.val();
  for (auto& v : out.data) v += c;
  if (!a.requires_grad()) return t.push(std::move(out), false, nullptr);
  int ai = a.id;
  return t.push(std::move(out), true, [ai](Tape<S>& tp, const Tensor<S>& g) {
    Tensor<S>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
  });
}

template <typename S>
Var<S> sum_all(Var<S> a) {
  Tape<S>& t = *a.tape;
  S s = S(0);
  for (S v : a.val().data) s += v;
  Tensor<S> out({1}, {s});
  if (!a.requires_grad()) return t.push(std::move(out), false, nullptr);
  int ai = a.id;
  return t.push(std::move(out), true, [ai](Tape<S>& tp, const Tensor<S>& g) {
    Tensor<S>& ga = tp.grad(ai);
    for (auto& v : ga.data) v += g.data[0];
  });
}

template <typename S>
Var<S> mean_all(Var<S> a) {
  std::size_t n = a.val().numel();
  return scale(sum_all(a), S(1) / static_cast<S>(n));
}

// Sums over all leading axes, keeping the last (channel) axis: H x W x C -> [C].
template <typename S>
Var<S> channel_sums(Var<S> a) {
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.val();
  if (av.rank() < 1) throw DimError("channel_sums: rank-0 input");
  int c = av.shape.back();
  std::size_t rows = c > 0 ? av.numel() / static_cast<std::size_t>(c) : 0;
  Tensor<S> out = Tensor<S>::zeros({c});
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = av.data.data() + r * static_cast<std::size_t>(c);
    for (int j = 0; j < c; ++j) out.data[static_cast<std::size_t>(j)] += row[j];
  }
  if (!a.requires_grad()) return t.push(std::move(out), false, nullptr);
  int ai = a.id;
  return t.push(std::move(out), true, [ai, c, rows](Tape<S>& tp, const Tensor<S>& g) {
    Tensor<S>& ga = tp.grad(ai);
    for (std::size_t r = 0; r < rows; ++r) {
      S* row = ga.data.data() + r * static_cast<std::size_t>(c);
      for (int j = 0; j < c; ++j) row[j] += g.data[static_cast<std::size_t>(j)];
    }
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.val();
  Tensor<S> out = av;
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (auto& v : out.data) {
    double x = static_cast<double>(v);
    v = static_cast<S>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  if (!a.requires_grad()) return t.push(std::move(out), false, nullptr);
  int ai = a.id;
  return t.push(std::move(out), true, [ai](Tape<S>& tp, const Tensor<S>& g) {
    constexpr double is2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    const Tensor<S>& av2 = tp.val(ai);
    Tensor<S>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      double x = static_cast<double>(av2.data[i]);
      double d = 0.5 * (1.0 + std::erf(x * is2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      ga.data[i] += g.data[i] * static_cast<S>(d);
    }
  });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out = a.val();
  for (auto& v : out.data) {
    double x = static_cast<double>(v);
    v = static_cast<S>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                              : std::exp(x) / (1.0 + std::exp(x)));
  }
  if (!a.requires_grad()) return t.push(std::move(out), false, nullptr);
  int ai = a.id;
  Var<S> o = t.push(std::move(out), true, nullptr);
  t.set_backward(o.id, [ai, oi = o.id](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& y = tp.val(oi);
    Tensor<S>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      ga.data[i] += g.data[i] * y.data[i] * (S(1) - y.data[i]);
    }
  });
  return o;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.val();
  const Tensor<S>& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimError("matmul: incompatible shapes " + av.shape_str() + " vs " + bv.shape_str());
  }
  int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  detail::mm_nn(av.data.data(), bv.data.data(), out.data.data(), m, k, n, false);
  bool rq = a.requires_grad() || b.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int ai = a.id, bi = b.id;
  return t.push(std::move(out), true, [ai, bi, m, k, n](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& av2 = tp.val(ai);
    const Tensor<S>& bv2 = tp.val(bi);
    if (tp.needs_grad(ai)) {
      // dA = dC * B^T
      detail::mm_nt(g.data.data(), bv2.data.data(), tp.grad(ai).data.data(), m, n, k, true);
    }
    if (tp.needs_grad(bi)) {
      // dB = A^T * dC
      detail::mm_tn_acc(av2.data.data(), g.data.data(), tp.grad(bi).data.data(), m, k, n);
    }
  });
}

// a[m x k] * b[n x k]^T. Used for attention score matrices.
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.val();
  const Tensor<S>& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw DimError("matmul_nt: incompatible shapes " + av.shape_str() + " vs " + bv.shape_str());
  }
  int m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  detail::mm_nt(av.data.data(), bv.data.data(), out.data.data(), m, k, n, false);
  bool rq = a.requires_grad() || b.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int ai = a.id, bi = b.id;
  return t.push(std::move(out), true, [ai, bi, m, k, n](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& av2 = tp.val(ai);
    const Tensor<S>& bv2 = tp.val(bi);
    if (tp.needs_grad(ai)) {
      // dA = dC * B
      detail::mm_nn(g.data.data(), bv2.data.data(), tp.grad(ai).data.data(), m, n, k, true);
    }
    if (tp.needs_grad(bi)) {
      // dB = dC^T * A
      detail::mm_tn_acc(g.data.data(), av2.data.data(), tp.grad(bi).data.data(), m, n, k);
    }
  });
}

// x[N x d] + v[d] broadcast over rows.
template <typename S>
Var<S> add_rowvec(Var<S> x, Var<S> v) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.val();
  const Tensor<S>& vv = v.val();
  if (xv.rank() != 2 || vv.rank() != 1 || xv.dim(1) != vv.dim(0)) {
    throw DimError("add_rowvec: incompatible shapes " + xv.shape_str() + " vs " + vv.shape_str());
  }
  int rows = xv.dim(0), d = xv.dim(1);
  Tensor<S> out = xv;
  for (int r = 0; r < rows; ++r) {
    S* row = out.data.data() + static_cast<std::size_t>(r) * d;
    for (int j = 0; j < d; ++j) row[j] += vv.data[static_cast<std::size_t>(j)];
  }
  bool rq = x.requires_grad() || v.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int xi = x.id, vi = v.id;
  return t.push(std::move(out), true, [xi, vi, rows, d](Tape<S>& tp, const Tensor<S>& g) {
    if (tp.needs_grad(xi)) {
      Tensor<S>& gx = tp.grad(xi);
      for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
    }
    if (tp.needs_grad(vi)) {
      Tensor<S>& gv = tp.grad(vi);
      for (int r = 0; r < rows; ++r) {
        const S* row = g.data.data() + static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) gv.data[static_cast<std::size_t>(j)] += row[j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(Var<S> a, std::vector<int> new_shape) {
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.val();
  if (Tensor<S>::numel_of(new_shape) != av.numel()) {
    throw DimError("reshape: cannot view " + av.shape_str() + " as " +
                   Tensor<S>::shape_str(new_shape));
  }
  Tensor<S> out(new_shape, av.data);
  if (!a.requires_grad()) return t.push(std::move(out), false, nullptr);
  int ai = a.id;
  return t.push(std::move(out), true, [ai](Tape<S>& tp, const Tensor<S>& g) {
    Tensor<S>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
  });
}

// Concatenation along axis 0; remaining extents must match.
template <typename S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.val();
  const Tensor<S>& bv = b.val();
  if (av.rank() != bv.rank() || av.rank() < 1 ||
      !std::equal(av.shape.begin() + 1, av.shape.end(), bv.shape.begin() + 1)) {
    throw DimError("concat: trailing dims differ " + av.shape_str() + " vs " + bv.shape_str());
  }
  std::vector<int> shp = av.shape;
  shp[0] += bv.dim(0);
  Tensor<S> out = Tensor<S>::zeros(shp);
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<long>(av.numel()));
  bool rq = a.requires_grad() || b.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int ai = a.id, bi = b.id;
  std::size_t na = av.numel();
  return t.push(std::move(out), true, [ai, bi, na](Tape<S>& tp, const Tensor<S>& g) {
    if (tp.needs_grad(ai)) {
      Tensor<S>& ga = tp.grad(ai);
      for (std::size_t i = 0; i < na; ++i) ga.data[i] += g.data[i];
    }
    if (tp.needs_grad(bi)) {
      Tensor<S>& gb = tp.grad(bi);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb.data[i] += g.data[na + i];
    }
  });
}

// Rows [begin, end) along axis 0.
template <typename S>
Var<S> slice_rows(Var<S> a, int begin, int end) {
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.val();
  if (av.rank() < 1) throw DimError("slice_rows: rank-0 input");
  int n = av.dim(0);
  if (begin < 0 || end < begin || end > n) {
    throw ArgError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                   ") out of bounds for " + std::to_string(n) + " rows");
  }
  std::size_t stride = 1;
  for (std::size_t i = 1; i < av.shape.size(); ++i) stride *= static_cast<std::size_t>(av.shape[i]);
  std::vector<int> shp = av.shape;
  shp[0] = end - begin;
  Tensor<S> out = Tensor<S>::zeros(shp);
  std::copy(av.data.begin() + static_cast<long>(begin * stride),
            av.data.begin() + static_cast<long>(end * stride), out.data.begin());
  if (!a.requires_grad()) return t.push(std::move(out), false, nullptr);
  int ai = a.id;
  return t.push(std::move(out), true, [ai, begin, stride](Tape<S>& tp, const Tensor<S>& g) {
    Tensor<S>& ga = tp.grad(ai);
    std::size_t off = static_cast<std::size_t>(begin) * stride;
    for (std::size_t i = 0; i < g.numel(); ++i) ga.data[off + i] += g.data[i];
  });
}

// Exact inverse of concat_rows: (rows [0, at), rows [at, N)).
template <typename S>
std::pair<Var<S>, Var<S>> split_rows(Var<S> a, int at) {
  int n = a.val().dim(0);
  if (at < 0 || at > n) {
    throw ArgError("split: index " + std::to_string(at) + " out of range [0, " +
                   std::to_string(n) + "]");
  }
  return {slice_rows(a, 0, at), slice_rows(a, at, n)};
}

// H x W x C1 (+) H x W x C2 -> H x W x (C1+C2). Decoder skip connections.
template <typename S>
Var<S> concat_channels(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.val();
  const Tensor<S>& bv = b.val();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(1) != bv.dim(1)) {
    throw DimError("concat_channels: incompatible shapes " + av.shape_str() + " vs " +
                   bv.shape_str());
  }
  int hw = av.dim(0) * av.dim(1), ca = av.dim(2), cb = bv.dim(2);
  Tensor<S> out = Tensor<S>::zeros({av.dim(0), av.dim(1), ca + cb});
  for (int p = 0; p < hw; ++p) {
    std::copy_n(av.data.data() + static_cast<std::size_t>(p) * ca, ca,
                out.data.data() + static_cast<std::size_t>(p) * (ca + cb));
    std::copy_n(bv.data.data() + static_cast<std::size_t>(p) * cb, cb,
                out.data.data() + static_cast<std::size_t>(p) * (ca + cb) + ca);
  }
  bool rq = a.requires_grad() || b.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int ai = a.id, bi = b.id;
  return t.push(std::move(out), true, [ai, bi, hw, ca, cb](Tape<S>& tp, const Tensor<S>& g) {
    if (tp.needs_grad(ai)) {
      Tensor<S>& ga = tp.grad(ai);
      for (int p = 0; p < hw; ++p) {
        const S* src = g.data.data() + static_cast<std::size_t>(p) * (ca + cb);
        S* dst = ga.data.data() + static_cast<std::size_t>(p) * ca;
        for (int j = 0; j < ca; ++j) dst[j] += src[j];
      }
    }
    if (tp.needs_grad(bi)) {
      Tensor<S>& gb = tp.grad(bi);
      for (int p = 0; p < hw; ++p) {
        const S* src = g.data.data() + static_cast<std::size_t>(p) * (ca + cb) + ca;
        S* dst = gb.data.data() + static_cast<std::size_t>(p) * cb;
        for (int j = 0; j < cb; ++j) dst[j] += src[j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention pieces
// ---------------------------------------------------------------------------

// Softmax along the last axis, computed with max subtraction.
template <typename S>
Var<S> softmax_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.val();
  if (av.rank() < 1) throw DimError("softmax: rank-0 input");
  int n = av.shape.back();
  std::size_t rows = n > 0 ? av.numel() / static_cast<std::size_t>(n) : 0;
  Tensor<S> out = av;
  for (std::size_t r = 0; r < rows; ++r) {
    S* __restrict__ row = out.data.data() + r * static_cast<std::size_t>(n);
    S mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    S sum = S(0);
    for (int j = 0; j < n; ++j) {
      row[j] = detail::fast_exp(row[j] - mx);
      sum += row[j];
    }
    S inv = S(1) / sum;
    for (int j = 0; j < n; ++j) row[j] *= inv;
  }
  if (!a.requires_grad()) return t.push(std::move(out), false, nullptr);
  int ai = a.id;
  Var<S> o = t.push(std::move(out), true, nullptr);
  t.set_backward(o.id, [ai, oi = o.id, n, rows](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& y = tp.val(oi);
    Tensor<S>& ga = tp.grad(ai);
    for (std::size_t r = 0; r < rows; ++r) {
      const S* yr = y.data.data() + r * static_cast<std::size_t>(n);
      const S* gr = g.data.data() + r * static_cast<std::size_t>(n);
      S* gar = ga.data.data() + r * static_cast<std::size_t>(n);
      S dot = S(0);
      for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (int j = 0; j < n; ++j) gar[j] += (gr[j] - dot) * yr[j];
    }
  });
  return o;
}

// Per-row normalization of x[N x d] followed by the affine (gamma, beta).
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps) {
  Tape<S>& t = *x.tape;
  if (!(eps > S(0))) throw ArgError("layer_norm: eps must be positive");
  const Tensor<S>& xv = x.val();
  const Tensor<S>& gv = gamma.val();
  const Tensor<S>& bv = beta.val();
  if (xv.rank() != 2 || gv.rank() != 1 || bv.rank() != 1 || gv.dim(0) != xv.dim(1) ||
      bv.dim(0) != xv.dim(1)) {
    throw DimError("layer_norm: incompatible shapes " + xv.shape_str() + ", " + gv.shape_str() +
                   ", " + bv.shape_str());
  }
  int rows = xv.dim(0), d = xv.dim(1);
  Tensor<S> out = Tensor<S>::zeros({rows, d});
  Tensor<S> xhat = Tensor<S>::zeros({rows, d});
  std::vector<S> inv_std(static_cast<std::size_t>(rows));
  S invd = S(1) / static_cast<S>(d);
  for (int r = 0; r < rows; ++r) {
    const S* in = xv.data.data() + static_cast<std::size_t>(r) * d;
    S mean = S(0);
    for (int j = 0; j < d; ++j) mean += in[j];
    mean *= invd;
    S var = S(0);
    for (int j = 0; j < d; ++j) {
      S c = in[j] - mean;
      var += c * c;
    }
    var *= invd;
    S inv = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = inv;
    S* xh = xhat.data.data() + static_cast<std::size_t>(r) * d;
    S* o = out.data.data() + static_cast<std::size_t>(r) * d;
    for (int j = 0; j < d; ++j) {
      xh[j] = (in[j] - mean) * inv;
      o[j] = xh[j] * gv.data[static_cast<std::size_t>(j)] + bv.data[static_cast<std::size_t>(j)];
    }
  }
  bool rq = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int xi = x.id, gi = gamma.id, bi = beta.id;
  return t.push(std::move(out), true,
                [xi, gi, bi, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& gv2 = tp.val(gi);
    S invd = S(1) / static_cast<S>(d);
    if (tp.needs_grad(gi)) {
      Tensor<S>& gg = tp.grad(gi);
      for (int r = 0; r < rows; ++r) {
        const S* gr = g.data.data() + static_cast<std::size_t>(r) * d;
        const S* xh = xhat.data.data() + static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) gg.data[static_cast<std::size_t>(j)] += gr[j] * xh[j];
      }
    }
    if (tp.needs_grad(bi)) {
      Tensor<S>& gb = tp.grad(bi);
      for (int r = 0; r < rows; ++r) {
        const S* gr = g.data.data() + static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) gb.data[static_cast<std::size_t>(j)] += gr[j];
      }
    }
    if (tp.needs_grad(xi)) {
      Tensor<S>& gx = tp.grad(xi);
      for (int r = 0; r < rows; ++r) {
        const S* gr = g.data.data() + static_cast<std::size_t>(r) * d;
        const S* xh = xhat.data.data() + static_cast<std::size_t>(r) * d;
        S* gxr = gx.data.data() + static_cast<std::size_t>(r) * d;
        S m1 = S(0), m2 = S(0);
        for (int j = 0; j < d; ++j) {
          S gh = gr[j] * gv2.data[static_cast<std::size_t>(j)];
          m1 += gh;
          m2 += gh * xh[j];
        }
        m1 *= invd;
        m2 *= invd;
        S inv = inv_std[static_cast<std::size_t>(r)];
        for (int j = 0; j < d; ++j) {
          S gh = gr[j] * gv2.data[static_cast<std::size_t>(j)];
          gxr[j] += inv * (gh - m1 - xh[j] * m2);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and resampling
// ---------------------------------------------------------------------------

// x[H x W x Cin] * w[kh x kw x Cin x Cout] + b[Cout], stride/pad symmetric.
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, int stride, int pad) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.val();
  const Tensor<S>& wv = w.val();
  const Tensor<S>& bv = b.val();
  if (xv.rank() != 3 || wv.rank() != 4 || bv.rank() != 1) {
    throw DimError("conv2d: expected HWC input, khkwCinCout kernel; got " + xv.shape_str() +
                   ", " + wv.shape_str());
  }
  int h = xv.dim(0), wdt = xv.dim(1), cin = xv.dim(2);
  int kh = wv.dim(0), kw = wv.dim(1), cout = wv.dim(3);
  if (wv.dim(2) != cin) {
    throw DimError("conv2d: input channels " + std::to_string(cin) + " vs kernel " +
                   std::to_string(wv.dim(2)));
  }
  if (bv.dim(0) != cout) throw DimError("conv2d: bias extent mismatch");
  if (stride < 1) throw ArgError("conv2d: stride must be >= 1");
  if (pad < 0) throw ArgError("conv2d: padding must be >= 0");
  if (kh > h + 2 * pad || kw > wdt + 2 * pad) {
    throw DimError("conv2d: kernel " + wv.shape_str() + " larger than padded input " +
                   xv.shape_str() + " with pad " + std::to_string(pad));
  }
  int oh = detail::conv_out_extent(h, kh, stride, pad);
  int ow = detail::conv_out_extent(wdt, kw, stride, pad);
  Tensor<S> out = Tensor<S>::zeros({oh, ow, cout});
  const S* __restrict__ xd = xv.data.data();
  const S* __restrict__ wd = wv.data.data();
  S* __restrict__ od = out.data.data();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      S* __restrict__ orow = od + (static_cast<std::size_t>(oy) * ow + ox) * cout;
      for (int j = 0; j < cout; ++j) orow[j] = bv.data[static_cast<std::size_t>(j)];
      int by = oy * stride - pad, bx = ox * stride - pad;
      for (int ky = 0; ky < kh; ++ky) {
        int iy = by + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          int ix = bx + kx;
          if (ix < 0 || ix >= wdt) continue;
          const S* __restrict__ ipx = xd + (static_cast<std::size_t>(iy) * wdt + ix) * cin;
          const S* __restrict__ wk = wd + (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
          for (int ci = 0; ci < cin; ++ci) {
            S s = ipx[ci];
            const S* __restrict__ wrow = wk + static_cast<std::size_t>(ci) * cout;
            for (int j = 0; j < cout; ++j) orow[j] += s * wrow[j];
          }
        }
      }
    }
  }
  bool rq = x.requires_grad() || w.requires_grad() || b.requires_grad();
  if (!rq) return t.push(std::move(out), false, nullptr);
  int xi = x.id, wi = w.id, bi = b.id;
  return t.push(std::move(out), true,
                [xi, wi, bi, h, wdt, cin, kh, kw, cout, oh, ow, stride, pad](
                    Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& xv2 = tp.val(xi);
    const Tensor<S>& wv2 = tp.val(wi);
    bool need_x = tp.needs_grad(xi), need_w = tp.needs_grad(wi), need_b = tp.needs_grad(bi);
    S* __restrict__ gx = need_x ? tp.grad(xi).data.data() : nullptr;
    S* __restrict__ gw = need_w ? tp.grad(wi).data.data() : nullptr;
    S* __restrict__ gb = need_b ? tp.grad(bi).data.data() : nullptr;
    const S* __restrict__ xd = xv2.data.data();
    const S* __restrict__ wd = wv2.data.data();
    const S* __restrict__ gd = g.data.data();
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const S* __restrict__ grow = gd + (static_cast<std::size_t>(oy) * ow + ox) * cout;
        if (need_b) {
          for (int j = 0; j < cout; ++j) gb[j] += grow[j];
        }
        int by = oy * stride - pad, bx = ox * stride - pad;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = by + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = bx + kx;
            if (ix < 0 || ix >= wdt) continue;
            std::size_t poff = (static_cast<std::size_t>(iy) * wdt + ix) * cin;
            std::size_t koff = (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
            if (need_x) {
              for (int ci = 0; ci < cin; ++ci) {
                const S* __restrict__ wrow = wd + koff + static_cast<std::size_t>(ci) * cout;
                S s = S(0);
                for (int j = 0; j < cout; ++j) s += grow[j] * wrow[j];
                gx[poff + static_cast<std::size_t>(ci)] += s;
              }
            }
            if (need_w) {
              for (int ci = 0; ci < cin; ++ci) {
                S s = xd[poff + static_cast<std::size_t>(ci)];
                S* __restrict__ gwrow = gw + koff + static_cast<std::size_t>(ci) * cout;
                for (int j = 0; j < cout; ++j) gwrow[j] += s * grow[j];
              }
            }
          }
        }
      }
    }
  });
}

// Nearest-neighbor upsample by an integer factor; backward sums each block.
template <typename S>
Var<S> upsample_nearest(Var<S> x, int factor) {
  Tape<S>& t = *x.tape;
  if (factor < 1) throw ArgError("upsample_nearest: factor must be >= 1");
  const Tensor<S>& xv = x.val();
  if (xv.rank() != 3) throw DimError("upsample_nearest: expected HWC, got " + xv.shape_str());
  int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
  Tensor<S> out = Tensor<S>::zeros({h * factor, w * factor, c});
  for (int y = 0; y < h * factor; ++y) {
    int sy = y / factor;
    for (int x2 = 0; x2 < w * factor; ++x2) {
      int sx = x2 / factor;
      const S* src = xv.data.data() + (static_cast<std::size_t>(sy) * w + sx) * c;
      S* dst = out.data.data() + (static_cast<std::size_t>(y) * (w * factor) + x2) * c;
      std::copy_n(src, c, dst);
    }
  }
  if (!x.requires_grad()) return t.push(std::move(out), false, nullptr);
  int xi = x.id;
  return t.push(std::move(out), true, [xi, h, w, c, factor](Tape<S>& tp, const Tensor<S>& g) {
    Tensor<S>& gx = tp.grad(xi);
    for (int y = 0; y < h * factor; ++y) {
      int sy = y / factor;
      for (int x2 = 0; x2 < w * factor; ++x2) {
        int sx = x2 / factor;
        const S* src = g.data.data() + (static_cast<std::size_t>(y) * (w * factor) + x2) * c;
        S* dst = gx.data.data() + (static_cast<std::size_t>(sy) * w + sx) * c;
        for (int j = 0; j < c; ++j) dst[j] += src[j];
      }
    }
  });
}

}  // namespace punet
