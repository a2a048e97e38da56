#include <doctest.h>

#include <cmath>

#include "core/ops.hpp"
#include "core/rng.hpp"
#include "core/tape.hpp"
#include "core/tensor.hpp"
#include "testutil.hpp"

using namespace punet;

namespace {

template <typename S>
Var<S> lf(Tape<S>& t, Tensor<S> v) {
  return t.leaf(std::move(v), false);
}

Tensor<float> rand_tensor(std::vector<int> shape, Rng& rng) {
  Tensor<float> t = Tensor<float>::zeros(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

}  // namespace

TEST_CASE("tensor shape and data length must agree") {
  CHECK_NOTHROW(Tensor<float>({2, 3}, std::vector<float>(6, 0.0f)));
  CHECK_THROWS_AS(Tensor<float>({2, 3}, std::vector<float>(5, 0.0f)), DimError);
}

TEST_CASE("ptnsr round-trip is exact for f32") {
  testutil::TmpDir tmp("ptnsr");
  Rng rng(7);
  Tensor<float> t = rand_tensor({3, 4, 2}, rng);
  write_ptnsr(tmp.path / "t.ptnsr", t);
  Tensor<float> back = read_ptnsr(tmp.path / "t.ptnsr");
  CHECK(back.shape == t.shape);
  CHECK(testutil::bit_equal(back, t));
}

TEST_CASE("ptnsr rejects foreign files") {
  testutil::TmpDir tmp("ptnsr_bad");
  std::ofstream f(tmp.path / "junk.bin", std::ios::binary);
  f << "NOTPTNSR at all";
  f.close();
  CHECK_THROWS_AS(read_ptnsr(tmp.path / "junk.bin"), IoError);
}

TEST_CASE("matmul identity cases") {
  Tape<float> t;
  Tensor<float> eye({2, 2}, {1, 0, 0, 1});
  Tensor<float> a({2, 2}, {1, 2, 3, 4});
  CHECK(testutil::bit_equal(matmul(lf(t, eye), lf(t, eye)).val(), eye));
  CHECK(testutil::bit_equal(matmul(lf(t, a), lf(t, eye)).val(), a));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<float> t;
  Var<float> a = lf(t, Tensor<float>::zeros({2, 3}));
  Var<float> b = lf(t, Tensor<float>::zeros({4, 2}));
  try {
    matmul(a, b);
    FAIL("expected DimError");
  } catch (const DimError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("grad of sum(matmul(a,b)) wrt a equals ones*b^T") {
  Tape<double> t;
  Rng rng(3);
  Tensor<double> a = Tensor<double>::zeros({3, 4});
  Tensor<double> b = Tensor<double>::zeros({4, 2});
  for (auto& v : a.data) v = rng.normal();
  for (auto& v : b.data) v = rng.normal();
  Var<double> av = t.leaf(a, true);
  Var<double> bv = t.leaf(b, false);
  Var<double> loss = sum_all(matmul(av, bv));
  t.backward(loss);
  const Tensor<double>& ga = t.grad(av.id);
  // d/dA sum(AB) = ones(m,n) * B^T; row i of the gradient is the row sums of B.
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      double expect = b.at(k, 0) + b.at(k, 1);
      CHECK(ga.at(i, k) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv2d 1x1 unit kernel is the identity") {
  Tape<float> t;
  Rng rng(11);
  Tensor<float> x = rand_tensor({5, 4, 1}, rng);
  Tensor<float> w({1, 1, 1, 1}, {1.0f});
  Tensor<float> b({1}, {0.0f});
  Var<float> y = conv2d(lf(t, x), lf(t, w), lf(t, b), 1, 0);
  CHECK(testutil::bit_equal(y.val(), x));
}

TEST_CASE("conv2d output extents follow the floor formula") {
  Tape<float> t;
  Var<float> x = lf(t, Tensor<float>::zeros({8, 8, 2}));
  Var<float> w = lf(t, Tensor<float>::zeros({3, 3, 2, 5}));
  Var<float> b = lf(t, Tensor<float>::zeros({5}));
  Var<float> y = conv2d(x, w, b, 2, 1);
  CHECK(y.shape() == std::vector<int>{4, 4, 5});
}

TEST_CASE("conv2d rejects kernels larger than the padded input") {
  Tape<float> t;
  Var<float> x = lf(t, Tensor<float>::zeros({2, 2, 1}));
  Var<float> w = lf(t, Tensor<float>::zeros({5, 5, 1, 1}));
  Var<float> b = lf(t, Tensor<float>::zeros({1}));
  CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), DimError);
}

TEST_CASE("upsample_nearest factor 1 is the identity") {
  Tape<float> t;
  Rng rng(5);
  Tensor<float> x = rand_tensor({3, 3, 2}, rng);
  CHECK(testutil::bit_equal(upsample_nearest(lf(t, x), 1).val(), x));
}

TEST_CASE("upsample_nearest replicates blocks and rejects factor < 1") {
  Tape<float> t;
  Tensor<float> x({2, 2, 1}, {1, 2, 3, 4});
  Var<float> y = upsample_nearest(lf(t, x), 2);
  CHECK(y.shape() == std::vector<int>{4, 4, 1});
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      CHECK(y.val().at(i, j, 0) == x.at(i / 2, j / 2, 0));
    }
  }
  CHECK_THROWS_AS(upsample_nearest(lf(t, x), 0), ArgError);
}

TEST_CASE("upsample_nearest backward of all-ones is factor^2 per cell") {
  Tape<double> t;
  Var<double> x = t.leaf(Tensor<double>::full({2, 3, 2}, 1.0), true);
  Var<double> loss = sum_all(upsample_nearest(x, 3));
  t.backward(loss);
  const Tensor<double>& g = t.grad(x.id);
  for (std::size_t i = 0; i < g.numel(); ++i) CHECK(g.data[i] == doctest::Approx(9.0));
}

TEST_CASE("concat shape arithmetic and empty block") {
  Tape<float> t;
  Rng rng(1);
  Tensor<float> a = rand_tensor({64, 16}, rng);
  Tensor<float> b = rand_tensor({1, 16}, rng);
  CHECK(concat_rows(lf(t, a), lf(t, b)).shape() == std::vector<int>{65, 16});

  Tensor<float> empty = Tensor<float>::zeros({0, 16});
  CHECK(testutil::bit_equal(concat_rows(lf(t, a), lf(t, empty)).val(), a));
  CHECK_THROWS_AS(concat_rows(lf(t, a), lf(t, rand_tensor({2, 8}, rng))), DimError);
}

TEST_CASE("split at 0 and N produce empty halves") {
  Tape<float> t;
  Rng rng(2);
  Tensor<float> x = rand_tensor({5, 3}, rng);
  auto [a0, b0] = split_rows(lf(t, x), 0);
  CHECK(a0.shape() == std::vector<int>{0, 3});
  CHECK(testutil::bit_equal(b0.val(), x));
  auto [a1, b1] = split_rows(lf(t, x), 5);
  CHECK(testutil::bit_equal(a1.val(), x));
  CHECK(b1.shape() == std::vector<int>{0, 3});
  CHECK_THROWS_AS(split_rows(lf(t, x), 6), ArgError);
  CHECK_THROWS_AS(split_rows(lf(t, x), -1), ArgError);
}

TEST_CASE("split inverts concat element-exact over random tensors") {
  Rng rng(23);
  for (int rep = 0; rep < 50; ++rep) {
    int na = static_cast<int>(rng.below(6));
    int nb = static_cast<int>(rng.below(6));
    int d = 1 + static_cast<int>(rng.below(8));
    Tape<float> t;
    Tensor<float> a = rand_tensor({na, d}, rng);
    Tensor<float> b = rand_tensor({nb, d}, rng);
    auto [a2, b2] = split_rows(concat_rows(lf(t, a), lf(t, b)), na);
    CHECK(testutil::bit_equal(a2.val(), a));
    CHECK(testutil::bit_equal(b2.val(), b));
  }
}

TEST_CASE("softmax symmetry and overflow stability") {
  Tape<float> t;
  Var<float> y = softmax_rows(lf(t, Tensor<float>({1, 2}, {0, 0})));
  CHECK(y.val().at(0, 0) == doctest::Approx(0.5));
  CHECK(y.val().at(0, 1) == doctest::Approx(0.5));

  Var<float> z = softmax_rows(lf(t, Tensor<float>({1, 2}, {1000, 0})));
  CHECK(std::isfinite(z.val().at(0, 0)));
  CHECK(z.val().at(0, 0) == doctest::Approx(1.0));
  CHECK(z.val().at(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("softmax rows sum to one and lie in [0,1]") {
  Rng rng(31);
  for (int rep = 0; rep < 30; ++rep) {
    int rows = 1 + static_cast<int>(rng.below(5));
    int n = 1 + static_cast<int>(rng.below(9));
    Tape<float> t;
    Tensor<float> x = rand_tensor({rows, n}, rng);
    for (auto& v : x.data) v *= 10.0f;
    Var<float> y = softmax_rows(lf(t, x));
    for (int r = 0; r < rows; ++r) {
      float sum = 0;
      for (int j = 0; j < n; ++j) {
        float v = y.val().at(r, j);
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        sum += v;
      }
      CHECK(std::fabs(sum - 1.0f) < 1e-6f);
    }
  }
}

TEST_CASE("layer_norm handles constant rows and zero gamma") {
  Tape<float> t;
  Var<float> gamma1 = lf(t, Tensor<float>::full({4}, 1.0f));
  Var<float> beta0 = lf(t, Tensor<float>::zeros({4}));
  Var<float> y = layer_norm(lf(t, Tensor<float>::full({2, 4}, 3.25f)), gamma1, beta0, 1e-5f);
  for (float v : y.val().data) CHECK(v == doctest::Approx(0.0f));

  Var<float> gamma0 = lf(t, Tensor<float>::zeros({4}));
  Var<float> betac = lf(t, Tensor<float>::full({4}, 2.5f));
  Rng rng(9);
  Var<float> z = layer_norm(lf(t, rand_tensor({3, 4}, rng)), gamma0, betac, 1e-5f);
  for (float v : z.val().data) CHECK(v == doctest::Approx(2.5f));

  CHECK_THROWS_AS(layer_norm(lf(t, Tensor<float>::zeros({2, 4})), gamma1, beta0, 0.0f),
                  ArgError);
}

TEST_CASE("output shapes are pure functions of input shapes") {
  // Fuzz the shape algebra: recompute expected extents independently.
  Rng rng(101);
  for (int rep = 0; rep < 40; ++rep) {
    int m = 1 + static_cast<int>(rng.below(6));
    int k = 1 + static_cast<int>(rng.below(6));
    int n = 1 + static_cast<int>(rng.below(6));
    Tape<float> t;
    CHECK(matmul(lf(t, rand_tensor({m, k}, rng)), lf(t, rand_tensor({k, n}, rng))).shape() ==
          std::vector<int>{m, n});

    int h = 3 + static_cast<int>(rng.below(8));
    int w = 3 + static_cast<int>(rng.below(8));
    int cin = 1 + static_cast<int>(rng.below(3));
    int cout = 1 + static_cast<int>(rng.below(4));
    int kh = 1 + 2 * static_cast<int>(rng.below(2));  // 1 or 3
    int stride = 1 + static_cast<int>(rng.below(2));
    int pad = static_cast<int>(rng.below(2));
    if (kh <= h + 2 * pad && kh <= w + 2 * pad) {
      Var<float> y = conv2d(lf(t, rand_tensor({h, w, cin}, rng)),
                            lf(t, rand_tensor({kh, kh, cin, cout}, rng)),
                            lf(t, rand_tensor({cout}, rng)), stride, pad);
      int eh = (h + 2 * pad - kh) / stride + 1;
      int ew = (w + 2 * pad - kh) / stride + 1;
      CHECK(y.shape() == std::vector<int>{eh, ew, cout});
    }

    int f = 1 + static_cast<int>(rng.below(3));
    CHECK(upsample_nearest(lf(t, rand_tensor({h, w, cin}, rng)), f).shape() ==
          std::vector<int>{h * f, w * f, cin});
  }
}

TEST_CASE("gelu and sigmoid match reference values") {
  Tape<double> t;
  Var<double> g = gelu(t.leaf(Tensor<double>({3}, {-1.0, 0.0, 2.0}), false));
  CHECK(g.val().data[0] == doctest::Approx(-0.15865525393145707));
  CHECK(g.val().data[1] == doctest::Approx(0.0));
  CHECK(g.val().data[2] == doctest::Approx(1.9544997361036416));

  Var<double> s = sigmoid(t.leaf(Tensor<double>({2}, {0.0, -500.0}), false));
  CHECK(s.val().data[0] == doctest::Approx(0.5));
  CHECK(s.val().data[1] == doctest::Approx(0.0));
}
