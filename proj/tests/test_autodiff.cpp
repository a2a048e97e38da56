#include <doctest.h>

#include <cmath>

#include "core/gradcheck.hpp"
#include "core/ops.hpp"
#include "core/param_store.hpp"
#include "core/rng.hpp"
#include "testutil.hpp"

using namespace punet;

TEST_CASE("every differentiable primitive passes central finite differences") {
  for (const auto& r : primitive_gradchecks()) {
    INFO(r.name, " max_rel_err=", r.max_rel_err);
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("backward requires a scalar loss") {
  Tape<double> t;
  Var<double> x = t.leaf(Tensor<double>::full({2, 2}, 1.0), true);
  Var<double> y = scale(x, 2.0);
  CHECK_THROWS_AS(t.backward(y), ContractError);
}

TEST_CASE("loss = sum(p) gives ones for unfrozen p, nothing for frozen p") {
  ParamStore<double> ps;
  ps.add("p", Tensor<double>::full({3, 2}, 0.5));

  {
    Tape<double> t;
    BoundParams<double> b = bind_params(t, ps);
    Var<double> loss = sum_all(b["p"]);
    t.backward(loss);
    auto grads = collect_grads(t, b, ps);
    REQUIRE(grads.count("p") == 1);
    for (double g : grads.at("p").data) CHECK(g == 1.0);
  }

  ps.set_frozen("p", true);
  {
    Tape<double> t;
    BoundParams<double> b = bind_params(t, ps);
    Var<double> loss = sum_all(b["p"]);
    t.backward(loss);
    auto grads = collect_grads(t, b, ps);
    CHECK(grads.count("p") == 0);
    CHECK_FALSE(t.grad_live(b["p"].id));
  }
}

TEST_CASE("untouched trainable parameters get explicit zero gradients") {
  ParamStore<double> ps;
  ps.add("used", Tensor<double>::full({2}, 1.0));
  ps.add("unused", Tensor<double>::full({2}, 1.0));
  Tape<double> t;
  BoundParams<double> b = bind_params(t, ps);
  t.backward(sum_all(b["used"]));
  auto grads = collect_grads(t, b, ps);
  REQUIRE(grads.count("unused") == 1);
  for (double g : grads.at("unused").data) CHECK(g == 0.0);
}

TEST_CASE("gradients accumulate across fan-out") {
  Tape<double> t;
  Var<double> x = t.leaf(Tensor<double>::full({2}, 3.0), true);
  // loss = sum(x) + sum(x * x) -> dloss/dx = 1 + 2x = 7
  Var<double> loss = add(sum_all(x), sum_all(mul(x, x)));
  t.backward(loss);
  for (double g : t.grad(x.id).data) CHECK(g == doctest::Approx(7.0));
}

TEST_CASE("tape topological order visits each node once") {
  // A diamond: y = x*x, z = x+x, loss = sum(y*z). Double-counting would show
  // up as a wrong gradient: d/dx (x^2 * 2x) = 6x^2.
  Tape<double> t;
  Var<double> x = t.leaf(Tensor<double>::full({1}, 2.0), true);
  Var<double> loss = sum_all(mul(mul(x, x), add(x, x)));
  t.backward(loss);
  CHECK(t.grad(x.id).data[0] == doctest::Approx(24.0));
}
