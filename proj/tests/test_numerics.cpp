#include <doctest.h>

#include <cmath>
#include <string>

#include "adaptime/autodiff.hpp"
#include "adaptime/error.hpp"
#include "support.hpp"

using namespace adaptime;
using adaptime::testing::check_gradients;
using adaptime::testing::random_tensor;

namespace {

// Weighted sum so every output entry carries a distinct upstream gradient.
Var weighted_sum(Tape& tape, const Var& y, std::uint64_t seed) {
  return sum(y * tape.constant(random_tensor(y.shape(), seed)));
}

struct Primitive {
  const char* name;
  std::vector<Shape> inputs;
  double lo = -1.0;
  double hi = 1.0;
  std::function<Var(std::span<const Var>)> apply;
};

std::vector<Primitive> primitives() {
  static const std::vector<std::uint32_t> rows{2, 0, 2, 1};
  const std::vector<std::vector<std::size_t>> segments{{0, 1}, {}, {2}, {1, 2, 3}};
  return {
      {"matmul", {{3, 4}, {4, 2}}, -1, 1, [](auto v) { return matmul(v[0], v[1]); }},
      {"add", {{3, 4}, {3, 4}}, -1, 1, [](auto v) { return v[0] + v[1]; }},
      {"add row broadcast", {{3, 4}, {4}}, -1, 1, [](auto v) { return v[0] + v[1]; }},
      {"add column broadcast", {{3, 4}, {3, 1}}, -1, 1, [](auto v) { return v[0] + v[1]; }},
      {"add scalar broadcast", {{3, 4}, {}}, -1, 1, [](auto v) { return v[0] + v[1]; }},
      {"sub", {{3, 4}, {1, 4}}, -1, 1, [](auto v) { return v[0] - v[1]; }},
      {"mul", {{3, 4}, {3, 4}}, -1, 1, [](auto v) { return v[0] * v[1]; }},
      {"mul broadcast", {{3, 1}, {3, 4}}, -1, 1, [](auto v) { return v[0] * v[1]; }},
      {"div", {{3, 4}, {3, 4}}, 0.5, 2, [](auto v) { return v[0] / v[1]; }},
      {"div broadcast", {{3, 4}, {4}}, 0.5, 2, [](auto v) { return v[0] / v[1]; }},
      {"neg", {{2, 3}}, -1, 1, [](auto v) { return -v[0]; }},
      {"scale", {{2, 3}}, -1, 1, [](auto v) { return v[0] * 2.5; }},
      {"add_scalar", {{2, 3}}, -1, 1, [](auto v) { return v[0] + 0.7; }},
      {"exp", {{2, 3}}, -2, 2, [](auto v) { return exp(v[0]); }},
      {"log", {{2, 3}}, 0.2, 3, [](auto v) { return log(v[0]); }},
      {"tanh", {{2, 3}}, -2, 2, [](auto v) { return tanh(v[0]); }},
      {"sigmoid", {{2, 3}}, -4, 4, [](auto v) { return sigmoid(v[0]); }},
      {"softplus", {{2, 3}}, -4, 4, [](auto v) { return softplus(v[0]); }},
      {"gather_rows", {{3, 4}}, -1, 1, [](auto v) { return gather_rows(v[0], rows); }},
      {"sum", {{3, 4}}, -1, 1, [](auto v) { return sum(v[0]); }},
      {"sum axis 0", {{3, 4}}, -1, 1, [](auto v) { return sum(v[0], 0); }},
      {"sum axis 1", {{3, 4}}, -1, 1, [](auto v) { return sum(v[0], 1); }},
      {"mean", {{3, 4}}, -1, 1, [](auto v) { return mean(v[0]); }},
      {"mean axis 0", {{3, 4}}, -1, 1, [](auto v) { return mean(v[0], 0); }},
      {"mean axis 1", {{3, 4}}, -1, 1, [](auto v) { return mean(v[0], 1); }},
      {"concat axis 0", {{2, 3}, {1, 3}}, -1, 1,
       [](auto v) { return concat(v, 0); }},
      {"concat axis 1", {{2, 3}, {2, 2}}, -1, 1,
       [](auto v) { return concat(v, 1); }},
      {"slice_cols", {{2, 6}}, -1, 1, [](auto v) { return slice_cols(v[0], 1, 4); }},
      {"layer_norm", {{3, 5}}, -2, 2, [](auto v) { return layer_norm(v[0]); }},
      {"pool_rows mean", {{4, 3}}, -1, 1,
       [segments](auto v) { return pool_rows(v[0], segments, PoolMode::kMean); }},
      {"pool_rows sum", {{4, 3}}, -1, 1,
       [segments](auto v) { return pool_rows(v[0], segments, PoolMode::kSum); }},
  };
}

}  // namespace

TEST_CASE("gradient of sum(x * x) at (1, 2, 3) is (2, 4, 6)") {
  Parameter x("x", Tensor::vector({1, 2, 3}));
  Tape tape;
  const Var v = bind(tape, x);
  tape.backward(sum(v * v));
  CHECK(x.grad == Tensor::vector({2, 4, 6}));
}

TEST_CASE("d sigmoid(w x) / dw at w = 0, x = 1 is 0.25") {
  Parameter w("w", Tensor::scalar(0.0));
  Tape tape;
  tape.backward(sigmoid(bind(tape, w) * tape.constant(Tensor::scalar(1.0))));
  CHECK(w.grad.item() == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("every primitive matches central differences over 100 seeds") {
  for (const Primitive& prim : primitives()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::vector<Parameter> params;
      for (std::size_t k = 0; k < prim.inputs.size(); ++k) {
        params.emplace_back("p" + std::to_string(k),
                            random_tensor(prim.inputs[k], derive_seed({seed, k}), prim.lo, prim.hi));
      }
      std::vector<Parameter*> ptrs;
      for (auto& p : params) ptrs.push_back(&p);
      const auto build = [&](Tape& tape) {
        std::vector<Var> vars;
        for (auto& p : params) vars.push_back(bind(tape, p));
        return weighted_sum(tape, prim.apply(vars), derive_seed({seed, 99}));
      };
      worst = std::max(worst, check_gradients(ptrs, build).max_relative_error);
    }
    INFO(prim.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("backward is linear in the loss") {
  Parameter x("x", random_tensor({3, 3}, 1));
  auto grad_of = [&](double a, double b) {
    x.zero_grad();
    Tape tape;
    const Var v = bind(tape, x);
    const Var l1 = sum(tanh(v));
    const Var l2 = sum(exp(v) * v);
    tape.backward(l1 * a + l2 * b);
    return x.grad;
  };
  const Tensor g1 = grad_of(1, 0);
  const Tensor g2 = grad_of(0, 1);
  const Tensor combined = grad_of(2.0, -3.0);
  for (std::size_t i = 0; i < combined.size(); ++i) {
    CHECK(combined[i] == doctest::Approx(2.0 * g1[i] - 3.0 * g2[i]).epsilon(1e-12));
  }
}

TEST_CASE("replaying the same tape twice gives bit-identical gradients") {
  Parameter x("x", random_tensor({4, 3}, 7));
  Parameter w("w", random_tensor({3, 2}, 8));
  Tape tape;
  const Var loss = sum(sigmoid(matmul(layer_norm(bind(tape, x)), bind(tape, w))));
  tape.backward(loss);
  const Tensor gx = x.grad;
  const Tensor gw = w.grad;
  x.zero_grad();
  w.zero_grad();
  tape.backward(loss);
  CHECK(x.grad == gx);
  CHECK(w.grad == gw);
}

TEST_CASE("unreachable parameters receive zero gradient") {
  Parameter used("used", Tensor::vector({1, 2}));
  Parameter unused("unused", Tensor::vector({3, 4}));
  Tape tape;
  bind(tape, unused);
  tape.backward(sum(bind(tape, used)));
  CHECK(used.grad == Tensor::vector({1, 1}));
  CHECK(unused.grad == Tensor::vector({0, 0}));
}

TEST_CASE("frozen bindings carry no gradient") {
  Parameter p("p", Tensor::vector({1, 2}));
  const Parameter& view = p;
  Tape tape;
  tape.backward(sum(bind(tape, view) * bind(tape, view)));
  CHECK(p.grad == Tensor::vector({0, 0}));
}

TEST_CASE("non-scalar loss is rejected") {
  Parameter p("p", Tensor::vector({1, 2}));
  Tape tape;
  const Var v = bind(tape, p);
  CHECK_THROWS_AS(tape.backward(v), Error);
}

TEST_CASE("layer norm of a constant row is zero") {
  Tape tape;
  const Var y = layer_norm(tape.constant(Tensor::matrix({{3, 3, 3, 3}})));
  for (double v : y.value().data()) CHECK(v == 0.0);
}

TEST_CASE("non-finite results raise a numeric error") {
  Tape tape;
  const Var big = tape.constant(Tensor::vector({1000.0}));
  try {
    exp(big);
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNumeric);
  }
}

TEST_CASE("shape mismatches raise shape errors") {
  Tape tape;
  const Var a = tape.constant(Tensor(Shape{2, 3}));
  const Var b = tape.constant(Tensor(Shape{4, 2}));
  CHECK_THROWS_AS(matmul(a, b), Error);
  CHECK_THROWS_AS(a + b, Error);
}
