#include <cmath>
#include <numbers>

#include "doctest.h"
#include "gradcheck.hpp"
#include "jstts/autodiff.hpp"
#include "jstts/error.hpp"
#include "jstts/optim.hpp"
#include "jstts/rng.hpp"

using namespace jstts;
using jstts::testing::max_grad_rel_error;
using jstts::testing::random_tensor;

TEST_CASE("matmul with identity returns the other operand") {
  Tape t;
  Var eye = t.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  Var a = t.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var c = matmul(eye, a);
  CHECK(c.value().values() == a.value().values());
}

TEST_CASE("logsumexp and softmax on symmetric inputs") {
  Tape t;
  Var z = t.constant(Tensor({1, 2}, {0, 0}));
  CHECK(logsumexp(z).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Var ones = t.constant(Tensor({1, 3}, {1, 1, 1}));
  for (double v : softmax(ones).value().values()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("logsumexp is overflow safe") {
  Tape t;
  Tensor x({1, 4}, {0.3, -1.2, 2.0, 0.7});
  Tensor shifted = x;
  for (double& v : shifted.values()) v += 1e4;
  const double a = logsumexp(t.constant(x)).item();
  const double b = logsumexp(t.constant(shifted)).item();
  CHECK(std::isfinite(b));
  CHECK(std::fabs((b - a) - 1e4) < 1e-9);
}

TEST_CASE("product rule gradient") {
  Tape t;
  Var x = t.leaf(Tensor::scalar(2.0), true);
  Var y = t.leaf(Tensor::scalar(3.0), true);
  t.backward(mul(x, y));
  CHECK(t.grad(x)->item() == doctest::Approx(3.0));
  CHECK(t.grad(y)->item() == doctest::Approx(2.0));
}

TEST_CASE("leaf without requires_grad has no gradient") {
  Tape t;
  Var x = t.leaf(Tensor::scalar(2.0), true);
  Var c = t.leaf(Tensor::scalar(5.0), false);
  t.backward(mul(x, c));
  CHECK_FALSE(t.grad(c).has_value());
  CHECK(t.grad(x)->item() == doctest::Approx(5.0));
}

TEST_CASE("backward rejects non-scalar loss and reuse") {
  Tape t;
  Var x = t.leaf(Tensor({1, 2}, {1, 2}), true);
  CHECK_THROWS_AS(t.backward(x), ShapeError);
  Tape t2;
  Var y = t2.leaf(Tensor::scalar(1.0), true);
  Var l = square(y);
  t2.backward(l);
  CHECK_THROWS_AS(t2.backward(l), Error);
}

TEST_CASE("shape errors name the op and shapes") {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("logsumexp gradient equals softmax") {
  Rng rng(11);
  Tensor x = random_tensor(rng, {1, 5});
  Tape t;
  Var v = t.leaf(x, true);
  t.backward(logsumexp(v));
  Tape t2;
  Tensor sm = softmax(t2.constant(x)).value();
  for (int i = 0; i < 5; ++i) CHECK((*t.grad(v))[i] == doctest::Approx(sm[i]).epsilon(1e-10));
  double err = max_grad_rel_error([](Tape&, const std::vector<Var>& in) { return sum(logsumexp(in[0])); }, {x});
  CHECK(err < 1e-4);
}

// Every differentiable op against central differences on random inputs.
TEST_CASE("finite-difference agreement for all ops") {
  Rng rng(3);
  using Fn = jstts::testing::ScalarFn;
  // Weighting by a fixed random tensor avoids symmetric cancellations in sum().
  Tensor w34 = random_tensor(rng, {3, 4});
  auto wsum = [w34](Tape& t, Var v) {
    if (v.value().numel() == 12) return sum(mul(reshape(v, {3, 4}), t.constant(w34)));
    return sum(v);
  };
  struct Case {
    const char* name;
    Fn fn;
    std::vector<Tensor> in;
  };
  std::vector<Case> cases = {
      {"matmul", [&](Tape& t, const auto& v) { return wsum(t, matmul(v[0], v[1])); },
       {random_tensor(rng, {3, 2}), random_tensor(rng, {2, 4})}},
      {"matmul_nt", [&](Tape& t, const auto& v) { return wsum(t, matmul_nt(v[0], v[1])); },
       {random_tensor(rng, {3, 2}), random_tensor(rng, {4, 2})}},
      {"transpose", [&](Tape& t, const auto& v) { return wsum(t, transpose(v[0])); }, {random_tensor(rng, {4, 3})}},
      {"add_bcast", [&](Tape& t, const auto& v) { return wsum(t, add(v[0], v[1])); },
       {random_tensor(rng, {3, 4}), random_tensor(rng, {1, 4})}},
      {"sub", [&](Tape& t, const auto& v) { return wsum(t, sub(v[0], v[1])); },
       {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}},
      {"mul", [&](Tape& t, const auto& v) { return wsum(t, mul(v[0], v[1])); },
       {random_tensor(rng, {3, 4}), random_tensor(rng, {1, 4})}},
      {"tanh", [&](Tape& t, const auto& v) { return wsum(t, tanh(v[0])); }, {random_tensor(rng, {3, 4})}},
      {"sigmoid", [&](Tape& t, const auto& v) { return wsum(t, sigmoid(v[0])); }, {random_tensor(rng, {3, 4})}},
      {"exp", [&](Tape& t, const auto& v) { return wsum(t, exp(v[0])); }, {random_tensor(rng, {3, 4}, 0.5)}},
      {"log", [&](Tape& t, const auto& v) { return wsum(t, log(add_scalar(square(v[0]), 0.5))); },
       {random_tensor(rng, {3, 4})}},
      {"relu", [&](Tape& t, const auto& v) { return wsum(t, relu(v[0])); }, {random_tensor(rng, {3, 4})}},
      {"abs", [&](Tape& t, const auto& v) { return wsum(t, abs(v[0])); }, {random_tensor(rng, {3, 4})}},
      {"softmax", [&](Tape& t, const auto& v) { return wsum(t, softmax(v[0])); }, {random_tensor(rng, {3, 4})}},
      {"log_softmax", [&](Tape& t, const auto& v) { return wsum(t, log_softmax(v[0])); },
       {random_tensor(rng, {3, 4})}},
      {"layer_norm", [&](Tape& t, const auto& v) { return wsum(t, layer_norm(v[0], v[1], v[2])); },
       {random_tensor(rng, {3, 4}), random_tensor(rng, {1, 4}), random_tensor(rng, {1, 4})}},
      {"embedding",
       [&](Tape& t, const auto& v) {
         std::vector<int> ids = {2, 0, 2};
         return wsum(t, embedding(v[0], ids));
       },
       {random_tensor(rng, {3, 4})}},
      {"concat_cols", [&](Tape& t, const auto& v) { return wsum(t, concat_cols({v[0], v[1]})); },
       {random_tensor(rng, {3, 1}), random_tensor(rng, {3, 3})}},
      {"concat_rows", [&](Tape& t, const auto& v) { return wsum(t, concat_rows({v[0], v[1]})); },
       {random_tensor(rng, {1, 4}), random_tensor(rng, {2, 4})}},
      {"slice_rows", [&](Tape&, const auto& v) { return sum(square(slice_rows(v[0], 1, 2))); },
       {random_tensor(rng, {3, 4})}},
      {"slice_cols", [&](Tape&, const auto& v) { return sum(square(slice_cols(v[0], 1, 2))); },
       {random_tensor(rng, {3, 4})}},
      {"mean", [&](Tape&, const auto& v) { return mean(square(v[0])); }, {random_tensor(rng, {3, 4})}},
      {"mean_rows", [&](Tape&, const auto& v) { return sum(square(mean_rows(v[0]))); }, {random_tensor(rng, {3, 4})}},
      {"broadcast_rows", [&](Tape& t, const auto& v) { return wsum(t, broadcast_rows(v[0], 3)); },
       {random_tensor(rng, {1, 4})}},
      {"repeat_rows",
       [&](Tape&, const auto& v) {
         std::vector<int> c = {2, 1, 3};
         return sum(square(repeat_rows(v[0], c)));
       },
       {random_tensor(rng, {3, 4})}},
      {"outer_add", [&](Tape&, const auto& v) { return sum(tanh(outer_add(v[0], v[1]))); },
       {random_tensor(rng, {2, 3}), random_tensor(rng, {3, 3})}},
      {"depthwise_conv1d", [&](Tape& t, const auto& v) { return wsum(t, depthwise_conv1d(v[0], v[1])); },
       {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(max_grad_rel_error(c.fn, c.in) < 1e-4);
  }
}

TEST_CASE("adam: zero gradient leaves parameter and counts the step") {
  Parameter p("w", Tensor::scalar(1.5));
  std::vector<Parameter*> ps = {&p};
  AdamState st(ps, {});
  adam_step(ps, st, "g");
  CHECK(p.value.item() == 1.5);
  CHECK(st.step_count == 1);
}

TEST_CASE("adam: first step moves by the learning rate") {
  // m = 0.1, v = 0.001; bias corrected both are 1 -> step = lr / (1 + eps).
  Parameter p("w", Tensor::scalar(0.0));
  std::vector<Parameter*> ps = {&p};
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  AdamState st(ps, cfg);
  p.grad[0] = 1.0;
  adam_step(ps, st, "g");
  CHECK(p.value.item() == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("adam: NaN gradient is rejected with the group name") {
  Parameter p("w", Tensor::scalar(0.0));
  std::vector<Parameter*> ps = {&p};
  AdamState st(ps, {});
  p.grad[0] = std::nan("");
  try {
    adam_step(ps, st, "decoder");
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("decoder") != std::string::npos);
  }
}

TEST_CASE("identical seeds give bit-identical optimisation") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Parameter w("w", random_tensor(rng, {3, 3}));
    std::vector<Parameter*> ps = {&w};
    AdamState st(ps, {});
    for (int step = 0; step < 20; ++step) {
      Tape t;
      Var x = t.constant(random_tensor(rng, {4, 3}));
      Var l = mean(square(tanh(matmul(x, t.param(w, true)))));
      w.zero_grad();
      t.backward(l);
      clip_global_norm(ps, 1.0);
      adam_step(ps, st, "w");
    }
    return w.value.values();
  };
  CHECK(run(5) == run(5));
  CHECK(run(5) != run(6));
}

TEST_CASE("gradient clipping bounds the global norm") {
  Parameter a("a", Tensor({1, 2}));
  a.grad = Tensor({1, 2}, {3, 4});
  std::vector<Parameter*> ps = {&a};
  CHECK(clip_global_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(grad_norm(ps) == doctest::Approx(1.0));
}
