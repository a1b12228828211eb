// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "fsq/autodiff.hpp"
#include "fsq/error.hpp"
#include "fsq/gradcheck.hpp"
#include "support/random.hpp"

namespace fsq::ad {
namespace {

using fsq::testing::random_tensor;

Var scalar_var(Tape& tape, double v) { return tape.variable(Tensor::scalar(v)); }

TEST(Backward, SquareHasDerivativeTwoX) {
  Tape tape;
  Var x = scalar_var(tape, 3.0);
  Var f = mul(x, x);
  auto g = tape.gradients(f, std::vector<Var>{x});
  EXPECT_EQ(g[0].value().item(), 6.0);
}

TEST(Backward, SoftmaxProbabilityGradientSumsToZero) {
  Tape tape;
  Var logits = tape.variable(Tensor::filled({1, 5}, 0.7));
  Var p = softmax_rows(logits);
  for (std::size_t j = 0; j < 5; ++j) {
    Var pj = sum(slice_cols(p, j, 1));
    auto g = tape.gradients(pj, std::vector<Var>{logits});
    const auto d = g[0].value().data();
    EXPECT_NEAR(std::accumulate(d.begin(), d.end(), 0.0), 0.0, 1e-16);
  }
}

TEST(Backward, MatmulChainMatchesFiniteDifferences) {
  std::mt19937_64 rng(42);
  std::vector<Tensor> params = {random_tensor({4, 3}, rng), random_tensor({3, 2}, rng),
                                random_tensor({2, 2}, rng)};
  auto f = [](Tape&, std::span<const Var> p) {
    return sum(tanh(matmul(matmul(p[0], p[1]), p[2])));
  };
  auto report = finite_diff_check(f, params, 1e-6);
  EXPECT_TRUE(report.finite);
  EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(Backward, NonScalarOutputIsAContractViolation) {
  Tape tape;
  Var x = tape.variable(Tensor::filled({2, 2}, 1.0));
  EXPECT_THROW(tape.gradients(x, std::vector<Var>{x}), ContractError);
  Var one_by_one = tape.variable(Tensor::filled({1, 1}, 1.0));
  EXPECT_THROW(tape.gradients(one_by_one, std::vector<Var>{one_by_one}), ContractError);
}

TEST(Backward, UnreachedNodeGetsExactZero) {
  Tape tape;
  Var x = tape.variable(Tensor::filled({2, 3}, 1.5));
  Var unused = tape.variable(Tensor::filled({3, 1}, -2.0));
  Var f = sum(mul(x, x));
  auto g = tape.gradients(f, std::vector<Var>{x, unused});
  EXPECT_EQ(g[1].shape(), (Shape{3, 1}));
  for (double v : g[1].value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, GradientOfSumIsSumOfGradients) {
  std::mt19937_64 rng(9);
  Tape tape;
  Var x = tape.variable(random_tensor({3, 4}, rng));
  Var w = tape.variable(random_tensor({4, 2}, rng));
  Var f1 = sum(tanh(matmul(x, w)));
  Var f2 = sum(exp(scale(x, 0.3)));
  auto g1 = tape.gradients(f1, std::vector<Var>{x});
  auto g2 = tape.gradients(f2, std::vector<Var>{x});
  auto g12 = tape.gradients(add(f1, f2), std::vector<Var>{x});
  for (std::size_t i = 0; i < 12; ++i)
    EXPECT_NEAR(g12[0].value()[i], g1[0].value()[i] + g2[0].value()[i], 1e-15);
}

TEST(Backward, RepeatedEvaluationIsBitwiseIdentical) {
  auto run = [] {
    std::mt19937_64 rng(77);
    Tape tape;
    Var x = tape.variable(random_tensor({5, 6}, rng));
    Var w = tape.variable(random_tensor({6, 3}, rng));
    Var f = cross_entropy(matmul(x, w), std::vector<int>{0, 1, 2, 1, 0});
    auto g = tape.gradients(f, std::vector<Var>{x, w});
    return std::make_pair(g[0].value(), g[1].value());
  };
  auto a = run();
  auto b = run();
  EXPECT_TRUE(bitwise_equal(a.first, b.first));
  EXPECT_TRUE(bitwise_equal(a.second, b.second));
}

TEST(SecondOrder, CubeHasSecondDerivativeSixX) {
  Tape tape;
  Var x = scalar_var(tape, 2.0);
  Var f = mul(mul(x, x), x);
  auto g = tape.gradients(f, std::vector<Var>{x}, {.create_graph = true});
  EXPECT_EQ(g[0].value().item(), 12.0);
  auto h = tape.gradients(g[0], std::vector<Var>{x});
  EXPECT_EQ(h[0].value().item(), 12.0);
}

TEST(SecondOrder, TanhSecondDerivativeVanishesAtZero) {
  Tape tape;
  Var x = scalar_var(tape, 0.0);
  auto g = tape.gradients(tanh(x), std::vector<Var>{x}, {.create_graph = true});
  EXPECT_EQ(g[0].value().item(), 1.0);
  auto h = tape.gradients(g[0], std::vector<Var>{x});
  EXPECT_EQ(h[0].value().item(), 0.0);
}

TEST(SecondOrder, QuadraticHessianRowsAreExact) {
  // f(x) = x^T A x + b^T x has Hessian A + A^T.
  const Tensor a = Tensor::matrix(3, 3, {2.0, -1.0, 0.5, 0.25, 3.0, 1.0, -2.0, 0.0, 1.5});
  const Tensor b = Tensor::matrix(3, 1, {1.0, -1.0, 2.0});
  Tape tape;
  Var x = tape.variable(Tensor::matrix(3, 1, {0.3, -0.7, 1.1}));
  Var av = tape.constant(a), bv = tape.constant(b);
  Var f = add(sum(matmul(matmul(x, av, true, false), x)), sum(mul(bv, x)));
  Var gx = tape.gradients(f, std::vector<Var>{x}, {.create_graph = true})[0];
  for (std::size_t i = 0; i < 3; ++i) {
    auto row = tape.gradients(sum(slice_rows(gx, i, 1)), std::vector<Var>{x})[0].value();
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(row[j], a.at(i, j) + a.at(j, i));
  }
}

TEST(SecondOrder, CustomOpIsFirstOrderOnly) {
  Tape tape;
  Var x = tape.variable(Tensor::matrix(1, 2, {1.0, 2.0}));
  // y = 3x implemented outside the tape.
  Tensor value = Tensor::matrix(1, 2, {3.0, 6.0});
  Var y = custom(std::vector<Var>{x}, value, [](const Tensor& g) {
    std::vector<double> d(g.data().begin(), g.data().end());
    for (auto& v : d) v *= 3.0;
    return std::vector<Tensor>{Tensor(g.shape(), d)};
  });
  Var f = sum(mul(y, y));
  auto g = tape.gradients(f, std::vector<Var>{x});
  EXPECT_EQ(g[0].value()[0], 18.0);
  EXPECT_EQ(g[0].value()[1], 36.0);
  EXPECT_THROW(tape.gradients(f, std::vector<Var>{x}, {.create_graph = true}),
               UnsupportedOpError);
}

// Logistic model p = sigmoid(w . x), one inner gradient step on a support set,
// meta-loss on a query set. The reference computes the inner gradient in closed
// form and differentiates the whole procedure numerically.
struct LogisticTask {
  std::vector<std::array<double, 2>> xs_support, xs_query;
  std::vector<double> ys_support, ys_query;
};

double logistic_loss(const std::array<double, 2>& w, const std::vector<std::array<double, 2>>& xs,
                     const std::vector<double>& ys) {
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-(w[0] * xs[i][0] + w[1] * xs[i][1])));
    total += -(ys[i] * std::log(p) + (1.0 - ys[i]) * std::log(1.0 - p));
  }
  return total / static_cast<double>(xs.size());
}

double meta_loss_reference(std::array<double, 2> w, const LogisticTask& t, double lr) {
  std::array<double, 2> grad{0.0, 0.0};
  for (std::size_t i = 0; i < t.xs_support.size(); ++i) {
    const auto& x = t.xs_support[i];
    const double p = 1.0 / (1.0 + std::exp(-(w[0] * x[0] + w[1] * x[1])));
    grad[0] += (p - t.ys_support[i]) * x[0];
    grad[1] += (p - t.ys_support[i]) * x[1];
  }
  const double n = static_cast<double>(t.xs_support.size());
  const std::array<double, 2> adapted{w[0] - lr * grad[0] / n, w[1] - lr * grad[1] / n};
  return logistic_loss(adapted, t.xs_query, t.ys_query);
}

Var logistic_loss_graph(Tape& tape, const Var& w, const std::vector<std::array<double, 2>>& xs,
                        const std::vector<double>& ys) {
  std::vector<double> flat, labels(ys);
  for (const auto& x : xs) flat.insert(flat.end(), x.begin(), x.end());
  Var x = tape.constant(Tensor::matrix(xs.size(), 2, flat));
  Var y = tape.constant(Tensor::matrix(xs.size(), 1, labels));
  Var p = sigmoid(matmul(x, w));
  Var ll = add(mul(y, log(p)), mul(add_scalar(scale(y, -1.0), 1.0), log(add_scalar(scale(p, -1.0), 1.0))));
  return scale(mean(ll), -1.0);
}

TEST(SecondOrder, OneStepMetaGradientMatchesFiniteDifferencesOfWholeProcedure) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n01(0.0, 1.0);
  LogisticTask task;
  for (int i = 0; i < 6; ++i) {
    task.xs_support.push_back({n01(rng), n01(rng)});
    task.ys_support.push_back(i % 2);
    task.xs_query.push_back({n01(rng), n01(rng)});
    task.ys_query.push_back((i + 1) % 2);
  }
  const double lr = 0.5;
  const std::array<double, 2> w0{0.4, -0.3};

  Tape tape;
  Var w = tape.variable(Tensor::matrix(2, 1, {w0[0], w0[1]}));
  Var inner = logistic_loss_graph(tape, w, task.xs_support, task.ys_support);
  Var g = tape.gradients(inner, std::vector<Var>{w}, {.create_graph = true})[0];
  Var adapted = sub(w, scale(g, lr));
  Var outer = logistic_loss_graph(tape, adapted, task.xs_query, task.ys_query);
  Tensor meta = tape.gradients(outer, std::vector<Var>{w})[0].value();

  EXPECT_NEAR(outer.value().item(), meta_loss_reference(w0, task, lr), 1e-14);
  const double h = 1e-6;
  for (int i = 0; i < 2; ++i) {
    auto up = w0, down = w0;
    up[i] += h;
    down[i] -= h;
    const double numeric =
        (meta_loss_reference(up, task, lr) - meta_loss_reference(down, task, lr)) / (2 * h);
    EXPECT_LT(relative_error(meta[i], numeric), 1e-5);
  }

  // Dropping the second-order term changes the answer on this curved problem.
  Tape fo;
  Var wf = fo.variable(Tensor::matrix(2, 1, {w0[0], w0[1]}));
  Var gf = fo.gradients(logistic_loss_graph(fo, wf, task.xs_support, task.ys_support),
                        std::vector<Var>{wf})[0];
  Var af = sub(wf, scale(gf, lr));
  Tensor first = fo.gradients(logistic_loss_graph(fo, af, task.xs_query, task.ys_query),
                              std::vector<Var>{wf})[0]
                     .value();
  EXPECT_GT(max_abs_diff(first, meta), 1e-4);
}

TEST(GradCheck, LinearFunctionHasNegligibleError) {
  // Dyadic inputs and power-of-two steps keep every product and sum exact.
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> grid(-16, 16);
  std::vector<double> cv(12), xv(12);
  for (auto& v : cv) v = grid(rng) / 8.0;
  for (auto& v : xv) v = grid(rng) / 8.0;
  const Tensor c = Tensor::matrix(3, 4, cv);
  std::vector<Tensor> params = {Tensor::matrix(3, 4, xv)};
  auto f = [&c](Tape& t, std::span<const Var> p) { return sum(mul(p[0], t.constant(c))); };
  for (double h : {0x1p-3, 0x1p-10, 0x1p-20}) {
    EXPECT_LT(finite_diff_check(f, params, h).max_rel_error, 1e-10) << h;
  }
  // Arbitrary values: only round-off remains, far below the threshold for large h.
  std::vector<Tensor> random_params = {random_tensor({3, 4}, rng)};
  for (double h : {1e-1, 1e-2, 1e-3}) {
    EXPECT_LT(finite_diff_check(f, random_params, h).max_rel_error, 1e-10) << h;
  }
}

TEST(GradCheck, NanIsReportedAsFailure) {
  std::vector<Tensor> params = {Tensor::matrix(1, 1, {-1.0})};
  auto report = finite_diff_check(
      [](Tape&, std::span<const Var> p) { return sum(log(p[0])); }, params, 1e-6);
  EXPECT_FALSE(report.finite);
  EXPECT_TRUE(std::isinf(report.max_rel_error));
}

TEST(GradCheck, UniformLogitsCrossEntropyIsLogC) {
  for (std::size_t classes : {2u, 3u, 7u}) {
    Tape tape;
    Var z = tape.constant(Tensor::filled({1, classes}, 0.25));
    std::vector<int> label{1};
    EXPECT_NEAR(cross_entropy(z, label).value().item(), std::log(static_cast<double>(classes)),
                1e-15);
  }
}

// Every primitive against central differences on random inputs in [-2, 2].
struct PrimitiveCase {
  const char* name;
  std::vector<Shape> shapes;
  ScalarBuilder f;
  bool positive = false;
};

std::vector<PrimitiveCase> primitive_cases() {
  auto weights = [](Tape& t, const Shape& s) {
    std::vector<double> w(shape_size(s));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.37 * static_cast<double>(i));
    return t.constant(Tensor(s, w));
  };
  return {
      {"matmul", {{3, 4}, {4, 2}}, [=](Tape& t, auto p) { return sum(mul(matmul(p[0], p[1]), weights(t, {3, 2}))); }},
      {"matmul_tt", {{4, 3}, {2, 4}}, [=](Tape& t, auto p) { return sum(mul(matmul(p[0], p[1], true, true), weights(t, {3, 2}))); }},
      {"add_broadcast", {{3, 4}, {1, 4}}, [=](Tape& t, auto p) { return sum(mul(add(p[0], p[1]), weights(t, {3, 4}))); }},
      {"sub_broadcast", {{3, 4}, {3, 1}}, [=](Tape& t, auto p) { return sum(mul(sub(p[0], p[1]), weights(t, {3, 4}))); }},
      {"mul", {{3, 4}, {3, 4}}, [=](Tape& t, auto p) { return sum(mul(mul(p[0], p[1]), weights(t, {3, 4}))); }},
      {"mul_scalar", {{3, 4}, {}}, [=](Tape& t, auto p) { return sum(mul(mul(p[0], p[1]), weights(t, {3, 4}))); }},
      {"div", {{2, 3}, {2, 3}}, [=](Tape& t, auto p) { return sum(mul(div(p[0], add_scalar(p[1], 3.0)), weights(t, {2, 3}))); }},
      {"scale", {{2, 3}}, [=](Tape& t, auto p) { return sum(mul(scale(p[0], -1.7), weights(t, {2, 3}))); }},
      {"tanh", {{2, 3}}, [=](Tape& t, auto p) { return sum(mul(tanh(p[0]), weights(t, {2, 3}))); }},
      {"sigmoid", {{2, 3}}, [=](Tape& t, auto p) { return sum(mul(sigmoid(p[0]), weights(t, {2, 3}))); }},
      {"exp", {{2, 3}}, [=](Tape& t, auto p) { return sum(mul(exp(p[0]), weights(t, {2, 3}))); }},
      {"log", {{2, 3}}, [=](Tape& t, auto p) { return sum(mul(log(p[0]), weights(t, {2, 3}))); }, true},
      {"pow", {{2, 3}}, [=](Tape& t, auto p) { return sum(mul(pow(p[0], -0.5), weights(t, {2, 3}))); }, true},
      {"softmax_rows", {{3, 5}}, [=](Tape& t, auto p) { return sum(mul(softmax_rows(p[0]), weights(t, {3, 5}))); }},
      {"layer_norm", {{3, 6}, {1, 6}, {1, 6}}, [=](Tape& t, auto p) { return sum(mul(layer_norm(p[0], p[1], p[2]), weights(t, {3, 6}))); }},
      {"concat_cols", {{2, 3}, {2, 2}}, [=](Tape& t, auto p) { return sum(mul(concat_cols(std::vector<Var>{p[0], p[1]}), weights(t, {2, 5}))); }},
      {"concat_rows", {{2, 3}, {1, 3}}, [=](Tape& t, auto p) { return sum(mul(concat_rows(std::vector<Var>{p[0], p[1]}), weights(t, {3, 3}))); }},
      {"gather_rows", {{4, 3}}, [=](Tape& t, auto p) { return sum(mul(gather_rows(p[0], {3, 0, 3}), weights(t, {3, 3}))); }},
      {"max_of", {{2, 3}, {2, 3}, {2, 3}}, [=](Tape& t, auto p) { return sum(mul(max_of(std::vector<Var>{p[0], p[1], p[2]}), weights(t, {2, 3}))); }},
      {"mean", {{3, 3}}, [=](Tape& t, auto p) { return mul(mean(mul(p[0], p[0])), sum(weights(t, {1, 1}))); }},
      {"cross_entropy", {{3, 4}}, [](Tape&, auto p) { return cross_entropy(p[0], std::vector<int>{0, 3, 1}); }},
      {"transpose_reshape", {{2, 6}}, [=](Tape& t, auto p) { return sum(mul(reshape(transpose(p[0]), {3, 4}), weights(t, {3, 4}))); }},
  };
}

TEST(Primitives, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(123);
  for (const auto& c : primitive_cases()) {
    for (int trial = 0; trial < 3; ++trial) {
      std::vector<Tensor> params;
      for (const auto& s : c.shapes)
        params.push_back(c.positive ? random_tensor(s, rng, 0.5, 2.0) : random_tensor(s, rng));
      auto report = finite_diff_check(c.f, params, 1e-6);
      EXPECT_TRUE(report.finite) << c.name;
      EXPECT_LT(report.max_rel_error, 1e-6) << c.name << " param " << report.worst_param
                                            << " index " << report.worst_index;
    }
  }
}

TEST(Primitives, SecondOrderMatchesFiniteDifferencesOfGradient) {
  // d/dx of (sum of df/dx * v) checked numerically for a composite of every
  // smooth primitive; exercises each backward rule's own backward rule.
  std::mt19937_64 rng(321);
  const Tensor v = random_tensor({3, 4}, rng);
  auto composite = [](Tape& t, const Var& x) {
    Var w = t.constant(Tensor::matrix(4, 4, {0.3, -0.2, 0.5, 0.1, 0.7, 0.4, -0.6, 0.2, -0.1,
                                              0.9, 0.3, -0.4, 0.2, 0.1, 0.8, 0.6}));
    Var ones = t.constant(Tensor::filled({1, 4}, 1.0));
    Var zeros = t.constant(Tensor::filled({1, 4}, 0.0));
    Var h = tanh(matmul(x, w));
    Var s = softmax_rows(mul(h, sigmoid(x)));
    Var n = layer_norm(add(s, exp(scale(x, 0.2))), ones, zeros);
    Var m = max_of(std::vector<Var>{n, scale(n, 0.5)});
    return add(cross_entropy(m, std::vector<int>{0, 2, 3}),
               mean(log(add_scalar(mul(x, x), 1.0))));
  };
  auto directional = [&](Tape& t, std::span<const Var> p) {
    Var g = t.gradients(composite(t, p[0]), std::vector<Var>{p[0]}, {.create_graph = true})[0];
    return sum(mul(g, t.constant(v)));
  };
  std::vector<Tensor> params = {random_tensor({3, 4}, rng)};
  auto report = finite_diff_check(directional, params, 1e-6);
  EXPECT_TRUE(report.finite);
  EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(Primitives, MaxRoutesTiesToLowestIndex) {
  Tape tape;
  Var a = tape.variable(Tensor::matrix(1, 3, {1.0, 5.0, 2.0}));
  Var b = tape.variable(Tensor::matrix(1, 3, {1.0, 4.0, 3.0}));
  auto g = tape.gradients(sum(max_of(std::vector<Var>{a, b})), std::vector<Var>{a, b});
  EXPECT_EQ(g[0].value().to_vector(), (std::vector<double>{1.0, 1.0, 0.0}));
  EXPECT_EQ(g[1].value().to_vector(), (std::vector<double>{0.0, 0.0, 1.0}));
}

TEST(Primitives, LayerNormOfConstantRowIsShift) {
  Tape tape;
  Var x = tape.constant(Tensor::filled({2, 4}, 0.0));
  Var y = layer_norm(x, tape.constant(Tensor::filled({1, 4}, 1.0)),
                     tape.constant(Tensor::filled({1, 4}, 0.0)));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Primitives, ShapeErrorsAreReported) {
  Tape tape;
  Var a = tape.variable(Tensor::filled({2, 3}, 1.0));
  Var b = tape.variable(Tensor::filled({2, 3}, 1.0));
  EXPECT_THROW(matmul(a, b), ShapeError);
  EXPECT_THROW(add(a, tape.constant(Tensor::filled({3, 2}, 1.0))), ShapeError);
  EXPECT_THROW(cross_entropy(a, std::vector<int>{0}), ShapeError);
  EXPECT_THROW(cross_entropy(a, std::vector<int>{0, 3}), ContractError);
  Tape other;
  Var c = other.variable(Tensor::filled({2, 3}, 1.0));
  EXPECT_THROW(add(a, c), ContractError);
}

TEST(Tape, NoGradGuardStopsRecording) {
  Tape tape;
  Var x = tape.variable(Tensor::scalar(2.0));
  Var y;
  {
    NoGradGuard guard(tape);
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  Var z = mul(x, x);
  EXPECT_TRUE(z.requires_grad());
  EXPECT_EQ(tape.gradients(y, std::vector<Var>{x})[0].value().item(), 0.0);
}

}  // namespace
}  // namespace fsq::ad
