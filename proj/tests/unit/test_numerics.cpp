#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "cvloc/errors.hpp"
#include "cvloc/numerics/ops.hpp"
#include "cvloc/numerics/tape.hpp"

using namespace cvloc::numerics;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = n(rng);
  return t;
}

// Central difference of a scalar function of one tensor.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-6) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double rel_err(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-6});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul hand cases") {
  CHECK(matmul(Tensor::matrix({{1}}), Tensor::matrix({{1}})) == Tensor::matrix({{1}}));
  const auto c = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5, 6}, {7, 8}}));
  CHECK(c == Tensor::matrix({{19, 22}, {43, 50}}));
  std::mt19937_64 rng(1);
  const auto a = random_tensor({4, 3}, rng);
  CHECK(max_abs_diff(matmul(a, Tensor::identity(3)), a) == 0.0);
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), cvloc::DimensionError);
}

TEST_CASE("matmul is associative on random triples") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng), c = random_tensor({3, 6}, rng);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-9);
  }
}

TEST_CASE("matmul_nt and matmul_tn agree with explicit transposes") {
  std::mt19937_64 rng(3);
  const auto a = random_tensor({4, 5}, rng), b = random_tensor({6, 5}, rng), c = random_tensor({4, 2}, rng);
  CHECK(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))) < 1e-12);
  CHECK(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)) < 1e-12);
}

TEST_CASE("softmax rows") {
  const auto half = softmax_rows(Tensor::matrix({{0, 0}}));
  CHECK(half.at(0, 0) == doctest::Approx(0.5));
  const auto big = softmax_rows(Tensor::matrix({{1000, 0}}));
  CHECK(big.all_finite());
  CHECK(big.at(0, 0) == doctest::Approx(1.0));
  CHECK(big.at(0, 1) < 1e-300);
  const auto p = softmax_rows(Tensor::matrix({{1, 2}}));
  const double e = std::exp(1.0);
  CHECK(std::abs(p.at(0, 0) - 1.0 / (1.0 + e)) < 1e-12);
  CHECK(std::abs(p.at(0, 1) - e / (1.0 + e)) < 1e-12);
  CHECK(std::abs(p.at(0, 0) - 0.26894) < 1e-5);
  CHECK_THROWS_AS(softmax_rows(Tensor::matrix({{1, 2}}), 0.0), cvloc::ParameterError);
}

TEST_CASE("softmax rows are distributions for arbitrary finite inputs") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const double scale = std::pow(10.0, static_cast<double>(trial % 7) - 2.0);
    const auto p = softmax_rows(random_tensor({3, 9}, rng, scale), 0.5 + trial % 3);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) {
        CHECK(p.at(r, c) >= 0.0);
        s += p.at(r, c);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("layer norm cases") {
  const Tensor ones = Tensor::vector({1, 1}), zeros = Tensor::vector({0, 0});
  const auto flat = layer_norm(Tensor::matrix({{3, 3, 3, 3}}), Tensor::vector({1, 1, 1, 1}), Tensor::vector({0, 0, 0, 0}));
  for (double v : flat.data()) CHECK(v == 0.0);
  const auto unit = layer_norm(Tensor::matrix({{1, -1}}), ones, zeros, 1e-12);
  CHECK(unit.at(0, 0) == doctest::Approx(1.0));
  CHECK(unit.at(0, 1) == doctest::Approx(-1.0));
  const auto collapsed = layer_norm(Tensor::matrix({{5, -2}}), zeros, Tensor::vector({0.25, 0.25}));
  CHECK(collapsed.at(0, 0) == 0.25);
  CHECK(collapsed.at(0, 1) == 0.25);
}

TEST_CASE("backward hand cases") {
  {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(2.0));
    tape.backward(x);
    CHECK(x.grad()->item() == 1.0);
  }
  {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(3.0));
    tape.backward(mul(x, x));
    CHECK(x.grad()->item() == 6.0);
  }
}

TEST_CASE("backward of a sum equals the sum of separate backwards") {
  std::mt19937_64 rng(5);
  const auto xv = random_tensor({3, 4}, rng), w = random_tensor({4, 2}, rng);
  const auto f = [&](Tape& t, Var x) { return sum(exp(scale(matmul(x, t.constant(w)), 0.3))); };
  const auto g = [&](Tape&, Var x) { return mean(mul(x, x)); };

  Tape both;
  Var xb = both.leaf(xv);
  both.backward(add(f(both, xb), g(both, xb)));

  Tape one;
  Var x1 = one.leaf(xv);
  one.backward(f(one, x1));
  Tape two;
  Var x2 = two.leaf(xv);
  two.backward(g(two, x2));

  Tensor expected = *x1.grad();
  for (std::size_t i = 0; i < expected.numel(); ++i) expected[i] += (*x2.grad())[i];
  CHECK(max_abs_diff(*xb.grad(), expected) < 1e-12);
}

TEST_CASE("intermediate gradients are kept only when retained") {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix({{1, 2}}));
  Var y = scale(x, 3.0);
  Var z = exp(x);
  tape.retain_grad(y);
  tape.backward(sum(add(y, z)));
  REQUIRE(y.grad() != nullptr);
  CHECK(y.grad()->at(0, 1) == 1.0);
  CHECK(z.grad() == nullptr);
}

TEST_CASE("op gradients match central differences on random cases") {
  std::mt19937_64 rng(6);
  using Builder = std::function<Var(Tape&, Var)>;
  const std::vector<std::pair<const char*, Builder>> cases = {
      {"matmul", [&](Tape& t, Var x) { return sum(matmul(x, t.constant(Tensor::matrix({{1, -2}, {0.5, 3}, {2, 1}})))); }},
      {"softmax", [&](Tape&, Var x) { return dot(softmax_rows(x, 0.7), x); }},
      {"log_softmax", [&](Tape&, Var x) { return sum(mul(log_softmax_rows(x), x)); }},
      {"layer_norm",
       [&](Tape& t, Var x) {
         return dot(layer_norm(x, t.constant(Tensor::vector({1.5, -0.5, 2})), t.constant(Tensor::vector({0.1, 0.2, 0.3}))),
                    x);
       }},
      {"gelu", [&](Tape&, Var x) { return sum(mul(gelu(x), x)); }},
      {"l2_normalize", [&](Tape&, Var x) { return dot(l2_normalize_rows(x), exp(scale(x, 0.1))); }},
      {"transpose_slice_concat",
       [&](Tape&, Var x) {
         Var t = transpose(x);
         return dot(concat_rows({slice_rows(t, 1, 2), slice_rows(t, 0, 1)}),
                    concat_cols({slice_cols(t, 0, 1), slice_cols(t, 1, 1)}));
       }},
      {"gather_add_row",
       [&](Tape&, Var x) { return sum(mul(gather_rows(x, {1, 0, 1}), add_row(gather_rows(x, {0, 0, 1}), slice_rows(x, 0, 1)))); }},
      {"diagonal_scale_by",
       [&](Tape&, Var x) {
         Var sq = matmul_nt(x, x);
         return sum(scale_by(diagonal(sq), slice_cols(slice_rows(x, 0, 1), 0, 1)));
       }},
  };
  for (const auto& [name, build] : cases) {
    for (int trial = 0; trial < 3; ++trial) {
      CAPTURE(name);
      const auto x0 = random_tensor({2, 3}, rng);
      Tape tape;
      Var x = tape.leaf(x0);
      tape.backward(build(tape, x));
      const auto fd = numeric_grad(
          [&](const Tensor& xv) {
            Tape t(false);
            return build(t, t.leaf(xv, false)).value().item();
          },
          x0);
      CHECK(rel_err(*x.grad(), fd) < 1e-5);
    }
  }
}

TEST_CASE("masked softmax gives excluded keys exactly zero") {
  Tape tape;
  const std::vector<bool> mask = {false, true, false};
  Var x = tape.leaf(Tensor::matrix({{1, 5, 2}, {0, 0, 0}}));
  Var p = softmax_rows(x, 1.0, &mask);
  CHECK(p.value().at(0, 1) == 0.0);
  CHECK(p.value().at(1, 0) == doctest::Approx(0.5));
}

TEST_CASE("ops reject operands from different tapes") {
  Tape a, b;
  Var x = a.leaf(Tensor::scalar(1.0));
  Var y = b.leaf(Tensor::scalar(1.0));
  CHECK_THROWS_AS(add(x, y), cvloc::ContractError);
}
