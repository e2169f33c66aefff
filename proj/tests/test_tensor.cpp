#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "mblm/ops.hpp"
#include "mblm/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace mblm;

namespace {

Tensor probe(const Shape& shape, std::mt19937& rng) {
  return Tensor::of(shape, gradcheck::random_values(shape_numel(shape), rng));
}

// Scalarizes a non-scalar op result against fixed random weights so every
// output component contributes to the checked loss.
Tensor weighted(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

}  // namespace

TEST_CASE("matmul basics") {
  Tensor eye = Tensor::of({2, 2}, {1, 0, 0, 1});
  Tensor x = Tensor::of({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(matmul(eye, x).values() == x.values());

  // scalar arithmetic oracle: [[1*1+2*1],[3*1+4*1]]
  Tensor a = Tensor::of({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::of({2, 1}, {1, 1});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.values()[0] == doctest::Approx(3));
  CHECK(c.values()[1] == doctest::Approx(7));

  std::mt19937 rng(1);
  auto z = matmul(Tensor::zeros({2, 3}), probe({3, 4}, rng));
  CHECK(z.shape() == Shape{2, 4});
  for (float v : z.values()) CHECK(v == 0.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("softmax values") {
  auto u = softmax(Tensor::of({4}, {2.5f, 2.5f, 2.5f, 2.5f}), 0);
  for (float v : u.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));

  // high-precision scalar oracle
  const double e1 = std::exp(1.0), e0 = 1.0;
  auto s = softmax(Tensor::of({2}, {1.0f, 0.0f}), 0);
  CHECK(s.values()[0] == doctest::Approx(e1 / (e1 + e0)).epsilon(1e-6));
  CHECK(s.values()[1] == doctest::Approx(e0 / (e1 + e0)).epsilon(1e-6));
  CHECK(s.values()[0] == doctest::Approx(0.7311).epsilon(1e-3));

  auto big = softmax(Tensor::of({2}, {3.0f, 1003.0f}), 0);
  CHECK(std::isfinite(big.values()[0]));
  CHECK(big.values()[0] == doctest::Approx(0.0));
  CHECK(big.values()[1] == doctest::Approx(1.0));
}

TEST_CASE("softmax rows sum to one for large magnitudes") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<float> dist(-1e4f, 1e4f);
  for (int trial = 0; trial < 50; ++trial) {
    Shape shape = gradcheck::random_shape(rng);
    std::vector<float> vals(shape_numel(shape));
    for (auto& v : vals) v = dist(rng);
    int axis = std::uniform_int_distribution<int>(0, static_cast<int>(shape.size()) - 1)(rng);
    auto s = softmax(Tensor::of(shape, vals), axis);
    auto sums = sum_axis(s, axis);
    for (float v : sums.values()) {
      CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(v > 0.0f);
    }
  }
}

TEST_CASE("detach value identity and stopped gradients") {
  std::mt19937 rng(3);
  Tensor x = gradcheck::random_leaf({3, 2}, rng);
  auto d = detach(x);
  CHECK(d.values() == x.values());
  CHECK_FALSE(d.tracked());

  // gradient through a fully detached path is never created
  x.zero_grad();
  backward(sum(detach(x)));
  CHECK_FALSE(x.has_grad());

  // loss = sum(x * detach(x)): gradient is x, not 2x
  x.zero_grad();
  backward(sum(mul(x, detach(x))));
  REQUIRE(x.has_grad());
  for (int64_t i = 0; i < x.size(); ++i) {
    CHECK(x.grad()[i] == doctest::Approx(x.values()[i]).epsilon(1e-6));
  }

  // finite differences against the stopped loss: the detached copy is frozen
  Tensor frozen = detach(x);
  std::vector<Tensor> leaves{x};
  auto res = gradcheck::check(
      [&](std::vector<Tensor>& ls) { return sum(mul(ls[0], frozen)); }, leaves);
  CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("detach is idempotent") {
  std::mt19937 rng(4);
  Tensor x = gradcheck::random_leaf({4}, rng);
  auto d1 = detach(x);
  auto d2 = detach(d1);
  CHECK(d2.values() == d1.values());
  CHECK_FALSE(d1.tracked());
  CHECK_FALSE(d2.tracked());
}

TEST_CASE("backward basics") {
  std::mt19937 rng(5);
  Tensor x = gradcheck::random_leaf({2, 3}, rng);
  backward(sum(x));
  for (float g : x.grad()) CHECK(g == doctest::Approx(1.0));

  x.zero_grad();
  backward(sum(mul(x, x)));
  for (int64_t i = 0; i < x.size(); ++i) {
    CHECK(x.grad()[i] == doctest::Approx(2.0f * x.values()[i]).epsilon(1e-5));
  }

  CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
  CHECK_NOTHROW(backward(Tensor::scalar(1.0f)));  // nothing tracked: no-op
}

TEST_CASE("backward accumulates across calls") {
  std::mt19937 rng(6);
  Tensor x = gradcheck::random_leaf({3}, rng);
  auto loss = sum(x);
  backward(loss);
  backward(loss);
  for (float g : x.grad()) CHECK(g == doctest::Approx(2.0));
}

TEST_CASE("shared subexpression gradients count once per use") {
  Tensor x = Tensor::of({2}, {3.0f, -1.0f}, true);
  Tensor y = Tensor::of({2}, {2.0f, 5.0f}, true);
  auto w = mul(x, y);
  backward(sum(add(w, w)));
  CHECK(x.grad()[0] == doctest::Approx(2.0f * 2.0f));
  CHECK(x.grad()[1] == doctest::Approx(2.0f * 5.0f));
  CHECK(y.grad()[0] == doctest::Approx(2.0f * 3.0f));
  CHECK(y.grad()[1] == doctest::Approx(2.0f * -1.0f));
}

TEST_CASE("random composite matches finite differences") {
  std::mt19937 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = gradcheck::random_leaf({3, 4}, rng);
    Tensor b = gradcheck::random_leaf({4, 2}, rng);
    Tensor c = gradcheck::random_leaf({3, 2}, rng);
    std::vector<Tensor> leaves{a, b, c};
    auto res = gradcheck::check(
        [](std::vector<Tensor>& ls) {
          return sum(mul(tanh(matmul(ls[0], ls[1])), ls[2]));
        },
        leaves);
    CHECK(res.max_rel_error < 1e-3);
  }
}

TEST_CASE("gradient determinism is bit exact") {
  std::mt19937 rng(9);
  auto vals_a = gradcheck::random_values(12, rng);
  auto vals_b = gradcheck::random_values(8, rng);
  std::vector<std::vector<float>> grads;
  for (int run = 0; run < 2; ++run) {
    Tensor a = Tensor::of({3, 4}, vals_a, true);
    Tensor b = Tensor::of({4, 2}, vals_b, true);
    backward(sum(gelu(matmul(a, b))));
    grads.push_back(a.grad());
    auto g = b.grad();
    grads.back().insert(grads.back().end(), g.begin(), g.end());
  }
  CHECK(std::memcmp(grads[0].data(), grads[1].data(), grads[0].size() * sizeof(float)) == 0);
}

TEST_CASE("every primitive passes finite-difference checks") {
  std::mt19937 rng(10);
  auto run = [&](const char* name, const gradcheck::LossFn& fn, std::vector<Tensor> leaves) {
    auto res = gradcheck::check(fn, leaves);
    INFO(name << " max rel err " << res.max_rel_error << " (analytic " << res.worst_analytic
              << ", numeric " << res.worst_numeric << ")");
    CHECK(res.max_rel_error < 1e-3);
  };

  for (int trial = 0; trial < 5; ++trial) {
    Shape s = gradcheck::random_shape(rng);
    Tensor w = probe(s, rng);
    run("add", [&](auto& ls) { return weighted(add(ls[0], ls[1]), w); },
        {gradcheck::random_leaf(s, rng), gradcheck::random_leaf(s, rng)});
    run("sub", [&](auto& ls) { return weighted(sub(ls[0], ls[1]), w); },
        {gradcheck::random_leaf(s, rng), gradcheck::random_leaf(s, rng)});
    run("mul", [&](auto& ls) { return weighted(mul(ls[0], ls[1]), w); },
        {gradcheck::random_leaf(s, rng), gradcheck::random_leaf(s, rng)});
    run("scale", [&](auto& ls) { return weighted(scale(ls[0], -1.7f), w); },
        {gradcheck::random_leaf(s, rng)});
    run("exp", [&](auto& ls) { return weighted(exp(ls[0]), w); },
        {gradcheck::random_leaf(s, rng)});
    run("log", [&](auto& ls) { return weighted(log(ls[0]), w); },
        {gradcheck::random_leaf(s, rng, 0.5f, 2.0f)});
    run("tanh", [&](auto& ls) { return weighted(tanh(ls[0]), w); },
        {gradcheck::random_leaf(s, rng)});
    run("gelu", [&](auto& ls) { return weighted(gelu(ls[0]), w); },
        {gradcheck::random_leaf(s, rng)});
    run("mean", [&](auto& ls) { return mean(ls[0]); }, {gradcheck::random_leaf(s, rng)});
    run("sum", [&](auto& ls) { return sum(ls[0]); }, {gradcheck::random_leaf(s, rng)});

    int axis = std::uniform_int_distribution<int>(0, static_cast<int>(s.size()) - 1)(rng);
    Shape reduced = s;
    reduced.erase(reduced.begin() + axis);
    Tensor wr = probe(reduced, rng);
    run("sum_axis", [&](auto& ls) { return weighted(sum_axis(ls[0], axis), wr); },
        {gradcheck::random_leaf(s, rng)});
    run("softmax", [&](auto& ls) { return weighted(softmax(ls[0], axis), w); },
        {gradcheck::random_leaf(s, rng)});
    run("log_softmax", [&](auto& ls) { return weighted(log_softmax(ls[0], axis), w); },
        {gradcheck::random_leaf(s, rng)});
    run("layer_norm", [&](auto& ls) { return weighted(layer_norm(ls[0], axis), w); },
        {gradcheck::random_leaf(s, rng)});

    int stack_axis = std::uniform_int_distribution<int>(0, static_cast<int>(s.size()))(rng);
    Shape stacked = s;
    stacked.insert(stacked.begin() + stack_axis, 2);
    Tensor ws = probe(stacked, rng);
    run("stack",
        [&](auto& ls) { return weighted(stack({ls[0], ls[1]}, stack_axis), ws); },
        {gradcheck::random_leaf(s, rng), gradcheck::random_leaf(s, rng)});

    run("reshape",
        [&](auto& ls) {
          return weighted(reshape(ls[0], {static_cast<int>(shape_numel(s))}),
                          reshape(w, {static_cast<int>(shape_numel(s))}));
        },
        {gradcheck::random_leaf(s, rng)});
  }

  // ops with fixed-rank contracts
  for (int trial = 0; trial < 5; ++trial) {
    Tensor w2 = probe({3, 2}, rng);
    run("matmul", [&](auto& ls) { return weighted(matmul(ls[0], ls[1]), w2); },
        {gradcheck::random_leaf({3, 4}, rng), gradcheck::random_leaf({4, 2}, rng)});
    Tensor w3 = probe({2, 3, 2}, rng);
    run("bmm", [&](auto& ls) { return weighted(bmm(ls[0], ls[1]), w3); },
        {gradcheck::random_leaf({2, 3, 4}, rng), gradcheck::random_leaf({2, 4, 2}, rng)});
    Tensor wt = probe({4, 3}, rng);
    run("transpose", [&](auto& ls) { return weighted(transpose(ls[0]), wt); },
        {gradcheck::random_leaf({3, 4}, rng)});
    Tensor wp = probe({4, 2, 3}, rng);
    run("permute", [&](auto& ls) { return weighted(permute(ls[0], {2, 0, 1}), wp); },
        {gradcheck::random_leaf({2, 3, 4}, rng)});
    Tensor wg = probe({4, 3}, rng);
    run("gather_rows",
        [&](auto& ls) { return weighted(gather_rows(ls[0], {0, 2, 2, 4}), wg); },
        {gradcheck::random_leaf({5, 3}, rng)});
    Tensor wsel = probe({2, 4}, rng);
    run("select", [&](auto& ls) { return weighted(select(ls[0], 1, 1), wsel); },
        {gradcheck::random_leaf({2, 3, 4}, rng)});
    Tensor wv = probe({3, 4}, rng);
    run("mul_vec", [&](auto& ls) { return weighted(mul_vec(ls[0], ls[1]), wv); },
        {gradcheck::random_leaf({3, 4}, rng), gradcheck::random_leaf({4}, rng)});
    run("add_vec", [&](auto& ls) { return weighted(add_vec(ls[0], ls[1]), wv); },
        {gradcheck::random_leaf({3, 4}, rng), gradcheck::random_leaf({4}, rng)});
    Tensor wb = probe({2, 3, 4}, rng);
    run("bcast_mul", [&](auto& ls) { return weighted(bcast_mul(ls[0], ls[1]), wb); },
        {gradcheck::random_leaf({2, 3, 4}, rng), gradcheck::random_leaf({2, 4}, rng)});
  }
}

TEST_CASE("dropout semantics") {
  std::mt19937 rng(11);
  Tensor x = gradcheck::random_leaf({200}, rng);
  // p = 0 is the identity
  auto same = dropout(x, 0.0f, rng);
  CHECK(same.values() == x.values());

  auto y = dropout(x, 0.5f, rng);
  int zeros = 0;
  for (int64_t i = 0; i < y.size(); ++i) {
    if (y.values()[i] == 0.0f) {
      ++zeros;
    } else {
      CHECK(y.values()[i] == doctest::Approx(2.0f * x.values()[i]).epsilon(1e-6));
    }
  }
  CHECK(zeros > 50);
  CHECK(zeros < 150);

  // gradient equals the applied mask
  x.zero_grad();
  backward(sum(y));
  for (int64_t i = 0; i < x.size(); ++i) {
    const float expect = (y.values()[i] == 0.0f && x.values()[i] != 0.0f) ? 0.0f : 2.0f;
    CHECK(x.grad()[i] == doctest::Approx(expect));
  }

  CHECK_THROWS_AS(dropout(x, 1.0f, rng), ConfigError);
}

TEST_CASE("no-grad mode suppresses graph recording") {
  std::mt19937 rng(12);
  Tensor x = gradcheck::random_leaf({3}, rng);
  {
    NoGradGuard guard;
    auto y = mul(x, x);
    CHECK_FALSE(y.tracked());
  }
  auto y = mul(x, x);
  CHECK(y.tracked());
}

TEST_CASE("gather_rows rejects out-of-range indices") {
  Tensor table = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(gather_rows(table, {0, 4}), DataError);
  CHECK_THROWS_AS(gather_rows(table, {-1}), DataError);
}

TEST_CASE("stack handles repeated inputs") {
  Tensor x = Tensor::of({2}, {1.0f, 2.0f}, true);
  auto s = stack({x, x, x}, 0);
  CHECK(s.shape() == Shape{3, 2});
  backward(sum(s));
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(3.0));
}
