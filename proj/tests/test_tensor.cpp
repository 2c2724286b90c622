#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "oraclesage/errors.hpp"
#include "oraclesage/gradcheck.hpp"
#include "oraclesage/ops.hpp"
#include "oraclesage/tensor.hpp"
#include "support.hpp"

using namespace oraclesage;

TEST_SUITE("tensor") {

TEST_CASE("tensor shape and value invariants") {
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 6.0);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 2}, {}), DimensionError);
  CHECK_THROWS_AS(Tensor::matrix({{1, 2}, {3}}), DimensionError);
  CHECK_THROWS_AS(t.item(), ContractError);
  const Tensor copy = t;
  CHECK(copy.shares_storage(t));
  CHECK_FALSE(t.clone().shares_storage(t));
  CHECK(t.reshaped({3, 2}).shares_storage(t));
  CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
}

TEST_CASE("matmul examples") {
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(matmul(eye, m).to_vector() == m.to_vector());
  const Tensor proj = Tensor::matrix({{1, 0}, {0, 0}});
  CHECK(matmul(proj, Tensor::matrix({{5}, {7}})).to_vector() == std::vector<double>{5, 0});
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches independent central differences") {
  Rng rng(3);
  Tensor a = support::random_tensor({3, 4}, rng);
  Tensor b = support::random_tensor({4, 2}, rng);
  const Tensor w = support::random_tensor({3, 2}, rng, -1, 1, false);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(mul(matmul(a, b), w)));
  }
  auto f = [&] { return sum(mul(matmul(a, b), w)).item(); };
  CHECK(support::worst_rel_error(tape.grad_of(a).to_vector(), support::numeric_grad(a, f)) < 1e-4);
  CHECK(support::worst_rel_error(tape.grad_of(b).to_vector(), support::numeric_grad(b, f)) < 1e-4);
}

TEST_CASE("softmax examples") {
  const Tensor half = softmax(Tensor::vector({0, 0}), 0);
  CHECK(half[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(half[1] == doctest::Approx(0.5).epsilon(1e-15));
  const Tensor big = softmax(Tensor::vector({1000, 0}), 0);
  CHECK(big[0] == 1.0);
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);
  const Tensor s = softmax(Tensor::vector({1, 2, 3}), 0);
  const auto ref = oracle::softmax({1, 2, 3});
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(s[i] - ref[i]) < 1e-15);
}

TEST_CASE("softmax is row-stochastic for magnitudes up to 1e4") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng.below(5), cols = 1 + rng.below(9);
    const double scale = std::pow(10.0, rng.uniform(-2.0, 4.0));
    const Tensor x = support::random_tensor({rows, cols}, rng, -scale, scale, false);
    const Tensor p = softmax(x, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        CHECK(p.at(r, c) >= 0.0);
        total += p.at(r, c);
      }
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("layernorm examples and postcondition") {
  const Tensor gain = Tensor::vector({1, 1, 1});
  const Tensor bias = Tensor::vector({0, 0, 0});
  const Tensor flat = layernorm(Tensor::matrix({{5, 5, 5}}), gain, bias);
  for (double v : flat.values()) CHECK(v == 0.0);
  const Tensor pair = layernorm(Tensor::matrix({{1, -1}}), Tensor::vector({1, 1}), Tensor::vector({0, 0}));
  CHECK(std::abs(pair[0] - 1.0 / std::sqrt(1.0 + 1e-5)) < 1e-15);
  CHECK(std::abs(pair[1] + 1.0 / std::sqrt(1.0 + 1e-5)) < 1e-15);

  Rng rng(5);
  const Tensor x = support::random_tensor({6, 10}, rng, -3, 3, false);
  const Tensor y = layernorm(x, Tensor::filled({10}, 1.0), Tensor::zeros({10}));
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 10; ++c) mean += y.at(r, c) / 10.0;
    for (std::size_t c = 0; c < 10; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean) / 10.0;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);  // eps shrinks the variance slightly
  }
}

TEST_CASE("activation examples") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(leaky_relu(Tensor::scalar(-1.0), 0.2).item() == doctest::Approx(-0.2).epsilon(1e-15));
  CHECK(relu(Tensor::vector({-1, 2})).to_vector() == std::vector<double>{0, 2});
  CHECK(tanh(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(std::abs(gelu(Tensor::scalar(1.0)).item() - oracle::gelu(1.0)) < 1e-15);
}

TEST_CASE("dropout contract") {
  Rng rng(1);
  const Tensor x = Tensor::filled({100, 100}, 1.0);
  CHECK(dropout(x, 0.0, Mode::Train, rng).to_vector() == x.to_vector());
  CHECK(dropout(x, 0.5, Mode::Eval, rng).to_vector() == x.to_vector());
  const Tensor y = dropout(x, 0.5, Mode::Train, rng);
  double survivors = 0.0, mean = 0.0;
  for (double v : y.values()) {
    survivors += v != 0.0;
    mean += v / 1e4;
  }
  CHECK(std::abs(survivors / 1e4 - 0.5) <= 0.03);
  CHECK(std::abs(mean - 1.0) <= 0.05);
  Rng a(9), b(9);
  CHECK(dropout(x, 0.3, Mode::Train, a).to_vector() == dropout(x, 0.3, Mode::Train, b).to_vector());
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::Train, rng), ConfigError);
  CHECK_THROWS_AS(dropout(x, -0.1, Mode::Train, rng), ConfigError);
}

TEST_CASE("structural ops and norms") {
  const std::array<Tensor, 2> parts{Tensor::vector({1}), Tensor::vector({2})};
  CHECK(concat(parts, 0).to_vector() == std::vector<double>{1, 2});
  CHECK(frobenius_sq(Tensor::zeros({3, 3})).item() == 0.0);
  CHECK(l1_norm(Tensor::vector({-1, 2, 0})).item() == 3.0);
  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);

  Tensor x = Tensor::vector({-1.5, 0.0, 2.0});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(l1_norm(x));
  }
  CHECK(tape.grad_of(x).to_vector() == std::vector<double>{-1, 0, 1});
}

TEST_CASE("backward contract") {
  Tensor x = Tensor::vector({3});
  x.set_requires_grad(true);
  Tensor p = Tensor::vector({1, 2});
  p.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), ContractError);
    const Tensor loss = sum(mul(x, x));
    CHECK_THROWS_AS(tape.backward(concat({loss, loss}, 0)), ContractError);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
  }
  CHECK(tape.grad_of(x).to_vector() == std::vector<double>{6});
  CHECK(tape.grad_of(p).to_vector() == std::vector<double>{0, 0});
}

TEST_CASE("backward visits every node once and accumulates over fan-out") {
  Tensor x = Tensor::vector({1.5, -0.5});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    const Tensor y = mul(x, x);
    // y feeds three consumers.
    tape.backward(sum(add(add(y, y), affine(y, 2.0))));
  }
  CHECK(tape.last_backward_visits() == tape.num_records());
  CHECK(tape.grad_of(x).to_vector() == std::vector<double>{4 * 2 * 1.5, 4 * 2 * -0.5});
}

TEST_CASE("gradient of a sum of losses equals the sum of gradients") {
  Rng rng(21);
  Tensor w = support::random_tensor({4, 3}, rng);
  const Tensor a = support::random_tensor({2, 4}, rng, -2, 2, false);
  auto loss1 = [&] { return sum(tanh(matmul(a, w))); };
  auto loss2 = [&] { return frobenius_sq(gelu(matmul(a, w))); };
  Tape t1, t2, both;
  {
    TapeScope s(t1);
    t1.backward(loss1());
  }
  {
    TapeScope s(t2);
    t2.backward(loss2());
  }
  {
    TapeScope s(both);
    both.backward(add(loss1(), loss2()));
  }
  const auto g1 = t1.grad_of(w).to_vector(), g2 = t2.grad_of(w).to_vector(), g = both.grad_of(w).to_vector();
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - (g1[i] + g2[i])) <= 1e-12);
}

TEST_CASE("repeated forward and backward are bit-identical") {
  auto run = [] {
    Rng rng(77);
    Tensor w = support::random_tensor({5, 5}, rng);
    const Tensor x = support::random_tensor({3, 5}, rng, -1, 1, false);
    Rng drop(4);
    Tape tape;
    TapeScope s(tape);
    const Tensor loss = sum(dropout(softmax(matmul(x, w), 1), 0.2, Mode::Train, drop));
    tape.backward(loss);
    auto g = tape.grad_of(w).to_vector();
    g.push_back(loss.item());
    return g;
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite results are errors") {
  CHECK_THROWS_AS(affine(Tensor::scalar(1e308), 10.0), NumericError);
  CHECK_THROWS_AS(sum(Tensor::vector({std::nan("")})), NumericError);
}

TEST_CASE("no-grad scope suspends recording") {
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  {
    NoGradScope off;
    CHECK(active_tape() == nullptr);
    CHECK(mul(x, x).node() == kNoNode);
  }
  CHECK(active_tape() == &tape);
  CHECK(mul(x, x).node() != kNoNode);
}

TEST_CASE("every differentiable op passes its finite-difference suite") {
  for (const auto& name : op_names()) {
    CAPTURE(name);
    const auto rep = check_op(name);
    CAPTURE(rep.worst);
    CAPTURE(rep.worst_at);
    CHECK(rep.checked > 0);
    CHECK(rep.passed());
    CHECK(rep.tolerance == 1e-4);
  }
}

}  // TEST_SUITE
