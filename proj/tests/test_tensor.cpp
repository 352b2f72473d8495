#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "remedi/tensor.hpp"

using namespace remedi;
using remedi::testing::grad_check;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, scale);
  return t;
}

// Probability vector bounded away from zero so KL stays smooth.
Tensor random_distribution(int n, Rng& rng) {
  Tensor t = Tensor::zeros({n});
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    t.data()[i] = 0.05 + rng.uniform_real();
    s += t.data()[i];
  }
  for (int i = 0; i < n; ++i) t.data()[i] /= s;
  return t;
}

}  // namespace

TEST_CASE("matmul identity and zero") {
  Graph g(false);
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor zero = Tensor::zeros({2, 2});
  Tensor ai = matmul(g, a, eye);
  CHECK(bitwise_equal(ai, a));
  Tensor az = matmul(g, a, zero);
  for (int i = 0; i < 4; ++i) CHECK(az.at(i) == 0.0);
}

TEST_CASE("matmul matches naive triple loop oracle") {
  Rng rng(71);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Graph g(false);
  Tensor c = matmul(g, a, b);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
      CHECK(std::abs(c.at(i, j) - s) <= 1e-12);
    }
  }
}

TEST_CASE("matmul shape error names both shapes") {
  Graph g(false);
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_WITH_AS(matmul(g, a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("elementwise basics") {
  Graph g(false);
  Tensor x = Tensor::from({3}, {1, 2, 3});
  Tensor zero = Tensor::scalar(0.0);
  CHECK(bitwise_equal(add(g, x, zero), x));
  Tensor y = Tensor::from({3}, {4, 5, 6});
  Tensor m = mul(g, x, y);
  CHECK(m.at(0) == 4.0);
  CHECK(m.at(1) == 10.0);
  CHECK(m.at(2) == 18.0);
  CHECK_THROWS_AS(add(g, x, Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("gelu fixes zero") {
  Graph g(false);
  Tensor z = Tensor::scalar(0.0);
  CHECK(gelu(g, z).item() == 0.0);
}

TEST_CASE("softmax symmetry, saturation, high-precision oracle") {
  Graph g(false);
  Tensor s = softmax(g, Tensor::from({2}, {0, 0}), 0);
  CHECK(s.at(0) == doctest::Approx(0.5).epsilon(1e-15));

  Tensor sat = softmax(g, Tensor::from({2}, {1000, 0}), 0);
  CHECK(std::abs(sat.at(0) - 1.0) <= 1e-12);
  CHECK(std::abs(sat.at(1) - 0.0) <= 1e-12);

  Tensor v = softmax(g, Tensor::from({3}, {1, 2, 3}), 0);
  long double z = 0.0L;
  for (int i = 1; i <= 3; ++i) z += expl(static_cast<long double>(i));
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(v.at(i) - static_cast<double>(expl(static_cast<long double>(i + 1)) / z)) <= 1e-15);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(5);
  Graph g(false);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({4, 7}, rng, 10.0);
    Tensor y = softmax(g, x, 1);
    for (int r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int c = 0; c < 7; ++c) {
        s += y.at(r, c);
        CHECK(y.at(r, c) >= 0.0);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("layer_norm examples") {
  Graph g(false);
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});

  Tensor constant = Tensor::full({1, 4}, 3.25);
  Tensor yc = layer_norm(g, constant, gain, bias, 1e-5);
  for (int i = 0; i < 4; ++i) CHECK(yc.at(i) == doctest::Approx(0.0));

  Tensor pm = Tensor::from({1, 2}, {1, -1});
  Tensor ypm = layer_norm(g, pm, Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-12);
  CHECK(ypm.at(0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ypm.at(1) == doctest::Approx(-1.0).epsilon(1e-9));

  Rng rng(7);
  Tensor x = random_tensor({1, 8}, rng, 2.0);
  double eps = 1e-5;
  Tensor y = layer_norm(g, x, Tensor::full({8}, 1.0), Tensor::zeros({8}), eps);
  double mu = 0.0;
  for (int i = 0; i < 8; ++i) mu += x.at(i);
  mu /= 8;
  double var = 0.0;
  for (int i = 0; i < 8; ++i) var += (x.at(i) - mu) * (x.at(i) - mu);
  var /= 8;
  for (int i = 0; i < 8; ++i)
    CHECK(y.at(i) == doctest::Approx((x.at(i) - mu) / std::sqrt(var + eps)).epsilon(1e-12));

  CHECK_THROWS_AS(layer_norm(g, x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 0.0), std::invalid_argument);
}

TEST_CASE("layer_norm normalizes rows to zero mean unit variance") {
  Rng rng(11);
  Graph g(false);
  Tensor x = random_tensor({6, 16}, rng, 3.0);
  Tensor y = layer_norm(g, x, Tensor::full({16}, 1.0), Tensor::zeros({16}), 1e-9);
  for (int r = 0; r < 6; ++r) {
    double mu = 0.0, var = 0.0;
    for (int c = 0; c < 16; ++c) mu += y.at(r, c);
    mu /= 16;
    for (int c = 0; c < 16; ++c) var += (y.at(r, c) - mu) * (y.at(r, c) - mu);
    var /= 16;
    CHECK(std::abs(mu) <= 1e-9);
    CHECK(std::abs(var - 1.0) <= 1e-6);
  }
}

TEST_CASE("cross_entropy examples") {
  Graph g(false);
  Tensor uniform = Tensor::zeros({1, 4});
  CHECK(cross_entropy(g, uniform, {2}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor hot = Tensor::zeros({1, 5});
  hot.mut(0, 3) = 1e6;
  CHECK(std::abs(cross_entropy(g, hot, {3}).item()) <= 1e-9);

  Rng rng(13);
  Tensor logits = random_tensor({3, 6}, rng, 2.0);
  std::vector<int> targets = {1, 5, 0};
  double expect = 0.0;
  for (int r = 0; r < 3; ++r) {
    Tensor p = softmax(g, row(g, logits, r), 0);
    expect += -std::log(p.at(targets[static_cast<size_t>(r)]));
  }
  expect /= 3;
  CHECK(cross_entropy(g, logits, targets).item() == doctest::Approx(expect).epsilon(1e-12));

  CHECK_THROWS_AS(cross_entropy(g, logits, {1, 2, 6}), std::out_of_range);
}

TEST_CASE("kl_div identities and clamping") {
  Graph g(false);
  Tensor p = Tensor::from({3}, {0.2, 0.5, 0.3});
  CHECK(kl_div(g, p, p).item() == doctest::Approx(0.0));

  Tensor certain = Tensor::from({2}, {1.0, 0.0});
  Tensor even = Tensor::from({2}, {0.5, 0.5});
  CHECK(kl_div(g, certain, even).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    Tensor a = random_distribution(8, rng);
    Tensor b = random_distribution(8, rng);
    long double expect = 0.0L;
    for (int i = 0; i < 8; ++i)
      expect += static_cast<long double>(a.at(i)) * logl(static_cast<long double>(a.at(i)) / b.at(i));
    Tensor kl = kl_div(g, a, b);
    CHECK(std::abs(kl.item() - static_cast<double>(expect)) <= 1e-12);
    CHECK(kl.item() >= 0.0);
  }

  // q == 0 where p > 0 gets clamped and flagged
  int before = g.kl_clamp_events();
  Tensor q0 = Tensor::from({2}, {0.0, 1.0});
  Tensor kl = kl_div(g, certain, q0);
  CHECK(g.kl_clamp_events() == before + 1);
  CHECK(kl.item() == doctest::Approx(std::log(1.0 / kKlClampFloor)));

  CHECK_THROWS_AS(kl_div(g, Tensor::from({2}, {0.7, 0.7}), even), std::invalid_argument);
}

TEST_CASE("backward analytic examples") {
  // loss = sum(x * x) at x = [1,2,3] -> grad [2,4,6]
  Graph g;
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tensor loss = sum(g, mul(g, x, x));
  g.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
  CHECK(x.grad()[2] == doctest::Approx(6.0));

  // disconnected leaf gets explicit zeros
  Graph g2;
  Tensor a = Tensor::from({2}, {1, 1}, true);
  Tensor b = Tensor::from({2}, {3, 4}, true);
  Tensor keep = mul(g2, b, b);   // a participates in no op leading to loss
  Tensor unused = mul(g2, a, a);
  Tensor loss2 = sum(g2, keep);
  g2.backward(loss2);
  REQUIRE(a.has_grad());
  CHECK(a.grad()[0] == 0.0);
  CHECK(a.grad()[1] == 0.0);
  (void)unused;

  Graph g3;
  CHECK_THROWS_AS(g3.backward(Tensor::zeros({2})), std::invalid_argument);
}

TEST_CASE("gradient oracle: every differentiable op vs central differences") {
  Rng rng(2024);
  int cases = 0;
  double worst = 0.0;
  auto run = [&](const std::function<Tensor(Graph&, std::vector<Tensor>&)>& f, std::vector<Tensor> ins) {
    auto res = grad_check(f, std::move(ins));
    worst = std::max(worst, res.max_rel_err);
    ++cases;
    CHECK(res.max_rel_err <= 1e-4);
  };

  for (int rep = 0; rep < 10; ++rep) {
    run([](Graph& g, std::vector<Tensor>& in) { return sum(g, matmul(g, in[0], in[1])); },
        {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) { return sum(g, matvec(g, in[0], in[1])); },
        {random_tensor({3, 5}, rng), random_tensor({5}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) { return sum(g, mul(g, add(g, in[0], in[1]), sub(g, in[0], in[1]))); },
        {random_tensor({6}, rng), random_tensor({6}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) { return sum(g, mul(g, in[0], in[1])); },
        {random_tensor({1}, rng), random_tensor({5}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) { return sum(g, scale(g, gelu(g, in[0]), 1.7)); },
        {random_tensor({7}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) { return sum(g, log_op(g, softmax(g, in[0], 0))); },
        {random_tensor({6}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) {
          Tensor sm = softmax(g, in[0], 1);
          return sum(g, mul(g, sm, in[1]));
        },
        {random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) {
          Tensor y = layer_norm(g, in[0], in[1], in[2], 1e-5);
          return sum(g, mul(g, y, y));
        },
        {random_tensor({2, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) { return cross_entropy(g, in[0], {1, 3, 0}); },
        {random_tensor({3, 4}, rng)});
    run([&](Graph& g, std::vector<Tensor>& in) {
          Tensor p = softmax(g, in[0], 0);
          Tensor q = softmax(g, in[1], 0);
          return kl_div(g, p, q);
        },
        {random_tensor({6}, rng), random_tensor({6}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) {
          Tensor e = embedding(g, in[0], {0, 2, 1, 2});
          return sum(g, mul(g, e, e));
        },
        {random_tensor({3, 4}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) { return sum(g, mul(g, add_rowwise(g, in[0], in[1]), in[2])); },
        {random_tensor({3, 4}, rng), random_tensor({4}, rng), random_tensor({3, 4}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) {
          Tensor o = causal_attention(g, in[0], in[1], in[2], 1, 4, 2);
          return sum(g, mul(g, o, o));
        },
        {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng), random_tensor({4, 6}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) {
          Tensor o = causal_attention(g, in[0], in[1], in[2], 2, 3, 1);
          return sum(g, o);
        },
        {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) {
          Tensor r = row(g, in[0], 1);
          return index(g, softmax(g, r, 0), 2);
        },
        {random_tensor({3, 5}, rng)});
    run([](Graph& g, std::vector<Tensor>& in) {
          Tensor sp = row_splice(g, in[0], in[1], 2);
          return sum(g, mul(g, sp, sp));
        },
        {random_tensor({4, 3}, rng), random_tensor({3}, rng)});
  }
  // composite: softmax over matmul output vs finite differences
  for (int rep = 0; rep < 5; ++rep) {
    run([](Graph& g, std::vector<Tensor>& in) {
          Tensor prod = matmul(g, in[0], in[1]);
          Tensor p = softmax(g, prod, 1);
          return index(g, row(g, p, 0), 0);
        },
        {random_tensor({2, 3}, rng), random_tensor({3, 4}, rng)});
  }
  CHECK(cases >= 100);
  MESSAGE("gradient oracle cases=", cases, " worst rel err=", worst);
}

TEST_CASE("determinism: same seed gives bit-identical values and grads") {
  auto build = [](uint64_t seed) {
    Rng rng(seed);
    Tensor a = random_tensor({8, 8}, rng);
    a.set_requires_grad(true);
    Tensor b = random_tensor({8, 8}, rng);
    Graph g;
    Tensor out = gelu(g, matmul(g, a, b));
    Tensor loss = sum(g, mul(g, out, out));
    g.backward(loss);
    return std::pair<Tensor, std::vector<double>>(out, a.grad());
  };
  auto [o1, g1] = build(99);
  auto [o2, g2] = build(99);
  CHECK(bitwise_equal(o1, o2));
  CHECK(g1 == g2);
}

TEST_CASE("grad accumulates across backward calls") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  for (int i = 0; i < 2; ++i) {
    Graph g;
    Tensor loss = sum(g, mul(g, x, x));
    g.backward(loss);
  }
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  CHECK(x.grad()[1] == doctest::Approx(8.0));
}
