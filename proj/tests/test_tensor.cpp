#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "aclip/tensor.hpp"

using namespace aclip;
using nd::Tensor;
using Catch::Approx;

namespace {

Tensor<double> t2(std::initializer_list<std::int64_t> shape,
                  std::initializer_list<double> vals, bool grad = false) {
  return Tensor<double>(Shape(shape), std::vector<double>(vals), grad);
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  auto eye = t2({2, 2}, {1, 0, 0, 1});
  auto m = t2({2, 2}, {3, 4, 5, 6});
  auto r = nd::matmul(eye, m);
  REQUIRE(r.data() == std::vector<double>{3, 4, 5, 6});

  auto a = t2({1, 2}, {1, 2});
  auto b = t2({2, 1}, {3, 4});
  REQUIRE(nd::matmul(a, b).item() == Approx(11.0).margin(0));
}

TEST_CASE("matmul shape errors name both shapes") {
  auto a = t2({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = t2({2, 2}, {1, 2, 3, 4});
  REQUIRE_THROWS_WITH(nd::matmul(a, b),
                      Catch::Matchers::ContainsSubstring("[2,3]") &&
                          Catch::Matchers::ContainsSubstring("[2,2]"));
}

TEST_CASE("matmul gradient of sum(A*B) wrt A equals ones*B^T") {
  Rng rng(7);
  std::vector<double> av(6), bv(12);
  for (auto& v : av) v = rng.normal();
  for (auto& v : bv) v = rng.normal();
  Tensor<double> a({2, 3}, av, true);
  Tensor<double> bmat({3, 4}, bv, false);

  auto f = [&] { return nd::sum_all(nd::matmul(a, bmat)); };
  const double err = nd::grad_check<double>(f, {a}, 1e-5);
  REQUIRE(err < 1e-8);

  // closed form: dA = ones(2,4) * B^T
  a.zero_grad();
  f().backward();
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) {
      double expect = 0.0;
      for (int k = 0; k < 4; ++k) expect += bv[static_cast<std::size_t>(j * 4 + k)];
      REQUIRE(a.grad()[static_cast<std::size_t>(i * 3 + j)] ==
              Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("batched matmul broadcasts a shared rhs") {
  Rng rng(3);
  std::vector<double> av(2 * 3 * 4), bv(4 * 2);
  for (auto& v : av) v = rng.normal();
  for (auto& v : bv) v = rng.normal();
  Tensor<double> a({2, 3, 4}, av, true);
  Tensor<double> b({4, 2}, bv, true);
  auto y = nd::matmul(a, b);
  REQUIRE(y.shape() == Shape{2, 3, 2});
  auto f = [&] { return nd::sum_all(nd::square(nd::matmul(a, b))); };
  REQUIRE(nd::grad_check<double>(f, {a, b}, 1e-5) < 1e-6);
}

TEST_CASE("softmax values") {
  auto r1 = nd::softmax(t2({2}, {0, 0}), 0);
  REQUIRE(r1.data()[0] == Approx(0.5).margin(1e-15));

  auto r2 = nd::softmax(t2({3}, {1000, 1000, 1000}), 0);
  for (double v : r2.data()) REQUIRE(v == Approx(1.0 / 3).margin(1e-12));

  auto r3 = nd::softmax(t2({2}, {0.0, std::log(3.0)}), 0);
  REQUIRE(r3.data()[0] == Approx(0.25).margin(1e-12));
  REQUIRE(r3.data()[1] == Approx(0.75).margin(1e-12));
}

TEST_CASE("softmax rows sum to one for any finite input") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(12);
    for (auto& x : v) x = rng.uniform(-1e3, 1e3);
    Tensor<double> t({3, 4}, v, false);
    auto s = nd::softmax(t, -1);
    for (int r = 0; r < 3; ++r) {
      double sum = 0.0;
      for (int c = 0; c < 4; ++c) sum += s.data()[static_cast<std::size_t>(r * 4 + c)];
      REQUIRE(sum == Approx(1.0).margin(1e-6));
    }
  }
}

TEST_CASE("softmax propagates NaN") {
  auto s = nd::softmax(t2({2}, {std::nan(""), 0.0}), 0);
  REQUIRE(std::isnan(s.data()[0]));
}

TEST_CASE("layer_norm values and gradient") {
  auto gain = Tensor<double>::full({3}, 1.0);
  auto bias = Tensor<double>::zeros({3});
  auto constant = nd::layer_norm(t2({1, 3}, {5, 5, 5}), gain, bias);
  for (double v : constant.data()) REQUIRE(v == Approx(0.0).margin(1e-9));

  auto g2 = Tensor<double>::full({2}, 1.0);
  auto b2 = Tensor<double>::zeros({2});
  auto pm = nd::layer_norm(t2({1, 2}, {1, -1}), g2, b2);
  REQUIRE(pm.data()[0] == Approx(1.0).epsilon(1e-5));
  REQUIRE(pm.data()[1] == Approx(-1.0).epsilon(1e-5));

  Rng rng(5);
  std::vector<double> xv(8), gv(4), bv(4);
  for (auto& v : xv) v = rng.normal();
  for (auto& v : gv) v = 1.0 + 0.1 * rng.normal();
  for (auto& v : bv) v = 0.1 * rng.normal();
  Tensor<double> x({2, 4}, xv, true);
  Tensor<double> g({4}, gv, true);
  Tensor<double> b({4}, bv, true);
  auto f = [&] { return nd::sum_all(nd::square(nd::layer_norm(x, g, b))); };
  REQUIRE(nd::grad_check<double>(f, {x, g, b}, 1e-5) < 1e-6);
}

TEST_CASE("gelu values and gradient at x=1") {
  REQUIRE(nd::gelu(t2({1}, {0.0})).item() == 0.0);

  Tensor<double> x({1}, {1.0}, true);
  auto f = [&] { return nd::sum_all(nd::gelu(x)); };
  REQUIRE(nd::grad_check<double>(f, {x}, 1e-5) < 1e-7);
}

TEST_CASE("gather selects and rejects out-of-range") {
  auto x = t2({3, 1}, {10, 20, 30});
  auto g = nd::gather(x, {2, 0}, 0);
  REQUIRE(g.data() == std::vector<double>{30, 10});
  REQUIRE_THROWS_AS(nd::gather(x, {3}, 0), IndexError);
  REQUIRE_THROWS_AS(nd::gather(x, {-1}, 0), IndexError);
}

TEST_CASE("gather then scatter-add reconstructs index multiplicity") {
  Tensor<double> x({4}, {0, 0, 0, 0}, true);
  const std::vector<std::int64_t> idx{0, 2, 2, 3, 2};
  auto f = [&] { return nd::sum_all(nd::gather(x, idx, 0)); };
  f().backward();
  // gradient of sum of gathered = multiplicity of each index
  REQUIRE(x.grad() == std::vector<double>{1, 0, 3, 1});
}

TEST_CASE("gather_rows per-batch selection and gradient") {
  Tensor<double> x({2, 3, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, true);
  std::vector<std::vector<int>> idx{{2}, {0}};
  auto g = nd::gather_rows(x, idx);
  REQUIRE(g.shape() == Shape{2, 1, 2});
  REQUIRE(g.data() == std::vector<double>{5, 6, 7, 8});
  auto f = [&] { return nd::sum_all(nd::square(nd::gather_rows(x, idx))); };
  REQUIRE(nd::grad_check<double>(f, {x}, 1e-5) < 1e-6);
}

TEST_CASE("reduce sum, mean, max with gradients") {
  Tensor<double> x({2, 3}, {1, 5, 3, 2, 2, 8}, true);
  REQUIRE(nd::reduce(x, 1, nd::Reduce::Sum).data() == std::vector<double>{9, 12});
  REQUIRE(nd::reduce(x, 1, nd::Reduce::Mean).data() == std::vector<double>{3, 4});
  REQUIRE(nd::reduce(x, 1, nd::Reduce::Max).data() == std::vector<double>{5, 8});
  REQUIRE(nd::reduce(x, 0, nd::Reduce::Max).data() == std::vector<double>{2, 5, 8});

  auto f = [&] {
    return nd::sum_all(nd::square(nd::reduce(x, 1, nd::Reduce::Mean)));
  };
  REQUIRE(nd::grad_check<double>(f, {x}, 1e-5) < 1e-6);
}

TEST_CASE("concat and transpose round trip with gradients") {
  Tensor<double> a({1, 2}, {1, 2}, true);
  Tensor<double> b({2, 2}, {3, 4, 5, 6}, true);
  auto c = nd::concat<double>({a, b}, 0);
  REQUIRE(c.shape() == Shape{3, 2});
  REQUIRE(c.data() == std::vector<double>{1, 2, 3, 4, 5, 6});

  auto tt = nd::transpose_last(c);
  REQUIRE(tt.shape() == Shape{2, 3});
  REQUIRE(tt.data() == std::vector<double>{1, 3, 5, 2, 4, 6});

  auto f = [&] {
    return nd::sum_all(nd::square(nd::transpose_last(nd::concat<double>({a, b}, 0))));
  };
  REQUIRE(nd::grad_check<double>(f, {a, b}, 1e-5) < 1e-6);
}

TEST_CASE("elementwise and broadcasting helpers differentiate") {
  Rng rng(13);
  std::vector<double> xv(6), yv(6), bv(3), sv(2);
  for (auto& v : xv) v = rng.normal();
  for (auto& v : yv) v = 1.5 + rng.uniform();  // keep div/log/sqrt well-posed
  for (auto& v : bv) v = rng.normal();
  for (auto& v : sv) v = 1.0 + rng.uniform();
  Tensor<double> x({2, 3}, xv, true);
  Tensor<double> y({2, 3}, yv, true);
  Tensor<double> b({3}, bv, true);
  Tensor<double> s({2}, sv, true);
  Tensor<double> tau = Tensor<double>::scalar(0.3, true);

  auto f = [&] {
    auto e = nd::add(nd::mul(x, y), nd::div(x, y));
    e = nd::add_bias(e, b);
    e = nd::scale_rows(nd::reshape(e, Shape{2, 3}), s);
    e = nd::scale_by(e, nd::reciprocal(tau));
    auto t = nd::add(nd::tanh(x), nd::gelu(x));
    auto l = nd::log(nd::add_scalar(nd::square(y), 1.0));
    auto q = nd::sqrt(nd::add_scalar(nd::square(x), 0.5));
    return nd::add(nd::sum_all(e),
                   nd::add(nd::sum_all(nd::mul(t, l)), nd::sum_all(q)));
  };
  REQUIRE(nd::grad_check<double>(f, {x, y, b, s, tau}, 1e-5) < 1e-6);
}

TEST_CASE("log_sum_exp matches log of softmax denominator and differentiates") {
  Tensor<double> x({2, 3}, {1, 2, 3, -1, 0, 1.5}, true);
  auto lse = nd::log_sum_exp(x, 1);
  const double expect =
      std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  REQUIRE(lse.data()[0] == Approx(expect).epsilon(1e-12));
  auto f = [&] { return nd::sum_all(nd::log_sum_exp(x, 1)); };
  REQUIRE(nd::grad_check<double>(f, {x}, 1e-5) < 1e-6);
}

TEST_CASE("softmax gradient passes a finite-difference check") {
  Rng rng(23);
  std::vector<double> v(8);
  for (auto& x : v) x = rng.normal();
  Tensor<double> x({2, 4}, v, true);
  Tensor<double> w({2, 4}, {0.3, -1, 2, 0.7, 1.1, 0.2, -0.5, 0.9}, false);
  auto f = [&] { return nd::sum_all(nd::mul(nd::softmax(x, -1), w)); };
  REQUIRE(nd::grad_check<double>(f, {x}, 1e-5) < 1e-6);
}

TEST_CASE("expand and axis swap differentiate") {
  Rng rng(29);
  std::vector<double> v(6);
  for (auto& x : v) x = rng.normal();
  Tensor<double> x({3, 2}, v, true);
  auto f = [&] {
    auto e = nd::expand_dim0(x, 4);                       // [4,3,2]
    auto r = nd::reshape(e, Shape{2, 2, 3, 2});           // [B,S,H,C]
    return nd::sum_all(nd::square(nd::swap_axes12(r)));
  };
  REQUIRE(nd::grad_check<double>(f, {x}, 1e-5) < 1e-6);
}

TEST_CASE("embedding lookup differentiates into the table") {
  Tensor<double> table({4, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, true);
  auto f = [&] {
    return nd::sum_all(nd::square(nd::embedding_lookup(table, {1, 1, 3})));
  };
  REQUIRE(nd::grad_check<double>(f, {table}, 1e-5) < 1e-6);
}

TEST_CASE("stop_gradient blocks flow") {
  Tensor<double> x({2}, {1, 2}, true);
  auto y = nd::sum_all(nd::mul(nd::stop_gradient(x), x));
  y.backward();
  // d/dx (c * x) = c, where c are the stopped values
  REQUIRE(x.grad() == std::vector<double>{1, 2});
}

TEST_CASE("grad_check on sum of squares is tight") {
  Tensor<double> x({2}, {1, 2}, true);
  auto f = [&] { return nd::sum_all(nd::square(x)); };
  REQUIRE(nd::grad_check<double>(f, {x}, 1e-5) < 1e-8);

  x.zero_grad();
  f().backward();
  REQUIRE(x.grad()[0] == Approx(2.0).margin(1e-12));
  REQUIRE(x.grad()[1] == Approx(4.0).margin(1e-12));
}

TEST_CASE("grad_check on softmax cross-entropy of a 3-logit row") {
  Tensor<double> logits({1, 3}, {0.2, -1.3, 0.8}, true);
  // cross-entropy against class 2: lse(row) - logit[2]
  Tensor<double> pick({1, 3}, {0, 0, 1}, false);
  auto f = [&] {
    auto lse = nd::sum_all(nd::log_sum_exp(logits, 1));
    return nd::sub(lse, nd::sum_all(nd::mul(logits, pick)));
  };
  REQUIRE(nd::grad_check<double>(f, {logits}, 1e-5) < 1e-7);
}

TEST_CASE("ops are deterministic given identical inputs") {
  Rng rng(31);
  std::vector<double> av(64 * 32), bv(32 * 16);
  for (auto& v : av) v = rng.normal();
  for (auto& v : bv) v = rng.normal();
  auto run = [&] {
    Tensor<double> a({64, 32}, av, false);
    Tensor<double> b({32, 16}, bv, false);
    return nd::softmax(nd::matmul(a, b), -1).data();
  };
  auto r1 = run();
  auto r2 = run();
  REQUIRE(r1 == r2);  // bit-identical
}

TEST_CASE("backward visits fan-out once and accumulates additively") {
  Tensor<double> x({1}, {3.0}, true);
  auto y = nd::add(nd::square(x), nd::scale(x, 2.0));  // x^2 + 2x
  nd::sum_all(y).backward();
  REQUIRE(x.grad()[0] == Approx(2.0 * 3.0 + 2.0).margin(1e-12));
}

TEST_CASE("backward on non-scalar output is rejected") {
  Tensor<double> x({2}, {1, 2}, true);
  auto y = nd::square(x);
  REQUIRE_THROWS_AS(y.backward(), ShapeError);
}

TEST_CASE("grad access on a no-grad tensor is an error") {
  Tensor<double> x({2}, {1, 2}, false);
  REQUIRE_THROWS_AS(x.grad(), StructuralError);
}

TEST_CASE("reshape infers one extent and rejects mismatches") {
  Tensor<double> x({2, 6}, std::vector<double>(12, 1.0), false);
  REQUIRE(nd::reshape(x, Shape{3, -1}).shape() == Shape{3, 4});
  REQUIRE_THROWS_AS(nd::reshape(x, Shape{5, 2}), ShapeError);
}

TEST_CASE("no-grad mode suppresses graph construction") {
  Tensor<double> x({2}, {1, 2}, true);
  nd::NoGradGuard ng;
  auto y = nd::square(x);
  REQUIRE_FALSE(y.requires_grad());
}
