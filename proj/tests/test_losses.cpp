#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "aclip/losses.hpp"

using namespace aclip;
using Catch::Approx;
using nd::Tensor;

namespace {

// rows of an identity-like orthonormal set
Tensor<double> one_hots(int b, int d, bool grad = false) {
  std::vector<double> v(static_cast<std::size_t>(b) * d, 0.0);
  for (int i = 0; i < b; ++i) v[static_cast<std::size_t>(i * d + i)] = 1.0;
  return Tensor<double>({b, d}, std::move(v), grad);
}

Tensor<double> unit_rows(int b, int d, std::uint64_t seed, bool grad = false) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(b) * d);
  for (int i = 0; i < b; ++i) {
    double n2 = 0.0;
    for (int j = 0; j < d; ++j) {
      const double x = rng.normal();
      v[static_cast<std::size_t>(i * d + j)] = x;
      n2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (int j = 0; j < d; ++j) v[static_cast<std::size_t>(i * d + j)] *= inv;
  }
  return Tensor<double>({b, d}, std::move(v), grad);
}

Tensor<double> tau_of(double v) { return Tensor<double>::scalar(v, false); }

// graph-free normalization for building differentiable unit rows in checks
Tensor<double> normalize_rows_graph(const Tensor<double>& z) {
  auto norms = nd::sqrt(nd::reduce(nd::square(z), -1, nd::Reduce::Sum));
  return nd::scale_rows(z, nd::reciprocal(norms));
}

constexpr double kLn4 = 1.3862943611198906;
constexpr double kLn3 = 1.0986122886681098;
constexpr double kLn1pExpM1 = 0.31326168751822286;  // ln(1 + e^-1)

}  // namespace

TEST_CASE("clip_loss: single pair is exactly zero") {
  auto e = one_hots(1, 4);
  REQUIRE(loss::clip_loss(e, e, tau_of(1.0)).item() == 0.0);
}

TEST_CASE("clip_loss: identical rows give ln B") {
  // all four rows identical: every similarity equals 1 -> uniform softmax
  std::vector<double> v;
  for (int i = 0; i < 4; ++i) {
    v.push_back(1.0);
    v.push_back(0.0);
  }
  Tensor<double> e({4, 2}, v, false);
  REQUIRE(loss::clip_loss(e, e, tau_of(0.5)).item() == Approx(kLn4).margin(1e-6));
}

TEST_CASE("clip_loss: orthonormal pairs at tau 1 give ln(1+e^-1)") {
  auto e = one_hots(2, 2);
  REQUIRE(loss::clip_loss(e, e, tau_of(1.0)).item() ==
          Approx(kLn1pExpM1).margin(1e-6));
}

TEST_CASE("clip_loss rejects non-unit rows and empty batches") {
  Tensor<double> bad({1, 2}, {3.0, 4.0}, false);
  auto ok = one_hots(1, 2);
  REQUIRE_THROWS_AS(loss::clip_loss(bad, ok, tau_of(1.0)), ContractError);
  REQUIRE_THROWS_AS(loss::clip_loss(ok, bad, tau_of(1.0)), ContractError);
}

TEST_CASE("clip_loss symmetry under role swap") {
  auto ei = unit_rows(5, 8, 3);
  auto et = unit_rows(5, 8, 4);
  const double a = loss::clip_loss(ei, et, tau_of(0.2)).item();
  const double b = loss::clip_loss(et, ei, tau_of(0.2)).item();
  REQUIRE(a == Approx(b).margin(1e-9));
}

TEST_CASE("clip_loss is positive for non-identical candidates and B >= 2") {
  auto ei = unit_rows(4, 8, 7);
  auto et = unit_rows(4, 8, 8);
  REQUIRE(loss::clip_loss(ei, et, tau_of(0.3)).item() > 0.0);
}

TEST_CASE("clip_loss permutation equivariance") {
  auto ei = unit_rows(4, 8, 11);
  auto et = unit_rows(4, 8, 12);
  const double base = loss::clip_loss(ei, et, tau_of(0.4)).item();

  const std::vector<std::int64_t> perm{2, 0, 3, 1};
  auto pi = nd::gather(ei, perm, 0);
  auto pt = nd::gather(et, perm, 0);
  REQUIRE(loss::clip_loss(pi, pt, tau_of(0.4)).item() == Approx(base).margin(1e-9));
}

TEST_CASE("clip_loss differentiates through embeddings and temperature") {
  Rng rng(19);
  std::vector<double> iv(8), tv(8);
  for (auto& x : iv) x = rng.normal();
  for (auto& x : tv) x = rng.normal();
  Tensor<double> raw_i({2, 4}, iv, true);
  Tensor<double> raw_t({2, 4}, tv, true);
  Tensor<double> log_tau = Tensor<double>::scalar(std::log(0.3), true);
  auto f = [&] {
    return loss::clip_loss(normalize_rows_graph(raw_i), normalize_rows_graph(raw_t),
                           loss::tau_from_log(log_tau));
  };
  REQUIRE(nd::grad_check<double>(f, {raw_i, raw_t, log_tau}, 1e-5) < 1e-6);
}

TEST_CASE("multi_view_clip_loss averages per-view losses") {
  auto e1 = unit_rows(3, 6, 21);
  auto e2 = unit_rows(3, 6, 22);
  auto et = unit_rows(3, 6, 23);
  auto tau = tau_of(0.3);

  auto single = loss::multi_view_clip_loss<double>({e1}, et, tau);
  REQUIRE(single.mean.item() == Approx(loss::clip_loss(e1, et, tau).item()).margin(1e-12));

  auto twice = loss::multi_view_clip_loss<double>({e1, e1}, et, tau);
  REQUIRE(twice.mean.item() == Approx(single.mean.item()).margin(1e-12));

  auto both = loss::multi_view_clip_loss<double>({e1, e2}, et, tau);
  const double a = loss::clip_loss(e1, et, tau).item();
  const double b = loss::clip_loss(e2, et, tau).item();
  REQUIRE(both.mean.item() == Approx((a + b) / 2).margin(1e-12));
  REQUIRE(both.per_view[0] == Approx(a).margin(1e-12));
  REQUIRE(both.per_view[1] == Approx(b).margin(1e-12));

  REQUIRE_THROWS_AS(loss::multi_view_clip_loss<double>({}, et, tau), ArgumentError);
}

TEST_CASE("simclr_loss: B=1 is zero; identical quadruple gives ln 3") {
  auto z = one_hots(1, 4);
  REQUIRE(loss::simclr_loss(z, z, 1.0).item() == Approx(0.0).margin(1e-12));

  std::vector<double> v;
  for (int i = 0; i < 2; ++i) {
    v.push_back(1.0);
    v.push_back(0.0);
  }
  Tensor<double> same({2, 2}, v, false);
  REQUIRE(loss::simclr_loss(same, same, 1.0).item() == Approx(kLn3).margin(1e-6));
}

TEST_CASE("simclr_loss vanishes when positives dominate at small temperature") {
  // positives aligned, negatives orthogonal
  auto z1 = one_hots(2, 4);
  auto z2 = one_hots(2, 4);
  REQUIRE(loss::simclr_loss(z1, z2, 0.05).item() < 1e-3);
}

TEST_CASE("simclr_loss differentiates") {
  Rng rng(31);
  std::vector<double> av(6), bv(6);
  for (auto& x : av) x = rng.normal();
  for (auto& x : bv) x = rng.normal();
  Tensor<double> a({2, 3}, av, true);
  Tensor<double> b({2, 3}, bv, true);
  auto f = [&] {
    return loss::simclr_loss(normalize_rows_graph(a), normalize_rows_graph(b), 0.5);
  };
  REQUIRE(nd::grad_check<double>(f, {a, b}, 1e-5) < 1e-6);
}

TEST_CASE("simsiam_loss values at aligned and orthogonal inputs") {
  auto p = one_hots(2, 4);
  REQUIRE(loss::simsiam_loss(p, p, p, p).item() == Approx(-1.0).margin(1e-12));

  // orthogonal predictor/projection pairs
  std::vector<double> qv(8, 0.0);
  qv[2] = 1.0;  // row 0 -> e3
  qv[7] = 1.0;  // row 1 -> e4
  Tensor<double> q({2, 4}, qv, false);
  REQUIRE(loss::simsiam_loss(p, p, q, q).item() == Approx(0.0).margin(1e-12));
}

TEST_CASE("simsiam stop-gradient: projections receive exactly zero gradient") {
  Rng rng(41);
  std::vector<double> pv(6), zv(6);
  for (auto& x : pv) x = rng.normal();
  for (auto& x : zv) x = rng.normal();
  Tensor<double> praw({2, 3}, pv, true);
  Tensor<double> zraw({2, 3}, zv, true);

  auto p = normalize_rows_graph(praw);
  auto z = normalize_rows_graph(zraw);
  auto l = loss::simsiam_loss(p, p, z, z);
  l.backward();
  REQUIRE(praw.has_grad());
  REQUIRE_FALSE(zraw.has_grad());  // nothing flowed into the stopped side

  // and the predictor side still matches finite differences (z held fixed)
  auto f = [&] {
    return loss::simsiam_loss(normalize_rows_graph(praw), normalize_rows_graph(praw),
                              normalize_rows_graph(zraw), normalize_rows_graph(zraw));
  };
  REQUIRE(nd::grad_check<double>(f, {praw}, 1e-5) < 1e-6);
}

TEST_CASE("byol_loss spans [0, 4] at aligned, orthogonal, antipodal inputs") {
  auto p = one_hots(2, 4);
  REQUIRE(loss::byol_loss<double>({p}, p).item() == Approx(0.0).margin(1e-12));

  std::vector<double> ov(8, 0.0);
  ov[2] = 1.0;
  ov[7] = 1.0;
  Tensor<double> orth({2, 4}, ov, false);
  REQUIRE(loss::byol_loss<double>({p}, orth).item() == Approx(2.0).margin(1e-12));

  std::vector<double> av(8, 0.0);
  av[0] = -1.0;
  av[5] = -1.0;
  Tensor<double> anti({2, 4}, av, false);
  REQUIRE(loss::byol_loss<double>({p}, anti).item() == Approx(4.0).margin(1e-12));

  // mean over views
  REQUIRE(loss::byol_loss<double>({p, p}, orth).item() == Approx(2.0).margin(1e-12));
}

TEST_CASE("byol_loss rejects targets that carry gradients") {
  auto p = one_hots(2, 4);
  auto live = one_hots(2, 4, true);
  REQUIRE_THROWS_AS(loss::byol_loss<double>({p}, live), ContractError);
}

TEST_CASE("temperature clamp keeps tau inside its bounds") {
  auto log_tau = Tensor<double>::scalar(std::log(5.0), true);
  loss::clamp_tau(log_tau, 0.01, 1.0);
  REQUIRE(std::exp(log_tau.item()) == Approx(1.0).margin(1e-12));
  log_tau.data()[0] = std::log(1e-5);
  loss::clamp_tau(log_tau, 0.01, 1.0);
  REQUIRE(std::exp(log_tau.item()) == Approx(0.01).margin(1e-12));
  log_tau.data()[0] = std::log(0.07);
  loss::clamp_tau(log_tau, 0.01, 1.0);
  REQUIRE(std::exp(log_tau.item()) == Approx(0.07).margin(1e-12));
}

TEST_CASE("total_loss composes and names divergent components") {
  auto ei = unit_rows(3, 6, 51);
  auto et = unit_rows(3, 6, 52);
  auto tau = tau_of(0.3);
  auto vl = loss::multi_view_clip_loss<double>({ei}, et, tau);

  // no SSL terms: total == vl_mean
  auto plain = loss::total_loss<double>(vl, nullptr, nullptr, 1.0, 0.3);
  REQUIRE(plain.report.total == Approx(plain.report.vl_mean).margin(1e-12));
  REQUIRE_FALSE(plain.report.ssl_online.has_value());

  // lambda 0: heads present but total still equals vl_mean
  auto ssl = Tensor<double>::scalar(0.5, false);
  auto ema = Tensor<double>::scalar(0.25, false);
  auto zl = loss::total_loss<double>(vl, &ssl, &ema, 0.0, 0.3);
  REQUIRE(zl.report.total == Approx(zl.report.vl_mean).margin(1e-12));
  REQUIRE(zl.report.ssl_online.value() == 0.5);

  // vl + 1.0 * (0.5 + 0.25)
  auto both = loss::total_loss<double>(vl, &ssl, &ema, 1.0, 0.3);
  REQUIRE(both.report.total ==
          Approx(both.report.vl_mean + 0.75).margin(1e-12));

  auto bad = Tensor<double>::scalar(std::nan(""), false);
  REQUIRE_THROWS_WITH(loss::total_loss<double>(vl, &bad, nullptr, 1.0, 0.3),
                      Catch::Matchers::ContainsSubstring("ssl_online"));
}

TEST_CASE("fixed composition example: vl 1.0 + simclr 0.5 + byol 0.25") {
  // construct a degenerate single-view vl with known value using B=1 (zero)
  auto e = one_hots(1, 4);
  auto vl = loss::multi_view_clip_loss<double>({e}, e, tau_of(1.0));
  auto simclr = Tensor<double>::scalar(0.5, false);
  auto byol = Tensor<double>::scalar(0.25, false);
  auto total = loss::total_loss<double>(vl, &simclr, &byol, 1.0, 1.0);
  REQUIRE(total.report.total == Approx(0.75).margin(1e-12));  // vl contributes 0
}
