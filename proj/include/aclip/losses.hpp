#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclip/common.hpp"
#include "aclip/tensor.hpp"

namespace aclip::loss {

using nd::Tensor;
using nlohmann::json;

// additive logit mask that zeroes a softmax slot
inline constexpr double kMaskLogit = -1e30;

// ---------------------------------------------------------------------------
// Temperature
// ---------------------------------------------------------------------------

// tau = exp(log_tau), learnable; clamped into [tau_min, tau_max] after every
// optimizer step.
template <typename T>
Tensor<T> tau_from_log(const Tensor<T>& log_tau) {
  if (log_tau.numel() != 1) throw ShapeError("tau_from_log: scalar parameter expected");
  return nd::exp(log_tau);
}

template <typename T>
void clamp_tau(Tensor<T>& log_tau, double tau_min, double tau_max) {
  if (!(tau_min > 0.0) || !(tau_max >= tau_min))
    throw ArgumentError("clamp_tau: need 0 < tau_min <= tau_max");
  T& v = log_tau.data()[0];
  const T lo = static_cast<T>(std::log(tau_min));
  const T hi = static_cast<T>(std::log(tau_max));
  v = std::clamp(v, lo, hi);
}

// ---------------------------------------------------------------------------
// Loss report
// ---------------------------------------------------------------------------

struct LossReport {
  std::vector<double> vl_per_view;
  double vl_mean = 0.0;
  std::optional<double> ssl_online;
  std::optional<double> ssl_ema;
  double total = 0.0;
  double tau = 0.0;

  json to_json() const {
    json j{{"vl_per_view", vl_per_view},
           {"vl_mean", vl_mean},
           {"total", total},
           {"tau", tau}};
    if (ssl_online) j["ssl_online"] = *ssl_online;
    if (ssl_ema) j["ssl_ema"] = *ssl_ema;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_unit_rows(const Tensor<T>& e, const char* who, double tol = 1e-4) {
  const std::int64_t d = e.dim(-1);
  const std::int64_t rows = e.numel() / d;
  const auto& v = e.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double x = static_cast<double>(v[static_cast<std::size_t>(r * d + j)]);
      n2 += x * x;
    }
    if (std::abs(std::sqrt(n2) - 1.0) > tol)
      throw ContractError(std::string(who) + ": row " + std::to_string(r) +
                          " is not unit-norm (|norm-1| = " +
                          std::to_string(std::abs(std::sqrt(n2) - 1.0)) + ")");
  }
}

// mean of the diagonal of a [B, B] matrix, as a graph node
template <typename T>
Tensor<T> diag_mean(const Tensor<T>& m) {
  const std::int64_t b = m.dim(0);
  std::vector<T> eye(static_cast<std::size_t>(b * b), T(0));
  for (std::int64_t i = 0; i < b; ++i) eye[static_cast<std::size_t>(i * b + i)] = T(1);
  Tensor<T> mask(Shape{b, b}, std::move(eye), false);
  return nd::scale(nd::sum_all(nd::mul(m, mask)), static_cast<T>(1.0 / static_cast<double>(b)));
}

// rowwise dot product of two [B, D] tensors -> [B]
template <typename T>
Tensor<T> row_dot(const Tensor<T>& a, const Tensor<T>& b) {
  return nd::reduce(nd::mul(a, b), -1, nd::Reduce::Sum);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Vision-language contrastive loss (InfoNCE over the batch, both directions)
// ---------------------------------------------------------------------------

// 0.5 * L_v + 0.5 * L_l with cosine similarities scaled by 1/tau. Rows of
// both embedding matrices must be unit-norm; tau enters as a graph node so
// the temperature is trained.
template <typename T>
Tensor<T> clip_loss(const Tensor<T>& image_embeds, const Tensor<T>& text_embeds,
                    const Tensor<T>& tau) {
  if (image_embeds.rank() != 2 || text_embeds.rank() != 2 ||
      image_embeds.shape() != text_embeds.shape())
    throw ShapeError("clip_loss: embeddings must be equal-shape [B, D]");
  const std::int64_t b = image_embeds.dim(0);
  if (b < 1) throw ArgumentError("clip_loss: empty batch");
  detail::check_unit_rows(image_embeds, "clip_loss(image)");
  detail::check_unit_rows(text_embeds, "clip_loss(text)");

  auto sims = nd::matmul(image_embeds, nd::transpose_last(text_embeds));  // [B, B]
  auto logits = nd::scale_by(sims, nd::reciprocal(tau));
  auto lse_rows = nd::mean_all(nd::log_sum_exp(logits, 1));   // image -> text
  auto lse_cols = nd::mean_all(nd::log_sum_exp(logits, 0));   // text -> image
  auto pos = detail::diag_mean(logits);
  // 0.5*(L_v + L_l) = 0.5*mean lse_rows + 0.5*mean lse_cols - mean diag
  return nd::sub(nd::scale(nd::add(lse_rows, lse_cols), T(0.5)), pos);
}

template <typename T>
struct MultiViewLoss {
  Tensor<T> mean;
  std::vector<double> per_view;
};

template <typename T>
MultiViewLoss<T> multi_view_clip_loss(const std::vector<Tensor<T>>& image_embeds_per_view,
                                      const Tensor<T>& text_embeds, const Tensor<T>& tau) {
  if (image_embeds_per_view.empty())
    throw ArgumentError("multi_view_clip_loss: at least one view required");
  MultiViewLoss<T> out;
  Tensor<T> acc;
  for (const auto& e : image_embeds_per_view) {
    auto l = clip_loss(e, text_embeds, tau);
    out.per_view.push_back(static_cast<double>(l.item()));
    acc = acc.defined() ? nd::add(acc, l) : l;
  }
  out.mean = nd::scale(acc, static_cast<T>(1.0 / static_cast<double>(
                                               image_embeds_per_view.size())));
  return out;
}

// ---------------------------------------------------------------------------
// Auxiliary self-supervised losses
// ---------------------------------------------------------------------------

// NT-Xent over the 2B multiview batch; self-pairs excluded from the
// denominator. tau_ssl is a fixed constant (the learnable tau stays with the
// VL loss).
template <typename T>
Tensor<T> simclr_loss(const Tensor<T>& z1, const Tensor<T>& z2, double tau_ssl) {
  if (z1.rank() != 2 || z1.shape() != z2.shape())
    throw ShapeError("simclr_loss: projections must be equal-shape [B, D]");
  const std::int64_t b = z1.dim(0);
  if (b < 1) throw ArgumentError("simclr_loss: empty batch");
  detail::check_unit_rows(z1, "simclr_loss(z1)");
  detail::check_unit_rows(z2, "simclr_loss(z2)");

  auto u = nd::concat<T>({z1, z2}, 0);  // [2B, D]
  auto sims = nd::scale(nd::matmul(u, nd::transpose_last(u)),
                        static_cast<T>(1.0 / tau_ssl));
  const std::int64_t n = 2 * b;
  std::vector<T> self_mask(static_cast<std::size_t>(n * n), T(0));
  std::vector<T> pos_mask(static_cast<std::size_t>(n * n), T(0));
  for (std::int64_t i = 0; i < n; ++i) {
    self_mask[static_cast<std::size_t>(i * n + i)] = static_cast<T>(kMaskLogit);
    const std::int64_t j = i < b ? i + b : i - b;
    pos_mask[static_cast<std::size_t>(i * n + j)] = T(1);
  }
  auto masked = nd::add(sims, Tensor<T>(Shape{n, n}, std::move(self_mask), false));
  auto lse = nd::mean_all(nd::log_sum_exp(masked, 1));
  auto pos = nd::scale(
      nd::sum_all(nd::mul(sims, Tensor<T>(Shape{n, n}, std::move(pos_mask), false))),
      static_cast<T>(1.0 / static_cast<double>(n)));
  return nd::sub(lse, pos);
}

// -0.5 * [cos(p1, stopgrad(z2)) + cos(p2, stopgrad(z1))], batch-averaged.
// Gradients do not flow into the stopped projections.
template <typename T>
Tensor<T> simsiam_loss(const Tensor<T>& p1, const Tensor<T>& p2, const Tensor<T>& z1,
                       const Tensor<T>& z2) {
  detail::check_unit_rows(p1, "simsiam_loss(p1)");
  detail::check_unit_rows(p2, "simsiam_loss(p2)");
  detail::check_unit_rows(z1, "simsiam_loss(z1)");
  detail::check_unit_rows(z2, "simsiam_loss(z2)");
  auto c1 = nd::mean_all(detail::row_dot(p1, nd::stop_gradient(z2)));
  auto c2 = nd::mean_all(detail::row_dot(p2, nd::stop_gradient(z1)));
  return nd::scale(nd::add(c1, c2), T(-0.5));
}

// Mean over views of 2 - 2*cos(p, z_ema), in [0, 4] for unit inputs. The EMA
// target comes in without gradients (teacher side).
template <typename T>
Tensor<T> byol_loss(const std::vector<Tensor<T>>& predictor_outputs_per_view,
                    const Tensor<T>& z_ema) {
  if (predictor_outputs_per_view.empty())
    throw ArgumentError("byol_loss: at least one view required");
  if (z_ema.requires_grad())
    throw ContractError("byol_loss: the EMA target must not carry gradients");
  detail::check_unit_rows(z_ema, "byol_loss(z_ema)");
  Tensor<T> acc;
  for (const auto& p : predictor_outputs_per_view) {
    detail::check_unit_rows(p, "byol_loss(p)");
    auto term = nd::add_scalar(nd::scale(nd::mean_all(detail::row_dot(p, z_ema)), T(-2)),
                               T(2));
    acc = acc.defined() ? nd::add(acc, term) : term;
  }
  return nd::scale(acc, static_cast<T>(1.0 / static_cast<double>(
                                           predictor_outputs_per_view.size())));
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

// total = vl_mean + lambda_ssl * (ssl_online + ssl_ema, present terms).
// Non-finite components abort with the component named.
template <typename T>
struct TotalLoss {
  Tensor<T> value;
  LossReport report;
};

template <typename T>
TotalLoss<T> total_loss(const MultiViewLoss<T>& vl, const Tensor<T>* ssl_online,
                        const Tensor<T>* ssl_ema, double lambda_ssl, double tau_value) {
  auto check_finite = [](double v, const char* name) {
    if (!std::isfinite(v))
      throw TrainingDivergence(std::string("non-finite loss component: ") + name);
  };
  TotalLoss<T> out;
  out.report.vl_per_view = vl.per_view;
  out.report.vl_mean = static_cast<double>(vl.mean.item());
  out.report.tau = tau_value;
  check_finite(out.report.vl_mean, "vl_mean");
  for (double v : vl.per_view) check_finite(v, "vl_per_view");

  out.value = vl.mean;
  if (ssl_online != nullptr) {
    const double v = static_cast<double>(ssl_online->item());
    check_finite(v, "ssl_online");
    out.report.ssl_online = v;
    out.value = nd::add(out.value, nd::scale(*ssl_online, static_cast<T>(lambda_ssl)));
  }
  if (ssl_ema != nullptr) {
    const double v = static_cast<double>(ssl_ema->item());
    check_finite(v, "ssl_ema");
    out.report.ssl_ema = v;
    out.value = nd::add(out.value, nd::scale(*ssl_ema, static_cast<T>(lambda_ssl)));
  }
  out.report.total = static_cast<double>(out.value.item());
  check_finite(out.report.total, "total");
  return out;
}

}  // namespace aclip::loss
