#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclip/attnmask.hpp"
#include "aclip/common.hpp"
#include "aclip/dataio.hpp"
#include "aclip/encoders.hpp"
#include "aclip/image.hpp"
#include "aclip/losses.hpp"
#include "aclip/model.hpp"
#include "aclip/tensor.hpp"

namespace aclip::train {

using loss::LossReport;
using mask::BudgetMode;
using mask::EmaResolution;
using mask::LayerReduce;
using mask::SelectionStrategy;
using model::ClipModel;
using model::SslMode;
using nd::Tensor;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 64;
  std::int64_t total_steps = 2000;
  double lr_peak = 3e-3;
  std::int64_t warmup_steps = 100;
  double weight_decay = 0.1;
  int views = 2;
  double keep_ratio = 0.5;
  std::string budget_mode = "views";  // "views": floor(N/k) per view; "ratio": floor(N*keep)
  std::string strategy = "low";       // low | high | mixed | random
  double mixed_random_fraction = 0.25;
  int mask_granularity = 8;           // g, pixels; multiple of the patch size
  std::string ema_resolution = "full";
  double ema_momentum_base = 0.996;
  std::string score_layers = "all";   // all | last
  std::string ssl = "simclr";         // none | simclr | simsiam
  bool byol = true;
  double lambda_ssl = 1.0;
  double tau_ssl = 0.1;
  double tau_init = 0.07;
  double tau_min = 0.01;
  double tau_max = 1.0;
  bool frozen_patch_embed = true;
  std::uint64_t seed = 42;
  std::string dtype = "float32";
  enc::VisualEncoderConfig visual;
  enc::TextEncoderConfig text;

  bool random_strategy() const { return strategy == "random"; }

  model::ModelConfig model_config() const {
    model::ModelConfig mc;
    mc.visual = visual;
    mc.visual.frozen_patch_embed = frozen_patch_embed;
    mc.text = text;
    mc.ssl = model::parse_ssl_mode(ssl);
    mc.byol = byol;
    mc.tau_init = tau_init;
    return mc;
  }

  void validate() const {
    visual.validate();
    if (batch_size < 1) throw ArgumentError("config: batch_size must be >= 1");
    if (total_steps < 1) throw ArgumentError("config: total_steps must be >= 1");
    if (views < 1) throw ArgumentError("config: views must be >= 1");
    if (!(keep_ratio > 0.0) || keep_ratio > 1.0)
      throw ArgumentError("config: keep_ratio must lie in (0, 1]");
    if (!(lr_peak > 0.0)) throw ArgumentError("config: lr_peak must be positive");
    if (warmup_steps < 0 || warmup_steps > total_steps)
      throw ArgumentError("config: warmup_steps must lie in [0, total_steps]");
    if (weight_decay < 0.0) throw ArgumentError("config: weight_decay must be >= 0");
    if (!(ema_momentum_base >= 0.0) || ema_momentum_base > 1.0)
      throw ArgumentError("config: ema_momentum_base must lie in [0, 1]");
    if (mask_granularity % visual.patch_size != 0 ||
        visual.image_size % mask_granularity != 0)
      throw ArgumentError(
          "config: mask_granularity must be a multiple of the patch size and divide the image size");
    const auto mode = model::parse_ssl_mode(ssl);
    if (mode != SslMode::None && views < 2)
      throw ArgumentError("config: online-to-online ssl (" + ssl + ") needs views >= 2");
    if (strategy != "low" && strategy != "high" && strategy != "mixed" &&
        strategy != "random")
      throw ArgumentError("config: unknown strategy " + strategy);
    if (strategy == "mixed" &&
        !(mixed_random_fraction > 0.0 && mixed_random_fraction < keep_ratio))
      throw ArgumentError("config: mixed_random_fraction must lie in (0, keep_ratio)");
    if (dtype != "float32" && dtype != "float64")
      throw ArgumentError("config: dtype must be float32 or float64");
    (void)mask::parse_ema_resolution(ema_resolution);
    (void)mask::parse_budget_mode(budget_mode);
    if (score_layers != "all" && score_layers != "last")
      throw ArgumentError("config: score_layers must be all or last");
    if (!(tau_min > 0.0) || !(tau_max >= tau_min))
      throw ArgumentError("config: need 0 < tau_min <= tau_max");
  }

  json to_json() const {
    return json{{"batch_size", batch_size},
                {"total_steps", total_steps},
                {"lr_peak", lr_peak},
                {"warmup_steps", warmup_steps},
                {"weight_decay", weight_decay},
                {"views", views},
                {"keep_ratio", keep_ratio},
                {"budget_mode", budget_mode},
                {"strategy", strategy},
                {"mixed_random_fraction", mixed_random_fraction},
                {"mask_granularity", mask_granularity},
                {"ema_resolution", ema_resolution},
                {"ema_momentum_base", ema_momentum_base},
                {"score_layers", score_layers},
                {"ssl", ssl},
                {"byol", byol},
                {"lambda_ssl", lambda_ssl},
                {"tau_ssl", tau_ssl},
                {"tau_init", tau_init},
                {"tau_min", tau_min},
                {"tau_max", tau_max},
                {"frozen_patch_embed", frozen_patch_embed},
                {"seed", seed},
                {"dtype", dtype},
                {"visual", visual.to_json()},
                {"text", text.to_json()}};
  }

  static TrainConfig from_json(const json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.lr_peak = j.value("lr_peak", c.lr_peak);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.views = j.value("views", c.views);
    c.keep_ratio = j.value("keep_ratio", c.keep_ratio);
    c.budget_mode = j.value("budget_mode", c.budget_mode);
    c.strategy = j.value("strategy", c.strategy);
    c.mixed_random_fraction = j.value("mixed_random_fraction", c.mixed_random_fraction);
    c.mask_granularity = j.value("mask_granularity", c.mask_granularity);
    c.ema_resolution = j.value("ema_resolution", c.ema_resolution);
    c.ema_momentum_base = j.value("ema_momentum_base", c.ema_momentum_base);
    c.score_layers = j.value("score_layers", c.score_layers);
    c.ssl = j.value("ssl", c.ssl);
    c.byol = j.value("byol", c.byol);
    c.lambda_ssl = j.value("lambda_ssl", c.lambda_ssl);
    c.tau_ssl = j.value("tau_ssl", c.tau_ssl);
    c.tau_init = j.value("tau_init", c.tau_init);
    c.tau_min = j.value("tau_min", c.tau_min);
    c.tau_max = j.value("tau_max", c.tau_max);
    c.frozen_patch_embed = j.value("frozen_patch_embed", c.frozen_patch_embed);
    c.seed = j.value("seed", c.seed);
    c.dtype = j.value("dtype", c.dtype);
    if (j.contains("visual")) c.visual = enc::VisualEncoderConfig::from_json(j.at("visual"));
    if (j.contains("text")) c.text = enc::TextEncoderConfig::from_json(j.at("text"));
    return c;
  }

  SelectionStrategy selection() const {
    if (strategy == "mixed") return SelectionStrategy::mixed(mixed_random_fraction);
    return SelectionStrategy::parse(strategy == "random" ? "low" : strategy);
  }
  LayerReduce layer_reduce() const {
    return score_layers == "all" ? LayerReduce::All : LayerReduce::Last;
  }
};

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

// Area fraction uniform in [scale_min, scale_max]; aspect log-uniform on
// [3/4, 4/3] intersected with the feasible band [a, 1/a] so the rect always
// fits and the area law stays exactly uniform. The retry/center-crop fallback
// only triggers for degenerate bounds.
inline CropRect random_resized_crop(Rng& rng, double scale_min = 0.5,
                                    double scale_max = 1.0, double aspect_min = 0.75,
                                    double aspect_max = 4.0 / 3.0) {
  if (!(scale_min > 0.0) || scale_min > scale_max || scale_max > 1.0)
    throw ArgumentError("random_resized_crop: need 0 < scale_min <= scale_max <= 1");
  if (!(aspect_min > 0.0) || aspect_min > aspect_max)
    throw ArgumentError("random_resized_crop: bad aspect bounds");
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double a = rng.uniform(scale_min, scale_max);
    const double lo = std::max(aspect_min, a);
    const double hi = std::min(aspect_max, 1.0 / a);
    if (!(lo <= hi)) continue;
    const double ar = std::exp(rng.uniform(std::log(lo), std::log(hi)));
    const double w = std::min(1.0, std::sqrt(a * ar));
    const double h = std::min(1.0, std::sqrt(a / ar));
    const double x0 = rng.uniform(0.0, 1.0 - w);
    const double y0 = rng.uniform(0.0, 1.0 - h);
    return CropRect{x0, y0, x0 + w, y0 + h};
  }
  const double side = std::sqrt(0.5 * (scale_min + scale_max));
  const double off = (1.0 - side) / 2.0;
  return CropRect{off, off, off + side, off + side};
}

struct ColorPolicy {
  double brightness = 0.4;
  double contrast = 0.4;
  double p_grayscale = 0.2;
  double p_solarize = 0.2;
  double solarize_threshold = 0.5;
  double p_blur = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;

  static ColorPolicy identity() {
    ColorPolicy p;
    p.brightness = 0.0;
    p.contrast = 0.0;
    p.p_grayscale = 0.0;
    p.p_solarize = 0.0;
    p.p_blur = 0.0;
    return p;
  }
};

// brightness/contrast jitter, probabilistic grayscale (luma weights
// 0.299/0.587/0.114), solarize (x -> 1-x above the threshold), separable
// Gaussian blur; each stage clamps back into [0, 1].
inline Image color_augment(const Image& input, Rng& rng, const ColorPolicy& policy) {
  Image img = input;
  if (policy.brightness > 0.0) {
    const auto f = static_cast<float>(
        1.0 + rng.uniform(-policy.brightness, policy.brightness));
    for (auto& v : img.data) v = std::clamp(v * f, 0.0f, 1.0f);
  }
  if (policy.contrast > 0.0) {
    const auto f =
        static_cast<float>(1.0 + rng.uniform(-policy.contrast, policy.contrast));
    double mean = 0.0;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        mean += 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) +
                0.114 * img.at(2, y, x);
    mean /= static_cast<double>(img.height) * img.width;
    const auto m = static_cast<float>(mean);
    for (auto& v : img.data) v = std::clamp(m + (v - m) * f, 0.0f, 1.0f);
  }
  if (policy.p_grayscale > 0.0 && rng.uniform() < policy.p_grayscale) {
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const float luma = 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) +
                           0.114f * img.at(2, y, x);
        img.at(0, y, x) = img.at(1, y, x) = img.at(2, y, x) = luma;
      }
  }
  if (policy.p_solarize > 0.0 && rng.uniform() < policy.p_solarize) {
    const auto thr = static_cast<float>(policy.solarize_threshold);
    for (auto& v : img.data)
      if (v > thr) v = 1.0f - v;
  }
  if (policy.p_blur > 0.0 && rng.uniform() < policy.p_blur) {
    const double sigma = rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max);
    img = gaussian_blur(img, sigma);
    img.clamp01();
  }
  return img;
}

// ---------------------------------------------------------------------------
// Schedules and optimizer
// ---------------------------------------------------------------------------

// Linear warmup to the peak, then cosine decay to zero.
inline double lr_schedule(std::int64_t t, const TrainConfig& cfg) {
  if (t < 0) throw ArgumentError("lr_schedule: negative step");
  if (cfg.warmup_steps > 0 && t < cfg.warmup_steps)
    return cfg.lr_peak * static_cast<double>(t) / static_cast<double>(cfg.warmup_steps);
  const auto span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  if (span <= 0.0) return cfg.lr_peak;
  const double progress = static_cast<double>(t - cfg.warmup_steps) / span;
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

// Parameters whose name ends in a bias slot, layer-norm gain, or the
// temperature are excluded from decay.
inline bool decays(const std::string& name) {
  if (name == "logit.log_tau") return false;
  const auto dot = name.rfind('.');
  const std::string last = dot == std::string::npos ? name : name.substr(dot + 1);
  if (!last.empty() && last[0] == 'b') return false;
  if (last == "g") return false;
  return true;
}

template <typename T>
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  std::vector<std::vector<T>> m, v;  // parallel to the parameter list

  void ensure_slots(const std::vector<std::pair<std::string, Tensor<T>>>& params) {
    if (!m.empty()) return;
    for (const auto& [name, t] : params) {
      m.emplace_back(t.data().size(), T(0));
      v.emplace_back(t.data().size(), T(0));
    }
  }

  // Decoupled weight decay; moments are bias-corrected.
  void step(const std::vector<std::pair<std::string, Tensor<T>>>& params, double lr,
            double weight_decay) {
    ensure_slots(params);
    if (params.size() != m.size())
      throw StructuralError("adamw: parameter list changed size");
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi].second;
      auto& pv = p.data();
      auto& pm = m[pi];
      auto& pvv = v[pi];
      const bool wd = decays(params[pi].first) && weight_decay > 0.0;
      const bool has_grad = p.has_grad();
      const std::vector<T>* g = has_grad ? &p.node().grad : nullptr;
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double gi = g != nullptr ? static_cast<double>((*g)[i]) : 0.0;
        const double mi = beta1 * static_cast<double>(pm[i]) + (1.0 - beta1) * gi;
        const double vi =
            beta2 * static_cast<double>(pvv[i]) + (1.0 - beta2) * gi * gi;
        pm[i] = static_cast<T>(mi);
        pvv[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        double update = lr * mhat / (std::sqrt(vhat) + eps);
        if (wd) update += lr * weight_decay * static_cast<double>(pv[i]);
        pv[i] = static_cast<T>(static_cast<double>(pv[i]) - update);
      }
    }
  }
};

// Convenience single-tensor form used by tests.
template <typename T>
void adamw_update(Tensor<T>& param, const std::vector<T>& grad, std::vector<T>& m,
                  std::vector<T>& v, std::int64_t step_count, double lr,
                  double weight_decay, double beta1 = 0.9, double beta2 = 0.98,
                  double eps = 1e-8) {
  auto& pv = param.data();
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double gi = static_cast<double>(grad[i]);
    const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
    const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
    update += lr * weight_decay * static_cast<double>(pv[i]);
    pv[i] = static_cast<T>(static_cast<double>(pv[i]) - update);
  }
}

// ---------------------------------------------------------------------------
// Dataset access
// ---------------------------------------------------------------------------

struct Dataset {
  data::Corpus corpus;
  data::Vocab vocab;

  static Dataset from_manifest(const std::string& manifest_path) {
    Dataset d;
    d.corpus = data::load_corpus(manifest_path);
    d.vocab = data::build_vocab(data::all_captions(d.corpus));
    return d;
  }
  std::size_t size() const { return d_size(); }
  std::size_t d_size() const { return corpus.records.size(); }
};

// Deterministic batch composition: a fresh permutation per epoch derived from
// (seed, epoch); batches slice it without remainder.
inline std::vector<int> batch_indices(std::int64_t step, int batch_size,
                                      std::size_t dataset_size, std::uint64_t seed) {
  const auto n = static_cast<std::int64_t>(dataset_size);
  if (n < batch_size)
    throw ArgumentError("batching: dataset smaller than one batch (" +
                        std::to_string(n) + " < " + std::to_string(batch_size) + ")");
  const std::int64_t per_epoch = n / batch_size;
  const std::int64_t epoch = step / per_epoch;
  const std::int64_t slot = step % per_epoch;
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = static_cast<int>(i);
  Rng rng = derive_rng(seed, Stream::Batch, static_cast<std::uint64_t>(epoch));
  rng.shuffle(perm);
  return {perm.begin() + slot * batch_size, perm.begin() + (slot + 1) * batch_size};
}

// ---------------------------------------------------------------------------
// One training step, decomposed so the loss is re-evaluable for grad checks
// ---------------------------------------------------------------------------

template <typename T>
struct StepInputs {
  std::vector<Tensor<T>> view_tokens;              // per view: [B, N, patch_dim]
  std::vector<std::vector<std::vector<int>>> keep; // per view, per image
  std::vector<std::vector<std::int64_t>> text_ids; // per image
  Tensor<T> byol_target;                           // [B, D], no grad; defined when byol
  std::vector<mask::ViewPlan> plans;               // per image (reporting/coverage)
};

// Steps (1)-(2) of the pinned order: augmentation draws, the single EMA
// forward on the enclosing crops (scores + BYOL target), and per-image view
// plans.
template <typename T>
StepInputs<T> prepare_step(const enc::ParamStore<T>& ema_params, const Dataset& data,
                           const std::vector<int>& batch, const TrainConfig& cfg,
                           std::int64_t step) {
  const auto& vc = cfg.visual;
  const int B = static_cast<int>(batch.size());
  const int n_tokens = vc.tokens();
  const bool color_aug_active = model::parse_ssl_mode(cfg.ssl) != SslMode::None;
  const ColorPolicy policy =
      color_aug_active ? ColorPolicy{} : ColorPolicy::identity();

  StepInputs<T> inputs;
  inputs.keep.assign(static_cast<std::size_t>(cfg.views), {});
  std::vector<std::vector<T>> view_buffers(static_cast<std::size_t>(cfg.views));
  for (auto& buf : view_buffers)
    buf.reserve(static_cast<std::size_t>(B) * n_tokens * vc.patch_dim());

  // (1a) crop draws per (image, view); streams keyed by (seed, image, view, step)
  std::vector<std::vector<CropRect>> crops(static_cast<std::size_t>(B));
  std::vector<CropRect> ema_rects(static_cast<std::size_t>(B));
  for (int bi = 0; bi < B; ++bi) {
    const auto image_id = static_cast<std::uint64_t>(batch[static_cast<std::size_t>(bi)]);
    for (int v = 0; v < cfg.views; ++v) {
      Rng rng = derive_rng(cfg.seed, Stream::Crop, image_id, static_cast<std::uint64_t>(v),
                           static_cast<std::uint64_t>(step));
      crops[static_cast<std::size_t>(bi)].push_back(random_resized_crop(rng));
    }
    ema_rects[static_cast<std::size_t>(bi)] =
        mask::enclosing_rect(crops[static_cast<std::size_t>(bi)]);
  }

  // (1b) one EMA forward per image per step, batched; crop/resize only,
  // no color jitter on the teacher view
  const auto ema_res = mask::parse_ema_resolution(cfg.ema_resolution);
  const int res = ema_res == EmaResolution::Full ? vc.image_size : vc.image_size / 2;
  if (res % vc.patch_size != 0)
    throw ShapeError("prepare_step: half resolution is not a multiple of the patch size");
  const int ema_grid = res / vc.patch_size;
  std::vector<T> ema_buf;
  ema_buf.reserve(static_cast<std::size_t>(B) * ema_grid * ema_grid * vc.patch_dim());
  for (int bi = 0; bi < B; ++bi) {
    const Image view =
        crop_resize(data.corpus.images[static_cast<std::size_t>(
                        batch[static_cast<std::size_t>(bi)])],
                    ema_rects[static_cast<std::size_t>(bi)], res, res);
    const auto toks = enc::patchify<T>(view, vc.patch_size);
    ema_buf.insert(ema_buf.end(), toks.begin(), toks.end());
  }

  enc::VisualOutput<T> ema_out;
  {
    nd::NoGradGuard ng;
    Tensor<T> ema_tokens(Shape{B, ema_grid * ema_grid, vc.patch_dim()},
                         std::move(ema_buf), false);
    if (ema_res == EmaResolution::Half) {
      auto pos = enc::interpolate_pos_embed(ema_params.at("visual.pos"), ema_grid);
      ema_out = enc::vit_forward(ema_params, vc, ema_tokens, nullptr, &pos);
    } else {
      ema_out = enc::vit_forward(ema_params, vc, ema_tokens, nullptr, nullptr);
    }
    if (cfg.byol) {
      auto z = model::ClipModel<T>::mlp2(ema_params, "sslproj", ema_out.cls_feature);
      auto norms = nd::sqrt(nd::reduce(nd::square(z), -1, nd::Reduce::Sum));
      for (const T n : norms.data())
        if (!(static_cast<double>(n) > 1e-8))
          throw ContractError("byol target: degenerate projection");
      inputs.byol_target = nd::scale_rows(z, nd::reciprocal(norms));
    }
  }

  // (2) per-image shared score map and per-view token selection
  const auto budget = mask::parse_budget_mode(cfg.budget_mode);
  for (int bi = 0; bi < B; ++bi) {
    const auto image_id = static_cast<std::uint64_t>(batch[static_cast<std::size_t>(bi)]);
    const auto& rect = ema_rects[static_cast<std::size_t>(bi)];
    mask::ViewPlan plan;
    if (cfg.random_strategy()) {
      plan.k = cfg.views;
      plan.granularity = cfg.mask_granularity;
      plan.ema_rect = rect;
      const double ratio =
          mask::effective_keep_ratio(budget, cfg.views, cfg.keep_ratio, n_tokens);
      for (int v = 0; v < cfg.views; ++v) {
        mask::PlannedView pv;
        pv.rect = crops[static_cast<std::size_t>(bi)][static_cast<std::size_t>(v)];
        pv.kept = mask::random_mask(
            n_tokens, ratio,
            mix_seed(cfg.seed, image_id, static_cast<std::uint64_t>(v),
                     static_cast<std::uint64_t>(step)));
        plan.views.push_back(std::move(pv));
      }
    } else {
      mask::ScoreMap shared =
          mask::attn_scores(ema_out.attn, bi, cfg.layer_reduce(), ema_grid, ema_grid, rect);
      plan = mask::plan_from_map(shared, crops[static_cast<std::size_t>(bi)], vc.grid(),
                                 cfg.keep_ratio, budget, cfg.selection(),
                                 cfg.mask_granularity, vc.patch_size,
                                 mix_seed(cfg.seed, static_cast<std::uint64_t>(step)),
                                 image_id);
    }

    // (3-prep) augmented online view pixels
    for (int v = 0; v < cfg.views; ++v) {
      const Image raw = crop_resize(
          data.corpus.images[static_cast<std::size_t>(batch[static_cast<std::size_t>(bi)])],
          plan.views[static_cast<std::size_t>(v)].rect, vc.image_size, vc.image_size);
      Rng crng = derive_rng(cfg.seed, Stream::Color, image_id,
                            static_cast<std::uint64_t>(v), static_cast<std::uint64_t>(step));
      const Image aug = color_augment(raw, crng, policy);
      const auto toks = enc::patchify<T>(aug, vc.patch_size);
      view_buffers[static_cast<std::size_t>(v)].insert(
          view_buffers[static_cast<std::size_t>(v)].end(), toks.begin(), toks.end());
      inputs.keep[static_cast<std::size_t>(v)].push_back(
          plan.views[static_cast<std::size_t>(v)].kept);
    }

    // caption draw
    const auto& rec = data.corpus.records[static_cast<std::size_t>(
        batch[static_cast<std::size_t>(bi)])];
    Rng cap_rng = derive_rng(cfg.seed, Stream::Caption, image_id,
                             static_cast<std::uint64_t>(step));
    const auto& caption =
        rec.captions[static_cast<std::size_t>(cap_rng.uniform_int(
            static_cast<std::int64_t>(rec.captions.size())))];
    inputs.text_ids.push_back(
        data::tokenize(caption, data.vocab, cfg.text.context_length));
    inputs.plans.push_back(std::move(plan));
  }

  for (int v = 0; v < cfg.views; ++v)
    inputs.view_tokens.emplace_back(Shape{B, n_tokens, vc.patch_dim()},
                                    std::move(view_buffers[static_cast<std::size_t>(v)]),
                                    false);
  return inputs;
}

// Steps (3)-(4): online forwards and the composed objective. Re-evaluable
// under parameter perturbation, which is what the gradient checks need.
template <typename T>
loss::TotalLoss<T> compute_total_loss(const ClipModel<T>& m, const StepInputs<T>& inputs,
                                      const TrainConfig& cfg) {
  const auto tau = m.tau();
  std::vector<Tensor<T>> view_embeds;
  std::vector<Tensor<T>> view_cls;
  for (std::size_t v = 0; v < inputs.view_tokens.size(); ++v) {
    auto out = m.visual_forward(inputs.view_tokens[v], &inputs.keep[v]);
    view_cls.push_back(out.cls_feature);
    view_embeds.push_back(m.image_embedding(out.cls_feature));
  }
  auto text_feat = m.text_features(inputs.text_ids, data::Vocab::kEos);
  auto text_embed = m.text_embedding(text_feat);

  auto vl = loss::multi_view_clip_loss(view_embeds, text_embed, tau);

  auto normalize_rows = [](const Tensor<T>& z) {
    auto norms = nd::sqrt(nd::reduce(nd::square(z), -1, nd::Reduce::Sum));
    for (const T n : norms.data())
      if (!(static_cast<double>(n) > 1e-8))
        throw ContractError("ssl head: degenerate projection");
    return nd::scale_rows(z, nd::reciprocal(norms));
  };

  std::optional<Tensor<T>> ssl_online;
  const auto ssl_mode = model::parse_ssl_mode(cfg.ssl);
  if (ssl_mode != SslMode::None) {
    auto z1_raw = m.ssl_project(view_cls.at(0));
    auto z2_raw = m.ssl_project(view_cls.at(1));
    if (ssl_mode == SslMode::SimCLR) {
      ssl_online = loss::simclr_loss(normalize_rows(z1_raw), normalize_rows(z2_raw),
                                     cfg.tau_ssl);
    } else {
      auto p1 = normalize_rows(m.ssl_predict(z1_raw));
      auto p2 = normalize_rows(m.ssl_predict(z2_raw));
      ssl_online =
          loss::simsiam_loss(p1, p2, normalize_rows(z1_raw), normalize_rows(z2_raw));
    }
  }

  std::optional<Tensor<T>> ssl_ema;
  if (cfg.byol) {
    if (!inputs.byol_target.defined())
      throw StructuralError("compute_total_loss: byol enabled but no EMA target prepared");
    std::vector<Tensor<T>> preds;
    for (const auto& cls : view_cls)
      preds.push_back(normalize_rows(m.ssl_predict(m.ssl_project(cls))));
    ssl_ema = loss::byol_loss(preds, inputs.byol_target);
  }

  return loss::total_loss(vl, ssl_online ? &*ssl_online : nullptr,
                          ssl_ema ? &*ssl_ema : nullptr, cfg.lambda_ssl,
                          static_cast<double>(tau.item()));
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

template <typename T>
struct Trainer {
  TrainConfig cfg;
  ClipModel<T> model;
  mask::EmaState<T> ema;
  AdamW<T> opt;
  std::int64_t step = 0;

  static Trainer create(TrainConfig cfg, const Dataset& data) {
    cfg.text.vocab_size = static_cast<int>(data.vocab.size());
    cfg.validate();
    if (cfg.batch_size == 1)
      std::fprintf(stderr,
                   "warning: batch_size 1 gives a degenerate contrastive objective\n");
    Trainer t;
    t.cfg = cfg;
    t.model = ClipModel<T>::init(cfg.model_config(), cfg.seed);
    t.ema = mask::make_ema_state(t.model.ema_subset(), cfg.ema_momentum_base,
                                 cfg.total_steps);
    return t;
  }

  // The pinned order: EMA forward -> plans -> online forward -> loss ->
  // backward -> AdamW -> EMA update -> tau clamp.
  LossReport train_step(const Dataset& data) {
    const auto batch = batch_indices(step, cfg.batch_size, data.size(), cfg.seed);
    auto inputs = prepare_step(ema.shadow, data, batch, cfg, step);
    auto trainable = model.trainable();
    for (auto& [name, t] : trainable) t.zero_grad();
    auto total = compute_total_loss(model, inputs, cfg);
    total.value.backward();
    opt.step(trainable, lr_schedule(step, cfg), cfg.weight_decay);
    mask::ema_update(ema, model.ema_subset());
    loss::clamp_tau(model.params.at("logit.log_tau"), cfg.tau_min, cfg.tau_max);
    ++step;
    return total.report;
  }

  json log_line(const LossReport& report) const {
    // `step` has already advanced past the logged step
    const std::int64_t logged = step - 1;
    json j{{"step", logged},
           {"lr", lr_schedule(logged, cfg)},
           {"mu", mask::ema_momentum(logged, cfg.total_steps, cfg.ema_momentum_base)}};
    j.update(report.to_json());
    return j;
  }

  void save_checkpoint(const std::string& path, const data::Vocab& vocab) const {
    enc::Checkpoint ck;
    ck.meta["format"] = 1;
    ck.meta["step"] = step;
    ck.meta["opt_step_count"] = opt.step_count;
    ck.meta["train_config"] = cfg.to_json();
    ck.meta["model_config"] = cfg.model_config().to_json();
    ck.meta["vocab"] = vocab.to_json();
    ck.meta["dtype"] = Tensor<T>::dtype();
    for (const auto& [name, t] : model.params.items) ck.add_tensor("param/" + name, t);
    for (const auto& [name, t] : ema.shadow.items) ck.add_tensor("ema/" + name, t);
    auto trainable = model.trainable();
    if (!opt.m.empty())
      for (std::size_t i = 0; i < trainable.size(); ++i) {
        ck.add_tensor("opt.m/" + trainable[i].first,
                      Tensor<T>(trainable[i].second.shape(), opt.m[i], false));
        ck.add_tensor("opt.v/" + trainable[i].first,
                      Tensor<T>(trainable[i].second.shape(), opt.v[i], false));
      }
    ck.save(path);
  }

  static Trainer load_checkpoint(const std::string& path, data::Vocab* vocab_out) {
    const auto ck = enc::Checkpoint::load(path);
    if (ck.meta.value("dtype", "") != Tensor<T>::dtype())
      throw FormatError("checkpoint dtype " + ck.meta.value("dtype", "?") +
                        " does not match the requested " + Tensor<T>::dtype());
    Trainer t;
    t.cfg = TrainConfig::from_json(ck.meta.at("train_config"));
    t.step = ck.meta.at("step").get<std::int64_t>();
    t.model = ClipModel<T>::init(t.cfg.model_config(), t.cfg.seed);
    for (auto& [name, tensor] : t.model.params.items) {
      auto loaded = ck.read_tensor<T>("param/" + name);
      if (loaded.shape() != tensor.shape())
        throw FormatError("checkpoint: shape mismatch on " + name);
      tensor.data() = loaded.data();
    }
    t.ema = mask::make_ema_state(t.model.ema_subset(), t.cfg.ema_momentum_base,
                                 t.cfg.total_steps);
    t.ema.t = t.step;
    for (auto& [name, tensor] : t.ema.shadow.items)
      tensor.data() = ck.read_tensor<T>("ema/" + name).data();
    t.opt.step_count = ck.meta.value("opt_step_count", std::int64_t{0});
    if (ck.has_tensor("opt.m/logit.log_tau") || t.opt.step_count > 0) {
      auto trainable = t.model.trainable();
      for (const auto& [name, tensor] : trainable) {
        t.opt.m.push_back(ck.read_tensor<T>("opt.m/" + name).data());
        t.opt.v.push_back(ck.read_tensor<T>("opt.v/" + name).data());
      }
    }
    if (vocab_out != nullptr) *vocab_out = data::Vocab::from_json(ck.meta.at("vocab"));
    return t;
  }
};

}  // namespace aclip::train
