#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "aclip/common.hpp"
#include "aclip/encoders.hpp"
#include "aclip/image.hpp"

namespace aclip::mask {

using enc::AttentionRecord;
using enc::ParamStore;
using enc::VisualEncoderConfig;
using nd::Tensor;

// ---------------------------------------------------------------------------
// Score maps
// ---------------------------------------------------------------------------

// Per-patch attentive scores over a grid, plus the geometry the grid covers.
// The mean CLS self-attention is excluded from the grid but tracked so the
// normalization invariant (grid sum + cls_mass == 1) stays checkable.
struct ScoreMap {
  int gh = 0;
  int gw = 0;
  std::vector<double> grid;  // row-major, all entries >= 0
  CropRect source_rect = CropRect::full();
  double cls_mass = 0.0;

  double at(int y, int x) const { return grid[static_cast<std::size_t>(y) * gw + x]; }
  double sum() const { return std::accumulate(grid.begin(), grid.end(), 0.0); }
};

enum class LayerReduce { All, Last };

// Eq.-style scoring: each (layer, head) softmax row is taken as-is, then the
// patch entries are averaged over heads and the selected layers. CLS keys are
// scored out of the map into cls_mass. The record must come from a forward
// over the full token set.
template <typename T>
ScoreMap attn_scores(const AttentionRecord<T>& record, int image_index,
                     LayerReduce reduce, int gh, int gw,
                     const CropRect& source_rect = CropRect::full()) {
  if (record.layers <= 0 || record.heads <= 0)
    throw StructuralError("attn_scores: attention record has no layers/heads");
  if (image_index < 0 || image_index >= record.batch)
    throw IndexError("attn_scores: image index out of range");
  if (record.keys != gh * gw + 1)
    throw StructuralError("attn_scores: record keys " + std::to_string(record.keys) +
                          " do not cover CLS + " + std::to_string(gh * gw) +
                          " patches; scores need the unmasked token set");
  const int l_begin = reduce == LayerReduce::All ? 0 : record.layers - 1;
  const int l_count = record.layers - l_begin;

  ScoreMap map;
  map.gh = gh;
  map.gw = gw;
  map.source_rect = source_rect;
  map.grid.assign(static_cast<std::size_t>(gh) * gw, 0.0);
  double cls = 0.0;
  for (int l = l_begin; l < record.layers; ++l)
    for (int h = 0; h < record.heads; ++h) {
      cls += static_cast<double>(record.at(image_index, l, h, 0));
      for (int p = 0; p < gh * gw; ++p)
        map.grid[static_cast<std::size_t>(p)] +=
            static_cast<double>(record.at(image_index, l, h, p + 1));
    }
  const double denom = static_cast<double>(l_count) * record.heads;
  for (auto& v : map.grid) v /= denom;
  map.cls_mass = cls / denom;
  return map;
}

// ---------------------------------------------------------------------------
// EMA teacher state
// ---------------------------------------------------------------------------

// mu(t) = 1 - (1 - mu0) * (cos(pi t / T) + 1) / 2; starts at mu0, ends at 1.
inline double ema_momentum(std::int64_t t, std::int64_t total_steps, double mu0) {
  if (total_steps <= 0) throw ArgumentError("ema_momentum: total_steps must be positive");
  if (t < 0 || t > total_steps)
    throw ArgumentError("ema_momentum: step " + std::to_string(t) + " outside [0, " +
                        std::to_string(total_steps) + "]");
  if (t == total_steps) return 1.0;
  const double c = (std::cos(M_PI * static_cast<double>(t) /
                             static_cast<double>(total_steps)) +
                    1.0) /
                   2.0;
  return 1.0 - (1.0 - mu0) * c;
}

template <typename T>
struct EmaState {
  ParamStore<T> shadow;  // deep copies; never require gradients
  double mu0 = 0.996;
  std::int64_t t = 0;
  std::int64_t total_steps = 1;

  double current_momentum() const { return ema_momentum(t, total_steps, mu0); }
};

// Snapshot the given (name, tensor) list into gradient-free shadow copies.
template <typename T>
EmaState<T> make_ema_state(const std::vector<std::pair<std::string, Tensor<T>>>& online,
                           double mu0, std::int64_t total_steps) {
  EmaState<T> state;
  state.mu0 = mu0;
  state.total_steps = total_steps;
  for (const auto& [name, t] : online)
    state.shadow.add(name, Tensor<T>(t.shape(), t.data(), false));
  return state;
}

// shadow <- mu * shadow + (1 - mu) * online, elementwise. The mu = 1 and
// mu = 0 endpoints short-circuit so they are bit-exact.
template <typename T>
void ema_apply(ParamStore<T>& shadow,
               const std::vector<std::pair<std::string, Tensor<T>>>& online,
               double mu) {
  if (online.size() != shadow.size())
    throw StructuralError("ema_apply: shadow holds " + std::to_string(shadow.size()) +
                          " tensors, online update has " + std::to_string(online.size()));
  for (const auto& [name, t] : online) {
    auto& sh = shadow.at(name);
    if (sh.shape() != t.shape())
      throw StructuralError("ema_apply: shape mismatch on " + name + ": " +
                            shape_str(sh.shape()) + " vs " + shape_str(t.shape()));
    if (mu == 1.0) continue;
    auto& sv = sh.data();
    const auto& ov = t.data();
    if (mu == 0.0) {
      std::copy(ov.begin(), ov.end(), sv.begin());
      continue;
    }
    const T m = static_cast<T>(mu);
    const T om = static_cast<T>(1.0 - mu);
    for (std::size_t i = 0; i < sv.size(); ++i) sv[i] = m * sv[i] + om * ov[i];
  }
}

// One schedule-driven update: applies mu(t), then advances t.
template <typename T>
void ema_update(EmaState<T>& state,
                const std::vector<std::pair<std::string, Tensor<T>>>& online) {
  ema_apply(state.shadow, online, state.current_momentum());
  ++state.t;
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

inline CropRect enclosing_rect(const std::vector<CropRect>& views) {
  if (views.empty()) throw ArgumentError("enclosing_rect: no views");
  CropRect out = views[0];
  for (const auto& v : views) {
    out.x0 = std::min(out.x0, v.x0);
    out.y0 = std::min(out.y0, v.y0);
    out.x1 = std::max(out.x1, v.x1);
    out.y1 = std::max(out.y1, v.y1);
  }
  return out;
}

// Bilinear value sampling at target cell centers in the source map's
// continuous frame; cell-center alignment with clamped borders. Values are
// interpolated (not mass-rescaled) so convexity bounds hold.
inline ScoreMap resample_scores(const ScoreMap& map, const CropRect& target_rect,
                                int gh, int gw) {
  if (!map.source_rect.contains(target_rect))
    throw GeometryError("resample_scores: target rect extends outside the source rect");
  if (gh <= 0 || gw <= 0) throw ArgumentError("resample_scores: empty target grid");
  ScoreMap out;
  out.gh = gh;
  out.gw = gw;
  out.source_rect = target_rect;
  out.cls_mass = map.cls_mass;
  out.grid.resize(static_cast<std::size_t>(gh) * gw);

  const double sw = map.source_rect.width(), sh = map.source_rect.height();
  for (int ty = 0; ty < gh; ++ty) {
    const double y = target_rect.y0 + (ty + 0.5) / gh * target_rect.height();
    double v = (y - map.source_rect.y0) / sh * map.gh - 0.5;
    v = std::clamp(v, 0.0, static_cast<double>(map.gh - 1));
    const int v0 = std::min(static_cast<int>(std::floor(v)), map.gh - 1);
    const int v1 = std::min(v0 + 1, map.gh - 1);
    const double fy = v - v0;
    for (int tx = 0; tx < gw; ++tx) {
      const double x = target_rect.x0 + (tx + 0.5) / gw * target_rect.width();
      double u = (x - map.source_rect.x0) / sw * map.gw - 0.5;
      u = std::clamp(u, 0.0, static_cast<double>(map.gw - 1));
      const int u0 = std::min(static_cast<int>(std::floor(u)), map.gw - 1);
      const int u1 = std::min(u0 + 1, map.gw - 1);
      const double fx = u - u0;
      const double top = map.at(v0, u0) + (map.at(v0, u1) - map.at(v0, u0)) * fx;
      const double bot = map.at(v1, u0) + (map.at(v1, u1) - map.at(v1, u0)) * fx;
      out.grid[static_cast<std::size_t>(ty) * gw + tx] = top + (bot - top) * fy;
    }
  }
  return out;
}

// Averages (g/P) x (g/P) blocks of patch scores into one block score.
inline ScoreMap group_scores(const ScoreMap& map, int granularity, int patch_size) {
  if (granularity <= 0 || patch_size <= 0 || granularity % patch_size != 0)
    throw ShapeError("group_scores: granularity must be a positive multiple of the patch size");
  const int bs = granularity / patch_size;
  if (bs == 1) return map;
  if (map.gh % bs != 0 || map.gw % bs != 0)
    throw ShapeError("group_scores: grid " + std::to_string(map.gw) + "x" +
                     std::to_string(map.gh) + " not divisible by block factor " +
                     std::to_string(bs));
  ScoreMap out;
  out.gh = map.gh / bs;
  out.gw = map.gw / bs;
  out.source_rect = map.source_rect;
  out.cls_mass = map.cls_mass;
  out.grid.assign(static_cast<std::size_t>(out.gh) * out.gw, 0.0);
  for (int y = 0; y < map.gh; ++y)
    for (int x = 0; x < map.gw; ++x)
      out.grid[static_cast<std::size_t>(y / bs) * out.gw + (x / bs)] += map.at(y, x);
  for (auto& v : out.grid) v /= static_cast<double>(bs) * bs;
  return out;
}

// Expands a selection made at block granularity back to patch indices.
inline std::vector<int> expand_block_selection(const std::vector<int>& blocks,
                                               int grid_h, int grid_w, int bs) {
  std::vector<int> out;
  out.reserve(blocks.size() * static_cast<std::size_t>(bs) * bs);
  const int bw = grid_w / bs;
  for (int blk : blocks) {
    const int by = blk / bw, bx = blk % bw;
    for (int dy = 0; dy < bs; ++dy)
      for (int dx = 0; dx < bs; ++dx)
        out.push_back((by * bs + dy) * grid_w + (bx * bs + dx));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Selection strategies
// ---------------------------------------------------------------------------

struct SelectionStrategy {
  enum class Kind { Low, High, Mixed };
  Kind kind = Kind::Low;
  double random_fraction = 0.25;  // rho, only meaningful for Mixed

  static SelectionStrategy low() { return {Kind::Low, 0.0}; }
  static SelectionStrategy high() { return {Kind::High, 0.0}; }
  static SelectionStrategy mixed(double rho) { return {Kind::Mixed, rho}; }

  static SelectionStrategy parse(const std::string& s) {
    if (s == "low") return low();
    if (s == "high") return high();
    if (s == "mixed" || s == "mix") return mixed(0.25);
    throw ArgumentError("unknown selection strategy: " + s);
  }
  std::string name() const {
    switch (kind) {
      case Kind::Low: return "low";
      case Kind::High: return "high";
      default: return "mixed";
    }
  }
};

namespace detail {

inline int budget_count(int n, double ratio) {
  return static_cast<int>(std::floor(static_cast<double>(n) * ratio + 1e-9));
}

// positions ordered by descending score, ties toward the smaller index
inline std::vector<int> order_by_score_desc(const std::vector<double>& scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return idx;
}

}  // namespace detail

// Low keeps the highest-score positions (the lowest scores are discarded),
// High keeps the lowest, Mixed keeps floor(N*(keep-rho)) top positions plus
// floor(N*rho) uniform draws from the remainder. Ties break toward the
// smaller index; output sorted ascending.
inline std::vector<int> select_tokens(const ScoreMap& map, double keep_ratio,
                                      const SelectionStrategy& strategy,
                                      std::uint64_t rng_seed) {
  const int n = map.gh * map.gw;
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0)
    throw ArgumentError("select_tokens: keep_ratio must lie in (0, 1]");
  const int budget = detail::budget_count(n, keep_ratio);
  if (budget < 1) throw ArgumentError("select_tokens: budget is below one token");

  std::vector<int> kept;
  switch (strategy.kind) {
    case SelectionStrategy::Kind::Low: {
      auto order = detail::order_by_score_desc(map.grid);
      kept.assign(order.begin(), order.begin() + budget);
      break;
    }
    case SelectionStrategy::Kind::High: {
      std::vector<int> order(map.grid.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return map.grid[static_cast<std::size_t>(a)] < map.grid[static_cast<std::size_t>(b)];
      });
      kept.assign(order.begin(), order.begin() + budget);
      break;
    }
    case SelectionStrategy::Kind::Mixed: {
      const double rho = strategy.random_fraction;
      if (!(rho > 0.0) || !(rho < keep_ratio))
        throw ArgumentError("select_tokens: mixed random fraction must lie in (0, keep_ratio)");
      const int top_n = detail::budget_count(n, keep_ratio - rho);
      const int rand_n = detail::budget_count(n, rho);
      auto order = detail::order_by_score_desc(map.grid);
      kept.assign(order.begin(), order.begin() + top_n);
      std::vector<int> rest(order.begin() + top_n, order.end());
      std::sort(rest.begin(), rest.end());
      Rng rng = derive_rng(rng_seed, Stream::Select);
      for (int i = 0; i < rand_n; ++i) {
        const auto j = rng.uniform_int(static_cast<std::int64_t>(rest.size()));
        kept.push_back(rest[static_cast<std::size_t>(j)]);
        rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(j));
      }
      break;
    }
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

inline std::vector<int> random_mask(int n, double keep_ratio, std::uint64_t rng_seed) {
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0)
    throw ArgumentError("random_mask: keep_ratio must lie in (0, 1]");
  const int budget = detail::budget_count(n, keep_ratio);
  if (budget < 1) throw ArgumentError("random_mask: budget is below one token");
  Rng rng = derive_rng(rng_seed, Stream::Select);
  return rng.sample_without_replacement(n, budget);
}

// ---------------------------------------------------------------------------
// View plans
// ---------------------------------------------------------------------------

enum class EmaResolution { Full, Half };
enum class BudgetMode { PerViewSplit, SingleRatio };

inline EmaResolution parse_ema_resolution(const std::string& s) {
  if (s == "full") return EmaResolution::Full;
  if (s == "half") return EmaResolution::Half;
  throw ArgumentError("unknown ema resolution: " + s);
}

inline BudgetMode parse_budget_mode(const std::string& s) {
  if (s == "views") return BudgetMode::PerViewSplit;
  if (s == "ratio") return BudgetMode::SingleRatio;
  throw ArgumentError("unknown budget mode: " + s);
}

struct PlannedView {
  CropRect rect;
  std::vector<int> kept;  // patch indices within the view's own grid
};

struct ViewPlan {
  int k = 0;
  int granularity = 0;  // g, pixels
  std::vector<PlannedView> views;
  CropRect ema_rect = CropRect::full();
  ScoreMap shared_map;  // EMA score map over ema_rect
};

// Effective keep ratio for one view under the budget mode.
inline double effective_keep_ratio(BudgetMode mode, int k, double keep_ratio, int n) {
  if (mode == BudgetMode::SingleRatio) return keep_ratio;
  const int per_view = n / k;
  if (per_view < 1) throw ArgumentError("view budget below one token (k too large)");
  return static_cast<double>(per_view) / static_cast<double>(n);
}

// Per-view selection from a shared score map: bilinear resample to the view's
// patch grid, optional block grouping, then strategy selection. Per-view RNG
// streams derive from (seed, image_id, view_id).
inline ViewPlan plan_from_map(const ScoreMap& shared_map,
                              const std::vector<CropRect>& crops, int view_grid,
                              double keep_ratio, BudgetMode budget,
                              const SelectionStrategy& strategy, int granularity,
                              int patch_size, std::uint64_t seed,
                              std::uint64_t image_id) {
  if (crops.empty()) throw ArgumentError("plan_from_map: no views");
  ViewPlan plan;
  plan.k = static_cast<int>(crops.size());
  plan.granularity = granularity;
  plan.ema_rect = shared_map.source_rect;
  plan.shared_map = shared_map;
  const int n = view_grid * view_grid;
  const double ratio = effective_keep_ratio(budget, plan.k, keep_ratio, n);
  const int bs = granularity / patch_size;
  for (std::size_t vi = 0; vi < crops.size(); ++vi) {
    PlannedView view;
    view.rect = crops[vi];
    ScoreMap local = resample_scores(shared_map, crops[vi], view_grid, view_grid);
    const std::uint64_t view_seed = mix_seed(seed, image_id, vi);
    if (bs > 1) {
      // block selection keeps the same fraction of blocks as of tokens
      ScoreMap grouped = group_scores(local, granularity, patch_size);
      auto blocks = select_tokens(grouped, ratio, strategy, view_seed);
      view.kept = expand_block_selection(blocks, view_grid, view_grid, bs);
    } else {
      view.kept = select_tokens(local, ratio, strategy, view_seed);
    }
    plan.views.push_back(std::move(view));
  }
  return plan;
}

// Single-image convenience: run the EMA encoder once on the enclosing rect of
// the crops (at full or half encoder resolution) and plan each view from the
// shared map. The trainer uses the same pieces batched.
template <typename T>
ViewPlan build_view_plan(const ParamStore<T>& ema_params,
                         const VisualEncoderConfig& cfg, const Image& image,
                         const std::vector<CropRect>& crops, double keep_ratio,
                         BudgetMode budget, const SelectionStrategy& strategy,
                         int granularity, EmaResolution ema_res, LayerReduce reduce,
                         std::uint64_t seed, std::uint64_t image_id) {
  const CropRect ema_rect = enclosing_rect(crops);
  const int res = ema_res == EmaResolution::Full ? cfg.image_size : cfg.image_size / 2;
  if (res % cfg.patch_size != 0)
    throw ShapeError("build_view_plan: reduced resolution is not a multiple of the patch size");
  const Image ema_view = crop_resize(image, ema_rect, res, res);
  const int g = res / cfg.patch_size;

  nd::NoGradGuard ng;
  auto tokens = Tensor<T>(Shape{1, g * g, cfg.patch_dim()},
                          enc::patchify<T>(ema_view, cfg.patch_size), false);
  enc::VisualOutput<T> out;
  if (ema_res == EmaResolution::Half) {
    auto pos = enc::interpolate_pos_embed(ema_params.at("visual.pos"), g);
    out = enc::vit_forward(ema_params, cfg, tokens, nullptr, &pos);
  } else {
    out = enc::vit_forward(ema_params, cfg, tokens, nullptr, nullptr);
  }
  ScoreMap shared = attn_scores(out.attn, 0, reduce, g, g, ema_rect);
  return plan_from_map(shared, crops, cfg.grid(), keep_ratio, budget, strategy,
                       granularity, cfg.patch_size, seed, image_id);
}

// ---------------------------------------------------------------------------
// Visualization (PPM triptych material)
// ---------------------------------------------------------------------------

// Grayscale heatmap: scores scaled so the max maps to white.
inline Image render_heatmap(const ScoreMap& map, int image_size) {
  double mx = 0.0;
  for (double v : map.grid) mx = std::max(mx, v);
  Image img(image_size, image_size);
  const int cell_h = image_size / map.gh, cell_w = image_size / map.gw;
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x) {
      const int gy = std::min(y / cell_h, map.gh - 1);
      const int gx = std::min(x / cell_w, map.gw - 1);
      const float v = mx > 0.0 ? static_cast<float>(map.at(gy, gx) / mx) : 0.0f;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = v;
    }
  return img;
}

// Masked composite: dropped patches become mid-gray.
inline Image render_masked(const Image& view_pixels, const std::vector<int>& kept,
                           int patch_size) {
  const int g = view_pixels.width / patch_size;
  std::vector<char> keep_flag(static_cast<std::size_t>(g) * g, 0);
  for (int idx : kept) keep_flag[static_cast<std::size_t>(idx)] = 1;
  Image out = view_pixels;
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      if (keep_flag[static_cast<std::size_t>(gy) * g + gx]) continue;
      for (int c = 0; c < 3; ++c)
        for (int py = 0; py < patch_size; ++py)
          for (int px = 0; px < patch_size; ++px)
            out.at(c, gy * patch_size + py, gx * patch_size + px) = 0.5f;
    }
  return out;
}

}  // namespace aclip::mask
