#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclip/common.hpp"
#include "aclip/image.hpp"
#include "aclip/tensor.hpp"

namespace aclip::enc {

using nlohmann::json;
using nd::Tensor;

constexpr double kMaskLogit = -1e30;

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

struct VisualEncoderConfig {
  int image_size = 32;
  int patch_size = 8;
  int layers = 2;
  int heads = 2;
  int width = 64;
  int embed_dim = 32;
  bool frozen_patch_embed = true;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return 3 * patch_size * patch_size; }
  int head_dim() const { return width / heads; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw ShapeError("visual config: image_size must be a positive multiple of patch_size");
    if (width <= 0 || heads <= 0 || width % heads != 0)
      throw ShapeError("visual config: width must be a positive multiple of heads");
    if (layers <= 0 || embed_dim <= 0)
      throw ArgumentError("visual config: layers and embed_dim must be positive");
  }

  json to_json() const {
    return json{{"image_size", image_size}, {"patch_size", patch_size},
                {"layers", layers},         {"heads", heads},
                {"width", width},           {"embed_dim", embed_dim},
                {"frozen_patch_embed", frozen_patch_embed}};
  }
  static VisualEncoderConfig from_json(const json& j) {
    VisualEncoderConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.width = j.value("width", c.width);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.frozen_patch_embed = j.value("frozen_patch_embed", c.frozen_patch_embed);
    return c;
  }
};

struct TextEncoderConfig {
  int vocab_size = 32;
  int context_length = 16;
  int layers = 2;
  int heads = 2;
  int width = 64;
  int embed_dim = 32;

  int head_dim() const { return width / heads; }

  void validate() const {
    if (context_length < 2)
      throw ArgumentError("text config: context_length must be >= 2 (room for EOS)");
    if (width <= 0 || heads <= 0 || width % heads != 0)
      throw ShapeError("text config: width must be a positive multiple of heads");
    if (layers <= 0 || vocab_size <= 0 || embed_dim <= 0)
      throw ArgumentError("text config: layers, vocab_size, embed_dim must be positive");
  }

  json to_json() const {
    return json{{"vocab_size", vocab_size}, {"context_length", context_length},
                {"layers", layers},         {"heads", heads},
                {"width", width},           {"embed_dim", embed_dim}};
  }
  static TextEncoderConfig from_json(const json& j) {
    TextEncoderConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.context_length = j.value("context_length", c.context_length);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.width = j.value("width", c.width);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Ordered parameter registry; Tensor handles share storage with the model.
// ---------------------------------------------------------------------------

template <typename T>
struct ParamStore {
  std::vector<std::pair<std::string, Tensor<T>>> items;

  void add(const std::string& name, Tensor<T> t) {
    if (has(name)) throw ArgumentError("duplicate parameter: " + name);
    items.emplace_back(name, std::move(t));
  }
  bool has(const std::string& name) const {
    for (const auto& [n, t] : items)
      if (n == name) return true;
    return false;
  }
  Tensor<T>& at(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return t;
    throw ArgumentError("unknown parameter: " + name);
  }
  const Tensor<T>& at(const std::string& name) const {
    for (const auto& [n, t] : items)
      if (n == name) return t;
    throw ArgumentError("unknown parameter: " + name);
  }
  std::size_t size() const { return items.size(); }

  void zero_grad() {
    for (auto& [n, t] : items) t.zero_grad();
  }
};

// ---------------------------------------------------------------------------
// Attention record: CLS-row attention weights per (layer, head), per image.
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionRecord {
  int batch = 0;
  int layers = 0;
  int heads = 0;
  int keys = 0;                // CLS + surviving patches
  std::vector<T> cls_rows;     // [batch, layers, heads, keys]

  T at(int b, int l, int h, int k) const {
    return cls_rows[((static_cast<std::size_t>(b) * layers + l) * heads + h) * keys + k];
  }
};

// ---------------------------------------------------------------------------
// Patchify
// ---------------------------------------------------------------------------

// Tokens ordered row-major over the patch grid; within a token the layout is
// channel-major (c, py, px).
template <typename T>
std::vector<T> patchify(const Image& img, int patch_size) {
  if (img.height % patch_size != 0 || img.width % patch_size != 0)
    throw ShapeError("patchify: image " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + " not divisible by patch size " +
                     std::to_string(patch_size));
  const int gh = img.height / patch_size, gw = img.width / patch_size;
  const int pd = 3 * patch_size * patch_size;
  std::vector<T> out(static_cast<std::size_t>(gh) * gw * pd);
  std::size_t o = 0;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx)
      for (int c = 0; c < 3; ++c)
        for (int py = 0; py < patch_size; ++py)
          for (int px = 0; px < patch_size; ++px)
            out[o++] = static_cast<T>(
                img.at(c, gy * patch_size + py, gx * patch_size + px));
  return out;
}

template <typename T>
Image unpatchify(const std::vector<T>& tokens, int image_size, int patch_size) {
  const int g = image_size / patch_size;
  if (static_cast<std::int64_t>(tokens.size()) !=
      static_cast<std::int64_t>(g) * g * 3 * patch_size * patch_size)
    throw ShapeError("unpatchify: token buffer does not match the stated geometry");
  Image img(image_size, image_size);
  std::size_t o = 0;
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx)
      for (int c = 0; c < 3; ++c)
        for (int py = 0; py < patch_size; ++py)
          for (int px = 0; px < patch_size; ++px)
            img.at(c, gy * patch_size + py, gx * patch_size + px) =
                static_cast<float>(tokens[o++]);
  return img;
}

// ---------------------------------------------------------------------------
// Position embedding interpolation (bicubic Catmull-Rom, cell centers,
// linear extension at the borders; CLS row passes through untouched).
// ---------------------------------------------------------------------------

namespace detail {

inline double catmull_rom_weight(double t) {
  t = std::abs(t);
  if (t < 1.0) return ((1.5 * t - 2.5) * t) * t + 1.0;
  if (t < 2.0) return (((-0.5 * t + 2.5) * t) - 4.0) * t + 2.0;
  return 0.0;
}

// Sample a 1-d sequence of length n at continuous index u with Catmull-Rom;
// out-of-range taps are linearly extrapolated from the boundary pair.
template <typename T>
double catmull_rom_1d(const T* v, std::int64_t n, std::int64_t stride, double u) {
  auto fetch = [&](std::int64_t i) -> double {
    if (i < 0)
      return static_cast<double>(v[0]) +
             static_cast<double>(i) *
                 (static_cast<double>(v[stride]) - static_cast<double>(v[0]));
    if (i >= n)
      return static_cast<double>(v[(n - 1) * stride]) +
             static_cast<double>(i - (n - 1)) *
                 (static_cast<double>(v[(n - 1) * stride]) -
                  static_cast<double>(v[(n - 2) * stride]));
    return static_cast<double>(v[i * stride]);
  };
  const auto i0 = static_cast<std::int64_t>(std::floor(u));
  double acc = 0.0;
  for (std::int64_t k = -1; k <= 2; ++k)
    acc += catmull_rom_weight(u - static_cast<double>(i0 + k)) * fetch(i0 + k);
  return acc;
}

}  // namespace detail

// pos: [1 + g*g, width] with the CLS embedding in row 0. Returns
// [1 + g'*g', width].
template <typename T>
Tensor<T> interpolate_pos_embed(const Tensor<T>& pos, int new_grid) {
  if (pos.rank() != 2) throw ShapeError("interpolate_pos_embed: rank-2 input required");
  const std::int64_t rows = pos.dim(0), width = pos.dim(1);
  const auto g = static_cast<int>(std::llround(std::sqrt(static_cast<double>(rows - 1))));
  if (static_cast<std::int64_t>(g) * g + 1 != rows || g < 2)
    throw ShapeError("interpolate_pos_embed: input is not CLS + a square grid (g >= 2)");
  if (new_grid < 2) throw ArgumentError("interpolate_pos_embed: target grid must be >= 2");

  const auto& pv = pos.data();
  std::vector<T> out(static_cast<std::size_t>(1 + new_grid * new_grid) * width);
  std::copy(pv.begin(), pv.begin() + width, out.begin());  // CLS untouched

  const double scale = static_cast<double>(g) / new_grid;
  std::vector<double> rowbuf(static_cast<std::size_t>(g));
  for (std::int64_t c = 0; c < width; ++c) {
    for (int ty = 0; ty < new_grid; ++ty) {
      const double uy = (ty + 0.5) * scale - 0.5;
      // horizontal pass at each source row, then vertical Catmull-Rom
      for (int tx = 0; tx < new_grid; ++tx) {
        const double ux = (tx + 0.5) * scale - 0.5;
        for (int sy = 0; sy < g; ++sy) {
          const T* row = pv.data() + (1 + static_cast<std::int64_t>(sy) * g) * width + c;
          rowbuf[static_cast<std::size_t>(sy)] =
              detail::catmull_rom_1d(row, g, width, ux);
        }
        // vertical pass over the horizontal results
        auto fetch = [&](std::int64_t i) -> double {
          if (i < 0)
            return rowbuf[0] + static_cast<double>(i) * (rowbuf[1] - rowbuf[0]);
          if (i >= g)
            return rowbuf[static_cast<std::size_t>(g - 1)] +
                   static_cast<double>(i - (g - 1)) *
                       (rowbuf[static_cast<std::size_t>(g - 1)] -
                        rowbuf[static_cast<std::size_t>(g - 2)]);
          return rowbuf[static_cast<std::size_t>(i)];
        };
        const auto i0 = static_cast<std::int64_t>(std::floor(uy));
        double acc = 0.0;
        for (std::int64_t k = -1; k <= 2; ++k)
          acc += detail::catmull_rom_weight(uy - static_cast<double>(i0 + k)) *
                 fetch(i0 + k);
        out[(1 + static_cast<std::size_t>(ty) * new_grid + tx) * width +
            static_cast<std::size_t>(c)] = static_cast<T>(acc);
      }
    }
  }
  return Tensor<T>(Shape{1 + static_cast<std::int64_t>(new_grid) * new_grid, width},
                   std::move(out), false);
}

// ---------------------------------------------------------------------------
// Transformer internals shared by both encoders
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> init_weight(Shape shape, double std, Rng& rng, bool requires_grad) {
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(std));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
void init_block(ParamStore<T>& p, const std::string& prefix, int width, Rng& rng) {
  const double w_std = 1.0 / std::sqrt(static_cast<double>(width));
  p.add(prefix + ".ln1.g", Tensor<T>::full({width}, T(1), true));
  p.add(prefix + ".ln1.b", Tensor<T>::zeros({width}, true));
  for (const char* name : {"wq", "wk", "wv", "wo"})
    p.add(prefix + ".attn." + std::string(name),
          init_weight<T>({width, width}, w_std, rng, true));
  for (const char* name : {"bq", "bk", "bv", "bo"})
    p.add(prefix + ".attn." + std::string(name), Tensor<T>::zeros({width}, true));
  p.add(prefix + ".ln2.g", Tensor<T>::full({width}, T(1), true));
  p.add(prefix + ".ln2.b", Tensor<T>::zeros({width}, true));
  p.add(prefix + ".mlp.w1", init_weight<T>({width, 4 * width}, w_std, rng, true));
  p.add(prefix + ".mlp.b1", Tensor<T>::zeros({4 * width}, true));
  p.add(prefix + ".mlp.w2",
        init_weight<T>({4 * width, width}, 1.0 / std::sqrt(4.0 * width), rng, true));
  p.add(prefix + ".mlp.b2", Tensor<T>::zeros({width}, true));
}

// Pre-norm block: x += attn(ln1(x)); x += mlp(ln2(x)).
// attn_bias, when present, is a [S*S] additive logit mask shared per row.
// cls_rows_out, when present, receives the CLS-query attention row values.
template <typename T>
Tensor<T> run_block(const ParamStore<T>& p, const std::string& prefix,
                    const Tensor<T>& x, int heads,
                    const std::vector<std::type_identity_t<T>>* attn_bias,
                    std::vector<std::type_identity_t<T>>* cls_rows_out) {
  const std::int64_t B = x.dim(0), S = x.dim(1), W = x.dim(2);
  const std::int64_t C = W / heads;

  auto h = nd::layer_norm(x, p.at(prefix + ".ln1.g"), p.at(prefix + ".ln1.b"));
  auto heads_of = [&](const Tensor<T>& y) {
    return nd::swap_axes12(nd::reshape(y, Shape{B, S, heads, C}));  // [B,H,S,C]
  };
  auto q = heads_of(nd::linear(h, p.at(prefix + ".attn.wq"), p.at(prefix + ".attn.bq")));
  auto k = heads_of(nd::linear(h, p.at(prefix + ".attn.wk"), p.at(prefix + ".attn.bk")));
  auto v = heads_of(nd::linear(h, p.at(prefix + ".attn.wv"), p.at(prefix + ".attn.bv")));

  auto scores = nd::scale(nd::matmul(q, nd::transpose_last(k)),
                          static_cast<T>(1.0 / std::sqrt(static_cast<double>(C))));
  if (attn_bias != nullptr) {
    Tensor<T> bias(Shape{S * S}, *attn_bias, false);
    scores = nd::reshape(
        nd::add_bias(nd::reshape(scores, Shape{B * heads, S * S}), bias),
        Shape{B, heads, S, S});
  }
  auto probs = nd::softmax(scores, -1);  // [B,H,S,S]

  if (cls_rows_out != nullptr) {
    // CLS is query row 0; copy its attention over all keys, per (b, h)
    const auto& pv = probs.data();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t hh = 0; hh < heads; ++hh) {
        const T* row = pv.data() + ((b * heads + hh) * S + 0) * S;
        cls_rows_out->insert(cls_rows_out->end(), row, row + S);
      }
  }

  auto ctx = nd::reshape(nd::swap_axes12(nd::matmul(probs, v)), Shape{B, S, W});
  auto attn_out = nd::linear(ctx, p.at(prefix + ".attn.wo"), p.at(prefix + ".attn.bo"));
  auto x1 = nd::add(x, attn_out);

  auto h2 = nd::layer_norm(x1, p.at(prefix + ".ln2.g"), p.at(prefix + ".ln2.b"));
  auto m = nd::linear(nd::gelu(nd::linear(h2, p.at(prefix + ".mlp.w1"),
                                          p.at(prefix + ".mlp.b1"))),
                      p.at(prefix + ".mlp.w2"), p.at(prefix + ".mlp.b2"));
  return nd::add(x1, m);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Visual encoder
// ---------------------------------------------------------------------------

template <typename T>
struct VisualOutput {
  Tensor<T> cls_feature;     // [B, width]
  Tensor<T> patch_features;  // [B, K, width]
  AttentionRecord<T> attn;
};

template <typename T>
void init_visual_params(ParamStore<T>& p, const VisualEncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const bool train_patch = !cfg.frozen_patch_embed;
  p.add("visual.patch_embed.w",
        detail::init_weight<T>({cfg.patch_dim(), cfg.width},
                               1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())),
                               rng, train_patch));
  p.add("visual.patch_embed.b", Tensor<T>::zeros({cfg.width}, train_patch));
  p.add("visual.cls", detail::init_weight<T>({cfg.width}, 0.02, rng, true));
  p.add("visual.pos",
        detail::init_weight<T>({cfg.tokens() + 1, cfg.width}, 0.01, rng, true));
  for (int l = 0; l < cfg.layers; ++l)
    detail::init_block(p, "visual.blk" + std::to_string(l), cfg.width, rng);
  p.add("visual.ln_f.g", Tensor<T>::full({cfg.width}, T(1), true));
  p.add("visual.ln_f.b", Tensor<T>::zeros({cfg.width}, true));
  p.add("visual.proj",
        detail::init_weight<T>({cfg.width, cfg.embed_dim},
                               1.0 / std::sqrt(static_cast<double>(cfg.width)), rng,
                               true));
}

// tokens: [B, N, patch_dim]. keep, when given, lists per-image surviving
// patch indices (distinct, sorted ascending, in [0, N)); position embeddings
// are gathered with the same indices and CLS is always prepended.
// pos_override substitutes the position table (used for reduced-resolution
// inputs whose grid differs from the trained one).
template <typename T>
VisualOutput<T> vit_forward(const ParamStore<T>& p, const VisualEncoderConfig& cfg,
                            const Tensor<T>& tokens,
                            const std::vector<std::vector<int>>* keep = nullptr,
                            const Tensor<std::type_identity_t<T>>* pos_override = nullptr) {
  if (tokens.rank() != 3) throw ShapeError("vit_forward: tokens must be [B, N, patch_dim]");
  const std::int64_t B = tokens.dim(0), N = tokens.dim(1);
  if (tokens.dim(2) != cfg.patch_dim())
    throw ShapeError("vit_forward: patch dim " + std::to_string(tokens.dim(2)) +
                     " does not match config " + std::to_string(cfg.patch_dim()));
  const Tensor<T>& pos = pos_override != nullptr ? *pos_override : p.at("visual.pos");
  if (pos.dim(0) != N + 1)
    throw ShapeError("vit_forward: position table rows " + std::to_string(pos.dim(0)) +
                     " do not cover N+1 = " + std::to_string(N + 1));

  if (keep != nullptr) {
    if (static_cast<std::int64_t>(keep->size()) != B)
      throw IndexError("vit_forward: one keep list per image required");
    for (const auto& list : *keep) {
      if (list.empty()) throw IndexError("vit_forward: empty keep list");
      for (std::size_t i = 0; i < list.size(); ++i) {
        if (list[i] < 0 || list[i] >= N)
          throw IndexError("vit_forward: keep index " + std::to_string(list[i]) +
                           " out of range [0, " + std::to_string(N) + ")");
        if (i > 0 && list[i] <= list[i - 1])
          throw IndexError("vit_forward: keep indices must be sorted and distinct");
      }
    }
  }

  Tensor<T> x;  // [B, K, width]
  Tensor<T> pos_seq;
  if (keep != nullptr) {
    auto tok = nd::gather_rows(tokens, *keep);
    x = nd::linear(tok, p.at("visual.patch_embed.w"), p.at("visual.patch_embed.b"));
    std::vector<std::vector<int>> pidx(keep->size());
    for (std::size_t b = 0; b < keep->size(); ++b) {
      pidx[b].push_back(0);  // CLS position
      for (int i : (*keep)[b]) pidx[b].push_back(i + 1);
    }
    pos_seq = nd::gather_rows(nd::expand_dim0(pos, B), pidx);  // [B, K+1, w]
  } else {
    x = nd::linear(tokens, p.at("visual.patch_embed.w"), p.at("visual.patch_embed.b"));
  }

  auto cls = nd::expand_dim0(nd::reshape(p.at("visual.cls"), Shape{1, cfg.width}), B);
  auto seq = nd::concat<T>({cls, x}, 1);  // [B, K+1, w]
  if (keep != nullptr) {
    seq = nd::add(seq, pos_seq);
  } else {
    seq = nd::reshape(nd::add_bias(nd::reshape(seq, Shape{B, (N + 1) * cfg.width}),
                                   nd::reshape(pos, Shape{(N + 1) * cfg.width})),
                      Shape{B, N + 1, cfg.width});
  }

  const std::int64_t S = seq.dim(1);
  AttentionRecord<T> record;
  record.batch = static_cast<int>(B);
  record.layers = cfg.layers;
  record.heads = cfg.heads;
  record.keys = static_cast<int>(S);
  std::vector<T> rows;  // appended as [l][b][h][S]; reordered below
  rows.reserve(static_cast<std::size_t>(cfg.layers) * B * cfg.heads * S);
  for (int l = 0; l < cfg.layers; ++l)
    seq = detail::run_block(p, "visual.blk" + std::to_string(l), seq, cfg.heads,
                            nullptr, &rows);
  record.cls_rows.resize(rows.size());
  for (std::int64_t l = 0; l < cfg.layers; ++l)
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < cfg.heads; ++h)
        std::copy(rows.data() + (((l * B + b) * cfg.heads + h) * S),
                  rows.data() + (((l * B + b) * cfg.heads + h + 1) * S),
                  record.cls_rows.data() + (((b * cfg.layers + l) * cfg.heads + h) * S));

  seq = nd::layer_norm(seq, p.at("visual.ln_f.g"), p.at("visual.ln_f.b"));
  VisualOutput<T> out;
  out.cls_feature =
      nd::reshape(nd::gather(seq, {0}, 1), Shape{B, cfg.width});
  std::vector<std::int64_t> rest(static_cast<std::size_t>(S - 1));
  for (std::int64_t i = 1; i < S; ++i) rest[static_cast<std::size_t>(i - 1)] = i;
  out.patch_features = nd::gather(seq, rest, 1);
  out.attn = std::move(record);
  return out;
}

// ---------------------------------------------------------------------------
// Text encoder (causal; feature pooled at the EOS position)
// ---------------------------------------------------------------------------

template <typename T>
void init_text_params(ParamStore<T>& p, const TextEncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  p.add("text.tok", detail::init_weight<T>({cfg.vocab_size, cfg.width}, 0.02, rng, true));
  p.add("text.pos", detail::init_weight<T>({cfg.context_length, cfg.width}, 0.02, rng, true));
  for (int l = 0; l < cfg.layers; ++l)
    detail::init_block(p, "text.blk" + std::to_string(l), cfg.width, rng);
  p.add("text.ln_f.g", Tensor<T>::full({cfg.width}, T(1), true));
  p.add("text.ln_f.b", Tensor<T>::zeros({cfg.width}, true));
  p.add("text.proj",
        detail::init_weight<T>({cfg.width, cfg.embed_dim},
                               1.0 / std::sqrt(static_cast<double>(cfg.width)), rng,
                               true));
}

// token_ids: one sequence per image, each padded to the context length, with
// exactly one EOS. The causal mask keeps post-EOS padding out of every
// position at or before the EOS, so the pooled feature ignores padding.
template <typename T>
Tensor<T> text_forward(const ParamStore<T>& p, const TextEncoderConfig& cfg,
                       const std::vector<std::vector<std::int64_t>>& token_ids,
                       std::int64_t eos_id) {
  const auto B = static_cast<std::int64_t>(token_ids.size());
  if (B == 0) throw ArgumentError("text_forward: empty batch");
  const std::int64_t S = cfg.context_length;
  std::vector<std::vector<int>> eos_pos(static_cast<std::size_t>(B));
  std::vector<std::int64_t> flat;
  flat.reserve(static_cast<std::size_t>(B * S));
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& ids = token_ids[static_cast<std::size_t>(b)];
    if (static_cast<std::int64_t>(ids.size()) != S)
      throw FormatError("text_forward: sequence " + std::to_string(b) +
                        " length " + std::to_string(ids.size()) +
                        " != context length " + std::to_string(S));
    int count = 0, where = -1;
    for (std::int64_t i = 0; i < S; ++i) {
      if (ids[static_cast<std::size_t>(i)] < 0 ||
          ids[static_cast<std::size_t>(i)] >= cfg.vocab_size)
        throw IndexError("text_forward: token id out of vocabulary range");
      if (ids[static_cast<std::size_t>(i)] == eos_id) {
        ++count;
        if (where < 0) where = static_cast<int>(i);
      }
      flat.push_back(ids[static_cast<std::size_t>(i)]);
    }
    if (count != 1)
      throw FormatError("text_forward: sequence " + std::to_string(b) +
                        " must contain exactly one EOS, found " + std::to_string(count));
    eos_pos[static_cast<std::size_t>(b)] = {where};
  }

  auto x = nd::reshape(nd::embedding_lookup(p.at("text.tok"), flat),
                       Shape{B, S, cfg.width});
  x = nd::reshape(nd::add_bias(nd::reshape(x, Shape{B, S * cfg.width}),
                               nd::reshape(p.at("text.pos"), Shape{S * cfg.width})),
                  Shape{B, S, cfg.width});

  std::vector<T> causal(static_cast<std::size_t>(S * S), T(0));
  for (std::int64_t i = 0; i < S; ++i)
    for (std::int64_t j = i + 1; j < S; ++j)
      causal[static_cast<std::size_t>(i * S + j)] = static_cast<T>(kMaskLogit);

  for (int l = 0; l < cfg.layers; ++l)
    x = detail::run_block(p, "text.blk" + std::to_string(l), x, cfg.heads, &causal,
                          nullptr);
  x = nd::layer_norm(x, p.at("text.ln_f.g"), p.at("text.ln_f.b"));
  return nd::reshape(nd::gather_rows(x, eos_pos), Shape{B, cfg.width});
}

// ---------------------------------------------------------------------------
// Projection into the shared embedding space
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> project_and_normalize(const Tensor<T>& feature, const Tensor<T>& proj) {
  auto y = nd::matmul(feature, proj);
  auto norms = nd::sqrt(nd::reduce(nd::square(y), -1, nd::Reduce::Sum));
  for (const T n : norms.data())
    if (!(static_cast<double>(n) > 1e-8))
      throw ContractError("project_and_normalize: degenerate embedding (norm " +
                          std::to_string(static_cast<double>(n)) + ")");
  return nd::scale_rows(y, nd::reciprocal(norms));
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
// Byte layout: 8-byte magic "ACLIPCK1", a little-endian uint32 header length,
// the UTF-8 JSON header, then the raw tensor bytes. The header maps each
// tensor name to {shape, dtype, offset, nbytes}; offsets are relative to the
// start of the data section, in registration order, densely packed.
// ---------------------------------------------------------------------------

struct Checkpoint {
  struct Entry {
    std::string name;
    std::string dtype;  // "float32" | "float64"
    Shape shape;
    std::vector<std::uint8_t> bytes;
  };

  json meta = json::object();
  std::vector<Entry> tensors;

  template <typename T>
  void add_tensor(const std::string& name, const Tensor<T>& t) {
    Entry e;
    e.name = name;
    e.dtype = Tensor<T>::dtype();
    e.shape = t.shape();
    e.bytes.resize(t.data().size() * sizeof(T));
    std::memcpy(e.bytes.data(), t.data().data(), e.bytes.size());
    tensors.push_back(std::move(e));
  }

  template <typename T>
  Tensor<T> read_tensor(const std::string& name) const {
    for (const auto& e : tensors) {
      if (e.name != name) continue;
      if (e.dtype != Tensor<T>::dtype())
        throw FormatError("checkpoint tensor " + name + " has dtype " + e.dtype +
                          ", requested " + Tensor<T>::dtype());
      std::vector<T> v(e.bytes.size() / sizeof(T));
      std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
      return Tensor<T>(e.shape, std::move(v), false);
    }
    throw FormatError("checkpoint tensor not found: " + name);
  }

  bool has_tensor(const std::string& name) const {
    for (const auto& e : tensors)
      if (e.name == name) return true;
    return false;
  }

  void save(const std::string& path) const {
    json header;
    header["meta"] = meta;
    json tens = json::object();
    std::uint64_t offset = 0;
    for (const auto& e : tensors) {
      tens[e.name] = json{{"shape", e.shape},
                          {"dtype", e.dtype},
                          {"offset", offset},
                          {"nbytes", e.bytes.size()}};
      offset += e.bytes.size();
    }
    header["tensors"] = tens;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write("ACLIPCK1", 8);
    const auto hlen = static_cast<std::uint32_t>(hs.size());
    std::uint8_t lenb[4] = {static_cast<std::uint8_t>(hlen & 0xFF),
                            static_cast<std::uint8_t>((hlen >> 8) & 0xFF),
                            static_cast<std::uint8_t>((hlen >> 16) & 0xFF),
                            static_cast<std::uint8_t>((hlen >> 24) & 0xFF)};
    f.write(reinterpret_cast<const char*>(lenb), 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& e : tensors)
      f.write(reinterpret_cast<const char*>(e.bytes.data()),
              static_cast<std::streamsize>(e.bytes.size()));
    if (!f) throw IoError("short write on checkpoint: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "ACLIPCK1", 8) != 0)
      throw FormatError("checkpoint: bad magic in " + path);
    std::uint8_t lenb[4];
    f.read(reinterpret_cast<char*>(lenb), 4);
    if (!f) throw FormatError("checkpoint: truncated header length");
    const std::uint32_t hlen = static_cast<std::uint32_t>(lenb[0]) |
                               (static_cast<std::uint32_t>(lenb[1]) << 8) |
                               (static_cast<std::uint32_t>(lenb[2]) << 16) |
                               (static_cast<std::uint32_t>(lenb[3]) << 24);
    std::string hs(hlen, '\0');
    f.read(hs.data(), hlen);
    if (!f) throw FormatError("checkpoint: truncated header");
    json header;
    try {
      header = json::parse(hs);
    } catch (const json::exception& e) {
      throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
    }

    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    Checkpoint ck;
    ck.meta = header.value("meta", json::object());
    // preserve offset order
    std::vector<std::pair<std::uint64_t, std::string>> order;
    for (auto it = header.at("tensors").begin(); it != header.at("tensors").end(); ++it)
      order.emplace_back(it.value().at("offset").get<std::uint64_t>(), it.key());
    std::sort(order.begin(), order.end());
    for (const auto& [offset, name] : order) {
      const auto& tj = header.at("tensors").at(name);
      Entry e;
      e.name = name;
      e.dtype = tj.at("dtype").get<std::string>();
      e.shape = tj.at("shape").get<Shape>();
      const auto nbytes = tj.at("nbytes").get<std::uint64_t>();
      if (offset + nbytes > data.size())
        throw FormatError("checkpoint: tensor " + name + " overruns the data section");
      e.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(offset),
                     data.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
      ck.tensors.push_back(std::move(e));
    }
    return ck;
  }
};

}  // namespace aclip::enc
