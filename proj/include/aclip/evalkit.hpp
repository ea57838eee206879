#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclip/attnmask.hpp"
#include "aclip/common.hpp"
#include "aclip/dataio.hpp"
#include "aclip/encoders.hpp"
#include "aclip/model.hpp"

namespace aclip::eval {

using nd::Tensor;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

// Full-image (unmasked) embeddings for a set of images. `params` selects the
// weights: the online store or the EMA shadow store.
template <typename T>
std::vector<std::vector<double>> embed_images(const enc::ParamStore<T>& params,
                                              const enc::VisualEncoderConfig& cfg,
                                              const std::vector<Image>& images) {
  nd::NoGradGuard ng;
  std::vector<std::vector<double>> out;
  const int n = cfg.tokens();
  constexpr int kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const auto count = std::min<std::size_t>(kChunk, images.size() - start);
    std::vector<T> buf;
    buf.reserve(count * static_cast<std::size_t>(n) * cfg.patch_dim());
    for (std::size_t i = 0; i < count; ++i) {
      Image im = images[start + i];
      if (im.height != cfg.image_size || im.width != cfg.image_size)
        im = resize_bilinear(im, cfg.image_size, cfg.image_size);
      const auto toks = enc::patchify<T>(im, cfg.patch_size);
      buf.insert(buf.end(), toks.begin(), toks.end());
    }
    Tensor<T> tokens(Shape{static_cast<std::int64_t>(count), n, cfg.patch_dim()},
                     std::move(buf), false);
    auto fwd = enc::vit_forward(params, cfg, tokens);
    auto e = enc::project_and_normalize(fwd.cls_feature, params.at("visual.proj"));
    const auto d = e.dim(-1);
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> row(static_cast<std::size_t>(d));
      for (std::int64_t j = 0; j < d; ++j)
        row[static_cast<std::size_t>(j)] = static_cast<double>(
            e.data()[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)]);
      out.push_back(std::move(row));
    }
  }
  return out;
}

template <typename T>
std::vector<std::vector<double>> embed_texts(const enc::ParamStore<T>& params,
                                             const enc::TextEncoderConfig& cfg,
                                             const std::vector<std::string>& texts,
                                             const data::Vocab& vocab) {
  nd::NoGradGuard ng;
  std::vector<std::vector<std::int64_t>> ids;
  for (const auto& t : texts) ids.push_back(data::tokenize(t, vocab, cfg.context_length));
  auto feat = enc::text_forward(params, cfg, ids, data::Vocab::kEos);
  auto e = enc::project_and_normalize(feat, params.at("text.proj"));
  const auto d = e.dim(-1);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(d));
    for (std::int64_t j = 0; j < d; ++j)
      row[static_cast<std::size_t>(j)] = static_cast<double>(
          e.data()[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)]);
    out.push_back(std::move(row));
  }
  return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// ---------------------------------------------------------------------------
// Zero-shot classification
// ---------------------------------------------------------------------------

struct ZeroShotResult {
  double top1 = 0.0;
  std::vector<int> predictions;
};

// Class embedding = normalized mean over templates of the prompt embeddings;
// prediction = argmax cosine (ties toward the smaller class index).
template <typename T>
ZeroShotResult zero_shot_classify(
    const std::vector<std::vector<double>>& image_embeds,
    const std::vector<int>& labels, const std::vector<std::string>& class_names,
    const std::vector<std::string>& prompt_templates,
    const std::function<std::vector<std::vector<double>>(
        const std::vector<std::string>&)>& text_embedder) {
  if (class_names.empty()) throw ArgumentError("zero_shot_classify: no classes");
  if (prompt_templates.empty()) throw ArgumentError("zero_shot_classify: no templates");
  if (image_embeds.size() != labels.size())
    throw ArgumentError("zero_shot_classify: one label per image required");

  // embed all prompts in one batch, then average per class
  std::vector<std::string> prompts;
  for (const auto& cls : class_names)
    for (const auto& tpl : prompt_templates) {
      std::string p = tpl;
      const auto pos = p.find("{}");
      if (pos != std::string::npos) p.replace(pos, 2, cls);
      prompts.push_back(p);
    }
  const auto prompt_embeds = text_embedder(prompts);
  const std::size_t tpl_count = prompt_templates.size();
  std::vector<std::vector<double>> class_embeds;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    std::vector<double> mean(prompt_embeds[0].size(), 0.0);
    for (std::size_t t = 0; t < tpl_count; ++t)
      for (std::size_t j = 0; j < mean.size(); ++j)
        mean[j] += prompt_embeds[c * tpl_count + t][j];
    double n2 = 0.0;
    for (double v : mean) n2 += v * v;
    const double norm = std::sqrt(n2);
    if (!(norm > 1e-12))
      throw ContractError("zero_shot_classify: degenerate class embedding");
    for (double& v : mean) v /= norm;
    class_embeds.push_back(std::move(mean));
  }

  ZeroShotResult res;
  int correct = 0;
  for (std::size_t i = 0; i < image_embeds.size(); ++i) {
    int best = 0;
    double best_sim = -2.0;
    for (std::size_t c = 0; c < class_embeds.size(); ++c) {
      const double s = dot(image_embeds[i], class_embeds[c]);
      if (s > best_sim) {
        best_sim = s;
        best = static_cast<int>(c);
      }
    }
    res.predictions.push_back(best);
    if (best == labels[i]) ++correct;
  }
  res.top1 = image_embeds.empty()
                 ? 0.0
                 : static_cast<double>(correct) / static_cast<double>(image_embeds.size());
  return res;
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

struct RetrievalResult {
  std::vector<int> ks;
  std::vector<double> i2t;  // recall at ks[i]
  std::vector<double> t2i;

  json to_json() const {
    json j = json::object();
    for (std::size_t i = 0; i < ks.size(); ++i) {
      j["I2T@" + std::to_string(ks[i])] = i2t[i];
      j["T2I@" + std::to_string(ks[i])] = t2i[i];
    }
    return j;
  }
};

// Row i of the image matrix pairs with row i of the text matrix. Candidates
// are ranked by cosine, ties broken toward the smaller index.
inline RetrievalResult retrieval_metrics(const std::vector<std::vector<double>>& e_img,
                                         const std::vector<std::vector<double>>& e_txt,
                                         std::vector<int> ks = {1, 5, 10}) {
  const std::size_t m = e_img.size();
  if (m == 0 || e_txt.size() != m)
    throw ArgumentError("retrieval_metrics: need equal nonzero counts of paired rows");
  std::sort(ks.begin(), ks.end());

  auto rank_of_true = [&](const std::vector<std::vector<double>>& queries,
                          const std::vector<std::vector<double>>& candidates,
                          std::size_t qi) {
    const double true_sim = dot(queries[qi], candidates[qi]);
    std::size_t rank = 1;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      if (c == qi) continue;
      const double s = dot(queries[qi], candidates[c]);
      if (s > true_sim || (s == true_sim && c < qi)) ++rank;
    }
    return rank;
  };

  RetrievalResult res;
  res.ks = ks;
  for (int k : ks) {
    std::size_t hit_i2t = 0, hit_t2i = 0;
    for (std::size_t i = 0; i < m; ++i) {
      if (rank_of_true(e_img, e_txt, i) <= static_cast<std::size_t>(k)) ++hit_i2t;
      if (rank_of_true(e_txt, e_img, i) <= static_cast<std::size_t>(k)) ++hit_t2i;
    }
    res.i2t.push_back(static_cast<double>(hit_i2t) / static_cast<double>(m));
    res.t2i.push_back(static_cast<double>(hit_t2i) / static_cast<double>(m));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Mask-quality coverage
// ---------------------------------------------------------------------------

struct CoverageResult {
  double fraction = 0.0;
  int inside_patches = 0;
  bool empty = false;  // flagged when the view contains no object patches
};

// A patch counts as inside when its center, mapped through the view's crop
// rect into image coordinates, lies in the object bbox.
inline CoverageResult mask_coverage(const mask::PlannedView& view, const CropRect& bbox,
                                    int grid) {
  CoverageResult res;
  std::vector<char> kept(static_cast<std::size_t>(grid) * grid, 0);
  for (int idx : view.kept) kept[static_cast<std::size_t>(idx)] = 1;
  int inside = 0, covered = 0;
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const double x = view.rect.x0 + (gx + 0.5) / grid * view.rect.width();
      const double y = view.rect.y0 + (gy + 0.5) / grid * view.rect.height();
      if (!bbox.contains_point(x, y)) continue;
      ++inside;
      if (kept[static_cast<std::size_t>(gy) * grid + gx]) ++covered;
    }
  res.inside_patches = inside;
  if (inside == 0) {
    res.empty = true;
    res.fraction = 0.0;
  } else {
    res.fraction = static_cast<double>(covered) / static_cast<double>(inside);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Analytic FLOP model
//
// Per transformer layer over n tokens at width w:
//   attention term  = 4*n*w^2 + 2*n^2*w   (qkvo projections + score/context)
//   pointwise term  = 8*n*w^2             (MLP with ratio 4)
// Token counts are patch tokens (the CLS overhead is excluded) so the
// budgeting identities hold exactly.
// ---------------------------------------------------------------------------

struct BranchCost {
  double attention = 0.0;
  double pointwise = 0.0;
  double total() const { return attention + pointwise; }

  json to_json() const {
    return json{{"attention", attention}, {"pointwise", pointwise}, {"total", total()}};
  }
};

inline BranchCost layer_cost(double n, double w, int layers) {
  BranchCost c;
  c.attention = static_cast<double>(layers) * (4.0 * n * w * w + 2.0 * n * n * w);
  c.pointwise = static_cast<double>(layers) * (8.0 * n * w * w);
  return c;
}

struct FlopLedger {
  BranchCost online;  // all masked views together
  BranchCost ema;
  BranchCost text;
  BranchCost baseline_online;  // k=1, keep=1.0
  BranchCost baseline_text;

  double total() const { return online.total() + ema.total() + text.total(); }
  double baseline_total() const {
    return baseline_online.total() + baseline_text.total();
  }
  double ratio_vs_plain() const { return total() / baseline_total(); }
  double online_attention_ratio() const {
    return online.attention / baseline_online.attention;
  }

  json to_json() const {
    return json{{"online", online.to_json()},
                {"ema", ema.to_json()},
                {"text", text.to_json()},
                {"baseline_online", baseline_online.to_json()},
                {"baseline_text", baseline_text.to_json()},
                {"total", total()},
                {"baseline_total", baseline_total()},
                {"ratio_vs_plain", ratio_vs_plain()},
                {"online_attention_ratio", online_attention_ratio()}};
  }
};

struct FlopModelInput {
  int tokens = 16;        // N, full-resolution patch tokens
  int width = 64;
  int layers = 2;
  int text_tokens = 16;
  int text_width = 64;
  int text_layers = 2;
  int views = 2;
  double keep_ratio = 0.5;
  bool budget_per_view_split = true;  // floor(N/k) per view when true
  bool ema_enabled = true;
  bool ema_half_resolution = false;
};

inline FlopLedger flop_model(const FlopModelInput& in) {
  if (in.tokens <= 0 || in.width <= 0 || in.layers <= 0)
    throw ArgumentError("flop_model: non-positive encoder geometry");
  FlopLedger ledger;
  const double per_view =
      in.budget_per_view_split
          ? std::floor(static_cast<double>(in.tokens) / in.views)
          : std::floor(static_cast<double>(in.tokens) * in.keep_ratio + 1e-9);
  for (int v = 0; v < in.views; ++v) {
    const auto c = layer_cost(per_view, in.width, in.layers);
    ledger.online.attention += c.attention;
    ledger.online.pointwise += c.pointwise;
  }
  if (in.ema_enabled) {
    const double ema_tokens =
        in.ema_half_resolution ? static_cast<double>(in.tokens) / 4.0
                               : static_cast<double>(in.tokens);
    ledger.ema = layer_cost(ema_tokens, in.width, in.layers);
  }
  ledger.text = layer_cost(in.text_tokens, in.text_width, in.text_layers);
  ledger.baseline_online = layer_cost(in.tokens, in.width, in.layers);
  ledger.baseline_text = ledger.text;
  return ledger;
}

// ---------------------------------------------------------------------------
// Composite evaluation report
// ---------------------------------------------------------------------------

template <typename T>
json evaluate_checkpoint_params(const enc::ParamStore<T>& params,
                                const model::ModelConfig& mc,
                                const data::Vocab& vocab, const data::Corpus& corpus) {
  std::vector<int> labels;
  for (const auto& r : corpus.records) labels.push_back(r.class_id);
  auto image_embeds = embed_images(params, mc.visual, corpus.images);

  std::vector<std::string> class_names;
  for (const auto& c : corpus.classes)
    class_names.push_back(c.color_name + " " + c.shape_name);
  std::vector<std::string> templates;
  for (const auto& tpl : data::caption_templates()) {
    std::string t = tpl;
    auto sub = [&](const std::string& key) {
      const auto pos = t.find(key);
      if (pos != std::string::npos) t.replace(pos, key.size(), "{}");
    };
    sub("{color} {shape}");
    templates.push_back(t);
  }

  auto text_embedder = [&](const std::vector<std::string>& texts) {
    return embed_texts(params, mc.text, texts, vocab);
  };
  auto zs = zero_shot_classify<T>(image_embeds, labels, class_names, templates,
                                  text_embedder);

  std::vector<std::string> first_captions;
  for (const auto& r : corpus.records) first_captions.push_back(r.captions.at(0));
  auto text_embeds = text_embedder(first_captions);
  auto retr = retrieval_metrics(image_embeds, text_embeds,
                                {1, 5, std::min(10, static_cast<int>(corpus.records.size()))});

  json j;
  j["zero_shot_top1"] = zs.top1;
  j["retrieval"] = retr.to_json();
  j["num_images"] = corpus.records.size();
  return j;
}

}  // namespace aclip::eval
