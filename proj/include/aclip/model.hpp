#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "aclip/common.hpp"
#include "aclip/encoders.hpp"
#include "aclip/losses.hpp"

namespace aclip::model {

using enc::ParamStore;
using nd::Tensor;
using nlohmann::json;

enum class SslMode { None, SimCLR, SimSiam };

inline SslMode parse_ssl_mode(const std::string& s) {
  if (s == "none") return SslMode::None;
  if (s == "simclr") return SslMode::SimCLR;
  if (s == "simsiam") return SslMode::SimSiam;
  throw ArgumentError("unknown ssl mode: " + s);
}

inline std::string ssl_mode_name(SslMode m) {
  switch (m) {
    case SslMode::None: return "none";
    case SslMode::SimCLR: return "simclr";
    default: return "simsiam";
  }
}

struct ModelConfig {
  enc::VisualEncoderConfig visual;
  enc::TextEncoderConfig text;
  SslMode ssl = SslMode::None;
  bool byol = false;
  double tau_init = 0.07;

  bool needs_ssl_projector() const { return ssl != SslMode::None || byol; }
  bool needs_ssl_predictor() const { return ssl == SslMode::SimSiam || byol; }

  json to_json() const {
    return json{{"visual", visual.to_json()},
                {"text", text.to_json()},
                {"ssl", ssl_mode_name(ssl)},
                {"byol", byol},
                {"tau_init", tau_init}};
  }
  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    if (j.contains("visual")) c.visual = enc::VisualEncoderConfig::from_json(j.at("visual"));
    if (j.contains("text")) c.text = enc::TextEncoderConfig::from_json(j.at("text"));
    c.ssl = parse_ssl_mode(j.value("ssl", "none"));
    c.byol = j.value("byol", false);
    c.tau_init = j.value("tau_init", 0.07);
    return c;
  }
};

// The full trainable assembly: both encoders, the projection heads, the
// learnable temperature, and (when configured) the SSL projector/predictor.
template <typename T>
struct ClipModel {
  ModelConfig cfg;
  ParamStore<T> params;

  static ClipModel init(const ModelConfig& cfg, std::uint64_t seed) {
    ClipModel m;
    m.cfg = cfg;
    Rng rng = derive_rng(seed, Stream::Init);
    enc::init_visual_params(m.params, cfg.visual, rng);
    enc::init_text_params(m.params, cfg.text, rng);
    m.params.add("logit.log_tau",
                 Tensor<T>::scalar(static_cast<T>(std::log(cfg.tau_init)), true));
    const int w = cfg.visual.width;
    const int d = cfg.visual.embed_dim;
    if (cfg.needs_ssl_projector()) {
      m.params.add("sslproj.w1", enc::detail::init_weight<T>(
                                     {w, 4 * d}, 1.0 / std::sqrt(static_cast<double>(w)),
                                     rng, true));
      m.params.add("sslproj.b1", Tensor<T>::zeros({4 * d}, true));
      m.params.add("sslproj.w2",
                   enc::detail::init_weight<T>(
                       {4 * d, d}, 1.0 / std::sqrt(4.0 * static_cast<double>(d)), rng,
                       true));
      m.params.add("sslproj.b2", Tensor<T>::zeros({d}, true));
    }
    if (cfg.needs_ssl_predictor()) {
      const int bottleneck = std::max(1, d / 2);
      m.params.add("sslpred.w1", enc::detail::init_weight<T>(
                                     {d, bottleneck},
                                     1.0 / std::sqrt(static_cast<double>(d)), rng, true));
      m.params.add("sslpred.b1", Tensor<T>::zeros({bottleneck}, true));
      m.params.add("sslpred.w2",
                   enc::detail::init_weight<T>(
                       {bottleneck, d}, 1.0 / std::sqrt(static_cast<double>(bottleneck)),
                       rng, true));
      m.params.add("sslpred.b2", Tensor<T>::zeros({d}, true));
    }
    return m;
  }

  enc::VisualOutput<T> visual_forward(const Tensor<T>& tokens,
                                      const std::vector<std::vector<int>>* keep = nullptr,
                                      const Tensor<T>* pos_override = nullptr) const {
    return enc::vit_forward(params, cfg.visual, tokens, keep, pos_override);
  }

  Tensor<T> text_features(const std::vector<std::vector<std::int64_t>>& ids,
                          std::int64_t eos_id) const {
    return enc::text_forward(params, cfg.text, ids, eos_id);
  }

  Tensor<T> image_embedding(const Tensor<T>& cls_feature) const {
    return enc::project_and_normalize(cls_feature, params.at("visual.proj"));
  }
  Tensor<T> text_embedding(const Tensor<T>& eos_feature) const {
    return enc::project_and_normalize(eos_feature, params.at("text.proj"));
  }

  Tensor<T> tau() const { return loss::tau_from_log(params.at("logit.log_tau")); }

  // two-layer MLP heads; gelu activation between the layers
  static Tensor<T> mlp2(const ParamStore<T>& p, const std::string& prefix,
                        const Tensor<T>& x) {
    auto h = nd::gelu(nd::linear(x, p.at(prefix + ".w1"), p.at(prefix + ".b1")));
    return nd::linear(h, p.at(prefix + ".w2"), p.at(prefix + ".b2"));
  }

  Tensor<T> ssl_project(const Tensor<T>& feature) const {
    return mlp2(params, "sslproj", feature);
  }
  Tensor<T> ssl_predict(const Tensor<T>& z) const { return mlp2(params, "sslpred", z); }

  std::vector<std::pair<std::string, Tensor<T>>> trainable() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& [name, t] : params.items)
      if (t.requires_grad()) out.emplace_back(name, t);
    return out;
  }

  // the vision-side subset mirrored by the EMA teacher: encoder, visual
  // projection, and the SSL projector (BYOL target head)
  std::vector<std::pair<std::string, Tensor<T>>> ema_subset() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& [name, t] : params.items)
      if (name.rfind("visual.", 0) == 0 || name.rfind("sslproj.", 0) == 0)
        out.emplace_back(name, t);
    return out;
  }
};

}  // namespace aclip::model
