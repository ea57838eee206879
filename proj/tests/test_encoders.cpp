#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "aclip/encoders.hpp"

using namespace aclip;
using Catch::Approx;
using nd::Tensor;

namespace {

enc::VisualEncoderConfig tiny_visual() {
  enc::VisualEncoderConfig c;
  c.image_size = 8;
  c.patch_size = 4;  // N = 4
  c.layers = 2;
  c.heads = 2;
  c.width = 8;
  c.embed_dim = 4;
  c.frozen_patch_embed = false;
  return c;
}

enc::TextEncoderConfig tiny_text() {
  enc::TextEncoderConfig c;
  c.vocab_size = 12;
  c.context_length = 6;
  c.layers = 2;
  c.heads = 2;
  c.width = 8;
  c.embed_dim = 4;
  return c;
}

template <typename T>
Tensor<T> random_tokens(const enc::VisualEncoderConfig& cfg, int batch, Rng& rng) {
  std::vector<T> v(static_cast<std::size_t>(batch) * cfg.tokens() * cfg.patch_dim());
  for (auto& x : v) x = static_cast<T>(rng.uniform());
  return Tensor<T>({batch, cfg.tokens(), cfg.patch_dim()}, std::move(v), false);
}

}  // namespace

TEST_CASE("patchify geometry and round trip") {
  Image img(4, 4);
  Rng rng(2);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());

  auto tokens = enc::patchify<double>(img, 2);
  REQUIRE(tokens.size() == 4u * 12u);  // 4 tokens of length 3*2*2
  // token 0 is the top-left patch; its first channel-0 pixel is img(0,0,0)
  REQUIRE(tokens[0] == Approx(static_cast<double>(img.at(0, 0, 0))).margin(0));

  const Image back = enc::unpatchify(tokens, 4, 2);
  REQUIRE(back.data == img.data);  // bit-exact

  Image img32(32, 32, 0.25f);
  auto t32 = enc::patchify<double>(img32, 8);
  REQUIRE(t32.size() == 16u * 192u);

  Image odd(6, 6);
  REQUIRE_THROWS_AS(enc::patchify<double>(odd, 4), ShapeError);
}

TEST_CASE("vit_forward with all indices equals the unmasked path bit-exactly") {
  auto cfg = tiny_visual();
  enc::ParamStore<double> p;
  Rng rng(17);
  enc::init_visual_params(p, cfg, rng);
  Rng drng(23);
  auto tokens = random_tokens<double>(cfg, 2, drng);

  auto full = enc::vit_forward(p, cfg, tokens);
  std::vector<std::vector<int>> all{{0, 1, 2, 3}, {0, 1, 2, 3}};
  auto masked = enc::vit_forward(p, cfg, tokens, &all);

  REQUIRE(full.cls_feature.data() == masked.cls_feature.data());
  REQUIRE(full.patch_features.data() == masked.patch_features.data());
  REQUIRE(full.attn.cls_rows == masked.attn.cls_rows);
}

TEST_CASE("attention rows sum to one for every layer and head") {
  auto cfg = tiny_visual();
  enc::ParamStore<double> p;
  Rng rng(31);
  enc::init_visual_params(p, cfg, rng);
  Rng drng(37);
  auto tokens = random_tokens<double>(cfg, 3, drng);
  // per-image key sets of different sizes, including the 1-kept-patch case
  const std::vector<std::vector<int>> keeps{{1}, {0, 3}, {0, 1, 2, 3}};
  for (int b = 0; b < 3; ++b) {
    std::vector<std::vector<int>> one{keeps[static_cast<std::size_t>(b)]};
    auto single = enc::vit_forward(p, cfg, nd::gather(tokens, {b}, 0), &one);
    const auto& rec = single.attn;
    REQUIRE(rec.keys == static_cast<int>(keeps[static_cast<std::size_t>(b)].size()) + 1);
    for (int l = 0; l < rec.layers; ++l)
      for (int h = 0; h < rec.heads; ++h) {
        double sum = 0.0;
        for (int k = 0; k < rec.keys; ++k) sum += rec.at(0, l, h, k);
        REQUIRE(sum == Approx(1.0).margin(1e-6));
      }
  }
}

TEST_CASE("vit_forward rejects unsorted, duplicate, and out-of-range keeps") {
  auto cfg = tiny_visual();
  enc::ParamStore<double> p;
  Rng rng(41);
  enc::init_visual_params(p, cfg, rng);
  Rng drng(43);
  auto tokens = random_tokens<double>(cfg, 1, drng);

  std::vector<std::vector<int>> unsorted{{2, 1}};
  REQUIRE_THROWS_AS(enc::vit_forward(p, cfg, tokens, &unsorted), IndexError);
  std::vector<std::vector<int>> dup{{1, 1}};
  REQUIRE_THROWS_AS(enc::vit_forward(p, cfg, tokens, &dup), IndexError);
  std::vector<std::vector<int>> oob{{0, 4}};
  REQUIRE_THROWS_AS(enc::vit_forward(p, cfg, tokens, &oob), IndexError);
}

TEST_CASE("token permutation equivariance with consistent position permutation") {
  auto cfg = tiny_visual();
  enc::ParamStore<double> p;
  Rng rng(47);
  enc::init_visual_params(p, cfg, rng);
  Rng drng(53);
  auto tokens = random_tokens<double>(cfg, 1, drng);

  const std::vector<int> perm{2, 0, 3, 1};
  const int n = cfg.tokens(), pd = cfg.patch_dim(), w = cfg.width;
  std::vector<double> permuted(tokens.data().size());
  for (int i = 0; i < n; ++i)
    std::copy(tokens.data().begin() + perm[static_cast<std::size_t>(i)] * pd,
              tokens.data().begin() + (perm[static_cast<std::size_t>(i)] + 1) * pd,
              permuted.begin() + i * pd);
  Tensor<double> tokens2({1, n, pd}, std::move(permuted), false);

  const auto& pos = p.at("visual.pos");
  std::vector<double> pos2(pos.data().size());
  std::copy(pos.data().begin(), pos.data().begin() + w, pos2.begin());  // CLS row
  for (int i = 0; i < n; ++i)
    std::copy(pos.data().begin() + (1 + perm[static_cast<std::size_t>(i)]) * w,
              pos.data().begin() + (2 + perm[static_cast<std::size_t>(i)]) * w,
              pos2.begin() + (1 + i) * w);
  Tensor<double> pos_override({n + 1, w}, std::move(pos2), false);

  auto base = enc::vit_forward(p, cfg, tokens);
  auto shuf = enc::vit_forward(p, cfg, tokens2, nullptr, &pos_override);

  for (int j = 0; j < w; ++j)
    REQUIRE(shuf.cls_feature.data()[static_cast<std::size_t>(j)] ==
            Approx(base.cls_feature.data()[static_cast<std::size_t>(j)]).margin(1e-10));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j)
      REQUIRE(shuf.patch_features.data()[static_cast<std::size_t>(i * w + j)] ==
              Approx(base.patch_features.data()[static_cast<std::size_t>(
                         perm[static_cast<std::size_t>(i)] * w + j)])
                  .margin(1e-10));
}

TEST_CASE("frozen patch embedding receives no gradient and never changes") {
  auto cfg = tiny_visual();
  cfg.frozen_patch_embed = true;
  enc::ParamStore<double> p;
  Rng rng(59);
  enc::init_visual_params(p, cfg, rng);
  const auto before = p.at("visual.patch_embed.w").data();

  REQUIRE_FALSE(p.at("visual.patch_embed.w").requires_grad());
  Rng drng(61);
  auto tokens = random_tokens<double>(cfg, 2, drng);
  auto out = enc::vit_forward(p, cfg, tokens);
  nd::sum_all(nd::square(out.cls_feature)).backward();
  REQUIRE_THROWS_AS(p.at("visual.patch_embed.w").grad(), StructuralError);
  REQUIRE(p.at("visual.patch_embed.w").data() == before);
  // trainable parameters did get gradients
  REQUIRE(p.at("visual.cls").has_grad());
}

TEST_CASE("text features ignore post-EOS padding bit-exactly") {
  auto cfg = tiny_text();
  enc::ParamStore<double> p;
  Rng rng(67);
  enc::init_text_params(p, cfg, rng);

  const std::int64_t eos = 1, pad = 2;
  std::vector<std::vector<std::int64_t>> a{{0, 5, 6, eos, pad, pad}};
  std::vector<std::vector<std::int64_t>> b{{0, 5, 6, eos, 9, 7}};  // junk after EOS
  auto fa = enc::text_forward<double>(p, cfg, a, eos);
  auto fb = enc::text_forward<double>(p, cfg, b, eos);
  REQUIRE(fa.data() == fb.data());
}

TEST_CASE("text forward handles a lone EOS and validates EOS count") {
  auto cfg = tiny_text();
  enc::ParamStore<double> p;
  Rng rng(71);
  enc::init_text_params(p, cfg, rng);
  const std::int64_t eos = 1, pad = 2;

  std::vector<std::vector<std::int64_t>> lone{{eos, pad, pad, pad, pad, pad}};
  auto f = enc::text_forward<double>(p, cfg, lone, eos);
  for (double v : f.data()) REQUIRE(std::isfinite(v));

  std::vector<std::vector<std::int64_t>> none{{0, 5, 6, 7, pad, pad}};
  REQUIRE_THROWS_AS(enc::text_forward<double>(p, cfg, none, eos), FormatError);
  std::vector<std::vector<std::int64_t>> twice{{0, eos, eos, pad, pad, pad}};
  REQUIRE_THROWS_AS(enc::text_forward<double>(p, cfg, twice, eos), FormatError);
}

TEST_CASE("swapping two pre-EOS tokens changes the pooled feature") {
  auto cfg = tiny_text();
  enc::ParamStore<double> p;
  Rng rng(73);
  enc::init_text_params(p, cfg, rng);
  const std::int64_t eos = 1, pad = 2;
  std::vector<std::vector<std::int64_t>> a{{0, 5, 6, eos, pad, pad}};
  std::vector<std::vector<std::int64_t>> b{{0, 6, 5, eos, pad, pad}};
  auto fa = enc::text_forward<double>(p, cfg, a, eos);
  auto fb = enc::text_forward<double>(p, cfg, b, eos);
  double diff = 0.0;
  for (std::size_t i = 0; i < fa.data().size(); ++i)
    diff = std::max(diff, std::abs(fa.data()[i] - fb.data()[i]));
  REQUIRE(diff > 1e-9);
}

TEST_CASE("project_and_normalize values and gradient") {
  Tensor<double> feature({1, 2}, {3, 4}, false);
  Tensor<double> eye({2, 2}, {1, 0, 0, 1}, false);
  auto e = enc::project_and_normalize(feature, eye);
  REQUIRE(e.data()[0] == Approx(0.6).margin(1e-12));
  REQUIRE(e.data()[1] == Approx(0.8).margin(1e-12));

  Tensor<double> unit({1, 2}, {1, 0}, false);
  auto same = enc::project_and_normalize(unit, eye);
  REQUIRE(same.data()[0] == Approx(1.0).margin(1e-12));

  Tensor<double> zero({1, 2}, {0, 0}, false);
  REQUIRE_THROWS_AS(enc::project_and_normalize(zero, eye), ContractError);

  Rng rng(79);
  std::vector<double> fv(6), wv(12);
  for (auto& v : fv) v = rng.normal();
  for (auto& v : wv) v = rng.normal();
  Tensor<double> feat({2, 3}, fv, true);
  Tensor<double> proj({3, 4}, wv, true);
  Tensor<double> probe({2, 4}, {0.3, -0.7, 0.9, 0.1, -0.2, 0.5, 1.1, -0.4}, false);
  auto f = [&] {
    return nd::sum_all(nd::mul(enc::project_and_normalize(feat, proj), probe));
  };
  REQUIRE(nd::grad_check<double>(f, {feat, proj}, 1e-5) < 1e-6);
}

TEST_CASE("pos embedding interpolation: identity, constants, ramps") {
  Rng rng(83);
  const int g = 4, w = 3;
  std::vector<double> pv(static_cast<std::size_t>(1 + g * g) * w);
  for (auto& v : pv) v = rng.normal();
  Tensor<double> pos({1 + g * g, w}, pv, false);

  auto same = enc::interpolate_pos_embed(pos, g);
  for (std::size_t i = 0; i < pv.size(); ++i)
    REQUIRE(same.data()[i] == Approx(pv[i]).margin(1e-12));

  Tensor<double> constant({1 + g * g, 1}, std::vector<double>(17, 0.7), false);
  auto cinterp = enc::interpolate_pos_embed(constant, 2);
  for (std::size_t i = 1; i < cinterp.data().size(); ++i)
    REQUIRE(cinterp.data()[i] == Approx(0.7).margin(0));

  // bilinear ramp f(y, x) = x over cell centers; downsampling must reproduce
  // the analytic ramp at the coarse cell centers
  std::vector<double> ramp(static_cast<std::size_t>(1 + g * g), 0.0);
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x)
      ramp[static_cast<std::size_t>(1 + y * g + x)] = (x + 0.5) / g;
  Tensor<double> rampt({1 + g * g, 1}, std::move(ramp), false);
  auto down = enc::interpolate_pos_embed(rampt, 2);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      REQUIRE(down.data()[static_cast<std::size_t>(1 + y * 2 + x)] ==
              Approx((x + 0.5) / 2.0).margin(1e-6));

  // CLS row untouched
  REQUIRE(down.data()[0] == Approx(0.0).margin(0));
}

TEST_CASE("checkpoint container round trips bit-exactly") {
  namespace fs = std::filesystem;
  const auto path = (fs::temp_directory_path() /
                     ("aclip_ck_" + std::to_string(::getpid()) + ".aclp"))
                        .string();

  enc::Checkpoint ck;
  ck.meta = {{"step", 7}, {"note", "test"}};
  Rng rng(89);
  std::vector<double> v(12);
  for (auto& x : v) x = rng.normal();
  Tensor<double> t({3, 4}, v, false);
  ck.add_tensor("param/a", t);
  std::vector<float> vf{1.5f, -2.25f};
  ck.add_tensor("param/b", Tensor<float>({2}, vf, false));
  ck.save(path);

  auto back = enc::Checkpoint::load(path);
  REQUIRE(back.meta.at("step").get<int>() == 7);
  auto ta = back.read_tensor<double>("param/a");
  REQUIRE(ta.shape() == Shape{3, 4});
  REQUIRE(ta.data() == v);
  auto tb = back.read_tensor<float>("param/b");
  REQUIRE(tb.data() == vf);
  REQUIRE_THROWS_AS(back.read_tensor<float>("param/a"), FormatError);
  REQUIRE_THROWS_AS(back.read_tensor<double>("missing"), FormatError);

  // resave produces identical bytes
  const auto path2 = path + ".again";
  back.save(path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::vector<char> b1((std::istreambuf_iterator<char>(f1)),
                       std::istreambuf_iterator<char>());
  std::vector<char> b2((std::istreambuf_iterator<char>(f2)),
                       std::istreambuf_iterator<char>());
  REQUIRE(b1 == b2);
  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("visual encoder differentiates end to end") {
  auto cfg = tiny_visual();
  enc::ParamStore<double> p;
  Rng rng(97);
  enc::init_visual_params(p, cfg, rng);
  Rng drng(101);
  auto tokens = random_tokens<double>(cfg, 2, drng);
  std::vector<std::vector<int>> keep{{0, 2}, {1, 3}};

  std::vector<Tensor<double>> params;
  for (auto& [name, t] : p.items) params.push_back(t);
  Rng prng(103);
  std::vector<double> probe_v(2 * cfg.embed_dim);
  for (auto& v : probe_v) v = prng.normal();
  Tensor<double> probe({2, cfg.embed_dim}, probe_v, false);
  auto f = [&] {
    auto out = enc::vit_forward(p, cfg, tokens, &keep);
    auto e = enc::project_and_normalize(out.cls_feature, p.at("visual.proj"));
    return nd::sum_all(nd::mul(e, probe));
  };
  // composite path: central-difference noise on near-zero gradients caps the
  // attainable agreement below the single-op bound
  REQUIRE(nd::grad_check<double>(f, params, 1e-5) < 1e-5);
}
