#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclip/common.hpp"
#include "aclip/image.hpp"

namespace aclip::data {

using nlohmann::json;

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255) codec. Round trips are bit-exact.
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  std::string header = "P6\n" + std::to_string(img.width) + " " +
                       std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + static_cast<std::size_t>(3) * img.height * img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
      }
  return bytes;
}

inline Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> FormatError {
    return FormatError("ppm: " + what + " at byte offset " + std::to_string(pos));
  };
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (std::isspace(bytes[pos])) {
        ++pos;
      } else if (bytes[pos] == '#') {  // comment to end of line
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> int {
    skip_ws();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw fail("expected integer");
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1 << 30) throw fail("integer overflow");
      ++pos;
    }
    return static_cast<int>(v);
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw fail("missing P6 magic");
  pos = 2;
  const int w = read_int();
  const int h = read_int();
  const int maxval = read_int();
  if (w <= 0 || h <= 0) throw fail("non-positive dimensions");
  if (maxval != 255) throw fail("maxval must be 255, got " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw fail("expected single whitespace before raster");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(3) * w * h;
  if (bytes.size() - pos < need) throw fail("truncated raster");

  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(bytes[pos++]) / 255.0f;
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  const auto bytes = encode_ppm(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write: " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

// ---------------------------------------------------------------------------
// Vocabulary and toy word tokenizer
// ---------------------------------------------------------------------------

struct Vocab {
  // specials occupy the first four dense ids
  static constexpr std::int64_t kSos = 0;
  static constexpr std::int64_t kEos = 1;
  static constexpr std::int64_t kPad = 2;
  static constexpr std::int64_t kUnk = 3;

  std::map<std::string, std::int64_t> word_to_id;

  std::int64_t size() const { return 4 + static_cast<std::int64_t>(word_to_id.size()); }

  std::int64_t id(const std::string& w) const {
    auto it = word_to_id.find(w);
    return it == word_to_id.end() ? kUnk : it->second;
  }

  json to_json() const {
    json words = json::array();
    std::vector<std::pair<std::int64_t, std::string>> ordered;
    for (const auto& [w, i] : word_to_id) ordered.emplace_back(i, w);
    std::sort(ordered.begin(), ordered.end());
    for (const auto& [i, w] : ordered) words.push_back(w);
    return json{{"words", words}};
  }

  static Vocab from_json(const json& j) {
    Vocab v;
    std::int64_t next = 4;
    for (const auto& w : j.at("words")) v.word_to_id[w.get<std::string>()] = next++;
    return v;
  }
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

inline Vocab build_vocab(const std::vector<std::string>& texts) {
  std::map<std::string, std::int64_t> seen;
  for (const auto& t : texts)
    for (const auto& w : split_words(t)) seen.emplace(w, 0);
  Vocab v;
  std::int64_t next = 4;
  for (auto& [w, id] : seen) v.word_to_id[w] = next++;
  return v;
}

// SOS + word ids + EOS, truncated to T preserving the terminal EOS, padded
// with PAD. Unknown words map to UNK.
inline std::vector<std::int64_t> tokenize(const std::string& caption,
                                          const Vocab& vocab, int context_length) {
  if (context_length < 2)
    throw ArgumentError("tokenize: context length must leave room for SOS and EOS");
  std::vector<std::int64_t> ids;
  ids.push_back(Vocab::kSos);
  for (const auto& w : split_words(caption)) ids.push_back(vocab.id(w));
  if (static_cast<int>(ids.size()) > context_length - 1)
    ids.resize(static_cast<std::size_t>(context_length - 1));
  ids.push_back(Vocab::kEos);
  while (static_cast<int>(ids.size()) < context_length) ids.push_back(Vocab::kPad);
  return ids;
}

inline std::string detokenize(const std::vector<std::int64_t>& ids, const Vocab& vocab) {
  std::vector<std::pair<std::int64_t, std::string>> rev;
  for (const auto& [w, i] : vocab.word_to_id) rev.emplace_back(i, w);
  std::map<std::int64_t, std::string> lookup(rev.begin(), rev.end());
  std::string out;
  for (auto id : ids) {
    if (id == Vocab::kSos || id == Vocab::kPad) continue;
    if (id == Vocab::kEos) break;
    if (!out.empty()) out.push_back(' ');
    auto it = lookup.find(id);
    out += it == lookup.end() ? "<unk>" : it->second;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic paired corpus: colored shapes on a textured noise background
// ---------------------------------------------------------------------------

struct PairRecord {
  std::string image_path;            // relative to the manifest
  std::vector<std::string> captions;
  CropRect bbox;                     // planted object, normalized coords
  int class_id = 0;
};

struct ClassSpec {
  std::string color_name;
  std::array<float, 3> rgb;
  std::string shape_name;  // "square" or "disc"
};

// Colors stay below the 0.75 band so solarize augmentation rarely inverts the
// object, and lumas are spread so grayscale keeps classes separable.
inline std::vector<ClassSpec> default_classes() {
  const std::vector<std::pair<std::string, std::array<float, 3>>> colors = {
      {"red", {0.62f, 0.08f, 0.08f}},
      {"green", {0.10f, 0.55f, 0.12f}},
      {"blue", {0.10f, 0.16f, 0.70f}},
      {"yellow", {0.68f, 0.62f, 0.10f}},
  };
  const std::vector<std::string> shapes = {"square", "disc"};
  std::vector<ClassSpec> out;
  for (const auto& [cname, rgb] : colors)
    for (const auto& shape : shapes) out.push_back({cname, rgb, shape});
  return out;
}

inline std::vector<std::string> caption_templates() {
  return {
      "a photo of a {color} {shape}",
      "an image of a {color} {shape}",
      "a {color} {shape} on a noisy background",
  };
}

inline std::string fill_template(std::string tpl, const std::string& color,
                                 const std::string& shape) {
  auto replace = [&](const std::string& key, const std::string& value) {
    const auto pos = tpl.find(key);
    if (pos != std::string::npos) tpl.replace(pos, key.size(), value);
  };
  replace("{color}", color);
  replace("{shape}", shape);
  return tpl;
}

// Smooth blotchy gray noise: a coarse random grid upsampled bilinearly with
// fine-grained jitter on top. Carries no class information.
inline Image noise_background(int size, Rng& rng) {
  const int coarse = 4;
  Image grid(coarse, coarse);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < coarse; ++y)
      for (int x = 0; x < coarse; ++x) {
        // shared luminance across channels, slight per-channel tint
        if (c == 0)
          grid.at(0, y, x) = static_cast<float>(rng.uniform(0.3, 0.7));
        else
          grid.at(c, y, x) = grid.at(0, y, x);
      }
  }
  Image bg = resize_bilinear(grid, size, size);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        bg.at(c, y, x) = std::clamp(
            bg.at(c, y, x) + static_cast<float>(rng.uniform(-0.08, 0.08)), 0.0f, 1.0f);
  return bg;
}

inline Image render_sample(int size, const ClassSpec& cls, Rng& rng, CropRect& bbox_out) {
  Image img = noise_background(size, rng);
  // object area fraction uniform in [0.20, 0.30]
  const double area_frac = rng.uniform(0.20, 0.30);
  const double side = std::sqrt(area_frac) * size;
  const int s = std::max(2, static_cast<int>(std::lround(side)));
  const int max_off = size - s;
  const int ox = static_cast<int>(rng.uniform_int(max_off + 1));
  const int oy = static_cast<int>(rng.uniform_int(max_off + 1));

  const double cx = ox + s / 2.0, cy = oy + s / 2.0, r = s / 2.0;
  for (int y = oy; y < oy + s; ++y)
    for (int x = ox; x < ox + s; ++x) {
      bool inside = true;
      if (cls.shape_name == "disc") {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        inside = dx * dx + dy * dy <= r * r;
      }
      if (!inside) continue;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = cls.rgb[static_cast<std::size_t>(c)];
    }

  bbox_out = CropRect{static_cast<double>(ox) / size, static_cast<double>(oy) / size,
                      static_cast<double>(ox + s) / size,
                      static_cast<double>(oy + s) / size};
  return img;
}

struct Corpus {
  std::vector<PairRecord> records;
  std::vector<Image> images;  // parallel to records
  std::vector<ClassSpec> classes;
};

// Deterministic from seed: class assignment is round-robin, placement and
// texture come from per-record derived streams.
inline Corpus make_synthetic(int n, int image_size, std::uint64_t seed,
                             const std::vector<ClassSpec>& classes = default_classes()) {
  if (n < 0) throw ArgumentError("make_synthetic: negative count");
  Corpus corpus;
  corpus.classes = classes;
  const auto templates = caption_templates();
  for (int i = 0; i < n; ++i) {
    const int cid = i % static_cast<int>(classes.size());
    const auto& cls = classes[static_cast<std::size_t>(cid)];
    Rng rng = derive_rng(seed, Stream::DataGen, static_cast<std::uint64_t>(i));
    PairRecord rec;
    rec.class_id = cid;
    corpus.images.push_back(render_sample(image_size, cls, rng, rec.bbox));
    std::ostringstream name;
    name << "img_" << std::setw(5) << std::setfill('0') << i << ".ppm";
    rec.image_path = name.str();
    for (const auto& tpl : templates)
      rec.captions.push_back(fill_template(tpl, cls.color_name, cls.shape_name));
    corpus.records.push_back(std::move(rec));
  }
  return corpus;
}

// Manifest is JSON Lines, one record per line; image paths are relative to
// the manifest file.
inline void write_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  std::ofstream manifest(dir + "/manifest.jsonl", std::ios::binary);
  if (!manifest) throw IoError("cannot open manifest for writing in " + dir);
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const auto& rec = corpus.records[i];
    write_ppm(dir + "/" + rec.image_path, corpus.images[i]);
    json line{{"image", rec.image_path},
              {"captions", rec.captions},
              {"bbox", {rec.bbox.x0, rec.bbox.y0, rec.bbox.x1, rec.bbox.y1}},
              {"class_id", rec.class_id}};
    manifest << line.dump() << "\n";
  }
  if (!manifest) throw IoError("short write on manifest in " + dir);
}

inline Corpus load_corpus(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream f(manifest_path, std::ios::binary);
  if (!f) throw IoError("cannot open manifest: " + manifest_path);
  const auto base = fs::path(manifest_path).parent_path();
  Corpus corpus;
  corpus.classes = default_classes();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    PairRecord rec;
    rec.image_path = j.at("image").get<std::string>();
    for (const auto& c : j.at("captions")) rec.captions.push_back(c.get<std::string>());
    if (rec.captions.empty())
      throw FormatError("manifest line " + std::to_string(lineno) + ": no captions");
    const auto& bb = j.at("bbox");
    rec.bbox = CropRect{bb.at(0).get<double>(), bb.at(1).get<double>(),
                        bb.at(2).get<double>(), bb.at(3).get<double>()};
    rec.class_id = j.at("class_id").get<int>();
    corpus.images.push_back(read_ppm((base / rec.image_path).string()));
    corpus.records.push_back(std::move(rec));
  }
  return corpus;
}

inline std::vector<std::string> all_captions(const Corpus& corpus) {
  std::vector<std::string> out;
  for (const auto& r : corpus.records)
    for (const auto& c : r.captions) out.push_back(c);
  return out;
}

}  // namespace aclip::data
