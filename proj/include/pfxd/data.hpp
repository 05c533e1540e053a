#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "pfxd/binary_io.hpp"
#include "pfxd/error.hpp"
#include "pfxd/rng.hpp"
#include "pfxd/tensor.hpp"
#include "pfxd/vocab.hpp"

namespace pfxd {

// ---------------------------------------------------------------------------
// Toy scenes: 1-3 coloured shapes on a 3x3 grid.

inline constexpr std::array<const char*, 8> kColors = {"red",    "green",  "blue",  "yellow",
                                                       "purple", "orange", "black", "white"};
inline constexpr std::array<const char*, 6> kShapes = {"circle", "square", "triangle",
                                                       "star",   "heart",  "cross"};
inline constexpr std::array<const char*, 3> kRows = {"top", "middle", "bottom"};
inline constexpr std::array<const char*, 3> kCols = {"left", "center", "right"};
inline constexpr int kCells = 9;
inline constexpr int kToyFeatDim = 64;

struct SceneObject {
  int color = 0;
  int shape = 0;
  int cell = 0;  // row * 3 + col
  bool operator==(const SceneObject&) const = default;
};

struct ToyScene {
  std::vector<SceneObject> objects;
  bool operator==(const ToyScene&) const = default;

  bool valid() const {
    if (objects.empty() || objects.size() > 3) return false;
    std::array<bool, kCells> used{};
    for (const auto& o : objects) {
      if (o.color < 0 || o.color >= static_cast<int>(kColors.size())) return false;
      if (o.shape < 0 || o.shape >= static_cast<int>(kShapes.size())) return false;
      if (o.cell < 0 || o.cell >= kCells || used[static_cast<std::size_t>(o.cell)]) return false;
      used[static_cast<std::size_t>(o.cell)] = true;
    }
    return true;
  }
};

inline ToyScene gen_scene(std::uint64_t seed) {
  Rng rng(seed);
  ToyScene scene;
  auto n = rng.uniform_int(1, 3);
  std::array<bool, kCells> used{};
  for (int i = 0; i < n; ++i) {
    SceneObject o;
    o.color = static_cast<int>(rng.uniform_int(0, kColors.size() - 1));
    o.shape = static_cast<int>(rng.uniform_int(0, kShapes.size() - 1));
    do o.cell = static_cast<int>(rng.uniform_int(0, kCells - 1));
    while (used[static_cast<std::size_t>(o.cell)]);
    used[static_cast<std::size_t>(o.cell)] = true;
    scene.objects.push_back(o);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Toy joint encoder. Each object contributes the basis directions of every
// attribute combination it mentions (full triple, the three pairs and the
// three singles), so partially correct captions get partial similarity.
// Attribute directions live in the first d_f-1 channels; the last channel is
// reserved for captions that mention no attribute at all.

namespace toy {

inline constexpr int kTripleKeys = 8 * 6 * 9;
inline constexpr int kColorCellKeys = 8 * 9;
inline constexpr int kShapeCellKeys = 6 * 9;
inline constexpr int kColorShapeKeys = 8 * 6;
inline constexpr int kKeyCount = kTripleKeys + kColorCellKeys + kShapeCellKeys + kColorShapeKeys + 8 + 6 + 9;
inline constexpr std::uint64_t kBasisSeed = 0x70667864'62617365ULL;

inline const Mat<double>& basis() {
  static const Mat<double> b = [] {
    Rng rng(kBasisSeed);
    Mat<double> m = Mat<double>::Zero(kKeyCount, kToyFeatDim);
    m.leftCols(kToyFeatDim - 1) = rng.normal_matrix<double>(kKeyCount, kToyFeatDim - 1);
    for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i).normalize();
    return m;
  }();
  return b;
}

/// A possibly partial object description; -1 means "not mentioned".
struct Mention {
  int color = -1, shape = -1, cell = -1;
};

inline void accumulate(const Mention& m, Vec<double>& acc) {
  const auto& B = basis();
  int off = 0;
  auto add = [&](bool present, int idx) {
    if (present) acc += B.row(off + idx).transpose();
  };
  bool c = m.color >= 0, s = m.shape >= 0, p = m.cell >= 0;
  add(c && s && p, (m.color * 6 + m.shape) * 9 + m.cell);
  off += kTripleKeys;
  add(c && p, m.color * 9 + m.cell);
  off += kColorCellKeys;
  add(s && p, m.shape * 9 + m.cell);
  off += kShapeCellKeys;
  add(c && s, m.color * 6 + m.shape);
  off += kColorShapeKeys;
  add(c, m.color);
  off += 8;
  add(s, m.shape);
  off += 6;
  add(p, m.cell);
}

inline Vec<double> fallback_vector() {
  Vec<double> v = Vec<double>::Zero(kToyFeatDim);
  v(kToyFeatDim - 1) = 1.0;
  return v;
}

inline Vec<double> finish(Vec<double> acc) {
  double n = acc.norm();
  if (n < 1e-12) return fallback_vector();
  return acc / n;
}

template <std::size_t N>
int find_word(const std::array<const char*, N>& words, const std::string& w) {
  for (std::size_t i = 0; i < N; ++i)
    if (w == words[i]) return static_cast<int>(i);
  return -1;
}

/// Split a caption into object mentions at "and"/"with".
inline std::vector<Mention> parse_caption(std::string_view caption) {
  std::vector<Mention> out;
  Mention cur;
  int row = -1, col = -1;
  bool any = false;
  auto flush = [&]() {
    if (row >= 0 && col >= 0) cur.cell = row * 3 + col;
    if (any) out.push_back(cur);
    cur = {};
    row = col = -1;
    any = false;
  };
  for (const auto& w : tokenize(caption)) {
    if (w == "and" || w == "with") {
      flush();
      continue;
    }
    if (int i = find_word(kColors, w); i >= 0 && cur.color < 0) cur.color = i, any = true;
    else if (int j = find_word(kShapes, w); j >= 0 && cur.shape < 0) cur.shape = j, any = true;
    else if (int r = find_word(kRows, w); r >= 0 && row < 0) row = r, any = true;
    else if (int c = find_word(kCols, w); c >= 0 && col < 0) col = c, any = true;
  }
  flush();
  return out;
}

}  // namespace toy

inline Vec<double> toy_encode_scene(const ToyScene& scene) {
  Vec<double> acc = Vec<double>::Zero(kToyFeatDim);
  for (const auto& o : scene.objects) toy::accumulate({o.color, o.shape, o.cell}, acc);
  return toy::finish(std::move(acc));
}

inline Vec<double> toy_encode_caption(std::string_view caption) {
  Vec<double> acc = Vec<double>::Zero(kToyFeatDim);
  for (const auto& m : toy::parse_caption(caption)) toy::accumulate(m, acc);
  return toy::finish(std::move(acc));
}

/// Object-level phrase forms, longest first.
inline std::string object_phrase(const SceneObject& o, int form) {
  std::string c = kColors[static_cast<std::size_t>(o.color)], s = kShapes[static_cast<std::size_t>(o.shape)];
  std::string r = kRows[static_cast<std::size_t>(o.cell / 3)], col = kCols[static_cast<std::size_t>(o.cell % 3)];
  switch (form) {
    case 0: return "a " + c + " " + s + " in the " + r + " " + col;
    case 1: return "the " + r + " " + col + " has a " + c + " " + s;
    case 2: return "a " + c + " " + s + " at " + r + " " + col;
    case 3: return c + " " + s + " " + r + " " + col;
    default: return r + " " + col + " " + c + " " + s;
  }
}

inline constexpr int kPhraseForms = 5;
inline constexpr int kMaxCaptionWords = 15;

/// Five distinct templated captions (every one of at most 15 words). The
/// pool is every (phrase form, joiner, object order) combination that fits;
/// `rng` picks which five.
inline std::vector<std::string> caption_templates(const ToyScene& scene, Rng& rng) {
  std::vector<int> order(scene.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::vector<std::string> pool;
  do {
    for (int form = 0; form < kPhraseForms; ++form) {
      for (const char* joiner : {" and ", " with "}) {
        std::string cap;
        for (std::size_t i = 0; i < order.size(); ++i) {
          if (i) cap += joiner;
          cap += object_phrase(scene.objects[static_cast<std::size_t>(order[i])], form);
        }
        if (tokenize(cap).size() <= kMaxCaptionWords && std::find(pool.begin(), pool.end(), cap) == pool.end())
          pool.push_back(std::move(cap));
      }
    }
  } while (std::next_permutation(order.begin(), order.end()));
  require(pool.size() >= 5, ErrorKind::BadConfig, "scene admits fewer than five captions");
  std::shuffle(pool.begin(), pool.end(), rng.engine());
  pool.resize(5);
  return pool;
}

/// Every word any template can produce.
inline Vocabulary toy_vocabulary() {
  std::vector<std::string> words = {"a", "in", "the", "has", "at", "and", "with"};
  for (auto w : kColors) words.emplace_back(w);
  for (auto w : kShapes) words.emplace_back(w);
  for (auto w : kRows) words.emplace_back(w);
  for (auto w : kCols) words.emplace_back(w);
  std::sort(words.begin(), words.end());
  return Vocabulary(words);
}

// ---------------------------------------------------------------------------
// Feature records and the PFXFEAT1 file format.

struct FeatureRecord {
  std::string id;
  std::vector<float> feat;  // L2-normalized
  std::vector<std::string> captions;

  bool operator==(const FeatureRecord&) const = default;
};

inline constexpr std::string_view kFeatureMagic = "PFXFEAT1";

inline std::string serialize_features(const std::vector<FeatureRecord>& records) {
  io::ByteWriter w;
  w.bytes(kFeatureMagic);
  w.u32(static_cast<std::uint32_t>(records.size()));
  const std::size_t df = records.empty() ? 0 : records.front().feat.size();
  w.u32(static_cast<std::uint32_t>(df));
  for (const auto& r : records) {
    require(r.feat.size() == df, ErrorKind::DimMismatch, "record '" + r.id + "' has a different feature width");
    require(!r.captions.empty() && r.captions.size() <= 255, ErrorKind::BadConfig,
            "record '" + r.id + "' needs 1-255 captions");
    w.str16(r.id, "record id");
    for (float v : r.feat) w.f32(v);
    w.u8(static_cast<std::uint8_t>(r.captions.size()));
    for (const auto& c : r.captions) w.str16(c, "caption");
  }
  return w.data();
}

/// Parse a PFXFEAT1 image. expected_dim == 0 accepts any width.
inline std::vector<FeatureRecord> parse_features(std::string_view bytes, const std::string& source = "features",
                                                 std::uint32_t expected_dim = 0) {
  io::ByteReader r(bytes, source);
  auto magic = r.bytes(kFeatureMagic.size());
  if (magic.substr(0, 7) != kFeatureMagic.substr(0, 7))
    throw Error(ErrorKind::BadMagic, source + ": not a PFXFEAT file");
  if (magic != kFeatureMagic) throw Error(ErrorKind::BadVersion, source + ": unsupported feature file version");
  std::uint32_t count = r.u32();
  std::uint32_t df = r.u32();
  if (expected_dim != 0 && df != expected_dim)
    throw Error(ErrorKind::DimMismatch, source + ": feature width " + std::to_string(df) + ", expected " +
                                            std::to_string(expected_dim));
  std::vector<FeatureRecord> out;
  out.reserve(std::min<std::uint32_t>(count, 1u << 20));
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureRecord rec;
    rec.id = r.str16();
    rec.feat.resize(df);
    for (auto& v : rec.feat) v = r.f32();
    std::uint8_t nc = r.u8();
    for (int c = 0; c < nc; ++c) rec.captions.push_back(r.str16());
    out.push_back(std::move(rec));
  }
  return out;
}

inline void write_features(const std::string& path, const std::vector<FeatureRecord>& records) {
  io::write_file(path, serialize_features(records));
}

inline std::vector<FeatureRecord> read_features(const std::string& path, std::uint32_t expected_dim = 0) {
  return parse_features(io::read_file(path), path, expected_dim);
}

/// Invariant problems in loaded records (empty when valid).
inline std::vector<std::string> validate_features(const std::vector<FeatureRecord>& records, double norm_tol = 1e-5) {
  std::vector<std::string> problems;
  std::vector<std::string> ids;
  for (const auto& r : records) {
    double n2 = 0.0;
    bool finite = true;
    for (float v : r.feat) finite = finite && std::isfinite(v), n2 += static_cast<double>(v) * v;
    if (!finite) problems.push_back(r.id + ": non-finite feature");
    else if (std::abs(std::sqrt(n2) - 1.0) > norm_tol)
      problems.push_back(r.id + ": feature norm " + std::to_string(std::sqrt(n2)) + " is not 1");
    if (r.captions.empty()) problems.push_back(r.id + ": no captions");
    ids.push_back(r.id);
  }
  std::sort(ids.begin(), ids.end());
  if (auto it = std::adjacent_find(ids.begin(), ids.end()); it != ids.end())
    problems.push_back(*it + ": duplicate id");
  return problems;
}

/// "id<TAB>caption" lines, one per caption.
inline void write_captions(const std::string& path, const std::vector<FeatureRecord>& records) {
  std::string out;
  for (const auto& r : records)
    for (const auto& c : r.captions) out += r.id + "\t" + c + "\n";
  io::write_file(path, out);
}

inline std::vector<std::pair<std::string, std::string>> read_captions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw Error(ErrorKind::BadConfig, path + ":" + std::to_string(lineno) + ": missing tab");
    out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return out;
}

inline std::uint64_t scene_seed(std::uint64_t dataset_seed, std::uint64_t index) {
  return Rng::mix(Rng::mix(dataset_seed) + index);
}

inline FeatureRecord toy_record(const std::string& id, const ToyScene& scene, Rng& caption_rng) {
  FeatureRecord rec;
  rec.id = id;
  Vec<double> f = toy_encode_scene(scene);
  rec.feat.assign(f.data(), f.data() + f.size());
  rec.captions = caption_templates(scene, caption_rng);
  return rec;
}

/// (seed, count) fully determines the dataset.
inline std::vector<FeatureRecord> make_toy_dataset(std::size_t count, std::uint64_t seed) {
  std::vector<FeatureRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto s = scene_seed(seed, i);
    Rng caption_rng = Rng::derive(s, 1);
    char id[32];
    std::snprintf(id, sizeof id, "scene-%05zu", i);
    out.push_back(toy_record(id, gen_scene(s), caption_rng));
  }
  return out;
}

template <typename T>
Vec<T> feature_vector(const FeatureRecord& r) {
  Vec<T> v(static_cast<Eigen::Index>(r.feat.size()));
  for (std::size_t i = 0; i < r.feat.size(); ++i) v(static_cast<Eigen::Index>(i)) = static_cast<T>(r.feat[i]);
  return v;
}

}  // namespace pfxd
