#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfxd/binary_io.hpp"
#include "pfxd/denoiser.hpp"
#include "pfxd/vocab.hpp"

namespace pfxd {

inline constexpr std::string_view kCheckpointMagic = "PFXCKPT1";

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;  // row-major
};

/// A PFXCKPT1 file in memory: named f32 tensors plus a JSON metadata blob.
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const NamedTensor& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw Error(ErrorKind::BadConfig, "checkpoint has no tensor '" + name + "'");
  }

  std::string serialize() const {
    io::ByteWriter w;
    w.bytes(kCheckpointMagic);
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      w.str16(t.name, "tensor name");
      require(t.dims.size() <= 255, ErrorKind::BadConfig, "tensor rank > 255");
      w.u8(static_cast<std::uint8_t>(t.dims.size()));
      std::size_t n = 1;
      for (auto d : t.dims) w.u32(d), n *= d;
      require(n == t.data.size(), ErrorKind::ShapeMismatch, "tensor '" + t.name + "' dims/data mismatch");
      for (float v : t.data) w.f32(v);
    }
    std::string meta = metadata.dump();
    w.u32(static_cast<std::uint32_t>(meta.size()));
    w.bytes(meta);
    return w.data();
  }

  static Checkpoint parse(std::string_view bytes, const std::string& source = "checkpoint") {
    io::ByteReader r(bytes, source);
    auto magic = r.bytes(kCheckpointMagic.size());
    if (magic.substr(0, 7) != kCheckpointMagic.substr(0, 7))
      throw Error(ErrorKind::BadMagic, source + ": not a PFXCKPT file");
    if (magic != kCheckpointMagic) throw Error(ErrorKind::BadVersion, source + ": unsupported checkpoint version");
    Checkpoint ck;
    std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      NamedTensor t;
      t.name = r.str16();
      std::uint8_t rank = r.u8();
      std::size_t n = 1;
      for (int d = 0; d < rank; ++d) t.dims.push_back(r.u32()), n *= t.dims.back();
      require(n * 4 <= r.remaining(), ErrorKind::TruncatedFile,
              source + ": tensor '" + t.name + "' data runs past end at offset " + std::to_string(r.offset()));
      t.data.resize(n);
      for (auto& v : t.data) v = r.f32();
      ck.tensors.push_back(std::move(t));
    }
    std::uint32_t meta_len = r.u32();
    auto meta = r.bytes(meta_len);
    try {
      ck.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::BadConfig, source + ": bad metadata JSON: " + e.what());
    }
    return ck;
  }

  void save(const std::string& path) const { io::write_file(path, serialize()); }
  static Checkpoint load(const std::string& path) { return parse(io::read_file(path), path); }
};

template <typename T>
NamedTensor to_named(const std::string& name, const Mat<T>& m) {
  NamedTensor t{name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, {}};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return t;
}

template <typename T>
void from_named(const NamedTensor& t, Mat<T>& m) {
  require(t.dims.size() == 2 && t.dims[0] == m.rows() && t.dims[1] == m.cols(), ErrorKind::ShapeMismatch,
          "checkpoint tensor '" + t.name + "' has unexpected shape");
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(t.data[static_cast<std::size_t>(i)]);
}

inline nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"d1", c.d1},           {"d2", c.d2},         {"k", c.k},
          {"prefix_len", c.prefix_len}, {"layers", c.layers}, {"heads", c.heads},
          {"ffn_mult", c.ffn_mult}, {"feat_dim", c.feat_dim}, {"prefix_hidden", c.prefix_hidden}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.d1 = j.at("d1");
  c.d2 = j.at("d2");
  c.k = j.at("k");
  c.prefix_len = j.at("prefix_len");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.ffn_mult = j.at("ffn_mult");
  c.feat_dim = j.at("feat_dim");
  c.prefix_hidden = j.at("prefix_hidden");
  c.validate();
  return c;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

/// Model tensors plus the embedding table ("embedding"). `metadata` is
/// extended with the network config and vocabulary.
template <typename T>
Checkpoint make_checkpoint(const DenoiserModel<T>& model, const EmbeddingTable<T>& emb,
                           const Vocabulary& vocab, nlohmann::json metadata) {
  Checkpoint ck;
  model.params().visit([&](const std::string& name, const Mat<T>& m) { ck.tensors.push_back(to_named(name, m)); });
  ck.tensors.push_back(to_named("embedding", emb.weights));
  metadata["model"] = to_json(model.config());
  metadata["vocab_hash"] = hex64(vocab.hash());
  metadata["vocab"] = vocab.tokens();
  ck.metadata = std::move(metadata);
  return ck;
}

template <typename T>
struct LoadedModel {
  DenoiserModel<T> model;
  EmbeddingTable<T> emb;
  Vocabulary vocab;
  nlohmann::json metadata;
};

template <typename T>
LoadedModel<T> load_model(const Checkpoint& ck) {
  try {
    auto cfg = denoiser_config_from_json(ck.metadata.at("model"));
    auto params = DenoiserParams<T>::zeros(cfg);
    params.visit([&](const std::string& name, Mat<T>& m) { from_named(ck.find(name), m); });
    auto vocab = Vocabulary::from_tokens(ck.metadata.at("vocab").get<std::vector<std::string>>());
    require(hex64(vocab.hash()) == ck.metadata.at("vocab_hash").get<std::string>(), ErrorKind::BadConfig,
            "checkpoint vocabulary hash mismatch");
    Mat<T> emb(static_cast<Eigen::Index>(vocab.size()), cfg.d1);
    from_named(ck.find("embedding"), emb);
    return {DenoiserModel<T>(cfg, std::move(params)), EmbeddingTable<T>(std::move(emb)), std::move(vocab),
            ck.metadata};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadConfig, std::string("checkpoint metadata: ") + e.what());
  }
}

}  // namespace pfxd
