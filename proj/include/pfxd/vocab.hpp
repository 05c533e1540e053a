#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pfxd/error.hpp"
#include "pfxd/rng.hpp"
#include "pfxd/tensor.hpp"

namespace pfxd {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kUnk = 2;
inline constexpr int kReservedTokens = 3;

/// Lowercase, strip ASCII punctuation, split on whitespace.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// `words` excludes the reserved markers; they are prepended here.
  explicit Vocabulary(const std::vector<std::string>& words) {
    tokens_ = {"<pad>", "<eos>", "<unk>"};
    for (const auto& w : words) tokens_.push_back(w);
    index();
  }

  static Vocabulary from_tokens(std::vector<std::string> tokens) {
    require(tokens.size() >= kReservedTokens && tokens[0] == "<pad>" && tokens[1] == "<eos>" &&
                tokens[2] == "<unk>",
            ErrorKind::BadConfig, "vocabulary must start with <pad>, <eos>, <unk>");
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    v.index();
    return v;
  }

  /// Sorted unique words of a corpus, after tokenization.
  static Vocabulary build(std::span<const std::string> corpus) {
    std::set<std::string> words;
    for (const auto& line : corpus)
      for (auto& w : tokenize(line)) words.insert(std::move(w));
    return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open vocabulary file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write vocabulary file " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  TokenId id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& word) const { return ids_.count(word) > 0; }

  /// FNV-1a over the newline-joined token list.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens_) {
      for (unsigned char c : t) h = (h ^ c) * 0x100000001b3ULL;
      h = (h ^ '\n') * 0x100000001b3ULL;
    }
    return h;
  }

 private:
  void index() {
    ids_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
        throw Error(ErrorKind::BadConfig, "duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Fixed-length caption: k ids, PAD after the first EOS.
using TokenSequence = std::vector<TokenId>;

inline TokenSequence encode(std::string_view text, const Vocabulary& vocab, int k) {
  require(k >= 2, ErrorKind::BadConfig, "caption length k must be >= 2");
  auto words = tokenize(text);
  require(!words.empty(), ErrorKind::EmptyInput, "caption has no tokens");
  TokenSequence seq(static_cast<std::size_t>(k), kPad);
  std::size_t n = std::min(words.size(), static_cast<std::size_t>(k - 1));
  for (std::size_t i = 0; i < n; ++i) seq[i] = vocab.id(words[i]);
  seq[n] = kEos;
  return seq;
}

inline std::string detokenize(std::span<const TokenId> seq, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : seq) {
    if (id == kEos) break;
    if (id == kPad) continue;
    const std::string& word = id == kUnk ? vocab.token(kUnk) : vocab.token(id);
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

/// Learnable |V| x d1 token embedding matrix.
template <typename T>
struct EmbeddingTable {
  Mat<T> weights;

  EmbeddingTable() = default;
  explicit EmbeddingTable(Mat<T> w) : weights(std::move(w)) {}

  static EmbeddingTable random(std::size_t vocab_size, int d1, Rng& rng, double stddev = 0.02) {
    require(d1 >= 2, ErrorKind::BadConfig, "embedding width d1 must be >= 2");
    return EmbeddingTable(rng.normal_matrix<T>(static_cast<Eigen::Index>(vocab_size), d1, stddev));
  }

  Eigen::Index size() const { return weights.rows(); }
  int dim() const { return static_cast<int>(weights.cols()); }
};

template <typename T>
Mat<T> embed(std::span<const TokenId> seq, const EmbeddingTable<T>& table) {
  Mat<T> out(static_cast<Eigen::Index>(seq.size()), table.weights.cols());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] < 0 || seq[i] >= table.size())
      throw Error(ErrorKind::BadToken, "token id " + std::to_string(seq[i]) + " out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.weights.row(seq[i]);
  }
  return out;
}

/// Index of the nearest table row by Euclidean distance; lowest id wins ties.
template <typename T, typename Row>
TokenId nearest_token(const Row& x, const EmbeddingTable<T>& table) {
  TokenId best = 0;
  T best_d = std::numeric_limits<T>::infinity();
  for (Eigen::Index v = 0; v < table.size(); ++v) {
    T d = (table.weights.row(v) - x).squaredNorm();
    if (d < best_d) best_d = d, best = static_cast<TokenId>(v);
  }
  return best;
}

/// Everything after the first EOS or PAD becomes PAD.
inline void apply_trailing_rule(TokenSequence& seq) {
  bool ended = false;
  for (auto& id : seq) {
    if (ended) id = kPad;
    else if (id == kEos || id == kPad) ended = true;
  }
}

template <typename T>
TokenSequence round_to_tokens(const Mat<T>& x0, const EmbeddingTable<T>& table) {
  require(x0.allFinite(), ErrorKind::NonFinite, "round_to_tokens: non-finite input");
  require(x0.cols() == table.weights.cols(), ErrorKind::ShapeMismatch,
          "round_to_tokens: width differs from embedding table");
  TokenSequence seq(static_cast<std::size_t>(x0.rows()));
  for (Eigen::Index i = 0; i < x0.rows(); ++i) seq[i] = nearest_token(x0.row(i), table);
  apply_trailing_rule(seq);
  return seq;
}

/// Smallest Euclidean distance between two distinct table rows.
template <typename T>
T min_pairwise_distance(const EmbeddingTable<T>& table) {
  T best = std::numeric_limits<T>::infinity();
  for (Eigen::Index a = 0; a < table.size(); ++a)
    for (Eigen::Index b = a + 1; b < table.size(); ++b)
      best = std::min(best, (table.weights.row(a) - table.weights.row(b)).norm());
  return best;
}

}  // namespace pfxd
