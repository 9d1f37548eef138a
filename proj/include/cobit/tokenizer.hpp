#pragma once

// Word-level text vocabulary with reserved control tokens.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cobit/tensor.hpp"

namespace cobit {

enum ReservedToken : int { kPad = 0, kBos = 1, kEos = 2, kCls = 3, kNull = 4, kUnk = 5 };
inline constexpr int kReservedCount = 6;
inline constexpr std::size_t kDefaultMaxTextLen = 64;

/// Fixed-length id sequence: real tokens followed by PAD.
struct TextTokenSeq {
  std::vector<int> ids;

  /// Number of ids before the first PAD.
  std::size_t length() const {
    return static_cast<std::size_t>(std::find(ids.begin(), ids.end(), kPad) - ids.begin());
  }
  bool operator==(const TextTokenSeq&) const = default;
};

class TextVocab {
 public:
  TextVocab() : tokens_{"<pad>", "<bos>", "<eos>", "<cls>", "<null>", "<unk>"} { reindex(); }

  explicit TextVocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < kReservedCount) throw FormatError("vocabulary lacks the reserved tokens");
    reindex();
    if (index_.size() != tokens_.size()) throw FormatError("vocabulary has duplicate tokens");
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  static bool is_reserved(int id) { return id >= 0 && id < kReservedCount; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocabulary file '" + path + "'");
    for (const auto& t : tokens_) out << t << '\n';
  }
  static TextVocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read vocabulary file '" + path + "'");
    std::vector<std::string> tokens;
    for (std::string line; std::getline(in, line);) tokens.push_back(line);
    return TextVocab(std::move(tokens));
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

inline std::vector<std::string> split_words(const std::string& s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  std::istringstream is(lower);
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  return words;
}

/// Reserved tokens, then words by descending frequency, ties lexicographic.
inline TextVocab build_text_vocab(const std::vector<std::string>& corpus) {
  if (corpus.empty()) throw Error("build_text_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus)
    for (auto& w : split_words(line)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = TextVocab().tokens();
  for (auto& [w, c] : ordered) tokens.push_back(w);
  return TextVocab(std::move(tokens));
}

/// BOS words... EOS [CLS] PAD..., always exactly max_len ids. Words beyond
/// the room left by the control tokens are dropped.
inline TextTokenSeq encode_text(const TextVocab& vocab, const std::string& s, bool append_cls,
                                std::size_t max_len = kDefaultMaxTextLen) {
  const std::size_t control = append_cls ? 3 : 2;
  if (max_len < control) throw ShapeError("encode_text: max length too small for the control tokens");
  auto words = split_words(s);
  if (words.size() > max_len - control) words.resize(max_len - control);
  TextTokenSeq seq;
  seq.ids.reserve(max_len);
  seq.ids.push_back(kBos);
  for (const auto& w : words) seq.ids.push_back(vocab.id(w));
  seq.ids.push_back(kEos);
  if (append_cls) seq.ids.push_back(kCls);
  seq.ids.resize(max_len, kPad);
  return seq;
}

/// Words of the sequence up to the first EOS, control tokens dropped.
inline std::string decode_text(const TextVocab& vocab, const TextTokenSeq& seq) {
  std::string out;
  for (int id : seq.ids) {
    if (id == kEos) break;
    if (TextVocab::is_reserved(id) || id < 0 || static_cast<std::size_t>(id) >= vocab.size()) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

}  // namespace cobit
