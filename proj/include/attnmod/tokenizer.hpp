#pragma once

// Byte-mode and GPT-2 style byte-level BPE tokenization.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "attnmod/error.hpp"

namespace attnmod {

// Which token's residual stream an operation reads.
struct PositionSpec {
  enum class Kind { last, cls, index };
  Kind kind = Kind::last;
  int index = 0;

  static PositionSpec last() { return {Kind::last, 0}; }
  static PositionSpec cls() { return {Kind::cls, 0}; }
  static PositionSpec at(int i) { return {Kind::index, i}; }

  std::string str() const {
    switch (kind) {
      case Kind::last: return "last";
      case Kind::cls: return "cls";
      case Kind::index: return "index(" + std::to_string(index) + ")";
    }
    return "last";
  }
  bool operator==(const PositionSpec&) const = default;
};

// Accepts "last", "cls" or a non-negative integer index.
inline PositionSpec parse_position(const std::string& s) {
  if (s == "last") return PositionSpec::last();
  if (s == "cls") return PositionSpec::cls();
  std::string digits = s;
  if (digits.rfind("index(", 0) == 0 && digits.back() == ')') digits = digits.substr(6, digits.size() - 7);
  try {
    size_t used = 0;
    const int i = std::stoi(digits, &used);
    if (used == digits.size() && i >= 0) return PositionSpec::at(i);
  } catch (const std::exception&) {
  }
  fail(ErrorKind::config, "bad position '" + s + "' (expected last, cls or an index)");
}

struct TokenSequence {
  std::vector<int32_t> ids;
  PositionSpec position = PositionSpec::last();
};

namespace detail {

inline void append_utf8(std::string& out, uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::vector<uint32_t> decode_utf8(std::string_view s) {
  std::vector<uint32_t> cps;
  for (size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    uint32_t cp;
    size_t len;
    if (c < 0x80) cp = c, len = 1;
    else if ((c >> 5) == 0x6) cp = c & 0x1F, len = 2;
    else if ((c >> 4) == 0xE) cp = c & 0x0F, len = 3;
    else cp = c & 0x07, len = 4;
    if (i + len > s.size()) fail(ErrorKind::data, "invalid utf-8 in token");
    for (size_t k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    cps.push_back(cp);
    i += len;
  }
  return cps;
}

// GPT-2's reversible byte -> printable code point table.
inline const std::array<uint32_t, 256>& byte_to_codepoint() {
  static const std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    std::array<bool, 256> printable{};
    for (int b = '!'; b <= '~'; ++b) printable[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
    uint32_t next = 256;
    for (int b = 0; b < 256; ++b) t[b] = printable[b] ? static_cast<uint32_t>(b) : next++;
    return t;
  }();
  return table;
}

enum class CharClass { space, letter, digit, other };

inline CharClass classify(unsigned char c) {
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return CharClass::space;
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80) return CharClass::letter;
  if (c >= '0' && c <= '9') return CharClass::digit;
  return CharClass::other;
}

// Hand-rolled equivalent of GPT-2's pre-tokenizer pattern
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
// Non-ASCII bytes are treated as letters.
inline std::vector<std::string_view> pretokenize(std::string_view s) {
  std::vector<std::string_view> out;
  const size_t n = s.size();
  auto run = [&](size_t j, CharClass cls) {
    while (j < n && classify(static_cast<unsigned char>(s[j])) == cls) ++j;
    return j;
  };
  size_t i = 0;
  while (i < n) {
    if (s[i] == '\'') {
      static constexpr std::array<std::string_view, 7> contractions{"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
      bool matched = false;
      for (auto c : contractions) {
        if (s.substr(i, c.size()) == c) {
          out.push_back(s.substr(i, c.size()));
          i += c.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    const auto cls = classify(static_cast<unsigned char>(s[i]));
    if (cls != CharClass::space) {
      out.push_back(s.substr(i, run(i, cls) - i));
      i = run(i, cls);
      continue;
    }
    if (s[i] == ' ' && i + 1 < n) {
      const auto next = classify(static_cast<unsigned char>(s[i + 1]));
      if (next != CharClass::space) {
        const size_t end = run(i + 1, next);
        out.push_back(s.substr(i, end - i));
        i = end;
        continue;
      }
    }
    const size_t end = run(i, CharClass::space);
    if (end == n || end - i == 1) {
      out.push_back(s.substr(i, end - i));
      i = end;
    } else {
      // leave the last whitespace char to prefix the following word
      out.push_back(s.substr(i, end - i - 1));
      i = end - 1;
    }
  }
  return out;
}

struct PairHash {
  size_t operator()(const std::pair<std::string, std::string>& p) const {
    return std::hash<std::string>()(p.first) * 31 + std::hash<std::string>()(p.second);
  }
};

}  // namespace detail

class Tokenizer {
 public:
  // One token per byte; ids are byte values.
  static Tokenizer bytes() { return Tokenizer(); }

  static Tokenizer bpe(std::unordered_map<std::string, int32_t> vocab,
                       const std::vector<std::pair<std::string, std::string>>& merges) {
    Tokenizer t;
    t.byte_mode_ = false;
    t.vocab_ = std::move(vocab);
    for (const auto& [tok, id] : t.vocab_) {
      if (id < 0) fail(ErrorKind::data, "negative token id in vocab");
      if (static_cast<size_t>(id) >= t.id_to_token_.size()) t.id_to_token_.resize(static_cast<size_t>(id) + 1);
      t.id_to_token_[static_cast<size_t>(id)] = tok;
    }
    for (size_t r = 0; r < merges.size(); ++r) t.merge_rank_.emplace(merges[r], static_cast<int>(r));
    const auto& table = detail::byte_to_codepoint();
    for (int b = 0; b < 256; ++b) t.codepoint_to_byte_[table[b]] = static_cast<unsigned char>(b);
    return t;
  }

  static Tokenizer load_bpe(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
    std::ifstream vin(vocab_json);
    if (!vin) fail(ErrorKind::data, "cannot open " + vocab_json.string());
    std::unordered_map<std::string, int32_t> vocab;
    try {
      nlohmann::json j;
      vin >> j;
      for (const auto& [k, v] : j.items()) vocab.emplace(k, v.get<int32_t>());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::data, "vocab.json: " + std::string(e.what()));
    }
    std::ifstream min(merges_txt);
    if (!min) fail(ErrorKind::data, "cannot open " + merges_txt.string());
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    while (std::getline(min, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.rfind("#version", 0) == 0) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos) fail(ErrorKind::data, "merges.txt: malformed line '" + line + "'");
      merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return bpe(std::move(vocab), merges);
  }

  bool byte_mode() const { return byte_mode_; }
  int vocab_size() const { return byte_mode_ ? 256 : static_cast<int>(id_to_token_.size()); }

  std::vector<int32_t> encode(std::string_view text) const {
    if (text.empty()) fail(ErrorKind::data, "empty input");
    std::vector<int32_t> ids;
    if (byte_mode_) {
      for (char c : text) ids.push_back(static_cast<unsigned char>(c));
      return ids;
    }
    const auto& table = detail::byte_to_codepoint();
    for (auto word : detail::pretokenize(text)) {
      std::vector<std::string> symbols;
      for (char c : word) {
        std::string sym;
        detail::append_utf8(sym, table[static_cast<unsigned char>(c)]);
        symbols.push_back(std::move(sym));
      }
      apply_merges(symbols);
      for (const auto& sym : symbols) {
        const auto it = vocab_.find(sym);
        if (it == vocab_.end()) fail(ErrorKind::data, "token '" + sym + "' missing from vocab");
        ids.push_back(it->second);
      }
    }
    return ids;
  }

  std::string decode(std::span<const int32_t> ids) const {
    std::string out;
    for (int32_t id : ids) {
      if (id < 0 || id >= vocab_size() || (!byte_mode_ && id_to_token_[static_cast<size_t>(id)].empty()))
        fail(ErrorKind::data, "unknown token id " + std::to_string(id));
      if (byte_mode_) {
        out.push_back(static_cast<char>(id));
        continue;
      }
      for (uint32_t cp : detail::decode_utf8(id_to_token_[static_cast<size_t>(id)])) {
        const auto it = codepoint_to_byte_.find(cp);
        if (it == codepoint_to_byte_.end()) fail(ErrorKind::data, "token id " + std::to_string(id) + " has no byte mapping");
        out.push_back(static_cast<char>(it->second));
      }
    }
    return out;
  }

  // The id of `text` when it encodes to exactly one token.
  std::optional<int32_t> single_token(std::string_view text) const {
    if (text.empty()) return std::nullopt;
    const auto ids = encode(text);
    if (ids.size() != 1) return std::nullopt;
    return ids.front();
  }

 private:
  Tokenizer() = default;

  void apply_merges(std::vector<std::string>& symbols) const {
    while (symbols.size() > 1) {
      int best_rank = -1;
      std::pair<std::string, std::string> best;
      for (size_t i = 0; i + 1 < symbols.size(); ++i) {
        const auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
        if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
          best_rank = it->second;
          best = it->first;
        }
      }
      if (best_rank < 0) break;
      std::vector<std::string> merged;
      merged.reserve(symbols.size());
      for (size_t i = 0; i < symbols.size();) {
        if (i + 1 < symbols.size() && symbols[i] == best.first && symbols[i + 1] == best.second) {
          merged.push_back(symbols[i] + symbols[i + 1]);
          i += 2;
        } else {
          merged.push_back(symbols[i]);
          ++i;
        }
      }
      symbols = std::move(merged);
    }
  }

  bool byte_mode_ = true;
  std::unordered_map<std::string, int32_t> vocab_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::pair<std::string, std::string>, int, detail::PairHash> merge_rank_;
  std::map<uint32_t, unsigned char> codepoint_to_byte_;
};

inline TokenSequence tokenize(const Tokenizer& tok, std::string_view text, PositionSpec position = PositionSpec::last()) {
  return TokenSequence{tok.encode(text), position};
}

inline std::string detokenize(const Tokenizer& tok, std::span<const int32_t> ids) { return tok.decode(ids); }

}  // namespace attnmod
