#pragma once

// Lower-cased byte-pair encoding with an end-of-word marker.

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dodeca/error.hpp"

namespace dodeca::bpe {

using TokenId = std::int32_t;

// Reserved low ids.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kStart = 1;
inline constexpr TokenId kEnd = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kPersonaSep = 4;
inline constexpr TokenId kKnowledgeSep = 5;
inline constexpr TokenId kTurnSep = 6;
inline constexpr std::size_t kSpecialCount = 7;
inline constexpr std::array<std::string_view, kSpecialCount> kSpecialTokens{
    "<pad>", "<s>", "</s>", "<unk>", "<persona>", "<knowledge>", "<turn>"};

inline constexpr std::string_view kEndOfWord = "</w>";
inline constexpr std::size_t kDefaultMerges = 2000;
inline constexpr int kFormatVersion = 1;

inline bool is_special(TokenId id) noexcept { return id >= 0 && static_cast<std::size_t>(id) < kSpecialCount; }

namespace detail {

inline bool is_space(char c) noexcept {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Splits a UTF-8 string into code points, keeping each as its byte string.
// Invalid lead bytes are taken one byte at a time.
inline std::vector<std::string> code_points(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size();) {
    const auto lead = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    len = std::min(len, word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

}  // namespace detail

// Lowercases ASCII letters and collapses whitespace runs into single spaces.
inline std::string normalize(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (const char c : text) {
    if (detail::is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c);
  }
  return out;
}

inline std::vector<std::string> split_words(std::string_view normalized) {
  std::vector<std::string> words;
  std::size_t start = 0;
  while (start < normalized.size()) {
    std::size_t end = normalized.find(' ', start);
    if (end == std::string_view::npos) end = normalized.size();
    if (end > start) words.emplace_back(normalized.substr(start, end - start));
    start = end + 1;
  }
  return words;
}

using Merge = std::pair<std::string, std::string>;

class Vocabulary {
 public:
  Vocabulary() : Vocabulary({}, {}) {}

  // `alphabet` is the set of code points seen in training; each contributes a
  // word-internal and a word-final symbol.
  Vocabulary(std::vector<std::string> alphabet, std::vector<Merge> merges, std::string config_echo = {})
      : alphabet_(std::move(alphabet)), merges_(std::move(merges)), config_echo_(std::move(config_echo)) {
    std::sort(alphabet_.begin(), alphabet_.end());
    alphabet_.erase(std::unique(alphabet_.begin(), alphabet_.end()), alphabet_.end());
    for (const auto s : kSpecialTokens) add_token(std::string(s));
    for (const auto& ch : alphabet_) add_token(ch);
    for (const auto& ch : alphabet_) add_token(ch + std::string(kEndOfWord));
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [left, right] = merges_[r];
      if (!token_to_id_.contains(left) || !token_to_id_.contains(right)) {
        throw SchemaError("merge " + std::to_string(r) + " (" + left + ", " + right + ") uses an unknown symbol");
      }
      merge_rank_.emplace(left + '\x1f' + right, r);
      add_token(left + right);
    }
  }

  [[nodiscard]] std::size_t size() const noexcept { return id_to_token_.size(); }
  [[nodiscard]] const std::vector<std::string>& alphabet() const noexcept { return alphabet_; }
  [[nodiscard]] const std::vector<Merge>& merges() const noexcept { return merges_; }
  [[nodiscard]] const std::string& config_echo() const noexcept { return config_echo_; }
  void set_config_echo(std::string echo) { config_echo_ = std::move(echo); }

  [[nodiscard]] const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
      throw LookupError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  [[nodiscard]] std::optional<TokenId> id(std::string_view token) const {
    if (auto it = token_to_id_.find(std::string(token)); it != token_to_id_.end()) return it->second;
    return std::nullopt;
  }

  [[nodiscard]] std::optional<std::size_t> merge_rank(const std::string& left, const std::string& right) const {
    if (auto it = merge_rank_.find(left + '\x1f' + right); it != merge_rank_.end()) return it->second;
    return std::nullopt;
  }

  [[nodiscard]] bool in_alphabet(const std::string& code_point) const {
    return std::binary_search(alphabet_.begin(), alphabet_.end(), code_point);
  }

  // FNV-1a over alphabet and merges; identifies the segmentation, not the
  // config echo.
  [[nodiscard]] std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::string_view s) {
      for (const char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
      }
      h ^= 0xFF;
      h *= 1099511628211ULL;
    };
    for (const auto& a : alphabet_) mix(a);
    mix("|");
    for (const auto& [l, r] : merges_) {
      mix(l);
      mix(r);
    }
    return h;
  }

  bool operator==(const Vocabulary& other) const {
    return alphabet_ == other.alphabet_ && merges_ == other.merges_ && config_echo_ == other.config_echo_;
  }

  void save(std::ostream& out) const {
    out << "dodeca-vocab " << kFormatVersion << '\n';
    out << "config " << (config_echo_.empty() ? "-" : config_echo_) << '\n';
    out << "alphabet " << alphabet_.size() << '\n';
    for (const auto& a : alphabet_) out << a << '\n';
    out << "merges " << merges_.size() << '\n';
    for (const auto& [l, r] : merges_) out << l << ' ' << r << '\n';
    out << "specials " << kSpecialCount << '\n';
    for (std::size_t i = 0; i < kSpecialCount; ++i) out << i << ' ' << kSpecialTokens[i] << '\n';
  }

  static Vocabulary load(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    auto next = [&](std::string_view what) {
      if (!std::getline(in, line)) {
        throw ParseError("vocabulary: unexpected end of file while reading " + std::string(what));
      }
      ++line_no;
      return line;
    };
    auto fail = [&](const std::string& msg) -> ParseError {
      return ParseError("vocabulary line " + std::to_string(line_no) + ": " + msg);
    };
    auto counted = [&](std::string_view key) {
      std::istringstream ls(next(key));
      std::string k;
      std::size_t n = 0;
      if (!(ls >> k >> n) || k != key) throw fail("expected '" + std::string(key) + " <count>'");
      return n;
    };

    {
      std::istringstream ls(next("header"));
      std::string magic;
      int version = 0;
      if (!(ls >> magic >> version) || magic != "dodeca-vocab") throw fail("not a vocabulary file");
      if (version != kFormatVersion) {
        throw CompatibilityError("vocabulary format version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kFormatVersion) + ")");
      }
    }
    next("config");
    if (line.rfind("config ", 0) != 0) throw fail("expected config line");
    std::string echo = line.substr(7);
    if (echo == "-") echo.clear();

    std::vector<std::string> alphabet(counted("alphabet"));
    for (auto& a : alphabet) {
      a = next("alphabet symbol");
      if (a.empty()) throw fail("empty alphabet symbol");
    }
    std::vector<Merge> merges(counted("merges"));
    for (auto& m : merges) {
      next("merge");
      const auto sp = line.find(' ');
      if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size()) throw fail("malformed merge '" + line + "'");
      m = {line.substr(0, sp), line.substr(sp + 1)};
    }
    const std::size_t specials = counted("specials");
    if (specials != kSpecialCount) throw fail("expected " + std::to_string(kSpecialCount) + " specials");
    for (std::size_t i = 0; i < specials; ++i) {
      std::istringstream ls(next("special"));
      std::size_t id = 0;
      std::string tok;
      if (!(ls >> id >> tok) || id != i || tok != kSpecialTokens[i]) throw fail("special token table mismatch");
    }
    return Vocabulary(std::move(alphabet), std::move(merges), std::move(echo));
  }

 private:
  void add_token(std::string tok) {
    if (token_to_id_.contains(tok)) return;
    token_to_id_.emplace(tok, static_cast<TokenId>(id_to_token_.size()));
    id_to_token_.push_back(std::move(tok));
  }

  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;
  std::string config_echo_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::unordered_map<std::string, std::size_t> merge_rank_;
};

namespace detail {

// Initial segmentation: one symbol per code point, end-of-word marker glued
// to the last one.
inline std::vector<std::string> initial_symbols(const std::string& word) {
  auto symbols = code_points(word);
  if (!symbols.empty()) symbols.back() += kEndOfWord;
  return symbols;
}

inline void apply_merge(std::vector<std::string>& symbols, const std::string& left, const std::string& right) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
      out.push_back(left + right);
      ++i;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
}

}  // namespace detail

// Greedy BPE: repeatedly merge the most frequent adjacent pair, ties broken
// by lexicographic order of the pair. Stops early when no pair remains.
inline Vocabulary learn(std::span<const std::string> corpus, std::size_t num_merges) {
  std::map<std::string, std::int64_t> word_counts;
  std::set<std::string> alphabet;
  for (const auto& line : corpus) {
    for (auto& w : split_words(normalize(line))) {
      for (auto& cp : detail::code_points(w)) alphabet.insert(std::move(cp));
      ++word_counts[std::move(w)];
    }
  }
  if (word_counts.empty()) throw DataError("BPE corpus is empty after normalization");

  struct Word {
    std::vector<std::string> symbols;
    std::int64_t count;
  };
  std::vector<Word> words;
  for (const auto& [w, c] : word_counts) words.push_back({detail::initial_symbols(w), c});

  std::map<Merge, std::int64_t> pair_counts;
  std::map<Merge, std::set<std::size_t>> pair_words;
  auto account = [&](std::size_t wi, std::int64_t sign) {
    const auto& syms = words[wi].symbols;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      Merge p{syms[i], syms[i + 1]};
      auto& c = pair_counts[p];
      c += sign * words[wi].count;
      if (sign > 0) pair_words[p].insert(wi);
      if (c == 0) pair_counts.erase(p);
    }
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) account(wi, +1);

  std::vector<Merge> merges;
  while (merges.size() < num_merges && !pair_counts.empty()) {
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const Merge chosen = best->first;
    merges.push_back(chosen);
    const auto affected = pair_words[chosen];
    for (const std::size_t wi : affected) {
      account(wi, -1);
      detail::apply_merge(words[wi].symbols, chosen.first, chosen.second);
      account(wi, +1);
    }
    pair_words.erase(chosen);
  }
  return Vocabulary(std::vector<std::string>(alphabet.begin(), alphabet.end()), std::move(merges));
}

// Segments one (already normalized) word into vocabulary ids.
inline void encode_word(const std::string& word, const Vocabulary& vocab, std::vector<TokenId>& out) {
  auto cps = detail::code_points(word);
  std::vector<std::string> symbols;
  std::vector<bool> unknown;
  for (std::size_t i = 0; i < cps.size(); ++i) {
    const bool known = vocab.in_alphabet(cps[i]);
    unknown.push_back(!known);
    symbols.push_back(known ? cps[i] + (i + 1 == cps.size() ? std::string(kEndOfWord) : std::string()) : std::string());
  }
  // Merge lowest-ranked pairs first; unknown slots never participate.
  for (;;) {
    std::optional<std::size_t> best_rank;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      if (unknown[i] || unknown[i + 1]) continue;
      if (auto r = vocab.merge_rank(symbols[i], symbols[i + 1]); r && (!best_rank || *r < *best_rank)) best_rank = r;
    }
    if (!best_rank) break;
    const auto& [left, right] = vocab.merges()[*best_rank];
    std::vector<std::string> merged;
    std::vector<bool> merged_unknown;
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size() && !unknown[i] && !unknown[i + 1] && symbols[i] == left && symbols[i + 1] == right) {
        merged.push_back(left + right);
        merged_unknown.push_back(false);
        ++i;
      } else {
        merged.push_back(std::move(symbols[i]));
        merged_unknown.push_back(unknown[i]);
      }
    }
    symbols = std::move(merged);
    unknown = std::move(merged_unknown);
  }
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    out.push_back(unknown[i] ? kUnk : vocab.id(symbols[i]).value_or(kUnk));
  }
}

inline std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(normalize(text))) encode_word(w, vocab, ids);
  return ids;
}

// Specials are dropped; the end-of-word marker becomes a space.
inline std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (const TokenId id : ids) {
    const std::string& tok = vocab.token(id);
    if (is_special(id)) continue;
    if (tok.size() >= kEndOfWord.size() && tok.compare(tok.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0) {
      out.append(tok, 0, tok.size() - kEndOfWord.size());
      out.push_back(' ');
    } else {
      out += tok;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

}  // namespace dodeca::bpe
