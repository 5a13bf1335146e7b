#pragma once

// Greedy, beam and nucleus decoding over a next-token log-probability
// function. Generated sequences exclude the start and end tokens; their
// length is the number of generated tokens.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dodeca/bpe.hpp"
#include "dodeca/config.hpp"
#include "dodeca/error.hpp"
#include "dodeca/model.hpp"

namespace dodeca::decoding {

using bpe::TokenId;

enum class Strategy { Greedy, Beam, Nucleus };

inline Strategy parse_strategy(std::string_view s) {
  if (s == "greedy") return Strategy::Greedy;
  if (s == "beam") return Strategy::Beam;
  if (s == "nucleus") return Strategy::Nucleus;
  throw ConfigError("unknown decoding strategy '" + std::string(s) + "' (expected greedy, beam or nucleus)");
}

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Greedy: return "greedy";
    case Strategy::Beam: return "beam";
    case Strategy::Nucleus: return "nucleus";
  }
  return "?";
}

struct DecodeConfig {
  Strategy strategy = Strategy::Beam;
  std::size_t beam_size = 3;
  std::size_t min_len = 10;
  std::size_t max_len = 128;
  std::size_t block_ngram = 3;  // 0 = off
  double nucleus_p = 0.9;
  std::uint64_t seed = 0;

  void validate() const {
    if (beam_size < 1) throw ConfigError("decode beam_size must be at least 1");
    if (max_len <= min_len) {
      throw ConfigError("decode max_len (" + std::to_string(max_len) + ") must exceed min_len (" + std::to_string(min_len) + ")");
    }
    if (block_ngram == 1) throw ConfigError("decode block_ngram must be 0 (off) or at least 2");
    if (!(nucleus_p > 0.0 && nucleus_p <= 1.0)) throw ConfigError("decode nucleus_p must lie in (0, 1]");
  }

  bool operator==(const DecodeConfig&) const = default;
};

// Log-probabilities of the next token given the tokens generated so far.
using NextTokenScorer = std::function<std::vector<double>(std::span<const TokenId> generated)>;

namespace detail {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// True if appending `next` repeats an n-gram already present in `seq`.
inline bool repeats_ngram(std::span<const TokenId> seq, TokenId next, std::size_t n) {
  if (n == 0 || seq.size() + 1 < n) return false;
  const std::size_t tail = seq.size() - (n - 1);
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    bool same = seq[i + n - 1] == next;
    for (std::size_t k = 0; same && k + 1 < n; ++k) same = seq[i + k] == seq[tail + k];
    if (same) return true;
  }
  return false;
}

// Applies min-length and n-gram constraints; returns false if every token
// is excluded.
inline bool constrain(std::vector<double>& lp, std::span<const TokenId> seq, const DecodeConfig& cfg) {
  if (seq.size() < cfg.min_len) lp[bpe::kEnd] = kNegInf;
  bool any = false;
  for (std::size_t t = 0; t < lp.size(); ++t) {
    if (lp[t] == kNegInf) continue;
    if (cfg.block_ngram != 0 && static_cast<TokenId>(t) != bpe::kEnd && repeats_ngram(seq, static_cast<TokenId>(t), cfg.block_ngram)) {
      lp[t] = kNegInf;
      continue;
    }
    any = true;
  }
  return any;
}

inline std::vector<double> score(const NextTokenScorer& scorer, std::span<const TokenId> seq) {
  auto lp = scorer(seq);
  if (lp.size() <= static_cast<std::size_t>(bpe::kEnd)) throw DimensionError("scorer returned fewer log-probabilities than special tokens");
  for (const double v : lp)
    if (std::isnan(v)) throw NumericError("scorer returned NaN");
  return lp;
}

}  // namespace detail

// Argmax per step (lowest id on ties). When every continuation is excluded
// the end token is emitted.
inline std::vector<TokenId> greedy(const NextTokenScorer& scorer, const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<TokenId> seq;
  while (seq.size() < cfg.max_len) {
    auto lp = detail::score(scorer, seq);
    if (!detail::constrain(lp, seq, cfg)) break;
    const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    if (best == bpe::kEnd) break;
    seq.push_back(best);
  }
  return seq;
}

struct Hypothesis {
  std::vector<TokenId> tokens;
  double log_prob = 0.0;
  bool finished = false;
};

// Beam search without length normalization. Finished hypotheses stay in the
// pool with their final score and compete with live ones; the search ends
// when no live hypothesis remains or none can beat the best finished one.
inline Hypothesis beam_search(const NextTokenScorer& scorer, const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<Hypothesis> pool{Hypothesis{}};
  for (;;) {
    std::vector<Hypothesis> next;
    for (const auto& h : pool)
      if (h.finished) next.push_back(h);
    bool expanded = false;
    for (const auto& h : pool) {
      if (h.finished) continue;
      expanded = true;
      if (h.tokens.size() >= cfg.max_len) {
        next.push_back({h.tokens, h.log_prob, true});
        continue;
      }
      auto lp = detail::score(scorer, h.tokens);
      if (!detail::constrain(lp, h.tokens, cfg)) {
        next.push_back({h.tokens, h.log_prob, true});
        continue;
      }
      for (std::size_t t = 0; t < lp.size(); ++t) {
        if (lp[t] == detail::kNegInf) continue;
        Hypothesis c{h.tokens, h.log_prob + lp[t], static_cast<TokenId>(t) == bpe::kEnd};
        if (!c.finished) c.tokens.push_back(static_cast<TokenId>(t));
        next.push_back(std::move(c));
      }
    }
    if (!expanded) break;
    std::stable_sort(next.begin(), next.end(), [](const Hypothesis& a, const Hypothesis& b) { return a.log_prob > b.log_prob; });
    if (next.size() > cfg.beam_size) next.resize(cfg.beam_size);
    pool = std::move(next);
    double best_finished = detail::kNegInf, best_live = detail::kNegInf;
    for (const auto& h : pool) {
      double& slot = h.finished ? best_finished : best_live;
      slot = std::max(slot, h.log_prob);
    }
    // Scores only decrease as tokens are appended.
    if (best_finished != detail::kNegInf && best_finished >= best_live) break;
  }
  const auto best = std::find_if(pool.begin(), pool.end(), [](const Hypothesis& h) { return h.finished; });
  if (best == pool.end()) throw ContractError("beam search ended without a finished hypothesis");
  return *best;
}

inline std::vector<TokenId> beam(const NextTokenScorer& scorer, const DecodeConfig& cfg) { return beam_search(scorer, cfg).tokens; }

// Samples from the smallest top-probability set whose mass reaches p.
inline std::vector<TokenId> nucleus(const NextTokenScorer& scorer, const DecodeConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  std::vector<TokenId> seq;
  std::vector<std::size_t> order;
  while (seq.size() < cfg.max_len) {
    auto lp = detail::score(scorer, seq);
    if (!detail::constrain(lp, seq, cfg)) break;
    const double mx = *std::max_element(lp.begin(), lp.end());
    std::vector<double> p(lp.size());
    double z = 0.0;
    for (std::size_t t = 0; t < lp.size(); ++t) z += (p[t] = std::exp(lp[t] - mx));
    for (double& v : p) v /= z;
    order.resize(p.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::size_t keep = 0;
    double mass = 0.0;
    while (keep < order.size() && p[order[keep]] > 0.0) {
      mass += p[order[keep++]];
      if (mass >= cfg.nucleus_p) break;
    }
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * mass;
    double acc = 0.0;
    std::size_t pick = order[keep - 1];
    for (std::size_t i = 0; i < keep; ++i) {
      acc += p[order[i]];
      if (u < acc) {
        pick = order[i];
        break;
      }
    }
    if (static_cast<TokenId>(pick) == bpe::kEnd) break;
    seq.push_back(static_cast<TokenId>(pick));
  }
  return seq;
}

inline std::vector<TokenId> decode(const NextTokenScorer& scorer, const DecodeConfig& cfg) {
  switch (cfg.strategy) {
    case Strategy::Greedy: return greedy(scorer, cfg);
    case Strategy::Beam: return beam(scorer, cfg);
    case Strategy::Nucleus: {
      std::mt19937_64 rng(cfg.seed);
      return nucleus(scorer, cfg, rng);
    }
  }
  return {};
}

// Scorer over a model with the encoder run once per context.
template <typename T>
NextTokenScorer model_scorer(model::Seq2Seq<T>& m, std::span<const TokenId> context, const std::vector<float>* image = nullptr) {
  auto enc = std::make_shared<model::EncoderOutput<T>>(m.encode(context, image));
  return [&m, enc](std::span<const TokenId> generated) {
    std::vector<TokenId> prefix{bpe::kStart};
    prefix.insert(prefix.end(), generated.begin(), generated.end());
    const auto logits = m.decode_step(prefix, *enc);
    const std::size_t V = logits.cols(), last = logits.rows() - 1;
    std::vector<double> lp(V, detail::kNegInf);
    double mx = detail::kNegInf;
    // Specials other than the end token are never generated.
    for (std::size_t c = 0; c < V; ++c) {
      if (bpe::is_special(static_cast<TokenId>(c)) && static_cast<TokenId>(c) != bpe::kEnd) continue;
      mx = std::max(mx, lp[c] = static_cast<double>(logits(last, c)));
    }
    double z = 0.0;
    for (const double v : lp) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    for (double& v : lp) v -= log_z;
    return lp;
  };
}

// ---------------------------------------------------------------------------
// Decode tables: per-task settings, whitespace-separated.
//
//   # dodeca decode-table v1
//   task  strategy  beam  min_len  max_len  block  nucleus_p

inline DecodeConfig default_decode_config() { return DecodeConfig{}; }

class DecodeTable {
 public:
  DecodeTable() = default;
  explicit DecodeTable(std::map<std::string, DecodeConfig> rows) : rows_(std::move(rows)) {}

  [[nodiscard]] DecodeConfig for_task(const std::string& task) const {
    const auto it = rows_.find(task);
    return it == rows_.end() ? default_decode_config() : it->second;
  }
  [[nodiscard]] bool contains(const std::string& task) const { return rows_.contains(task); }
  [[nodiscard]] const std::map<std::string, DecodeConfig>& rows() const noexcept { return rows_; }
  void set(const std::string& task, DecodeConfig cfg) { rows_[task] = cfg; }

 private:
  std::map<std::string, DecodeConfig> rows_;
};

inline constexpr std::string_view kDecodeTableHeader = "# dodeca decode-table v1";

namespace detail {

template <typename N>
N table_field(const std::string& task, const char* field, const std::string& text) {
  N value{};
  std::istringstream in(text);
  if (!(in >> value) || !in.eof()) throw ConfigError("decode table: task '" + task + "' field " + field + ": '" + text + "' is not a number");
  if constexpr (std::is_unsigned_v<N>) {
    if (text.front() == '-') throw ConfigError("decode table: task '" + task + "' field " + field + " must be non-negative");
  }
  return value;
}

}  // namespace detail

inline DecodeTable parse_decode_table(std::istream& in, const std::string& origin) {
  std::string line;
  if (!std::getline(in, line)) return {};
  if (dodeca::detail::trim(line) != kDecodeTableHeader) {
    if (dodeca::detail::trim(line).rfind("# dodeca decode-table", 0) == 0) {
      throw CompatibilityError(origin + ": unsupported decode table version: " + dodeca::detail::trim(line));
    }
    throw ParseError(origin + ": missing decode table header '" + std::string(kDecodeTableHeader) + "'");
  }
  std::map<std::string, DecodeConfig> rows;
  while (std::getline(in, line)) {
    const std::string t = dodeca::detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::istringstream fields(t);
    std::vector<std::string> f;
    for (std::string w; fields >> w;) f.push_back(w);
    const std::string task = f[0];
    if (f.size() != 7) throw ConfigError("decode table: task '" + task + "' has " + std::to_string(f.size()) + " fields, expected 7");
    DecodeConfig c;
    try {
      c.strategy = parse_strategy(f[1]);
    } catch (const ConfigError&) {
      throw ConfigError("decode table: task '" + task + "' field strategy: unknown value '" + f[1] + "'");
    }
    c.beam_size = detail::table_field<std::size_t>(task, "beam", f[2]);
    c.min_len = detail::table_field<std::size_t>(task, "min_len", f[3]);
    c.max_len = detail::table_field<std::size_t>(task, "max_len", f[4]);
    c.block_ngram = detail::table_field<std::size_t>(task, "block", f[5]);
    if (f[6] != "-") c.nucleus_p = detail::table_field<double>(task, "nucleus_p", f[6]);
    try {
      c.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("decode table: task '" + task + "': " + e.what());
    }
    rows[task] = c;
  }
  return DecodeTable(std::move(rows));
}

inline DecodeTable load_decode_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open decode table '" + path.string() + "'");
  return parse_decode_table(in, path.string());
}

inline void save_decode_table(const DecodeTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write decode table '" + path.string() + "'");
  out << kDecodeTableHeader << "\n# task strategy beam min_len max_len block nucleus_p\n";
  for (const auto& [task, c] : table.rows()) {
    out << task << ' ' << to_string(c.strategy) << ' ' << c.beam_size << ' ' << c.min_len << ' ' << c.max_len << ' '
        << c.block_ngram << ' ';
    if (c.strategy == Strategy::Nucleus) {
      out << c.nucleus_p;
    } else {
      out << '-';
    }
    out << '\n';
  }
}

// Field-wise overrides from `decode.*` keys.
inline DecodeConfig apply_overrides(DecodeConfig c, const RunConfig& cfg) {
  if (auto v = cfg.find("decode.strategy")) c.strategy = parse_strategy(*v);
  c.beam_size = cfg.get_number<std::size_t>("decode.beam", c.beam_size);
  c.min_len = cfg.get_number<std::size_t>("decode.min_len", c.min_len);
  c.max_len = cfg.get_number<std::size_t>("decode.max_len", c.max_len);
  c.block_ngram = cfg.get_number<std::size_t>("decode.block", c.block_ngram);
  c.nucleus_p = cfg.get_number<double>("decode.nucleus_p", c.nucleus_p);
  c.seed = cfg.get_number<std::uint64_t>("decode.seed", c.seed);
  c.validate();
  return c;
}

}  // namespace dodeca::decoding
