#pragma once

// Evaluation metrics: perplexity, BLEU, ROUGE-1/2/L, unigram F1, the mean
// perplexity aggregate, and per-task report assembly.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dodeca/bpe.hpp"
#include "dodeca/config.hpp"
#include "dodeca/corpus.hpp"
#include "dodeca/decoding.hpp"
#include "dodeca/error.hpp"
#include "dodeca/model.hpp"
#include "dodeca/training.hpp"

namespace dodeca::metrics {

inline constexpr std::string_view kTokenization = "lowercase, punctuation split, whitespace";
inline constexpr double kBleuEpsilon = 1e-9;

// Lowercases, isolates every punctuation character, splits on whitespace.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

using Tokens = std::vector<std::string>;
using bpe::TokenId;

namespace detail {

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++counts[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

inline std::size_t clipped_overlap(const std::map<std::vector<std::string>, std::size_t>& hyp,
                                   const std::map<std::vector<std::string>, std::size_t>& ref) {
  std::size_t o = 0;
  for (const auto& [g, c] : hyp)
    if (auto it = ref.find(g); it != ref.end()) o += std::min(c, it->second);
  return o;
}

inline double f_measure(std::size_t overlap, std::size_t hyp_total, std::size_t ref_total) {
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(hyp_total);
  const double r = static_cast<double>(overlap) / static_cast<double>(ref_total);
  return 2.0 * p * r / (p + r);
}

}  // namespace detail

// BLEU with uniform weights over 1..max_n grams, clipped against the maximum
// count in any reference, add-epsilon for zero matches (and for orders longer
// than the hypothesis), brevity penalty against the closest reference length.
inline double bleu(const Tokens& hyp, std::span<const Tokens> refs, std::size_t max_n = 4) {
  if (refs.empty()) throw ContractError("bleu: at least one reference is required");
  if (max_n < 1) throw ContractError("bleu: max_n must be at least 1");
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto h = detail::ngram_counts(hyp, n);
    std::map<std::vector<std::string>, std::size_t> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : detail::ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    const std::size_t total = hyp.size() >= n ? hyp.size() - n + 1 : 0;
    const std::size_t matched = detail::clipped_overlap(h, max_ref);
    const double p = (matched == 0 ? kBleuEpsilon : static_cast<double>(matched)) / static_cast<double>(std::max<std::size_t>(total, 1));
    log_sum += std::log(p);
  }
  std::size_t closest = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t len) { return len > hyp.size() ? len - hyp.size() : hyp.size() - len; };
    if (d(r.size()) < d(closest) || (d(r.size()) == d(closest) && r.size() < closest)) closest = r.size();
  }
  const double c = static_cast<double>(hyp.size()), r = static_cast<double>(closest);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

inline double bleu4(const Tokens& hyp, std::span<const Tokens> refs) { return bleu(hyp, refs, 4); }

// Mean of BLEU-1 through BLEU-4.
inline double avg_bleu(const Tokens& hyp, std::span<const Tokens> refs) {
  double s = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) s += bleu(hyp, refs, n);
  return s / 4.0;
}

inline double bleu4(std::string_view hyp, std::string_view ref) {
  const std::vector<Tokens> refs{tokenize(ref)};
  return bleu4(tokenize(hyp), refs);
}

enum class RougeVariant { One, Two, L };

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// F-measure with beta = 1. When neither side has an n-gram of the requested
// order the score is 1 for identical sequences and 0 otherwise.
inline double rouge(const Tokens& hyp, const Tokens& ref, RougeVariant v) {
  if (ref.empty()) throw ContractError("rouge: empty reference");
  if (v == RougeVariant::L) return detail::f_measure(lcs_length(hyp, ref), hyp.size(), ref.size());
  const std::size_t n = v == RougeVariant::One ? 1 : 2;
  const std::size_t ht = hyp.size() >= n ? hyp.size() - n + 1 : 0;
  const std::size_t rt = ref.size() >= n ? ref.size() - n + 1 : 0;
  if (ht == 0 && rt == 0) return hyp == ref ? 1.0 : 0.0;
  return detail::f_measure(detail::clipped_overlap(detail::ngram_counts(hyp, n), detail::ngram_counts(ref, n)), ht, rt);
}

inline double rouge(std::string_view hyp, std::string_view ref, RougeVariant v) { return rouge(tokenize(hyp), tokenize(ref), v); }

// Bag-of-words F1 with counts clipped to the reference; 0 when either is empty.
inline double unigram_f1(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  return detail::f_measure(detail::clipped_overlap(detail::ngram_counts(hyp, 1), detail::ngram_counts(ref, 1)), hyp.size(), ref.size());
}

inline double unigram_f1(std::string_view hyp, std::string_view ref) { return unigram_f1(tokenize(hyp), tokenize(ref)); }

// exp(total NLL / total target tokens) over (nll, token count) pairs.
inline double perplexity(std::span<const std::pair<double, std::size_t>> per_example) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& [nll, count] : per_example) {
    total += nll;
    tokens += count;
  }
  if (tokens == 0) throw ContractError("perplexity over zero target tokens");
  return std::exp(total / static_cast<double>(tokens));
}

template <typename T>
double perplexity(model::Seq2Seq<T>& m, std::span<const corpus::Example> examples, std::size_t batch = 64) {
  return training::perplexity(m, examples, batch);
}

inline double dodeca_score(const std::map<std::string, double>& per_task_ppl) {
  if (per_task_ppl.empty()) throw ContractError("dodeca_score over an empty task set");
  double s = 0.0;
  for (const auto& [task, ppl] : per_task_ppl) s += ppl;
  return s / static_cast<double>(per_task_ppl.size());
}

// ---------------------------------------------------------------------------
// Reports.

struct TaskMetrics {
  std::string task;
  double ppl = 0.0;
  double bleu4 = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double f1 = 0.0;
  std::size_t examples = 0;
  std::size_t generated = 0;
};

struct MetricReport {
  std::vector<TaskMetrics> tasks;
  double dodeca_score = 0.0;

  [[nodiscard]] const TaskMetrics& at(const std::string& task) const {
    for (const auto& t : tasks)
      if (t.task == task) return t;
    throw LookupError("task '" + task + "' is not in the report");
  }
};

// Drops the persona/knowledge segments and image features the flags turn off.
// Tokens ahead of the first separator (left by truncation) are kept.
inline corpus::Example ablate(corpus::Example ex, const corpus::GroundingFlags& use) {
  if (!use.image) ex.image_feature.reset(), ex.image_ref.reset();
  if (use.persona && use.knowledge) return ex;
  std::vector<TokenId> ctx;
  bool keep = true;
  for (const TokenId id : ex.context_ids) {
    if (id == bpe::kPersonaSep) keep = use.persona;
    else if (id == bpe::kKnowledgeSep) keep = use.knowledge;
    else if (id == bpe::kTurnSep) keep = true;
    if (keep) ctx.push_back(id);
  }
  ex.context_ids = std::move(ctx);
  return ex;
}

struct EvalTask {
  std::string name;
  std::span<const corpus::Example> examples;
};

struct EvalOptions {
  corpus::GroundingFlags use;
  std::size_t generation_limit = static_cast<std::size_t>(-1);  // examples decoded per task
  std::size_t batch = 64;
};

// Perplexity on gold targets plus sentence-level generation metrics averaged
// over the first `generation_limit` examples of each task.
template <typename T>
MetricReport evaluate(model::Seq2Seq<T>& m, const bpe::Vocabulary& vocab, std::span<const EvalTask> tasks,
                      const decoding::DecodeTable& table, const EvalOptions& opt = {}) {
  if (tasks.empty()) throw ConfigError("evaluate: no tasks");
  MetricReport report;
  std::map<std::string, double> ppls;
  for (const auto& task : tasks) {
    if (task.examples.empty()) throw ConfigError("task '" + task.name + "' has no validation examples");
    std::vector<corpus::Example> exs;
    exs.reserve(task.examples.size());
    for (const auto& ex : task.examples) exs.push_back(ablate(ex, opt.use));
    TaskMetrics tm;
    tm.task = task.name;
    tm.examples = exs.size();
    tm.ppl = training::perplexity(m, std::span<const corpus::Example>(exs), opt.batch);
    auto cfg = table.for_task(task.name);
    cfg.validate();
    const std::size_t n_gen = std::min(opt.generation_limit, exs.size());
    for (std::size_t i = 0; i < n_gen; ++i) {
      const auto& ex = exs[i];
      const auto* image = ex.image_feature ? &*ex.image_feature : nullptr;
      auto cfg_i = cfg;
      cfg_i.seed = cfg.seed + i;
      const auto ids = decoding::decode(decoding::model_scorer(m, ex.context_ids, image), cfg_i);
      const Tokens hyp = tokenize(bpe::decode(ids, vocab));
      const Tokens ref = tokenize(bpe::decode(ex.target_ids, vocab));
      const std::vector<Tokens> refs{ref};
      tm.bleu4 += bleu4(hyp, refs);
      tm.f1 += unigram_f1(hyp, ref);
      if (!ref.empty()) {
        tm.rouge1 += rouge(hyp, ref, RougeVariant::One);
        tm.rouge2 += rouge(hyp, ref, RougeVariant::Two);
        tm.rougeL += rouge(hyp, ref, RougeVariant::L);
      }
    }
    if (n_gen > 0) {
      const double k = static_cast<double>(n_gen);
      tm.bleu4 /= k, tm.rouge1 /= k, tm.rouge2 /= k, tm.rougeL /= k, tm.f1 /= k;
    }
    tm.generated = n_gen;
    ppls[tm.task] = tm.ppl;
    report.tasks.push_back(std::move(tm));
  }
  report.dodeca_score = dodeca_score(ppls);
  return report;
}

inline constexpr std::string_view kReportHeader = "# dodeca metric-report v1";

// Generation metrics are rendered x100; everything to one decimal place.
inline void write_report_csv(std::ostream& out, const MetricReport& r, const RunConfig& echo) {
  out << kReportHeader << "\n# config: " << echo.echo_line() << "\n# tokenization: " << kTokenization
      << "\ntask,ppl,bleu4,rouge1,rouge2,rougeL,f1\n";
  char buf[256];
  for (const auto& t : r.tasks) {
    std::snprintf(buf, sizeof buf, "%s,%.1f,%.1f,%.1f,%.1f,%.1f,%.1f\n", t.task.c_str(), t.ppl, 100 * t.bleu4, 100 * t.rouge1,
                  100 * t.rouge2, 100 * t.rougeL, 100 * t.f1);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "dodecaScore,%.1f,,,,,\n", r.dodeca_score);
  out << buf;
}

}  // namespace dodeca::metrics
