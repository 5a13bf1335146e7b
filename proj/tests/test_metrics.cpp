#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <unordered_map>

#include "dodeca/metrics.hpp"
#include "oracles.hpp"

using namespace dodeca;
using namespace dodeca::metrics;

using namespace dodeca::testing;

TEST(Tokenize, LowercasesAndSplitsPunctuation) {
  EXPECT_EQ(tokenize("Hello, World!  it's"), (Tokens{"hello", ",", "world", "!", "it", "'", "s"}));
  EXPECT_TRUE(tokenize("   ").empty());
}

TEST(Bleu, IdentityEmptyAndErrors) {
  EXPECT_DOUBLE_EQ(bleu4("the cat sat on the mat", "the cat sat on the mat"), 1.0);
  EXPECT_EQ(bleu4("", "the cat"), 0.0);
  const std::vector<Tokens> none;
  EXPECT_THROW(bleu4(Tokens{"a"}, none), ContractError);
}

TEST(Bleu, ShortHypothesisWorkedExample) {
  // precisions 3/3, 2/2, 1/1 and a smoothed empty 4-gram order; BP = exp(1 - 4/3)
  const double expected = std::exp(1.0 - 4.0 / 3.0) * std::pow(1.0 * 1.0 * 1.0 * 1e-9, 0.25);
  EXPECT_NEAR(bleu4("the cat sat", "the cat sat down"), expected, 1e-15);
}

TEST(Bleu, MultipleReferencesClipAndPickClosestLength) {
  const std::vector<Tokens> refs{tokenize("the the cat"), tokenize("a cat is on the mat here")};
  const auto h = tokenize("the the the the");
  EXPECT_NEAR(bleu4(h, refs), oracle_bleu(h, refs), 1e-12);
}

TEST(Bleu, AvgBleuIsMeanOfOrders) {
  const auto h = tokenize("a b c d e"), r = tokenize("a b c x e");
  const std::vector<Tokens> refs{r};
  EXPECT_NEAR(avg_bleu(h, refs), (bleu(h, refs, 1) + bleu(h, refs, 2) + bleu(h, refs, 3) + bleu(h, refs, 4)) / 4, 1e-15);
  EXPECT_NEAR(bleu(h, refs, 1), 0.8, 1e-15);
}

TEST(Rouge, WorkedExamples) {
  for (auto v : {RougeVariant::One, RougeVariant::Two, RougeVariant::L}) {
    EXPECT_EQ(rouge("the cat sat", "the cat sat", v), 1.0);
    EXPECT_EQ(rouge("one two three", "four five six", v), 0.0);
    EXPECT_EQ(rouge("hello", "hello", v), 1.0);
  }
  EXPECT_NEAR(rouge("the cat", "the cat sat", RougeVariant::L), 0.8, 1e-15);
  EXPECT_THROW(rouge("a", "", RougeVariant::One), ContractError);
}

TEST(UnigramF1, WorkedExamples) {
  EXPECT_EQ(unigram_f1("a b c", "a b c"), 1.0);
  EXPECT_NEAR(unigram_f1("a a b", "a b b"), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(unigram_f1("x y", "a b"), 0.0);
  EXPECT_EQ(unigram_f1("", ""), 0.0);
}

TEST(MetricOracle, ThousandRandomPairs) {
  std::mt19937_64 rng(2024);
  double worst_bleu = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t vocab = 2 + static_cast<std::size_t>(i % 9);
    const Tokens h = random_tokens(rng, 12, vocab);
    Tokens r = random_tokens(rng, 12, vocab);
    if (r.empty()) r.push_back("w0");
    std::vector<Tokens> refs{r};
    if (i % 3 == 0) {
      Tokens r2 = random_tokens(rng, 12, vocab);
      if (!r2.empty()) refs.push_back(r2);
    }
    ASSERT_EQ(rouge(h, r, RougeVariant::One), oracle_rouge_n(h, r, 1)) << i;
    ASSERT_EQ(rouge(h, r, RougeVariant::Two), oracle_rouge_n(h, r, 2)) << i;
    ASSERT_EQ(rouge(h, r, RougeVariant::L), oracle_rouge_l(h, r)) << i;
    ASSERT_EQ(unigram_f1(h, r), oracle_f1(h, r)) << i;
    worst_bleu = std::max(worst_bleu, std::abs(bleu4(h, refs) - oracle_bleu(h, refs)));
    // identity and bounds
    ASSERT_EQ(unigram_f1(r, r), 1.0);
    ASSERT_EQ(rouge(r, r, RougeVariant::L), 1.0);
    const double b = bleu4(h, refs);
    ASSERT_GE(b, 0.0);
    ASSERT_LE(b, 1.0 + 1e-12);
  }
  EXPECT_LT(worst_bleu, 1e-9);
}

TEST(MetricOracle, DisjointVocabulariesScoreZero) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 100; ++i) {
    Tokens h = random_tokens(rng, 8, 5), r = random_tokens(rng, 8, 5);
    for (auto& t : h) t = "h" + t;
    if (r.empty()) r.push_back("w1");
    EXPECT_EQ(unigram_f1(h, r), 0.0);
    EXPECT_EQ(rouge(h, r, RougeVariant::L), 0.0);
    if (h.size() > 1 || r.size() > 1) {
      EXPECT_EQ(rouge(h, r, RougeVariant::Two), 0.0);
    }
    const std::vector<Tokens> refs{r};
    EXPECT_LT(bleu4(h, refs), 1e-2);
  }
}

TEST(Perplexity, TokenWeightedHandComputed) {
  // lengths 1 and 3 with per-token probabilities {0.5} and {0.25, 0.5, 1}
  const std::vector<std::pair<double, std::size_t>> per{{-std::log(0.5), 1},
                                                        {-std::log(0.25) - std::log(0.5) - std::log(1.0), 3}};
  const double expected = std::pow(0.5 * 0.25 * 0.5 * 1.0, -1.0 / 4.0);
  EXPECT_NEAR(perplexity(per), expected, 1e-12);
  EXPECT_NEAR(perplexity(std::vector<std::pair<double, std::size_t>>{{0.0, 5}}), 1.0, 0.0);
  EXPECT_THROW(perplexity(std::vector<std::pair<double, std::size_t>>{}), ContractError);
}

TEST(Perplexity, UniformModelEqualsVocabSize) {
  auto cfg = dodeca::testing::tiny_config(97, 16);
  model::Seq2Seq<double> m(cfg, 3);
  // zero output table, zero decoder-norm gain: every logit is exactly zero
  std::fill(m.params().at("tok_emb").data().begin(), m.params().at("tok_emb").data().end(), 0.0);
  std::mt19937_64 rng(4);
  std::vector<corpus::Example> exs;
  for (int i = 0; i < 6; ++i) exs.push_back(dodeca::testing::random_example(rng, 97, 5, 1 + i, false));
  EXPECT_NEAR(perplexity(m, exs), 97.0, 1e-6);
}

TEST(Perplexity, MatchesForwardNllForSingleExample) {
  auto cfg = dodeca::testing::tiny_config(40, 16);
  model::Seq2Seq<double> m(cfg, 5);
  std::mt19937_64 rng(6);
  const auto ex = dodeca::testing::random_example(rng, 40, 6, 4, false);
  const std::vector<corpus::Example> one{ex};
  EXPECT_NEAR(perplexity(m, one), std::exp(m.forward_nll(ex)), 1e-6);
}

TEST(DodecaScore, Arithmetic) {
  EXPECT_EQ(dodeca_score({{"a", 10.0}, {"b", 10.0}, {"c", 10.0}}), 10.0);
  EXPECT_EQ(dodeca_score({{"only", 3.25}}), 3.25);
  EXPECT_THROW(dodeca_score({}), ContractError);
  const std::vector<double> column{11.4, 10.4, 8.7, 11.3, 20.0, 18.7, 21.2, 17.3, 29.8, 27.8, 18.3, 10.0};
  std::map<std::string, double> m;
  for (std::size_t i = 0; i < column.size(); ++i) m["t" + std::to_string(i)] = column[i];
  EXPECT_NEAR(dodeca_score(m), 17.1, 0.05);
}

TEST(Ablate, DropsSegmentsAndImage) {
  corpus::Example ex;
  ex.context_ids = {9, bpe::kPersonaSep, 10, 11, bpe::kKnowledgeSep, 12, bpe::kTurnSep, 13, bpe::kPersonaSep, 14};
  ex.image_feature = std::vector<float>(corpus::kImageFeatureDim, 0.5f);
  corpus::GroundingFlags off{false, false, false};
  const auto a = ablate(ex, off);
  EXPECT_EQ(a.context_ids, (std::vector<TokenId>{9, bpe::kTurnSep, 13}));
  EXPECT_FALSE(a.image_feature.has_value());
  corpus::GroundingFlags knowledge_only{true, false, true};
  const auto b = ablate(ex, knowledge_only);
  EXPECT_EQ(b.context_ids, (std::vector<TokenId>{9, bpe::kPersonaSep, 10, 11, bpe::kTurnSep, 13, bpe::kPersonaSep, 14}));
  EXPECT_TRUE(b.image_feature.has_value());
}

TEST(Evaluate, ReportShapeDeterminismAndCsv) {
  const std::vector<std::string> text{"the quick brown fox jumps over the lazy dog", "pack my box with five dozen jugs"};
  const bpe::Vocabulary vocab = bpe::learn(text, 20);
  const auto cfg = dodeca::testing::tiny_config(vocab.size(), 16);
  model::Seq2Seq<float> mv(cfg, 8);
  std::mt19937_64 rng(9);
  std::vector<std::vector<corpus::Example>> data(4);
  std::vector<EvalTask> tasks;
  const std::vector<std::string> names{"copy", "reverse", "lookup", "imgcond"};
  for (std::size_t t = 0; t < 4; ++t) {
    for (int i = 0; i < 3; ++i) data[t].push_back(dodeca::testing::random_example(rng, vocab.size(), 6, 4, t == 3));
    tasks.push_back({names[t], data[t]});
  }
  decoding::DecodeTable table;
  decoding::DecodeConfig d;
  d.beam_size = 2;
  d.min_len = 1;
  d.max_len = 6;
  d.block_ngram = 0;
  for (const auto& n : names) table.set(n, d);
  const auto r1 = evaluate(mv, vocab, std::span<const EvalTask>(tasks), table);
  const auto r2 = evaluate(mv, vocab, std::span<const EvalTask>(tasks), table);
  ASSERT_EQ(r1.tasks.size(), 4u);
  double mean = 0.0;
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(r1.tasks[t].ppl, r2.tasks[t].ppl);
    EXPECT_EQ(r1.tasks[t].bleu4, r2.tasks[t].bleu4);
    EXPECT_EQ(r1.tasks[t].rougeL, r2.tasks[t].rougeL);
    EXPECT_GE(r1.tasks[t].ppl, 1.0);
    for (double v : {r1.tasks[t].bleu4, r1.tasks[t].rouge1, r1.tasks[t].rouge2, r1.tasks[t].rougeL, r1.tasks[t].f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    mean += r1.tasks[t].ppl / 4;
  }
  EXPECT_NEAR(r1.dodeca_score, mean, 1e-9);
  std::ostringstream csv;
  RunConfig echo;
  echo.set("seed", "1");
  write_report_csv(csv, r1, echo);
  std::istringstream in(csv.str());
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') rows.push_back(line);
  ASSERT_EQ(rows.size(), 6u);  // header, 4 tasks, aggregate
  EXPECT_EQ(rows[0], "task,ppl,bleu4,rouge1,rouge2,rougeL,f1");
  EXPECT_EQ(rows[5].rfind("dodecaScore,", 0), 0u);
  EXPECT_NE(csv.str().find("# tokenization: "), std::string::npos);

  std::vector<EvalTask> with_empty{{"copy", {}}};
  EXPECT_THROW(evaluate(mv, vocab, std::span<const EvalTask>(with_empty), table), ConfigError);
}
