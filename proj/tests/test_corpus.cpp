#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "dodeca/corpus.hpp"
#include "dodeca/synth.hpp"

using namespace dodeca;
using namespace dodeca::corpus;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("dodeca_corpus_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TaskSpec chat_spec() {
  TaskSpec s;
  s.name = "chat";
  s.grounding = {true, true, false};
  return s;
}

bpe::Vocabulary small_vocab() {
  std::vector<std::string> corpus{"i like cats", "what do you like", "cats are great", "knowledge passage here",
                                  "hello there friend"};
  return bpe::learn(corpus, 200);
}

Episode four_turns() {
  Episode ep;
  ep.task = "chat";
  ep.persona = {"i like cats"};
  ep.knowledge = "cats are great";
  ep.turns = {{Speaker::A, "hello there"}, {Speaker::B, "hello friend"}, {Speaker::A, "what do you like"},
              {Speaker::B, "i like cats"}};
  return ep;
}

}  // namespace

TEST(LoadEpisodes, EmptyFileGivesEmptyList) {
  auto dir = temp_dir("empty");
  std::ofstream(dir / "e.jsonl").close();
  EXPECT_TRUE(load_episodes(dir / "e.jsonl", chat_spec()).empty());
}

TEST(LoadEpisodes, MalformedLineNamed) {
  auto dir = temp_dir("malformed");
  const auto good = to_json(four_turns()).dump();
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"format":"dodeca-episodes","version":1})" << '\n' << good << '\n' << "{not json" << '\n' << good << '\n';
  }
  try {
    (void)load_episodes(dir / "bad.jsonl", chat_spec());
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:3"), std::string::npos) << e.what();
  }
}

TEST(LoadEpisodes, WriteThenReadPreservesFields) {
  auto dir = temp_dir("roundtrip");
  std::vector<Episode> eps;
  for (int i = 0; i < 10; ++i) {
    Episode ep = four_turns();
    ep.knowledge += " #" + std::to_string(i);
    if (i % 3 == 0) ep.persona.push_back("line " + std::to_string(i));
    eps.push_back(ep);
  }
  save_episodes(dir / "ten.jsonl", eps);
  EXPECT_EQ(load_episodes(dir / "ten.jsonl", chat_spec()), eps);
}

TEST(LoadEpisodes, GroundingViolationsAreSchemaErrors) {
  auto dir = temp_dir("schema");
  Episode with_image = four_turns();
  with_image.image_ref = "img-1";
  save_episodes(dir / "img.jsonl", std::vector<Episode>{with_image});
  EXPECT_THROW(load_episodes(dir / "img.jsonl", chat_spec()), SchemaError);

  Episode same_speaker = four_turns();
  same_speaker.turns[1].speaker = Speaker::A;
  save_episodes(dir / "alt.jsonl", std::vector<Episode>{same_speaker});
  EXPECT_THROW(load_episodes(dir / "alt.jsonl", chat_spec()), SchemaError);

  Episode no_turns = four_turns();
  no_turns.turns.clear();
  save_episodes(dir / "none.jsonl", std::vector<Episode>{no_turns});
  EXPECT_THROW(load_episodes(dir / "none.jsonl", chat_spec()), SchemaError);
}

TEST(LoadEpisodes, MissingFileAndHeaderVersion) {
  auto dir = temp_dir("missing");
  EXPECT_THROW(load_episodes(dir / "nope.jsonl", chat_spec()), DataError);
  std::ofstream(dir / "v2.jsonl") << R"({"format":"dodeca-episodes","version":2})" << '\n';
  EXPECT_THROW(load_episodes(dir / "v2.jsonl", chat_spec()), CompatibilityError);
}

TEST(Flatten, OneExamplePerRespondentTurn) {
  auto v = small_vocab();
  EXPECT_EQ(flatten(four_turns(), v).size(), 2u);
  FlattenOptions a;
  a.respondent = Speaker::A;
  EXPECT_EQ(flatten(four_turns(), v, a).size(), 2u);
  Episode single = four_turns();
  single.turns.resize(1);
  EXPECT_TRUE(flatten(single, v).empty());
}

TEST(Flatten, TargetsEndWithEndToken) {
  auto v = small_vocab();
  for (const auto& ex : flatten(four_turns(), v)) {
    ASSERT_FALSE(ex.target_ids.empty());
    EXPECT_EQ(ex.target_ids.back(), bpe::kEnd);
  }
}

TEST(Flatten, AbsentSegmentsHaveNoSeparators) {
  auto v = small_vocab();
  Episode ep = four_turns();
  ep.persona.clear();
  ep.knowledge.clear();
  for (const auto& ex : flatten(ep, v)) {
    EXPECT_EQ(std::count(ex.context_ids.begin(), ex.context_ids.end(), bpe::kPersonaSep), 0);
    EXPECT_EQ(std::count(ex.context_ids.begin(), ex.context_ids.end(), bpe::kKnowledgeSep), 0);
  }
}

TEST(Flatten, TruncationKeepsExactSuffix) {
  auto v = small_vocab();
  Episode ep;
  ep.task = "chat";
  for (int i = 0; i < 200; ++i) {
    ep.turns.push_back({i % 2 ? Speaker::B : Speaker::A, "hello there friend what do you like"});
  }
  ep.turns.push_back({Speaker::B, "cats"});
  FlattenOptions wide;
  wide.truncate = 1u << 20;
  const auto full = flatten(ep, v, wide).back().context_ids;
  ASSERT_GT(full.size(), 1500u);
  const auto cut = flatten(ep, v).back().context_ids;
  ASSERT_EQ(cut.size(), 1024u);
  EXPECT_TRUE(std::equal(cut.begin(), cut.end(), full.end() - 1024));
  for (const auto& ex : flatten(ep, v)) EXPECT_LE(ex.context_ids.size(), kDefaultTruncation);
}

TEST(Flatten, ContextSegmentsRoundtrip) {
  auto dir = temp_dir("segments");
  auto suite = synth_suite(5, dir, {40, 5, 5, 3});
  std::vector<std::string> lines;
  for (const auto& t : suite.registry.tasks) {
    auto eps = load_episodes(t.train, t);
    auto texts = episode_texts(eps);
    lines.insert(lines.end(), texts.begin(), texts.end());
  }
  auto vocab = bpe::learn(lines, 500);
  for (const auto& t : suite.registry.tasks) {
    for (const auto& ep : load_episodes(t.train, t)) {
      auto examples = flatten(ep, vocab);
      std::size_t respondent_turn = 0;
      for (const auto& ex : examples) {
        while (ep.turns[respondent_turn].speaker != Speaker::B) ++respondent_turn;
        const auto seg = parse_context(ex.context_ids);
        ASSERT_EQ(seg.persona.size(), ep.persona.size());
        for (std::size_t i = 0; i < ep.persona.size(); ++i) EXPECT_EQ(bpe::decode(seg.persona[i], vocab), ep.persona[i]);
        EXPECT_EQ(seg.knowledge.has_value(), !ep.knowledge.empty());
        if (seg.knowledge) {
          EXPECT_EQ(bpe::decode(*seg.knowledge, vocab), ep.knowledge);
        }
        ASSERT_EQ(seg.history.size(), respondent_turn);
        for (std::size_t i = 0; i < respondent_turn; ++i) {
          EXPECT_EQ(bpe::decode(seg.history[i], vocab), ep.turns[i].text);
          // alternation: the history ends with the other speaker
          EXPECT_NE(ep.turns[i].speaker, ep.turns[i + 1].speaker);
        }
        ++respondent_turn;
      }
    }
  }
}

TEST(Flatten, GroundingFlagsDropSegments) {
  auto v = small_vocab();
  FlattenOptions off;
  off.use.knowledge = false;
  for (const auto& ex : flatten(four_turns(), v, off)) {
    EXPECT_EQ(std::count(ex.context_ids.begin(), ex.context_ids.end(), bpe::kKnowledgeSep), 0);
    EXPECT_EQ(std::count(ex.context_ids.begin(), ex.context_ids.end(), bpe::kPersonaSep), 1);
  }
}

TEST(ImageStore, AttachNoOpForNonImageTask) {
  ImageFeatureStore store;
  Example ex;
  ex.task = "chat";
  ex.image_ref = "img";
  auto out = attach_image(ex, chat_spec(), store);
  EXPECT_FALSE(out.image_feature.has_value());
}

TEST(ImageStore, AttachKnownKeyAndMissingKey) {
  ImageFeatureStore store;
  std::mt19937_64 rng(1);
  store.insert("img-0", class_signature(2, rng));
  TaskSpec spec;
  spec.name = "imgcond";
  spec.grounding.image = true;
  Example ex;
  ex.task = "imgcond";
  ex.image_ref = "img-0";
  ex.context_ids = {bpe::kTurnSep, 9};
  auto out = attach_image(ex, spec, store);
  ASSERT_TRUE(out.image_feature.has_value());
  EXPECT_EQ(out.image_feature->size(), 2048u);
  EXPECT_EQ(out.context_ids, ex.context_ids);
  ex.image_ref = "img-404";
  EXPECT_THROW(attach_image(ex, spec, store), LookupError);
}

TEST(ImageStore, WrongLengthRejected) {
  ImageFeatureStore store;
  EXPECT_THROW(store.insert("short", std::vector<float>(100, 0.f)), SchemaError);
  std::vector<float> bad(2048, 0.f);
  bad[5] = NAN;
  EXPECT_THROW(store.insert("nan", bad), SchemaError);

  // A hand-written file whose record is too short fails at load time.
  auto dir = temp_dir("store");
  {
    std::ofstream out(dir / "short.bin", std::ios::binary);
    out.write("DDIF", 4);
    io::write_le<std::uint32_t>(out, 1);
    io::write_string(out, "k");
    std::vector<float> few(100, 1.f);
    io::write_f32(out, few);
  }
  EXPECT_THROW(ImageFeatureStore::load(dir / "short.bin"), DataError);
}

TEST(ImageStore, SaveLoadRoundtrip) {
  auto dir = temp_dir("store_rt");
  ImageFeatureStore store;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 4; ++i) store.insert("k" + std::to_string(i), class_signature(i, rng));
  store.save(dir / "f.bin");
  auto back = ImageFeatureStore::load(dir / "f.bin");
  ASSERT_EQ(back.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(back.at("k" + std::to_string(i)), store.at("k" + std::to_string(i)));
}

TEST(Synth, SameSeedGivesIdenticalFiles) {
  auto a = temp_dir("synth_a"), b = temp_dir("synth_b");
  SynthOptions small{30, 5, 5, 3};
  synth_suite(99, a, small);
  synth_suite(99, b, small);
  for (const auto& entry : fs::directory_iterator(a)) {
    EXPECT_EQ(read_all(entry.path()), read_all(b / entry.path().filename())) << entry.path();
  }
  auto c = temp_dir("synth_c");
  synth_suite(100, c, small);
  EXPECT_NE(read_all(a / "copy.train.jsonl"), read_all(c / "copy.train.jsonl"));
}

TEST(Synth, LookupOracleAnswersEveryEpisode) {
  EXPECT_EQ(lookup_oracle("key k7 val v3", "k7?"), "v3");
  auto dir = temp_dir("lookup");
  auto suite = synth_suite(3, dir, {200, 10, 10, 3});
  const auto& spec = suite.registry.at("lookup");
  std::size_t correct = 0, total = 0;
  for (const auto& ep : load_episodes(spec.train, spec)) {
    ++total;
    correct += lookup_oracle(ep.knowledge, ep.turns[0].text) == ep.turns[1].text;
  }
  EXPECT_EQ(correct, total);
}

TEST(Synth, ImageClassDeterminesTarget) {
  auto dir = temp_dir("imgcond");
  auto suite = synth_suite(4, dir, {50, 5, 5, 3});
  auto store = ImageFeatureStore::load(*suite.registry.image_store);
  const auto& spec = suite.registry.at("imgcond");
  const std::size_t block = 2048 / synth_classes().size();
  for (const auto& ep : load_episodes(spec.train, spec)) {
    const auto& f = store.at(*ep.image_ref);
    std::size_t best = 0;
    double best_mass = -1e9;
    for (std::size_t c = 0; c < synth_classes().size(); ++c) {
      double mass = 0;
      for (std::size_t i = c * block; i < (c + 1) * block; ++i) mass += f[i];
      if (mass > best_mass) best_mass = mass, best = c;
    }
    EXPECT_EQ(ep.turns.back().text, synth_classes()[best]);
  }
}

TEST(Synth, CopyAndReverseTargets) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 20; ++i) {
    auto copy = make_copy_episode(rng, false);
    auto rev = make_copy_episode(rng, true);
    for (std::size_t t = 0; t + 1 < copy.turns.size(); t += 2) EXPECT_EQ(copy.turns[t].text, copy.turns[t + 1].text);
    for (std::size_t t = 0; t + 1 < rev.turns.size(); t += 2) {
      auto w = bpe::split_words(rev.turns[t].text);
      std::reverse(w.begin(), w.end());
      EXPECT_EQ(corpus::detail::join(w), rev.turns[t + 1].text);
    }
  }
}

TEST(Registry, SaveLoadRoundtrip) {
  auto dir = temp_dir("registry");
  auto suite = synth_suite(1, dir, {5, 2, 2, 3});
  auto reg = load_registry(suite.registry_path);
  ASSERT_EQ(reg.tasks.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(reg.tasks[i].name, suite.registry.tasks[i].name);
    EXPECT_EQ(reg.tasks[i].grounding, suite.registry.tasks[i].grounding);
    EXPECT_TRUE(fs::equivalent(reg.tasks[i].train, suite.registry.tasks[i].train));
  }
  EXPECT_THROW((void)reg.at("eli5"), ConfigError);
}
