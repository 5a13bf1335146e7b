#pragma once

// Task registry files and the deterministic synthetic stand-in tasks:
//   copy     target repeats the last turn (persona names the behaviour)
//   reverse  target is the last turn with its words reversed
//   lookup   answer is a value stated only in the knowledge passage
//   imgcond  answer is a class word encoded only in the image feature

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dodeca/config.hpp"
#include "dodeca/corpus.hpp"

namespace dodeca::corpus {

struct TaskRegistry {
  std::vector<TaskSpec> tasks;
  std::optional<std::filesystem::path> image_store;

  [[nodiscard]] const TaskSpec& at(const std::string& name) const {
    for (const auto& t : tasks)
      if (t.name == name) return t;
    throw ConfigError("task '" + name + "' is not in the registry");
  }
  [[nodiscard]] bool contains(const std::string& name) const {
    for (const auto& t : tasks)
      if (t.name == name) return true;
    return false;
  }
};

// Reads `tasks.*` keys; relative split paths resolve against base_dir.
inline TaskRegistry registry_from_config(const RunConfig& cfg, const std::filesystem::path& base_dir) {
  TaskRegistry reg;
  const RunConfig sec = cfg.section("tasks");
  auto resolve = [&base_dir](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  for (const auto& name : sec.get_list("names")) {
    const RunConfig t = sec.section(name);
    TaskSpec spec;
    spec.name = name;
    spec.weight = t.get_number<double>("weight", 1.0);
    if (!(spec.weight >= 0.0) || std::isinf(spec.weight)) {
      throw ConfigError("task '" + name + "': weight must be finite and non-negative");
    }
    spec.grounding = {t.get_bool("persona", false), t.get_bool("knowledge", false), t.get_bool("image", false)};
    spec.respondent = parse_speaker(t.get_string("respondent", "B"));
    if (auto p = t.find("train")) spec.train = resolve(*p);
    if (auto p = t.find("valid")) spec.valid = resolve(*p);
    if (auto p = t.find("test")) spec.test = resolve(*p);
    reg.tasks.push_back(std::move(spec));
  }
  if (auto p = sec.find("image_store")) reg.image_store = resolve(*p);
  return reg;
}

inline TaskRegistry load_registry(const std::filesystem::path& path) {
  return registry_from_config(RunConfig::load(path.string()), path.parent_path());
}

inline RunConfig registry_to_config(const TaskRegistry& reg, const std::filesystem::path& base_dir) {
  RunConfig cfg;
  std::string names;
  auto rel = [&base_dir](const std::filesystem::path& p) {
    return p.empty() ? std::string() : std::filesystem::relative(p, base_dir).generic_string();
  };
  for (const auto& t : reg.tasks) {
    names += (names.empty() ? "" : ",") + t.name;
    const std::string k = "tasks." + t.name + ".";
    std::ostringstream w;
    w << t.weight;
    cfg.set(k + "weight", w.str());
    cfg.set(k + "persona", t.grounding.persona ? "true" : "false");
    cfg.set(k + "knowledge", t.grounding.knowledge ? "true" : "false");
    cfg.set(k + "image", t.grounding.image ? "true" : "false");
    cfg.set(k + "respondent", std::string(1, to_char(t.respondent)));
    if (!t.train.empty()) cfg.set(k + "train", rel(t.train));
    if (!t.valid.empty()) cfg.set(k + "valid", rel(t.valid));
    if (!t.test.empty()) cfg.set(k + "test", rel(t.test));
  }
  cfg.set("tasks.names", names);
  if (reg.image_store) cfg.set("tasks.image_store", rel(*reg.image_store));
  return cfg;
}

inline void save_registry(const TaskRegistry& reg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write task registry '" + path.string() + "'");
  out << "# dodeca task registry v1\n" << registry_to_config(reg, path.parent_path()).echo();
}

// All text of a set of episodes, one entry per line of persona, knowledge
// and turn; the input to BPE learning.
inline std::vector<std::string> episode_texts(std::span<const Episode> episodes) {
  std::vector<std::string> lines;
  for (const auto& ep : episodes) {
    lines.insert(lines.end(), ep.persona.begin(), ep.persona.end());
    if (!ep.knowledge.empty()) lines.push_back(ep.knowledge);
    for (const auto& t : ep.turns) lines.push_back(t.text);
  }
  return lines;
}

// ---------------------------------------------------------------------------
// Synthetic suite.

struct SynthOptions {
  std::size_t train_episodes = 1000;
  std::size_t valid_episodes = 100;
  std::size_t test_episodes = 100;
  std::size_t lookup_pairs = 1;
};

inline const std::array<std::string, 24>& synth_words() {
  static const std::array<std::string, 24> words{"apple", "river", "stone", "cloud", "green", "tiger", "music", "paper",
                                                 "light", "ocean", "bread", "chair", "dance", "eagle", "flame", "grape",
                                                 "house", "juice", "knife", "lemon", "mango", "night", "olive", "piano"};
  return words;
}

inline const std::array<std::string, 8>& synth_classes() {
  static const std::array<std::string, 8> classes{"cat", "dog", "bird", "fish", "horse", "car", "boat", "tree"};
  return classes;
}

inline constexpr std::size_t kSynthKeys = 12;
inline constexpr std::size_t kSynthValues = 12;
inline const std::string kCopyPersona = "i repeat every word i hear .";
inline const std::string kReversePersona = "i say every word backwards .";

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double gaussian(std::mt19937_64& rng) {
  const double u1 = 1.0 - uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

inline std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) s += (s.empty() ? "" : " ") + w;
  return s;
}

}  // namespace detail

// Feature vector carrying the signature of class c: block c of the 2048
// entries is raised to ~1, everything else is small noise.
inline std::vector<float> class_signature(std::size_t cls, std::mt19937_64& rng, double noise = 0.1) {
  const std::size_t block = kImageFeatureDim / synth_classes().size();
  std::vector<float> f(kImageFeatureDim);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double base = (i / block == cls) ? 1.0 : 0.0;
    f[i] = static_cast<float>(base + noise * detail::gaussian(rng));
  }
  return f;
}

inline Episode make_copy_episode(std::mt19937_64& rng, bool reverse) {
  Episode ep;
  ep.task = reverse ? "reverse" : "copy";
  ep.persona = {reverse ? kReversePersona : kCopyPersona};
  const std::size_t exchanges = 1 + detail::pick(rng, 2);
  for (std::size_t e = 0; e < exchanges; ++e) {
    std::vector<std::string> words(3 + detail::pick(rng, 3));
    for (auto& w : words) w = synth_words()[detail::pick(rng, synth_words().size())];
    ep.turns.push_back({Speaker::A, detail::join(words)});
    if (reverse) std::reverse(words.begin(), words.end());
    ep.turns.push_back({Speaker::B, detail::join(words)});
  }
  return ep;
}

inline Episode make_lookup_episode(std::mt19937_64& rng, std::size_t pairs) {
  Episode ep;
  ep.task = "lookup";
  std::vector<std::size_t> keys(kSynthKeys);
  std::iota(keys.begin(), keys.end(), std::size_t{0});
  for (std::size_t i = 0; i < pairs; ++i) std::swap(keys[i], keys[i + detail::pick(rng, kSynthKeys - i)]);
  std::vector<std::size_t> values(pairs);
  for (auto& v : values) v = detail::pick(rng, kSynthValues);
  for (std::size_t i = 0; i < pairs; ++i) {
    ep.knowledge += (i ? " " : "") + std::string("key k") + std::to_string(keys[i]) + " val v" + std::to_string(values[i]);
  }
  const std::size_t asked = detail::pick(rng, pairs);
  ep.turns.push_back({Speaker::A, "k" + std::to_string(keys[asked]) + "?"});
  ep.turns.push_back({Speaker::B, "v" + std::to_string(values[asked])});
  return ep;
}

inline Episode make_imgcond_episode(std::mt19937_64& rng, const std::string& image_key, std::size_t& cls) {
  static const std::array<std::string, 2> questions{"what do you see ?", "what is in the picture ?"};
  Episode ep;
  ep.task = "imgcond";
  ep.image_ref = image_key;
  cls = detail::pick(rng, synth_classes().size());
  ep.turns.push_back({Speaker::A, questions[detail::pick(rng, questions.size())]});
  ep.turns.push_back({Speaker::B, synth_classes()[cls]});
  return ep;
}

// The oracle answerer for lookup episodes: parse the passage, answer the key.
inline std::optional<std::string> lookup_oracle(std::string_view knowledge, std::string_view question) {
  std::istringstream ks{std::string(knowledge)};
  std::string kw, key, vw, val;
  std::string q(question);
  if (!q.empty() && q.back() == '?') q.pop_back();
  while (ks >> kw >> key >> vw >> val) {
    if (kw == "key" && vw == "val" && key == q) return val;
  }
  return std::nullopt;
}

struct SynthSuite {
  TaskRegistry registry;
  std::filesystem::path registry_path;
};

// Writes <task>.{train,valid,test}.jsonl, features.bin and suite.conf into
// `dir`. Same seed, same bytes.
inline SynthSuite synth_suite(std::uint64_t seed, const std::filesystem::path& dir, const SynthOptions& opt = {}) {
  std::filesystem::create_directories(dir);
  SynthSuite suite;
  ImageFeatureStore store;
  const std::array<std::string, 4> names{"copy", "reverse", "lookup", "imgcond"};
  const std::array<std::pair<std::string, std::size_t>, 3> splits{
      {{"train", opt.train_episodes}, {"valid", opt.valid_episodes}, {"test", opt.test_episodes}}};
  for (std::size_t ti = 0; ti < names.size(); ++ti) {
    TaskSpec spec;
    spec.name = names[ti];
    spec.grounding = {ti <= 1, ti == 2, ti == 3};
    for (std::size_t si = 0; si < splits.size(); ++si) {
      std::mt19937_64 rng(detail::splitmix(seed ^ detail::splitmix(ti * 16 + si + 1)));
      std::vector<Episode> episodes;
      for (std::size_t e = 0; e < splits[si].second; ++e) {
        switch (ti) {
          case 0: episodes.push_back(make_copy_episode(rng, false)); break;
          case 1: episodes.push_back(make_copy_episode(rng, true)); break;
          case 2: episodes.push_back(make_lookup_episode(rng, opt.lookup_pairs)); break;
          default: {
            const std::string key = "img-" + splits[si].first + "-" + std::to_string(e);
            std::size_t cls = 0;
            episodes.push_back(make_imgcond_episode(rng, key, cls));
            store.insert(key, class_signature(cls, rng));
          }
        }
      }
      const auto path = dir / (spec.name + "." + splits[si].first + ".jsonl");
      save_episodes(path, episodes);
      (si == 0 ? spec.train : si == 1 ? spec.valid : spec.test) = path;
    }
    suite.registry.tasks.push_back(std::move(spec));
  }
  suite.registry.image_store = dir / "features.bin";
  store.save(*suite.registry.image_store);
  suite.registry_path = dir / "suite.conf";
  save_registry(suite.registry, suite.registry_path);
  return suite;
}

// ---------------------------------------------------------------------------
// Flattened data per task.

struct TaskData {
  TaskSpec spec;
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

inline std::vector<Example> load_split(const TaskSpec& spec, const std::filesystem::path& path, const bpe::Vocabulary& vocab,
                                       const ImageFeatureStore* store, FlattenOptions opt) {
  std::vector<Example> out;
  if (path.empty()) return out;
  opt.respondent = spec.respondent;
  for (const auto& ep : load_episodes(path, spec)) {
    for (auto& ex : flatten(ep, vocab, opt)) {
      if (spec.grounding.image && ex.image_ref) {
        if (store == nullptr) throw ConfigError("task '" + spec.name + "' needs an image feature store");
        ex = attach_image(std::move(ex), spec, *store);
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

inline TaskData load_task(const TaskSpec& spec, const bpe::Vocabulary& vocab, const ImageFeatureStore* store,
                          const FlattenOptions& opt, bool with_test = false) {
  TaskData data{spec, {}, {}, {}};
  data.train = load_split(spec, spec.train, vocab, store, opt);
  data.valid = load_split(spec, spec.valid, vocab, store, opt);
  if (with_test) data.test = load_split(spec, spec.test, vocab, store, opt);
  return data;
}

}  // namespace dodeca::corpus
