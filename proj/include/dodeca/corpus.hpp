#pragma once

// Unified grounded-dialogue records, flattening into context -> target
// examples and the image feature store.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dodeca/bpe.hpp"
#include "dodeca/config.hpp"
#include "dodeca/error.hpp"
#include "dodeca/io.hpp"

namespace dodeca::corpus {

using bpe::TokenId;

inline constexpr std::size_t kImageFeatureDim = 2048;
inline constexpr std::size_t kDefaultTruncation = 1024;
inline constexpr int kEpisodeFormatVersion = 1;

enum class Speaker { A, B };

inline char to_char(Speaker s) { return s == Speaker::A ? 'A' : 'B'; }

inline Speaker parse_speaker(std::string_view s) {
  if (s == "A") return Speaker::A;
  if (s == "B") return Speaker::B;
  throw SchemaError("speaker must be 'A' or 'B', got '" + std::string(s) + "'");
}

struct Turn {
  Speaker speaker = Speaker::A;
  std::string text;
  bool operator==(const Turn&) const = default;
};

struct Episode {
  std::string task;
  std::vector<std::string> persona;
  std::string knowledge;
  std::optional<std::string> image_ref;
  std::vector<Turn> turns;
  bool operator==(const Episode&) const = default;
};

struct Grounding {
  bool persona = false;
  bool knowledge = false;
  bool image = false;
  bool operator==(const Grounding&) const = default;
};

struct TaskSpec {
  std::string name;
  double weight = 1.0;
  Grounding grounding;
  Speaker respondent = Speaker::B;
  std::filesystem::path train, valid, test;
};

struct Example {
  std::vector<TokenId> context_ids;
  std::vector<TokenId> target_ids;  // ends with the end token
  std::optional<std::string> image_ref;
  std::optional<std::vector<float>> image_feature;
  std::string task;
};

// Switches that drop grounding segments, for the grounding ablation.
struct GroundingFlags {
  bool persona = true;
  bool knowledge = true;
  bool image = true;
};

struct FlattenOptions {
  std::size_t truncate = kDefaultTruncation;
  std::size_t max_target = kDefaultTruncation;
  Speaker respondent = Speaker::B;
  GroundingFlags use;
};

// ---------------------------------------------------------------------------
// Episode files: a header object line, then one episode object per line.

inline void validate(const Episode& ep, const TaskSpec& spec) {
  if (ep.turns.empty()) throw SchemaError("episode has no turns");
  for (std::size_t i = 1; i < ep.turns.size(); ++i) {
    if (ep.turns[i].speaker == ep.turns[i - 1].speaker) {
      throw SchemaError("speakers do not alternate at turn " + std::to_string(i));
    }
  }
  if (ep.task != spec.name) throw SchemaError("episode task '" + ep.task + "' does not match task '" + spec.name + "'");
  if (ep.image_ref && !spec.grounding.image) throw SchemaError("image_ref given for task without image grounding");
  if (!ep.persona.empty() && !spec.grounding.persona) throw SchemaError("persona given for task without persona grounding");
  if (!ep.knowledge.empty() && !spec.grounding.knowledge) {
    throw SchemaError("knowledge given for task without knowledge grounding");
  }
}

inline nlohmann::json to_json(const Episode& ep) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : ep.turns) turns.push_back({{"speaker", std::string(1, to_char(t.speaker))}, {"text", t.text}});
  return {{"task", ep.task},
          {"persona", ep.persona},
          {"knowledge", ep.knowledge},
          {"image_ref", ep.image_ref ? nlohmann::json(*ep.image_ref) : nlohmann::json(nullptr)},
          {"turns", std::move(turns)}};
}

inline Episode episode_from_json(const nlohmann::json& j) {
  Episode ep;
  ep.task = j.at("task").get<std::string>();
  ep.persona = j.value("persona", std::vector<std::string>{});
  ep.knowledge = j.value("knowledge", std::string{});
  if (j.contains("image_ref") && !j.at("image_ref").is_null()) ep.image_ref = j.at("image_ref").get<std::string>();
  for (const auto& t : j.at("turns")) {
    ep.turns.push_back({parse_speaker(t.at("speaker").get<std::string>()), t.at("text").get<std::string>()});
  }
  return ep;
}

inline void save_episodes(const std::filesystem::path& path, std::span<const Episode> episodes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write episode file '" + path.string() + "'");
  out << nlohmann::json{{"format", "dodeca-episodes"}, {"version", kEpisodeFormatVersion}}.dump() << '\n';
  for (const auto& ep : episodes) out << to_json(ep).dump() << '\n';
}

inline std::vector<Episode> load_episodes(const std::filesystem::path& path, const TaskSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open episode file '" + path.string() + "'");
  std::vector<Episode> episodes;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": malformed record (" + e.what() + ")");
    }
    if (!header_seen) {
      if (!j.is_object() || j.value("format", std::string{}) != "dodeca-episodes") {
        throw ParseError(where + ": missing dodeca-episodes header line");
      }
      if (j.value("version", 0) != kEpisodeFormatVersion) {
        throw CompatibilityError(where + ": episode format version " + j.value("version", nlohmann::json(0)).dump() +
                                 " is not supported");
      }
      header_seen = true;
      continue;
    }
    Episode ep;
    try {
      ep = episode_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": malformed record (" + e.what() + ")");
    } catch (const SchemaError& e) {
      throw SchemaError(where + ": " + e.what());
    }
    try {
      validate(ep, spec);
    } catch (const SchemaError& e) {
      throw SchemaError(where + ": " + e.what());
    }
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

// ---------------------------------------------------------------------------
// Context assembly.

// persona lines, then knowledge, then the dialogue history, each segment
// introduced by its separator; the suffix is kept on truncation.
inline std::vector<TokenId> build_context(std::span<const std::string> persona, std::string_view knowledge,
                                          std::span<const Turn> history, const bpe::Vocabulary& vocab,
                                          std::size_t truncate) {
  std::vector<TokenId> ctx;
  auto segment = [&](TokenId sep, std::string_view text) {
    ctx.push_back(sep);
    const auto ids = bpe::encode(text, vocab);
    ctx.insert(ctx.end(), ids.begin(), ids.end());
  };
  for (const auto& line : persona) segment(bpe::kPersonaSep, line);
  if (!knowledge.empty()) segment(bpe::kKnowledgeSep, knowledge);
  for (const auto& t : history) segment(bpe::kTurnSep, t.text);
  if (ctx.size() > truncate) ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(truncate));
  return ctx;
}

inline std::vector<Example> flatten(const Episode& ep, const bpe::Vocabulary& vocab, const FlattenOptions& opt = {}) {
  if (opt.max_target < 1) throw ConfigError("flatten: max_target must be at least 1");
  std::vector<Example> out;
  const std::vector<std::string> no_persona;
  const auto& persona = opt.use.persona ? ep.persona : no_persona;
  const std::string_view knowledge = opt.use.knowledge ? std::string_view(ep.knowledge) : std::string_view();
  for (std::size_t i = 0; i < ep.turns.size(); ++i) {
    if (ep.turns[i].speaker != opt.respondent) continue;
    Example ex;
    ex.task = ep.task;
    ex.context_ids = build_context(persona, knowledge, std::span<const Turn>(ep.turns.data(), i), vocab, opt.truncate);
    ex.target_ids = bpe::encode(ep.turns[i].text, vocab);
    if (ex.target_ids.size() + 1 > opt.max_target) ex.target_ids.resize(opt.max_target - 1);
    ex.target_ids.push_back(bpe::kEnd);
    if (opt.use.image) ex.image_ref = ep.image_ref;
    out.push_back(std::move(ex));
  }
  return out;
}

// Context split back into its segments (token ids without separators).
struct ContextSegments {
  std::vector<std::vector<TokenId>> persona;
  std::optional<std::vector<TokenId>> knowledge;
  std::vector<std::vector<TokenId>> history;
};

inline ContextSegments parse_context(std::span<const TokenId> ctx) {
  ContextSegments seg;
  std::vector<TokenId>* current = nullptr;
  for (const TokenId id : ctx) {
    if (id == bpe::kPersonaSep) current = &seg.persona.emplace_back();
    else if (id == bpe::kKnowledgeSep) current = &seg.knowledge.emplace();
    else if (id == bpe::kTurnSep) current = &seg.history.emplace_back();
    else if (current) current->push_back(id);
  }
  return seg;
}

// ---------------------------------------------------------------------------
// Image features.

class ImageFeatureStore {
 public:
  static constexpr std::array<char, 4> kMagic{'D', 'D', 'I', 'F'};
  static constexpr std::uint32_t kVersion = 1;

  void insert(std::string key, std::vector<float> feature) {
    check(key, feature);
    features_[std::move(key)] = std::move(feature);
  }

  [[nodiscard]] const std::vector<float>& at(const std::string& key) const {
    auto it = features_.find(key);
    if (it == features_.end()) throw LookupError("image feature '" + key + "' not in store");
    return it->second;
  }

  [[nodiscard]] bool contains(const std::string& key) const { return features_.contains(key); }
  [[nodiscard]] std::size_t size() const noexcept { return features_.size(); }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write feature store '" + path.string() + "'");
    out.write(kMagic.data(), kMagic.size());
    io::write_le<std::uint32_t>(out, kVersion);
    for (const auto& [key, f] : features_) {
      io::write_string(out, key);
      io::write_f32(out, f);
    }
  }

  static ImageFeatureStore load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open feature store '" + path.string() + "'");
    std::array<char, 4> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw ParseError(path.string() + ": not a feature store");
    if (const auto v = io::read_le<std::uint32_t>(in, "feature store version"); v != kVersion) {
      throw CompatibilityError(path.string() + ": feature store version " + std::to_string(v) + " is not supported");
    }
    ImageFeatureStore store;
    while (in.peek() != std::char_traits<char>::eof()) {
      std::string key = io::read_string(in, "feature key");
      std::vector<float> f(kImageFeatureDim);
      io::read_f32(in, f, "feature vector");
      store.insert(std::move(key), std::move(f));
    }
    return store;
  }

 private:
  static void check(const std::string& key, const std::vector<float>& f) {
    if (f.size() != kImageFeatureDim) {
      throw SchemaError("image feature '" + key + "' has " + std::to_string(f.size()) + " entries, expected " +
                        std::to_string(kImageFeatureDim));
    }
    for (const float v : f)
      if (!std::isfinite(v)) throw SchemaError("image feature '" + key + "' contains a non-finite value");
  }

  std::map<std::string, std::vector<float>> features_;
};

inline Example attach_image(Example ex, const TaskSpec& spec, const ImageFeatureStore& store) {
  if (!spec.grounding.image || !ex.image_ref) return ex;
  ex.image_feature = store.at(*ex.image_ref);
  return ex;
}

}  // namespace dodeca::corpus
