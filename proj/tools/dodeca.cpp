// dodeca: tokenizer learning, synthetic data, training, evaluation, decoding
// and an interactive chat loop.
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric divergence.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dodeca/bpe.hpp"
#include "dodeca/config.hpp"
#include "dodeca/corpus.hpp"
#include "dodeca/decoding.hpp"
#include "dodeca/error.hpp"
#include "dodeca/metrics.hpp"
#include "dodeca/model.hpp"
#include "dodeca/synth.hpp"
#include "dodeca/training.hpp"

namespace fs = std::filesystem;
using namespace dodeca;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumeric = 4 };

// Options shared by every subcommand that reads a run configuration.
struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "Run configuration file (key = value)");
  cmd->add_option("--set", c.sets, "Override a configuration key, key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "Random seed (overrides DODECA_SEED and the file)");
}

// defaults < file < DODECA_SEED < flags
RunConfig resolve(const Common& c, const RunConfig& flags = {}) {
  RunConfig cfg;
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path)) throw DataError("config file '" + c.config_path + "' does not exist");
    cfg = RunConfig::load(c.config_path);
  }
  if (const char* env = std::getenv("DODECA_SEED"); env != nullptr && *env != '\0') cfg.set("train.seed", env);
  for (const auto& s : c.sets) cfg.set_assignment(s);
  cfg.merge(flags);
  if (c.seed) cfg.set("train.seed", std::to_string(*c.seed));
  return cfg;
}

bpe::Vocabulary load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary '" + path + "'");
  return bpe::Vocabulary::load(in);
}

corpus::TaskRegistry load_tasks(const std::string& path, const RunConfig& cfg, const std::string& config_path) {
  if (!path.empty()) {
    if (!fs::exists(path)) throw DataError("task registry '" + path + "' does not exist");
    return corpus::load_registry(path);
  }
  if (cfg.has("tasks.names")) return corpus::registry_from_config(cfg, fs::path(config_path).parent_path());
  throw ConfigError("no tasks: pass --tasks or put tasks.* keys in the config");
}

std::vector<corpus::TaskSpec> restrict(const corpus::TaskRegistry& reg, const std::vector<std::string>& only) {
  if (only.empty()) return reg.tasks;
  std::vector<corpus::TaskSpec> out;
  for (const auto& name : only) out.push_back(reg.at(name));
  return out;
}

std::optional<corpus::ImageFeatureStore> load_images(const corpus::TaskRegistry& reg, const std::string& override_path = {}) {
  const fs::path p = !override_path.empty() ? fs::path(override_path) : reg.image_store.value_or(fs::path());
  if (p.empty()) return std::nullopt;
  return corpus::ImageFeatureStore::load(p);
}

corpus::FlattenOptions flatten_options(const model::ModelConfig& mc, const corpus::GroundingFlags& use) {
  corpus::FlattenOptions o;
  o.truncate = std::min(corpus::kDefaultTruncation, mc.max_positions);
  o.max_target = mc.max_positions;
  o.use = use;
  return o;
}

decoding::DecodeTable load_table(const std::string& path) {
  if (path.empty()) return {};
  return decoding::load_decode_table(path);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

// ---------------------------------------------------------------------------

struct LearnBpeArgs {
  std::vector<std::string> corpus;
  std::string tasks;
  std::size_t merges = bpe::kDefaultMerges;
  std::string out;
};

int cmd_learn_bpe(const LearnBpeArgs& a, const Common& c) {
  RunConfig flags;
  flags.set("bpe.merges", std::to_string(a.merges));
  const RunConfig cfg = resolve(c, flags);
  std::vector<std::string> lines;
  for (const auto& path : a.corpus) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file '" + path + "'");
    for (std::string line; std::getline(in, line);) lines.push_back(line);
  }
  if (!a.tasks.empty()) {
    for (const auto& spec : load_tasks(a.tasks, cfg, c.config_path).tasks) {
      const auto texts = corpus::episode_texts(corpus::load_episodes(spec.train, spec));
      lines.insert(lines.end(), texts.begin(), texts.end());
    }
  }
  if (a.corpus.empty() && a.tasks.empty()) throw ConfigError("learn-bpe needs --corpus or --tasks");
  auto vocab = bpe::learn(lines, cfg.get_number<std::size_t>("bpe.merges", a.merges));
  vocab.set_config_echo(cfg.echo_line());
  std::ofstream out(a.out);
  if (!out) throw DataError("cannot write vocabulary '" + a.out + "'");
  vocab.save(out);
  std::cout << "vocabulary: " << vocab.size() << " tokens, " << vocab.merges().size() << " merges -> " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::uint64_t seed = 1;
  corpus::SynthOptions opt;
};

// Synth answers are short, so the default minimum length of 10 would force
// filler; every synth task decodes with beam 3 and no length floor.
decoding::DecodeTable synth_decode_table() {
  decoding::DecodeTable t;
  decoding::DecodeConfig d;
  d.beam_size = 3;
  d.min_len = 0;
  d.max_len = 16;
  d.block_ngram = 0;
  for (const char* name : {"copy", "reverse", "lookup", "imgcond"}) t.set(name, d);
  return t;
}

int cmd_synth(const SynthArgs& a) {
  const auto suite = corpus::synth_suite(a.seed, a.out, a.opt);
  decoding::save_decode_table(synth_decode_table(), fs::path(a.out) / "decode.tsv");
  std::cout << "synthetic suite (seed " << a.seed << ") -> " << suite.registry_path.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string tasks, vocab, out, init;
  std::vector<std::string> only;
  std::optional<std::string> regime, fine_tune_task, held_out;
  std::optional<std::size_t> steps;
  bool no_knowledge = false, no_image = false, no_persona = false, resume = false;
};

int cmd_train(const TrainArgs& a, const Common& c) {
  RunConfig flags;
  if (a.regime) flags.set("train.regime", *a.regime);
  if (a.fine_tune_task) flags.set("train.fine_tune_task", *a.fine_tune_task);
  if (a.held_out) flags.set("train.held_out", *a.held_out);
  if (a.steps) flags.set("train.max_steps", std::to_string(*a.steps));
  const RunConfig cfg = resolve(c, flags);
  const auto tc = training::TrainConfig::from_config(cfg);
  tc.validate();

  const auto vocab = load_vocab(a.vocab);
  const auto reg = load_tasks(a.tasks, cfg, c.config_path);
  std::optional<model::CheckpointFile> init_ck;
  if (!a.init.empty()) {
    init_ck = model::load_checkpoint(a.init);
    model::require_vocab(*init_ck, vocab);
  }
  const model::ModelConfig mc = init_ck ? init_ck->config : model::ModelConfig::from_config(cfg, vocab.size());
  mc.validate();
  const corpus::GroundingFlags use{!a.no_persona, !a.no_knowledge, !a.no_image};
  const auto images = load_images(reg);
  std::vector<corpus::TaskData> data;
  for (const auto& spec : restrict(reg, a.only)) data.push_back(corpus::load_task(spec, vocab, images ? &*images : nullptr, flatten_options(mc, use)));
  std::vector<training::TrainTask> all;
  for (const auto& d : data) all.push_back({d.spec.name, d.spec.weight, d.train, d.valid});

  const fs::path out(a.out);
  const fs::path last = out.string() + ".last", log_path = out.string() + ".steps.csv";
  write_text(out.string() + ".config", "# dodeca run-config v1\n" + cfg.echo());
  std::ofstream log(log_path, a.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot write step log '" + log_path.string() + "'");
  if (!a.resume) training::write_step_log_header(log, cfg);

  std::size_t offset = 0;
  training::LoopOptions lo;
  lo.on_step = [&](const training::StepRecord& r) {
    training::StepRecord shifted = r;
    shifted.step += offset;
    training::write_step_record(log, shifted);
  };
  lo.on_eval = [&](const training::EvalRecord& e) {
    std::cout << "step " << e.step + offset;
    for (const auto& [task, ppl] : e.ppl) std::cout << "  " << task << "=" << ppl;
    std::cout << "  objective=" << e.objective << std::endl;
  };

  const auto hash = vocab.hash();
  auto save = [&](const training::TrainState<float>& st) {
    model::save_checkpoint(out, training::to_checkpoint(st.best, &st, hash, cfg));
    model::save_checkpoint(last, training::to_checkpoint(st.model, &st, hash, cfg));
  };

  const model::Seq2Seq<float> start = init_ck ? model::model_from_checkpoint<float>(*init_ck) : model::Seq2Seq<float>(mc, tc.seed);
  auto make_state = [&]() -> training::TrainState<float> {
    if (!a.resume) return training::TrainState<float>(start);
    return training::resume_state<float>(model::load_checkpoint(last), model::load_checkpoint(out));
  };

  switch (tc.regime) {
    case training::Regime::Single:
    case training::Regime::MultiTask: {
      const auto active = training::select_tasks(all, tc);
      auto st = make_state();
      training::run_training(st, std::span<const training::TrainTask>(active), tc, lo);
      save(st);
      break;
    }
    case training::Regime::LeaveOneOut: {
      const auto active = training::select_tasks(all, tc);
      auto st = make_state();
      training::run_training(st, std::span<const training::TrainTask>(active), tc, lo);
      save(st);
      const auto& target = *std::find_if(all.begin(), all.end(), [&](const auto& t) { return t.name == *tc.held_out_task; });
      for (const auto& rec : st.log)
        if (rec.task == target.name) throw ContractError("held-out task entered a training batch");
      std::cout << "held-out " << target.name << " ppl=" << training::perplexity(st.best, target.valid, tc.eval_batch) << "\n";
      break;
    }
    case training::Regime::MultiTaskFineTune: {
      training::TrainConfig mt = tc;
      mt.regime = training::Regime::MultiTask;
      mt.fine_tune_task.reset();
      const auto active = training::select_tasks(all, mt);
      auto st = make_state();
      training::run_training(st, std::span<const training::TrainTask>(active), mt, lo);
      offset = st.step;
      const auto& target = *std::find_if(all.begin(), all.end(), [&](const auto& t) { return t.name == *tc.fine_tune_task; });
      training::TrainConfig ft = mt;
      if (tc.fine_tune_steps > 0) ft.max_steps = tc.fine_tune_steps;
      auto fst = training::fine_tune(st.best, target, ft, lo);
      save(fst);
      break;
    }
  }
  std::cout << "checkpoint -> " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, vocab, tasks, table, out, split = "valid";
  std::vector<std::string> only;
  std::optional<std::size_t> generate;
  bool no_knowledge = false, no_image = false, no_persona = false;
};

int cmd_eval(const EvalArgs& a, const Common& c) {
  RunConfig cfg = resolve(c);
  const auto vocab = load_vocab(a.vocab);
  const auto ck = model::load_checkpoint(a.checkpoint);
  model::require_vocab(ck, vocab);
  auto m = model::model_from_checkpoint<float>(ck);
  const auto reg = load_tasks(a.tasks, cfg, c.config_path);
  const auto images = load_images(reg);
  const corpus::GroundingFlags use{!a.no_persona, !a.no_knowledge, !a.no_image};
  if (a.split != "valid" && a.split != "test") throw ConfigError("--split must be valid or test");
  std::vector<std::vector<corpus::Example>> data;
  std::vector<metrics::EvalTask> tasks;
  for (const auto& spec : restrict(reg, a.only)) {
    const auto& path = a.split == "valid" ? spec.valid : spec.test;
    if (path.empty()) throw ConfigError("task '" + spec.name + "' has no " + a.split + " split");
    data.push_back(corpus::load_split(spec, path, vocab, images ? &*images : nullptr, flatten_options(m.config(), use)));
  }
  const auto specs = restrict(reg, a.only);
  for (std::size_t i = 0; i < specs.size(); ++i) tasks.push_back({specs[i].name, data[i]});
  auto table = load_table(a.table);
  for (const auto& spec : specs) table.set(spec.name, decoding::apply_overrides(table.for_task(spec.name), cfg));
  metrics::EvalOptions opt;
  opt.use = use;
  if (a.generate) opt.generation_limit = *a.generate;
  const auto report = metrics::evaluate(m, vocab, std::span<const metrics::EvalTask>(tasks), table, opt);
  cfg.set("eval.checkpoint", a.checkpoint);
  cfg.set("eval.split", a.split);
  cfg.set("eval.knowledge", use.knowledge ? "on" : "off");
  cfg.set("eval.image", use.image ? "on" : "off");
  cfg.set("eval.persona", use.persona ? "on" : "off");
  if (a.out.empty()) {
    metrics::write_report_csv(std::cout, report, cfg);
  } else {
    std::ofstream out(a.out);
    if (!out) throw DataError("cannot write report '" + a.out + "'");
    metrics::write_report_csv(out, report, cfg);
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct DecodeArgs {
  std::string checkpoint, vocab, tasks, table, task, split = "valid";
  std::size_t limit = 10;
};

int cmd_decode(const DecodeArgs& a, const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto vocab = load_vocab(a.vocab);
  const auto ck = model::load_checkpoint(a.checkpoint);
  model::require_vocab(ck, vocab);
  auto m = model::model_from_checkpoint<float>(ck);
  const auto reg = load_tasks(a.tasks, cfg, c.config_path);
  const auto& spec = reg.at(a.task);
  const auto images = load_images(reg);
  const auto exs = corpus::load_split(spec, a.split == "test" ? spec.test : spec.valid, vocab, images ? &*images : nullptr,
                                      flatten_options(m.config(), {}));
  const auto dc = decoding::apply_overrides(load_table(a.table).for_task(a.task), cfg);
  dc.validate();
  std::cout << "index\thypothesis\treference\n";
  for (std::size_t i = 0; i < std::min(a.limit, exs.size()); ++i) {
    const auto& ex = exs[i];
    auto d = dc;
    d.seed = dc.seed + i;
    const auto ids = decoding::decode(decoding::model_scorer(m, ex.context_ids, ex.image_feature ? &*ex.image_feature : nullptr), d);
    std::cout << i << "\t" << bpe::decode(ids, vocab) << "\t" << bpe::decode(ex.target_ids, vocab) << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct ChatArgs {
  std::string checkpoint, vocab, table, task = "chat", images;
  bool debug_context = false;
};

constexpr const char* kChatHelp =
    "commands:\n"
    "  /persona <text>    add a persona line\n"
    "  /knowledge <text>  set the knowledge passage\n"
    "  /image <key>       attach a stored image feature\n"
    "  /reset             clear the dialogue history\n"
    "  /help              show this text\n"
    "  /quit              leave\n";

std::string show_context(std::span<const bpe::TokenId> ctx, const bpe::Vocabulary& vocab) {
  std::string s;
  for (const bpe::TokenId id : ctx) {
    if (!s.empty()) s += ' ';
    s += vocab.token(id);
  }
  return s;
}

int cmd_chat(const ChatArgs& a, const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto vocab = load_vocab(a.vocab);
  const auto ck = model::load_checkpoint(a.checkpoint);
  model::require_vocab(ck, vocab);
  auto m = model::model_from_checkpoint<float>(ck);
  const auto dc = decoding::apply_overrides(load_table(a.table).for_task(a.task), cfg);
  dc.validate();
  std::optional<corpus::ImageFeatureStore> store;
  if (!a.images.empty()) store = corpus::ImageFeatureStore::load(a.images);
  const std::size_t truncate = std::min(corpus::kDefaultTruncation, m.config().max_positions);

  std::vector<std::string> persona;
  std::string knowledge;
  std::optional<std::vector<float>> image;
  std::vector<corpus::Turn> history;
  std::size_t turn = 0;
  for (std::string line; std::getline(std::cin, line);) {
    const std::string text = dodeca::detail::trim(line);
    if (text.empty()) continue;
    if (text.front() == '/') {
      const auto sp = text.find(' ');
      const std::string cmd = text.substr(0, sp);
      const std::string arg = sp == std::string::npos ? "" : dodeca::detail::trim(std::string_view(text).substr(sp + 1));
      if (cmd == "/quit") break;
      if (cmd == "/persona" && !arg.empty()) {
        persona.push_back(arg);
      } else if (cmd == "/knowledge") {
        knowledge = arg;
      } else if (cmd == "/image" && !arg.empty()) {
        if (!store) {
          std::cout << "no image store loaded (use --images)\n";
          continue;
        }
        try {
          image = store->at(arg);
        } catch (const LookupError& e) {
          std::cout << e.what() << "\n";
        }
      } else if (cmd == "/reset") {
        history.clear();
      } else {
        std::cout << kChatHelp;
      }
      continue;
    }
    history.push_back({corpus::Speaker::A, text});
    const auto ctx = corpus::build_context(persona, knowledge, history, vocab, truncate);
    if (a.debug_context) std::cout << "context: " << show_context(ctx, vocab) << "\n";
    auto d = dc;
    d.seed = dc.seed + turn++;
    const auto ids = decoding::decode(decoding::model_scorer(m, ctx, image ? &*image : nullptr), d);
    const std::string reply = bpe::decode(ids, vocab);
    std::cout << reply << std::endl;
    history.push_back({corpus::Speaker::B, reply});
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dodeca: multi-task grounded dialogue models at desk scale"};
  app.require_subcommand(1);
  Common common;

  LearnBpeArgs lb;
  auto* learn = app.add_subcommand("learn-bpe", "Learn a BPE vocabulary");
  learn->add_option("--corpus", lb.corpus, "Plain-text corpus files, one segment per line");
  learn->add_option("--tasks", lb.tasks, "Task registry; its training episodes are added to the corpus");
  learn->add_option("--merges", lb.merges, "Number of merges")->capture_default_str();
  learn->add_option("-o,--out", lb.out, "Vocabulary file")->required();
  add_common(learn, common);

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic task suite and its decode table");
  synth->add_option("-o,--out", sy.out, "Output directory")->required();
  synth->add_option("--seed", sy.seed, "Generator seed")->capture_default_str();
  synth->add_option("--train-episodes", sy.opt.train_episodes, "Training episodes per task")->capture_default_str();
  synth->add_option("--valid-episodes", sy.opt.valid_episodes, "Validation episodes per task")->capture_default_str();
  synth->add_option("--test-episodes", sy.opt.test_episodes, "Test episodes per task")->capture_default_str();
  synth->add_option("--lookup-pairs", sy.opt.lookup_pairs, "Key/value pairs per lookup passage")->capture_default_str();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--tasks", tr.tasks, "Task registry (else tasks.* keys in the config)");
  train->add_option("--vocab", tr.vocab, "Vocabulary file")->required();
  train->add_option("-o,--out", tr.out, "Checkpoint path; .last, .steps.csv and .config are written beside it")->required();
  train->add_option("--init", tr.init, "Start from this checkpoint");
  train->add_option("--only", tr.only, "Restrict to these tasks");
  train->add_option("--regime", tr.regime, "single | mt | mt-ft | loo");
  train->add_option("--fine-tune-task", tr.fine_tune_task, "Fine-tuning task (mt-ft)");
  train->add_option("--held-out", tr.held_out, "Held-out task (loo)");
  train->add_option("--steps", tr.steps, "Maximum optimizer steps");
  train->add_flag("--no-knowledge", tr.no_knowledge, "Drop knowledge segments");
  train->add_flag("--no-image", tr.no_image, "Drop image features");
  train->add_flag("--no-persona", tr.no_persona, "Drop persona segments");
  train->add_flag("--resume", tr.resume, "Continue from <out>.last and <out>");
  add_common(train, common);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Write a metric report");
  eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required();
  eval->add_option("--vocab", ev.vocab, "Vocabulary file")->required();
  eval->add_option("--tasks", ev.tasks, "Task registry");
  eval->add_option("--decode-table", ev.table, "Per-task decode settings (default beam 3, min 10, block 3)");
  eval->add_option("--only", ev.only, "Restrict to these tasks");
  eval->add_option("--split", ev.split, "valid | test")->capture_default_str();
  eval->add_option("--generate", ev.generate, "Examples decoded per task (default all)");
  eval->add_option("-o,--out", ev.out, "Report CSV (default stdout)");
  eval->add_flag("--no-knowledge", ev.no_knowledge, "Drop knowledge segments");
  eval->add_flag("--no-image", ev.no_image, "Drop image features");
  eval->add_flag("--no-persona", ev.no_persona, "Drop persona segments");
  add_common(eval, common);

  DecodeArgs de;
  auto* dec = app.add_subcommand("decode", "Decode examples of one task");
  dec->add_option("--checkpoint", de.checkpoint, "Checkpoint")->required();
  dec->add_option("--vocab", de.vocab, "Vocabulary file")->required();
  dec->add_option("--tasks", de.tasks, "Task registry");
  dec->add_option("--task", de.task, "Task name")->required();
  dec->add_option("--decode-table", de.table, "Per-task decode settings");
  dec->add_option("--split", de.split, "valid | test")->capture_default_str();
  dec->add_option("--limit", de.limit, "Number of examples")->capture_default_str();
  add_common(dec, common);

  ChatArgs ch;
  auto* chat = app.add_subcommand("chat", "Interactive chat on stdin/stdout");
  chat->add_option("--checkpoint", ch.checkpoint, "Checkpoint")->required();
  chat->add_option("--vocab", ch.vocab, "Vocabulary file")->required();
  chat->add_option("--decode-table", ch.table, "Per-task decode settings");
  chat->add_option("--task", ch.task, "Decode-table row to use")->capture_default_str();
  chat->add_option("--images", ch.images, "Image feature store for /image");
  chat->add_flag("--debug-context", ch.debug_context, "Print the flattened context before each reply");
  add_common(chat, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*learn) return cmd_learn_bpe(lb, common);
    if (*synth) return cmd_synth(sy);
    if (*train) return cmd_train(tr, common);
    if (*eval) return cmd_eval(ev, common);
    if (*dec) return cmd_decode(de, common);
    if (*chat) return cmd_chat(ch, common);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const CompatibilityError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DimensionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}
