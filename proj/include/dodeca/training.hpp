#pragma once

// Optimization: Adam with global-norm clipping, inverse square root schedule,
// weighted task sampling over homogeneous batches and early stopping on the
// mean validation perplexity of the active tasks.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dodeca/config.hpp"
#include "dodeca/corpus.hpp"
#include "dodeca/error.hpp"
#include "dodeca/model.hpp"

namespace dodeca::training {

using model::Seq2Seq;

enum class Regime { Single, MultiTask, MultiTaskFineTune, LeaveOneOut };

inline Regime parse_regime(std::string_view s) {
  if (s == "single") return Regime::Single;
  if (s == "mt") return Regime::MultiTask;
  if (s == "mt-ft") return Regime::MultiTaskFineTune;
  if (s == "loo") return Regime::LeaveOneOut;
  throw ConfigError("unknown regime '" + std::string(s) + "' (expected single, mt, mt-ft or loo)");
}

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::Single: return "single";
    case Regime::MultiTask: return "mt";
    case Regime::MultiTaskFineTune: return "mt-ft";
    case Regime::LeaveOneOut: return "loo";
  }
  return "?";
}

struct TrainConfig {
  double base_lr = 5e-4;
  std::size_t warmup_steps = 100;
  std::size_t max_steps = 1000;
  std::size_t batch_size = 32;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  std::size_t eval_every = 100;
  std::size_t patience = 5;
  Regime regime = Regime::MultiTask;
  std::map<std::string, double> task_weights;  // overrides registry weights
  std::optional<std::string> fine_tune_task;
  std::optional<std::string> held_out_task;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  std::size_t eval_batch = 64;
  std::size_t fine_tune_steps = 0;  // mt-ft: steps of the fine-tune phase; 0 = max_steps

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be positive");
    if (warmup_steps < 1) throw ConfigError("train.warmup_steps must be at least 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (eval_every < 1) throw ConfigError("train.eval_every must be at least 1");
    if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip must be positive");
    for (const auto& [name, w] : task_weights)
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("task weight of '" + name + "' must be finite and non-negative");
    if (regime == Regime::Single && held_out_task) throw ConfigError("--held-out is only valid with the loo regime");
    if (regime == Regime::LeaveOneOut && !held_out_task) throw ConfigError("the loo regime needs a held-out task");
    if (regime != Regime::LeaveOneOut && held_out_task) throw ConfigError("--held-out is only valid with the loo regime");
    if (regime == Regime::MultiTaskFineTune && !fine_tune_task) throw ConfigError("the mt-ft regime needs a fine-tune task");
    if (regime != Regime::MultiTaskFineTune && fine_tune_task) throw ConfigError("--fine-tune-task is only valid with the mt-ft regime");
  }

  static TrainConfig from_config(const RunConfig& cfg) {
    TrainConfig t;
    t.base_lr = cfg.get_number<double>("train.base_lr", t.base_lr);
    t.warmup_steps = cfg.get_number<std::size_t>("train.warmup_steps", t.warmup_steps);
    t.max_steps = cfg.get_number<std::size_t>("train.max_steps", t.max_steps);
    t.batch_size = cfg.get_number<std::size_t>("train.batch_size", t.batch_size);
    t.grad_clip = cfg.get_number<double>("train.grad_clip", t.grad_clip);
    t.seed = cfg.get_number<std::uint64_t>("train.seed", t.seed);
    t.eval_every = cfg.get_number<std::size_t>("train.eval_every", t.eval_every);
    t.patience = cfg.get_number<std::size_t>("train.patience", t.patience);
    t.regime = parse_regime(cfg.get_string("train.regime", to_string(t.regime)));
    t.eval_batch = cfg.get_number<std::size_t>("train.eval_batch", t.eval_batch);
    t.fine_tune_steps = cfg.get_number<std::size_t>("train.fine_tune_steps", t.fine_tune_steps);
    if (auto v = cfg.find("train.fine_tune_task"); v && !v->empty()) t.fine_tune_task = *v;
    if (auto v = cfg.find("train.held_out"); v && !v->empty()) t.held_out_task = *v;
    const RunConfig weights = cfg.section("train.weight");
    for (const auto& [k, v] : weights.values()) t.task_weights[k] = weights.get_number<double>(k, 1.0);
    t.validate();
    return t;
  }
};

// Inverse square root schedule with linear warmup; peaks at base_lr when
// step == warmup.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step == 0) throw ContractError("lr_at: steps are numbered from 1");
  const double s = static_cast<double>(step), w = static_cast<double>(cfg.warmup_steps);
  return cfg.base_lr * std::min(s / w, std::sqrt(w / s));
}

struct WeightedTask {
  std::string name;
  double weight = 1.0;
};

// Draws a task with probability weight / total weight.
inline const std::string& sample_task(std::span<const WeightedTask> tasks, std::mt19937_64& rng) {
  double total = 0.0;
  for (const auto& t : tasks) {
    if (!(t.weight >= 0.0) || !std::isfinite(t.weight)) throw ConfigError("task weight of '" + t.name + "' must be finite and non-negative");
    total += t.weight;
  }
  if (!(total > 0.0)) throw ConfigError("task weights sum to zero");
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * total;
  double acc = 0.0;
  const WeightedTask* last = nullptr;
  for (const auto& t : tasks) {
    if (t.weight == 0.0) continue;
    acc += t.weight;
    last = &t;
    if (u < acc) return t.name;
  }
  return last->name;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  explicit AdamState(const model::ParamStore<T>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m.emplace_back(params[i].size(), T{0});
      v.emplace_back(params[i].size(), T{0});
    }
  }
};

// Global L2 norm of all present gradients.
template <typename T>
double grad_norm(const model::ParamStore<T>& params) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].grad) continue;
    for (const T g : *params[i].grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

// Scales gradients so their global norm is at most max_norm; returns the
// norm before clipping.
template <typename T>
double clip_gradients(model::ParamStore<T>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].grad)
        for (T& g : *params[i].grad) g *= factor;
  }
  return norm;
}

// One bias-corrected Adam update. Parameters without a gradient are treated
// as having a zero gradient.
template <typename T>
void adam_step(model::ParamStore<T>& params, AdamState<T>& state, double lr, double beta1, double beta2, double eps) {
  if (state.m.size() != params.size()) throw DimensionError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
  const T step_size = static_cast<T>(lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T e = static_cast<T>(eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != w.size()) throw DimensionError("adam_step: moment size mismatch for '" + params.name(i) + "'");
    const std::vector<T>* g = params[i].grad ? &*params[i].grad : nullptr;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = g ? (*g)[j] : T{0};
      if (!std::isfinite(gj)) throw NumericError("non-finite gradient in '" + params.name(i) + "'");
      m[j] = b1 * m[j] + (T{1} - b1) * gj;
      v[j] = b2 * v[j] + (T{1} - b2) * gj * gj;
      w[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_c2 + e);
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation

// exp(total NLL / total target tokens) over a set of examples.
template <typename T>
double perplexity(Seq2Seq<T>& m, std::span<const corpus::Example> examples, std::size_t batch = 64) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch) {
    const std::size_t n = std::min(batch, examples.size() - start);
    const auto b = model::make_batch(examples.subspan(start, n));
    for (const auto& [nll, count] : m.example_nll(b)) {
      total += nll;
      tokens += count;
    }
  }
  if (tokens == 0) throw ContractError("perplexity over zero target tokens");
  return std::exp(total / static_cast<double>(tokens));
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainTask {
  std::string name;
  double weight = 1.0;
  std::span<const corpus::Example> train;
  std::span<const corpus::Example> valid;
};

struct StepRecord {
  std::size_t step = 0;
  std::string task;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  bool operator==(const StepRecord&) const = default;
};

struct EvalRecord {
  std::size_t step = 0;
  std::map<std::string, double> ppl;
  double objective = 0.0;
};

template <typename T>
struct TrainState {
  Seq2Seq<T> model;
  AdamState<T> adam;
  std::size_t step = 0;
  Seq2Seq<T> best;
  double best_objective = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::size_t since_best = 0;
  bool stopped = false;
  std::vector<EvalRecord> evals;
  std::vector<StepRecord> log;

  explicit TrainState(Seq2Seq<T> init) : model(init), adam(init.params()), best(init) {}
};

struct LoopOptions {
  bool eval_at_start = false;  // evaluate before the first step (fine-tuning)
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EvalRecord&)> on_eval;
};

namespace detail {

inline std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Per-step generator: resuming needs only the step counter.
inline std::mt19937_64 step_rng(std::uint64_t seed, std::size_t step) { return std::mt19937_64(mix(mix(seed) ^ step)); }

template <typename T>
EvalRecord evaluate(Seq2Seq<T>& m, std::span<const TrainTask> tasks, std::size_t step, std::size_t eval_batch) {
  EvalRecord r;
  r.step = step;
  double sum = 0.0;
  for (const auto& t : tasks) {
    const double ppl = perplexity(m, t.valid, eval_batch);
    r.ppl[t.name] = ppl;
    sum += ppl;
  }
  r.objective = sum / static_cast<double>(tasks.size());
  return r;
}

template <typename T>
void record_eval(TrainState<T>& st, EvalRecord r, const TrainConfig& cfg, const LoopOptions& opt) {
  if (r.objective < st.best_objective) {
    st.best_objective = r.objective;
    st.best_step = r.step;
    st.best = st.model;
    st.since_best = 0;
  } else {
    ++st.since_best;
  }
  if (st.since_best >= cfg.patience) st.stopped = true;
  if (opt.on_eval) opt.on_eval(r);
  st.evals.push_back(std::move(r));
}

}  // namespace detail

// Runs (or continues) optimization until max_steps or early stopping.
// st.best holds the model with the lowest mean validation PPL observed.
template <typename T>
void run_training(TrainState<T>& st, std::span<const TrainTask> tasks, const TrainConfig& cfg, const LoopOptions& opt = {}) {
  cfg.validate();
  if (tasks.empty()) throw ConfigError("no tasks to train on");
  std::vector<WeightedTask> weights;
  for (const auto& t : tasks) {
    if (t.train.empty()) throw ConfigError("task '" + t.name + "' has no training examples");
    if (t.valid.empty()) throw ConfigError("task '" + t.name + "' has no validation examples");
    weights.push_back({t.name, t.weight});
  }
  if (opt.eval_at_start && st.step == 0 && st.evals.empty()) {
    detail::record_eval(st, detail::evaluate(st.model, tasks, 0, cfg.eval_batch), cfg, opt);
  }
  std::vector<const corpus::Example*> picked(cfg.batch_size);
  while (!st.stopped && st.step < cfg.max_steps) {
    const std::size_t step = st.step + 1;
    auto rng = detail::step_rng(cfg.seed, step);
    const std::string& name = sample_task(weights, rng);
    const TrainTask& task = *std::find_if(tasks.begin(), tasks.end(), [&](const TrainTask& t) { return t.name == name; });
    for (auto& p : picked) p = &task.train[rng() % task.train.size()];
    const auto batch = model::make_batch(std::span<const corpus::Example* const>(picked));

    st.model.params().zero_grad();
    double loss = 0.0;
    try {
      tensor::Tape<T> tape;
      auto nll = st.model.batch_nll(tape, batch, {&rng});
      loss = static_cast<double>(nll.value().item());
      tape.backward(nll);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss)) throw NumericError("training diverged at step " + std::to_string(step) + ": loss is not finite");
    double norm = 0.0;
    try {
      norm = clip_gradients(st.model.params(), cfg.grad_clip);
      const double lr = lr_at(step, cfg);
      adam_step(st.model.params(), st.adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
      st.step = step;
      StepRecord rec{step, name, lr, loss, norm};
      if (opt.on_step) opt.on_step(rec);
      st.log.push_back(std::move(rec));
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      detail::record_eval(st, detail::evaluate(st.model, tasks, step, cfg.eval_batch), cfg, opt);
    }
  }
  st.model.params().zero_grad();
}

template <typename T>
TrainState<T> train(const Seq2Seq<T>& init, std::span<const TrainTask> tasks, const TrainConfig& cfg, const LoopOptions& opt = {}) {
  TrainState<T> st(init);
  run_training(st, tasks, cfg, opt);
  return st;
}

// Continues from a trained model on one task with a fresh optimizer and
// schedule. The starting model is evaluated first, so the result is never
// worse on that task's validation set.
template <typename T>
TrainState<T> fine_tune(const Seq2Seq<T>& start, const TrainTask& task, const TrainConfig& cfg, const LoopOptions& opt = {}) {
  TrainState<T> st(start);
  LoopOptions o = opt;
  o.eval_at_start = true;
  run_training(st, std::span<const TrainTask>(&task, 1), cfg, o);
  return st;
}

template <typename T>
TrainState<T> fine_tune(const model::CheckpointFile& ck, const bpe::Vocabulary& vocab, const TrainTask& task, const TrainConfig& cfg,
                        const LoopOptions& opt = {}) {
  model::require_vocab(ck, vocab);
  return fine_tune(model::model_from_checkpoint<T>(ck), task, cfg, opt);
}

// Tasks active in a regime, with weights resolved.
inline std::vector<TrainTask> select_tasks(std::span<const TrainTask> all, const TrainConfig& cfg) {
  std::vector<TrainTask> out;
  for (const auto& t : all) {
    if (cfg.regime == Regime::LeaveOneOut && cfg.held_out_task == t.name) continue;
    TrainTask copy = t;
    if (auto it = cfg.task_weights.find(t.name); it != cfg.task_weights.end()) copy.weight = it->second;
    out.push_back(copy);
  }
  if (cfg.regime == Regime::LeaveOneOut) {
    const bool known = std::any_of(all.begin(), all.end(), [&](const TrainTask& t) { return t.name == cfg.held_out_task; });
    if (!known) throw ConfigError("held-out task '" + cfg.held_out_task.value_or("") + "' is not in the registry");
    if (out.empty()) throw ConfigError("leave-one-out with a single task leaves nothing to train on");
  }
  if (cfg.regime == Regime::Single && out.size() != 1) {
    throw ConfigError("the single regime needs exactly one task, got " + std::to_string(out.size()));
  }
  if (out.empty()) throw ConfigError("no tasks to train on");
  return out;
}

template <typename T>
struct LeaveOneOutResult {
  TrainState<T> state;
  double held_out_ppl = 0.0;
};

// Trains on every task except held_out, then scores held_out zero-shot with
// the best checkpoint. Throws ContractError if a held-out batch was drawn.
template <typename T>
LeaveOneOutResult<T> leave_one_out(const Seq2Seq<T>& init, std::span<const TrainTask> tasks, const std::string& held_out,
                                   TrainConfig cfg, const LoopOptions& opt = {}) {
  cfg.regime = Regime::LeaveOneOut;
  cfg.held_out_task = held_out;
  const auto active = select_tasks(tasks, cfg);
  const TrainTask& target = *std::find_if(tasks.begin(), tasks.end(), [&](const TrainTask& t) { return t.name == held_out; });
  LeaveOneOutResult<T> out{train(init, std::span<const TrainTask>(active), cfg, opt), 0.0};
  for (const auto& rec : out.state.log)
    if (rec.task == held_out) throw ContractError("held-out task '" + held_out + "' entered a training batch at step " + std::to_string(rec.step));
  out.held_out_ppl = perplexity(out.state.best, target.valid, cfg.eval_batch);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline void write_step_log_header(std::ostream& out, const RunConfig& echo) {
  out << "# dodeca step-log v1\n# config: " << echo.echo_line() << "\nstep,task,lr,loss,grad_norm\n";
}

inline void write_step_record(std::ostream& out, const StepRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g\n", r.step, r.task.c_str(), r.lr, r.loss, r.grad_norm);
  out << buf;
}

inline std::string hex_double(double v) { return std::to_string(std::bit_cast<std::uint64_t>(v)); }
inline double unhex_double(const std::string& s) { return std::bit_cast<double>(static_cast<std::uint64_t>(std::stoull(s))); }

template <typename T>
model::CheckpointFile to_checkpoint(const Seq2Seq<T>& params, const TrainState<T>* st, std::uint64_t vocab_hash, const RunConfig& echo) {
  model::CheckpointFile ck;
  ck.config = params.config();
  ck.vocab_hash = vocab_hash;
  ck.run_config = echo;
  ck.params = model::export_params(params);
  if (st != nullptr) {
    model::OptimizerState opt;
    opt.step = st->adam.step;
    for (std::size_t i = 0; i < st->adam.m.size(); ++i) {
      opt.m.emplace_back(st->adam.m[i].begin(), st->adam.m[i].end());
      opt.v.emplace_back(st->adam.v[i].begin(), st->adam.v[i].end());
    }
    ck.optimizer = std::move(opt);
    ck.trainer_state.set("step", std::to_string(st->step));
    ck.trainer_state.set("best_step", std::to_string(st->best_step));
    ck.trainer_state.set("best_objective", hex_double(st->best_objective));
    ck.trainer_state.set("since_best", std::to_string(st->since_best));
    ck.trainer_state.set("stopped", st->stopped ? "true" : "false");
  }
  return ck;
}

// Rebuilds a training state from the last-state checkpoint and the best
// checkpoint written alongside it.
template <typename T>
TrainState<T> resume_state(const model::CheckpointFile& last, const model::CheckpointFile& best) {
  if (!last.optimizer) throw CompatibilityError("checkpoint has no optimizer section; cannot resume");
  TrainState<T> st(model::model_from_checkpoint<T>(last));
  st.best = model::model_from_checkpoint<T>(best);
  st.adam.step = last.optimizer->step;
  for (std::size_t i = 0; i < st.adam.m.size(); ++i) {
    if (last.optimizer->m[i].size() != st.adam.m[i].size()) throw CompatibilityError("optimizer moments do not match the model");
    std::transform(last.optimizer->m[i].begin(), last.optimizer->m[i].end(), st.adam.m[i].begin(), [](float f) { return static_cast<T>(f); });
    std::transform(last.optimizer->v[i].begin(), last.optimizer->v[i].end(), st.adam.v[i].begin(), [](float f) { return static_cast<T>(f); });
  }
  const auto& s = last.trainer_state;
  st.step = s.get_number<std::size_t>("step", 0);
  st.best_step = s.get_number<std::size_t>("best_step", 0);
  st.best_objective = unhex_double(s.get_string("best_objective", hex_double(std::numeric_limits<double>::infinity())));
  st.since_best = s.get_number<std::size_t>("since_best", 0);
  st.stopped = s.get_bool("stopped", false);
  return st;
}

}  // namespace dodeca::training
