#pragma once

// Transformer encoder-decoder with an optional image token.
//
// The encoder reads the flattened dialogue context; when an image feature is
// supplied its affine projection is appended as one extra encoder output row
// (after the final encoder norm, without a position). The decoder attends
// causally to its own prefix and to every unmasked encoder row. Token
// embeddings are shared by encoder, decoder and the output projection.

#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dodeca/autograd.hpp"
#include "dodeca/bpe.hpp"
#include "dodeca/config.hpp"
#include "dodeca/corpus.hpp"
#include "dodeca/error.hpp"
#include "dodeca/io.hpp"
#include "dodeca/tensor.hpp"

namespace dodeca::model {

using bpe::TokenId;
using corpus::kImageFeatureDim;
using tensor::Tape;
using tensor::Tensor;
using tensor::Var;

struct ModelConfig {
  std::size_t n_encoder_layers = 2;
  std::size_t n_decoder_layers = 2;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 512;
  double dropout = 0.1;
  std::size_t max_positions = 1024;
  std::size_t vocab_size = 0;
  double init_std = 0.02;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be a positive multiple of model.n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (d_ffn == 0) throw ConfigError("model.d_ffn must be positive");
    if (max_positions == 0) throw ConfigError("model.max_positions must be positive");
    if (vocab_size <= bpe::kSpecialCount) throw ConfigError("model vocabulary of " + std::to_string(vocab_size) + " tokens is too small");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must lie in [0, 1)");
    if (!(init_std > 0.0)) throw ConfigError("model.init_std must be positive");
  }

  // Reads `model.*` keys; vocab_size comes from the vocabulary, not the file.
  static ModelConfig from_config(const RunConfig& cfg, std::size_t vocab_size) {
    ModelConfig m;
    m.n_encoder_layers = cfg.get_number<std::size_t>("model.n_encoder_layers", m.n_encoder_layers);
    m.n_decoder_layers = cfg.get_number<std::size_t>("model.n_decoder_layers", m.n_decoder_layers);
    m.d_model = cfg.get_number<std::size_t>("model.d_model", m.d_model);
    m.n_heads = cfg.get_number<std::size_t>("model.n_heads", m.n_heads);
    m.d_ffn = cfg.get_number<std::size_t>("model.d_ffn", m.d_ffn);
    m.dropout = cfg.get_number<double>("model.dropout", m.dropout);
    m.max_positions = cfg.get_number<std::size_t>("model.max_positions", m.max_positions);
    m.init_std = cfg.get_number<double>("model.init_std", m.init_std);
    m.vocab_size = vocab_size;
    m.validate();
    return m;
  }

  [[nodiscard]] RunConfig to_config() const {
    RunConfig c;
    c.set("model.n_encoder_layers", std::to_string(n_encoder_layers));
    c.set("model.n_decoder_layers", std::to_string(n_decoder_layers));
    c.set("model.d_model", std::to_string(d_model));
    c.set("model.n_heads", std::to_string(n_heads));
    c.set("model.d_ffn", std::to_string(d_ffn));
    std::ostringstream dr, is;
    dr.precision(17);
    is.precision(17);
    dr << dropout;
    is << init_std;
    c.set("model.dropout", dr.str());
    c.set("model.max_positions", std::to_string(max_positions));
    c.set("model.init_std", is.str());
    c.set("model.vocab_size", std::to_string(vocab_size));
    return c;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    const std::size_t d = d_model, f = d_ffn;
    const std::size_t norm = 2 * d;
    const std::size_t attn = 4 * d * d + d;
    const std::size_t ffn = d * f + f + f * d + d;
    return vocab_size * d + 2 * max_positions * d + kImageFeatureDim * d + d + n_encoder_layers * (2 * norm + attn + ffn) +
           norm + n_decoder_layers * (3 * norm + 2 * attn + ffn) + norm;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Named parameters in a fixed order. Storage is a deque so tensor addresses
// stay valid for tapes that reference them.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(std::string name, Tensor<T> value) {
    if (index_.contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
    index_.emplace(name, tensors_.size());
    names_.push_back(std::move(name));
    value.requires_grad = true;
    tensors_.push_back(std::move(value));
    return tensors_.back();
  }

  [[nodiscard]] Tensor<T>& at(const std::string& name) { return tensors_[lookup(name)]; }
  [[nodiscard]] const Tensor<T>& at(const std::string& name) const { return tensors_[lookup(name)]; }
  [[nodiscard]] std::size_t size() const noexcept { return tensors_.size(); }
  [[nodiscard]] const std::string& name(std::size_t i) const { return names_.at(i); }
  [[nodiscard]] Tensor<T>& operator[](std::size_t i) { return tensors_[i]; }
  [[nodiscard]] const Tensor<T>& operator[](std::size_t i) const { return tensors_[i]; }

  [[nodiscard]] std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.grad.reset();
  }

 private:
  std::size_t lookup(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw LookupError("no parameter named '" + name + "'");
    return it->second;
  }

  std::deque<Tensor<T>> tensors_;
  std::vector<std::string> names_;
  std::map<std::string, std::size_t> index_;
};

// Padded batch of flattened examples. Row b of every field occupies a block
// of context_len (or target_len) entries.
struct Batch {
  std::size_t size = 0;
  std::size_t context_len = 0;
  std::size_t target_len = 0;
  std::vector<TokenId> context;
  std::vector<TokenId> decoder_in;
  std::vector<TokenId> targets;  // tensor::kNoIgnore on padding
  std::vector<std::uint8_t> has_image;
  std::vector<float> images;  // size x 2048, zeros where absent; empty if no image in batch

  [[nodiscard]] bool any_image() const { return !images.empty(); }
};

inline Batch make_batch(std::span<const corpus::Example* const> examples) {
  if (examples.empty()) throw ContractError("make_batch: no examples");
  Batch b;
  b.size = examples.size();
  b.context_len = 1;
  for (const auto* ex : examples) {
    if (ex->target_ids.empty()) throw ContractError("make_batch: example with empty target");
    b.context_len = std::max(b.context_len, ex->context_ids.size());
    b.target_len = std::max(b.target_len, ex->target_ids.size());
  }
  b.context.assign(b.size * b.context_len, bpe::kPad);
  b.decoder_in.assign(b.size * b.target_len, bpe::kPad);
  b.targets.assign(b.size * b.target_len, tensor::kNoIgnore);
  b.has_image.assign(b.size, 0);
  bool images = false;
  for (const auto* ex : examples) images = images || ex->image_feature.has_value();
  if (images) b.images.assign(b.size * kImageFeatureDim, 0.0f);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& ex = *examples[i];
    std::copy(ex.context_ids.begin(), ex.context_ids.end(), b.context.begin() + static_cast<std::ptrdiff_t>(i * b.context_len));
    const std::size_t n = ex.target_ids.size();
    b.decoder_in[i * b.target_len] = bpe::kStart;
    for (std::size_t t = 0; t < n; ++t) {
      if (t + 1 < n) b.decoder_in[i * b.target_len + t + 1] = ex.target_ids[t];
      b.targets[i * b.target_len + t] = ex.target_ids[t];
    }
    if (ex.image_feature) {
      if (ex.image_feature->size() != kImageFeatureDim) {
        throw DimensionError("image feature has " + std::to_string(ex.image_feature->size()) + " entries, expected 2048");
      }
      b.has_image[i] = 1;
      std::copy(ex.image_feature->begin(), ex.image_feature->end(), b.images.begin() + static_cast<std::ptrdiff_t>(i * kImageFeatureDim));
    }
  }
  return b;
}

inline Batch make_batch(std::span<const corpus::Example> examples) {
  std::vector<const corpus::Example*> ptrs;
  for (const auto& ex : examples) ptrs.push_back(&ex);
  return make_batch(std::span<const corpus::Example* const>(ptrs));
}

// Dropout is active only when rng is set.
struct ForwardMode {
  std::mt19937_64* rng = nullptr;
  [[nodiscard]] bool training() const noexcept { return rng != nullptr; }
};

template <typename T>
struct EncoderOutput {
  Tensor<T> states;                // (L or L+1) x d_model
  std::vector<std::uint8_t> mask;  // 1 = attendable
  bool has_image = false;
};

namespace detail {

inline double init_gaussian(std::mt19937_64& rng) {
  const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace detail

template <typename T>
class Seq2Seq {
 public:
  Seq2Seq(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    build(&rng);
  }

  // Parameters left at their shapes with zero values; used by load and cast.
  static Seq2Seq uninitialized(const ModelConfig& config) { return Seq2Seq(config); }

  Seq2Seq(const Seq2Seq& other) : config_(other.config_) {
    build(nullptr);
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i] = other.params_[i];
  }
  Seq2Seq& operator=(const Seq2Seq& other) {
    if (this != &other) {
      if (!(config_ == other.config_)) throw ContractError("assigning a model of a different configuration");
      for (std::size_t i = 0; i < params_.size(); ++i) params_[i] = other.params_[i];
    }
    return *this;
  }

  [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
  [[nodiscard]] ParamStore<T>& params() noexcept { return params_; }
  [[nodiscard]] const ParamStore<T>& params() const noexcept { return params_; }

  template <typename U>
  [[nodiscard]] Seq2Seq<U> cast() const {
    auto out = Seq2Seq<U>::uninitialized(config_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.params()[i] = params_[i].template cast<U>();
      out.params()[i].requires_grad = true;
    }
    return out;
  }

  // --- batched graph building -------------------------------------------

  struct EncodedBatch {
    Var<T> states;  // size * key_len rows
    std::size_t key_len = 0;
    std::vector<std::uint8_t> mask;
  };

  EncodedBatch encode(Tape<T>& tape, const Batch& b, ForwardMode mode) {
    const std::size_t B = b.size, L = b.context_len, d = config_.d_model;
    if (L > config_.max_positions) {
      throw DimensionError("context of " + std::to_string(L) + " tokens exceeds max_positions " +
                           std::to_string(config_.max_positions) + "; truncate before encoding");
    }
    std::vector<std::uint8_t> text_mask(B * L);
    for (std::size_t i = 0; i < B * L; ++i) text_mask[i] = b.context[i] != bpe::kPad;

    Var<T> x = tensor::add(tensor::embedding(p(tape, "tok_emb"), std::span<const TokenId>(b.context)),
                           positions(tape, "enc_pos", B, L));
    x = drop(x, mode);
    tensor::AttentionLayout self{B, L, L, config_.n_heads, false, text_mask};
    for (std::size_t l = 0; l < config_.n_encoder_layers; ++l) {
      const std::string pre = "enc." + std::to_string(l) + ".";
      Var<T> h = norm(tape, pre + "ln1", x);
      x = tensor::add(x, drop(attend(tape, pre + "attn", h, h, self), mode));
      h = norm(tape, pre + "ln2", x);
      x = tensor::add(x, drop(feed_forward(tape, pre + "ffn", h, mode), mode));
    }
    x = norm(tape, "enc.ln", x);

    if (!b.any_image()) return {x, L, std::move(text_mask)};

    // Interleave one image row after each sequence's text rows.
    Var<T> img = project_images(tape, b.images, B);
    Var<T> both = tensor::concat_rows({x, img});
    std::vector<std::size_t> order;
    std::vector<std::uint8_t> mask;
    order.reserve(B * (L + 1));
    for (std::size_t s = 0; s < B; ++s) {
      for (std::size_t i = 0; i < L; ++i) {
        order.push_back(s * L + i);
        mask.push_back(text_mask[s * L + i]);
      }
      order.push_back(B * L + s);
      mask.push_back(b.has_image[s]);
    }
    (void)d;
    return {tensor::take_rows(both, std::span<const std::size_t>(order)), L + 1, std::move(mask)};
  }

  // Decoder logits, (size * target_len) x vocab.
  Var<T> decode(Tape<T>& tape, const EncodedBatch& enc, std::span<const TokenId> decoder_in, std::size_t batch,
                std::size_t target_len, ForwardMode mode) {
    if (target_len == 0) throw ContractError("decode: empty target prefix");
    if (target_len > config_.max_positions) {
      throw DimensionError("target prefix of " + std::to_string(target_len) + " tokens exceeds max_positions");
    }
    Var<T> table = p(tape, "tok_emb");
    Var<T> y = tensor::add(tensor::embedding(table, decoder_in), positions(tape, "dec_pos", batch, target_len));
    y = drop(y, mode);
    tensor::AttentionLayout self{batch, target_len, target_len, config_.n_heads, true, {}};
    tensor::AttentionLayout cross{batch, target_len, enc.key_len, config_.n_heads, false, enc.mask};
    for (std::size_t l = 0; l < config_.n_decoder_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".";
      Var<T> h = norm(tape, pre + "ln1", y);
      y = tensor::add(y, drop(attend(tape, pre + "self", h, h, self), mode));
      h = norm(tape, pre + "ln2", y);
      y = tensor::add(y, drop(attend(tape, pre + "cross", h, enc.states, cross), mode));
      h = norm(tape, pre + "ln3", y);
      y = tensor::add(y, drop(feed_forward(tape, pre + "ffn", h, mode), mode));
    }
    y = norm(tape, "dec.ln", y);
    return tensor::matmul(y, tensor::transpose(table));
  }

  Var<T> logits(Tape<T>& tape, const Batch& b, ForwardMode mode) {
    const auto enc = encode(tape, b, mode);
    return decode(tape, enc, b.decoder_in, b.size, b.target_len, mode);
  }

  // Token-weighted mean NLL of the batch targets.
  Var<T> batch_nll(Tape<T>& tape, const Batch& b, ForwardMode mode) {
    return tensor::cross_entropy(logits(tape, b, mode), std::span<const TokenId>(b.targets));
  }

  // Summed NLL and token count per example, accumulated in double.
  std::vector<std::pair<double, std::size_t>> example_nll(const Batch& b) {
    Tape<T> tape(false);
    const Var<T> lg = logits(tape, b, {});
    const std::size_t V = config_.vocab_size;
    std::vector<std::pair<double, std::size_t>> out(b.size, {0.0, 0});
    const auto v = lg.value().data();
    for (std::size_t s = 0; s < b.size; ++s) {
      for (std::size_t t = 0; t < b.target_len; ++t) {
        const std::size_t r = s * b.target_len + t;
        if (b.targets[r] == tensor::kNoIgnore) continue;
        out[s].first += token_nll(v.subspan(r * V, V), b.targets[r]);
        ++out[s].second;
      }
    }
    return out;
  }

  // Mean NLL per target token of one example.
  double forward_nll(const corpus::Example& ex) {
    const auto b = make_batch(std::span<const corpus::Example>(&ex, 1));
    const auto [total, count] = example_nll(b)[0];
    return total / static_cast<double>(count);
  }

  // --- single-sequence inference -------------------------------------------

  EncoderOutput<T> encode(std::span<const TokenId> context_ids, const std::vector<float>* image_feature = nullptr) {
    corpus::Example ex;
    ex.context_ids.assign(context_ids.begin(), context_ids.end());
    if (image_feature != nullptr) ex.image_feature = *image_feature;
    ex.target_ids = {bpe::kEnd};
    const auto b = make_batch(std::span<const corpus::Example>(&ex, 1));
    Tape<T> tape(false);
    auto enc = encode(tape, b, {});
    return {enc.states.value(), std::move(enc.mask), b.any_image()};
  }

  // Logits for every prefix position, prefix_len x vocab.
  Tensor<T> decode_step(std::span<const TokenId> prefix, const EncoderOutput<T>& enc) {
    if (prefix.empty()) throw ContractError("decode_step: empty prefix");
    if (prefix.front() != bpe::kStart) throw ContractError("decode_step: prefix must begin with the start token");
    Tape<T> tape(false);
    EncodedBatch e{tape.constant(enc.states), enc.states.rows(), enc.mask};
    return decode(tape, e, prefix, 1, prefix.size(), {}).value();
  }

  // Affine 2048 -> d_model map of one feature.
  std::vector<T> project_image(std::span<const float> feature) {
    if (feature.size() != kImageFeatureDim) {
      throw DimensionError("image feature has " + std::to_string(feature.size()) + " entries, expected 2048");
    }
    for (const float f : feature)
      if (!std::isfinite(f)) throw NumericError("non-finite image feature");
    Tape<T> tape(false);
    const auto v = project_images(tape, feature, 1).value().data();
    return {v.begin(), v.end()};
  }

  static double token_nll(std::span<const T> row, TokenId target) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const T x : row) mx = std::max(mx, static_cast<double>(x));
    double z = 0.0;
    for (const T x : row) z += std::exp(static_cast<double>(x) - mx);
    return std::log(z) + mx - static_cast<double>(row[static_cast<std::size_t>(target)]);
  }

 private:
  explicit Seq2Seq(const ModelConfig& config) : config_(config) {
    config_.validate();
    build(nullptr);
  }

  void build(std::mt19937_64* rng) {
    const std::size_t d = config_.d_model, f = config_.d_ffn;
    auto normal = [&](std::string name, std::size_t r, std::size_t c) {
      Tensor<T> t({r, c});
      if (rng != nullptr)
        for (T& v : t.data()) v = static_cast<T>(config_.init_std * detail::init_gaussian(*rng));
      params_.add(std::move(name), std::move(t));
    };
    auto fill = [&](std::string name, std::size_t c, T value) { params_.add(std::move(name), Tensor<T>({1, c}, rng ? value : T{0})); };
    auto norm_params = [&](const std::string& name) {
      fill(name + ".g", d, T{1});
      fill(name + ".b", d, T{0});
    };
    auto attn_params = [&](const std::string& name) {
      normal(name + ".wq", d, d);
      normal(name + ".wk", d, d);
      normal(name + ".wv", d, d);
      normal(name + ".wo", d, d);
      fill(name + ".bo", d, T{0});
    };
    auto ffn_params = [&](const std::string& name) {
      normal(name + ".w1", d, f);
      fill(name + ".b1", f, T{0});
      normal(name + ".w2", f, d);
      fill(name + ".b2", d, T{0});
    };
    normal("tok_emb", config_.vocab_size, d);
    normal("enc_pos", config_.max_positions, d);
    normal("dec_pos", config_.max_positions, d);
    normal("img.w", kImageFeatureDim, d);
    fill("img.b", d, T{0});
    for (std::size_t l = 0; l < config_.n_encoder_layers; ++l) {
      const std::string pre = "enc." + std::to_string(l) + ".";
      norm_params(pre + "ln1");
      attn_params(pre + "attn");
      norm_params(pre + "ln2");
      ffn_params(pre + "ffn");
    }
    norm_params("enc.ln");
    for (std::size_t l = 0; l < config_.n_decoder_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".";
      norm_params(pre + "ln1");
      attn_params(pre + "self");
      norm_params(pre + "ln2");
      attn_params(pre + "cross");
      norm_params(pre + "ln3");
      ffn_params(pre + "ffn");
    }
    norm_params("dec.ln");
  }

  Var<T> p(Tape<T>& tape, const std::string& name) { return tape.param(params_.at(name)); }

  Var<T> positions(Tape<T>& tape, const std::string& table, std::size_t batch, std::size_t len) {
    std::vector<std::size_t> rows(batch * len);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i % len;
    return tensor::take_rows(p(tape, table), std::span<const std::size_t>(rows));
  }

  Var<T> drop(const Var<T>& x, ForwardMode mode) {
    if (!mode.training() || config_.dropout == 0.0) return x;
    return tensor::dropout(x, config_.dropout, *mode.rng);
  }

  Var<T> norm(Tape<T>& tape, const std::string& name, const Var<T>& x) {
    return tensor::layer_norm(x, p(tape, name + ".g"), p(tape, name + ".b"));
  }

  Var<T> attend(Tape<T>& tape, const std::string& name, const Var<T>& queries, const Var<T>& memory,
                const tensor::AttentionLayout& layout) {
    const Var<T> q = tensor::matmul(queries, p(tape, name + ".wq"));
    const Var<T> k = tensor::matmul(memory, p(tape, name + ".wk"));
    const Var<T> v = tensor::matmul(memory, p(tape, name + ".wv"));
    const Var<T> a = tensor::attention(q, k, v, layout);
    return tensor::add_row(tensor::matmul(a, p(tape, name + ".wo")), p(tape, name + ".bo"));
  }

  Var<T> feed_forward(Tape<T>& tape, const std::string& name, const Var<T>& x, ForwardMode mode) {
    Var<T> h = tensor::relu(tensor::add_row(tensor::matmul(x, p(tape, name + ".w1")), p(tape, name + ".b1")));
    h = drop(h, mode);
    return tensor::add_row(tensor::matmul(h, p(tape, name + ".w2")), p(tape, name + ".b2"));
  }

  Var<T> project_images(Tape<T>& tape, std::span<const float> features, std::size_t n) {
    Tensor<T> f({n, kImageFeatureDim});
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<T>(features[i]);
    return tensor::add_row(tensor::matmul(tape.constant(std::move(f)), p(tape, "img.w")), p(tape, "img.b"));
  }

  ModelConfig config_;
  ParamStore<T> params_;
};

// ---------------------------------------------------------------------------
// Checkpoint files.
//
//   "DDCK" u32 version
//   string  header text (model config, vocab hash, run config echo)
//   u32     parameter count, then per parameter:
//           string name, u32 rank, u32 dims..., f32 values
//   u8      optimizer section present
//           u64 step, then per parameter f32 first and second moments
//   string  trainer state text

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  bool operator==(const OptimizerState&) const = default;
};

struct CheckpointFile {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  RunConfig run_config;
  std::vector<std::pair<std::string, Tensor<float>>> params;
  std::optional<OptimizerState> optimizer;
  RunConfig trainer_state;
};

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointFile& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  out.write("DDCK", 4);
  io::write_le<std::uint32_t>(out, kCheckpointVersion);
  RunConfig header = ck.config.to_config();
  header.set("vocab.hash", std::to_string(ck.vocab_hash));
  std::string text = "[model]\n" + header.echo() + "[run]\n" + ck.run_config.echo();
  io::write_string(out, text);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, t] : ck.params) {
    io::write_string(out, name);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (const std::size_t dim : t.shape()) io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
    io::write_f32(out, t.data());
  }
  io::write_le<std::uint8_t>(out, ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    io::write_le<std::uint64_t>(out, ck.optimizer->step);
    if (ck.optimizer->m.size() != ck.params.size() || ck.optimizer->v.size() != ck.params.size()) {
      throw ContractError("optimizer moments do not match the parameter list");
    }
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      io::write_f32(out, ck.optimizer->m[i]);
      io::write_f32(out, ck.optimizer->v[i]);
    }
  }
  io::write_string(out, ck.trainer_state.echo());
  if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

inline CheckpointFile load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  char magic[4] = {};
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "DDCK") throw ParseError("'" + path.string() + "' is not a checkpoint");
  const auto version = io::read_le<std::uint32_t>(in, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw CompatibilityError("checkpoint '" + path.string() + "' has format version " + std::to_string(version) +
                             ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const std::string text = io::read_string(in, "checkpoint header");
  const auto run_at = text.find("[run]\n");
  if (text.rfind("[model]\n", 0) != 0 || run_at == std::string::npos) throw ParseError("malformed checkpoint header");
  std::istringstream model_text(text.substr(8, run_at - 8)), run_text(text.substr(run_at + 6));
  const RunConfig header = RunConfig::parse(model_text, "checkpoint header");

  CheckpointFile ck;
  ck.config = ModelConfig::from_config(header, header.get_number<std::size_t>("model.vocab_size", 0));
  ck.vocab_hash = header.get_number<std::uint64_t>("vocab.hash", 0);
  ck.run_config = RunConfig::parse(run_text, "checkpoint run config");
  const auto count = io::read_le<std::uint32_t>(in, "parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = io::read_string(in, "parameter name");
    const auto rank = io::read_le<std::uint32_t>(in, "parameter rank");
    if (rank > 4) throw ParseError("parameter '" + name + "' has implausible rank " + std::to_string(rank));
    tensor::Shape shape(rank);
    for (auto& dim : shape) dim = io::read_le<std::uint32_t>(in, "parameter shape");
    Tensor<float> t(shape);
    io::read_f32(in, t.data(), name);
    ck.params.emplace_back(std::move(name), std::move(t));
  }
  if (io::read_le<std::uint8_t>(in, "optimizer flag") != 0) {
    OptimizerState opt;
    opt.step = io::read_le<std::uint64_t>(in, "optimizer step");
    for (const auto& [name, t] : ck.params) {
      opt.m.emplace_back(t.size());
      opt.v.emplace_back(t.size());
      io::read_f32(in, opt.m.back(), "first moment of " + name);
      io::read_f32(in, opt.v.back(), "second moment of " + name);
    }
    ck.optimizer = std::move(opt);
  }
  std::istringstream state_text(io::read_string(in, "trainer state"));
  ck.trainer_state = RunConfig::parse(state_text, "checkpoint trainer state");
  return ck;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<float>>> export_params(const Seq2Seq<T>& m) {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  for (std::size_t i = 0; i < m.params().size(); ++i) out.emplace_back(m.params().name(i), m.params()[i].template cast<float>());
  return out;
}

template <typename T>
Seq2Seq<T> model_from_checkpoint(const CheckpointFile& ck) {
  auto m = Seq2Seq<T>::uninitialized(ck.config);
  if (ck.params.size() != m.params().size()) {
    throw CompatibilityError("checkpoint holds " + std::to_string(ck.params.size()) + " parameters, model expects " +
                             std::to_string(m.params().size()));
  }
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& [name, t] = ck.params[i];
    if (name != m.params().name(i) || t.shape() != m.params()[i].shape()) {
      throw CompatibilityError("checkpoint parameter '" + name + "' " + tensor::to_string(t.shape()) + " does not match '" +
                               m.params().name(i) + "' " + tensor::to_string(m.params()[i].shape()));
    }
    m.params()[i] = t.template cast<T>();
    m.params()[i].requires_grad = true;
  }
  return m;
}

inline void require_vocab(const CheckpointFile& ck, const bpe::Vocabulary& vocab) {
  if (ck.vocab_hash != vocab.hash() || ck.config.vocab_size != vocab.size()) {
    throw CompatibilityError("checkpoint was trained with vocabulary hash " + std::to_string(ck.vocab_hash) +
                             ", the given vocabulary has hash " + std::to_string(vocab.hash()));
  }
}

}  // namespace dodeca::model
