#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dodeca/gradcheck.hpp"
#include "dodeca/model.hpp"

namespace dodeca::testing {

namespace fs = std::filesystem;

inline fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("dodeca_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

inline std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline model::ModelConfig tiny_config(std::size_t vocab, std::size_t d = 32) {
  model::ModelConfig c;
  c.n_encoder_layers = 2;
  c.n_decoder_layers = 2;
  c.d_model = d;
  c.n_heads = 4;
  c.d_ffn = 2 * d;
  c.dropout = 0.0;
  c.max_positions = 32;
  c.vocab_size = vocab;
  return c;
}

// Random non-special token ids in [kSpecialCount, vocab).
inline std::vector<bpe::TokenId> random_ids(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::vector<bpe::TokenId> out(n);
  for (auto& id : out) id = static_cast<bpe::TokenId>(bpe::kSpecialCount + rng() % (vocab - bpe::kSpecialCount));
  return out;
}

inline std::vector<float> random_feature(std::mt19937_64& rng) {
  std::vector<float> f(corpus::kImageFeatureDim);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : f) v = u(rng);
  return f;
}

inline corpus::Example random_example(std::mt19937_64& rng, std::size_t vocab, std::size_t ctx, std::size_t tgt, bool image) {
  corpus::Example ex;
  ex.context_ids = random_ids(rng, ctx, vocab);
  ex.target_ids = random_ids(rng, tgt, vocab);
  ex.target_ids.push_back(bpe::kEnd);
  if (image) ex.image_feature = random_feature(rng);
  return ex;
}

// Flattened parameter vector of a model, in store order.
template <typename T>
std::vector<double> flat_params(const model::Seq2Seq<T>& m) {
  std::vector<double> x;
  for (std::size_t i = 0; i < m.params().size(); ++i)
    for (const T v : m.params()[i].data()) x.push_back(static_cast<double>(v));
  return x;
}

// Batch NLL as a function of every model parameter.
inline tensor::GradFunction model_loss(model::Seq2Seq<double>& m, const model::Batch& batch) {
  return [&m, &batch](std::span<const double> x, std::span<double> grad) {
    std::size_t at = 0;
    for (std::size_t i = 0; i < m.params().size(); ++i)
      for (double& v : m.params()[i].data()) v = x[at++];
    tensor::Tape<double> tape(!grad.empty());
    auto loss = m.batch_nll(tape, batch, {});
    const double value = loss.value().item();
    if (!grad.empty()) {
      m.params().zero_grad();
      tape.backward(loss);
      at = 0;
      for (std::size_t i = 0; i < m.params().size(); ++i) {
        const auto& g = m.params()[i].grad;
        for (std::size_t j = 0; j < m.params()[i].size(); ++j) grad[at++] = g ? (*g)[j] : 0.0;
      }
    }
    return value;
  };
}

inline bool has_repeated_ngram(std::span<const bpe::TokenId> seq, std::size_t n) {
  if (n == 0 || seq.size() < n) return false;
  for (std::size_t i = 0; i + n <= seq.size(); ++i)
    for (std::size_t j = i + 1; j + n <= seq.size(); ++j)
      if (std::equal(seq.begin() + static_cast<std::ptrdiff_t>(i), seq.begin() + static_cast<std::ptrdiff_t>(i + n),
                     seq.begin() + static_cast<std::ptrdiff_t>(j)))
        return true;
  return false;
}

}  // namespace dodeca::testing
