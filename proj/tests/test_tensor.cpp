#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "dodeca/autograd.hpp"
#include "dodeca/gradcheck.hpp"

using namespace dodeca;
using namespace dodeca::tensor;

namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t({r, c});
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// Runs a graph builder once per evaluation; the builder receives parameter
// leaves carved out of the flat vector.
template <typename Build>
GradFunction graph_function(std::vector<Shape> shapes, Build build) {
  return [shapes, build](std::span<const double> x, std::span<double> grad) {
    std::vector<Tensor<double>> leaves;
    std::size_t off = 0;
    for (const Shape& s : shapes) {
      const std::size_t n = element_count(s);
      leaves.emplace_back(s, std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(off),
                                                 x.begin() + static_cast<std::ptrdiff_t>(off + n)));
      leaves.back().requires_grad = true;
      off += n;
    }
    Tape<double> tape(!grad.empty());
    std::vector<Var<double>> vars;
    for (auto& l : leaves) vars.push_back(tape.param(l));
    Var<double> loss = build(tape, vars);
    const double value = loss.value().item();
    if (!grad.empty()) {
      tape.backward(loss);
      off = 0;
      for (auto& l : leaves) {
        std::copy(l.grad->begin(), l.grad->end(), grad.begin() + static_cast<std::ptrdiff_t>(off));
        off += l.size();
      }
    }
    return value;
  };
}

std::vector<double> flatten(const std::vector<Tensor<double>>& ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape<double> tape;
  auto i2 = tape.constant(Tensor<double>::matrix(2, 2, {1, 0, 0, 1}));
  auto m = tape.constant(Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(i2, m).value(), Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
}

TEST(Matmul, HandMultipliedProduct) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
  auto b = tape.constant(Tensor<double>::matrix(2, 2, {5, 6, 7, 8}));
  // 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8
  EXPECT_EQ(matmul(a, b).value(), Tensor<double>::matrix(2, 2, {19, 22, 43, 50}));
}

TEST(Matmul, ScalarProduct) {
  Tape<double> tape;
  auto r = matmul(tape.constant(Tensor<double>::scalar(2)), tape.constant(Tensor<double>::scalar(3)));
  EXPECT_EQ(r.value().item(), 6.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 3}));
  try {
    (void)matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, AssociativityOnRandomChains) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> tape;
    auto a = tape.constant(random_matrix(4, 4, rng));
    auto b = tape.constant(random_matrix(4, 4, rng));
    auto c = tape.constant(random_matrix(4, 4, rng));
    auto d = tape.constant(random_matrix(4, 4, rng));
    const auto left = matmul(matmul(matmul(a, b), c), d).value();
    const auto right = matmul(a, matmul(b, matmul(c, d))).value();
    for (std::size_t i = 0; i < left.size(); ++i) {
      EXPECT_LE(std::abs(left[i] - right[i]), 1e-6 * std::max(1.0, std::abs(left[i])));
    }
  }
}

TEST(Softmax, SymmetricInputGivesUniform) {
  Tape<double> tape;
  auto p = softmax(tape.constant(Tensor<double>::matrix(1, 2, {0, 0}))).value();
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, ClosedFormLogThree) {
  Tape<double> tape;
  auto p = softmax(tape.constant(Tensor<double>::matrix(1, 2, {0, std::log(3.0)}))).value();
  EXPECT_NEAR(p[0], 0.25, 1e-12);
  EXPECT_NEAR(p[1], 0.75, 1e-12);
}

TEST(Softmax, ShiftInvariant) {
  std::mt19937_64 rng(3);
  for (double c : {-50.0, -1.0, 0.5, 80.0}) {
    Tape<double> tape;
    auto x = random_matrix(1, 6, rng, -5, 5);
    Tensor<double> shifted = x;
    for (double& v : shifted.data()) v += c;
    auto p = softmax(tape.constant(x)).value();
    auto q = softmax(tape.constant(shifted)).value();
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(Softmax, SumsToOneOnWideRangeInputs) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Tape<float> tape;
    auto xd = random_matrix(3, 1 + trial % 40, rng, -100, 100);
    auto p = softmax(tape.constant(xd.cast<float>())).value();
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double total = 0;
      for (std::size_t c = 0; c < p.cols(); ++c) {
        EXPECT_GE(p(r, c), 0.0f);
        total += p(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  for (std::size_t v : {2u, 10u, 100u}) {
    Tape<double> tape;
    std::vector<std::int32_t> targets{0, static_cast<std::int32_t>(v - 1), 1};
    auto loss = cross_entropy(tape.constant(Tensor<double>({3, v})), std::span<const std::int32_t>(targets));
    EXPECT_NEAR(loss.value().item(), std::log(static_cast<double>(v)), 1e-9);
  }
}

TEST(CrossEntropy, ConfidentPredictionIsNearZero) {
  Tape<double> tape;
  Tensor<double> logits({2, 5});
  logits(0, 3) = 1e4;
  logits(1, 0) = 1e4;
  std::vector<std::int32_t> targets{3, 0};
  EXPECT_NEAR(cross_entropy(tape.constant(logits), std::span<const std::int32_t>(targets)).value().item(), 0.0, 1e-12);
}

TEST(CrossEntropy, MatchesPerPositionSoftmaxLog) {
  const double l[2][3] = {{0.5, -1.0, 2.0}, {1.5, 0.25, -0.75}};
  const int tg[2] = {2, 1};
  double oracle = 0;
  for (int t = 0; t < 2; ++t) {
    double z = 0;
    for (double v : l[t]) z += std::exp(v);
    oracle -= std::log(std::exp(l[t][tg[t]]) / z);
  }
  oracle /= 2;
  Tape<double> tape;
  std::vector<std::int32_t> targets{2, 1};
  auto logits = tape.constant(Tensor<double>::matrix(2, 3, {0.5, -1.0, 2.0, 1.5, 0.25, -0.75}));
  EXPECT_NEAR(cross_entropy(logits, std::span<const std::int32_t>(targets)).value().item(), oracle, 1e-12);
}

TEST(CrossEntropy, IgnoredPositionsExcludedAndAllIgnoredIsError) {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>::matrix(2, 2, {0, 0, 5, -5}));
  std::vector<std::int32_t> targets{1, 0};
  std::vector<std::int32_t> one_ignored{1, 9};
  EXPECT_NEAR(cross_entropy(logits, std::span<const std::int32_t>(one_ignored), 9).value().item(), std::log(2.0), 1e-12);
  std::vector<std::int32_t> all_ignored{9, 9};
  EXPECT_THROW((void)cross_entropy(logits, std::span<const std::int32_t>(all_ignored), 9), NumericError);
}

TEST(Backward, SquareDerivative) {
  Tensor<double> x = Tensor<double>::scalar(3.0);
  x.requires_grad = true;
  Tape<double> tape;
  auto v = tape.param(x);
  tape.backward(mul(v, v));
  ASSERT_TRUE(x.grad.has_value());
  EXPECT_DOUBLE_EQ((*x.grad)[0], 6.0);
}

TEST(Backward, MatmulSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng);
  auto f = graph_function({a.shape(), b.shape()}, [](Tape<double>&, std::vector<Var<double>>& v) {
    return sum(matmul(v[0], v[1]));
  });
  EXPECT_LT(finite_diff_check(f, flatten({a, b}), 1e-5).max_relative_error, 1e-4);
}

TEST(Backward, UnreachableLeafGetsExactZero) {
  Tensor<double> x = Tensor<double>::scalar(2.0), y = Tensor<double>::scalar(5.0);
  x.requires_grad = y.requires_grad = true;
  Tape<double> tape;
  auto vx = tape.param(x);
  (void)tape.param(y);
  tape.backward(scale(vx, 4.0));
  EXPECT_EQ((*x.grad)[0], 4.0);
  ASSERT_TRUE(y.grad.has_value());
  EXPECT_EQ((*y.grad)[0], 0.0);
}

TEST(Backward, NonScalarLossIsRankError) {
  Tensor<double> x({2, 2}, 1.0);
  x.requires_grad = true;
  Tape<double> tape;
  EXPECT_THROW(tape.backward(tape.param(x)), DimensionError);
}

TEST(Backward, SecondBackwardOnSameTapeIsError) {
  Tensor<double> x = Tensor<double>::scalar(1.5);
  x.requires_grad = true;
  Tape<double> tape;
  auto loss = mul(tape.param(x), tape.param(x));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), ContractError);
}

TEST(Backward, TiedLeafAccumulates) {
  Tensor<double> x = Tensor<double>::scalar(1.5);
  x.requires_grad = true;
  Tape<double> tape;
  tape.backward(add(tape.param(x), scale(tape.param(x), 2.0)));
  EXPECT_DOUBLE_EQ((*x.grad)[0], 3.0);
}

TEST(Tape, InputsPrecedeEveryOperation) {
  Tensor<double> x({2, 2}, 0.5);
  x.requires_grad = true;
  Tape<double> tape;
  auto v = tape.param(x);
  (void)sum(softmax(matmul(v, transpose(v))));
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (std::size_t in : tape.node(i).inputs) EXPECT_LT(in, i);
  }
}

TEST(NanPolicy, FailsFastNamingTheOp) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>::matrix(1, 2, {1.0, 0.0}));
  try {
    (void)log(x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'log'"), std::string::npos);
  }
}

TEST(Dropout, TrainOnlyInvertedScaling) {
  std::mt19937_64 rng(1);
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 20000}, 1.0));
  auto y = dropout(x, 0.25, rng).value();
  double total = 0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 4.0 / 3.0) < 1e-12);
    total += v;
  }
  EXPECT_NEAR(total / 20000.0, 1.0, 0.02);
  EXPECT_EQ(dropout(x, 0.0, rng).id(), x.id());
}

TEST(FiniteDiff, ExactQuadratic) {
  std::mt19937_64 rng(9);
  auto x = random_matrix(1, 12, rng);
  GradFunction f = [](std::span<const double> p, std::span<double> g) {
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      s += p[i] * p[i];
      if (!g.empty()) g[i] = 2 * p[i];
    }
    return s;
  };
  EXPECT_LT(finite_diff_check(f, x.data(), 1e-5).max_relative_error, 1e-6);
}

TEST(FiniteDiff, ConstantFunction) {
  GradFunction f = [](std::span<const double>, std::span<double> g) {
    std::fill(g.begin(), g.end(), 0.0);
    return 4.2;
  };
  std::vector<double> x{1, 2, 3};
  EXPECT_LT(finite_diff_check(f, x, 1e-5).max_relative_error, 1e-4);
}

TEST(FiniteDiff, RejectsBadEpsilonAndNonFinite) {
  GradFunction f = [](std::span<const double> p, std::span<double>) { return p[0] > 0 ? NAN : 0.0; };
  std::vector<double> x{1};
  EXPECT_THROW(finite_diff_check(f, x, 0.0), ContractError);
  EXPECT_THROW(finite_diff_check(f, x, 1e-5), NumericError);
}

TEST(FiniteDiff, EveryOpIndividually) {
  std::mt19937_64 rng(21);
  const auto a = random_matrix(3, 4, rng), b = random_matrix(3, 4, rng);
  const auto w = random_matrix(4, 4, rng);
  const auto gain = random_matrix(1, 4, rng, 0.5, 1.5), bias = random_matrix(1, 4, rng);
  const std::vector<Shape> shapes{a.shape(), b.shape(), w.shape(), gain.shape(), bias.shape()};
  const auto params = flatten({a, b, w, gain, bias});
  const std::vector<std::int32_t> targets{1, 3, 0};
  const std::vector<std::size_t> rows{2, 0, 2, 1};
  std::vector<std::uint8_t> mask(12, 0);
  mask[1] = mask[6] = 1;

  using V = std::vector<Var<double>>;
  const std::vector<std::pair<const char*, std::function<Var<double>(Tape<double>&, V&)>>> cases{
      {"add", [](Tape<double>&, V& v) { return sum(mul(add(v[0], v[1]), v[0])); }},
      {"add_row", [](Tape<double>&, V& v) { return sum(mul(add_row(v[0], v[4]), v[1])); }},
      {"scale", [](Tape<double>&, V& v) { return sum(mul(scale(v[0], -1.7), v[1])); }},
      {"softmax", [](Tape<double>&, V& v) { return sum(mul(softmax(v[0]), v[1])); }},
      {"log", [](Tape<double>&, V& v) { return sum(mul(log(softmax(v[0])), v[1])); }},
      {"relu", [](Tape<double>&, V& v) { return sum(mul(relu(v[0]), v[1])); }},
      {"layer_norm", [](Tape<double>&, V& v) { return sum(mul(layer_norm(v[0], v[3], v[4]), v[1])); }},
      {"transpose", [](Tape<double>&, V& v) { return sum(matmul(v[0], transpose(v[1]))); }},
      {"concat", [](Tape<double>&, V& v) { return sum(mul(concat_rows({v[0], v[1]}), concat_rows({v[1], v[0]}))); }},
      {"take_rows",
       [&rows](Tape<double>&, V& v) { return sum(mul(take_rows(v[0], std::span<const std::size_t>(rows)), take_rows(v[1], std::span<const std::size_t>(rows)))); }},
      {"masked_fill", [&mask](Tape<double>&, V& v) { return sum(mul(masked_fill(v[0], std::span<const std::uint8_t>(mask), -3.0), v[1])); }},
      {"cross_entropy", [&targets](Tape<double>&, V& v) { return cross_entropy(matmul(v[0], v[2]), std::span<const std::int32_t>(targets)); }},
      {"dropout",
       [](Tape<double>&, V& v) {
         std::mt19937_64 local(4);
         return sum(mul(dropout(v[0], 0.3, local), v[1]));
       }},
  };
  for (const auto& [name, build] : cases) {
    auto f = graph_function(shapes, build);
    EXPECT_LT(finite_diff_check(f, params, 1e-5).max_relative_error, 1e-4) << name;
  }
}

TEST(FiniteDiff, EmbeddingScattersIntoTable) {
  std::mt19937_64 rng(2);
  const auto table = random_matrix(5, 3, rng), probe = random_matrix(4, 3, rng);
  const std::vector<std::int32_t> ids{4, 1, 4, 0};
  auto f = graph_function({table.shape(), probe.shape()}, [&ids](Tape<double>&, std::vector<Var<double>>& v) {
    return sum(mul(embedding(v[0], std::span<const std::int32_t>(ids)), v[1]));
  });
  EXPECT_LT(finite_diff_check(f, flatten({table, probe}), 1e-5).max_relative_error, 1e-4);
}

// Random compositions of the implemented ops; each graph is checked against
// central differences.
TEST(FiniteDiff, RandomGraphProperty) {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 40; ++trial) {
    const std::uint64_t program_seed = rng();
    const auto x0 = random_matrix(3, 3, rng), w = random_matrix(3, 3, rng);
    const auto gain = random_matrix(1, 3, rng, 0.5, 1.5), bias = random_matrix(1, 3, rng);
    auto f = graph_function({x0.shape(), w.shape(), gain.shape(), bias.shape()},
                            [program_seed](Tape<double>&, std::vector<Var<double>>& v) {
                              std::mt19937_64 prog(program_seed);
                              Var<double> x = v[0];
                              const int depth = 2 + static_cast<int>(prog() % 5);
                              for (int step = 0; step < depth; ++step) {
                                switch (prog() % 8) {
                                  case 0: x = matmul(x, v[1]); break;
                                  case 1: x = add(x, v[1]); break;
                                  case 2: x = mul(x, v[1]); break;
                                  case 3: x = softmax(x); break;
                                  case 4: x = layer_norm(x, v[2], v[3]); break;
                                  case 5: x = add_row(transpose(x), v[3]); break;
                                  case 6: x = scale(x, 0.5); break;
                                  default: x = log(softmax(x)); break;
                                }
                              }
                              return sum(mul(x, v[1]));
                            });
    const auto r = finite_diff_check(f, flatten({x0, w, gain, bias}), 1e-5);
    EXPECT_LT(r.max_relative_error, 1e-4) << "trial " << trial << " coord " << r.worst_index;
  }
}

// Fused attention against the same computation composed from primitive ops.
TEST(Attention, FusedMatchesComposedPrimitives) {
  std::mt19937_64 rng(77);
  const std::size_t B = 2, Lq = 3, Lk = 4, H = 2, d = 4, dh = 2;
  const auto q = random_matrix(B * Lq, d, rng), k = random_matrix(B * Lk, d, rng), v = random_matrix(B * Lk, d, rng);
  AttentionLayout layout{B, Lq, Lk, H, false, {1, 1, 0, 1, 1, 1, 1, 0}};

  Tape<double> tape;
  auto fused = attention(tape.constant(q), tape.constant(k), tape.constant(v), layout).value();

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      Tensor<double> qb({Lq, dh}), kb({Lk, dh}), vb({Lk, dh});
      for (std::size_t i = 0; i < Lq; ++i)
        for (std::size_t c = 0; c < dh; ++c) qb(i, c) = q(b * Lq + i, h * dh + c);
      for (std::size_t j = 0; j < Lk; ++j)
        for (std::size_t c = 0; c < dh; ++c) kb(j, c) = k(b * Lk + j, h * dh + c), vb(j, c) = v(b * Lk + j, h * dh + c);
      std::vector<std::uint8_t> fill(Lq * Lk);
      for (std::size_t i = 0; i < Lq; ++i)
        for (std::size_t j = 0; j < Lk; ++j) fill[i * Lk + j] = layout.key_mask[b * Lk + j] ? 0 : 1;
      auto scores = scale(matmul(tape.constant(qb), transpose(tape.constant(kb))), 1.0 / std::sqrt(2.0));
      auto probs = softmax(masked_fill(scores, std::span<const std::uint8_t>(fill), -1e9));
      auto out = matmul(probs, tape.constant(vb)).value();
      for (std::size_t i = 0; i < Lq; ++i)
        for (std::size_t c = 0; c < dh; ++c) EXPECT_NEAR(out(i, c), fused(b * Lq + i, h * dh + c), 1e-12);
    }
  }
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(78);
  const std::size_t B = 2, L = 3, d = 4;
  const auto q = random_matrix(B * L, d, rng), k = random_matrix(B * L, d, rng), v = random_matrix(B * L, d, rng);
  const auto probe = random_matrix(B * L, d, rng);
  for (bool causal : {false, true}) {
    AttentionLayout layout{B, L, L, 2, causal, {1, 1, 1, 1, 0, 1}};
    auto f = graph_function({q.shape(), k.shape(), v.shape()}, [&](Tape<double>& tape, std::vector<Var<double>>& p) {
      return sum(mul(attention(p[0], p[1], p[2], layout), tape.constant(probe)));
    });
    EXPECT_LT(finite_diff_check(f, flatten({q, k, v}), 1e-5).max_relative_error, 1e-4) << "causal=" << causal;
  }
}

TEST(Attention, CausalRowIgnoresLaterKeys) {
  std::mt19937_64 rng(79);
  auto q = random_matrix(4, 4, rng), k = random_matrix(4, 4, rng), v = random_matrix(4, 4, rng);
  AttentionLayout layout{1, 4, 4, 2, true, {}};
  Tape<double> tape;
  auto base = attention(tape.constant(q), tape.constant(k), tape.constant(v), layout).value();
  for (std::size_t c = 0; c < 4; ++c) k(3, c) += 5.0, v(3, c) -= 2.0;
  auto moved = attention(tape.constant(q), tape.constant(k), tape.constant(v), layout).value();
  for (std::size_t i = 0; i < 3 * 4; ++i) EXPECT_EQ(base[i], moved[i]);
}
