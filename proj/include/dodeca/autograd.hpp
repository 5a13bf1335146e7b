#pragma once

// Reverse-mode automatic differentiation over row-major matrices.
//
// A Tape records every operation of one forward build in creation order, so
// ids are already a topological order and backward is a reverse sweep. One
// tape serves exactly one backward pass.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dodeca/error.hpp"
#include "dodeca/tensor.hpp"

namespace dodeca::tensor {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixView = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixView = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using StridedView = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedView = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] Tape<T>& tape() const { return *tape_; }
  [[nodiscard]] std::size_t id() const noexcept { return id_; }
  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }
  [[nodiscard]] const Tensor<T>& value() const { return tape_->value(id_); }
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] std::size_t rows() const { return value().rows(); }
  [[nodiscard]] std::size_t cols() const { return value().cols(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self, std::span<const T> grad)>;

  struct Node {
    std::string op;
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::vector<T> grad;
    Tensor<T>* leaf = nullptr;
    bool needs_grad = false;
  };

  // With record_gradients = false the tape only holds values (inference).
  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] bool recording() const noexcept { return recording_; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
  [[nodiscard]] const Node& node(std::size_t id) const { return nodes_.at(id); }
  [[nodiscard]] const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.leaf != nullptr ? *n.leaf : n.value;
  }
  [[nodiscard]] bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  Var<T> constant(Tensor<T> value) {
    require_finite("constant", value);
    nodes_.push_back(Node{"constant", std::move(value), {}, {}, {}, nullptr, false});
    return Var<T>(this, nodes_.size() - 1);
  }

  // Registers a parameter leaf. Its gradient is written to leaf.grad by
  // backward(). Registering the same tensor twice returns the same node so
  // tied weights accumulate into one gradient. The leaf is referenced, not
  // copied, and must stay unmodified while the tape is alive.
  Var<T> param(Tensor<T>& leaf) {
    if (auto it = leaf_ids_.find(&leaf); it != leaf_ids_.end()) return Var<T>(this, it->second);
    require_finite("param", leaf);
    nodes_.push_back(Node{"param", Tensor<T>(), {}, {}, {}, &leaf, recording_ && leaf.requires_grad});
    leaf_ids_.emplace(&leaf, nodes_.size() - 1);
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<std::size_t> inputs,
                BackwardFn backward) {
    return record(op, std::move(value), std::vector<std::size_t>(inputs), std::move(backward));
  }

  Var<T> record(std::string_view op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
    require_finite(op, value);
    bool needs = false;
    for (const std::size_t in : inputs) {
      if (in >= nodes_.size()) throw ContractError("tape input id out of order in op " + std::string(op));
      needs = needs || nodes_[in].needs_grad;
    }
    needs = needs && recording_;
    Node node{std::string(op), std::move(value), std::move(inputs), {}, {}, nullptr, needs};
    if (needs) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Gradient buffer of a node, allocated zeroed on first use.
  std::span<T> grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), T{0});
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (loss.valid() && &loss.tape() != this) throw ContractError("loss belongs to a different tape");
    if (consumed_) throw ContractError("tape reuse: backward already ran on this tape; rebuild the forward pass");
    if (!recording_) throw ContractError("backward on a tape that does not record gradients");
    const Tensor<T>& lv = value(loss.id());
    if (lv.size() != 1) throw DimensionError("backward needs a scalar loss, got shape " + to_string(lv.shape()));
    consumed_ = true;
    if (nodes_[loss.id()].needs_grad) {
      grad(loss.id())[0] = T{1};
      for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.empty()) n.backward(*this, i, n.grad);
      }
    }
    for (Node& n : nodes_) {
      if (n.leaf == nullptr || !n.needs_grad) continue;
      if (n.grad.empty()) {
        n.leaf->grad = std::vector<T>(n.leaf->size(), T{0});
      } else {
        n.leaf->grad = std::move(n.grad);
      }
    }
  }

 private:
  static void require_finite(std::string_view op, const Tensor<T>& value) {
    if (!value.all_finite()) throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> leaf_ids_;
  bool recording_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
void require_matrix(std::string_view op, const Var<T>& v) {
  if (!v.value().is_matrix()) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + to_string(v.shape()));
  }
}

template <typename T>
void require_same_shape(std::string_view op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

template <typename T>
void require_same_tape(std::string_view op, const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
}

template <typename T>
ConstMatrixView<T> view(const Tensor<T>& t) {
  return ConstMatrixView<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                            static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatrixView<T> view(std::span<T> data, std::size_t rows, std::size_t cols) {
  return MatrixView<T>(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Uniform double in [0, 1) from 53 random bits; independent of the standard
// library's distribution implementations.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace detail

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  detail::require_same_tape("matmul", a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> out({m, n});
  detail::view(out.data(), m, n).noalias() = detail::view(a.value()) * detail::view(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<T>& tape, std::size_t, std::span<const T> g) {
    ConstMatrixView<T> gm(g.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (tape.needs_grad(ia)) {
      detail::view(tape.grad(ia), m, k).noalias() += gm * detail::view(tape.value(ib)).transpose();
    }
    if (tape.needs_grad(ib)) {
      detail::view(tape.grad(ib), k, n).noalias() += detail::view(tape.value(ia)).transpose() * gm;
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape("add", a, b);
  detail::require_same_shape("add", a, b);
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {ia, ib}, [ia, ib](Tape<T>& tape, std::size_t, std::span<const T> g) {
    for (const std::size_t id : {ia, ib}) {
      if (!tape.needs_grad(id)) continue;
      auto dst = tape.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

// a (n x d) plus a 1 x d row broadcast over every row.
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  detail::require_matrix("add_row", a);
  detail::require_same_tape("add_row", a, row);
  if (row.value().size() != a.cols()) {
    throw DimensionError("add_row: row of shape " + to_string(row.shape()) + " cannot broadcast over " +
                         to_string(a.shape()));
  }
  const std::size_t n = a.rows(), d = a.cols();
  Tensor<T> out = a.value();
  const auto rv = row.value().data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += rv[c];
  const std::size_t ia = a.id(), ib = row.id();
  return a.tape().record("add_row", std::move(out), {ia, ib}, [ia, ib, n, d](Tape<T>& tape, std::size_t, std::span<const T> g) {
    if (tape.needs_grad(ia)) {
      auto dst = tape.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (tape.needs_grad(ib)) {
      auto dst = tape.grad(ib);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) dst[c] += g[r * d + c];
    }
  });
}

// Elementwise product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape("mul", a, b);
  detail::require_same_shape("mul", a, b);
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(out), {ia, ib}, [ia, ib](Tape<T>& tape, std::size_t, std::span<const T> g) {
    if (tape.needs_grad(ia)) {
      auto dst = tape.grad(ia);
      const auto bv = tape.value(ib).data();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * bv[i];
    }
    if (tape.needs_grad(ib)) {
      auto dst = tape.grad(ib);
      const auto av = tape.value(ia).data();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record("scale", std::move(out), {ia}, [ia, factor](Tape<T>& tape, std::size_t, std::span<const T> g) {
    auto dst = tape.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T total{0};
  for (const T v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor<T>::scalar(total), {ia}, [ia](Tape<T>& tape, std::size_t, std::span<const T> g) {
    auto dst = tape.grad(ia);
    for (T& v : dst) v += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.value().size()));
}

// Row-wise softmax with max subtraction.
template <typename T>
Var<T> softmax(const Var<T>& a) {
  detail::require_matrix("softmax", a);
  const std::size_t n = a.rows(), d = a.cols();
  Tensor<T> out = a.value();
  for (std::size_t r = 0; r < n; ++r) {
    T* row = out.data().data() + r * d;
    const T mx = *std::max_element(row, row + d);
    T total{0};
    for (std::size_t c = 0; c < d; ++c) total += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < d; ++c) row[c] /= total;
  }
  const std::size_t ia = a.id();
  return a.tape().record("softmax", std::move(out), {ia}, [ia, n, d](Tape<T>& tape, std::size_t self, std::span<const T> g) {
    const auto y = tape.value(self).data();
    auto dst = tape.grad(ia);
    for (std::size_t r = 0; r < n; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * y[r * d + c];
      for (std::size_t c = 0; c < d; ++c) dst[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
    }
  });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = std::log(v);
  const std::size_t ia = a.id();
  return a.tape().record("log", std::move(out), {ia}, [ia](Tape<T>& tape, std::size_t, std::span<const T> g) {
    const auto x = tape.value(ia).data();
    auto dst = tape.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] / x[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  const std::size_t ia = a.id();
  return a.tape().record("relu", std::move(out), {ia}, [ia](Tape<T>& tape, std::size_t, std::span<const T> g) {
    const auto x = tape.value(ia).data();
    auto dst = tape.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T{0}) dst[i] += g[i];
  });
}

// Row-wise layer normalization with learned gain and bias (both 1 x d).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  detail::require_matrix("layer_norm", x);
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias of shape " + to_string(gain.shape()) + "/" +
                         to_string(bias.shape()) + " do not match width " + std::to_string(d));
  }
  Tensor<T> out({n, d});
  std::vector<T> xhat(n * d), inv_std(n);
  const auto xv = x.value().data();
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = xv.data() + r * d;
    T mu{0};
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (row[c] - mu) * inv_std[r];
      out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      "layer_norm", std::move(out), {ix, ig, ib},
      [ix, ig, ib, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& tape, std::size_t, std::span<const T> g) {
        if (tape.needs_grad(ig)) {
          auto dg = tape.grad(ig);
          for (std::size_t i = 0; i < n * d; ++i) dg[i % d] += g[i] * xhat[i];
        }
        if (tape.needs_grad(ib)) {
          auto db = tape.grad(ib);
          for (std::size_t i = 0; i < n * d; ++i) db[i % d] += g[i];
        }
        if (tape.needs_grad(ix)) {
          const auto gv = tape.value(ig).data();
          auto dx = tape.grad(ix);
          std::vector<T> dxhat(d);
          for (std::size_t r = 0; r < n; ++r) {
            T mean_d{0}, mean_dx{0};
            for (std::size_t c = 0; c < d; ++c) {
              dxhat[c] = g[r * d + c] * gv[c];
              mean_d += dxhat[c];
              mean_dx += dxhat[c] * xhat[r * d + c];
            }
            mean_d /= static_cast<T>(d);
            mean_dx /= static_cast<T>(d);
            for (std::size_t c = 0; c < d; ++c) {
              dx[r * d + c] += inv_std[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
            }
          }
        }
      });
}

// Gathers rows of a vocabulary x d table.
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids) {
  detail::require_matrix("embedding", table);
  const std::size_t vocab = table.rows(), d = table.cols();
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  Tensor<T> out({ids.size(), d});
  const auto tv = table.value().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data().data() + i * d);
  }
  const std::size_t it = table.id();
  return table.tape().record(
      "embedding", std::move(out), {it},
      [it, d, idx = std::vector<std::int32_t>(ids.begin(), ids.end())](Tape<T>& tape, std::size_t, std::span<const T> g) {
        auto dst = tape.grad(it);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          T* row = dst.data() + static_cast<std::size_t>(idx[i]) * d;
          for (std::size_t c = 0; c < d; ++c) row[c] += g[i * d + c];
        }
      });
}

// Inverted dropout: kept entries are scaled by 1/(1-p). Identity when p == 0.
template <typename T>
Var<T> dropout(const Var<T>& a, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(p));
  if (p == 0.0) return a;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> out = a.value();
  std::vector<T> mask(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = detail::unit_uniform(rng) >= p ? keep_scale : T{0};
    out[i] *= mask[i];
  }
  const std::size_t ia = a.id();
  return a.tape().record("dropout", std::move(out), {ia}, [ia, mask = std::move(mask)](Tape<T>& tape, std::size_t, std::span<const T> g) {
    auto dst = tape.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * mask[i];
  });
}

// Stacks matrices of equal width vertically.
template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t n = 0;
  std::vector<std::size_t> ids, offsets;
  for (const Var<T>& p : parts) {
    detail::require_matrix("concat_rows", p);
    detail::require_same_tape("concat_rows", parts[0], p);
    if (p.cols() != d) {
      throw DimensionError("concat_rows: width mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
    }
    ids.push_back(p.id());
    offsets.push_back(n * d);
    n += p.rows();
  }
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto src = parts[i].value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[i]));
  }
  return parts[0].tape().record("concat_rows", std::move(out), ids, [ids, offsets](Tape<T>& tape, std::size_t, std::span<const T> g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!tape.needs_grad(ids[i])) continue;
      auto dst = tape.grad(ids[i]);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g[offsets[i] + j];
    }
  });
}

template <typename T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  return concat_rows(std::span<const Var<T>>(parts.begin(), parts.size()));
}

// Row gather; an index may repeat, in which case gradients add up.
template <typename T>
Var<T> take_rows(const Var<T>& a, std::span<const std::size_t> rows) {
  detail::require_matrix("take_rows", a);
  if (rows.empty()) throw DimensionError("take_rows: empty row list");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor<T> out({rows.size(), d});
  const auto av = a.value().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw DimensionError("take_rows: row " + std::to_string(rows[i]) + " of " + to_string(a.shape()));
    std::copy_n(av.data() + rows[i] * d, d, out.data().data() + i * d);
  }
  const std::size_t ia = a.id();
  return a.tape().record("take_rows", std::move(out), {ia},
                         [ia, d, idx = std::vector<std::size_t>(rows.begin(), rows.end())](Tape<T>& tape, std::size_t, std::span<const T> g) {
                           auto dst = tape.grad(ia);
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t c = 0; c < d; ++c) dst[idx[i] * d + c] += g[i * d + c];
                         });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  detail::require_matrix("transpose", a);
  const std::size_t n = a.rows(), d = a.cols();
  Tensor<T> out({d, n});
  detail::view(out.data(), d, n) = detail::view(a.value()).transpose();
  const std::size_t ia = a.id();
  return a.tape().record("transpose", std::move(out), {ia}, [ia, n, d](Tape<T>& tape, std::size_t, std::span<const T> g) {
    detail::view(tape.grad(ia), n, d) += ConstMatrixView<T>(g.data(), static_cast<Eigen::Index>(d),
                                                            static_cast<Eigen::Index>(n)).transpose();
  });
}

// Replaces entries whose mask byte is nonzero with a constant; those entries
// receive no gradient.
template <typename T>
Var<T> masked_fill(const Var<T>& a, std::span<const std::uint8_t> mask, T fill) {
  if (mask.size() != a.value().size()) {
    throw DimensionError("masked_fill: mask of " + std::to_string(mask.size()) + " entries for shape " +
                         to_string(a.shape()));
  }
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = fill;
  const std::size_t ia = a.id();
  return a.tape().record("masked_fill", std::move(out), {ia},
                         [ia, m = std::vector<std::uint8_t>(mask.begin(), mask.end())](Tape<T>& tape, std::size_t, std::span<const T> g) {
                           auto dst = tape.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (!m[i]) dst[i] += g[i];
                         });
}

inline constexpr std::int32_t kNoIgnore = -1;

// Mean negative log-likelihood over rows whose target differs from
// ignore_index. Row-wise log-softmax is computed with max subtraction.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets, std::int32_t ignore_index = kNoIgnore) {
  detail::require_matrix("cross_entropy", logits);
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + to_string(logits.shape()));
  }
  const auto lv = logits.value().data();
  std::vector<T> probs(n * vocab, T{0});
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] == ignore_index) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                           std::to_string(vocab) + ")");
    }
    const T* row = lv.data() + r * vocab;
    const T mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    const double log_z = std::log(z);
    for (std::size_t c = 0; c < vocab; ++c) {
      probs[r * vocab + c] = static_cast<T>(std::exp(static_cast<double>(row[c] - mx) - log_z));
    }
    total += log_z - static_cast<double>(row[static_cast<std::size_t>(targets[r])] - mx);
    ++counted;
  }
  if (counted == 0) throw NumericError("cross_entropy: every position is ignored, mean is undefined");
  const T inv = static_cast<T>(1.0 / static_cast<double>(counted));
  const std::size_t il = logits.id();
  return logits.tape().record(
      "cross_entropy", Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(counted))), {il},
      [il, vocab, inv, ignore_index, probs = std::move(probs),
       tg = std::vector<std::int32_t>(targets.begin(), targets.end())](Tape<T>& tape, std::size_t, std::span<const T> g) {
        auto dst = tape.grad(il);
        const T s = g[0] * inv;
        for (std::size_t r = 0; r < tg.size(); ++r) {
          if (tg[r] == ignore_index) continue;
          for (std::size_t c = 0; c < vocab; ++c) dst[r * vocab + c] += s * probs[r * vocab + c];
          dst[r * vocab + static_cast<std::size_t>(tg[r])] -= s;
        }
      });
}

// Layout of a batched multi-head attention call. Queries of sequence b
// occupy rows [b*query_len, (b+1)*query_len); keys and values of sequence b
// occupy rows [b*key_len, (b+1)*key_len).
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  std::size_t heads = 1;
  bool causal = false;               // query i sees keys j <= i
  std::vector<std::uint8_t> key_mask;  // batch*key_len entries, 1 = visible; empty = all visible
};

// Fused scaled dot-product attention over all heads. Rows with no visible
// key produce zeros.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionLayout& layout) {
  detail::require_same_tape("attention", q, k);
  detail::require_same_tape("attention", q, v);
  detail::require_same_shape("attention", k, v);
  const std::size_t B = layout.batch, Lq = layout.query_len, Lk = layout.key_len, H = layout.heads;
  const std::size_t d = q.cols();
  if (q.rows() != B * Lq || k.rows() != B * Lk || k.cols() != d) {
    throw DimensionError("attention: q " + to_string(q.shape()) + " / k " + to_string(k.shape()) +
                         " inconsistent with batch " + std::to_string(B) + ", lengths " + std::to_string(Lq) + "/" +
                         std::to_string(Lk));
  }
  if (H == 0 || d % H != 0) throw DimensionError("attention: width " + std::to_string(d) + " not divisible by heads");
  if (!layout.key_mask.empty() && layout.key_mask.size() != B * Lk) {
    throw DimensionError("attention: key mask has " + std::to_string(layout.key_mask.size()) + " entries, expected " +
                         std::to_string(B * Lk));
  }
  const std::size_t dh = d / H;
  const T scale_factor = T{1} / std::sqrt(static_cast<T>(dh));
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
  const auto Lqi = static_cast<Eigen::Index>(Lq), Lki = static_cast<Eigen::Index>(Lk), dhi = static_cast<Eigen::Index>(dh);

  auto visible = [&layout, Lk](std::size_t b, std::size_t i, std::size_t j) {
    if (layout.causal && j > i) return false;
    return layout.key_mask.empty() || layout.key_mask[b * Lk + j] != 0;
  };

  Tensor<T> out({B * Lq, d});
  std::vector<T> probs(B * H * Lq * Lk, T{0});
  RowMatrix<T> scores(Lqi, Lki);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      ConstStridedView<T> qb(q.value().data().data() + b * Lq * d + h * dh, Lqi, dhi, stride);
      ConstStridedView<T> kb(k.value().data().data() + b * Lk * d + h * dh, Lki, dhi, stride);
      ConstStridedView<T> vb(v.value().data().data() + b * Lk * d + h * dh, Lki, dhi, stride);
      scores.noalias() = (qb * kb.transpose()) * scale_factor;
      MatrixView<T> p(probs.data() + (b * H + h) * Lq * Lk, Lqi, Lki);
      for (std::size_t i = 0; i < Lq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < Lk; ++j)
          if (visible(b, i, j)) mx = std::max(mx, scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        T total{0};
        for (std::size_t j = 0; j < Lk; ++j) {
          if (!visible(b, i, j)) continue;
          const T e = std::exp(scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - mx);
          p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = e;
          total += e;
        }
        p.row(static_cast<Eigen::Index>(i)) /= total;
      }
      StridedView<T> ob(out.data().data() + b * Lq * d + h * dh, Lqi, dhi, stride);
      ob.noalias() = p * vb;
    }
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      "attention", std::move(out), {iq, ik, iv},
      [iq, ik, iv, B, Lq, Lk, H, d, dh, scale_factor, probs = std::move(probs)](Tape<T>& tape, std::size_t, std::span<const T> g) {
        const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
        const auto Lqi = static_cast<Eigen::Index>(Lq), Lki = static_cast<Eigen::Index>(Lk), dhi = static_cast<Eigen::Index>(dh);
        const bool gq = tape.needs_grad(iq), gk = tape.needs_grad(ik), gv = tape.needs_grad(iv);
        T* dq = gq ? tape.grad(iq).data() : nullptr;
        T* dk = gk ? tape.grad(ik).data() : nullptr;
        T* dv = gv ? tape.grad(iv).data() : nullptr;
        RowMatrix<T> dp(Lqi, Lki), ds(Lqi, Lki);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t qoff = b * Lq * d + h * dh, koff = b * Lk * d + h * dh;
            ConstStridedView<T> gb(g.data() + qoff, Lqi, dhi, stride);
            ConstStridedView<T> qb(tape.value(iq).data().data() + qoff, Lqi, dhi, stride);
            ConstStridedView<T> kb(tape.value(ik).data().data() + koff, Lki, dhi, stride);
            ConstStridedView<T> vb(tape.value(iv).data().data() + koff, Lki, dhi, stride);
            ConstMatrixView<T> p(probs.data() + (b * H + h) * Lq * Lk, Lqi, Lki);
            if (gv) StridedView<T>(dv + koff, Lki, dhi, stride).noalias() += p.transpose() * gb;
            if (!gq && !gk) continue;
            dp.noalias() = gb * vb.transpose();
            const auto row_dot = (dp.array() * p.array()).rowwise().sum().eval();
            ds = (p.array() * (dp.array().colwise() - row_dot)) * scale_factor;
            if (gq) StridedView<T>(dq + qoff, Lqi, dhi, stride).noalias() += ds * kb;
            if (gk) StridedView<T>(dk + koff, Lki, dhi, stride).noalias() += ds.transpose() * qb;
          }
        }
      });
}

}  // namespace dodeca::tensor
