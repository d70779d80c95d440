#include "lpt/tape.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numeric>

namespace lpt {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::MatMulNT: return "matmul_nt";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddRowVector: return "add_row_vector";
    case OpKind::AddColVector: return "add_col_vector";
    case OpKind::Relu: return "relu";
    case OpKind::Gelu: return "gelu";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::EmbeddingLookup: return "embedding_lookup";
    case OpKind::Reshape: return "reshape";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::Sum: return "sum";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::BucketPool: return "bucket_pool";
    case OpKind::Attention: return "attention";
    case OpKind::LayerBoundary: return "layer_boundary";
  }
  return "unknown";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

template <typename T>
CMap<T> as_matrix(const Tensor<T>& x) {
  return CMap<T>(x.values().data(), static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.cols()));
}

template <typename T>
CMap<T> as_matrix(std::span<const T> v, std::size_t r, std::size_t c) {
  return CMap<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T>
MMap<T> as_matrix(T* p, std::size_t r, std::size_t c) {
  return MMap<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_rank2(std::string_view op, const Shape& s) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_string(s));
  }
}

void require_same_shape(std::string_view op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape bookkeeping

template <std::floating_point T>
bool Tape<T>::any_recorded(std::initializer_list<const Tensor<T>*> xs) const {
  if (!recording_) return false;
  return std::any_of(xs.begin(), xs.end(), [](const Tensor<T>* x) { return x->recorded(); });
}

template <std::floating_point T>
Tensor<T> Tape<T>::record(OpKind kind, std::vector<T> values, Shape shape,
                          std::initializer_list<const Tensor<T>*> operands, BackwardFn fn,
                          std::size_t extra_saved_bytes) {
  Node node{kind, {}, shape, std::move(fn), values.size() * sizeof(T) + extra_saved_bytes, {}};
  node.operands.reserve(operands.size());
  for (const Tensor<T>* x : operands) node.operands.push_back(x->node());
  Tensor<T> out(std::move(shape), std::move(values));
  out.node_ = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(node));
  return out;
}

template <std::floating_point T>
std::size_t Tape<T>::activation_bytes() const noexcept {
  std::size_t total = 0;
  for (const Node& n : nodes_) total += n.saved_bytes;
  return total;
}

template <std::floating_point T>
std::size_t Tape<T>::count(OpKind kind) const noexcept {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [kind](const Node& n) { return n.kind == kind; }));
}

template <std::floating_point T>
Tensor<T> Tape<T>::parameter(std::string name, const Tensor<T>& value) {
  Tensor<T> out = detach(value);
  if (!recording_) return out;
  out.node_ = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(Node{OpKind::Leaf, {}, value.shape(), {}, 0, std::move(name)});
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <std::floating_point T>
Tensor<T> Tape<T>::matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2("matmul", a.shape());
  require_rank2("matmul", b.shape());
  if (a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t r = a.shape()[0], s = a.shape()[1], t = b.shape()[1];
  std::vector<T> out(r * t);
  as_matrix(out.data(), r, t).noalias() = as_matrix(a) * as_matrix(b);
  if (!any_recorded({&a, &b})) return constant(std::move(out), {r, t});
  return record(OpKind::MatMul, std::move(out), {r, t}, {&a, &b},
                [a, b, r, s, t](std::span<const T> up, std::span<T* const> g) {
                  auto dc = as_matrix(up, r, t);
                  if (g[0]) as_matrix(g[0], r, s).noalias() += dc * as_matrix(b).transpose();
                  if (g[1]) as_matrix(g[1], s, t).noalias() += as_matrix(a).transpose() * dc;
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2("matmul_nt", a.shape());
  require_rank2("matmul_nt", b.shape());
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  const std::size_t r = a.shape()[0], s = a.shape()[1], t = b.shape()[0];
  std::vector<T> out(r * t);
  as_matrix(out.data(), r, t).noalias() = as_matrix(a) * as_matrix(b).transpose();
  if (!any_recorded({&a, &b})) return constant(std::move(out), {r, t});
  return record(OpKind::MatMulNT, std::move(out), {r, t}, {&a, &b},
                [a, b, r, s, t](std::span<const T> up, std::span<T* const> g) {
                  auto dc = as_matrix(up, r, t);
                  if (g[0]) as_matrix(g[0], r, s).noalias() += dc * as_matrix(b);
                  if (g[1]) as_matrix(g[1], t, s).noalias() += dc.transpose() * as_matrix(a);
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::transpose(const Tensor<T>& x) {
  require_rank2("transpose", x.shape());
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<T> out(r * c);
  as_matrix(out.data(), c, r) = as_matrix(x).transpose();
  if (!any_recorded({&x})) return constant(std::move(out), {c, r});
  return record(OpKind::Transpose, std::move(out), {c, r}, {&x}, [r, c](std::span<const T> up, std::span<T* const> g) {
    as_matrix(g[0], r, c) += as_matrix(up, c, r).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <std::floating_point T>
Tensor<T> Tape<T>::add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  if (!any_recorded({&a, &b})) return constant(std::move(out), a.shape());
  return record(OpKind::Add, std::move(out), a.shape(), {&a, &b}, [](std::span<const T> up, std::span<T* const> g) {
    for (T* gi : g) {
      if (!gi) continue;
      for (std::size_t i = 0; i < up.size(); ++i) gi[i] += up[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> Tape<T>::mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  if (!any_recorded({&a, &b})) return constant(std::move(out), a.shape());
  return record(OpKind::Mul, std::move(out), a.shape(), {&a, &b},
                [a, b](std::span<const T> up, std::span<T* const> g) {
                  if (g[0])
                    for (std::size_t i = 0; i < up.size(); ++i) g[0][i] += up[i] * b[i];
                  if (g[1])
                    for (std::size_t i = 0; i < up.size(); ++i) g[1][i] += up[i] * a[i];
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  if (!any_recorded({&x})) return constant(std::move(out), x.shape());
  return record(OpKind::Scale, std::move(out), x.shape(), {&x},
                [factor](std::span<const T> up, std::span<T* const> g) {
                  for (std::size_t i = 0; i < up.size(); ++i) g[0][i] += up[i] * factor;
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::add_row_vector(const Tensor<T>& x, const Tensor<T>& b) {
  require_rank2("add_row_vector", x.shape());
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (b.numel() != c) {
    throw DimensionError("add_row_vector: bias " + shape_string(b.shape()) + " does not match columns of " +
                         shape_string(x.shape()));
  }
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + b[j];
  if (!any_recorded({&x, &b})) return constant(std::move(out), x.shape());
  return record(OpKind::AddRowVector, std::move(out), x.shape(), {&x, &b},
                [r, c](std::span<const T> up, std::span<T* const> g) {
                  if (g[0])
                    for (std::size_t i = 0; i < up.size(); ++i) g[0][i] += up[i];
                  if (g[1])
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) g[1][j] += up[i * c + j];
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::add_col_vector(const Tensor<T>& x, const Tensor<T>& b) {
  require_rank2("add_col_vector", x.shape());
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (b.numel() != r) {
    throw DimensionError("add_col_vector: bias " + shape_string(b.shape()) + " does not match rows of " +
                         shape_string(x.shape()));
  }
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + b[i];
  if (!any_recorded({&x, &b})) return constant(std::move(out), x.shape());
  return record(OpKind::AddColVector, std::move(out), x.shape(), {&x, &b},
                [r, c](std::span<const T> up, std::span<T* const> g) {
                  if (g[0])
                    for (std::size_t i = 0; i < up.size(); ++i) g[0][i] += up[i];
                  if (g[1])
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) g[1][i] += up[i * c + j];
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (!any_recorded({&x})) return constant(std::move(out), x.shape());
  return record(OpKind::Relu, std::move(out), x.shape(), {&x}, [x](std::span<const T> up, std::span<T* const> g) {
    // Subgradient at exactly zero is zero.
    for (std::size_t i = 0; i < up.size(); ++i)
      if (x[i] > T(0)) g[0][i] += up[i];
  });
}

template <std::floating_point T>
Tensor<T> Tape<T>::gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  if (!any_recorded({&x})) return constant(std::move(out), x.shape());
  return record(OpKind::Gelu, std::move(out), x.shape(), {&x}, [x](std::span<const T> up, std::span<T* const> g) {
    for (std::size_t i = 0; i < up.size(); ++i) {
      const T v = x[i];
      const T t = std::tanh(kC * (v + kA * v * v * v));
      const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
      g[0][i] += up[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise

template <std::floating_point T>
Tensor<T> Tape<T>::softmax_rows(const Tensor<T>& x) {
  require_rank2("softmax_rows", x.shape());
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.values().data() + i * c;
    T* o = out.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  if (!any_recorded({&x})) return constant(std::move(out), x.shape());
  auto probs = std::make_shared<std::vector<T>>(out);
  return record(OpKind::SoftmaxRows, std::move(out), x.shape(), {&x},
                [probs, r, c](std::span<const T> up, std::span<T* const> g) {
                  for (std::size_t i = 0; i < r; ++i) {
                    const T* p = probs->data() + i * c;
                    const T* u = up.data() + i * c;
                    T dot = 0;
                    for (std::size_t j = 0; j < c; ++j) dot += p[j] * u[j];
                    for (std::size_t j = 0; j < c; ++j) g[0][i * c + j] += p[j] * (u[j] - dot);
                  }
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_rank2("layer_norm", x.shape());
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" + shape_string(bias.shape()) +
                         " do not match " + shape_string(x.shape()));
  }
  std::vector<T> normalized(r * c), inv_std(r), out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.values().data() + i * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      normalized[i * c + j] = (row[j] - mean) * inv_std[i];
      out[i * c + j] = normalized[i * c + j] * gain[j] + bias[j];
    }
  }
  if (!any_recorded({&x, &gain, &bias})) return constant(std::move(out), x.shape());
  const std::size_t extra = (normalized.size() + inv_std.size()) * sizeof(T);
  return record(
      OpKind::LayerNorm, std::move(out), x.shape(), {&x, &gain, &bias},
      [gain, xhat = std::move(normalized), inv_std = std::move(inv_std), r, c](std::span<const T> up,
                                                                              std::span<T* const> g) {
        for (std::size_t i = 0; i < r; ++i) {
          const T* u = up.data() + i * c;
          const T* xh = xhat.data() + i * c;
          if (g[1])
            for (std::size_t j = 0; j < c; ++j) g[1][j] += u[j] * xh[j];
          if (g[2])
            for (std::size_t j = 0; j < c; ++j) g[2][j] += u[j];
          if (!g[0]) continue;
          T mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const T d = u[j] * gain[j];
            mean_d += d;
            mean_dx += d * xh[j];
          }
          mean_d /= T(c);
          mean_dx /= T(c);
          for (std::size_t j = 0; j < c; ++j)
            g[0][i * c + j] += inv_std[i] * (u[j] * gain[j] - mean_d - xh[j] * mean_dx);
        }
      },
      extra);
}

template <std::floating_point T>
Tensor<T> Tape<T>::embedding_lookup(const Tensor<T>& table, std::span<const std::size_t> ids) {
  require_rank2("embedding_lookup", table.shape());
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw DimensionError("embedding_lookup: id " + std::to_string(ids[i]) + " outside table " +
                           shape_string(table.shape()));
    }
    std::copy_n(table.values().data() + ids[i] * d, d, out.data() + i * d);
  }
  const Shape shape{ids.size(), d};
  if (!any_recorded({&table})) return constant(std::move(out), shape);
  return record(OpKind::EmbeddingLookup, std::move(out), shape, {&table},
                [idx = std::vector<std::size_t>(ids.begin(), ids.end()), d](std::span<const T> up,
                                                                            std::span<T* const> g) {
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j) g[0][idx[i] * d + j] += up[i * d + j];
                });
}

// ---------------------------------------------------------------------------
// Structural

template <std::floating_point T>
Tensor<T> Tape<T>::reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  if (!any_recorded({&x})) return constant(std::move(out), std::move(shape));
  return record(OpKind::Reshape, std::move(out), std::move(shape), {&x},
                [](std::span<const T> up, std::span<T* const> g) {
                  for (std::size_t i = 0; i < up.size(); ++i) g[0][i] += up[i];
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::concat_rows(const Tensor<T>& top, const Tensor<T>& bottom) {
  require_rank2("concat_rows", top.shape());
  require_rank2("concat_rows", bottom.shape());
  if (top.shape()[1] != bottom.shape()[1]) {
    throw DimensionError("concat_rows: column mismatch " + shape_string(top.shape()) + " vs " +
                         shape_string(bottom.shape()));
  }
  const std::size_t split = top.numel();
  std::vector<T> out;
  out.reserve(top.numel() + bottom.numel());
  out.insert(out.end(), top.values().begin(), top.values().end());
  out.insert(out.end(), bottom.values().begin(), bottom.values().end());
  const Shape shape{top.shape()[0] + bottom.shape()[0], top.shape()[1]};
  if (!any_recorded({&top, &bottom})) return constant(std::move(out), shape);
  return record(OpKind::ConcatRows, std::move(out), shape, {&top, &bottom},
                [split](std::span<const T> up, std::span<T* const> g) {
                  if (g[0])
                    for (std::size_t i = 0; i < split; ++i) g[0][i] += up[i];
                  if (g[1])
                    for (std::size_t i = split; i < up.size(); ++i) g[1][i - split] += up[i];
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank2("slice_rows", x.shape());
  if (begin + count > x.shape()[0]) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_string(x.shape()));
  }
  const std::size_t c = x.shape()[1];
  std::vector<T> out(x.values().begin() + begin * c, x.values().begin() + (begin + count) * c);
  if (!any_recorded({&x})) return constant(std::move(out), {count, c});
  return record(OpKind::SliceRows, std::move(out), {count, c}, {&x},
                [offset = begin * c](std::span<const T> up, std::span<T* const> g) {
                  for (std::size_t i = 0; i < up.size(); ++i) g[0][offset + i] += up[i];
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  if (!any_recorded({&x})) return constant({total}, {1});
  return record(OpKind::Sum, {total}, {1}, {&x}, [n = x.numel()](std::span<const T> up, std::span<T* const> g) {
    for (std::size_t i = 0; i < n; ++i) g[0][i] += up[0];
  });
}

template <std::floating_point T>
Tensor<T> Tape<T>::cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  require_rank2("cross_entropy", logits.shape());
  const std::size_t r = logits.shape()[0], c = logits.shape()[1];
  if (targets.size() != r || r == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  }
  auto probs = std::make_shared<std::vector<T>>(r * c);
  T loss = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] >= c) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " outside " + std::to_string(c) +
                           " classes");
    }
    const T* row = logits.values().data() + i * c;
    T* p = probs->data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) p[j] /= z;
    loss += -(row[targets[i]] - mx - std::log(z));
  }
  loss /= T(r);
  if (!any_recorded({&logits})) return constant({loss}, {1});
  return record(
      OpKind::CrossEntropy, {loss}, {1}, {&logits},
      [probs, t = std::vector<std::size_t>(targets.begin(), targets.end()), r, c](std::span<const T> up,
                                                                                  std::span<T* const> g) {
        const T s = up[0] / T(r);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            g[0][i * c + j] += s * ((*probs)[i * c + j] - (j == t[i] ? T(1) : T(0)));
      },
      probs->size() * sizeof(T));
}

template <std::floating_point T>
Tensor<T> Tape<T>::bucket_pool(const Tensor<T>& x, std::size_t length, PoolMode mode, std::size_t valid) {
  require_rank2("bucket_pool", x.shape());
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (valid > n) {
    throw DimensionError("bucket_pool: valid count " + std::to_string(valid) + " exceeds sequence length " +
                         std::to_string(n));
  }
  if (length == 0 || valid < length) {
    throw UnsupportedInput("bucket_pool: cannot pool " + std::to_string(valid) + " positions into a prompt of length " +
                           std::to_string(length) + "; shorten the prompt or lengthen the input");
  }
  std::vector<std::size_t> starts(length + 1);
  for (std::size_t i = 0; i <= length; ++i) starts[i] = i * valid / length;

  std::vector<T> out(m * length);
  std::vector<std::size_t> argmax(mode == PoolMode::Max ? m * length : 0);
  for (std::size_t row = 0; row < m; ++row) {
    const T* xr = x.values().data() + row * n;
    for (std::size_t b = 0; b < length; ++b) {
      const std::size_t lo = starts[b], hi = starts[b + 1];
      if (mode == PoolMode::Avg) {
        T acc = 0;
        for (std::size_t j = lo; j < hi; ++j) acc += xr[j];
        out[row * length + b] = acc / T(hi - lo);
      } else {
        std::size_t best = lo;
        for (std::size_t j = lo + 1; j < hi; ++j)
          if (xr[j] > xr[best]) best = j;  // strict: first occurrence wins ties
        argmax[row * length + b] = best;
        out[row * length + b] = xr[best];
      }
    }
  }
  if (!any_recorded({&x})) return constant(std::move(out), {m, length});
  return record(OpKind::BucketPool, std::move(out), {m, length}, {&x},
                [starts = std::move(starts), argmax = std::move(argmax), mode, m, n, length](std::span<const T> up,
                                                                                            std::span<T* const> g) {
                  for (std::size_t row = 0; row < m; ++row) {
                    for (std::size_t b = 0; b < length; ++b) {
                      const T u = up[row * length + b];
                      if (mode == PoolMode::Avg) {
                        const std::size_t lo = starts[b], hi = starts[b + 1];
                        const T share = u / T(hi - lo);
                        for (std::size_t j = lo; j < hi; ++j) g[0][row * n + j] += share;
                      } else {
                        g[0][row * n + argmax[row * length + b]] += u;
                      }
                    }
                  }
                });
}

template <std::floating_point T>
Tensor<T> Tape<T>::attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const ValidMask& key_mask,
                             std::size_t n_heads) {
  require_rank2("attention", q.shape());
  require_same_shape("attention", k.shape(), v.shape());
  if (q.shape()[1] != k.shape()[1]) {
    throw DimensionError("attention: query " + shape_string(q.shape()) + " vs key " + shape_string(k.shape()));
  }
  const std::size_t n = q.shape()[0], nk = k.shape()[0], d = q.shape()[1];
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible into " + std::to_string(n_heads) +
                         " heads");
  }
  if (key_mask.size() != nk) {
    throw DimensionError("attention: mask of length " + std::to_string(key_mask.size()) + " for " +
                         std::to_string(nk) + " keys");
  }
  const std::size_t dh = d / n_heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const auto qi = static_cast<Eigen::Index>(dh);

  auto probs = std::make_shared<std::vector<T>>(n_heads * n * nk);
  std::vector<T> out(n * d);
  auto Q = as_matrix(q);
  auto K = as_matrix(k);
  auto V = as_matrix(v);
  auto O = as_matrix(out.data(), n, d);
  RowMat<T> scores(n, nk);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * dh);
    scores.noalias() = Q.middleCols(off, qi) * K.middleCols(off, qi).transpose();
    auto P = as_matrix(probs->data() + h * n * nk, n, nk);
    for (std::size_t i = 0; i < n; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < nk; ++j)
        if (key_mask[j]) mx = std::max(mx, scores(i, j) * scale);
      T z = 0;
      for (std::size_t j = 0; j < nk; ++j) {
        const T e = key_mask[j] ? std::exp(scores(i, j) * scale - mx) : T(0);
        P(i, j) = e;
        z += e;
      }
      if (z > T(0)) P.row(i) /= z;
    }
    O.middleCols(off, qi).noalias() = P * V.middleCols(off, qi);
  }
  last_attention_ = *probs;
  if (!any_recorded({&q, &k, &v})) return constant(std::move(out), {n, d});
  return record(
      OpKind::Attention, std::move(out), {n, d}, {&q, &k, &v},
      [q, k, v, probs, n, nk, d, dh, n_heads, scale](std::span<const T> up, std::span<T* const> g) {
        auto Q = as_matrix(q);
        auto K = as_matrix(k);
        auto V = as_matrix(v);
        auto dO = as_matrix(up, n, d);
        const auto qi = static_cast<Eigen::Index>(dh);
        RowMat<T> dP(n, nk), dS(n, nk);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto off = static_cast<Eigen::Index>(h * dh);
          auto P = as_matrix(std::span<const T>(probs->data() + h * n * nk, n * nk), n, nk);
          dP.noalias() = dO.middleCols(off, qi) * V.middleCols(off, qi).transpose();
          if (g[2]) as_matrix(g[2], nk, d).middleCols(off, qi).noalias() += P.transpose() * dO.middleCols(off, qi);
          const auto row_dot = (dP.array() * P.array()).rowwise().sum().eval();
          dS = (P.array() * (dP.array().colwise() - row_dot)).matrix() * scale;
          if (g[0]) as_matrix(g[0], n, d).middleCols(off, qi).noalias() += dS * K.middleCols(off, qi);
          if (g[1]) as_matrix(g[1], nk, d).middleCols(off, qi).noalias() += dS.transpose() * Q.middleCols(off, qi);
        }
      },
      probs->size() * sizeof(T));
}

template <std::floating_point T>
Tensor<T> Tape<T>::layer_boundary(const Tensor<T>& x, std::size_t layer) {
  if (!any_recorded({&x})) return x;
  std::vector<T> out(x.values().begin(), x.values().end());
  Tensor<T> y = record(OpKind::LayerBoundary, std::move(out), x.shape(), {&x},
                       [](std::span<const T> up, std::span<T* const> g) {
                         for (std::size_t i = 0; i < up.size(); ++i) g[0][i] += up[i];
                       });
  // The copy is an alias of the layer output, not a new activation.
  nodes_.back().saved_bytes = 0;
  nodes_.back().name = std::to_string(layer);
  return y;
}

// ---------------------------------------------------------------------------
// Backward

template <std::floating_point T>
Gradients<T> Tape<T>::backward(const Tensor<T>& loss) const {
  if (!loss.recorded()) throw ContractError("backward: loss is not recorded on the tape");
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  const NodeId root = *loss.node();
  if (root >= nodes_.size()) throw ContractError("backward: loss belongs to a different tape");

  std::vector<char> reachable(root + 1, 0);
  reachable[root] = 1;
  for (NodeId id = root + 1; id-- > 0;) {
    if (!reachable[id]) continue;
    for (const auto& op : nodes_[id].operands)
      if (op) reachable[*op] = 1;
  }

  std::vector<std::vector<T>> buffers(root + 1);
  buffers[root].assign(1, T(1));
  Gradients<T> result;
  std::vector<T*> operand_grads;
  for (NodeId id = root + 1; id-- > 0;) {
    if (!reachable[id]) continue;
    const Node& node = nodes_[id];
    if (node.kind == OpKind::Leaf) {
      result.leaves_[node.name] = id;
      continue;
    }
    if (node.kind == OpKind::LayerBoundary) ++result.layer_backward_count_;
    operand_grads.assign(node.operands.size(), nullptr);
    for (std::size_t i = 0; i < node.operands.size(); ++i) {
      const auto& op = node.operands[i];
      if (!op) continue;
      auto& buf = buffers[*op];
      if (buf.empty()) buf.assign(shape_numel(nodes_[*op].shape), T(0));
      operand_grads[i] = buf.data();
    }
    node.backward(buffers[id], operand_grads);
  }
  for (NodeId id = 0; id <= root; ++id) {
    if (!reachable[id]) continue;
    result.grads_.emplace(id, Tensor<T>(nodes_[id].shape, std::move(buffers[id])));
  }
  return result;
}

template <std::floating_point T>
const Tensor<T>& Gradients<T>::of(NodeId id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw ContractError("no gradient recorded for node " + std::to_string(id));
  return it->second;
}

template <std::floating_point T>
const Tensor<T>& Gradients<T>::of(const Tensor<T>& x) const {
  if (!x.node()) throw ContractError("tensor is a constant and has no gradient");
  return of(*x.node());
}

template <std::floating_point T>
std::set<NodeId> Gradients<T>::keys() const {
  std::set<NodeId> out;
  for (const auto& [id, _] : grads_) out.insert(id);
  return out;
}

template <std::floating_point T>
std::set<std::string> Gradients<T>::leaf_names() const {
  std::set<std::string> out;
  for (const auto& [name, _] : leaves_) out.insert(name);
  return out;
}

template <std::floating_point T>
const Tensor<T>& Gradients<T>::of_leaf(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) throw ContractError("no gradient for parameter '" + name + "'");
  return of(it->second);
}

template class Tape<float>;
template class Tape<double>;
template class Gradients<float>;
template class Gradients<double>;

}  // namespace lpt
