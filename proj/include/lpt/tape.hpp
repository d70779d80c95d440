#pragma once

#include <concepts>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lpt/tensor.hpp"

namespace lpt {

enum class OpKind {
  Leaf,
  MatMul,
  MatMulNT,
  Transpose,
  Add,
  Mul,
  Scale,
  AddRowVector,
  AddColVector,
  Relu,
  Gelu,
  SoftmaxRows,
  LayerNorm,
  EmbeddingLookup,
  Reshape,
  ConcatRows,
  SliceRows,
  Sum,
  CrossEntropy,
  BucketPool,
  Attention,
  LayerBoundary,
};

std::string_view op_name(OpKind kind);

enum class PoolMode { Avg, Max };

template <std::floating_point T>
class Gradients;

// Append-only record of differentiable operations.
//
// Operations run eagerly. An operation is recorded only while recording is
// enabled and at least one operand carries a node; otherwise the result is a
// constant. Gradients are computed by backward() without mutating the tape,
// so it can be called any number of times.
template <std::floating_point T>
class Tape {
 public:
  // Receives the upstream gradient and one pointer per operand. A pointer is
  // null when that operand is not recorded; otherwise the closure adds its
  // contribution to the buffer.
  using BackwardFn = std::function<void(std::span<const T> upstream, std::span<T* const> operand_grads)>;

  struct Node {
    OpKind kind;
    std::vector<std::optional<NodeId>> operands;
    Shape shape;
    BackwardFn backward;
    std::size_t saved_bytes = 0;
    std::string name;  // leaves only
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }

  // Bytes of activations retained for backward across all recorded nodes.
  std::size_t activation_bytes() const noexcept;
  std::size_t count(OpKind kind) const noexcept;

  // Registers `value` as a trainable leaf. The returned tensor shares storage.
  Tensor<T> parameter(std::string name, const Tensor<T>& value);

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
  // a · bᵀ
  Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> transpose(const Tensor<T>& x);
  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> scale(const Tensor<T>& x, T factor);
  // x[r×c] + b[c] broadcast over rows.
  Tensor<T> add_row_vector(const Tensor<T>& x, const Tensor<T>& b);
  // x[r×c] + b[r] broadcast over columns.
  Tensor<T> add_col_vector(const Tensor<T>& x, const Tensor<T>& b);
  Tensor<T> relu(const Tensor<T>& x);
  Tensor<T> gelu(const Tensor<T>& x);
  Tensor<T> softmax_rows(const Tensor<T>& x);
  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));
  Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::size_t> ids);
  Tensor<T> reshape(const Tensor<T>& x, Shape shape);
  Tensor<T> concat_rows(const Tensor<T>& top, const Tensor<T>& bottom);
  Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count);
  Tensor<T> sum(const Tensor<T>& x);
  // Mean over rows of -log softmax(logits[r])[targets[r]]. The logits are
  // whatever the caller restricted them to (e.g. verbalizer words only).
  Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets);
  // Pools x[m×n] along columns 0..valid-1 into `length` contiguous buckets;
  // bucket i covers [floor(i·valid/length), floor((i+1)·valid/length)).
  Tensor<T> bucket_pool(const Tensor<T>& x, std::size_t length, PoolMode mode, std::size_t valid);
  // Multi-head scaled dot-product attention; keys with mask 0 get zero weight.
  Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const ValidMask& key_mask,
                      std::size_t n_heads);
  // Identity that marks the output of a transformer layer. Each backward
  // execution through one of these is counted in Gradients::layer_backward_count.
  Tensor<T> layer_boundary(const Tensor<T>& x, std::size_t layer);

  // Attention probabilities of the most recent attention() call, heads×n×n.
  // Kept for inspection in tests and analysis; empty before the first call.
  const std::vector<T>& last_attention() const noexcept { return last_attention_; }

  Gradients<T> backward(const Tensor<T>& loss) const;

 private:
  bool any_recorded(std::initializer_list<const Tensor<T>*> xs) const;
  Tensor<T> record(OpKind kind, std::vector<T> values, Shape shape,
                   std::initializer_list<const Tensor<T>*> operands, BackwardFn fn, std::size_t extra_saved_bytes = 0);
  static Tensor<T> constant(std::vector<T> values, Shape shape) { return Tensor<T>(std::move(shape), std::move(values)); }

  std::vector<Node> nodes_;
  bool recording_ = true;
  std::vector<T> last_attention_;
};

// Result of Tape::backward: one gradient per recorded ancestor of the loss.
template <std::floating_point T>
class Gradients {
 public:
  bool contains(NodeId id) const { return grads_.contains(id); }
  bool has(const Tensor<T>& x) const { return x.node() && contains(*x.node()); }
  const Tensor<T>& of(NodeId id) const;
  const Tensor<T>& of(const Tensor<T>& x) const;

  std::set<NodeId> keys() const;
  // Names of trainable leaves that received a gradient.
  std::set<std::string> leaf_names() const;
  const Tensor<T>& of_leaf(const std::string& name) const;

  std::size_t layer_backward_count() const noexcept { return layer_backward_count_; }

 private:
  friend class Tape<T>;
  std::map<NodeId, Tensor<T>> grads_;
  std::map<std::string, NodeId> leaves_;
  std::size_t layer_backward_count_ = 0;
};

// Disables recording for the lifetime of the guard.
template <std::floating_point T>
class NoRecordScope {
 public:
  explicit NoRecordScope(Tape<T>& tape) : tape_(tape), previous_(tape.recording()) { tape_.set_recording(false); }
  ~NoRecordScope() { tape_.set_recording(previous_); }
  NoRecordScope(const NoRecordScope&) = delete;
  NoRecordScope& operator=(const NoRecordScope&) = delete;

 private:
  Tape<T>& tape_;
  bool previous_;
};

extern template class Tape<float>;
extern template class Tape<double>;
extern template class Gradients<float>;
extern template class Gradients<double>;

}  // namespace lpt
