#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mmclip/tensor.hpp"

namespace mmclip {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr; }
};

/// Explicit reverse-mode tape. Nodes are appended in evaluation order and
/// backward() walks them in reverse. Backward closures capture node ids, never
/// references, so the node vector may grow freely while recording.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  struct Seed {
    Var var;
    Tensor grad;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Borrowed constant; `value` must outlive the tape.
  Var constant_ref(const Tensor& value);
  Var variable(Tensor value);
  /// Borrowed leaf that accumulates a gradient; `value` must outlive the tape.
  Var variable_ref(const Tensor& value);

  /// Appends an op result. `fn` is kept only if some parent requires a grad.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward fn);
  Var record(Tensor value, std::span<const Var> parents, Backward fn);

  const Tensor& value(std::uint32_t id) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator for `id`, allocated as zeros on first use.
  Tensor& grad_mut(std::uint32_t id);
  const Tensor& grad_of(std::uint32_t id) const { return nodes_[id].grad; }
  /// Gradient of the last backward pass; zeros if the node was not reached.
  Tensor grad(Var v) const;

  /// Backward from a scalar loss with seed 1.
  void backward(Var loss);
  /// Backward from several outputs with caller-supplied seed gradients.
  void backward(std::span<const Seed> seeds);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
    Tensor grad;
  };

  Var push(Node node);
  void run_backward(std::uint32_t last);

  std::vector<Node> nodes_;
};

/// Differentiable primitives. Every op checks shapes and throws ShapeError.
namespace ops {

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// a * s for a scalar Var s.
Var mul_scalar(Var a, Var s);
/// Adds a length-n bias to every row of an m x n matrix.
Var add_bias(Var x, Var bias);
Var exp(Var a);
/// Exact GELU, x * Phi(x).
Var gelu(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Row softmax of scale*m; see mmclip::softmax_rows for the permission mask.
Var softmax_rows(Var m, double scale, std::vector<unsigned char> allowed = {});
Var slice_cols(Var a, std::size_t start, std::size_t len);
Var concat_cols(std::span<const Var> parts);
/// Embedding lookup: row i of the result is table[ids[i]].
Var gather_rows(Var table, std::span<const std::size_t> ids);
/// Row i is replacement[i] where mask[i] is set, x[i] otherwise.
Var select_rows(Var x, Var replacement, std::span<const unsigned char> mask);
/// Mean over rows with valid[i] set; result has rank 1.
Var mean_rows(Var x, std::span<const unsigned char> valid);
/// Normalises every row (or a rank-1 vector) to unit L2 norm.
Var l2_normalize(Var x);
/// Stacks rank-1 vectors into a matrix.
Var stack_rows(std::span<const Var> rows);
Var sum(Var a);
/// Mean squared error over the listed rows, averaged over rows x cols.
Var masked_mse(Var y, const Tensor& target, std::span<const std::size_t> rows);
/// Mean over `positions` of -log softmax(logits[p])[targets[p]].
Var nll_rows(Var logits, std::span<const std::size_t> targets,
             std::span<const std::size_t> positions);
/// -mean_i log softmax(logits[i])[i] for a square logit matrix.
Var diag_cross_entropy(Var logits);

}  // namespace ops
}  // namespace mmclip
