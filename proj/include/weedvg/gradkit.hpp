#pragma once

#include <Eigen/Core>

#include <concepts>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "weedvg/errors.hpp"

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records every primitive in creation order, which is already a
// topological order, so backward() is a single reverse sweep. Vectors are
// represented as 1 x n (row) or n x 1 (column) matrices and scalars as 1 x 1.
namespace weedvg::grad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning Tape is alive.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Receives the gradient flowing into a node and scatters it to parents via
// Tape::accumulate.
using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

// Bookkeeping for max-type nodes, used by the gradient checker.
struct MaxRouting {
  double tie_gap = std::numeric_limits<double>::infinity();
  std::vector<Index> winners;
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  // Records a derived node. Used by the primitives below and by
  // module-specific operations with hand-written derivatives.
  Var record(const char* op, Matrix value, std::vector<Var> parents, BackwardFn backward,
             MaxRouting routing = {});
  // Same, but the closure is only wrapped when some parent needs a gradient.
  template <typename F>
    requires std::invocable<F&, Tape&, const Matrix&>
  Var record(const char* op, Matrix value, std::initializer_list<Var> parents, F&& backward,
             MaxRouting routing = {}) {
    const bool grad = any_needs_grad(parents);
    return push(op, std::move(value), grad, grad ? BackwardFn(std::forward<F>(backward)) : BackwardFn{},
                std::move(routing));
  }

  // Populates grad() for every node that depends on a requires_grad leaf.
  void backward(const Var& loss);

  void accumulate(const Var& target, const Matrix& contribution);
  // Adds contribution into the (row, col) block of target's gradient.
  void accumulate_block(const Var& target, Index row, Index col, const Matrix& contribution);

  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }
  const Matrix& value(int id) const { return nodes_[id].value; }
  const Matrix& grad(int id) const;
  std::size_t size() const { return nodes_.size(); }

  // Smallest gap between the winning and runner-up candidate over every
  // max-type node recorded so far.
  double min_tie_gap() const;
  // Concatenated winner indices of every max-type node, in recording order.
  std::vector<Index> routing_signature() const;

 private:
  friend struct GradCheckAccess;

  struct Node {
    const char* op = "leaf";
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    BackwardFn backward;
    bool is_max = false;
    MaxRouting routing;
  };

  Var check_owner(const Var& v) const;
  bool any_needs_grad(std::span<const Var> parents) const;
  Var push(const char* op, Matrix value, bool needs_grad, BackwardFn backward, MaxRouting routing);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- primitives -----------------------------------------------------------
//
// Binary elementwise ops accept b with the same shape as a, a 1 x cols(a)
// row (broadcast over rows), or a 1 x 1 scalar.

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// s * a + shift, elementwise.
Var affine(const Var& a, double s, double shift);

Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var softplus(const Var& a);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);

// Scaled dot-product attention split into `heads` column groups of width
// d / heads: q is n x d, k and v are m x d, the result is n x d with the
// heads side by side.
Var multi_head_attention(const Var& q, const Var& k, const Var& v, Index heads);

// Maximum of each row (rows x 1) and of each column (1 x cols). Ties route
// the gradient to the first maximal index.
Var rowwise_max(const Var& a);
Var colwise_max(const Var& a);
// Column-wise maximum over the rows whose mask entry is set (1 x cols).
Var masked_max_pool(const Var& a, const std::vector<bool>& valid_rows);
// Elementwise max of two same-shaped inputs; ties go to a.
Var maximum(const Var& a, const Var& b);

// C(i, j) = cos(a_i, b_j) for the rows of a (n x d) and b (m x d).
Var cosine_similarity(const Var& a, const Var& b);

Var sum(const Var& a);
Var mean(const Var& a);
Var transpose(const Var& a);
Var select_rows(const Var& a, const std::vector<Index>& rows);
Var col_block(const Var& a, Index start, Index count);
Var hcat(const std::vector<Var>& parts);
Var element(const Var& a, Index row, Index col);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator-(const Var& a) { return scale(a, -1.0); }

// ---- finite-difference verification --------------------------------------

using ScalarFunction = std::function<Var(Tape&, const std::vector<Var>& params)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tol_rel = 1e-4;
  // Denominator floor of the relative error, so that entries with vanishing
  // gradients are judged on absolute error instead.
  double abs_floor = 1e-3;
  double tie_threshold = 1e-9;
  double nudge = 1e-7;
};

struct GradCheckReport {
  bool passed = true;
  double worst_rel_error = 0.0;
  std::size_t worst_param = 0;
  Index worst_index = -1;
  std::size_t checked = 0;
  // Entries whose finite-difference stencil crossed a max-type kink.
  std::size_t excluded = 0;
  bool tie_detected = false;
  bool nudged = false;
  std::vector<double> worst_by_param;
};

// Compares the tape gradient of f at params with central differences.
GradCheckReport check_gradients(const ScalarFunction& f, std::vector<Matrix> params,
                                const GradCheckOptions& opts = {});

}  // namespace weedvg::grad
