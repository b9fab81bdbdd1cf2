#include "weedvg/gradkit.hpp"

#include <algorithm>
#include <cmath>

namespace weedvg::grad {

// ---- Var / Tape -----------------------------------------------------------

const Matrix& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

const Matrix& Var::grad() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->grad(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw ShapeError("scalar() on a " + std::to_string(v.rows()) + "x" + std::to_string(v.cols()) +
                     " value");
  }
  return v(0, 0);
}

namespace {

// A finite sum rules out NaN and inf cheaply; overflow falls back to the scan.
bool all_finite(const Matrix& m) { return std::isfinite(m.sum()) || m.allFinite(); }

}  // namespace

Var Tape::leaf(Matrix value, bool requires_grad) {
  if (!all_finite(value)) throw NumericError("leaf value is not finite");
  Node node;
  node.value = std::move(value);
  node.needs_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::check_owner(const Var& v) const {
  if (v.tape() != this) throw ContractError("Var belongs to a different tape");
  return v;
}

bool Tape::any_needs_grad(std::span<const Var> parents) const {
  bool any = false;
  for (const Var& p : parents) any = nodes_[check_owner(p).id()].needs_grad || any;
  return any;
}

Var Tape::push(const char* op, Matrix value, bool needs_grad, BackwardFn backward,
               MaxRouting routing) {
  if (!all_finite(value)) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.needs_grad = needs_grad;
  if (needs_grad) node.backward = std::move(backward);
  node.is_max = std::isfinite(routing.tie_gap) || !routing.winners.empty();
  node.routing = std::move(routing);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(const char* op, Matrix value, std::vector<Var> parents, BackwardFn backward,
                 MaxRouting routing) {
  const bool grad = any_needs_grad(parents);
  return push(op, std::move(value), grad, std::move(backward), std::move(routing));
}

const Matrix& Tape::grad(int id) const {
  if (!backward_done_) throw ContractError("grad() requested before backward()");
  return nodes_[id].grad;
}

void Tape::backward(const Var& loss) {
  check_owner(loss);
  const Matrix& lv = nodes_[loss.id()].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward() needs a scalar loss, got " + std::to_string(lv.rows()) + "x" +
                        std::to_string(lv.cols()));
  }
  if (!std::isfinite(lv(0, 0))) throw ContractError("backward() on a non-finite loss");

  for (Node& n : nodes_) {
    if (n.needs_grad) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    } else {
      n.grad.resize(0, 0);
    }
  }
  backward_done_ = true;
  if (!nodes_[loss.id()].needs_grad) return;
  nodes_[loss.id()].grad(0, 0) = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

void Tape::accumulate(const Var& target, const Matrix& contribution) {
  Node& n = nodes_[target.id()];
  if (!n.needs_grad) return;
  n.grad += contribution;
}

void Tape::accumulate_block(const Var& target, Index row, Index col, const Matrix& contribution) {
  Node& n = nodes_[target.id()];
  if (!n.needs_grad) return;
  n.grad.block(row, col, contribution.rows(), contribution.cols()) += contribution;
}

double Tape::min_tie_gap() const {
  double gap = std::numeric_limits<double>::infinity();
  for (const Node& n : nodes_)
    if (n.is_max) gap = std::min(gap, n.routing.tie_gap);
  return gap;
}

std::vector<Index> Tape::routing_signature() const {
  std::vector<Index> sig;
  for (const Node& n : nodes_) {
    if (!n.is_max) continue;
    sig.insert(sig.end(), n.routing.winners.begin(), n.routing.winners.end());
    sig.push_back(-1);
  }
  return sig;
}

// ---- helpers --------------------------------------------------------------

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

enum class Broadcast { Same, Row, Scalar };

Broadcast broadcast_kind(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::Same;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
  throw ShapeError(std::string(op) + ": cannot combine " + shape_str(a) + " with " + shape_str(b));
}

Matrix expand(const Matrix& b, Broadcast kind, Index rows, Index cols) {
  switch (kind) {
    case Broadcast::Same: return b;
    case Broadcast::Row: return b.replicate(rows, 1);
    case Broadcast::Scalar: return Matrix::Constant(rows, cols, b(0, 0));
  }
  return b;
}

// a + sign * b with b broadcast, without materialising the expansion.
Matrix combine(const Matrix& a, const Matrix& b, Broadcast kind, double sign) {
  switch (kind) {
    case Broadcast::Same: return a + sign * b;
    case Broadcast::Row: return a.rowwise() + sign * b.row(0);
    case Broadcast::Scalar: return (a.array() + sign * b(0, 0)).matrix();
  }
  return a;
}

Matrix reduce(const Matrix& g, Broadcast kind) {
  switch (kind) {
    case Broadcast::Same: return g;
    case Broadcast::Row: return g.colwise().sum();
    case Broadcast::Scalar: return Matrix::Constant(1, 1, g.sum());
  }
  return g;
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("use of an unbound Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ContractError("operands live on different tapes");
  return t;
}

// Elementwise unary op with derivative expressed through input and output.
template <typename Forward, typename Derivative>
Var unary(const char* op, const Var& a, Forward f, Derivative d) {
  Tape& t = tape_of(a);
  Matrix y = a.value().unaryExpr(f);
  return t.record(op, std::move(y), {a}, [a, d, id_out = static_cast<int>(t.size())](Tape& tp, const Matrix& g) {
    const Matrix& x = a.value();
    const Matrix& y = tp.value(id_out);
    Matrix gx(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) gx(i) = g(i) * d(x(i), y(i));
    tp.accumulate(a, gx);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---- arithmetic -----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.value()) + " times " + shape_str(b.value()));
  }
  Matrix y(a.rows(), b.cols());
  if (a.rows() <= 8) {
    // Row-by-row matrix-vector products; the blocked kernel's packing dominates at this size.
    Eigen::VectorXd row(a.cols());
    for (Index r = 0; r < a.rows(); ++r) {
      row = a.value().row(r).transpose();
      y.row(r).transpose().noalias() = b.value().transpose() * row;
    }
  } else {
    y.noalias() = a.value() * b.value();
  }
  return t.record("matmul", std::move(y), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * b.value().transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, a.value().transpose() * g);
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Broadcast k = broadcast_kind("add", a.value(), b.value());
  Matrix y = combine(a.value(), b.value(), k, 1.0);
  return t.record("add", std::move(y), {a, b}, [a, b, k](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(b)) tp.accumulate(b, reduce(g, k));
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Broadcast k = broadcast_kind("sub", a.value(), b.value());
  Matrix y = combine(a.value(), b.value(), k, -1.0);
  return t.record("sub", std::move(y), {a, b}, [a, b, k](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(b)) tp.accumulate(b, -reduce(g, k));
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Broadcast k = broadcast_kind("mul", a.value(), b.value());
  Matrix y = a.value().cwiseProduct(expand(b.value(), k, a.rows(), a.cols()));
  return t.record("mul", std::move(y), {a, b}, [a, b, k](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(expand(b.value(), k, a.rows(), a.cols())));
    if (tp.needs_grad(b)) tp.accumulate(b, reduce(g.cwiseProduct(a.value()), k));
  });
}

Var div(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Broadcast k = broadcast_kind("div", a.value(), b.value());
  if ((b.value().array() == 0.0).any()) throw DomainError("div: division by zero");
  const Matrix denom = expand(b.value(), k, a.rows(), a.cols());
  Matrix y = a.value().cwiseQuotient(denom);
  return t.record("div", std::move(y), {a, b}, [a, b, k](Tape& tp, const Matrix& g) {
    const Matrix d = expand(b.value(), k, a.rows(), a.cols());
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseQuotient(d));
    if (tp.needs_grad(b)) {
      const Matrix gb = -(g.array() * a.value().array() / (d.array() * d.array())).matrix();
      tp.accumulate(b, reduce(gb, k));
    }
  });
}

Var scale(const Var& a, double s) { return affine(a, s, 0.0); }

Var affine(const Var& a, double s, double shift) {
  Tape& t = tape_of(a);
  Matrix y = (a.value().array() * s + shift).matrix();
  return t.record("affine", std::move(y), {a},
                  [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a, g * s); });
}

// ---- elementwise nonlinearities ------------------------------------------

Var exp(const Var& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log(const Var& a) {
  if ((a.value().array() <= 0.0).any()) throw DomainError("log of a non-positive value");
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var sigmoid(const Var& a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& a) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  MaxRouting routing;
  routing.winners.resize(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    routing.winners[i] = x(i) > 0.0 ? 1 : 0;
    routing.tie_gap = std::min(routing.tie_gap, std::abs(x(i)));
  }
  Matrix y = x.cwiseMax(0.0);
  return t.record(
      "relu", std::move(y), {a},
      [a](Tape& tp, const Matrix& g) {
        tp.accumulate(a, (a.value().array() > 0.0).select(g.array(), 0.0).matrix());
      },
      std::move(routing));
}

Var softplus(const Var& a) {
  return unary("softplus", a,
               [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
               [](double x, double) { return stable_sigmoid(x); });
}

// ---- row-wise normalisations ----------------------------------------------

Var softmax_rows(const Var& a) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Eigen::RowVectorXd e = (x.row(r).array() - x.row(r).maxCoeff()).exp();
    y.row(r) = e / e.sum();
  }
  const int id_out = static_cast<int>(t.size());
  return t.record("softmax_rows", std::move(y), {a}, [a, id_out](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(id_out);
    const Eigen::VectorXd dot = (g.cwiseProduct(y)).rowwise().sum();
    Matrix gx = y.cwiseProduct(g - dot.replicate(1, g.cols()));
    tp.accumulate(a, gx);
  });
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, Index heads) {
  Tape& t = tape_of(q, k);
  tape_of(q, v);
  const Index d = q.cols();
  if (heads < 1 || d % heads != 0) {
    throw ShapeError("attention width " + std::to_string(d) + " does not split into " +
                     std::to_string(heads) + " heads");
  }
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows() || k.rows() < 1) {
    throw ShapeError("attention: q " + shape_str(q.value()) + ", k " + shape_str(k.value()) +
                     ", v " + shape_str(v.value()));
  }
  const Index dk = d / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Matrix> attn(static_cast<std::size_t>(heads));
  Matrix y(q.rows(), d);
  for (Index h = 0; h < heads; ++h) {
    Matrix a = s * q.value().middleCols(h * dk, dk) * k.value().middleCols(h * dk, dk).transpose();
    for (Index r = 0; r < a.rows(); ++r) {
      a.row(r) = (a.row(r).array() - a.row(r).maxCoeff()).exp();
      a.row(r) /= a.row(r).sum();
    }
    y.middleCols(h * dk, dk).noalias() = a * v.value().middleCols(h * dk, dk);
    attn[static_cast<std::size_t>(h)] = std::move(a);
  }
  return t.record("multi_head_attention", std::move(y), {q, k, v},
                  [q, k, v, dk, s, attn = std::move(attn)](Tape& tp, const Matrix& g) {
                    Matrix gq = Matrix::Zero(q.rows(), q.cols());
                    Matrix gk = Matrix::Zero(k.rows(), k.cols());
                    Matrix gv = Matrix::Zero(v.rows(), v.cols());
                    for (std::size_t h = 0; h < attn.size(); ++h) {
                      const Index c0 = static_cast<Index>(h) * dk;
                      const Matrix& a = attn[h];
                      const auto gh = g.middleCols(c0, dk);
                      gv.middleCols(c0, dk).noalias() += a.transpose() * gh;
                      const Matrix ga = gh * v.value().middleCols(c0, dk).transpose();
                      const Eigen::VectorXd dot = ga.cwiseProduct(a).rowwise().sum();
                      const Matrix gs = s * a.cwiseProduct(ga.colwise() - dot);
                      gq.middleCols(c0, dk).noalias() += gs * k.value().middleCols(c0, dk);
                      gk.middleCols(c0, dk).noalias() += gs.transpose() * q.value().middleCols(c0, dk);
                    }
                    tp.accumulate(q, gq);
                    tp.accumulate(k, gk);
                    tp.accumulate(v, gv);
                  });
}

Var log_softmax_rows(const Var& a) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    y.row(r) = x.row(r).array() - lse;
  }
  const int id_out = static_cast<int>(t.size());
  return t.record("log_softmax_rows", std::move(y), {a}, [a, id_out](Tape& tp, const Matrix& g) {
    const Matrix p = tp.value(id_out).array().exp().matrix();
    const Eigen::VectorXd total = g.rowwise().sum();
    tp.accumulate(a, g - p.cwiseProduct(total.replicate(1, g.cols())));
  });
}

// ---- max-type reductions --------------------------------------------------

namespace {

// First maximal index of v over the candidate set, and the gap to the
// runner-up.
template <typename Vec>
std::pair<Index, double> argmax_with_gap(const Vec& v, const std::vector<Index>& candidates) {
  Index best = candidates.front();
  for (Index c : candidates)
    if (v(c) > v(best)) best = c;
  double gap = std::numeric_limits<double>::infinity();
  for (Index c : candidates)
    if (c != best) gap = std::min(gap, v(best) - v(c));
  return {best, gap};
}

std::vector<Index> iota(Index n) {
  std::vector<Index> out(n);
  for (Index i = 0; i < n; ++i) out[i] = i;
  return out;
}

Var column_max(const char* op, const Var& a, const std::vector<Index>& rows) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix y(1, x.cols());
  MaxRouting routing;
  for (Index c = 0; c < x.cols(); ++c) {
    auto [best, gap] = argmax_with_gap(x.col(c), rows);
    y(0, c) = x(best, c);
    routing.winners.push_back(best);
    routing.tie_gap = std::min(routing.tie_gap, gap);
  }
  std::vector<Index> winners = routing.winners;
  return t.record(
      op, std::move(y), {a},
      [a, winners](Tape& tp, const Matrix& g) {
        Matrix gx = Matrix::Zero(a.rows(), a.cols());
        for (Index c = 0; c < gx.cols(); ++c) gx(winners[c], c) = g(0, c);
        tp.accumulate(a, gx);
      },
      std::move(routing));
}

}  // namespace

Var rowwise_max(const Var& a) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  if (x.cols() == 0) throw ShapeError("rowwise_max of an empty row");
  const std::vector<Index> cols = iota(x.cols());
  Matrix y(x.rows(), 1);
  MaxRouting routing;
  for (Index r = 0; r < x.rows(); ++r) {
    auto [best, gap] = argmax_with_gap(x.row(r), cols);
    y(r, 0) = x(r, best);
    routing.winners.push_back(best);
    routing.tie_gap = std::min(routing.tie_gap, gap);
  }
  std::vector<Index> winners = routing.winners;
  return t.record(
      "rowwise_max", std::move(y), {a},
      [a, winners](Tape& tp, const Matrix& g) {
        Matrix gx = Matrix::Zero(a.rows(), a.cols());
        for (Index r = 0; r < gx.rows(); ++r) gx(r, winners[r]) = g(r, 0);
        tp.accumulate(a, gx);
      },
      std::move(routing));
}

Var colwise_max(const Var& a) {
  if (a.rows() == 0) throw ShapeError("colwise_max of an empty column");
  return column_max("colwise_max", a, iota(a.rows()));
}

Var masked_max_pool(const Var& a, const std::vector<bool>& valid_rows) {
  if (static_cast<Index>(valid_rows.size()) != a.rows()) {
    throw ShapeError("masked_max_pool: mask has " + std::to_string(valid_rows.size()) +
                     " entries for " + std::to_string(a.rows()) + " rows");
  }
  std::vector<Index> rows;
  for (Index r = 0; r < a.rows(); ++r)
    if (valid_rows[r]) rows.push_back(r);
  if (rows.empty()) throw EmptyTextError("masked_max_pool: every row is masked out");
  return column_max("masked_max_pool", a, rows);
}

Var maximum(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("maximum: " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
  const Matrix& x = a.value();
  const Matrix& z = b.value();
  Matrix y(x.rows(), x.cols());
  MaxRouting routing;
  routing.winners.resize(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const bool first = x(i) >= z(i);
    y(i) = first ? x(i) : z(i);
    routing.winners[i] = first ? 0 : 1;
    routing.tie_gap = std::min(routing.tie_gap, std::abs(x(i) - z(i)));
  }
  std::vector<Index> winners = routing.winners;
  return t.record(
      "maximum", std::move(y), {a, b},
      [a, b, winners](Tape& tp, const Matrix& g) {
        Matrix ga = Matrix::Zero(g.rows(), g.cols());
        Matrix gb = Matrix::Zero(g.rows(), g.cols());
        for (Index i = 0; i < g.size(); ++i) (winners[i] == 0 ? ga : gb)(i) = g(i);
        tp.accumulate(a, ga);
        tp.accumulate(b, gb);
      },
      std::move(routing));
}

// ---- similarity -----------------------------------------------------------

Var cosine_similarity(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.cols()) {
    throw ShapeError("cosine_similarity: " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
  const Eigen::VectorXd na = a.value().rowwise().norm();
  const Eigen::VectorXd nb = b.value().rowwise().norm();
  if ((na.array() == 0.0).any() || (nb.array() == 0.0).any()) {
    throw DomainError("cosine_similarity: zero-norm feature vector");
  }
  const Matrix ah = na.cwiseInverse().asDiagonal() * a.value();
  const Matrix bh = nb.cwiseInverse().asDiagonal() * b.value();
  Matrix y = ah * bh.transpose();
  return t.record("cosine_similarity", std::move(y), {a, b},
                  [a, b, na, nb, ah, bh](Tape& tp, const Matrix& g) {
                    if (tp.needs_grad(a)) {
                      const Matrix gh = g * bh;
                      const Eigen::VectorXd proj = gh.cwiseProduct(ah).rowwise().sum();
                      const Matrix ga = na.cwiseInverse().asDiagonal() *
                                        (gh - proj.asDiagonal() * ah);
                      tp.accumulate(a, ga);
                    }
                    if (tp.needs_grad(b)) {
                      const Matrix gh = g.transpose() * ah;
                      const Eigen::VectorXd proj = gh.cwiseProduct(bh).rowwise().sum();
                      const Matrix gb = nb.cwiseInverse().asDiagonal() *
                                        (gh - proj.asDiagonal() * bh);
                      tp.accumulate(b, gb);
                    }
                  });
}

// ---- reductions and reshaping ---------------------------------------------

Var sum(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = Matrix::Constant(1, 1, a.value().sum());
  return t.record("sum", std::move(y), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var transpose(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().transpose();
  return t.record("transpose", std::move(y), {a},
                  [a](Tape& tp, const Matrix& g) { tp.accumulate(a, g.transpose()); });
}

Var select_rows(const Var& a, const std::vector<Index>& rows) {
  Tape& t = tape_of(a);
  Matrix y(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeError("select_rows: index out of range");
    y.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  return t.record("select_rows", std::move(y), {a}, [a, rows](Tape& tp, const Matrix& g) {
    Matrix gx = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) gx.row(rows[i]) += g.row(static_cast<Index>(i));
    tp.accumulate(a, gx);
  });
}

Var col_block(const Var& a, Index start, Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("col_block: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") of " + shape_str(a.value()));
  }
  Matrix y = a.value().middleCols(start, count);
  return t.record("col_block", std::move(y), {a}, [a, start](Tape& tp, const Matrix& g) {
    tp.accumulate_block(a, 0, start, g);
  });
}

Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("hcat of nothing");
  Tape& t = tape_of(parts.front());
  Index cols = 0;
  for (const Var& p : parts) {
    tape_of(parts.front(), p);
    if (p.rows() != parts.front().rows()) throw ShapeError("hcat: row counts differ");
    cols += p.cols();
  }
  Matrix y(parts.front().rows(), cols);
  Index offset = 0;
  for (const Var& p : parts) {
    y.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return t.record("hcat", std::move(y), parts, [parts](Tape& tp, const Matrix& g) {
    Index off = 0;
    for (const Var& p : parts) {
      tp.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

Var element(const Var& a, Index row, Index col) {
  Tape& t = tape_of(a);
  if (row < 0 || col < 0 || row >= a.rows() || col >= a.cols()) {
    throw ShapeError("element: index out of range");
  }
  Matrix y = Matrix::Constant(1, 1, a.value()(row, col));
  return t.record("element", std::move(y), {a}, [a, row, col](Tape& tp, const Matrix& g) {
    tp.accumulate_block(a, row, col, g);
  });
}

// ---- gradient check -------------------------------------------------------

namespace {

struct Evaluation {
  double value = 0.0;
  double tie_gap = std::numeric_limits<double>::infinity();
  std::vector<Index> signature;
  std::vector<Matrix> grads;
};

}  // namespace

// Lends the checker's parameter buffers to a tape and takes them back, so that
// each evaluation avoids copying every parameter.
struct GradCheckAccess {
  static Evaluation evaluate(const ScalarFunction& f, std::vector<Matrix>& params, bool with_grad) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (Matrix& p : params) leaves.push_back(tape.leaf(std::move(p), with_grad));
    struct Restore {
      Tape& tape;
      std::vector<Var>& leaves;
      std::vector<Matrix>& params;
      ~Restore() {
        for (std::size_t i = 0; i < leaves.size(); ++i)
          params[i] = std::move(tape.nodes_[leaves[i].id()].value);
      }
    } restore{tape, leaves, params};
    const Var loss = f(tape, leaves);
    Evaluation out;
    out.value = loss.scalar();
    out.tie_gap = tape.min_tie_gap();
    out.signature = tape.routing_signature();
    if (with_grad) {
      tape.backward(loss);
      for (const Var& l : leaves) out.grads.push_back(l.grad());
    }
    return out;
  }
};

namespace {

Evaluation evaluate(const ScalarFunction& f, std::vector<Matrix>& params, bool with_grad) {
  return GradCheckAccess::evaluate(f, params, with_grad);
}

}  // namespace

GradCheckReport check_gradients(const ScalarFunction& f, std::vector<Matrix> params,
                                const GradCheckOptions& opts) {
  GradCheckReport report;
  report.worst_by_param.assign(params.size(), 0.0);

  Evaluation base = evaluate(f, params, true);
  if (base.tie_gap < opts.tie_threshold) {
    report.tie_detected = true;
    report.nudged = true;
    Index counter = 0;
    for (Matrix& p : params) {
      for (Index i = 0; i < p.size(); ++i, ++counter) {
        p(i) += opts.nudge * static_cast<double>(1 + counter % 7) / 7.0;
      }
    }
    base = evaluate(f, params, true);
  }

  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Index i = 0; i < params[k].size(); ++i) {
      const double saved = params[k](i);
      params[k](i) = saved + opts.step;
      const Evaluation plus = evaluate(f, params, false);
      params[k](i) = saved - opts.step;
      const Evaluation minus = evaluate(f, params, false);
      params[k](i) = saved;

      if (plus.signature != base.signature || minus.signature != base.signature) {
        ++report.excluded;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * opts.step);
      const double analytic = base.grads[k](i);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.abs_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      report.worst_by_param[k] = std::max(report.worst_by_param[k], rel);
      if (rel > report.worst_rel_error) {
        report.worst_rel_error = rel;
        report.worst_param = k;
        report.worst_index = i;
      }
    }
  }
  report.passed = report.worst_rel_error <= opts.tol_rel;
  return report;
}

}  // namespace weedvg::grad
