#include "weedvg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace weedvg {

void MatchConfig::validate() const {
  if (!(lambda_centre >= 0.0) || !(lambda_size >= 0.0)) {
    throw ConfigError("matching weights must be non-negative");
  }
}

double match_cost(const Box& p, const Box& g, const MatchConfig& cfg) {
  if (!(g.w > 0.0) || !(g.h > 0.0)) {
    throw InvalidGroundTruthError("ground-truth box has zero width or height");
  }
  const double dx = p.cx - g.cx;
  const double dy = p.cy - g.cy;
  const double centre = dx * dx + dy * dy;
  const double size = std::abs(p.w - g.w) / g.w + std::abs(p.h - g.h) / g.h;
  return (1.0 - iou(p, g)) + cfg.lambda_centre * centre + cfg.lambda_size * size;
}

std::optional<Eigen::MatrixXd> build_cost_matrix(std::span<const Box> proposals,
                                                 std::span<const Box> gts,
                                                 const MatchConfig& cfg) {
  cfg.validate();
  if (gts.empty()) return std::nullopt;
  Eigen::MatrixXd cost(static_cast<Eigen::Index>(proposals.size()),
                       static_cast<Eigen::Index>(gts.size()));
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    for (Eigen::Index j = 0; j < cost.cols(); ++j) {
      cost(i, j) = match_cost(proposals[i], gts[j], cfg);
    }
  }
  return cost;
}

namespace {

void check_costs(const Eigen::MatrixXd& cost) {
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    for (Eigen::Index j = 0; j < cost.cols(); ++j) {
      const double c = cost(i, j);
      if (!std::isfinite(c) || c < 0.0) {
        throw InvalidCostError("cost(" + std::to_string(i) + ", " + std::to_string(j) +
                               ") is not a finite non-negative number");
      }
    }
  }
}

// Fills pair list, unmatched lists and the cost (summed in proposal order).
Assignment finish(const Eigen::MatrixXd& cost, std::vector<std::pair<int, int>> pairs) {
  Assignment out;
  std::sort(pairs.begin(), pairs.end());
  std::vector<char> row_used(cost.rows(), 0), col_used(cost.cols(), 0);
  for (const auto& [r, c] : pairs) {
    out.total_cost += cost(r, c);
    row_used[r] = 1;
    col_used[c] = 1;
  }
  for (int r = 0; r < cost.rows(); ++r)
    if (!row_used[r]) out.unmatched_proposals.push_back(r);
  for (int c = 0; c < cost.cols(); ++c)
    if (!col_used[c]) out.unmatched_gts.push_back(c);
  out.pairs = std::move(pairs);
  return out;
}

// Kuhn's augmenting-path matching restricted to an allowed edge set.
class BipartiteMatcher {
 public:
  BipartiteMatcher(const std::vector<std::vector<int>>& adj, int n_right)
      : adj_(adj), match_right_(n_right, -1) {}

  // Returns true when every listed left vertex can be matched simultaneously.
  bool saturates(const std::vector<int>& left) {
    std::fill(match_right_.begin(), match_right_.end(), -1);
    for (int l : left) {
      seen_.assign(match_right_.size(), 0);
      if (!augment(l)) return false;
    }
    return true;
  }

 private:
  bool augment(int l) {
    for (int r : adj_[l]) {
      if (seen_[r]) continue;
      seen_[r] = 1;
      if (match_right_[r] < 0 || augment(match_right_[r])) {
        match_right_[r] = l;
        return true;
      }
    }
    return false;
  }

  const std::vector<std::vector<int>>& adj_;
  std::vector<int> match_right_;
  std::vector<char> seen_;
};

// Lexicographically smallest optimal row->column assignment for n <= m.
std::vector<int> solve_oriented(const Eigen::MatrixXd& a) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(a.cols());
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // Shortest augmenting path Hungarian with potentials, 1-based.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  // An assignment is optimal iff it uses only tight edges and covers every
  // column with a strictly negative potential (complementary slackness).
  const double tol = 1e-10 * (1.0 + a.cwiseAbs().maxCoeff());
  std::vector<std::vector<int>> tight(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      if (std::abs(a(i, j) - u[i + 1] - v[j + 1]) <= tol) tight[i].push_back(j);
    }
  }
  std::vector<char> required(m, 0);
  for (int j = 0; j < m; ++j) required[j] = v[j + 1] < -tol ? 1 : 0;

  std::vector<int> assignment(n, -1);
  std::vector<char> fixed_col(m, 0);
  for (int i = 0; i < n; ++i) {
    for (int j : tight[i]) {
      if (fixed_col[j]) continue;
      fixed_col[j] = 1;

      // Remaining rows must be matchable, and so must the remaining
      // required columns; both together suffice (Mendelsohn-Dulmage).
      std::vector<std::vector<int>> row_adj(n), col_adj(m);
      std::vector<int> rows_left, cols_left;
      for (int r = i + 1; r < n; ++r) {
        rows_left.push_back(r);
        for (int c : tight[r]) {
          if (fixed_col[c]) continue;
          row_adj[r].push_back(c);
          col_adj[c].push_back(r);
        }
      }
      for (int c = 0; c < m; ++c)
        if (required[c] && !fixed_col[c]) cols_left.push_back(c);

      BipartiteMatcher by_row(row_adj, m);
      BipartiteMatcher by_col(col_adj, n);
      if (by_row.saturates(rows_left) && by_col.saturates(cols_left)) {
        assignment[i] = j;
        break;
      }
      fixed_col[j] = 0;
    }
    if (assignment[i] < 0) {
      // Tolerance pathologies only; fall back to the Hungarian solution.
      for (int j = 1; j <= m; ++j)
        if (p[j] != 0) assignment[p[j] - 1] = j - 1;
      break;
    }
  }
  return assignment;
}

}  // namespace

Assignment assign_optimal(const Eigen::MatrixXd& cost) {
  check_costs(cost);
  if (cost.rows() == 0 || cost.cols() == 0) return finish(cost, {});

  const bool transposed = cost.rows() > cost.cols();
  const Eigen::MatrixXd oriented = transposed ? Eigen::MatrixXd(cost.transpose()) : cost;
  const std::vector<int> cols = solve_oriented(oriented);

  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < static_cast<int>(cols.size()); ++i) {
    pairs.emplace_back(transposed ? cols[i] : i, transposed ? i : cols[i]);
  }
  return finish(cost, std::move(pairs));
}

Assignment assign_bruteforce(const Eigen::MatrixXd& cost) {
  check_costs(cost);
  const bool transposed = cost.rows() > cost.cols();
  const int n = static_cast<int>(std::min(cost.rows(), cost.cols()));
  const int m = static_cast<int>(std::max(cost.rows(), cost.cols()));
  if (n > kBruteforceLimit) {
    throw OracleSizeError("brute-force oracle supports at most " +
                          std::to_string(kBruteforceLimit) + " pairs, got " + std::to_string(n));
  }
  if (n == 0) return finish(cost, {});

  auto to_pairs = [&](const std::vector<int>& pick) {
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < n; ++i) pairs.emplace_back(transposed ? pick[i] : i, transposed ? i : pick[i]);
    return pairs;
  };

  std::vector<int> pick(n, -1), best;
  std::vector<char> taken(m, 0);
  double best_cost = std::numeric_limits<double>::infinity();

  // Depth-first enumeration in lexicographic order; strict improvement keeps
  // the lexicographically first optimum.
  auto recurse = [&](auto&& self, int depth) -> void {
    if (depth == n) {
      const double c = finish(cost, to_pairs(pick)).total_cost;
      if (c < best_cost) {
        best_cost = c;
        best = pick;
      }
      return;
    }
    for (int j = 0; j < m; ++j) {
      if (taken[j]) continue;
      taken[j] = 1;
      pick[depth] = j;
      self(self, depth + 1);
      taken[j] = 0;
    }
  };
  recurse(recurse, 0);
  return finish(cost, to_pairs(best));
}

}  // namespace weedvg
