#pragma once

#include <Eigen/Core>

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "weedvg/geometry.hpp"

namespace weedvg {

struct MatchConfig {
  double lambda_centre = 2.0;
  double lambda_size = 0.5;

  void validate() const;
};

// One-to-one assignment between proposals (rows) and ground truths (cols).
struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (proposal, gt), ascending proposal index
  std::vector<int> unmatched_proposals;
  std::vector<int> unmatched_gts;
  double total_cost = 0.0;
};

// Overlap + squared centre distance + relative width/height discrepancy.
// Throws InvalidGroundTruthError when gt has zero width or height.
double match_cost(const Box& proposal, const Box& gt, const MatchConfig& cfg = {});

// C(i, j) = match_cost(proposals[i], gts[j]). Returns nullopt for an empty
// ground-truth list, in which case the caller skips regression for the image.
std::optional<Eigen::MatrixXd> build_cost_matrix(std::span<const Box> proposals,
                                                 std::span<const Box> gts,
                                                 const MatchConfig& cfg = {});

// Minimum-cost assignment of min(rows, cols) pairs. Among optimal
// assignments the one whose short-side index sequence is lexicographically
// smallest is returned. Throws InvalidCostError on non-finite or negative
// entries.
Assignment assign_optimal(const Eigen::MatrixXd& cost);

// Exhaustive minimum over all injections; test oracle for assign_optimal.
// Throws OracleSizeError when min(rows, cols) exceeds kBruteforceLimit.
inline constexpr Eigen::Index kBruteforceLimit = 8;
Assignment assign_bruteforce(const Eigen::MatrixXd& cost);

}  // namespace weedvg
