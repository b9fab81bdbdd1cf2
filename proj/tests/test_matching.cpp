#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <numeric>
#include <random>

#include "test_util.hpp"
#include "weedvg/errors.hpp"
#include "weedvg/matching.hpp"

namespace weedvg {
namespace {

Eigen::MatrixXd random_cost(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::uniform_real_distribution<double> u(0.0, 10.0);
  Eigen::MatrixXd c(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) c(i, j) = u(rng);
  return c;
}

// Independent oracle: enumerate permutations of the long side.
double oracle_min_cost(const Eigen::MatrixXd& c) {
  const bool tall = c.rows() >= c.cols();
  const Eigen::MatrixXd m = tall ? c : Eigen::MatrixXd(c.transpose());
  std::vector<int> perm(static_cast<std::size_t>(m.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (Eigen::Index j = 0; j < m.cols(); ++j) s += m(perm[static_cast<std::size_t>(j)], j);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

void expect_valid(const Assignment& a, Eigen::Index rows, Eigen::Index cols) {
  EXPECT_EQ(static_cast<Eigen::Index>(a.pairs.size()), std::min(rows, cols));
  std::vector<bool> r(static_cast<std::size_t>(rows)), c(static_cast<std::size_t>(cols));
  for (auto [i, j] : a.pairs) {
    EXPECT_FALSE(r[static_cast<std::size_t>(i)]);
    EXPECT_FALSE(c[static_cast<std::size_t>(j)]);
    r[static_cast<std::size_t>(i)] = c[static_cast<std::size_t>(j)] = true;
  }
  EXPECT_EQ(a.unmatched_proposals.size() + a.pairs.size(), static_cast<std::size_t>(rows));
  EXPECT_EQ(a.unmatched_gts.size() + a.pairs.size(), static_cast<std::size_t>(cols));
}

TEST(MatchCost, Examples) {
  const Box p = Box::from_corners(0.0, 0.0, 0.2, 0.2), g = Box::from_corners(0.1, 0.1, 0.3, 0.3);
  EXPECT_DOUBLE_EQ(match_cost(g, g), 0.0);
  EXPECT_NEAR(match_cost(p, g), (1.0 - 1.0 / 7.0) + 2.0 * (0.01 + 0.01), 1e-12);
  EXPECT_NEAR(match_cost(p, g), 0.8971, 5e-5);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const Box a = test::random_box(rng), b = test::random_box(rng);
    EXPECT_DOUBLE_EQ(match_cost(a, b, {0.0, 0.0}), 1.0 - iou(a, b));
  }
}

TEST(MatchCost, NonNegativeAndZeroOnlyForIdentical) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 500; ++i) {
    const Box a = test::random_box(rng), b = test::random_box(rng);
    EXPECT_GT(match_cost(a, b), 0.0);
    EXPECT_EQ(match_cost(a, a), 0.0);
  }
}

TEST(MatchCost, DegenerateGroundTruthThrows) {
  const Box p{0.5, 0.5, 0.1, 0.1};
  EXPECT_THROW(match_cost(p, Box{0.5, 0.5, 0.0, 0.1}), InvalidGroundTruthError);
  EXPECT_THROW(match_cost(p, Box{0.5, 0.5, 0.1, 0.0}), InvalidGroundTruthError);
}

TEST(CostMatrix, EntrywiseAndPermutationConsistent) {
  std::mt19937_64 rng(3);
  std::vector<Box> props, gts;
  for (int i = 0; i < 3; ++i) props.push_back(test::random_box(rng));
  for (int i = 0; i < 3; ++i) gts.push_back(test::random_box(rng));
  const auto c = build_cost_matrix(props, gts);
  ASSERT_TRUE(c.has_value());
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ((*c)(i, j), match_cost(props[i], gts[j]));

  std::vector<Box> swapped = {gts[2], gts[0], gts[1]};
  const auto cs = build_cost_matrix(props, swapped);
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ((*cs)(i, 0), (*c)(i, 2));
    EXPECT_DOUBLE_EQ((*cs)(i, 1), (*c)(i, 0));
  }
  const auto one = build_cost_matrix(std::span(props).first(1), std::span(gts).first(1));
  EXPECT_DOUBLE_EQ((*one)(0, 0), match_cost(props[0], gts[0]));
  EXPECT_FALSE(build_cost_matrix(props, std::vector<Box>{}).has_value());
}

TEST(AssignOptimal, Examples) {
  Eigen::MatrixXd d(2, 2);
  d << 0, 9, 9, 0;
  Assignment a = assign_optimal(d);
  EXPECT_EQ(a.pairs, (std::vector<std::pair<int, int>>{{0, 0}, {1, 1}}));
  EXPECT_EQ(a.total_cost, 0.0);

  Eigen::MatrixXd e(2, 2);
  e << 1, 2, 2, 1;
  a = assign_optimal(e);
  EXPECT_EQ(a.pairs, (std::vector<std::pair<int, int>>{{0, 0}, {1, 1}}));
  EXPECT_EQ(a.total_cost, 2.0);
}

TEST(AssignOptimal, RejectsInvalidCosts) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Ones(2, 2);
  c(1, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(assign_optimal(c), InvalidCostError);
  c(1, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(assign_optimal(c), InvalidCostError);
  c(1, 0) = -1.0;
  EXPECT_THROW(assign_optimal(c), InvalidCostError);
}

TEST(AssignOptimal, TiesBreakLexicographically) {
  const Eigen::MatrixXd flat = Eigen::MatrixXd::Constant(3, 3, 2.0);
  const Assignment a = assign_optimal(flat);
  EXPECT_EQ(a.pairs, (std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}}));
  const Assignment b = assign_bruteforce(flat);
  EXPECT_EQ(a.pairs, b.pairs);
}

TEST(AssignOptimal, RectangularLeavesSurplusUnmatched) {
  std::mt19937_64 rng(4);
  for (auto [r, c] : {std::pair{5, 2}, std::pair{2, 6}}) {
    const Eigen::MatrixXd m = random_cost(rng, r, c);
    const Assignment a = assign_optimal(m);
    expect_valid(a, r, c);
    EXPECT_NEAR(a.total_cost, oracle_min_cost(m), 1e-12);
  }
}

TEST(AssignOptimal, RowShiftChangesCostByConstant) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    Eigen::MatrixXd m = random_cost(rng, 4, 4);
    const Assignment before = assign_optimal(m);
    m.row(2).array() += 3.5;
    const Assignment after = assign_optimal(m);
    EXPECT_NEAR(after.total_cost, before.total_cost + 3.5, 1e-12);
    EXPECT_EQ(after.pairs, before.pairs);
  }
}

TEST(AssignBruteforce, SmallCases) {
  Eigen::MatrixXd one(1, 1);
  one << 4.0;
  EXPECT_EQ(assign_bruteforce(one).pairs, (std::vector<std::pair<int, int>>{{0, 0}}));

  Eigen::MatrixXd id = Eigen::MatrixXd::Constant(3, 3, 5.0);
  id.diagonal().setZero();
  const Assignment a = assign_bruteforce(id);
  EXPECT_EQ(a.pairs, (std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}}));
  EXPECT_EQ(a.total_cost, 0.0);

  EXPECT_THROW(assign_bruteforce(Eigen::MatrixXd::Ones(9, 9)), OracleSizeError);
  EXPECT_NO_THROW(assign_bruteforce(Eigen::MatrixXd::Ones(8, 3)));
}

TEST(AssignBruteforce, AgreesWithOptimalOn5x5) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 200; ++t) {
    const Eigen::MatrixXd m = random_cost(rng, 5, 5);
    EXPECT_EQ(assign_bruteforce(m).total_cost, assign_optimal(m).total_cost) << t;
  }
}

TEST(AssignOptimal, EqualsBruteforceUpTo7x7) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> side(1, 7);
  const auto t0 = std::chrono::steady_clock::now();
  for (int t = 0; t < 500; ++t) {
    const int r = side(rng), c = side(rng);
    const Eigen::MatrixXd m = random_cost(rng, r, c);
    const Assignment opt = assign_optimal(m), brute = assign_bruteforce(m);
    expect_valid(opt, r, c);
    EXPECT_EQ(opt.total_cost, brute.total_cost) << r << "x" << c << " case " << t;
    EXPECT_NEAR(opt.total_cost, oracle_min_cost(m), 1e-9);
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 30.0);
}

}  // namespace
}  // namespace weedvg
