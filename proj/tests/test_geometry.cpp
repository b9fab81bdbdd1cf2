#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"
#include "weedvg/errors.hpp"
#include "weedvg/geometry.hpp"

namespace weedvg {
namespace {

using test::fd_gradient;
using test::random_box;

Box corners(double x1, double y1, double x2, double y2) {
  return Box::from_corners(x1, y1, x2, y2);
}

TEST(Geometry, CornerCentreRoundTrip) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const Box b = random_box(rng);
    const Box back = corners(b.x1(), b.y1(), b.x2(), b.y2());
    EXPECT_NEAR(back.cx, b.cx, 1e-12);
    EXPECT_NEAR(back.cy, b.cy, 1e-12);
    EXPECT_NEAR(back.w, b.w, 1e-12);
    EXPECT_NEAR(back.h, b.h, 1e-12);
  }
}

TEST(Geometry, IouExamples) {
  const Box a = corners(0.2, 0.3, 0.5, 0.7);
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(corners(0, 0, 1, 1), corners(2, 2, 3, 3)), 0.0);
  EXPECT_NEAR(iou(corners(0, 0, 2, 2), corners(1, 1, 3, 3)), 1.0 / 7.0, 1e-12);
}

TEST(Geometry, GiouExamples) {
  const Box a = corners(0.2, 0.3, 0.5, 0.7);
  EXPECT_DOUBLE_EQ(giou(a, a), 1.0);
  EXPECT_NEAR(giou(corners(0, 0, 1, 1), corners(2, 2, 3, 3)), -7.0 / 9.0, 1e-12);
  EXPECT_NEAR(giou(corners(0, 0, 1, 1), corners(1, 0, 2, 1)), 0.0, 1e-12);
}

TEST(Geometry, InterpBoxExamples) {
  const Box g = corners(0.1, 0.2, 0.4, 0.6);
  const Box fixed = interp_box(g, g, 0.37);
  EXPECT_NEAR((fixed.corners() - g.corners()).norm(), 0.0, 1e-15);

  const Box mid = interp_box(corners(0, 0, 1, 1), corners(1, 1, 2, 2), 0.5);
  EXPECT_NEAR((mid.corners() - Eigen::Vector4d(0.5, 0.5, 1.5, 1.5)).norm(), 0.0, 1e-12);

  const Box far = interp_box(corners(0, 0, 1, 1), corners(10, 10, 11, 11), 0.99);
  EXPECT_NEAR((far.corners() - Eigen::Vector4d(9.9, 9.9, 10.9, 10.9)).norm(), 0.0, 1e-12);
}

TEST(Geometry, InterpAlphaOutOfRangeIsConfigError) {
  const Box a = corners(0, 0, 1, 1);
  EXPECT_THROW(interp_box(a, a, 0.0), ConfigError);
  EXPECT_THROW(interp_box(a, a, 1.0), ConfigError);
  EXPECT_THROW(loss_interp_iou(a, a, InterpConfig{1.5}), ConfigError);
}

TEST(Geometry, InterpIouLossExamples) {
  const Box g = corners(0.1, 0.2, 0.4, 0.6);
  EXPECT_NEAR(loss_interp_iou(g, g), 0.0, 1e-15);
  // interp box (9.9, 9.9, 10.9, 10.9): inter 0.81, union 1.19
  EXPECT_NEAR(loss_interp_iou(corners(0, 0, 1, 1), corners(10, 10, 11, 11)),
              1.0 + (1.0 - 0.81 / 1.19), 1e-12);
}

TEST(Geometry, InterpIouLossMatchesRasterOracle) {
  const Box pred = corners(0, 0, 1, 1), gt = corners(1, 1, 2, 2);
  const Box mid = interp_box(pred, gt, 0.5);
  const double oracle = (1.0 - test::raster_iou(pred, gt, 1e-3)) +
                        (1.0 - test::raster_iou(mid, gt, 1e-3));
  EXPECT_NEAR(loss_interp_iou(pred, gt, InterpConfig{0.5}), oracle, 2e-3);
}

TEST(Geometry, IouMatchesRasterOracle) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Box a = random_box(rng, 0.1, 0.5), b = random_box(rng, 0.1, 0.5);
    EXPECT_NEAR(iou(a, b), test::raster_iou(a, b, 1e-4), 2e-3) << i;
  }
}

TEST(Geometry, SymmetryOrderingAndScaleInvariance) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    const Box a = random_box(rng), b = random_box(rng);
    EXPECT_DOUBLE_EQ(iou(a, b), iou(b, a));
    EXPECT_DOUBLE_EQ(giou(a, b), giou(b, a));
    EXPECT_GE(iou(a, b), giou(a, b));
    const double s = std::uniform_real_distribution<double>(0.1, 50.0)(rng);
    EXPECT_NEAR(iou(a.scaled(s), b.scaled(s)), iou(a, b), 1e-10);
    EXPECT_NEAR(giou(a.scaled(s), b.scaled(s)), giou(a, b), 1e-10);
  }
  // nested boxes: the enclosing box is the union, so the two agree
  const Box outer = corners(0.1, 0.1, 0.9, 0.9), inner = corners(0.3, 0.3, 0.5, 0.6);
  EXPECT_NEAR(iou(outer, inner), giou(outer, inner), 1e-15);
}

TEST(Geometry, InterpIouGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  int checked = 0;
  while (checked < 500) {
    const Box pred = random_box(rng), gt = random_box(rng);
    const Eigen::Vector4d g = grad_loss_interp_iou(pred, gt);
    const Eigen::Vector4d fd =
        fd_gradient([&](const Box& p) { return loss_interp_iou(p, gt); }, pred, 1e-5);
    ++checked;
    const double rel = (g - fd).norm() / std::max(1.0, fd.norm());
    EXPECT_LE(rel, 1e-4) << "pair " << checked;
  }
}

TEST(Geometry, GiouGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 300; ++i) {
    const Box pred = random_box(rng), gt = random_box(rng);
    const Eigen::Vector4d g = grad_loss_giou(pred, gt);
    const Eigen::Vector4d fd = fd_gradient([&](const Box& p) { return loss_giou(p, gt); }, pred);
    EXPECT_LE((g - fd).norm() / std::max(1.0, fd.norm()), 1e-4) << i;
  }
}

TEST(Geometry, GradientAtCoincidenceMatchesCentralDifferences) {
  const Box b = corners(0.2, 0.3, 0.6, 0.8);
  const Eigen::Vector4d g = grad_loss_interp_iou(b, b);
  const Eigen::Vector4d fd =
      fd_gradient([&](const Box& p) { return loss_interp_iou(p, b); }, b, 1e-8);
  EXPECT_LE((g - fd).norm(), 1e-6);
}

TEST(Geometry, DisjointPairsKeepInterpGradient) {
  const Box pred = corners(0.0, 0.0, 0.1, 0.1), gt = corners(0.5, 0.5, 0.7, 0.6);
  EXPECT_EQ(grad_loss_iou(pred, gt).norm(), 0.0);
  EXPECT_GT(grad_loss_interp_iou(pred, gt).norm(), 0.0);
}

TEST(Geometry, DegeneratePredictionStillReceivesGradient) {
  const Box pred{0.3, 0.3, 0.0, 0.0}, gt = corners(0.25, 0.25, 0.45, 0.4);
  EXPECT_DOUBLE_EQ(iou(pred, gt), 0.0);
  const Eigen::Vector4d g = grad_loss_interp_iou(pred, gt);
  EXPECT_TRUE(g.allFinite());
  EXPECT_GT(g.tail<2>().norm(), 0.0);
}

TEST(Geometry, TouchingBoxesUseOverlappingSide) {
  // pred's right edge on gt's left edge: growing pred to the right creates overlap.
  // Dyadic coordinates keep the shared edge exact in centre form.
  const Box pred = corners(0.0, 0.0, 0.25, 0.25), gt = corners(0.25, 0.0, 0.5, 0.25);
  ASSERT_EQ(pred.x2(), gt.x1());
  const Eigen::Vector4d g = grad_iou(pred, gt);
  const double eps = 1e-7;
  const double right = (iou(corners(0.0, 0.0, 0.25 + eps, 0.25), gt) - iou(pred, gt)) / eps;
  // moving x2 alone shifts cx by half and w by the full amount
  EXPECT_NEAR(g[0] / 2 + g[2], right, 1e-5);
  EXPECT_GT(g[0], 0.0);
}

}  // namespace
}  // namespace weedvg
