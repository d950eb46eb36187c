// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "cdsm/geometry.hpp"
#include "oracles.hpp"

using namespace cdsm;
using namespace cdsm::geom;

namespace {

Tensor iota(const Shape& s) {
  Tensor t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  return t;
}

RotationChain random_chain(std::mt19937_64& rng) {
  static const int kAngles[] = {0, 90, -90, 180};
  std::uniform_int_distribution<int> n(0, 4), axis(0, 2), ang(0, 3);
  RotationChain c;
  for (int i = n(rng); i > 0; --i) c.push_back({axis(rng), kAngles[ang(rng)]});
  return c;
}

}  // namespace

TEST(Fov, HalfOpenContainment) {
  const FovBox fov;
  EXPECT_TRUE(in_fov({40, 0, 2}, fov));
  EXPECT_FALSE(in_fov({80, 0, 2}, fov));
  EXPECT_FALSE(in_fov({-0.001, 0, 2}, fov));
  EXPECT_TRUE(in_fov({0, -40, 0}, fov));
  EXPECT_FALSE(in_fov({0, 40, 0}, fov));
  EXPECT_THROW((FovBox{1, 0, -1, 1, 0, 1}.validate()), std::invalid_argument);
}

TEST(RotationMatrix, EmptyChainIsIdentity) {
  EXPECT_EQ(quat_chain_to_matrix({}), identity_matrix3());
}

TEST(RotationMatrix, DefaultChainMapsIjkToKMinusJI) {
  const IntMatrix3 m = quat_chain_to_matrix(default_camera_chain());
  const IntMatrix3 expected{{{0, 0, 1}, {0, -1, 0}, {1, 0, 0}}};
  EXPECT_EQ(m, expected);
  EXPECT_EQ(m, oracle::chain_matrix(default_camera_chain()));
}

TEST(RotationMatrix, FourQuarterTurnsAreIdentity) {
  const RotationChain c(4, rot_z(90));
  EXPECT_EQ(quat_chain_to_matrix(c), identity_matrix3());
}

TEST(RotationMatrix, RejectsNonRightAngles) {
  const RotationChain c{rot_x(45)};
  EXPECT_THROW(quat_chain_to_matrix(c), std::invalid_argument);
  const RotationChain bad_axis{{3, 90}};
  EXPECT_THROW(quat_chain_to_matrix(bad_axis), std::invalid_argument);
}

TEST(RotationMatrix, OrthogonalWithUnitDeterminantForRandomChains) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const RotationChain c = random_chain(rng);
    const IntMatrix3 m = quat_chain_to_matrix(c);
    EXPECT_EQ(determinant(m), 1);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        int dotp = 0;
        for (int k = 0; k < 3; ++k) dotp += m[k][i] * m[k][j];
        EXPECT_EQ(dotp, i == j ? 1 : 0);
      }
    }
    EXPECT_EQ(m, oracle::chain_matrix(c));
  }
}

TEST(CdsmRotate, GoldenShapeAndPlacement) {
  OrientedTensor t{iota({2, 3, 4}), {{Axis::X, 1}, {Axis::Y, 1}, {Axis::Z, 1}}};
  const OrientedTensor r = cdsm_rotate(t, default_camera_chain());
  ASSERT_EQ(r.data.shape(), (Shape{4, 3, 2}));
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j)
      for (Index k = 0; k < 4; ++k) EXPECT_EQ(r.data.at3(k, 2 - j, i), t.data.at3(i, j, k));
}

TEST(CdsmRotate, IdentityChainIsBitIdentical) {
  std::mt19937_64 rng(1);
  OrientedTensor t{oracle::random_tensor({3, 5, 2, 2}, rng),
                   {{Axis::X, 1}, {Axis::Y, 1}, {Axis::Z, 1}, {Axis::Channel, 1}}};
  const OrientedTensor r = cdsm_rotate(t, RotationChain{});
  EXPECT_EQ(r.data, t.data);
  EXPECT_EQ(r.labels, t.labels);
}

TEST(CdsmRotate, MatchesBruteForceAndInverts) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 6), rank(3, 4);
  for (int trial = 0; trial < 200; ++trial) {
    Shape s(static_cast<std::size_t>(rank(rng)));
    for (auto& d : s) d = dim(rng);
    std::vector<AxisLabel> labels{{Axis::X, 1}, {Axis::Y, 1}, {Axis::Z, 1}};
    if (s.size() == 4) labels.push_back({Axis::Channel, 1});
    OrientedTensor t{oracle::random_tensor(s, rng), labels};
    const RotationChain c = random_chain(rng);
    const OrientedTensor r = cdsm_rotate(t, c);
    EXPECT_EQ(r.data, oracle::brute_rotate(t.data, oracle::chain_matrix(c)));
    const OrientedTensor back = cdsm_rotate(r, inverse_chain(c));
    EXPECT_EQ(back.data, t.data);
    EXPECT_EQ(back.labels, t.labels);
    std::vector<double> a(t.data.values().begin(), t.data.values().end());
    std::vector<double> b(r.data.values().begin(), r.data.values().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
}

TEST(CdsmRotate, RejectsLowRank) {
  OrientedTensor t{Tensor({2, 2}), {{Axis::X, 1}, {Axis::Y, 1}}};
  EXPECT_THROW(cdsm_rotate(t, default_camera_chain()), std::invalid_argument);
}

TEST(CdsmRotate, CameraLabelsBecomeBevOriented) {
  // rows grow downward (-Z), columns grow rightward (-Y), channels look forward.
  OrientedTensor cam{Tensor({6, 8, 3}), {{Axis::Z, -1}, {Axis::Y, -1}, {Axis::X, 1}}};
  EXPECT_FALSE(bev_oriented(cam.labels));
  const OrientedTensor r = cdsm_rotate(cam, default_camera_chain());
  const std::vector<AxisLabel> expected{{Axis::X, 1}, {Axis::Y, 1}, {Axis::Z, -1}};
  EXPECT_EQ(r.labels, expected);
  EXPECT_TRUE(bev_oriented(r.labels));
  EXPECT_EQ(r.data.shape(), (Shape{3, 8, 6}));
  const std::vector<AxisLabel> radar{{Axis::X, 1}, {Axis::Y, 1}, {Axis::Channel, 1}};
  EXPECT_TRUE(bev_oriented(radar));
}

TEST(CdsmRotate, DuplicateSpatialLabelsRejected) {
  OrientedTensor t{Tensor({2, 2, 2}), {{Axis::X, 1}, {Axis::X, -1}, {Axis::Z, 1}}};
  EXPECT_THROW(t.validate(), std::invalid_argument);
}

TEST(Projection, GoldenSignConvention) {
  CameraCalib c;
  c.fx = c.fy = 100;
  c.cx = c.cy = 0;
  const Projection p = project_to_image({10, 1, 0}, c);
  EXPECT_DOUBLE_EQ(p.u, -10.0);
  EXPECT_DOUBLE_EQ(p.v, 0.0);
  EXPECT_DOUBLE_EQ(p.depth, 10.0);
}

TEST(Projection, OpticalAxisHitsPrincipalPoint) {
  CameraCalib c;
  c.pose.translation = {0, 0, 1.5};
  for (double d : {1.0, 7.5, 60.0}) {
    const Projection p = project_to_image({d, 0, 1.5}, c);
    EXPECT_DOUBLE_EQ(p.u, c.cx);
    EXPECT_DOUBLE_EQ(p.v, c.cy);
  }
}

TEST(Projection, BehindCameraThrows) {
  CameraCalib c;
  EXPECT_THROW(project_to_image({-1, 0, 0}, c), BehindCameraError);
  EXPECT_THROW(project_to_image({0, 0, 0}, c), BehindCameraError);
}

TEST(Projection, UnprojectInvertsForRandomPoses) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 1000; ++i) {
    CameraCalib c;
    c.pose.rotation = Quaternion{1.0, 0.1 * u(rng), 0.1 * u(rng), 0.3 * u(rng)}.normalized();
    c.pose.translation = {u(rng), u(rng), 1.5 + u(rng)};
    const VcsPoint p{20 + 10 * u(rng), 5 * u(rng), 2 * u(rng)};
    const Projection pr = project_to_image(p, c);
    const VcsPoint q = unproject(pr.u, pr.v, pr.depth, c);
    EXPECT_NEAR(q.x, p.x, 1e-9);
    EXPECT_NEAR(q.y, p.y, 1e-9);
    EXPECT_NEAR(q.z, p.z, 1e-9);
  }
}

TEST(Cuboid, CenteredBoxIsSymmetric) {
  CameraCalib c;
  Box3D b;
  b.center = {20, 0, 0};
  b.length = 4;
  b.width = 2;
  b.height = 1.5;
  const auto r = cuboid_to_bbox2d(b, c, {});
  ASSERT_TRUE(r.has_value());
  EXPECT_NEAR(r->u_min + r->u_max, 2 * c.cx, 1e-9);
  EXPECT_NEAR(r->v_min + r->v_max, 2 * c.cy, 1e-9);
}

TEST(Cuboid, FartherIsStrictlySmaller) {
  CameraCalib c;
  Box3D near_box, far_box;
  near_box.center = {10, 0, 0};
  far_box.center = {50, 0, 0};
  const auto n = cuboid_to_bbox2d(near_box, c, {});
  const auto f = cuboid_to_bbox2d(far_box, c, {});
  ASSERT_TRUE(n && f);
  EXPECT_LT(f->width(), n->width());
  EXPECT_LT(f->height(), n->height());
}

TEST(Cuboid, BehindCameraGivesNothing) {
  CameraCalib c;
  Box3D b;
  b.center = {-10, 0, 0};
  EXPECT_FALSE(cuboid_to_bbox2d(b, c, {}).has_value());
}

TEST(Cuboid, CoversAllProjectedCornersAndStaysInImage) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  CameraCalib c;
  c.pose.translation = {0, 0, 1.5};
  for (int i = 0; i < 500; ++i) {
    Box3D b;
    b.center = {15 + 10 * u(rng), 4 * u(rng), 0.8};
    b.length = 4 + u(rng);
    b.width = 1.8;
    b.height = 1.5;
    b.yaw = 3 * u(rng);
    const auto r = cuboid_to_bbox2d(b, c, {});
    ASSERT_TRUE(r.has_value());
    EXPECT_GE(r->u_min, 0);
    EXPECT_LE(r->u_max, 512);
    for (const auto& p : cuboid_corners(b)) {
      const Projection pr = project_to_image(p, c);
      EXPECT_LE(r->u_min, std::clamp(pr.u, 0.0, 512.0) + 1e-9);
      EXPECT_GE(r->u_max, std::clamp(pr.u, 0.0, 512.0) - 1e-9);
      EXPECT_LE(r->v_min, std::clamp(pr.v, 0.0, 384.0) + 1e-9);
      EXPECT_GE(r->v_max, std::clamp(pr.v, 0.0, 384.0) - 1e-9);
    }
  }
}

TEST(Boxes, WrapAngleRange) {
  EXPECT_DOUBLE_EQ(wrap_angle(std::numbers::pi), std::numbers::pi);
  EXPECT_DOUBLE_EQ(wrap_angle(-std::numbers::pi), std::numbers::pi);
  EXPECT_NEAR(wrap_angle(3 * std::numbers::pi / 2), -std::numbers::pi / 2, 1e-12);
}

TEST(Boxes, BevIouMatchesIndependentPolygonIntersection) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 2000; ++i) {
    Box3D a, b;
    a.center = {2 * u(rng), 2 * u(rng), 0};
    b.center = {2 * u(rng), 2 * u(rng), 0};
    a.length = 3 + u(rng);
    b.length = 3 + u(rng);
    a.width = 1.5 + 0.5 * u(rng);
    b.width = 1.5 + 0.5 * u(rng);
    a.yaw = 3 * u(rng);
    b.yaw = 3 * u(rng);
    EXPECT_NEAR(bev_iou(a, b), oracle::bev_iou(a, b), 1e-9);
  }
}
