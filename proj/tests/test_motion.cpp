#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "mlang/motion.hpp"
#include "mlang/rng.hpp"

using namespace mlang;

namespace {

Mat3 random_rotation(Rng& rng) {
  const Vec3 axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
  return Eigen::AngleAxisd(rng.uniform(0, 3.14159), axis).toRotationMatrix();
}

}  // namespace

TEST_CASE("rot6d_from_axis_angle identity and 90 degrees about z") {
  Vec6 id = rot6d_from_axis_angle(Vec3(0, 0, 0));
  Vec6 want_id;
  want_id << 1, 0, 0, 0, 1, 0;
  CHECK((id - want_id).norm() == doctest::Approx(0.0));

  Vec6 z90 = rot6d_from_axis_angle(Vec3(0, 0, M_PI / 2));
  Vec6 want;
  want << 0, 1, 0, -1, 0, 0;
  CHECK((z90 - want).norm() < 1e-12);
}

TEST_CASE("rot6d round trip preserves the rotation matrix") {
  Rng rng(17);
  for (int i = 0; i < 50; ++i) {
    Vec3 aa(rng.normal(), rng.normal(), rng.normal());
    Mat3 R0 = rot6d_to_matrix(rot6d_from_axis_angle(aa));
    Vec3 aa2 = axis_angle_from_matrix(R0);
    Mat3 R1 = rot6d_to_matrix(rot6d_from_axis_angle(aa2));
    CHECK((R0 - R1).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("rot6d_to_matrix basics") {
  Vec6 id;
  id << 1, 0, 0, 0, 1, 0;
  CHECK((rot6d_to_matrix(id) - Mat3::Identity()).norm() < 1e-12);

  Vec6 scaled;
  scaled << 2, 0, 0, 0, 3, 0;
  CHECK((rot6d_to_matrix(scaled) - Mat3::Identity()).norm() < 1e-12);

  Vec6 parallel;
  parallel << 1, 0, 0, 1, 0, 0;
  CHECK_THROWS_AS(rot6d_to_matrix(parallel), DegenerateRotation);
}

TEST_CASE("rot6d_to_matrix output is orthonormal with det +1 on random input") {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    Vec6 r6;
    for (int k = 0; k < 6; ++k) r6[k] = rng.normal();
    Mat3 R;
    try {
      R = rot6d_to_matrix(r6);
    } catch (const DegenerateRotation&) {
      continue;
    }
    CHECK((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(R.determinant() == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("geodesic_distance known values and properties") {
  Mat3 I = Mat3::Identity();
  CHECK(geodesic_distance(I, I) == doctest::Approx(0.0));

  Mat3 X180 = Eigen::AngleAxisd(M_PI, Vec3::UnitX()).toRotationMatrix();
  CHECK(geodesic_distance(I, X180) == doctest::Approx(M_PI));

  Mat3 Z90 = Eigen::AngleAxisd(M_PI / 2, Vec3::UnitZ()).toRotationMatrix();
  CHECK(geodesic_distance(I, Z90) == doctest::Approx(M_PI / 2));

  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    Mat3 A = random_rotation(rng), B = random_rotation(rng);
    const double dab = geodesic_distance(A, B);
    CHECK(dab >= 0.0);
    CHECK(dab <= M_PI + 1e-12);
    CHECK(dab == doctest::Approx(geodesic_distance(B, A)));
    CHECK(geodesic_distance(A, A) == doctest::Approx(0.0));
  }
}

TEST_CASE("split_pose and merge_parts") {
  Mat zeros = Mat::Zero(5, kFullDim);
  MotionSequence s = split_pose(zeros);
  CHECK(s.face.cols() == 106);
  CHECK(s.hands.cols() == 180);
  CHECK(s.upper.cols() == 78);
  CHECK(s.lower.cols() == 54);
  CHECK(s.face.isZero());

  Rng rng(5);
  Mat x(7, kFullDim);
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < kFullDim; ++c) x(r, c) = rng.normal();
  CHECK((merge_parts(split_pose(x)) - x).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(split_pose(Mat::Zero(3, 417)), ShapeMismatch);
}

TEST_CASE("finite_difference") {
  Mat c = Mat::Constant(6, 2, 3.25);
  CHECK(finite_difference(c, 1, 30.0).isZero());

  Mat ramp(5, 3);
  for (int t = 0; t < 5; ++t)
    for (int d = 0; d < 3; ++d) ramp(t, d) = t * 0.5;
  Mat v = finite_difference(ramp, 1, 30.0);
  CHECK(v.rows() == 4);
  CHECK((v.array() - 15.0).abs().maxCoeff() < 1e-12);

  Mat a = finite_difference(ramp, 2, 30.0);
  CHECK(a.rows() == 3);
  CHECK(a.isZero(1e-9));

  CHECK_THROWS_AS(finite_difference(Mat::Zero(2, 2), 2, 30.0), TooShort);
}

namespace {

Eigen::VectorXd rest_pose() {
  Eigen::VectorXd pose = Eigen::VectorXd::Zero(kTotalJoints * 6);
  Vec6 id;
  id << 1, 0, 0, 0, 1, 0;
  for (int j = 0; j < kTotalJoints; ++j) pose.segment<6>(6 * j) = id;
  return pose;
}

Eigen::VectorXd random_pose(Rng& rng) {
  Eigen::VectorXd pose(kTotalJoints * 6);
  for (int j = 0; j < kTotalJoints; ++j) {
    Vec3 aa(rng.normal(0, 0.4), rng.normal(0, 0.4), rng.normal(0, 0.4));
    pose.segment<6>(6 * j) = rot6d_from_axis_angle(aa);
  }
  return pose;
}

}  // namespace

TEST_CASE("fk rest pose accumulates offsets along parent chains") {
  const auto& sk = ProxySkeleton::standard();
  // Toy check by hand on the first three lower-body joints.
  Mat markers = fk_positions(rest_pose(), sk, Vec3::Zero());
  REQUIRE(markers.rows() == sk.marker_total());

  std::vector<Vec3> expect(kTotalJoints);
  for (int j = 0; j < kTotalJoints; ++j) {
    const int p = sk.parents[j];
    expect[j] = (p < 0 ? Vec3::Zero() : expect[p]) + sk.offsets[j];
  }
  for (int j = 0; j < kTotalJoints; ++j) {
    // Marker 0 sits at joint + x-offset under identity rotations.
    Vec3 m0 = markers.row(j * sk.marker_count).transpose();
    Vec3 want = expect[j] + sk.marker_offsets[j][0];
    CHECK((m0 - want).norm() < 1e-12);
  }
}

TEST_CASE("fk translation is a rigid shift") {
  const auto& sk = ProxySkeleton::standard();
  Mat a = fk_positions(rest_pose(), sk, Vec3::Zero());
  Mat b = fk_positions(rest_pose(), sk, Vec3(1, 0, 0));
  Mat shift = b - a;
  CHECK((shift.col(0).array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(shift.col(1).isZero(1e-12));
  CHECK(shift.col(2).isZero(1e-12));
}

TEST_CASE("fk root rotation rotates all positions about the root") {
  const auto& sk = ProxySkeleton::standard();
  Rng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::VectorXd pose = random_pose(rng);
    Mat3 R = random_rotation(rng);

    Eigen::VectorXd rotated = pose;
    const int root_off = pose_offset_of_joint(0);
    Mat3 R0 = rot6d_to_matrix(Vec6(pose.segment<6>(root_off)));
    rotated.segment<6>(root_off) = rot6d_from_matrix(R * R0);

    Mat base = fk_positions(pose, sk, Vec3::Zero());
    Mat rot = fk_positions(rotated, sk, Vec3::Zero());

    // The root joint sits at its offset; rotation acts about that point.
    Vec3 pivot = sk.offsets[0];
    for (int i = 0; i < base.rows(); ++i) {
      Vec3 want = pivot + R * (base.row(i).transpose() - pivot);
      CHECK((Vec3(rot.row(i).transpose()) - want).norm() < 1e-5);
    }
  }
}

TEST_CASE("skeleton topology invariants") {
  const auto& sk = ProxySkeleton::standard();
  REQUIRE(sk.joint_count() == 52);
  int roots = 0, lower = 0, upper = 0, hands = 0;
  for (int j = 0; j < sk.joint_count(); ++j) {
    if (sk.parents[j] < 0)
      ++roots;
    else
      CHECK(sk.parents[j] < j);
    switch (sk.joint_part[j]) {
      case BodyPart::lower: ++lower; break;
      case BodyPart::upper: ++upper; break;
      case BodyPart::hands: ++hands; break;
      default: break;
    }
  }
  CHECK(roots == 1);
  CHECK(lower == 9);
  CHECK(upper == 13);
  CHECK(hands == 30);
}

TEST_CASE("motion-json round trip and validation") {
  Rng rng(31);
  MotionSequence seq;
  seq.fps = 30;
  const int t = 4;
  seq.face = Mat::Zero(t, kFaceDim);
  seq.hands = Mat::Zero(t, kHandsDim);
  seq.upper = Mat::Zero(t, kUpperDim);
  seq.lower = Mat::Zero(t, kLowerDim);
  seq.translation = Mat::Zero(t, 3);
  auto fill_part = [&](Mat& m, int joints) {
    for (int f = 0; f < t; ++f)
      for (int j = 0; j < joints; ++j) {
        Vec3 aa(rng.normal(0, 0.3), rng.normal(0, 0.3), rng.normal(0, 0.3));
        m.block<1, 6>(f, 6 * j) = rot6d_from_axis_angle(aa).transpose();
      }
  };
  fill_part(seq.face, 1);
  fill_part(seq.hands, kHandJoints);
  fill_part(seq.upper, kUpperJoints);
  fill_part(seq.lower, kLowerJoints);
  seq.validate();

  const std::string text = motion_to_json_text(seq);
  MotionSequence back = motion_from_json_text(text);
  CHECK((back.face - seq.face).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.lower - seq.lower).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.fps == seq.fps);

  CHECK_THROWS_AS(motion_from_json_text("{\"fps\":30}"), IoError);
  CHECK_THROWS_AS(
      motion_from_json_text(
          "{\"fps\":30,\"face\":[[1,2]],\"hands\":[],\"upper\":[],\"lower\":[],"
          "\"translation\":[]}"),
      ShapeMismatch);

  const std::string path = (std::filesystem::temp_directory_path() / "mlang_motion_test.json").string();
  save_motion_json(seq, path);
  MotionSequence loaded = load_motion_json(path);
  CHECK((merge_parts(loaded) - merge_parts(seq)).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
}
