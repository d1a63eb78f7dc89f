#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "mlang/errors.hpp"

namespace mlang {

using Mat = Eigen::MatrixXd;   // rows = frames
using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

// Stream widths of the four body parts and the merged pose vector.
constexpr int kFaceDim = 106;   // 6 jaw-rotation dims + 100 expression coeffs
constexpr int kHandsDim = 180;  // 30 joints x 6D
constexpr int kUpperDim = 78;   // 13 joints x 6D
constexpr int kLowerDim = 54;   // 9 joints x 6D
constexpr int kFullDim = kFaceDim + kHandsDim + kUpperDim + kLowerDim;  // 418

constexpr int kLowerJoints = 9;
constexpr int kUpperJoints = 13;
constexpr int kHandJoints = 30;
constexpr int kTotalJoints = 52;

enum class BodyPart { face, hands, upper, lower };

const char* part_name(BodyPart part);
BodyPart part_from_name(const std::string& name);
int part_dim(BodyPart part);

// Per-frame, per-part pose streams in 6D rotation form plus face
// expressions and global translation. All part arrays share the frame count.
struct MotionSequence {
  double fps = 30.0;
  Mat face;         // T x 106
  Mat hands;        // T x 180
  Mat upper;        // T x 78
  Mat lower;        // T x 54
  Mat translation;  // T x 3, meters

  int frames() const { return int(face.rows()); }
  const Mat& part(BodyPart p) const;
  Mat& part(BodyPart p);

  // Throws ShapeMismatch on inconsistent frame counts or widths and
  // DegenerateRotation if any 6D block fails to decode.
  void validate() const;
};

// Fixed 52-joint stand-in for a full-body mesh: bone offsets form the rest
// pose and each joint carries `marker_count` surface proxy points used by
// the mesh-style reconstruction losses.
struct ProxySkeleton {
  std::vector<int> parents;               // parent index per joint, root = -1
  std::vector<Vec3> offsets;              // bone offset from parent, meters
  std::vector<BodyPart> joint_part;       // part owning each joint
  std::vector<std::array<Vec3, 3>> marker_offsets;  // local marker points
  int marker_count = 3;
  double neutral_shape = 1.0;  // uniform scale standing in for body shape

  int joint_count() const { return int(parents.size()); }
  int marker_total() const { return joint_count() * marker_count; }

  static const ProxySkeleton& standard();
};

// --- rotation representations ------------------------------------------

// First two columns of the Rodrigues rotation matrix, column-major.
Vec6 rot6d_from_axis_angle(const Vec3& aa);

// Gram-Schmidt orthonormalization of the 6D representation.
// Throws DegenerateRotation when the two columns are parallel within 1e-8.
Mat3 rot6d_to_matrix(const Vec6& r6);

Vec6 rot6d_from_matrix(const Mat3& R);
Vec3 axis_angle_from_matrix(const Mat3& R);

// arccos(clamp((trace(R1^T R2) - 1) / 2, -1, 1)), in [0, pi].
double geodesic_distance(const Mat3& R1, const Mat3& R2);

// --- pose stream plumbing ----------------------------------------------

// Splits a T x 418 matrix into part streams (order face, hands, upper,
// lower); translation is zeroed. merge_parts inverts it.
MotionSequence split_pose(const Mat& full, double fps = 30.0);
Mat merge_parts(const MotionSequence& seq);

// Forward differences scaled by fps; order 2 = differences of differences.
// Throws TooShort when frames <= order.
Mat finite_difference(const Mat& seq, int order, double fps);

// --- forward kinematics --------------------------------------------------

// One frame of hands+upper+lower rotations (30+13+9 joints x 6D = 312).
// Returns (52 * marker_count) x 3 marker positions after kinematic chain
// composition plus global translation. Markers are grouped per joint.
Mat fk_positions(const Eigen::VectorXd& pose, const ProxySkeleton& skeleton,
                 const Vec3& translation);

// Per-joint global rotations and joint positions for one frame; the marker
// positions above derive from these.
void fk_chain(const std::vector<Mat3>& local, const ProxySkeleton& skeleton,
              const Vec3& translation, std::vector<Mat3>& global,
              std::vector<Vec3>& positions);

// Maps skeleton joint index to the offset of its 6D block inside the
// hands+upper+lower pose vector.
int pose_offset_of_joint(int joint);

// --- motion-json -----------------------------------------------------------

// {"fps": int, "face": [[...]], "hands": [[...]], "upper": [[...]],
//  "lower": [[...]], "translation": [[...]]}, row = frame.
// Readers reject missing keys (IoError) and ragged or mis-sized rows
// (ShapeMismatch).
MotionSequence load_motion_json(const std::string& path);
void save_motion_json(const MotionSequence& seq, const std::string& path);
MotionSequence motion_from_json_text(const std::string& text);
std::string motion_to_json_text(const MotionSequence& seq);

}  // namespace mlang
