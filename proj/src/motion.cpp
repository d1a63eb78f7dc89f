#include "mlang/motion.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mlang {

using nlohmann::json;

const char* part_name(BodyPart part) {
  switch (part) {
    case BodyPart::face: return "face";
    case BodyPart::hands: return "hands";
    case BodyPart::upper: return "upper";
    case BodyPart::lower: return "lower";
  }
  return "?";
}

BodyPart part_from_name(const std::string& name) {
  if (name == "face") return BodyPart::face;
  if (name == "hands") return BodyPart::hands;
  if (name == "upper") return BodyPart::upper;
  if (name == "lower") return BodyPart::lower;
  throw ConfigError("unknown body part '" + name + "'");
}

int part_dim(BodyPart part) {
  switch (part) {
    case BodyPart::face: return kFaceDim;
    case BodyPart::hands: return kHandsDim;
    case BodyPart::upper: return kUpperDim;
    case BodyPart::lower: return kLowerDim;
  }
  return 0;
}

const Mat& MotionSequence::part(BodyPart p) const {
  switch (p) {
    case BodyPart::face: return face;
    case BodyPart::hands: return hands;
    case BodyPart::upper: return upper;
    case BodyPart::lower: return lower;
  }
  return face;
}

Mat& MotionSequence::part(BodyPart p) {
  return const_cast<Mat&>(static_cast<const MotionSequence*>(this)->part(p));
}

void MotionSequence::validate() const {
  const Eigen::Index t = face.rows();
  if (t < 1) throw ShapeMismatch("motion sequence must have at least one frame");
  if (hands.rows() != t || upper.rows() != t || lower.rows() != t ||
      translation.rows() != t)
    throw ShapeMismatch("part arrays disagree on frame count");
  if (face.cols() != kFaceDim || hands.cols() != kHandsDim ||
      upper.cols() != kUpperDim || lower.cols() != kLowerDim ||
      translation.cols() != 3)
    throw ShapeMismatch("part array has wrong width");
  if (!(fps > 0)) throw ShapeMismatch("fps must be positive");
  auto check_stream = [](const Mat& m, int first_col, int joints) {
    for (Eigen::Index f = 0; f < m.rows(); ++f)
      for (int j = 0; j < joints; ++j) {
        Vec6 r6 = m.block<1, 6>(f, first_col + 6 * j).transpose();
        rot6d_to_matrix(r6);  // throws DegenerateRotation
      }
  };
  check_stream(face, 0, 1);  // jaw
  check_stream(hands, 0, kHandJoints);
  check_stream(upper, 0, kUpperJoints);
  check_stream(lower, 0, kLowerJoints);
}

// --- skeleton -------------------------------------------------------------

namespace {

ProxySkeleton build_standard_skeleton() {
  ProxySkeleton s;
  s.parents.resize(kTotalJoints);
  s.offsets.resize(kTotalJoints);
  s.joint_part.resize(kTotalJoints);

  auto set = [&](int j, int parent, BodyPart part, double x, double y, double z) {
    s.parents[j] = parent;
    s.joint_part[j] = part;
    s.offsets[j] = Vec3(x, y, z);
  };

  // Lower body, joints 0..8. Pelvis is the root; y is up.
  set(0, -1, BodyPart::lower, 0.00, 0.95, 0.00);   // pelvis
  set(1, 0, BodyPart::lower, 0.10, -0.05, 0.00);   // left hip
  set(2, 0, BodyPart::lower, -0.10, -0.05, 0.00);  // right hip
  set(3, 1, BodyPart::lower, 0.00, -0.42, 0.00);   // left knee
  set(4, 2, BodyPart::lower, 0.00, -0.42, 0.00);   // right knee
  set(5, 3, BodyPart::lower, 0.00, -0.40, 0.00);   // left ankle
  set(6, 4, BodyPart::lower, 0.00, -0.40, 0.00);   // right ankle
  set(7, 5, BodyPart::lower, 0.00, -0.06, 0.13);   // left foot
  set(8, 6, BodyPart::lower, 0.00, -0.06, 0.13);   // right foot

  // Upper body, joints 9..21.
  set(9, 0, BodyPart::upper, 0.00, 0.11, 0.00);    // spine1
  set(10, 9, BodyPart::upper, 0.00, 0.13, 0.00);   // spine2
  set(11, 10, BodyPart::upper, 0.00, 0.14, 0.00);  // spine3 / chest
  set(12, 11, BodyPart::upper, 0.00, 0.12, 0.00);  // neck
  set(13, 12, BodyPart::upper, 0.00, 0.12, 0.00);  // head
  set(14, 11, BodyPart::upper, 0.07, 0.07, 0.00);  // left collar
  set(15, 11, BodyPart::upper, -0.07, 0.07, 0.00); // right collar
  set(16, 14, BodyPart::upper, 0.11, 0.00, 0.00);  // left shoulder
  set(17, 15, BodyPart::upper, -0.11, 0.00, 0.00); // right shoulder
  set(18, 16, BodyPart::upper, 0.26, 0.00, 0.00);  // left elbow
  set(19, 17, BodyPart::upper, -0.26, 0.00, 0.00); // right elbow
  set(20, 18, BodyPart::upper, 0.25, 0.00, 0.00);  // left wrist
  set(21, 19, BodyPart::upper, -0.25, 0.00, 0.00); // right wrist

  // Hands, joints 22..51: five fingers x three joints per hand.
  // Finger bases fan out of the wrist; segments continue along x.
  const double fan[5] = {0.035, 0.02, 0.0, -0.02, -0.035};
  for (int h = 0; h < 2; ++h) {
    const int wrist = h == 0 ? 20 : 21;
    const double sx = h == 0 ? 1.0 : -1.0;
    for (int f = 0; f < 5; ++f) {
      const int base = 22 + 15 * h + 3 * f;
      set(base, wrist, BodyPart::hands, sx * 0.09, 0.0, fan[f]);
      set(base + 1, base, BodyPart::hands, sx * 0.035, 0.0, 0.0);
      set(base + 2, base + 1, BodyPart::hands, sx * 0.025, 0.0, 0.0);
    }
  }

  // Three surface markers per joint, offset along distinct axes so that
  // joint rotations are observable in marker space.
  s.marker_offsets.resize(kTotalJoints);
  for (int j = 0; j < kTotalJoints; ++j) {
    const double r = s.joint_part[j] == BodyPart::hands ? 0.012 : 0.035;
    s.marker_offsets[j] = {Vec3(r, 0, 0), Vec3(0, r, 0), Vec3(0, 0, r)};
  }
  return s;
}

}  // namespace

const ProxySkeleton& ProxySkeleton::standard() {
  static const ProxySkeleton s = build_standard_skeleton();
  return s;
}

// --- rotations --------------------------------------------------------------

Vec6 rot6d_from_axis_angle(const Vec3& aa) {
  const double angle = aa.norm();
  Mat3 R;
  if (angle < 1e-12) {
    R = Mat3::Identity();
  } else {
    R = Eigen::AngleAxisd(angle, aa / angle).toRotationMatrix();
  }
  return rot6d_from_matrix(R);
}

Mat3 rot6d_to_matrix(const Vec6& r6) {
  const Vec3 a1 = r6.head<3>();
  const Vec3 a2 = r6.tail<3>();
  const double n1 = a1.norm();
  if (n1 < 1e-8) throw DegenerateRotation("first 6D column is near zero");
  const Vec3 b1 = a1 / n1;
  const Vec3 p = a2 - b1.dot(a2) * b1;
  const double n2 = p.norm();
  if (n2 < 1e-8)
    throw DegenerateRotation("6D columns are parallel within tolerance");
  const Vec3 b2 = p / n2;
  Mat3 R;
  R.col(0) = b1;
  R.col(1) = b2;
  R.col(2) = b1.cross(b2);
  return R;
}

Vec6 rot6d_from_matrix(const Mat3& R) {
  Vec6 r;
  r.head<3>() = R.col(0);
  r.tail<3>() = R.col(1);
  return r;
}

Vec3 axis_angle_from_matrix(const Mat3& R) {
  Eigen::AngleAxisd aa(R);
  return aa.angle() * aa.axis();
}

double geodesic_distance(const Mat3& R1, const Mat3& R2) {
  const double tr = (R1.transpose() * R2).trace();
  const double c = std::min(1.0, std::max(-1.0, (tr - 1.0) / 2.0));
  return std::acos(c);
}

// --- pose streams ---------------------------------------------------------

MotionSequence split_pose(const Mat& full, double fps) {
  if (full.cols() != kFullDim)
    throw ShapeMismatch("expected " + std::to_string(kFullDim) + " columns, got " +
                        std::to_string(full.cols()));
  MotionSequence seq;
  seq.fps = fps;
  const Eigen::Index t = full.rows();
  seq.face = full.leftCols(kFaceDim);
  seq.hands = full.middleCols(kFaceDim, kHandsDim);
  seq.upper = full.middleCols(kFaceDim + kHandsDim, kUpperDim);
  seq.lower = full.rightCols(kLowerDim);
  seq.translation = Mat::Zero(t, 3);
  return seq;
}

Mat merge_parts(const MotionSequence& seq) {
  const Eigen::Index t = seq.face.rows();
  if (seq.hands.rows() != t || seq.upper.rows() != t || seq.lower.rows() != t)
    throw ShapeMismatch("part arrays disagree on frame count");
  Mat full(t, kFullDim);
  full.leftCols(kFaceDim) = seq.face;
  full.middleCols(kFaceDim, kHandsDim) = seq.hands;
  full.middleCols(kFaceDim + kHandsDim, kUpperDim) = seq.upper;
  full.rightCols(kLowerDim) = seq.lower;
  return full;
}

Mat finite_difference(const Mat& seq, int order, double fps) {
  if (order != 1 && order != 2)
    throw ShapeMismatch("finite_difference order must be 1 or 2");
  if (seq.rows() <= order)
    throw TooShort("need more than " + std::to_string(order) + " frames");
  Mat d = (seq.bottomRows(seq.rows() - 1) - seq.topRows(seq.rows() - 1)) * fps;
  if (order == 1) return d;
  return (d.bottomRows(d.rows() - 1) - d.topRows(d.rows() - 1)) * fps;
}

// --- forward kinematics -----------------------------------------------------

int pose_offset_of_joint(int joint) {
  // Pose vector layout: hands (30 joints), upper (13), lower (9).
  if (joint >= 22) return (joint - 22) * 6;
  if (joint >= 9) return kHandsDim + (joint - 9) * 6;
  return kHandsDim + kUpperDim + joint * 6;
}

void fk_chain(const std::vector<Mat3>& local, const ProxySkeleton& skeleton,
              const Vec3& translation, std::vector<Mat3>& global,
              std::vector<Vec3>& positions) {
  const int n = skeleton.joint_count();
  global.resize(n);
  positions.resize(n);
  for (int j = 0; j < n; ++j) {
    const int p = skeleton.parents[j];
    const Vec3 off = skeleton.neutral_shape * skeleton.offsets[j];
    if (p < 0) {
      global[j] = local[j];
      positions[j] = off + translation;
    } else {
      global[j] = global[p] * local[j];
      positions[j] = positions[p] + global[p] * off;
    }
  }
}

Mat fk_positions(const Eigen::VectorXd& pose, const ProxySkeleton& skeleton,
                 const Vec3& translation) {
  const int n = skeleton.joint_count();
  if (pose.size() != 6 * n)
    throw ShapeMismatch("pose must hold " + std::to_string(6 * n) + " values");
  std::vector<Mat3> local(n);
  for (int j = 0; j < n; ++j) {
    Vec6 r6 = pose.segment<6>(pose_offset_of_joint(j));
    local[j] = rot6d_to_matrix(r6);
  }
  std::vector<Mat3> global;
  std::vector<Vec3> pos;
  fk_chain(local, skeleton, translation, global, pos);

  Mat markers(n * skeleton.marker_count, 3);
  for (int j = 0; j < n; ++j)
    for (int m = 0; m < skeleton.marker_count; ++m)
      markers.row(j * skeleton.marker_count + m) =
          (pos[j] + global[j] * skeleton.marker_offsets[j][m]).transpose();
  return markers;
}

// --- motion-json -------------------------------------------------------------

namespace {

Mat matrix_from_json(const json& rows, int want_cols, const char* key) {
  if (!rows.is_array()) throw IoError(std::string("'") + key + "' is not an array");
  Mat m(rows.size(), want_cols);
  for (size_t r = 0; r < rows.size(); ++r) {
    const json& row = rows[r];
    if (!row.is_array() || int(row.size()) != want_cols)
      throw ShapeMismatch(std::string("ragged or mis-sized row in '") + key + "'");
    for (int c = 0; c < want_cols; ++c) m(r, c) = row[c].get<double>();
  }
  return m;
}

json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

MotionSequence motion_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("motion-json parse failure: ") + e.what());
  }
  for (const char* key : {"fps", "face", "hands", "upper", "lower", "translation"})
    if (!j.contains(key)) throw IoError(std::string("motion-json missing key '") + key + "'");
  MotionSequence seq;
  seq.fps = j["fps"].get<double>();
  seq.face = matrix_from_json(j["face"], kFaceDim, "face");
  seq.hands = matrix_from_json(j["hands"], kHandsDim, "hands");
  seq.upper = matrix_from_json(j["upper"], kUpperDim, "upper");
  seq.lower = matrix_from_json(j["lower"], kLowerDim, "lower");
  seq.translation = matrix_from_json(j["translation"], 3, "translation");
  if (seq.hands.rows() != seq.face.rows() || seq.upper.rows() != seq.face.rows() ||
      seq.lower.rows() != seq.face.rows() || seq.translation.rows() != seq.face.rows())
    throw ShapeMismatch("motion-json parts disagree on frame count");
  return seq;
}

std::string motion_to_json_text(const MotionSequence& seq) {
  json j;
  j["fps"] = seq.fps;
  j["face"] = matrix_to_json(seq.face);
  j["hands"] = matrix_to_json(seq.hands);
  j["upper"] = matrix_to_json(seq.upper);
  j["lower"] = matrix_to_json(seq.lower);
  j["translation"] = matrix_to_json(seq.translation);
  return j.dump();
}

MotionSequence load_motion_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return motion_from_json_text(ss.str());
}

void save_motion_json(const MotionSequence& seq, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << motion_to_json_text(seq);
  if (!out) throw IoError("write failure on " + path);
}

}  // namespace mlang
