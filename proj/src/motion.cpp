#include "motionpred/motion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "motionpred/error.hpp"

namespace motionpred {

const SkeletonDef& skeleton() {
  static const SkeletonDef def = [] {
    SkeletonDef s;
    s.parent = {-1, kLeftHip, kLeftKnee, -1, kRightHip, kRightKnee, -1, -1};
    s.offset = {Vec3(0.1, -0.05, 0), Vec3(0, -s.thigh, 0), Vec3(0, -s.shin, 0),
                Vec3(-0.1, -0.05, 0), Vec3(0, -s.thigh, 0), Vec3(0, -s.shin, 0),
                Vec3(0.18, 0.45, 0), Vec3(-0.18, 0.45, 0)};
    s.names = {"l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle", "l_shoulder",
               "r_shoulder"};
    return s;
  }();
  return def;
}

Rot6 matrix_to_rot6(const Mat3& r) {
  return {r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)};
}

Mat3 rot6_to_matrix(const Rot6& v) {
  Vec3 a1(v[0], v[1], v[2]);
  Vec3 a2(v[3], v[4], v[5]);
  if (a1.norm() < 1e-12) return Mat3::Identity();
  Vec3 b1 = a1.normalized();
  Vec3 b2 = a2 - b1.dot(a2) * b1;
  if (b2.norm() < 1e-12) b2 = b1.unitOrthogonal();
  b2.normalize();
  Mat3 m;
  m.col(0) = b1;
  m.col(1) = b2;
  m.col(2) = b1.cross(b2);
  return m;
}

Rot6 identity_rot6() { return {1, 0, 0, 0, 1, 0}; }

Quat yaw_quat(double heading) { return Quat(Eigen::AngleAxisd(heading, Vec3::UnitY())); }

double heading_of(const Quat& q) {
  const Vec3 f = q * Vec3::UnitZ();
  return std::atan2(f.x(), f.z());
}

void Pose::validate() const {
  const double n = root_orientation.norm();
  if (!(std::abs(n - 1.0) <= 1e-9)) {
    throw ValidationError("root quaternion norm " + std::to_string(n) + " is not 1");
  }
  if (joint_rotations.size() != kJoints) {
    throw ValidationError("pose has " + std::to_string(joint_rotations.size()) +
                          " joints, expected " + std::to_string(kJoints));
  }
}

std::vector<Vec3> forward_kinematics(const Pose& p) {
  const auto& sk = skeleton();
  std::vector<Vec3> pos(kFkPoints);
  std::array<Mat3, kJoints> global;
  const Mat3 root = p.root_orientation.normalized().toRotationMatrix();
  for (std::size_t j = 0; j < kJoints; ++j) {
    const Mat3& parent_rot = sk.parent[j] < 0 ? root : global[sk.parent[j]];
    const Vec3& parent_pos = sk.parent[j] < 0 ? p.root_translation : pos[sk.parent[j]];
    pos[j] = parent_pos + parent_rot * sk.offset[j];
    global[j] = parent_rot * rot6_to_matrix(p.joint_rotations[j]);
  }
  pos[kLeftToe] = pos[kLeftAnkle] + global[kLeftAnkle] * Vec3(0, -sk.ankle_height, 0.14);
  pos[kRightToe] = pos[kRightAnkle] + global[kRightAnkle] * Vec3(0, -sk.ankle_height, 0.14);
  pos[kLeftHand] = pos[kLeftShoulder] + global[kLeftShoulder] * Vec3(0, -0.55, 0);
  pos[kRightHand] = pos[kRightShoulder] + global[kRightShoulder] * Vec3(0, -0.55, 0);
  return pos;
}

namespace {
constexpr std::array<const char*, kActionCount> kActionNames = {
    "Walk", "Jog", "Run", "Step", "Wave", "SitDown", "JumpPrep", "Reach"};
}

std::string action_name(Action a) { return kActionNames[static_cast<std::size_t>(a)]; }

Action action_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kActionCount; ++i)
    if (name == kActionNames[i]) return static_cast<Action>(i);
  throw ValidationError("unknown action '" + name + "'");
}

Action action_from_index(std::size_t index) {
  if (index >= kActionCount) {
    throw ValidationError("action index " + std::to_string(index) + " out of range");
  }
  return static_cast<Action>(index);
}

std::size_t ActionSet::index_of(Action a) const {
  for (std::size_t i = 0; i < actions.size(); ++i)
    if (actions[i] == a) return i;
  throw ValidationError("action " + action_name(a) + " is not in this model's label set");
}

Action ActionSet::at(std::size_t i) const {
  if (i >= actions.size()) {
    throw ValidationError("label index " + std::to_string(i) + " >= " +
                          std::to_string(actions.size()));
  }
  return actions[i];
}

std::vector<double> ActionSet::one_hot(std::size_t i) const {
  at(i);
  std::vector<double> v(actions.size(), 0.0);
  v[i] = 1.0;
  return v;
}

std::vector<std::string> ActionSet::names() const {
  std::vector<std::string> out;
  for (auto a : actions) out.push_back(action_name(a));
  return out;
}

ActionSet ActionSet::from_names(const std::vector<std::string>& names) {
  ActionSet s;
  for (const auto& n : names) s.actions.push_back(action_from_name(n));
  return s;
}

ActionSet gait_actions() { return {{Action::Walk, Action::Jog, Action::Run, Action::Step}}; }
ActionSet target_actions() {
  return {{Action::Wave, Action::SitDown, Action::JumpPrep, Action::Reach}};
}

MotionSequence MotionSequence::slice(std::size_t start, std::size_t count) const {
  if (start + count > frames.size()) {
    throw ValidationError("slice [" + std::to_string(start) + ", " +
                          std::to_string(start + count) + ") of " +
                          std::to_string(frames.size()) + " frames");
  }
  MotionSequence s = *this;
  s.frames.assign(frames.begin() + start, frames.begin() + start + count);
  return s;
}

namespace {
void check_norm(const NormStats* norm) {
  if (norm && (norm->mean.size() != kPoseDim || norm->std.size() != kPoseDim)) {
    throw ValidationError("normalization statistics have the wrong dimension");
  }
}
}  // namespace

std::vector<double> pose_vectorize(const Pose& p, const NormStats* norm) {
  check_norm(norm);
  if (p.joint_rotations.size() != kJoints) {
    throw ValidationError("pose has " + std::to_string(p.joint_rotations.size()) + " joints");
  }
  std::vector<double> v(kPoseDim);
  v[0] = p.root_translation.x();
  v[1] = p.root_translation.y();
  v[2] = p.root_translation.z();
  v[3] = p.root_orientation.w();
  v[4] = p.root_orientation.x();
  v[5] = p.root_orientation.y();
  v[6] = p.root_orientation.z();
  for (std::size_t j = 0; j < kJoints; ++j)
    std::copy(p.joint_rotations[j].begin(), p.joint_rotations[j].end(), v.begin() + 7 + 6 * j);
  if (norm)
    for (std::size_t i = 0; i < kPoseDim; ++i) v[i] = (v[i] - norm->mean[i]) / norm->std[i];
  return v;
}

Pose pose_devectorize(std::span<const double> v, const NormStats* norm) {
  check_norm(norm);
  if (v.size() != kPoseDim) {
    throw ValidationError("pose vector has length " + std::to_string(v.size()) + ", expected " +
                          std::to_string(kPoseDim));
  }
  std::vector<double> x(v.begin(), v.end());
  for (std::size_t i = 0; i < kPoseDim; ++i) {
    if (!std::isfinite(x[i])) {
      throw ValidationError("pose vector entry " + std::to_string(i) + " is not finite");
    }
    if (norm) x[i] = x[i] * norm->std[i] + norm->mean[i];
  }
  Pose p;
  p.root_translation = Vec3(x[0], x[1], x[2]);
  Quat q(x[3], x[4], x[5], x[6]);
  if (q.norm() < 1e-12) q = Quat::Identity();
  p.root_orientation = q.normalized();
  for (std::size_t j = 0; j < kJoints; ++j)
    std::copy(x.begin() + 7 + 6 * j, x.begin() + 13 + 6 * j, p.joint_rotations[j].begin());
  return p;
}

NormStats compute_norm_stats(const std::vector<MotionSequence>& train) {
  std::size_t count = 0;
  NormStats s{std::vector<double>(kPoseDim, 0.0), std::vector<double>(kPoseDim, 0.0)};
  for (const auto& seq : train)
    for (const auto& f : seq.frames) {
      auto v = pose_vectorize(f);
      for (std::size_t i = 0; i < kPoseDim; ++i) s.mean[i] += v[i];
      ++count;
    }
  if (count == 0) throw ValidationError("cannot compute normalization over an empty train set");
  for (auto& m : s.mean) m /= static_cast<double>(count);
  for (const auto& seq : train)
    for (const auto& f : seq.frames) {
      auto v = pose_vectorize(f);
      for (std::size_t i = 0; i < kPoseDim; ++i) s.std[i] += (v[i] - s.mean[i]) * (v[i] - s.mean[i]);
    }
  for (auto& d : s.std) d = std::max(std::sqrt(d / static_cast<double>(count)), kStdFloor);
  return s;
}

NdValue sequence_matrix(const MotionSequence& seq, std::size_t start, std::size_t count,
                        const NormStats* norm) {
  if (start + count > seq.size()) {
    throw ValidationError("sequence '" + seq.id + "' has " + std::to_string(seq.size()) +
                          " frames, need " + std::to_string(start + count));
  }
  NdValue out({count, kPoseDim});
  for (std::size_t t = 0; t < count; ++t) {
    auto v = pose_vectorize(seq.frames[start + t], norm);
    std::copy(v.begin(), v.end(), out.data.begin() + t * kPoseDim);
  }
  return out;
}

std::vector<Pose> matrix_poses(std::span<const double> data, std::size_t rows,
                               const NormStats* norm) {
  if (data.size() != rows * kPoseDim) {
    throw ShapeError("pose matrix of " + std::to_string(data.size()) + " values for " +
                     std::to_string(rows) + " rows");
  }
  std::vector<Pose> out;
  out.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r)
    out.push_back(pose_devectorize(data.subspan(r * kPoseDim, kPoseDim), norm));
  return out;
}

void translate_xz(std::vector<Pose>& frames, double dx, double dz) {
  for (auto& f : frames) {
    f.root_translation.x() += dx;
    f.root_translation.z() += dz;
  }
}

void rotate_yaw(std::vector<Pose>& frames, double angle, double pivot_x, double pivot_z) {
  const Quat r = yaw_quat(angle);
  const Mat3 m = r.toRotationMatrix();
  for (auto& f : frames) {
    Vec3 p = f.root_translation - Vec3(pivot_x, 0, pivot_z);
    p = m * p;
    f.root_translation = p + Vec3(pivot_x, 0, pivot_z);
    f.root_orientation = (r * f.root_orientation).normalized();
  }
}

MotionSequence recentre(const MotionSequence& seq, std::size_t anchor) {
  MotionSequence out = seq;
  const Vec3 a = seq.frames.at(anchor).root_translation;
  translate_xz(out.frames, -a.x(), -a.z());
  return out;
}

double total_heading_change(const std::vector<Pose>& frames) {
  double total = 0.0;
  for (std::size_t i = 1; i < frames.size(); ++i) {
    double d = heading_of(frames[i].root_orientation) - heading_of(frames[i - 1].root_orientation);
    while (d > std::numbers::pi) d -= 2 * std::numbers::pi;
    while (d < -std::numbers::pi) d += 2 * std::numbers::pi;
    total += d;
  }
  return total;
}

std::vector<double> joint_angular_speeds(const MotionSequence& seq) {
  std::vector<double> speed(kJoints, 0.0);
  if (seq.size() < 2) return speed;
  for (std::size_t t = 1; t < seq.size(); ++t)
    for (std::size_t j = 0; j < kJoints; ++j) {
      const Mat3 a = rot6_to_matrix(seq.frames[t - 1].joint_rotations[j]);
      const Mat3 b = rot6_to_matrix(seq.frames[t].joint_rotations[j]);
      speed[j] += Eigen::AngleAxisd(a.transpose() * b).angle() * seq.fps;
    }
  for (auto& s : speed) s /= static_cast<double>(seq.size() - 1);
  return speed;
}

}  // namespace motionpred
