#pragma once

// Skeleton, poses and sequences. Axes: y up, characters face +z at zero
// heading. Quaternions are stored [w, x, y, z].

#include <Eigen/Geometry>
#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "motionpred/tensor.hpp"

namespace motionpred {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;
using Rot6 = std::array<double, 6>;

inline constexpr std::size_t kJoints = 8;
inline constexpr std::size_t kPoseDim = 3 + 4 + 6 * kJoints;
inline constexpr double kFps = 30.0;

enum Joint : std::size_t {
  kLeftHip, kLeftKnee, kLeftAnkle,
  kRightHip, kRightKnee, kRightAnkle,
  kLeftShoulder, kRightShoulder,
};

struct SkeletonDef {
  std::array<int, kJoints> parent;   // -1 is the root
  std::array<Vec3, kJoints> offset;  // rest offset in the parent frame
  std::array<std::string, kJoints> names;
  double thigh = 0.45;
  double shin = 0.45;
  double ankle_height = 0.08;
};

const SkeletonDef& skeleton();

/// First two columns of the rotation matrix.
Rot6 matrix_to_rot6(const Mat3& r);
/// Gram-Schmidt on the two columns; tolerant of unnormalized input.
Mat3 rot6_to_matrix(const Rot6& v);
Rot6 identity_rot6();

Quat yaw_quat(double heading);
/// Heading of the rotated +z axis, atan2(x, z), in (-pi, pi].
double heading_of(const Quat& q);

struct Pose {
  Vec3 root_translation = Vec3::Zero();
  Quat root_orientation = Quat::Identity();
  std::vector<Rot6> joint_rotations = std::vector<Rot6>(kJoints, identity_rot6());

  /// Throws ValidationError when the quaternion is off the unit sphere by
  /// more than 1e-9 or the joint count is wrong.
  void validate() const;
};

/// World-space joint positions (8 joints) followed by end sites
/// (left toe, right toe, left hand, right hand).
std::vector<Vec3> forward_kinematics(const Pose& p);
inline constexpr std::size_t kLeftToe = 8, kRightToe = 9, kLeftHand = 10, kRightHand = 11;
inline constexpr std::size_t kFkPoints = 12;

enum class Action { Walk, Jog, Run, Step, Wave, SitDown, JumpPrep, Reach };
inline constexpr std::size_t kActionCount = 8;

std::string action_name(Action a);
Action action_from_name(const std::string& name);
Action action_from_index(std::size_t index);

/// Label space of one model: an ordered subset of actions.
struct ActionSet {
  std::vector<Action> actions;

  std::size_t size() const { return actions.size(); }
  std::size_t index_of(Action a) const;
  Action at(std::size_t i) const;
  std::vector<double> one_hot(std::size_t i) const;
  std::vector<std::string> names() const;
  static ActionSet from_names(const std::vector<std::string>& names);
};

ActionSet gait_actions();
ActionSet target_actions();

struct MotionSequence {
  std::string id;
  double fps = kFps;
  Action label = Action::Walk;
  std::string split = "train";
  std::vector<Pose> frames;

  std::size_t size() const { return frames.size(); }
  MotionSequence slice(std::size_t start, std::size_t count) const;
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  bool empty() const { return mean.empty(); }
};

inline constexpr double kStdFloor = 1e-6;

std::vector<double> pose_vectorize(const Pose& p, const NormStats* norm = nullptr);
Pose pose_devectorize(std::span<const double> v, const NormStats* norm = nullptr);

NormStats compute_norm_stats(const std::vector<MotionSequence>& train);

/// Frames [start, start + count) as a [count, N] value.
NdValue sequence_matrix(const MotionSequence& seq, std::size_t start, std::size_t count,
                        const NormStats* norm);
/// Rows of a [T, N] value back to poses.
std::vector<Pose> matrix_poses(std::span<const double> data, std::size_t rows,
                               const NormStats* norm);

/// Copy translated so the root of frame `anchor` has zero horizontal position.
MotionSequence recentre(const MotionSequence& seq, std::size_t anchor);
/// Rigid horizontal translation of every root.
void translate_xz(std::vector<Pose>& frames, double dx, double dz);
/// Rigid rotation about the vertical axis through (pivot_x, pivot_z).
void rotate_yaw(std::vector<Pose>& frames, double angle, double pivot_x, double pivot_z);

/// Heading change from first to last frame, unwrapped frame by frame.
double total_heading_change(const std::vector<Pose>& frames);

/// Per-joint mean angular speed (rad/s) between consecutive frames.
std::vector<double> joint_angular_speeds(const MotionSequence& seq);

}  // namespace motionpred
