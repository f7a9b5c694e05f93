#include "motionpred/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "motionpred/error.hpp"
#include "motionpred/rng.hpp"

namespace motionpred {

namespace {

constexpr double kPi = std::numbers::pi;

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

// Root path of a gait clip: heading theta(t) = h0 + w t, travel direction at
// heading + delta, integrated in closed form.
struct Arc {
  double h0, w, speed, delta, x0, z0;

  double heading(double t) const { return h0 + w * t; }
  Vec3 position(double t, double y) const {
    const double p0 = h0 + delta;
    double dx, dz;
    if (std::abs(w) < 1e-12) {
      dx = speed * t * std::sin(p0);
      dz = speed * t * std::cos(p0);
    } else {
      dx = speed * (std::cos(p0) - std::cos(p0 + w * t)) / w;
      dz = speed * (std::sin(p0 + w * t) - std::sin(p0)) / w;
    }
    return Vec3(x0 + dx, y, z0 + dz);
  }
};

struct LegSolution {
  Mat3 hip, knee, ankle;
};

// Two-link IK in the pelvis frame. `target` is the hip-to-ankle vector.
LegSolution solve_leg(Vec3 target, double twist) {
  const auto& sk = skeleton();
  const double l1 = sk.thigh, l2 = sk.shin;
  double d = std::clamp(target.norm(), 1e-6, (l1 + l2) * (1.0 - 1e-9));
  const double c = std::clamp((d * d - l1 * l1 - l2 * l2) / (2 * l1 * l2), -1.0, 1.0);
  const double kappa = std::acos(c);
  LegSolution s;
  s.knee = rot_x(kappa);
  const Vec3 bent = Vec3(0, -l1, 0) + s.knee * Vec3(0, -l2, 0);
  const Quat arc = Quat::FromTwoVectors(bent, target);
  s.hip = Eigen::AngleAxisd(twist, target.normalized()).toRotationMatrix() *
          arc.toRotationMatrix();
  s.ankle = (s.hip * s.knee).transpose();
  return s;
}

Mat3 small_rotation(Rng& rng, double sigma) {
  Vec3 n(rng.normal() * sigma, rng.normal() * sigma, rng.normal() * sigma);
  if (n.norm() < 1e-15) return Mat3::Identity();
  return Eigen::AngleAxisd(n.norm(), n.normalized()).toRotationMatrix();
}

struct Noise {
  double hip_twist[2];
  Mat3 ankle[2];
  Mat3 shoulder[2];
};

Noise draw_noise(Rng& rng, double sigma) {
  Noise n;
  for (int s = 0; s < 2; ++s) {
    n.hip_twist[s] = rng.normal() * sigma;
    n.ankle[s] = small_rotation(rng, sigma);
    n.shoulder[s] = small_rotation(rng, sigma);
  }
  return n;
}

// Foot phase bookkeeping: stance k covers cycle phase [k, k + stance).
struct FootPhase {
  double offset;  // phase at t = 0
  double freq;
  double stance;

  double cycle(double t) const { return offset + freq * t; }
  bool in_stance(double t) const {
    const double c = cycle(t);
    return c - std::floor(c) < stance;
  }
  double mid_stance_time(double k) const { return (k + 0.5 * stance - offset) / freq; }
};

Vec3 plant(const Arc& arc, const FootPhase& ph, double k, double side, double ankle_h) {
  const double tm = ph.mid_stance_time(k);
  const Vec3 root = arc.position(tm, 0.0);
  const Vec3 lateral = yaw_quat(arc.heading(tm)) * Vec3(side * 0.1, 0, 0);
  return Vec3(root.x() + lateral.x(), ankle_h, root.z() + lateral.z());
}

Vec3 foot_target(const Arc& arc, const FootPhase& ph, double t, double side, double ankle_h,
                 double lift) {
  const double c = ph.cycle(t);
  const double k = std::floor(c);
  const double frac = c - k;
  if (frac < ph.stance) return plant(arc, ph, k, side, ankle_h);
  const double u = (frac - ph.stance) / (1.0 - ph.stance);
  const Vec3 a = plant(arc, ph, k, side, ankle_h);
  const Vec3 b = plant(arc, ph, k + 1, side, ankle_h);
  Vec3 p = a + smoothstep((u - 0.15) / 0.7) * (b - a);
  p.y() = ankle_h + lift * std::sin(kPi * u);
  return p;
}

double draw_phase(const SynthOptions& opts, Rng& rng) {
  return opts.phase >= 0.0 ? opts.phase : rng.uniform();
}

void check_args(std::size_t n_frames, double turn_angle, const SynthOptions& opts) {
  if (n_frames < 2) throw ValidationError("synth_generate needs at least 2 frames");
  if (!(std::abs(turn_angle) <= kPi)) {
    throw ValidationError("turn angle " + std::to_string(turn_angle) + " outside [-pi, pi]");
  }
  if (!(opts.fps > 0)) throw ValidationError("fps must be positive");
}

Pose gait_pose(const GaitParams& g, const Arc& arc, const FootPhase feet[2], double t,
               const Noise& noise) {
  const auto& sk = skeleton();
  Pose p;
  const double bob = 0.015 * std::cos(4 * kPi * g.frequency * t);
  p.root_translation = arc.position(t, g.pelvis + bob);
  p.root_orientation = yaw_quat(arc.heading(t));
  const Mat3 root = p.root_orientation.toRotationMatrix();
  const std::size_t hips[2] = {kLeftHip, kRightHip};
  for (int s = 0; s < 2; ++s) {
    const double side = s == 0 ? 1.0 : -1.0;
    const Vec3 hip = p.root_translation + root * sk.offset[hips[s]];
    const Vec3 target = foot_target(arc, feet[s], t, side, sk.ankle_height, g.lift);
    const auto leg = solve_leg(root.transpose() * (target - hip), noise.hip_twist[s]);
    p.joint_rotations[hips[s]] = matrix_to_rot6(leg.hip);
    p.joint_rotations[hips[s] + 1] = matrix_to_rot6(leg.knee);
    p.joint_rotations[hips[s] + 2] = matrix_to_rot6(leg.ankle * noise.ankle[s]);
  }
  // Each arm swings with the opposite leg.
  for (int s = 0; s < 2; ++s) {
    const double swing = g.arm * std::sin(2 * kPi * feet[1 - s].cycle(t));
    const double side = s == 0 ? 1.0 : -1.0;
    const Mat3 local = g.lateral ? rot_z(side * (0.1 + 0.5 * (g.arm + swing)))
                                 : rot_x(swing);
    p.joint_rotations[kLeftShoulder + s] = matrix_to_rot6(local * noise.shoulder[s]);
  }
  return p;
}

struct Style {
  double amplitude;
  double tempo;
};

Pose upper_body_pose(Action action, double t, double duration, const SynthOptions& opts,
                     const Noise& noise, const Style& style) {
  const auto& sk = skeleton();
  double pelvis = 0.93, back = 0.0;
  Mat3 arm[2] = {rot_z(0.08), rot_z(-0.08)};
  const double k = style.amplitude;
  t *= style.tempo;
  duration *= style.tempo;
  const double ramp = smoothstep(t / std::max(duration, 1e-9) * 2.0);
  switch (action) {
    case Action::Wave:
      arm[1] = rot_z(-2.6 * k * ramp - 0.45 * k * ramp * std::sin(2 * kPi * 1.5 * t));
      break;
    case Action::SitDown: {
      const double s = smoothstep(t / std::max(duration, 1e-9));
      pelvis = 0.93 - 0.38 * k * s;
      back = 0.22 * s;
      arm[0] = arm[1] = rot_x(-0.9 * k * s);
      break;
    }
    case Action::JumpPrep: {
      const double c = 0.5 * (1 - std::cos(2 * kPi * 0.8 * t));
      pelvis = 0.93 - 0.2 * k * c;
      arm[0] = arm[1] = rot_x(1.1 * k * c);
      break;
    }
    case Action::Reach:
      pelvis = 0.91;
      arm[1] = rot_x(-1.6 * k * ramp) * rot_z(-0.2 * ramp);
      arm[0] = rot_x(-0.3 * k * ramp);
      break;
    default:
      throw ValidationError("not an upper-body action: " + action_name(action));
  }
  Pose p;
  const Quat heading = yaw_quat(opts.initial_heading);
  const Mat3 root = heading.toRotationMatrix();
  p.root_translation = Vec3(opts.start_x, pelvis, opts.start_z) + root * Vec3(0, 0, -back);
  p.root_orientation = heading;
  const std::size_t hips[2] = {kLeftHip, kRightHip};
  for (int s = 0; s < 2; ++s) {
    const double side = s == 0 ? 1.0 : -1.0;
    const Vec3 foot = Vec3(opts.start_x, sk.ankle_height, opts.start_z) +
                      root * Vec3(side * 0.12, 0, 0.05);
    const Vec3 hip = p.root_translation + root * sk.offset[hips[s]];
    const auto leg = solve_leg(root.transpose() * (foot - hip), noise.hip_twist[s]);
    p.joint_rotations[hips[s]] = matrix_to_rot6(leg.hip);
    p.joint_rotations[hips[s] + 1] = matrix_to_rot6(leg.knee);
    p.joint_rotations[hips[s] + 2] = matrix_to_rot6(leg.ankle * noise.ankle[s]);
    p.joint_rotations[kLeftShoulder + s] = matrix_to_rot6(arm[s] * noise.shoulder[s]);
  }
  return p;
}

}  // namespace

GaitParams gait_params(Action a) {
  switch (a) {
    case Action::Walk: return {1.2, 1.0, 0.6, 0.10, 0.92, 0.35, false};
    case Action::Jog: return {2.2, 1.6, 0.5, 0.14, 0.90, 0.6, false};
    case Action::Run: return {3.5, 2.2, 0.4, 0.18, 0.86, 0.9, false};
    case Action::Step: return {0.6, 1.3, 0.6, 0.08, 0.93, 0.15, true};
    default: throw ValidationError("not a gait action: " + action_name(a));
  }
}

bool is_gait(Action a) {
  return a == Action::Walk || a == Action::Jog || a == Action::Run || a == Action::Step;
}

MotionSequence synth_generate(Action action, std::size_t n_frames, double turn_angle,
                              std::uint64_t seed, const SynthOptions& opts) {
  check_args(n_frames, turn_angle, opts);
  if (static_cast<std::size_t>(action) >= kActionCount) {
    throw ValidationError("unknown action index " + std::to_string(static_cast<int>(action)));
  }
  Rng rng(seed);
  const double phase = draw_phase(opts, rng);
  const Noise noise = draw_noise(rng, opts.noise);
  const double duration = static_cast<double>(n_frames - 1) / opts.fps;

  MotionSequence seq;
  seq.fps = opts.fps;
  seq.label = action;
  seq.frames.reserve(n_frames);
  if (is_gait(action)) {
    const GaitParams g = gait_params(action);
    const Arc arc{opts.initial_heading, turn_angle / duration, g.speed,
                  g.lateral ? kPi / 2 : 0.0, opts.start_x, opts.start_z};
    const FootPhase feet[2] = {{phase, g.frequency, g.stance},
                               {phase + 0.5, g.frequency, g.stance}};
    for (std::size_t i = 0; i < n_frames; ++i) {
      const double t = static_cast<double>(i) / opts.fps;
      seq.frames.push_back(gait_pose(g, arc, feet, t, noise));
    }
  } else {
    const Style style{rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15)};
    for (std::size_t i = 0; i < n_frames; ++i) {
      const double t = static_cast<double>(i) / opts.fps;
      seq.frames.push_back(upper_body_pose(action, t, duration, opts, noise, style));
    }
  }
  return seq;
}

FootContacts synth_contacts(Action action, std::size_t n_frames, std::uint64_t seed,
                            const SynthOptions& opts) {
  check_args(n_frames, 0.0, opts);
  FootContacts c{std::vector<bool>(n_frames, true), std::vector<bool>(n_frames, true)};
  if (!is_gait(action)) return c;
  Rng rng(seed);
  const double phase = draw_phase(opts, rng);
  const GaitParams g = gait_params(action);
  const FootPhase feet[2] = {{phase, g.frequency, g.stance}, {phase + 0.5, g.frequency, g.stance}};
  for (std::size_t i = 0; i < n_frames; ++i) {
    const double t = static_cast<double>(i) / opts.fps;
    c.left[i] = feet[0].in_stance(t);
    c.right[i] = feet[1].in_stance(t);
  }
  return c;
}

DatasetSplit generate_dataset(const GenDataOptions& opts) {
  if (opts.actions.empty()) throw ValidationError("gen-data needs at least one action");
  if (opts.per_action == 0) throw ValidationError("gen-data needs per_action >= 1");
  if (!(opts.turn_range >= 0 && opts.turn_range <= kPi)) {
    throw ValidationError("turn range must lie in [0, pi]");
  }
  DatasetSplit split;
  Rng rng(opts.seed);
  const auto n_test = static_cast<std::size_t>(
      std::round(opts.test_fraction * static_cast<double>(opts.per_action)));
  std::uint64_t counter = 0;
  for (Action a : opts.actions) {
    for (std::size_t i = 0; i < opts.per_action; ++i, ++counter) {
      const double turn = rng.uniform(-opts.turn_range, opts.turn_range);
      auto seq = synth_generate(a, opts.frames, turn, derive_seed(opts.seed, counter));
      seq.id = action_name(a) + "_" + std::to_string(i);
      const bool test = i >= opts.per_action - n_test;
      seq.split = test ? "test" : "train";
      (test ? split.test : split.train).push_back(std::move(seq));
    }
  }
  if (split.train.empty()) throw ValidationError("gen-data produced an empty train split");
  split.norm = compute_norm_stats(split.train);
  return split;
}

}  // namespace motionpred
