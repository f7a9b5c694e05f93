#pragma once

// Procedural motion generator. Gait actions travel along a constant-speed
// arc with stance feet planted in world space; the upper-body actions keep
// the root in place.

#include <cstdint>
#include <vector>

#include "motionpred/motion.hpp"

namespace motionpred {

struct GaitParams {
  double speed;       // m/s along the travel direction
  double frequency;   // gait cycles per second
  double stance;      // fraction of a cycle each foot is planted
  double lift;        // peak swing height above the planted ankle, m
  double pelvis;      // pelvis height, m
  double arm;         // arm swing amplitude, rad
  bool lateral;       // travel sideways instead of forward
};

GaitParams gait_params(Action a);
bool is_gait(Action a);

struct SynthOptions {
  double initial_heading = 0.0;
  double start_x = 0.0;
  double start_z = 0.0;
  double noise = 0.01;
  double fps = kFps;
  /// Gait phase at frame 0; negative draws it from the seed.
  double phase = -1.0;
};

/// Generates `n_frames` frames of `action`. The heading turns linearly by
/// `turn_angle` over the clip; upper-body actions ignore the turn.
MotionSequence synth_generate(Action action, std::size_t n_frames, double turn_angle,
                              std::uint64_t seed, const SynthOptions& opts = {});

struct FootContacts {
  std::vector<bool> left;
  std::vector<bool> right;
};

/// Stance flags of the generator's phase function for the same arguments.
FootContacts synth_contacts(Action action, std::size_t n_frames, std::uint64_t seed,
                            const SynthOptions& opts = {});

struct DatasetSplit {
  std::vector<MotionSequence> train;
  std::vector<MotionSequence> test;
  NormStats norm;
};

struct GenDataOptions {
  std::vector<Action> actions;
  std::size_t per_action = 100;
  std::size_t frames = 90;
  double turn_range = 1.0;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

/// Per action, the last test_fraction of generated clips go to the test split.
/// Normalization statistics come from the train split only.
DatasetSplit generate_dataset(const GenDataOptions& opts);

}  // namespace motionpred
