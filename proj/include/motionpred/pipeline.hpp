#pragma once

// Two-stage prediction: the diffusion model synthesizes the target action,
// then the in-betweening model bridges history and target. Rollout repeats
// this with the running output's tail as the new history.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "motionpred/ainb_vae.hpp"
#include "motionpred/mdm.hpp"
#include "motionpred/sampler.hpp"

namespace motionpred {

enum class Segment { history, transition, target };

std::string segment_name(Segment s);
Segment segment_from_name(const std::string& s);

struct InbetweenModel {
  AinbVae vae;
  std::optional<DiversitySampler> sampler;
};

struct Models {
  std::optional<MotionDiffusion> mdm;
  std::map<std::size_t, InbetweenModel> inbetween;  // keyed by T_b

  void add(AinbVae vae, std::optional<DiversitySampler> sampler = std::nullopt);
  std::vector<std::size_t> lengths() const;
  /// Throws ValidationError naming the trained lengths when T_b is unknown.
  const InbetweenModel& for_length(std::size_t t_b) const;
  const MotionDiffusion& diffusion() const;
};

/// Checkpoint locations. Samplers pair with VAEs by position.
struct RunConfig {
  std::filesystem::path dataset;
  std::filesystem::path mdm;
  std::vector<std::filesystem::path> vae;
  std::vector<std::filesystem::path> sampler;
  std::filesystem::path classifier;
  std::uint64_t seed = 0;
};

nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
/// Checks every referenced checkpoint and sidecar, then loads them.
Models load_models(const RunConfig& c);

struct PredictionRequest {
  MotionSequence history;
  Action future_action = Action::Wave;
  Action inbetween_action = Action::Walk;
  std::size_t t_b = 40;
  std::size_t samples = 1;
  std::uint64_t seed = 0;
  bool use_sampler = true;
  /// Sampler branch; defaults to the sample index modulo the branch count.
  std::optional<std::size_t> branch;
};

struct Prediction {
  MotionSequence motion;
  std::vector<Segment> tags;  // one per frame
  ContextPair seam;           // exact decoder context
  std::uint64_t seed = 0;
  std::optional<std::size_t> branch;
};

/// Last n frames; short histories are padded at the front with their first frame.
std::vector<Pose> history_tail(const std::vector<Pose>& frames, std::size_t n);

/// Rigidly moves a target clip so it faces the history's final heading and
/// starts where the history's mean horizontal velocity carries it after t_b frames.
std::vector<Pose> place_target(const std::vector<Pose>& target, const std::vector<Pose>& history,
                               std::size_t t_b, double fps = kFps);

/// Y = transition followed by target; `sample` selects the seed stream.
Prediction predict_two_stage(const PredictionRequest& req, const Models& models,
                             std::size_t sample = 0);
std::vector<Prediction> predict_samples(const PredictionRequest& req, const Models& models);

struct RolloutStep {
  Action future_action;
  Action inbetween_action;
};

struct Rollout {
  MotionSequence motion;
  std::vector<Segment> tags;
  std::vector<ContextPair> seams;
};

Rollout long_term_rollout(const MotionSequence& history, const std::vector<RolloutStep>& steps,
                          const Models& models, std::size_t t_b, std::uint64_t seed,
                          bool use_sampler = true);

/// Contiguous runs of equal tags as (tag, first frame, count).
struct SegmentRun {
  Segment tag;
  std::size_t start;
  std::size_t count;
};
std::vector<SegmentRun> segment_runs(const std::vector<Segment>& tags);

enum class ExportFormat { jsonl, csv };
ExportFormat export_format_from_name(const std::string& s);

/// One row per frame: index, time, root translation, root quaternion,
/// world-space FK points and the segment tag. Tags may be empty.
void export_frames(const MotionSequence& seq, const std::vector<Segment>& tags,
                   const std::filesystem::path& path, ExportFormat format);
std::vector<std::string> export_csv_header();

/// Mean L2 distance between consecutive pose vectors over a dataset.
double mean_frame_motion(const std::vector<MotionSequence>& seqs);
/// L2 distance between two pose vectors.
double pose_gap(const Pose& a, const Pose& b);

}  // namespace motionpred
