#pragma once

// Dataset-level evaluation of in-betweening and two-stage prediction.

#include "motionpred/metrics.hpp"
#include "motionpred/pipeline.hpp"
#include "motionpred/synth.hpp"

namespace motionpred {

struct EvalOptions {
  std::size_t samples = 5;   // S per context
  std::size_t contexts = 0;  // 0 uses every test sequence
  std::uint64_t seed = 0;
  bool use_sampler = true;
  /// Replace generated motion with ground truth (sanity check: ADE 0).
  bool ground_truth = false;
};

struct InbetweenSet {
  std::vector<ContextPair> contexts;
  std::vector<std::vector<Pose>> truth;
  std::vector<std::size_t> labels;  // indices into the VAE's action set
};

/// Centre window of each test sequence split into start, between and end.
InbetweenSet inbetween_contexts(const std::vector<MotionSequence>& test, const VaeConfig& cfg,
                                std::size_t limit = 0);

/// S transitions for one context: sampler branches (cycling over latent
/// draws) when a sampler is present and enabled, prior draws otherwise.
std::vector<std::vector<Pose>> generate_inbetweens(const InbetweenModel& m, const ContextPair& ctx,
                                                   std::size_t label, std::size_t samples,
                                                   std::uint64_t seed, bool use_sampler);

/// Metrics on the transitions. FID compares against classifier features of
/// the real train and test sequences.
MetricsReport evaluate_inbetween(const InbetweenModel& m, const ActionClassifier& classifier,
                                 const DatasetSplit& data, const EvalOptions& opts);

/// Histories come from `history` test sequences and targets from `target`
/// test sequences, paired by index. FID, AF and ADE use the target part of
/// each prediction; APD and foot skate use the whole prediction.
MetricsReport evaluate_prediction(const Models& models, std::size_t t_b,
                                  const ActionClassifier& target_classifier,
                                  const DatasetSplit& history, const DatasetSplit& target,
                                  const EvalOptions& opts);

}  // namespace motionpred
