#pragma once

// Evaluation: feature statistics and FID, min-of-S ADE, APD, action
// faithfulness through a trained classifier, and a foot-skate diagnostic.

#include <filesystem>
#include <functional>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "motionpred/motion.hpp"
#include "motionpred/seq_nets.hpp"

namespace motionpred {

/// Symmetric PSD square root by eigendecomposition; eigenvalues down to
/// -1e-9 are clamped to zero.
Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& m);

struct FeatureDistribution {
  Eigen::VectorXd mu;
  Eigen::MatrixXd cov;
  std::size_t n = 0;
};

/// Mean and unbiased covariance of the rows of `features` [n, D].
FeatureDistribution feature_stats(const std::vector<std::vector<double>>& features);

/// ||mu_g - mu_r||^2 + Tr(S_g + S_r - 2 (sqrt(S_g) S_r sqrt(S_g))^{1/2}).
double fid(const FeatureDistribution& g, const FeatureDistribution& r);

/// Mean per-frame L2 distance on unnormalized pose vectors.
double ade(const std::vector<Pose>& sample, const std::vector<Pose>& gt);
double ade_min(const std::vector<std::vector<Pose>>& samples, const std::vector<Pose>& gt);
/// Average over ordered pairs of whole-sequence L2 distances.
double apd(const std::vector<std::vector<Pose>>& samples);

/// Fraction of predictions equal to the labels.
double action_faithfulness(std::span<const std::size_t> predicted,
                           std::span<const std::size_t> labels);

/// Mean horizontal ankle speed (m/s) over frames where that ankle is within
/// 2 cm of the sequence's lowest ankle height.
double foot_skate(const std::vector<Pose>& frames, double fps = kFps);

struct ClassifierConfig {
  std::size_t width = 32;  // feature width D^f
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ffn_width = 64;
  std::size_t frames = 20;  // clips are centre-cropped or padded to this length
  ActionSet actions = gait_actions();
};

nlohmann::json classifier_config_to_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);

/// Clips are placed at the origin facing +z at their first frame before
/// normalization, so heading and position do not leak into the features.
class ActionClassifier {
 public:
  ActionClassifier(const ClassifierConfig& cfg, std::uint64_t seed);

  const ClassifierConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const NormStats& norm() const { return norm_; }
  void set_norm(NormStats n) { norm_ = std::move(n); }

  /// Canonical clip of cfg.frames frames starting at `offset`, padded with the last frame.
  std::vector<Pose> clip(const std::vector<Pose>& frames, std::size_t offset) const;
  /// Centre crop.
  std::vector<Pose> clip(const std::vector<Pose>& frames) const;
  NormStats clip_norm_stats(const std::vector<std::vector<Pose>>& clips) const;

  /// Pre-head activations [B, width] for canonical clips.
  Tensor features(const std::vector<std::vector<Pose>>& clips) const;
  Tensor logits(const Tensor& features) const;

  /// Feature rows for whole sequences (centre crops).
  std::vector<std::vector<double>> feature_rows(const std::vector<std::vector<Pose>>& seqs) const;
  std::vector<std::size_t> predict(const std::vector<std::vector<Pose>>& seqs) const;
  double accuracy(const std::vector<MotionSequence>& seqs) const;

  void save(const std::filesystem::path& path) const;
  static ActionClassifier load(const std::filesystem::path& path);

 private:
  Tensor encode(const std::vector<std::vector<Pose>>& clips) const;

  ClassifierConfig cfg_;
  NormStats norm_;
  ParamStore params_;
  Linear in_;
  Tensor cls_;
  std::vector<EncoderLayer> layers_;
  LayerNorm out_norm_;
  Linear head_;
};

struct TrainClassifierOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

struct ClassifierReport {
  double train_accuracy = 0;
  double test_accuracy = 0;
  std::vector<double> losses;
};

/// Labels outside the config's action set are rejected, as is a split whose
/// training part covers fewer than two classes.
ClassifierReport train_classifier(ActionClassifier& model, const std::vector<MotionSequence>& train,
                                  const std::vector<MotionSequence>& test,
                                  const TrainClassifierOptions& opts);

FeatureDistribution feature_stats(const std::vector<std::vector<Pose>>& seqs,
                                  const ActionClassifier& classifier);
double action_faithfulness(const std::vector<MotionSequence>& generated,
                           const ActionClassifier& classifier);

struct MetricsReport {
  double fid_train = 0;
  double fid_test = 0;
  double af = 0;
  double ade = 0;
  double apd = 0;
  double foot_skate = 0;
  std::size_t samples = 0;
};

nlohmann::json metrics_to_json(const MetricsReport& r);

}  // namespace motionpred
