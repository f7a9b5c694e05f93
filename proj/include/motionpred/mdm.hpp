#pragma once

// Action-conditioned motion diffusion with a clean-sample-predicting
// generator. Motions are [T_f, N] blocks in normalized pose space.

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "motionpred/motion.hpp"
#include "motionpred/seq_nets.hpp"

namespace motionpred {

/// Steps are 1-based: beta(t), alpha(t), alpha_bar(t) for t in [1, T].
struct NoiseSchedule {
  std::size_t steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double beta(std::size_t t) const { return betas.at(t - 1); }
  double alpha(std::size_t t) const { return alphas.at(t - 1); }
  /// alpha_bar(0) is 1.
  double alpha_bar(std::size_t t) const { return t == 0 ? 1.0 : alpha_bars.at(t - 1); }
};

/// Linearly spaced betas; requires 0 < beta_start <= beta_end < 1.
NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end);

/// Closed-form marginal: sqrt(ab_t) y0 + sqrt(1 - ab_t) eps.
std::vector<double> diffuse_to_t(std::span<const double> y0, std::size_t t,
                                 const NoiseSchedule& s, std::span<const double> eps);

/// One kernel step: sqrt(alpha_t) y + sqrt(1 - alpha_t) eps.
std::vector<double> diffuse_step(std::span<const double> y, std::size_t t, const NoiseSchedule& s,
                                 std::span<const double> eps);

/// Predicts clean samples [batch * T_f, N] from noised ones, per-item step
/// indices and per-item labels.
using Denoiser = std::function<Tensor(const Tensor& y_t, std::span<const std::size_t> t,
                                      std::span<const std::size_t> labels, std::size_t batch)>;

/// Mean squared reconstruction error for uniformly drawn steps.
Tensor mdm_loss(const Tensor& y0, std::size_t batch, std::span<const std::size_t> labels,
                const NoiseSchedule& s, const Denoiser& gen, Rng& rng);

/// Ancestral sampling from Y_T ~ N(0, I) with the x0-parameterized posterior.
/// Returns the final clean block [frames, width].
NdValue reverse_sample(std::size_t label, std::size_t frames, std::size_t width,
                       const NoiseSchedule& s, const Denoiser& gen, std::uint64_t seed);

struct MdmConfig {
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ffn_width = 128;
  std::size_t frames = 60;
  std::size_t steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  ActionSet actions = target_actions();
};

nlohmann::json mdm_config_to_json(const MdmConfig& c);
MdmConfig mdm_config_from_json(const nlohmann::json& j);

class MotionDiffusion {
 public:
  MotionDiffusion(const MdmConfig& cfg, std::uint64_t seed);

  const MdmConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const NormStats& norm() const { return norm_; }
  void set_norm(NormStats n) { norm_ = std::move(n); }

  /// Tokens per item: [step, action, frames...]; returns the frame outputs.
  Tensor denoise(const Tensor& y_t, std::span<const std::size_t> t,
                 std::span<const std::size_t> labels, std::size_t batch) const;
  Denoiser denoiser() const;

  /// Clip, or pad by repeating the last frame, to T_f frames and normalize.
  NdValue motion_block(const MotionSequence& seq, std::size_t offset = 0) const;

  double train_step(const Tensor& y0, std::span<const std::size_t> labels, double lr, Rng& rng);
  MotionSequence sample(std::size_t label, std::uint64_t seed) const;

  void save(const std::filesystem::path& path) const;
  static MotionDiffusion load(const std::filesystem::path& path);

 private:
  MdmConfig cfg_;
  NoiseSchedule schedule_;
  NormStats norm_;
  ParamStore params_;
  Linear in_;
  Mlp time_mlp_, action_mlp_;
  std::vector<EncoderLayer> layers_;
  LayerNorm out_norm_;
  Linear out_;
};

struct TrainMdmOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;
  std::function<void(std::size_t step, double loss)> on_step;
};

/// Sequences must carry labels from the model's action set. Normalization is
/// computed from them if the model has none.
std::vector<double> train_mdm(MotionDiffusion& model, const std::vector<MotionSequence>& train,
                              const TrainMdmOptions& opts);

}  // namespace motionpred
