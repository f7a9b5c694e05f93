#pragma once

// Action-conditioned in-betweening VAE. Contexts and in-between frames are
// fed in normalized pose space after translating each item so the last
// start frame's root sits at the horizontal origin.

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "motionpred/motion.hpp"
#include "motionpred/seq_nets.hpp"

namespace motionpred {

enum class DecoderMode { owm, no_ofe, mhsa };

std::string decoder_mode_name(DecoderMode m);
DecoderMode decoder_mode_from_name(const std::string& s);

struct VaeConfig {
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ffn_width = 128;
  std::size_t period = 25;
  std::size_t latent = 32;
  std::size_t t_start = 5;
  std::size_t t_end = 5;
  std::size_t t_between = 20;
  DecoderMode mode = DecoderMode::owm;
  double w_mse = 100.0;
  double w_kl = 0.001;
  ActionSet actions = gait_actions();

  std::size_t window() const { return t_start + t_between + t_end; }
};

nlohmann::json vae_config_to_json(const VaeConfig& c);
VaeConfig vae_config_from_json(const nlohmann::json& j);

inline constexpr double kLogSigmaMin = -13.815510557964274;  // log 1e-6
inline constexpr double kLogSigmaMax = 13.815510557964274;

/// Batched diagonal Gaussian, rows are items: mu and log_sigma are [B, dz].
struct GaussianParams {
  Tensor mu;
  Tensor log_sigma;

  Tensor sigma() const { return exp(log_sigma); }
};

/// Splits an MLP output [B, 2 dz] into mean and clamped log sigma.
GaussianParams split_gaussian(const Tensor& raw, std::size_t latent);
/// z = mu + sigma * eps.
Tensor reparameterize(const GaussianParams& g, const Tensor& eps);
/// Closed-form KL(q || p) per item, summed over dimensions, averaged over rows.
Tensor kl_diag_gaussians(const GaussianParams& q, const GaussianParams& p);
/// Same divergence on plain vectors; rejects non-positive sigma.
double kl_diag_gaussians(std::span<const double> mu_q, std::span<const double> sigma_q,
                         std::span<const double> mu_p, std::span<const double> sigma_p);

struct ContextPair {
  std::vector<Pose> start;
  std::vector<Pose> end;
};

/// Network-ready inputs. Pose blocks are [B * T, N] with item-major rows.
struct VaeBatch {
  std::size_t size = 0;
  Tensor start;
  Tensor end;
  Tensor between;       // undefined at inference
  Tensor orient_start;  // [B, 6] rotation of the last start frame
  Tensor orient_end;    // [B, 6] rotation of the first end frame
  std::vector<std::size_t> labels;
  std::vector<std::array<double, 2>> origin;  // horizontal shift undone after decoding
};

/// Condition embeddings for a batch.
struct VaeCondition {
  std::size_t batch = 0;
  Tensor f_start, f_end, f_action;
  Tensor f_orient_start, f_orient_end;  // OFE outputs; undefined unless mode is owm
  Tensor f_offset;                      // undefined in mhsa mode
};

struct VaeLoss {
  Tensor total;
  Tensor mse;
  Tensor kl;
};

/// w_mse * mean squared error + w_kl * KL(q || p).
VaeLoss elbo_loss(const Tensor& predicted, const Tensor& target, const GaussianParams& q,
                  const GaussianParams& p, double w_mse, double w_kl);

class AinbVae {
 public:
  AinbVae(const VaeConfig& cfg, std::uint64_t seed);

  const VaeConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const NormStats& norm() const { return norm_; }
  void set_norm(NormStats n) { norm_ = std::move(n); }

  VaeBatch make_batch(const std::vector<ContextPair>& ctx, const std::vector<std::size_t>& labels,
                      const std::vector<std::vector<Pose>>* between = nullptr) const;
  /// Splits windows of length t_start + t_between + t_end into a batch.
  VaeBatch batch_from_windows(const std::vector<MotionSequence>& windows) const;

  Tensor encode_start(const Tensor& frames, std::size_t batch) const;
  Tensor encode_end(const Tensor& frames, std::size_t batch) const;
  Tensor encode_between(const Tensor& frames, std::size_t batch) const;
  Tensor encode_action(const std::vector<std::size_t>& labels) const;
  /// F^o from [B, 6] orientations. `regressor_input` receives the regressor's input if given.
  Tensor owm_offset(const Tensor& orient_start, const Tensor& orient_end,
                    Tensor* regressor_input = nullptr) const;

  VaeCondition condition(const VaeBatch& b) const;
  GaussianParams posterior(const VaeCondition& c, const Tensor& f_between) const;
  GaussianParams prior(const VaeCondition& c) const;
  /// [B * t_between, N] normalized poses.
  Tensor decode(const VaeCondition& c, const Tensor& z) const;

  /// Posterior path with the given standard-normal draw eps [B, dz].
  VaeLoss loss(const VaeBatch& b, const Tensor& eps) const;
  VaeLoss loss(const VaeBatch& b, Rng& rng) const;
  double train_step(const VaeBatch& b, double lr, Rng& rng);

  /// Decoded rows back to world-space poses, one vector per item.
  std::vector<std::vector<Pose>> to_poses(const VaeBatch& b, const Tensor& decoded) const;
  /// z from the learnable prior, then decode.
  std::vector<Pose> sample_inbetween(const ContextPair& ctx, std::size_t label,
                                     std::uint64_t seed) const;
  std::vector<Pose> decode_with(const ContextPair& ctx, std::size_t label,
                                std::span<const double> z) const;

  void save(const std::filesystem::path& path) const;
  static AinbVae load(const std::filesystem::path& path);

 private:
  VaeConfig cfg_;
  NormStats norm_;
  ParamStore params_;
  SequenceEncoder enc_start_, enc_end_, enc_between_;
  Mlp action_enc_, posterior_, prior_;
  Mlp ofe_start_, ofe_end_, offset_;
  Linear z_proj_, o_proj_, out_;
  std::vector<CrossLayer> cross_;
  std::vector<EncoderLayer> self_;
  LayerNorm out_norm_;
};

/// One training window per sequence and epoch at a random offset.
struct TrainVaeOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0 means no limit
  std::function<void(std::size_t step, double loss)> on_step;
};

/// Random window of `length` frames from `seq`.
MotionSequence random_window(const MotionSequence& seq, std::size_t length, Rng& rng);

/// Normalization over every window start of the train set, after recentring.
NormStats window_norm_stats(const std::vector<MotionSequence>& train, const VaeConfig& cfg);

std::vector<double> train_vae(AinbVae& model, const std::vector<MotionSequence>& train,
                              const TrainVaeOptions& opts);

/// Mean reconstruction MSE (normalized space) with z set to the posterior mean.
double vae_reconstruction_mse(const AinbVae& model, const std::vector<MotionSequence>& windows);

/// Sidecar path holding the JSON configuration next to a checkpoint.
std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

}  // namespace motionpred
