#pragma once

// Post-hoc diversity sampler: one latent draw is mapped through L affine
// branches z_l = A_l z + b_l, with (A_l, b_l) produced per item from the
// VAE's condition embeddings. The VAE stays frozen.
//
// Maps are expressed relative to the learned prior N(mu, diag(sigma^2)):
// A_l = diag(sigma) (I + D_l) and b_l = mu + sigma * d_l, where the network
// outputs (D_l, d_l).

#include <filesystem>
#include <functional>
#include <vector>

#include <json.hpp>

#include "motionpred/ainb_vae.hpp"

namespace motionpred {

struct SamplerConfig {
  std::size_t branches = 5;
  std::size_t latent = 32;
  std::size_t cond_width = 64;  // VAE embedding width d; the MLP reads [F^s, F^e, F^a]
  std::size_t hidden = 64;
  double w_div = 90.0;
  double w_kl = 1.0;
};

nlohmann::json sampler_config_to_json(const SamplerConfig& c);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

/// Per-item affine maps: a[item * L + l] is [dz, dz], b likewise [1, dz].
struct BranchMaps {
  std::size_t batch = 0;
  std::size_t branches = 0;
  std::vector<Tensor> a;
  std::vector<Tensor> b;

  const Tensor& a_at(std::size_t item, std::size_t l) const { return a[item * branches + l]; }
  const Tensor& b_at(std::size_t item, std::size_t l) const { return b[item * branches + l]; }
};

/// z [B, dz] -> L tensors [B, dz].
std::vector<Tensor> map_latents(const Tensor& z, const BranchMaps& maps);

struct BranchKl {
  Tensor kl;
  bool clamped = false;  // log det(A A^T) hit the -60 per dimension floor
};

/// KL(N(b, A A^T) || N(mu, diag(sigma^2))) for one branch. mu and log_sigma are [1, dz].
BranchKl branch_kl(const Tensor& a, const Tensor& b, const Tensor& mu, const Tensor& log_sigma);

/// L2 distance between two items' outputs.
Tensor pair_distance(const Tensor& y_i, const Tensor& y_j);

/// outputs[l] holds branch l's decoded rows [B * T, N]. Per item:
/// -w_div * min_{i<j} distance + w_kl * sum of that item's branch KLs,
/// averaged over items. kls is [B * L] scalars, item-major.
Tensor sampler_loss(const std::vector<Tensor>& outputs, std::size_t batch,
                    const std::vector<Tensor>& kls, double w_div, double w_kl);

struct SamplerStep {
  double loss = 0;
  double mean_kl = 0;
  double min_distance = 0;
  bool kl_clamped = false;
};

class DiversitySampler {
 public:
  DiversitySampler(const SamplerConfig& cfg, std::uint64_t seed);
  /// Shapes the sampler after a trained VAE.
  static SamplerConfig config_for(const VaeConfig& vae, std::size_t branches = 5);

  const SamplerConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  BranchMaps maps(const VaeCondition& c, const GaussianParams& prior) const;

  /// Per-branch KLs against the VAE prior, item-major.
  std::vector<BranchKl> kls(const BranchMaps& m, const GaussianParams& prior) const;

  /// Full loss on one batch of contexts with latent draw z [B, dz].
  Tensor loss(const AinbVae& vae, const VaeBatch& b, const Tensor& z, SamplerStep* info = nullptr) const;

  /// L in-betweenings from a single standard-normal draw.
  std::vector<std::vector<Pose>> sample(const AinbVae& vae, const ContextPair& ctx,
                                        std::size_t label, std::uint64_t seed) const;

  void save(const std::filesystem::path& path) const;
  static DiversitySampler load(const std::filesystem::path& path);

 private:
  SamplerConfig cfg_;
  ParamStore params_;
  Mlp net_;
};

struct TrainSamplerOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 0.01;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;
  std::function<void(std::size_t step, const SamplerStep&)> on_step;
};

/// Contexts are drawn as random VAE windows from `train`. Throws if the VAE's
/// parameters change during training.
std::vector<SamplerStep> train_sampler(DiversitySampler& sampler, AinbVae& vae,
                                       const std::vector<MotionSequence>& train,
                                       const TrainSamplerOptions& opts);

}  // namespace motionpred
