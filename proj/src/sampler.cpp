#include "motionpred/sampler.hpp"

#include <algorithm>
#include <fstream>

#include "motionpred/error.hpp"

namespace motionpred {

using nlohmann::json;

json sampler_config_to_json(const SamplerConfig& c) {
  return {{"branches", c.branches}, {"latent", c.latent}, {"cond_width", c.cond_width},
          {"hidden", c.hidden},     {"w_div", c.w_div},   {"w_kl", c.w_kl}};
}

SamplerConfig sampler_config_from_json(const json& j) {
  SamplerConfig c;
  c.branches = j.value("branches", c.branches);
  c.latent = j.value("latent", c.latent);
  c.cond_width = j.value("cond_width", c.cond_width);
  c.hidden = j.value("hidden", c.hidden);
  c.w_div = j.value("w_div", c.w_div);
  c.w_kl = j.value("w_kl", c.w_kl);
  return c;
}

std::vector<Tensor> map_latents(const Tensor& z, const BranchMaps& maps) {
  if (maps.branches < 2) {
    throw ValidationError("the sampler needs at least 2 branches, got " +
                          std::to_string(maps.branches));
  }
  if (z.rows() != maps.batch) {
    throw ShapeError("latent batch " + std::to_string(z.rows()) + " vs maps for " +
                     std::to_string(maps.batch));
  }
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < maps.branches; ++l) {
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < maps.batch; ++i) {
      rows.push_back(add(matmul(slice_rows(z, i, 1), transpose(maps.a_at(i, l))),
                         maps.b_at(i, l)));
    }
    out.push_back(maps.batch == 1 ? rows[0] : concat_rows(rows));
  }
  return out;
}

BranchKl branch_kl(const Tensor& a, const Tensor& b, const Tensor& mu, const Tensor& log_sigma) {
  const std::size_t k = a.rows();
  if (a.cols() != k || b.numel() != k || mu.numel() != k || log_sigma.numel() != k) {
    throw ShapeError("branch_kl: A " + shape_str(a.shape()) + ", b " + shape_str(b.shape()) +
                     ", prior " + shape_str(mu.shape()));
  }
  const Tensor bb = reshape(b, {1, k}), m = reshape(mu, {1, k}), ls = reshape(log_sigma, {1, k});
  const Tensor inv_var = exp(scale(ls, -2.0));
  const Tensor trace = sum(mul_row(square(transpose(a)), reshape(inv_var, {k})));
  const Tensor maha = sum(mul(square(sub(m, bb)), inv_var));
  const double floor = -60.0 * static_cast<double>(k);
  BranchKl out;
  Tensor logdet;
  try {
    logdet = scale(logabsdet(a), 2.0);
    if (logdet.item() < floor) out.clamped = true;
  } catch (const NumericError&) {
    out.clamped = true;
  }
  if (out.clamped) logdet = Tensor::scalar(floor);
  const Tensor inner =
      sub(add(add(trace, maha), scale(sum(ls), 2.0)), add_scalar(logdet, static_cast<double>(k)));
  out.kl = scale(inner, 0.5);
  return out;
}

Tensor pair_distance(const Tensor& y_i, const Tensor& y_j) {
  return sqrt(sum(square(sub(y_i, y_j))));
}

Tensor sampler_loss(const std::vector<Tensor>& outputs, std::size_t batch,
                    const std::vector<Tensor>& kls, double w_div, double w_kl) {
  const std::size_t L = outputs.size();
  if (L < 2) throw ValidationError("sampler loss needs at least 2 branch outputs");
  if (batch == 0 || outputs[0].rows() % batch != 0) {
    throw ShapeError("sampler loss: " + std::to_string(outputs[0].rows()) +
                     " rows for batch " + std::to_string(batch));
  }
  if (kls.size() != batch * L) {
    throw ShapeError("sampler loss: " + std::to_string(kls.size()) + " KL terms, expected " +
                     std::to_string(batch * L));
  }
  const std::size_t T = outputs[0].rows() / batch;
  Tensor total;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<Tensor> d;
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = i + 1; j < L; ++j)
        d.push_back(pair_distance(slice_rows(outputs[i], b * T, T),
                                  slice_rows(outputs[j], b * T, T)));
    Tensor item = scale(min_of(d), -w_div);
    for (std::size_t l = 0; l < L; ++l) item = add(item, scale(kls[b * L + l], w_kl));
    total = total.defined() ? add(total, item) : item;
  }
  return scale(total, 1.0 / static_cast<double>(batch));
}

DiversitySampler::DiversitySampler(const SamplerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.branches < 2) {
    throw ValidationError("the sampler needs at least 2 branches, got " +
                          std::to_string(cfg.branches));
  }
  if (cfg.latent == 0 || cfg.cond_width == 0 || cfg.hidden == 0) {
    throw ValidationError("sampler widths must be positive");
  }
  if (cfg.w_div < 0 || cfg.w_kl < 0) throw ValidationError("sampler weights must be nonnegative");
  Rng rng(seed);
  const std::size_t per = cfg.latent * cfg.latent + cfg.latent;
  net_ = Mlp::create(params_, "sampler", {3 * cfg.cond_width, cfg.hidden, cfg.branches * per},
                     rng, 0.1);
}

SamplerConfig DiversitySampler::config_for(const VaeConfig& vae, std::size_t branches) {
  SamplerConfig c;
  c.branches = branches;
  c.latent = vae.latent;
  c.cond_width = vae.width;
  c.hidden = vae.width;
  return c;
}

BranchMaps DiversitySampler::maps(const VaeCondition& c, const GaussianParams& prior) const {
  NameScope scope("sampler");
  const std::size_t k = cfg_.latent, per = k * k + k;
  const Tensor raw = net_(concat_cols({c.f_start, c.f_end, c.f_action}));
  std::vector<double> eye(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) eye[i * k + i] = 1.0;
  const Tensor identity = Tensor::constant({k, k}, eye);
  const Tensor ones = Tensor::constant({1, k}, std::vector<double>(k, 1.0));
  BranchMaps m;
  m.batch = c.batch;
  m.branches = cfg_.branches;
  for (std::size_t i = 0; i < c.batch; ++i) {
    const Tensor row = slice_rows(raw, i, 1);
    const Tensor mu = slice_rows(prior.mu, i, 1);
    const Tensor sigma = exp(slice_rows(prior.log_sigma, i, 1));
    const Tensor row_scale = matmul(transpose(sigma), ones);
    for (std::size_t l = 0; l < cfg_.branches; ++l) {
      const Tensor d = add(identity, reshape(slice_cols(row, l * per, k * k), {k, k}));
      m.a.push_back(mul(row_scale, d));
      m.b.push_back(add(mu, mul(sigma, slice_cols(row, l * per + k * k, k))));
    }
  }
  return m;
}

std::vector<BranchKl> DiversitySampler::kls(const BranchMaps& m, const GaussianParams& prior) const {
  std::vector<BranchKl> out;
  for (std::size_t i = 0; i < m.batch; ++i) {
    const Tensor mu = slice_rows(prior.mu, i, 1), ls = slice_rows(prior.log_sigma, i, 1);
    for (std::size_t l = 0; l < m.branches; ++l)
      out.push_back(branch_kl(m.a_at(i, l), m.b_at(i, l), mu, ls));
  }
  return out;
}

Tensor DiversitySampler::loss(const AinbVae& vae, const VaeBatch& b, const Tensor& z,
                              SamplerStep* info) const {
  if (vae.config().latent != cfg_.latent || vae.config().width != cfg_.cond_width) {
    throw ValidationError("sampler shape does not match the VAE");
  }
  VaeCondition c;
  GaussianParams prior;
  {
    NoGradGuard no_grad;
    c = vae.condition(b);
    prior = vae.prior(c);
  }
  const BranchMaps m = maps(c, prior);
  const auto zs = map_latents(z, m);
  std::vector<Tensor> outputs;
  for (const auto& zl : zs) outputs.push_back(vae.decode(c, zl));
  const auto branch = kls(m, prior);
  std::vector<Tensor> kl_terms;
  SamplerStep s;
  for (const auto& k : branch) {
    kl_terms.push_back(k.kl);
    s.mean_kl += k.kl.item();
    s.kl_clamped = s.kl_clamped || k.clamped;
  }
  const Tensor l = sampler_loss(outputs, b.size, kl_terms, cfg_.w_div, cfg_.w_kl);
  if (info) {
    s.loss = l.item();
    s.mean_kl /= static_cast<double>(branch.size());
    if (cfg_.w_div > 0)
      s.min_distance = (cfg_.w_kl * s.mean_kl * cfg_.branches - s.loss) / cfg_.w_div;
    *info = s;
  }
  return l;
}

std::vector<std::vector<Pose>> DiversitySampler::sample(const AinbVae& vae, const ContextPair& ctx,
                                                        std::size_t label,
                                                        std::uint64_t seed) const {
  NoGradGuard no_grad;
  const VaeBatch b = vae.make_batch({ctx}, {label});
  const VaeCondition c = vae.condition(b);
  Rng rng(seed);
  const Tensor z = Tensor::constant({1, cfg_.latent}, rng.normal_vector(cfg_.latent));
  std::vector<std::vector<Pose>> out;
  for (const auto& zl : map_latents(z, maps(c, vae.prior(c)))) out.push_back(vae.to_poses(b, vae.decode(c, zl))[0]);
  return out;
}

void DiversitySampler::save(const std::filesystem::path& path) const {
  params_.save(path);
  std::ofstream out(sidecar_path(path));
  if (!out) throw Error("cannot write " + sidecar_path(path).string());
  out << json{{"kind", "sampler"}, {"config", sampler_config_to_json(cfg_)}}.dump(2) << '\n';
}

DiversitySampler DiversitySampler::load(const std::filesystem::path& path) {
  std::ifstream in(sidecar_path(path));
  if (!in) throw Error("missing config sidecar " + sidecar_path(path).string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(sidecar_path(path).string() + ": " + e.what());
  }
  if (j.value("kind", std::string()) != "sampler") {
    throw FormatError(sidecar_path(path).string() + " is not a sampler sidecar");
  }
  DiversitySampler s(sampler_config_from_json(j.at("config")), 0);
  s.params_.load(path);
  return s;
}

std::vector<SamplerStep> train_sampler(DiversitySampler& sampler, AinbVae& vae,
                                       const std::vector<MotionSequence>& train,
                                       const TrainSamplerOptions& opts) {
  const std::size_t len = vae.config().window();
  std::vector<const MotionSequence*> usable;
  for (const auto& s : train)
    if (s.size() >= len) usable.push_back(&s);
  if (usable.empty()) throw ValidationError("no training sequence is long enough for one window");
  if (opts.batch_size == 0) throw ValidationError("batch size must be >= 1");
  const std::uint64_t frozen = vae.params().fingerprint();
  const std::size_t dz = sampler.config().latent;
  struct Freeze {
    ParamStore& p;
    explicit Freeze(ParamStore& s) : p(s) { p.set_trainable(false); }
    ~Freeze() { p.set_trainable(true); }
  } freeze(vae.params());

  Rng rng(opts.seed);
  std::vector<SamplerStep> steps;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::vector<MotionSequence> windows;
    for (const auto* s : usable) windows.push_back(random_window(*s, len, rng));
    std::shuffle(windows.begin(), windows.end(), rng.engine());
    for (std::size_t i = 0; i < windows.size(); i += opts.batch_size) {
      std::vector<MotionSequence> chunk(
          windows.begin() + i, windows.begin() + std::min(windows.size(), i + opts.batch_size));
      const VaeBatch b = vae.batch_from_windows(chunk);
      const Tensor z = Tensor::constant({b.size, dz}, rng.normal_vector(b.size * dz));
      SamplerStep info;
      try {
        const Tensor l = sampler.loss(vae, b, z, &info);
        backward(l);
        sampler.params().adam_step(opts.lr);
      } catch (const NumericError& e) {
        sampler.params().zero_grad();
        throw NumericError("sampler train step " + std::to_string(steps.size() + 1) +
                           " aborted: " + e.what());
      }
      if (vae.params().fingerprint() != frozen) {
        throw Error("VAE parameters changed during sampler training");
      }
      steps.push_back(info);
      if (opts.on_step) opts.on_step(steps.size(), info);
      if (opts.max_steps && steps.size() >= opts.max_steps) return steps;
    }
  }
  return steps;
}

}  // namespace motionpred
