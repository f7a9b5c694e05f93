#include "motionpred/ainb_vae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "motionpred/dataset.hpp"
#include "motionpred/error.hpp"

namespace motionpred {

using nlohmann::json;

std::string decoder_mode_name(DecoderMode m) {
  switch (m) {
    case DecoderMode::owm: return "owm";
    case DecoderMode::no_ofe: return "no_ofe";
    case DecoderMode::mhsa: return "mhsa";
  }
  return "owm";
}

DecoderMode decoder_mode_from_name(const std::string& s) {
  if (s == "owm") return DecoderMode::owm;
  if (s == "no_ofe") return DecoderMode::no_ofe;
  if (s == "mhsa") return DecoderMode::mhsa;
  throw ValidationError("unknown decoder mode '" + s + "' (owm, no_ofe, mhsa)");
}

json vae_config_to_json(const VaeConfig& c) {
  return {{"width", c.width},         {"heads", c.heads},       {"layers", c.layers},
          {"ffn_width", c.ffn_width}, {"period", c.period},     {"latent", c.latent},
          {"t_start", c.t_start},     {"t_end", c.t_end},       {"t_between", c.t_between},
          {"mode", decoder_mode_name(c.mode)},
          {"w_mse", c.w_mse},         {"w_kl", c.w_kl},         {"actions", c.actions.names()}};
}

VaeConfig vae_config_from_json(const json& j) {
  VaeConfig c;
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.layers = j.value("layers", c.layers);
  c.ffn_width = j.value("ffn_width", c.ffn_width);
  c.period = j.value("period", c.period);
  c.latent = j.value("latent", c.latent);
  c.t_start = j.value("t_start", c.t_start);
  c.t_end = j.value("t_end", c.t_end);
  c.t_between = j.value("t_between", c.t_between);
  c.mode = decoder_mode_from_name(j.value("mode", std::string("owm")));
  c.w_mse = j.value("w_mse", c.w_mse);
  c.w_kl = j.value("w_kl", c.w_kl);
  if (j.contains("actions")) c.actions = ActionSet::from_names(j["actions"]);
  return c;
}

GaussianParams split_gaussian(const Tensor& raw, std::size_t latent) {
  if (raw.cols() != 2 * latent) {
    throw ShapeError("gaussian head width " + std::to_string(raw.cols()) + ", expected " +
                     std::to_string(2 * latent));
  }
  return {slice_cols(raw, 0, latent),
          clamp(slice_cols(raw, latent, latent), kLogSigmaMin, kLogSigmaMax)};
}

Tensor reparameterize(const GaussianParams& g, const Tensor& eps) {
  return add(g.mu, mul(g.sigma(), eps));
}

Tensor kl_diag_gaussians(const GaussianParams& q, const GaussianParams& p) {
  if (q.mu.shape() != p.mu.shape() || q.log_sigma.shape() != p.log_sigma.shape()) {
    throw ShapeError("kl: " + shape_str(q.mu.shape()) + " vs " + shape_str(p.mu.shape()));
  }
  const Tensor ratio = exp(scale(sub(q.log_sigma, p.log_sigma), 2.0));
  const Tensor mean_term = mul(square(sub(q.mu, p.mu)), exp(scale(p.log_sigma, -2.0)));
  const Tensor per = add(sub(p.log_sigma, q.log_sigma), scale(add(ratio, mean_term), 0.5));
  const double n = static_cast<double>(q.mu.numel());
  return scale(add_scalar(sum(per), -0.5 * n), 1.0 / static_cast<double>(q.mu.rows()));
}

double kl_diag_gaussians(std::span<const double> mu_q, std::span<const double> sigma_q,
                         std::span<const double> mu_p, std::span<const double> sigma_p) {
  const std::size_t n = mu_q.size();
  if (sigma_q.size() != n || mu_p.size() != n || sigma_p.size() != n) {
    throw ShapeError("kl: mismatched dimensions");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(sigma_q[i] > 0) || !(sigma_p[i] > 0)) {
      throw ValidationError("kl: sigma must be positive (dimension " + std::to_string(i) + ")");
    }
    const double dm = mu_q[i] - mu_p[i];
    kl += std::log(sigma_p[i] / sigma_q[i]) +
          (sigma_q[i] * sigma_q[i] + dm * dm) / (2 * sigma_p[i] * sigma_p[i]) - 0.5;
  }
  return kl;
}

VaeLoss elbo_loss(const Tensor& predicted, const Tensor& target, const GaussianParams& q,
                  const GaussianParams& p, double w_mse, double w_kl) {
  VaeLoss l;
  l.mse = mean(square(sub(predicted, target)));
  l.kl = kl_diag_gaussians(q, p);
  l.total = add(scale(l.mse, w_mse), scale(l.kl, w_kl));
  return l;
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".json";
}

AinbVae::AinbVae(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.t_start == 0 || cfg.t_end == 0 || cfg.t_between == 0) {
    throw ValidationError("context and in-between lengths must be >= 1");
  }
  if (cfg.actions.size() < 2) throw ValidationError("VAE needs at least two actions");
  Rng rng(seed);
  const std::size_t d = cfg.width, dz = cfg.latent;
  SequenceEncoderConfig enc{kPoseDim, d, cfg.heads, cfg.layers, cfg.ffn_width, cfg.period,
                            MaskKind::none};
  enc_start_ = SequenceEncoder(params_, "enc_start", enc, rng);
  enc_end_ = SequenceEncoder(params_, "enc_end", enc, rng);
  enc.mask = MaskKind::periodic_causal;
  enc_between_ = SequenceEncoder(params_, "enc_between", enc, rng);
  action_enc_ = Mlp::create(params_, "enc_action", {cfg.actions.size(), d, d}, rng);
  posterior_ = Mlp::create(params_, "posterior", {4 * d, d, 2 * dz}, rng, 0.1);
  prior_ = Mlp::create(params_, "prior", {3 * d, d, 2 * dz}, rng, 0.1);
  if (cfg.mode == DecoderMode::owm) {
    ofe_start_ = Mlp::create(params_, "ofe_start", {6, d, d}, rng);
    ofe_end_ = Mlp::create(params_, "ofe_end", {6, d, d}, rng);
    offset_ = Mlp::create(params_, "offset", {d, d, d}, rng);
  } else if (cfg.mode == DecoderMode::no_ofe) {
    offset_ = Mlp::create(params_, "offset", {6, d, d}, rng);
  }
  z_proj_ = Linear::create(params_, "z_proj", dz, d, rng);
  if (cfg.mode != DecoderMode::mhsa) o_proj_ = Linear::create(params_, "o_proj", d, d, rng);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string name = "decoder" + std::to_string(i);
    if (cfg.mode == DecoderMode::mhsa)
      self_.push_back(EncoderLayer::create(params_, name, d, cfg.heads, cfg.ffn_width, rng));
    else
      cross_.push_back(CrossLayer::create(params_, name, d, cfg.heads, cfg.ffn_width, rng));
  }
  out_norm_ = LayerNorm::create(params_, "decoder_ln", d);
  out_ = Linear::create(params_, "decoder_out", d, kPoseDim, rng);
}

namespace {

Tensor orient6(const std::vector<const Pose*>& poses) {
  std::vector<double> data;
  for (const Pose* p : poses) {
    const Rot6 r = matrix_to_rot6(p->root_orientation.normalized().toRotationMatrix());
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor::constant({poses.size(), 6}, std::move(data));
}

void append_block(std::vector<double>& dst, const std::vector<Pose>& frames, double dx,
                  double dz, const NormStats* norm) {
  for (Pose p : frames) {
    p.root_translation.x() -= dx;
    p.root_translation.z() -= dz;
    auto v = pose_vectorize(p, norm);
    dst.insert(dst.end(), v.begin(), v.end());
  }
}

}  // namespace

VaeBatch AinbVae::make_batch(const std::vector<ContextPair>& ctx,
                             const std::vector<std::size_t>& labels,
                             const std::vector<std::vector<Pose>>* between) const {
  if (ctx.empty()) throw ValidationError("VAE batch of size 0");
  if (labels.size() != ctx.size() || (between && between->size() != ctx.size())) {
    throw ValidationError("VAE batch: mismatched context, label and target counts");
  }
  if (norm_.empty()) throw ValidationError("VAE has no normalization statistics");
  VaeBatch b;
  b.size = ctx.size();
  std::vector<double> s, e, m;
  std::vector<const Pose*> os, oe;
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    const auto& c = ctx[i];
    if (c.start.size() != cfg_.t_start || c.end.size() != cfg_.t_end) {
      throw ValidationError("context lengths (" + std::to_string(c.start.size()) + ", " +
                            std::to_string(c.end.size()) + "), model expects (" +
                            std::to_string(cfg_.t_start) + ", " + std::to_string(cfg_.t_end) +
                            ")");
    }
    if (labels[i] >= cfg_.actions.size()) {
      throw ValidationError("label index " + std::to_string(labels[i]) + " >= " +
                            std::to_string(cfg_.actions.size()));
    }
    const Vec3 anchor = c.start.back().root_translation;
    b.origin.push_back({anchor.x(), anchor.z()});
    append_block(s, c.start, anchor.x(), anchor.z(), &norm_);
    append_block(e, c.end, anchor.x(), anchor.z(), &norm_);
    if (between) {
      if ((*between)[i].size() != cfg_.t_between) {
        throw ValidationError("in-between length " + std::to_string((*between)[i].size()) +
                              ", model is trained for " + std::to_string(cfg_.t_between));
      }
      append_block(m, (*between)[i], anchor.x(), anchor.z(), &norm_);
    }
    os.push_back(&c.start.back());
    oe.push_back(&c.end.front());
  }
  b.start = Tensor::constant({b.size * cfg_.t_start, kPoseDim}, std::move(s));
  b.end = Tensor::constant({b.size * cfg_.t_end, kPoseDim}, std::move(e));
  if (between) b.between = Tensor::constant({b.size * cfg_.t_between, kPoseDim}, std::move(m));
  b.orient_start = orient6(os);
  b.orient_end = orient6(oe);
  b.labels = labels;
  return b;
}

VaeBatch AinbVae::batch_from_windows(const std::vector<MotionSequence>& windows) const {
  std::vector<ContextPair> ctx;
  std::vector<std::size_t> labels;
  std::vector<std::vector<Pose>> between;
  for (const auto& w : windows) {
    if (w.size() != cfg_.window()) {
      throw ValidationError("window '" + w.id + "' has " + std::to_string(w.size()) +
                            " frames, expected " + std::to_string(cfg_.window()));
    }
    const auto b0 = w.frames.begin();
    ctx.push_back({{b0, b0 + cfg_.t_start},
                   {b0 + cfg_.t_start + cfg_.t_between, w.frames.end()}});
    between.emplace_back(b0 + cfg_.t_start, b0 + cfg_.t_start + cfg_.t_between);
    labels.push_back(cfg_.actions.index_of(w.label));
  }
  return make_batch(ctx, labels, &between);
}

namespace {
void check_frames(const Tensor& frames, const char* which) {
  if (frames.cols() != kPoseDim) {
    throw ShapeError(std::string(which) + " frames have width " + std::to_string(frames.cols()) +
                     ", the model's skeleton needs " + std::to_string(kPoseDim));
  }
}
}  // namespace

Tensor AinbVae::encode_start(const Tensor& frames, std::size_t batch) const {
  NameScope scope("enc_start");
  check_frames(frames, "start");
  return enc_start_.encode(frames, batch);
}

Tensor AinbVae::encode_end(const Tensor& frames, std::size_t batch) const {
  NameScope scope("enc_end");
  check_frames(frames, "end");
  return enc_end_.encode(frames, batch);
}

Tensor AinbVae::encode_between(const Tensor& frames, std::size_t batch) const {
  NameScope scope("enc_between");
  check_frames(frames, "in-between");
  return enc_between_.encode(frames, batch);
}

Tensor AinbVae::encode_action(const std::vector<std::size_t>& labels) const {
  std::vector<double> hot(labels.size() * cfg_.actions.size(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= cfg_.actions.size()) {
      throw ValidationError("label index " + std::to_string(labels[i]) + " >= " +
                            std::to_string(cfg_.actions.size()));
    }
    hot[i * cfg_.actions.size() + labels[i]] = 1.0;
  }
  return action_enc_(Tensor::constant({labels.size(), cfg_.actions.size()}, std::move(hot)));
}

Tensor AinbVae::owm_offset(const Tensor& orient_start, const Tensor& orient_end,
                           Tensor* regressor_input) const {
  NameScope scope("owm");
  Tensor input;
  if (cfg_.mode == DecoderMode::owm) {
    input = sub(ofe_end_(orient_end), ofe_start_(orient_start));
  } else if (cfg_.mode == DecoderMode::no_ofe) {
    input = sub(orient_end, orient_start);
  } else {
    throw ValidationError("the mhsa decoder mode has no orientation-warping module");
  }
  if (regressor_input) *regressor_input = input;
  return offset_(input);
}

VaeCondition AinbVae::condition(const VaeBatch& b) const {
  VaeCondition c;
  c.batch = b.size;
  c.f_start = encode_start(b.start, b.size);
  c.f_end = encode_end(b.end, b.size);
  c.f_action = encode_action(b.labels);
  if (cfg_.mode == DecoderMode::owm) {
    c.f_orient_start = ofe_start_(b.orient_start);
    c.f_orient_end = ofe_end_(b.orient_end);
  }
  if (cfg_.mode != DecoderMode::mhsa) c.f_offset = owm_offset(b.orient_start, b.orient_end);
  return c;
}

GaussianParams AinbVae::posterior(const VaeCondition& c, const Tensor& f_between) const {
  if (!f_between.defined()) {
    throw ValidationError("posterior needs the in-between embedding (training only)");
  }
  return split_gaussian(posterior_(concat_cols({c.f_start, c.f_end, f_between, c.f_action})),
                        cfg_.latent);
}

GaussianParams AinbVae::prior(const VaeCondition& c) const {
  return split_gaussian(prior_(concat_cols({c.f_start, c.f_end, c.f_action})), cfg_.latent);
}

Tensor AinbVae::decode(const VaeCondition& c, const Tensor& z) const {
  NameScope scope("decoder");
  const std::size_t B = c.batch, T = cfg_.t_between;
  if (z.rows() != B || z.cols() != cfg_.latent) {
    throw ShapeError("decoder latent " + shape_str(z.shape()) + ", expected [" +
                     std::to_string(B) + ", " + std::to_string(cfg_.latent) + "]");
  }
  const Tensor zp = z_proj_(z);
  // F^cat tokens, item-major: [z, F^a, F^s, F^e] per item.
  std::vector<std::size_t> kv_order;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < 4; ++k) kv_order.push_back(k * B + b);
  const Tensor kv = gather_rows(concat_rows({zp, c.f_action, c.f_start, c.f_end}), kv_order);
  const Tensor pooled = scale(add(add(zp, c.f_action), add(c.f_start, c.f_end)), 0.25);

  std::vector<std::size_t> tile;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) tile.push_back(t);
  const auto rep = repeat_index(B, T);
  Tensor q = add(gather_rows(periodic_pos_table(T, cfg_.period, cfg_.width), tile),
                 gather_rows(pooled, rep));

  Tensor h;
  if (cfg_.mode == DecoderMode::mhsa) {
    std::vector<std::size_t> order, keep;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < T; ++t) {
        keep.push_back(order.size());
        order.push_back(b * T + t);
      }
      for (std::size_t k = 0; k < 4; ++k) order.push_back(B * T + b * 4 + k);
    }
    h = gather_rows(concat_rows({q, kv}), order);
    for (const auto& layer : self_) h = layer(h, B, nullptr);
    h = gather_rows(h, keep);
  } else {
    h = add(q, gather_rows(o_proj_(c.f_offset), rep));
    for (const auto& layer : cross_) h = layer(h, kv, B);
  }
  return out_(out_norm_(h));
}

VaeLoss AinbVae::loss(const VaeBatch& b, const Tensor& eps) const {
  if (!b.between.defined()) throw ValidationError("training batch lacks in-between frames");
  const VaeCondition c = condition(b);
  const GaussianParams q = posterior(c, encode_between(b.between, b.size));
  const GaussianParams p = prior(c);
  return elbo_loss(decode(c, reparameterize(q, eps)), b.between, q, p, cfg_.w_mse, cfg_.w_kl);
}

VaeLoss AinbVae::loss(const VaeBatch& b, Rng& rng) const {
  return loss(b, Tensor::constant({b.size, cfg_.latent}, rng.normal_vector(b.size * cfg_.latent)));
}

double AinbVae::train_step(const VaeBatch& b, double lr, Rng& rng) {
  if (b.size == 0) throw ValidationError("VAE batch of size 0");
  try {
    const VaeLoss l = loss(b, rng);
    backward(l.total);
    params_.adam_step(lr);
    return l.total.item();
  } catch (const NumericError& e) {
    params_.zero_grad();
    throw NumericError("VAE train step " + std::to_string(params_.step_count() + 1) +
                       " aborted: " + e.what());
  }
}

std::vector<std::vector<Pose>> AinbVae::to_poses(const VaeBatch& b, const Tensor& decoded) const {
  const std::size_t T = cfg_.t_between;
  std::vector<std::vector<Pose>> out;
  for (std::size_t i = 0; i < b.size; ++i) {
    auto poses = matrix_poses(decoded.data().subspan(i * T * kPoseDim, T * kPoseDim), T, &norm_);
    translate_xz(poses, b.origin[i][0], b.origin[i][1]);
    out.push_back(std::move(poses));
  }
  return out;
}

std::vector<Pose> AinbVae::decode_with(const ContextPair& ctx, std::size_t label,
                                       std::span<const double> z) const {
  if (z.size() != cfg_.latent) throw ShapeError("latent of length " + std::to_string(z.size()));
  NoGradGuard no_grad;
  const VaeBatch b = make_batch({ctx}, {label});
  const VaeCondition c = condition(b);
  return to_poses(b, decode(c, Tensor::constant({1, cfg_.latent}, {z.begin(), z.end()})))[0];
}

std::vector<Pose> AinbVae::sample_inbetween(const ContextPair& ctx, std::size_t label,
                                            std::uint64_t seed) const {
  NoGradGuard no_grad;
  const VaeBatch b = make_batch({ctx}, {label});
  const VaeCondition c = condition(b);
  Rng rng(seed);
  const Tensor z = reparameterize(prior(c), Tensor::constant({1, cfg_.latent},
                                                             rng.normal_vector(cfg_.latent)));
  return to_poses(b, decode(c, z))[0];
}

void AinbVae::save(const std::filesystem::path& path) const {
  params_.save(path);
  std::ofstream out(sidecar_path(path));
  if (!out) throw Error("cannot write " + sidecar_path(path).string());
  out << json{{"kind", "ainb-vae"}, {"config", vae_config_to_json(cfg_)},
              {"normalization", norm_to_json(norm_)}}
             .dump(2)
      << '\n';
}

AinbVae AinbVae::load(const std::filesystem::path& path) {
  std::ifstream in(sidecar_path(path));
  if (!in) throw Error("missing config sidecar " + sidecar_path(path).string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(sidecar_path(path).string() + ": " + e.what());
  }
  if (j.value("kind", std::string()) != "ainb-vae") {
    throw FormatError(sidecar_path(path).string() + " is not a VAE sidecar");
  }
  AinbVae m(vae_config_from_json(j.at("config")), 0);
  m.params_.load(path);
  m.set_norm(norm_from_json(j.at("normalization")));
  return m;
}

MotionSequence random_window(const MotionSequence& seq, std::size_t length, Rng& rng) {
  if (seq.size() < length) {
    throw ValidationError("sequence '" + seq.id + "' shorter than window " +
                          std::to_string(length));
  }
  const auto start = static_cast<std::size_t>(
      rng.integer(0, static_cast<std::int64_t>(seq.size() - length)));
  return seq.slice(start, length);
}

NormStats window_norm_stats(const std::vector<MotionSequence>& train, const VaeConfig& cfg) {
  const std::size_t len = cfg.window();
  std::vector<double> s(kPoseDim, 0.0), s2(kPoseDim, 0.0);
  double count = 0;
  for (const auto& seq : train) {
    if (seq.size() < len) continue;
    std::vector<std::vector<double>> vecs;
    for (const auto& f : seq.frames) vecs.push_back(pose_vectorize(f));
    for (std::size_t off = 0; off + len <= seq.size(); ++off) {
      const auto& anchor = vecs[off + cfg.t_start - 1];
      for (std::size_t t = off; t < off + len; ++t) {
        auto v = vecs[t];
        v[0] -= anchor[0];
        v[2] -= anchor[2];
        for (std::size_t i = 0; i < kPoseDim; ++i) {
          s[i] += v[i];
          s2[i] += v[i] * v[i];
        }
        count += 1;
      }
    }
  }
  if (count == 0) throw ValidationError("no training sequence is long enough for one window");
  NormStats n{std::vector<double>(kPoseDim), std::vector<double>(kPoseDim)};
  for (std::size_t i = 0; i < kPoseDim; ++i) {
    n.mean[i] = s[i] / count;
    n.std[i] = std::max(std::sqrt(std::max(s2[i] / count - n.mean[i] * n.mean[i], 0.0)),
                        kStdFloor);
  }
  return n;
}

std::vector<double> train_vae(AinbVae& model, const std::vector<MotionSequence>& train,
                              const TrainVaeOptions& opts) {
  const std::size_t len = model.config().window();
  std::vector<const MotionSequence*> usable;
  for (const auto& s : train)
    if (s.size() >= len) usable.push_back(&s);
  if (usable.empty()) throw ValidationError("no training sequence is long enough for one window");
  if (opts.batch_size == 0) throw ValidationError("batch size must be >= 1");
  if (model.norm().empty()) model.set_norm(window_norm_stats(train, model.config()));

  Rng rng(opts.seed);
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::vector<MotionSequence> windows;
    for (const auto* s : usable) windows.push_back(random_window(*s, len, rng));
    std::shuffle(windows.begin(), windows.end(), rng.engine());
    for (std::size_t i = 0; i < windows.size(); i += opts.batch_size) {
      std::vector<MotionSequence> chunk(
          windows.begin() + i, windows.begin() + std::min(windows.size(), i + opts.batch_size));
      const double l = model.train_step(model.batch_from_windows(chunk), opts.lr, rng);
      losses.push_back(l);
      if (opts.on_step) opts.on_step(losses.size(), l);
      if (opts.max_steps && losses.size() >= opts.max_steps) return losses;
    }
  }
  return losses;
}

double vae_reconstruction_mse(const AinbVae& model, const std::vector<MotionSequence>& windows) {
  if (windows.empty()) throw ValidationError("no windows to evaluate");
  NoGradGuard no_grad;
  double total = 0;
  for (std::size_t i = 0; i < windows.size(); i += 64) {
    std::vector<MotionSequence> chunk(windows.begin() + i,
                                      windows.begin() + std::min(windows.size(), i + 64));
    const VaeBatch b = model.batch_from_windows(chunk);
    const VaeCondition c = model.condition(b);
    const GaussianParams q = model.posterior(c, model.encode_between(b.between, b.size));
    const Tensor err = mean(square(sub(model.decode(c, q.mu), b.between)));
    total += err.item() * static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(windows.size());
}

}  // namespace motionpred
