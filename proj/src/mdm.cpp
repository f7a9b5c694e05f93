#include "motionpred/mdm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "motionpred/ainb_vae.hpp"
#include "motionpred/dataset.hpp"
#include "motionpred/error.hpp"

namespace motionpred {

using nlohmann::json;

NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps == 0) throw ValidationError("noise schedule needs at least one step");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) {
    throw ValidationError("noise schedule needs 0 < beta_start <= beta_end < 1, got [" +
                          std::to_string(beta_start) + ", " + std::to_string(beta_end) + "]");
  }
  NoiseSchedule s;
  s.steps = steps;
  double bar = 1.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    bar *= 1.0 - beta;
    s.alpha_bars.push_back(bar);
  }
  return s;
}

namespace {
void check_step(std::size_t t, const NoiseSchedule& s) {
  if (t < 1 || t > s.steps) {
    throw ValidationError("diffusion step " + std::to_string(t) + " outside [1, " +
                          std::to_string(s.steps) + "]");
  }
}
}  // namespace

std::vector<double> diffuse_to_t(std::span<const double> y0, std::size_t t,
                                 const NoiseSchedule& s, std::span<const double> eps) {
  check_step(t, s);
  if (eps.size() != y0.size()) throw ShapeError("diffuse_to_t: noise length mismatch");
  const double a = std::sqrt(s.alpha_bar(t)), b = std::sqrt(1.0 - s.alpha_bar(t));
  std::vector<double> out(y0.size());
  for (std::size_t i = 0; i < y0.size(); ++i) out[i] = a * y0[i] + b * eps[i];
  return out;
}

std::vector<double> diffuse_step(std::span<const double> y, std::size_t t, const NoiseSchedule& s,
                                 std::span<const double> eps) {
  check_step(t, s);
  if (eps.size() != y.size()) throw ShapeError("diffuse_step: noise length mismatch");
  const double a = std::sqrt(s.alpha(t)), b = std::sqrt(1.0 - s.alpha(t));
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = a * y[i] + b * eps[i];
  return out;
}

Tensor mdm_loss(const Tensor& y0, std::size_t batch, std::span<const std::size_t> labels,
                const NoiseSchedule& s, const Denoiser& gen, Rng& rng) {
  if (batch == 0 || y0.rows() % batch != 0 || labels.size() != batch) {
    throw ValidationError("mdm_loss: " + std::to_string(y0.rows()) + " rows, batch " +
                          std::to_string(batch) + ", " + std::to_string(labels.size()) +
                          " labels");
  }
  const std::size_t per = y0.numel() / batch;
  std::vector<std::size_t> steps(batch);
  std::vector<double> noised(y0.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    steps[b] = static_cast<std::size_t>(rng.integer(1, static_cast<std::int64_t>(s.steps)));
    const auto eps = rng.normal_vector(per);
    const auto yt = diffuse_to_t(y0.data().subspan(b * per, per), steps[b], s, eps);
    std::copy(yt.begin(), yt.end(), noised.begin() + b * per);
  }
  const Tensor pred = gen(Tensor::constant(y0.shape(), std::move(noised)), steps, labels, batch);
  return mean(square(sub(pred, y0)));
}

NdValue reverse_sample(std::size_t label, std::size_t frames, std::size_t width,
                       const NoiseSchedule& s, const Denoiser& gen, std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng(seed);
  std::vector<double> y = rng.normal_vector(frames * width);
  const std::size_t labels[] = {label};
  for (std::size_t t = s.steps; t >= 1; --t) {
    const std::size_t step[] = {t};
    const Tensor pred = gen(Tensor::constant({frames, width}, y), step, labels, 1);
    if (pred.numel() != y.size()) throw ShapeError("denoiser output has the wrong size");
    if (t == 1) {
      y.assign(pred.data().begin(), pred.data().end());
      break;
    }
    const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1), beta = s.beta(t);
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
    const double sd = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta);
    const auto p = pred.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = c0 * p[i] + ct * y[i] + sd * rng.normal();
  }
  return NdValue({frames, width}, std::move(y));
}

json mdm_config_to_json(const MdmConfig& c) {
  return {{"width", c.width},   {"heads", c.heads},
          {"layers", c.layers}, {"ffn_width", c.ffn_width},
          {"frames", c.frames}, {"steps", c.steps},
          {"beta_start", c.beta_start}, {"beta_end", c.beta_end},
          {"actions", c.actions.names()}};
}

MdmConfig mdm_config_from_json(const json& j) {
  MdmConfig c;
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.layers = j.value("layers", c.layers);
  c.ffn_width = j.value("ffn_width", c.ffn_width);
  c.frames = j.value("frames", c.frames);
  c.steps = j.value("steps", c.steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  if (j.contains("actions")) c.actions = ActionSet::from_names(j["actions"]);
  return c;
}

MotionDiffusion::MotionDiffusion(const MdmConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), schedule_(make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)) {
  if (cfg.frames == 0) throw ValidationError("diffusion needs T_f >= 1");
  if (cfg.actions.size() == 0) throw ValidationError("diffusion needs at least one action");
  Rng rng(seed);
  const std::size_t d = cfg.width;
  in_ = Linear::create(params_, "input", kPoseDim, d, rng);
  time_mlp_ = Mlp::create(params_, "time", {d, d, d}, rng);
  action_mlp_ = Mlp::create(params_, "action", {cfg.actions.size(), d, d}, rng);
  for (std::size_t i = 0; i < cfg.layers; ++i)
    layers_.push_back(EncoderLayer::create(params_, "layer" + std::to_string(i), d, cfg.heads,
                                           cfg.ffn_width, rng));
  out_norm_ = LayerNorm::create(params_, "out_ln", d);
  out_ = Linear::create(params_, "out", d, kPoseDim, rng);
}

Tensor MotionDiffusion::denoise(const Tensor& y_t, std::span<const std::size_t> t,
                                std::span<const std::size_t> labels, std::size_t batch) const {
  NameScope scope("mdm");
  const std::size_t T = cfg_.frames, d = cfg_.width, A = cfg_.actions.size();
  if (y_t.rows() != batch * T || y_t.cols() != kPoseDim) {
    throw ShapeError("denoiser input " + shape_str(y_t.shape()) + ", expected [" +
                     std::to_string(batch * T) + ", " + std::to_string(kPoseDim) + "]");
  }
  if (t.size() != batch || labels.size() != batch) {
    throw ValidationError("denoiser needs one step and one label per item");
  }
  std::vector<double> temb, hot(batch * A, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    auto e = periodic_pos_enc(t[b], cfg_.steps + 1, d);
    temb.insert(temb.end(), e.begin(), e.end());
    if (labels[b] >= A) {
      throw ValidationError("label index " + std::to_string(labels[b]) + " >= " +
                            std::to_string(A));
    }
    hot[b * A + labels[b]] = 1.0;
  }
  const Tensor time_tok = time_mlp_(Tensor::constant({batch, d}, std::move(temb)));
  const Tensor action_tok = action_mlp_(Tensor::constant({batch, A}, std::move(hot)));
  std::vector<std::size_t> tile;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < T; ++i) tile.push_back(i);
  const Tensor frames = add(in_(y_t), gather_rows(periodic_pos_table(T, T, d), tile));

  std::vector<std::size_t> order, keep;
  for (std::size_t b = 0; b < batch; ++b) {
    order.push_back(b);
    order.push_back(batch + b);
    for (std::size_t i = 0; i < T; ++i) {
      keep.push_back(order.size());
      order.push_back(2 * batch + b * T + i);
    }
  }
  Tensor h = gather_rows(concat_rows({time_tok, action_tok, frames}), order);
  for (const auto& layer : layers_) h = layer(h, batch, nullptr);
  return out_(out_norm_(gather_rows(h, keep)));
}

Denoiser MotionDiffusion::denoiser() const {
  return [this](const Tensor& y, std::span<const std::size_t> t,
                std::span<const std::size_t> labels,
                std::size_t batch) { return denoise(y, t, labels, batch); };
}

NdValue MotionDiffusion::motion_block(const MotionSequence& seq, std::size_t offset) const {
  if (norm_.empty()) throw ValidationError("diffusion model has no normalization statistics");
  if (seq.size() == 0) throw ValidationError("empty target sequence");
  NdValue out({cfg_.frames, kPoseDim});
  for (std::size_t i = 0; i < cfg_.frames; ++i) {
    const auto& f = seq.frames[std::min(offset + i, seq.size() - 1)];
    const auto v = pose_vectorize(f, &norm_);
    std::copy(v.begin(), v.end(), out.data.begin() + i * kPoseDim);
  }
  return out;
}

double MotionDiffusion::train_step(const Tensor& y0, std::span<const std::size_t> labels,
                                   double lr, Rng& rng) {
  try {
    const Tensor l = mdm_loss(y0, labels.size(), labels, schedule_, denoiser(), rng);
    backward(l);
    params_.adam_step(lr);
    return l.item();
  } catch (const NumericError& e) {
    params_.zero_grad();
    throw NumericError("diffusion train step " + std::to_string(params_.step_count() + 1) +
                       " aborted: " + e.what());
  }
}

MotionSequence MotionDiffusion::sample(std::size_t label, std::uint64_t seed) const {
  const NdValue y = reverse_sample(label, cfg_.frames, kPoseDim, schedule_, denoiser(), seed);
  MotionSequence seq;
  seq.label = cfg_.actions.at(label);
  seq.frames = matrix_poses(y.data, cfg_.frames, &norm_);
  return seq;
}

void MotionDiffusion::save(const std::filesystem::path& path) const {
  params_.save(path);
  std::ofstream out(sidecar_path(path));
  if (!out) throw Error("cannot write " + sidecar_path(path).string());
  out << json{{"kind", "mdm"}, {"config", mdm_config_to_json(cfg_)},
              {"normalization", norm_to_json(norm_)}}
             .dump(2)
      << '\n';
}

MotionDiffusion MotionDiffusion::load(const std::filesystem::path& path) {
  std::ifstream in(sidecar_path(path));
  if (!in) throw Error("missing config sidecar " + sidecar_path(path).string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(sidecar_path(path).string() + ": " + e.what());
  }
  if (j.value("kind", std::string()) != "mdm") {
    throw FormatError(sidecar_path(path).string() + " is not a diffusion sidecar");
  }
  MotionDiffusion m(mdm_config_from_json(j.at("config")), 0);
  m.params_.load(path);
  m.set_norm(norm_from_json(j.at("normalization")));
  return m;
}

std::vector<double> train_mdm(MotionDiffusion& model, const std::vector<MotionSequence>& train,
                              const TrainMdmOptions& opts) {
  if (train.empty()) throw ValidationError("diffusion training set is empty");
  if (opts.batch_size == 0) throw ValidationError("batch size must be >= 1");
  if (model.norm().empty()) model.set_norm(compute_norm_stats(train));
  const auto& actions = model.config().actions;
  const std::size_t T = model.config().frames;
  Rng rng(opts.seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t i = 0; i < order.size(); i += opts.batch_size) {
      const std::size_t n = std::min(opts.batch_size, order.size() - i);
      std::vector<double> data;
      std::vector<std::size_t> labels;
      for (std::size_t k = 0; k < n; ++k) {
        const auto& seq = train[order[i + k]];
        const std::size_t slack = seq.size() > T ? seq.size() - T : 0;
        const auto off = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(slack)));
        const NdValue block = model.motion_block(seq, off);
        data.insert(data.end(), block.data.begin(), block.data.end());
        labels.push_back(actions.index_of(seq.label));
      }
      const Tensor y0 = Tensor::constant({n * T, kPoseDim}, std::move(data));
      losses.push_back(model.train_step(y0, labels, opts.lr, rng));
      if (opts.on_step) opts.on_step(losses.size(), losses.back());
      if (opts.max_steps && losses.size() >= opts.max_steps) return losses;
    }
  }
  return losses;
}

}  // namespace motionpred
