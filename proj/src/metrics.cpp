#include "motionpred/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "motionpred/ainb_vae.hpp"
#include "motionpred/dataset.hpp"
#include "motionpred/error.hpp"

namespace motionpred {

using nlohmann::json;

Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw ShapeError("matrix_sqrt_psd: non-square matrix");
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-9) {
    throw ValidationError("matrix_sqrt_psd: matrix is not symmetric");
  }
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericError("matrix_sqrt_psd: eigensolver failed");
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -1e-9) {
      throw ValidationError("matrix_sqrt_psd: eigenvalue " + std::to_string(ev[i]) +
                            " is negative");
    }
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  const Eigen::MatrixXd s = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (s + s.transpose());
}

FeatureDistribution feature_stats(const std::vector<std::vector<double>>& features) {
  const std::size_t n = features.size();
  if (n < 2) throw ValidationError("feature statistics need at least 2 samples, got " + std::to_string(n));
  const std::size_t d = features[0].size();
  FeatureDistribution out;
  out.n = n;
  out.mu = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  for (const auto& f : features) {
    if (f.size() != d) throw ShapeError("feature rows of different widths");
    out.mu += Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(d));
  }
  out.mu /= static_cast<double>(n);
  out.cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (const auto& f : features) {
    const Eigen::VectorXd c =
        Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(d)) - out.mu;
    out.cov.noalias() += c * c.transpose();
  }
  out.cov /= static_cast<double>(n - 1);
  return out;
}

double fid(const FeatureDistribution& g, const FeatureDistribution& r) {
  if (g.mu.size() != r.mu.size() || g.cov.rows() != r.cov.rows()) {
    throw ShapeError("fid: feature widths " + std::to_string(g.mu.size()) + " and " +
                     std::to_string(r.mu.size()));
  }
  const Eigen::MatrixXd sg = matrix_sqrt_psd(g.cov);
  const Eigen::MatrixXd inner = sg * r.cov * sg;
  const Eigen::MatrixXd cross = matrix_sqrt_psd(0.5 * (inner + inner.transpose()));
  const double v = (g.mu - r.mu).squaredNorm() + g.cov.trace() + r.cov.trace() - 2.0 * cross.trace();
  return v < 0 && v > -1e-6 ? 0.0 : std::max(v, 0.0);
}

namespace {

double pose_distance(const Pose& a, const Pose& b) {
  const auto va = pose_vectorize(a), vb = pose_vectorize(b);
  double s = 0;
  for (std::size_t i = 0; i < va.size(); ++i) s += (va[i] - vb[i]) * (va[i] - vb[i]);
  return s;
}

}  // namespace

double ade(const std::vector<Pose>& sample, const std::vector<Pose>& gt) {
  if (sample.size() != gt.size() || gt.empty()) {
    throw ValidationError("ade: sample of " + std::to_string(sample.size()) +
                          " frames vs ground truth of " + std::to_string(gt.size()));
  }
  double s = 0;
  for (std::size_t k = 0; k < gt.size(); ++k) s += std::sqrt(pose_distance(sample[k], gt[k]));
  return s / static_cast<double>(gt.size());
}

double ade_min(const std::vector<std::vector<Pose>>& samples, const std::vector<Pose>& gt) {
  if (samples.empty()) throw ValidationError("ade_min: no samples");
  double best = ade(samples[0], gt);
  for (std::size_t i = 1; i < samples.size(); ++i) best = std::min(best, ade(samples[i], gt));
  return best;
}

double apd(const std::vector<std::vector<Pose>>& samples) {
  const std::size_t s = samples.size();
  if (s < 2) throw ValidationError("apd needs at least 2 samples, got " + std::to_string(s));
  for (const auto& x : samples) {
    if (x.size() != samples[0].size()) throw ValidationError("apd: samples of different lengths");
  }
  double total = 0;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = i + 1; j < s; ++j) {
      double d = 0;
      for (std::size_t k = 0; k < samples[i].size(); ++k) d += pose_distance(samples[i][k], samples[j][k]);
      total += 2.0 * std::sqrt(d);
    }
  return total / static_cast<double>(s * (s - 1));
}

double action_faithfulness(std::span<const std::size_t> predicted,
                           std::span<const std::size_t> labels) {
  if (labels.empty()) throw ValidationError("action faithfulness of an empty set");
  if (predicted.size() != labels.size()) throw ShapeError("prediction and label counts differ");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double foot_skate(const std::vector<Pose>& frames, double fps) {
  if (frames.size() < 2) return 0.0;
  std::vector<std::array<Vec3, 2>> ankles;
  double lowest = std::numeric_limits<double>::infinity();
  for (const auto& f : frames) {
    const auto p = forward_kinematics(f);
    ankles.push_back({p[kLeftAnkle],
                      p[kRightAnkle]});
    lowest = std::min({lowest, ankles.back()[0].y(), ankles.back()[1].y()});
  }
  const double threshold = lowest + 0.02;
  double total = 0;
  std::size_t count = 0;
  for (std::size_t t = 1; t < ankles.size(); ++t)
    for (std::size_t s = 0; s < 2; ++s) {
      if (ankles[t][s].y() > threshold) continue;
      const Vec3 d = ankles[t][s] - ankles[t - 1][s];
      total += std::hypot(d.x(), d.z()) * fps;
      ++count;
    }
  return count ? total / static_cast<double>(count) : 0.0;
}

json classifier_config_to_json(const ClassifierConfig& c) {
  return {{"width", c.width},         {"heads", c.heads},   {"layers", c.layers},
          {"ffn_width", c.ffn_width}, {"frames", c.frames}, {"actions", c.actions.names()}};
}

ClassifierConfig classifier_config_from_json(const json& j) {
  ClassifierConfig c;
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.layers = j.value("layers", c.layers);
  c.ffn_width = j.value("ffn_width", c.ffn_width);
  c.frames = j.value("frames", c.frames);
  if (j.contains("actions")) c.actions = ActionSet::from_names(j["actions"]);
  return c;
}

ActionClassifier::ActionClassifier(const ClassifierConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.frames == 0) throw ValidationError("classifier clip length must be >= 1");
  if (cfg.actions.size() < 2) throw ValidationError("classifier needs at least two classes");
  Rng rng(seed);
  in_ = Linear::create(params_, "input", kPoseDim, cfg.width, rng);
  cls_ = params_.add_normal("cls_token", {1, cfg.width}, 0.02, rng);
  for (std::size_t i = 0; i < cfg.layers; ++i)
    layers_.push_back(EncoderLayer::create(params_, "layer" + std::to_string(i), cfg.width,
                                           cfg.heads, cfg.ffn_width, rng));
  out_norm_ = LayerNorm::create(params_, "out_ln", cfg.width);
  head_ = Linear::create(params_, "head", cfg.width, cfg.actions.size(), rng);
}

std::vector<Pose> ActionClassifier::clip(const std::vector<Pose>& frames, std::size_t offset) const {
  if (frames.empty()) throw ValidationError("cannot classify an empty sequence");
  std::vector<Pose> out;
  for (std::size_t i = 0; i < cfg_.frames; ++i)
    out.push_back(frames[std::min(offset + i, frames.size() - 1)]);
  const Vec3 r = out[0].root_translation;
  translate_xz(out, -r.x(), -r.z());
  rotate_yaw(out, -heading_of(out[0].root_orientation), 0.0, 0.0);
  return out;
}

std::vector<Pose> ActionClassifier::clip(const std::vector<Pose>& frames) const {
  const std::size_t off = frames.size() > cfg_.frames ? (frames.size() - cfg_.frames) / 2 : 0;
  return clip(frames, off);
}

NormStats ActionClassifier::clip_norm_stats(const std::vector<std::vector<Pose>>& clips) const {
  std::vector<MotionSequence> seqs;
  for (const auto& c : clips) {
    MotionSequence s;
    s.frames = c;
    seqs.push_back(std::move(s));
  }
  return compute_norm_stats(seqs);
}

Tensor ActionClassifier::encode(const std::vector<std::vector<Pose>>& clips) const {
  NameScope scope("classifier");
  if (norm_.empty()) throw ValidationError("classifier has no normalization statistics");
  const std::size_t B = clips.size(), T = cfg_.frames, d = cfg_.width;
  std::vector<double> data;
  for (const auto& c : clips) {
    if (c.size() != T) throw ShapeError("classifier clip of " + std::to_string(c.size()) + " frames");
    for (const auto& f : c) {
      const auto v = pose_vectorize(f, &norm_);
      data.insert(data.end(), v.begin(), v.end());
    }
  }
  std::vector<std::size_t> tile;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < T; ++i) tile.push_back(i);
  const Tensor frames = add(in_(Tensor::constant({B * T, kPoseDim}, std::move(data))),
                            gather_rows(periodic_pos_table(T, T, d), tile));
  std::vector<std::size_t> order, cls_rows;
  for (std::size_t b = 0; b < B; ++b) {
    cls_rows.push_back(order.size());
    order.push_back(0);
    for (std::size_t i = 0; i < T; ++i) order.push_back(1 + b * T + i);
  }
  Tensor h = gather_rows(concat_rows({cls_, frames}), order);
  for (const auto& layer : layers_) h = layer(h, B, nullptr);
  return out_norm_(gather_rows(h, cls_rows));
}

Tensor ActionClassifier::features(const std::vector<std::vector<Pose>>& clips) const {
  return encode(clips);
}

Tensor ActionClassifier::logits(const Tensor& features) const { return head_(features); }

std::vector<std::vector<double>> ActionClassifier::feature_rows(
    const std::vector<std::vector<Pose>>& seqs) const {
  NoGradGuard no_grad;
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < seqs.size(); i += 64) {
    std::vector<std::vector<Pose>> clips;
    for (std::size_t k = i; k < std::min(seqs.size(), i + 64); ++k) clips.push_back(clip(seqs[k]));
    const Tensor f = features(clips);
    for (std::size_t r = 0; r < clips.size(); ++r) {
      const auto row = f.data().subspan(r * cfg_.width, cfg_.width);
      rows.emplace_back(row.begin(), row.end());
    }
  }
  return rows;
}

std::vector<std::size_t> ActionClassifier::predict(const std::vector<std::vector<Pose>>& seqs) const {
  NoGradGuard no_grad;
  std::vector<std::size_t> out;
  const std::size_t A = cfg_.actions.size();
  for (std::size_t i = 0; i < seqs.size(); i += 64) {
    std::vector<std::vector<Pose>> clips;
    for (std::size_t k = i; k < std::min(seqs.size(), i + 64); ++k) clips.push_back(clip(seqs[k]));
    const Tensor l = logits(features(clips));
    for (std::size_t r = 0; r < clips.size(); ++r) {
      const auto row = l.data().subspan(r * A, A);
      out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

double ActionClassifier::accuracy(const std::vector<MotionSequence>& seqs) const {
  return action_faithfulness(seqs, *this);
}

void ActionClassifier::save(const std::filesystem::path& path) const {
  params_.save(path);
  std::ofstream out(sidecar_path(path));
  if (!out) throw Error("cannot write " + sidecar_path(path).string());
  out << json{{"kind", "classifier"}, {"config", classifier_config_to_json(cfg_)},
              {"normalization", norm_to_json(norm_)}}
             .dump(2)
      << '\n';
}

ActionClassifier ActionClassifier::load(const std::filesystem::path& path) {
  std::ifstream in(sidecar_path(path));
  if (!in) throw Error("missing config sidecar " + sidecar_path(path).string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(sidecar_path(path).string() + ": " + e.what());
  }
  if (j.value("kind", std::string()) != "classifier") {
    throw FormatError(sidecar_path(path).string() + " is not a classifier sidecar");
  }
  ActionClassifier c(classifier_config_from_json(j.at("config")), 0);
  c.params_.load(path);
  c.set_norm(norm_from_json(j.at("normalization")));
  return c;
}

ClassifierReport train_classifier(ActionClassifier& model, const std::vector<MotionSequence>& train,
                                  const std::vector<MotionSequence>& test,
                                  const TrainClassifierOptions& opts) {
  if (train.empty()) throw ValidationError("classifier training set is empty");
  if (opts.batch_size == 0) throw ValidationError("batch size must be >= 1");
  const auto& actions = model.config().actions;
  std::set<std::size_t> classes;
  std::vector<std::size_t> labels;
  for (const auto& s : train) {
    labels.push_back(actions.index_of(s.label));
    classes.insert(labels.back());
  }
  for (const auto& s : test) actions.index_of(s.label);
  if (classes.size() < 2) throw ValidationError("classifier training data covers a single class");

  const std::size_t T = model.config().frames;
  if (model.norm().empty()) {
    std::vector<std::vector<Pose>> clips;
    for (const auto& s : train)
      for (std::size_t off = 0; off + T <= std::max(s.size(), T); off += T)
        clips.push_back(model.clip(s.frames, off));
    model.set_norm(model.clip_norm_stats(clips));
  }

  Rng rng(opts.seed);
  ClassifierReport rep;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t i = 0; i < order.size(); i += opts.batch_size) {
      std::vector<std::vector<Pose>> clips;
      std::vector<std::size_t> y;
      for (std::size_t k = i; k < std::min(order.size(), i + opts.batch_size); ++k) {
        const auto& s = train[order[k]];
        const std::size_t slack = s.size() > T ? s.size() - T : 0;
        clips.push_back(model.clip(s.frames, static_cast<std::size_t>(
                                                 rng.integer(0, static_cast<std::int64_t>(slack)))));
        y.push_back(labels[order[k]]);
      }
      const Tensor loss = cross_entropy(model.logits(model.features(clips)), y);
      backward(loss);
      model.params().adam_step(opts.lr);
      total += loss.item();
      ++batches;
    }
    rep.losses.push_back(total / static_cast<double>(batches));
    if (opts.on_epoch) opts.on_epoch(epoch + 1, rep.losses.back());
  }
  rep.train_accuracy = model.accuracy(train);
  rep.test_accuracy = test.empty() ? 0.0 : model.accuracy(test);
  return rep;
}

FeatureDistribution feature_stats(const std::vector<std::vector<Pose>>& seqs,
                                  const ActionClassifier& classifier) {
  if (seqs.size() < 2) {
    throw ValidationError("feature statistics need at least 2 sequences, got " +
                          std::to_string(seqs.size()));
  }
  return feature_stats(classifier.feature_rows(seqs));
}

double action_faithfulness(const std::vector<MotionSequence>& generated,
                           const ActionClassifier& classifier) {
  if (generated.empty()) throw ValidationError("action faithfulness of an empty set");
  std::vector<std::size_t> labels;
  std::vector<std::vector<Pose>> frames;
  for (const auto& s : generated) {
    labels.push_back(classifier.config().actions.index_of(s.label));
    frames.push_back(s.frames);
  }
  return action_faithfulness(classifier.predict(frames), labels);
}

json metrics_to_json(const MetricsReport& r) {
  return {{"fid_train", r.fid_train}, {"fid_test", r.fid_test}, {"af", r.af},
          {"ade", r.ade},             {"apd", r.apd},           {"foot_skate", r.foot_skate},
          {"samples", r.samples}};
}

}  // namespace motionpred
