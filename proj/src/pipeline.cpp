#include "motionpred/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "motionpred/error.hpp"
#include "motionpred/rng.hpp"

namespace motionpred {

using json = nlohmann::json;

std::string segment_name(Segment s) {
  switch (s) {
    case Segment::history: return "history";
    case Segment::transition: return "transition";
    case Segment::target: return "target";
  }
  return "history";
}

Segment segment_from_name(const std::string& s) {
  if (s == "history") return Segment::history;
  if (s == "transition") return Segment::transition;
  if (s == "target") return Segment::target;
  throw ValidationError("unknown segment tag '" + s + "'");
}

void Models::add(AinbVae vae, std::optional<DiversitySampler> sampler) {
  const std::size_t t_b = vae.config().t_between;
  if (inbetween.count(t_b)) {
    throw ValidationError("two in-betweening models for T_b = " + std::to_string(t_b));
  }
  if (sampler) {
    const auto want = DiversitySampler::config_for(vae.config(), sampler->config().branches);
    if (sampler->config().latent != want.latent || sampler->config().cond_width != want.cond_width) {
      throw ValidationError("sampler shape does not match the T_b = " + std::to_string(t_b) +
                            " VAE");
    }
  }
  inbetween.emplace(t_b, InbetweenModel{std::move(vae), std::move(sampler)});
}

std::vector<std::size_t> Models::lengths() const {
  std::vector<std::size_t> out;
  for (const auto& [k, v] : inbetween) out.push_back(k);
  return out;
}

const InbetweenModel& Models::for_length(std::size_t t_b) const {
  const auto it = inbetween.find(t_b);
  if (it != inbetween.end()) return it->second;
  std::string avail;
  for (auto k : lengths()) avail += (avail.empty() ? "" : ", ") + std::to_string(k);
  throw ValidationError("no in-betweening model for T_b = " + std::to_string(t_b) +
                        "; available: " + (avail.empty() ? "none" : avail));
}

const MotionDiffusion& Models::diffusion() const {
  if (!mdm) throw ValidationError("no diffusion model loaded");
  return *mdm;
}

json run_config_to_json(const RunConfig& c) {
  auto strings = [](const std::vector<std::filesystem::path>& v) {
    std::vector<std::string> out;
    for (const auto& p : v) out.push_back(p.string());
    return out;
  };
  return {{"dataset", c.dataset.string()}, {"mdm", c.mdm.string()},
          {"vae", strings(c.vae)},         {"sampler", strings(c.sampler)},
          {"classifier", c.classifier.string()}, {"seed", c.seed}};
}

RunConfig run_config_from_json(const json& j) {
  static const std::vector<std::string> known{"dataset", "mdm", "vae", "sampler", "classifier", "seed"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ValidationError("unknown run config key '" + k + "'");
    }
  }
  auto paths = [&](const char* key) {
    std::vector<std::filesystem::path> out;
    if (!j.contains(key)) return out;
    const auto& v = j.at(key);
    if (v.is_string()) {
      out.emplace_back(v.get<std::string>());
    } else {
      for (const auto& s : v) out.emplace_back(s.get<std::string>());
    }
    return out;
  };
  RunConfig c;
  c.dataset = j.value("dataset", std::string());
  c.mdm = j.value("mdm", std::string());
  c.vae = paths("vae");
  c.sampler = paths("sampler");
  c.classifier = j.value("classifier", std::string());
  c.seed = j.value("seed", std::uint64_t{0});
  return c;
}

namespace {

void require_checkpoint(const std::filesystem::path& p, const char* what) {
  if (!std::filesystem::exists(p)) {
    throw ValidationError(std::string(what) + " checkpoint " + p.string() + " does not exist");
  }
  if (!std::filesystem::exists(sidecar_path(p))) {
    throw ValidationError(std::string(what) + " checkpoint " + p.string() + " has no config sidecar");
  }
}

}  // namespace

std::vector<Pose> history_tail(const std::vector<Pose>& frames, std::size_t n) {
  if (frames.empty()) throw ValidationError("history has no frames");
  std::vector<Pose> out;
  for (std::size_t i = n; i > frames.size(); --i) out.push_back(frames.front());
  const std::size_t from = frames.size() > n ? frames.size() - n : 0;
  out.insert(out.end(), frames.begin() + static_cast<std::ptrdiff_t>(from), frames.end());
  return out;
}

Models load_models(const RunConfig& c) {
  if (!c.sampler.empty() && c.sampler.size() != c.vae.size()) {
    throw ValidationError("got " + std::to_string(c.sampler.size()) + " sampler checkpoints for " +
                          std::to_string(c.vae.size()) + " VAE checkpoints");
  }
  Models m;
  if (!c.mdm.empty()) {
    require_checkpoint(c.mdm, "diffusion");
    m.mdm = MotionDiffusion::load(c.mdm);
  }
  for (std::size_t i = 0; i < c.vae.size(); ++i) {
    require_checkpoint(c.vae[i], "VAE");
    std::optional<DiversitySampler> s;
    if (!c.sampler.empty()) {
      require_checkpoint(c.sampler[i], "sampler");
      s = DiversitySampler::load(c.sampler[i]);
    }
    m.add(AinbVae::load(c.vae[i]), std::move(s));
  }
  return m;
}

std::vector<Pose> place_target(const std::vector<Pose>& target, const std::vector<Pose>& history,
                               std::size_t t_b, double fps) {
  if (target.empty() || history.empty()) throw ValidationError("cannot place an empty clip");
  const Pose& last = history.back();
  double vx = 0, vz = 0;
  if (history.size() >= 2) {
    const Vec3 d = last.root_translation - history.front().root_translation;
    const double dt = static_cast<double>(history.size() - 1) / fps;
    vx = d.x() / dt;
    vz = d.z() / dt;
  }
  auto out = target;
  const Vec3 first = out.front().root_translation;
  rotate_yaw(out, heading_of(last.root_orientation) - heading_of(out.front().root_orientation),
             first.x(), first.z());
  const double lead = static_cast<double>(t_b + 1) / fps;
  translate_xz(out, last.root_translation.x() + vx * lead - first.x(),
               last.root_translation.z() + vz * lead - first.z());
  return out;
}

Prediction predict_two_stage(const PredictionRequest& req, const Models& models,
                             std::size_t sample) {
  if (req.history.frames.empty()) throw ValidationError("history has no frames");
  if (req.samples == 0) throw ValidationError("samples must be >= 1");
  for (const auto& p : req.history.frames) p.validate();
  const auto& ib = models.for_length(req.t_b);
  const auto& mdm = models.diffusion();
  const auto& vcfg = ib.vae.config();
  const std::size_t f_label = mdm.config().actions.index_of(req.future_action);
  const std::size_t b_label = vcfg.actions.index_of(req.inbetween_action);
  if (mdm.config().frames < vcfg.t_end) {
    throw ValidationError("target clip shorter than the end context");
  }

  Prediction out;
  out.seed = derive_seed(req.seed, sample);
  const auto target = mdm.sample(f_label, derive_seed(out.seed, 0));
  const auto start = history_tail(req.history.frames, vcfg.t_start);
  auto placed = place_target(target.frames, start, req.t_b, req.history.fps);
  out.seam.start = start;
  out.seam.end.assign(placed.begin(), placed.begin() + static_cast<std::ptrdiff_t>(vcfg.t_end));

  std::vector<Pose> transition;
  const std::uint64_t z_seed = derive_seed(out.seed, 1);
  if (req.use_sampler && ib.sampler) {
    const auto branches = ib.sampler->sample(ib.vae, out.seam, b_label, z_seed);
    const std::size_t k = req.branch.value_or(sample % branches.size());
    if (k >= branches.size()) {
      throw ValidationError("branch " + std::to_string(k) + " out of range; the sampler has " +
                            std::to_string(branches.size()));
    }
    out.branch = k;
    transition = branches[k];
  } else {
    transition = ib.vae.sample_inbetween(out.seam, b_label, z_seed);
  }

  out.motion.id = req.history.id.empty() ? "prediction" : req.history.id + "_prediction";
  out.motion.fps = req.history.fps;
  out.motion.label = req.future_action;
  out.motion.split = "prediction";
  out.motion.frames = std::move(transition);
  out.tags.assign(out.motion.frames.size(), Segment::transition);
  out.motion.frames.insert(out.motion.frames.end(), placed.begin(), placed.end());
  out.tags.resize(out.motion.frames.size(), Segment::target);
  return out;
}

std::vector<Prediction> predict_samples(const PredictionRequest& req, const Models& models) {
  if (req.samples == 0) throw ValidationError("samples must be >= 1");
  std::vector<Prediction> out;
  for (std::size_t s = 0; s < req.samples; ++s) out.push_back(predict_two_stage(req, models, s));
  return out;
}

Rollout long_term_rollout(const MotionSequence& history, const std::vector<RolloutStep>& steps,
                          const Models& models, std::size_t t_b, std::uint64_t seed,
                          bool use_sampler) {
  if (steps.empty()) throw ValidationError("rollout needs at least one label pair");
  if (history.frames.empty()) throw ValidationError("history has no frames");
  const std::size_t t_s = models.for_length(t_b).vae.config().t_start;
  Rollout r;
  r.motion = history;
  r.motion.split = "rollout";
  r.tags.assign(history.frames.size(), Segment::history);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    PredictionRequest req;
    req.history.fps = history.fps;
    req.history.frames = history_tail(r.motion.frames, std::min(t_s, r.motion.frames.size()));
    req.future_action = steps[i].future_action;
    req.inbetween_action = steps[i].inbetween_action;
    req.t_b = t_b;
    req.seed = derive_seed(seed, i);
    req.use_sampler = use_sampler;
    auto p = predict_two_stage(req, models);
    r.motion.frames.insert(r.motion.frames.end(), p.motion.frames.begin(), p.motion.frames.end());
    r.tags.insert(r.tags.end(), p.tags.begin(), p.tags.end());
    r.seams.push_back(std::move(p.seam));
    r.motion.label = steps[i].future_action;
  }
  return r;
}

std::vector<SegmentRun> segment_runs(const std::vector<Segment>& tags) {
  std::vector<SegmentRun> out;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    if (out.empty() || out.back().tag != tags[i]) {
      out.push_back({tags[i], i, 1});
    } else {
      ++out.back().count;
    }
  }
  return out;
}

ExportFormat export_format_from_name(const std::string& s) {
  if (s == "jsonl") return ExportFormat::jsonl;
  if (s == "csv") return ExportFormat::csv;
  throw ValidationError("unknown export format '" + s + "' (jsonl or csv)");
}

namespace {

std::vector<std::string> fk_names() {
  std::vector<std::string> n(skeleton().names.begin(), skeleton().names.end());
  for (const char* s : {"left_toe", "right_toe", "left_hand", "right_hand"}) n.emplace_back(s);
  return n;
}

}  // namespace

std::vector<std::string> export_csv_header() {
  std::vector<std::string> h{"frame", "time", "segment", "root_x", "root_y", "root_z",
                             "qw",    "qx",   "qy",      "qz"};
  for (const auto& n : fk_names())
    for (const char* a : {"_x", "_y", "_z"}) h.push_back(n + a);
  return h;
}

void export_frames(const MotionSequence& seq, const std::vector<Segment>& tags,
                   const std::filesystem::path& path, ExportFormat format) {
  if (!tags.empty() && tags.size() != seq.frames.size()) {
    throw ValidationError("segment tags do not cover the sequence");
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  const auto names = fk_names();
  if (format == ExportFormat::csv) {
    const auto h = export_csv_header();
    for (std::size_t i = 0; i < h.size(); ++i) out << (i ? "," : "") << h[i];
    out << '\n';
    out << std::setprecision(17);
  }
  for (std::size_t f = 0; f < seq.frames.size(); ++f) {
    const Pose& p = seq.frames[f];
    p.validate();
    const auto pts = forward_kinematics(p);
    const std::string tag = tags.empty() ? "" : segment_name(tags[f]);
    const double time = static_cast<double>(f) / seq.fps;
    const Quat& q = p.root_orientation;
    const Vec3& r = p.root_translation;
    if (format == ExportFormat::csv) {
      out << f << ',' << time << ',' << tag << ',' << r.x() << ',' << r.y() << ',' << r.z() << ','
          << q.w() << ',' << q.x() << ',' << q.y() << ',' << q.z();
      for (const auto& v : pts) out << ',' << v.x() << ',' << v.y() << ',' << v.z();
      out << '\n';
    } else {
      json joints = json::object();
      for (std::size_t k = 0; k < pts.size(); ++k) joints[names[k]] = {pts[k].x(), pts[k].y(), pts[k].z()};
      json row{{"frame", f},
               {"time", time},
               {"segment", tag},
               {"root_translation", {r.x(), r.y(), r.z()}},
               {"root_orientation", {q.w(), q.x(), q.y(), q.z()}},
               {"positions", joints}};
      out << row.dump() << '\n';
    }
  }
  if (!out) throw Error("failed writing " + path.string());
}

double pose_gap(const Pose& a, const Pose& b) {
  const auto x = pose_vectorize(a), y = pose_vectorize(b);
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s);
}

double mean_frame_motion(const std::vector<MotionSequence>& seqs) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : seqs)
    for (std::size_t i = 1; i < s.frames.size(); ++i, ++n) total += pose_gap(s.frames[i - 1], s.frames[i]);
  if (n == 0) throw ValidationError("no consecutive frames to measure");
  return total / static_cast<double>(n);
}

}  // namespace motionpred
