#include "motionpred/evaluate.hpp"

#include "motionpred/error.hpp"
#include "motionpred/rng.hpp"

namespace motionpred {

namespace {

std::vector<std::vector<Pose>> frames_of(const std::vector<MotionSequence>& seqs) {
  std::vector<std::vector<Pose>> out;
  for (const auto& s : seqs) out.push_back(s.frames);
  return out;
}

std::vector<Pose> fit_length(const std::vector<Pose>& frames, std::size_t n) {
  if (frames.empty()) throw ValidationError("empty target sequence");
  std::vector<Pose> out(frames.begin(), frames.begin() + static_cast<std::ptrdiff_t>(std::min(n, frames.size())));
  out.resize(n, frames.back());
  return out;
}

struct Accumulator {
  std::vector<std::vector<Pose>> generated;
  std::vector<MotionSequence> labelled;
  double ade = 0, apd = 0, skate = 0;
  std::size_t contexts = 0, skated = 0;

  void add_generated(const std::vector<Pose>& frames, Action label) {
    generated.push_back(frames);
    MotionSequence s;
    s.label = label;
    s.frames = frames;
    labelled.push_back(std::move(s));
  }

  MetricsReport finish(const ActionClassifier& clf, const DatasetSplit& real, std::size_t samples) const {
    if (contexts == 0) throw ValidationError("no evaluation contexts");
    MetricsReport r;
    const auto gen = feature_stats(generated, clf);
    r.fid_train = fid(gen, feature_stats(frames_of(real.train), clf));
    r.fid_test = real.test.size() >= 2 ? fid(gen, feature_stats(frames_of(real.test), clf)) : 0.0;
    r.af = action_faithfulness(labelled, clf);
    r.ade = ade / static_cast<double>(contexts);
    r.apd = samples >= 2 ? apd / static_cast<double>(contexts) : 0.0;
    r.foot_skate = skate / static_cast<double>(skated);
    r.samples = samples;
    return r;
  }
};

}  // namespace

InbetweenSet inbetween_contexts(const std::vector<MotionSequence>& test, const VaeConfig& cfg,
                                std::size_t limit) {
  InbetweenSet set;
  const std::size_t w = cfg.window();
  for (const auto& s : test) {
    if (limit && set.contexts.size() == limit) break;
    if (s.frames.size() < w) {
      throw ValidationError("sequence " + s.id + " has " + std::to_string(s.frames.size()) +
                            " frames, the window needs " + std::to_string(w));
    }
    const auto first = s.frames.begin() + static_cast<std::ptrdiff_t>((s.frames.size() - w) / 2);
    const auto mid = first + static_cast<std::ptrdiff_t>(cfg.t_start);
    const auto end = mid + static_cast<std::ptrdiff_t>(cfg.t_between);
    set.contexts.push_back({{first, mid}, {end, end + static_cast<std::ptrdiff_t>(cfg.t_end)}});
    set.truth.emplace_back(mid, end);
    set.labels.push_back(cfg.actions.index_of(s.label));
  }
  return set;
}

std::vector<std::vector<Pose>> generate_inbetweens(const InbetweenModel& m, const ContextPair& ctx,
                                                   std::size_t label, std::size_t samples,
                                                   std::uint64_t seed, bool use_sampler) {
  std::vector<std::vector<Pose>> out;
  if (use_sampler && m.sampler) {
    for (std::uint64_t d = 0; out.size() < samples; ++d) {
      for (auto& y : m.sampler->sample(m.vae, ctx, label, derive_seed(seed, d))) {
        if (out.size() < samples) out.push_back(std::move(y));
      }
    }
  } else {
    for (std::size_t s = 0; s < samples; ++s) out.push_back(m.vae.sample_inbetween(ctx, label, derive_seed(seed, s)));
  }
  return out;
}

MetricsReport evaluate_inbetween(const InbetweenModel& m, const ActionClassifier& classifier,
                                 const DatasetSplit& data, const EvalOptions& opts) {
  if (opts.samples == 0) throw ValidationError("samples must be >= 1");
  const auto& cfg = m.vae.config();
  const auto set = inbetween_contexts(data.test, cfg, opts.contexts);
  Accumulator acc;
  for (std::size_t i = 0; i < set.contexts.size(); ++i) {
    const auto samples = opts.ground_truth
                             ? std::vector<std::vector<Pose>>(opts.samples, set.truth[i])
                             : generate_inbetweens(m, set.contexts[i], set.labels[i], opts.samples,
                                                   derive_seed(opts.seed, i), opts.use_sampler);
    acc.ade += ade_min(samples, set.truth[i]);
    if (samples.size() >= 2) acc.apd += apd(samples);
    for (const auto& y : samples) {
      acc.add_generated(y, cfg.actions.at(set.labels[i]));
      acc.skate += foot_skate(y);
      ++acc.skated;
    }
    ++acc.contexts;
  }
  return acc.finish(classifier, data, opts.samples);
}

MetricsReport evaluate_prediction(const Models& models, std::size_t t_b,
                                  const ActionClassifier& target_classifier,
                                  const DatasetSplit& history, const DatasetSplit& target,
                                  const EvalOptions& opts) {
  if (opts.samples == 0) throw ValidationError("samples must be >= 1");
  const auto& ib = models.for_length(t_b);
  const std::size_t t_f = models.diffusion().config().frames;
  std::size_t n = std::min(history.test.size(), target.test.size());
  if (opts.contexts) n = std::min(n, opts.contexts);
  Accumulator acc;
  for (std::size_t i = 0; i < n; ++i) {
    PredictionRequest req;
    req.history = history.test[i];
    req.future_action = target.test[i].label;
    req.inbetween_action = history.test[i].label;
    req.t_b = t_b;
    req.samples = opts.samples;
    req.seed = derive_seed(opts.seed, i);
    req.use_sampler = opts.use_sampler;
    const auto preds = predict_samples(req, models);
    const auto truth = place_target(fit_length(target.test[i].frames, t_f),
                                    history_tail(req.history.frames, ib.vae.config().t_start), t_b,
                                    req.history.fps);
    std::vector<std::vector<Pose>> targets, wholes;
    for (const auto& p : preds) {
      std::vector<Pose> whole = p.motion.frames;
      if (opts.ground_truth) std::copy(truth.begin(), truth.end(), whole.begin() + static_cast<std::ptrdiff_t>(t_b));
      targets.emplace_back(whole.begin() + static_cast<std::ptrdiff_t>(t_b), whole.end());
      wholes.push_back(std::move(whole));
    }
    acc.ade += ade_min(targets, truth);
    if (wholes.size() >= 2) acc.apd += apd(wholes);
    for (std::size_t s = 0; s < targets.size(); ++s) {
      acc.add_generated(targets[s], req.future_action);
      acc.skate += foot_skate(wholes[s]);
      ++acc.skated;
    }
    ++acc.contexts;
  }
  return acc.finish(target_classifier, target, opts.samples);
}

}  // namespace motionpred
