#include "motionpred/grad_suite.hpp"

#include <chrono>

#include "motionpred/ainb_vae.hpp"
#include "motionpred/error.hpp"
#include "motionpred/grad_check.hpp"
#include "motionpred/mdm.hpp"
#include "motionpred/metrics.hpp"
#include "motionpred/sampler.hpp"
#include "motionpred/synth.hpp"

namespace motionpred {

namespace {

constexpr std::size_t kWidth = 8;

using Leaves = std::vector<std::pair<std::string, Tensor>>;

struct Case {
  std::function<Tensor()> build;
  Leaves leaves;
  std::size_t max_entries = 0;
  std::shared_ptr<void> keep;  // owns models the closures refer to
};

Tensor input(Rng& rng, std::size_t rows, std::size_t cols) {
  return Tensor::leaf(NdValue({rows, cols}, rng.normal_vector(rows * cols)), true);
}

// Random linear read-out so every output entry carries a distinct weight.
Tensor readout(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

Leaves with(const ParamStore& store, Leaves extra) {
  for (const auto& n : store.names()) extra.emplace_back(n, store.get(n));
  return extra;
}

VaeConfig vae_config(DecoderMode mode) {
  VaeConfig c;
  c.width = kWidth;
  c.heads = 2;
  c.layers = 1;
  c.ffn_width = 16;
  c.period = 4;
  c.latent = 4;
  c.t_start = 2;
  c.t_end = 2;
  c.t_between = 3;
  c.mode = mode;
  return c;
}

std::vector<MotionSequence> gait(std::uint64_t seed, std::size_t frames) {
  GenDataOptions g;
  g.actions = gait_actions().actions;
  g.per_action = 1;
  g.frames = frames;
  g.test_fraction = 0;
  g.seed = seed;
  return generate_dataset(g).train;
}

struct VaeFixture {
  VaeConfig cfg;
  AinbVae vae;
  VaeBatch batch;
  VaeFixture(DecoderMode mode, std::uint64_t seed) : cfg(vae_config(mode)), vae(cfg, seed) {
    const auto seqs = gait(seed, 10);
    vae.set_norm(window_norm_stats(seqs, cfg));
    Rng rng(seed);
    std::vector<MotionSequence> w;
    for (std::size_t i = 0; i < 2; ++i) w.push_back(random_window(seqs[i], cfg.window(), rng));
    batch = vae.batch_from_windows(w);
  }
};

Case layer_case(const std::string& name, std::uint64_t seed) {
  Rng rng(seed);
  auto store = std::make_shared<ParamStore>();
  Case c;
  c.keep = store;
  const std::size_t batch = 2, len = 3;
  if (name == "linear") {
    auto l = Linear::create(*store, "lin", kWidth, 5, rng);
    const Tensor x = input(rng, 4, kWidth), w = input(rng, 4, 5);
    c.build = [l, x, w] { return readout(l(x), w); };
    c.leaves = with(*store, {{"x", x}});
  } else if (name == "layer_norm") {
    auto l = LayerNorm::create(*store, "ln", kWidth);
    const auto g = store->get("ln.gain").mutable_data();
    for (auto& v : g) v += 0.3 * rng.normal();
    const Tensor x = input(rng, 4, kWidth), w = input(rng, 4, kWidth);
    c.build = [l, x, w] { return readout(l(x), w); };
    c.leaves = with(*store, {{"x", x}});
  } else if (name == "mlp") {
    auto m = Mlp::create(*store, "mlp", {kWidth, 16, kWidth}, rng);
    const Tensor x = input(rng, 4, kWidth), w = input(rng, 4, kWidth);
    c.build = [m, x, w] { return readout(m(x), w); };
    c.leaves = with(*store, {{"x", x}});
  } else if (name == "self_attention" || name == "masked_attention") {
    auto a = MultiHeadAttention::create(*store, "mha", kWidth, 2, rng);
    const Tensor x = input(rng, batch * len, kWidth), w = input(rng, batch * len, kWidth);
    auto mask = std::make_shared<AttentionMask>(periodic_causal_mask(len, 2));
    const bool masked = name == "masked_attention";
    c.build = [a, x, w, mask, masked] {
      return readout(a.self_attend(x, 2, masked ? mask.get() : nullptr), w);
    };
    c.leaves = with(*store, {{"x", x}});
  } else if (name == "cross_attention") {
    auto a = MultiHeadAttention::create(*store, "mhca", kWidth, 2, rng);
    const Tensor q = input(rng, batch * len, kWidth), kv = input(rng, batch * 4, kWidth);
    const Tensor w = input(rng, batch * len, kWidth);
    c.build = [a, q, kv, w] { return readout(a.cross_attend(q, kv, 2), w); };
    c.leaves = with(*store, {{"q", q}, {"kv", kv}});
  } else if (name == "encoder_layer") {
    auto l = EncoderLayer::create(*store, "enc", kWidth, 2, 16, rng);
    const Tensor x = input(rng, batch * len, kWidth), w = input(rng, batch * len, kWidth);
    c.build = [l, x, w] { return readout(l(x, 2, nullptr), w); };
    c.leaves = with(*store, {{"x", x}});
  } else if (name == "cross_layer") {
    auto l = CrossLayer::create(*store, "cross", kWidth, 2, 16, rng);
    const Tensor q = input(rng, batch * len, kWidth), kv = input(rng, batch * 4, kWidth);
    const Tensor w = input(rng, batch * len, kWidth);
    c.build = [l, q, kv, w] { return readout(l(q, kv, 2), w); };
    c.leaves = with(*store, {{"q", q}, {"kv", kv}});
  } else if (name == "sequence_encoder") {
    SequenceEncoderConfig cfg{6, kWidth, 2, 1, 16, 2, MaskKind::periodic_causal};
    auto enc = std::make_shared<SequenceEncoder>(*store, "seq", cfg, rng);
    const Tensor x = input(rng, batch * 5, 6), w = input(rng, batch, kWidth);
    c.build = [enc, x, w] { return readout(enc->encode(x, 2), w); };
    c.leaves = with(*store, {{"x", x}});
    c.keep = std::make_shared<std::pair<std::shared_ptr<ParamStore>, std::shared_ptr<SequenceEncoder>>>(store, enc);
  } else {
    throw ValidationError("unknown gradient case '" + name + "'");
  }
  return c;
}

Case composite_case(const std::string& name, std::uint64_t seed) {
  Case c;
  c.max_entries = 6;
  if (name.rfind("elbo_", 0) == 0) {
    const auto mode = decoder_mode_from_name(name.substr(5));
    auto f = std::make_shared<VaeFixture>(mode, seed);
    Rng rng(seed + 1);
    const Tensor eps = Tensor::constant({f->batch.size, f->cfg.latent},
                                        rng.normal_vector(f->batch.size * f->cfg.latent));
    c.build = [f, eps] { return f->vae.loss(f->batch, eps).total; };
    c.leaves = with(f->vae.params(), {});
    c.keep = f;
  } else if (name == "mdm_loss") {
    MdmConfig cfg;
    cfg.width = kWidth;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.ffn_width = 16;
    cfg.frames = 3;
    cfg.steps = 50;
    auto m = std::make_shared<MotionDiffusion>(cfg, seed);
    GenDataOptions g;
    g.actions = target_actions().actions;
    g.per_action = 1;
    g.frames = 5;
    g.test_fraction = 0;
    g.seed = seed;
    const auto seqs = generate_dataset(g).train;
    m->set_norm(compute_norm_stats(seqs));
    std::vector<double> data;
    std::vector<std::size_t> labels;
    for (std::size_t b = 0; b < 2; ++b) {
      const auto blk = m->motion_block(seqs[b]);
      data.insert(data.end(), blk.data.begin(), blk.data.end());
      labels.push_back(b);
    }
    const Tensor y0 = Tensor::constant({2 * cfg.frames, kPoseDim}, std::move(data));
    c.build = [m, y0, labels, seed] {
      Rng rng(seed + 7);
      return mdm_loss(y0, 2, labels, m->schedule(), m->denoiser(), rng);
    };
    c.leaves = with(m->params(), {});
    c.keep = m;
  } else if (name == "sampler_loss") {
    struct Fixture {
      VaeFixture v;
      DiversitySampler s;
      Tensor z;
      Fixture(std::uint64_t seed)
          : v(DecoderMode::owm, seed), s(DiversitySampler::config_for(v.cfg, 3), seed) {
        Rng rng(seed + 3);
        z = Tensor::constant({v.batch.size, v.cfg.latent}, rng.normal_vector(v.batch.size * v.cfg.latent));
        v.vae.params().set_trainable(false);
      }
    };
    auto f = std::make_shared<Fixture>(seed);
    c.build = [f] { return f->s.loss(f->v.vae, f->v.batch, f->z); };
    c.leaves = with(f->s.params(), {});
    c.keep = f;
  } else if (name == "classifier_loss") {
    ClassifierConfig cfg;
    cfg.width = kWidth;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.ffn_width = 16;
    cfg.frames = 4;
    auto m = std::make_shared<ActionClassifier>(cfg, seed);
    const auto seqs = gait(seed, 6);
    std::vector<std::vector<Pose>> clips;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      clips.push_back(m->clip(seqs[i].frames, 1));
      labels.push_back(i);
    }
    m->set_norm(m->clip_norm_stats(clips));
    c.build = [m, clips, labels] { return cross_entropy(m->logits(m->features(clips)), labels); };
    c.leaves = with(m->params(), {});
    c.keep = m;
  } else {
    return layer_case(name, seed);
  }
  return c;
}

}  // namespace

std::vector<std::string> grad_suite_cases() {
  return {"linear",        "layer_norm",       "mlp",           "self_attention",
          "masked_attention", "cross_attention", "encoder_layer", "cross_layer",
          "sequence_encoder", "elbo_owm",      "elbo_no_ofe",   "elbo_mhsa",
          "mdm_loss",      "sampler_loss",     "classifier_loss"};
}

GradSuiteReport run_grad_suite(std::size_t seeds, double tolerance,
                               const std::vector<std::string>& only,
                               const std::function<void(const GradSuiteEntry&)>& on_entry) {
  const auto t0 = std::chrono::steady_clock::now();
  auto names = only.empty() ? grad_suite_cases() : only;
  GradSuiteReport rep;
  for (const auto& name : names) {
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      Case c = composite_case(name, seed);
      GradCheckOptions o;
      o.max_entries_per_param = c.max_entries;
      o.seed = seed;
      const auto r = grad_check(c.build, c.leaves, tolerance, o);
      GradSuiteEntry e{name, seed, 0, r.max_rel_error, r.passed};
      for (const auto& x : r.entries) e.checked += x.checked;
      rep.max_rel_error = std::max(rep.max_rel_error, e.max_rel_error);
      rep.passed = rep.passed && e.passed;
      if (on_entry) on_entry(e);
      rep.entries.push_back(std::move(e));
    }
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace motionpred
