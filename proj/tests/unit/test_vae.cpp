#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "motionpred/error.hpp"
#include "motionpred/grad_check.hpp"
#include "toy.hpp"

using namespace motionpred;

namespace {

struct Fixture {
  VaeConfig cfg;
  AinbVae model;
  std::vector<MotionSequence> seqs;
  VaeBatch batch;

  explicit Fixture(std::uint64_t seed, DecoderMode mode = DecoderMode::owm)
      : cfg(toy::vae_config(mode)), model(cfg, seed), seqs(toy::gait_set(1, 12, seed)) {
    model.set_norm(window_norm_stats(seqs, cfg));
    batch = model.batch_from_windows(toy::windows(seqs, cfg.window(), seed));
  }
};

Tensor row_constant(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::constant({1, n}, std::move(v));
}

GaussianParams gauss(std::vector<double> mu, std::vector<double> sigma) {
  for (auto& s : sigma) s = std::log(s);
  return {row_constant(std::move(mu)), row_constant(std::move(sigma))};
}

double l2(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("context encoders emit width-d embeddings that depend on the input") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Fixture f(seed);
    NoGradGuard ng;
    Tensor e = f.model.encode_start(f.batch.start, f.batch.size);
    CHECK(e.rows() == f.batch.size);
    CHECK(e.cols() == f.cfg.width);
    const auto d = e.data();
    CHECK(l2(d.subspan(0, 8), d.subspan(8, 8)) > 0);
    Tensor one = f.model.encode_end(slice_rows(f.batch.end, 0, 1), 1);
    CHECK(one.cols() == f.cfg.width);
  }
  Fixture f(1);
  CHECK_THROWS_AS(f.model.encode_start(Tensor::zeros({2, kPoseDim - 1}), 1), ShapeError);
}

TEST_CASE("action embedding") {
  Fixture f(2);
  NoGradGuard ng;
  Tensor a = f.model.encode_action({0, 0, 2});
  CHECK(a.cols() == f.cfg.width);
  const auto d = a.data();
  CHECK(l2(d.subspan(0, 8), d.subspan(8, 8)) == 0.0);
  CHECK(l2(d.subspan(0, 8), d.subspan(16, 8)) > 0.0);
  CHECK_THROWS_AS(f.model.encode_action({4}), ValidationError);
}

TEST_CASE("in-between encoder is causal over frames") {
  Rng rng(3);
  ParamStore store;
  SequenceEncoderConfig cfg{kPoseDim, 8, 2, 2, 16, 4, MaskKind::periodic_causal};
  SequenceEncoder enc(store, "e", cfg, rng);
  NdValue frames({6, kPoseDim}, rng.normal_vector(6 * kPoseDim));
  NoGradGuard ng;
  const auto base = enc.encode_tokens(Tensor::leaf(frames), 1).value();
  for (std::size_t k = 0; k < 6; ++k) {
    NdValue p = frames;
    for (std::size_t c = 0; c < kPoseDim; ++c) p.data[k * kPoseDim + c] += rng.normal();
    const auto out = enc.encode_tokens(Tensor::leaf(p), 1).value();
    for (std::size_t pos = 1; pos <= 6; ++pos) {
      double diff = 0;
      for (std::size_t c = 0; c < 8; ++c) diff += std::abs(out.data[pos * 8 + c] - base.data[pos * 8 + c]);
      if (pos - 1 < k) CHECK(diff == 0.0);
      else CHECK(diff > 0.0);
    }
  }
}

TEST_CASE("posterior and prior heads") {
  Fixture f(4);
  NoGradGuard ng;
  auto c = f.model.condition(f.batch);
  auto q = f.model.posterior(c, f.model.encode_between(f.batch.between, f.batch.size));
  auto p = f.model.prior(c);
  CHECK(q.mu.cols() == f.cfg.latent);
  CHECK(q.log_sigma.cols() == f.cfg.latent);
  CHECK(p.mu.cols() == f.cfg.latent);
  const Tensor sigma = q.sigma();
  for (double s : sigma.data()) CHECK(s > 0);
  CHECK_THROWS_AS(f.model.posterior(c, Tensor()), ValidationError);

  // Same context, different action label -> different prior mean.
  VaeBatch b2 = f.batch;
  for (auto& l : b2.labels) l = (l + 1) % 4;
  auto p2 = f.model.prior(f.model.condition(b2));
  CHECK(l2(p.mu.data(), p2.mu.data()) > 0);
}

TEST_CASE("reparameterization") {
  auto g = gauss({0.5, -1.0}, {2.0, 0.3});
  Tensor z = reparameterize(g, row_constant({0, 0}));
  CHECK(z.at(0, 0) == 0.5);
  CHECK(z.at(0, 1) == -1.0);
  GaussianParams floor{row_constant({1.0}), row_constant({kLogSigmaMin})};
  CHECK(std::abs(reparameterize(floor, row_constant({2.0})).item() - 1.0) <= 1e-6 * 2.0 * (1 + 1e-9));

  Rng rng(5);
  const int n = 100000;
  double s = 0, s2 = 0;
  auto g1 = gauss({1.5}, {0.7});
  for (int i = 0; i < n; ++i) {
    const double z1 = reparameterize(g1, row_constant({rng.normal()})).item();
    s += z1;
    s2 += z1 * z1;
  }
  const double m = s / n, sd = std::sqrt(s2 / n - m * m);
  CHECK(std::abs(m - 1.5) < 0.015);
  CHECK(std::abs(sd - 0.7) < 0.007);
}

TEST_CASE("diagonal KL closed form") {
  CHECK(kl_diag_gaussians(gauss({0, 0}, {1, 1}), gauss({0, 0}, {1, 1})).item() == 0.0);
  CHECK(kl_diag_gaussians(gauss({1, 1, 1}, {1, 1, 1}), gauss({0, 0, 0}, {1, 1, 1})).item() ==
        doctest::Approx(1.5).epsilon(1e-14));
  const std::vector<double> one{1.0}, zero{0.0}, bad{0.0};
  CHECK_THROWS_AS(kl_diag_gaussians(one, bad, zero, one), ValidationError);

  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> mq(3), sq(3), mp(3), sp(3);
    for (int i = 0; i < 3; ++i) {
      mq[i] = rng.normal();
      mp[i] = rng.normal();
      sq[i] = rng.uniform(0.3, 1.5);
      sp[i] = rng.uniform(0.5, 2.0);
    }
    const double closed = kl_diag_gaussians(mq, sq, mp, sp);
    CHECK(kl_diag_gaussians(gauss(mq, sq), gauss(mp, sp)).item() ==
          doctest::Approx(closed).epsilon(1e-12));
    // Monte Carlo: E_q[log q(z) - log p(z)].
    const int n = 100000;
    double s = 0, s2 = 0;
    for (int k = 0; k < n; ++k) {
      double v = 0;
      for (int i = 0; i < 3; ++i) {
        const double z = mq[i] + sq[i] * rng.normal();
        const double a = (z - mq[i]) / sq[i], b = (z - mp[i]) / sp[i];
        v += -std::log(sq[i]) - 0.5 * a * a + std::log(sp[i]) + 0.5 * b * b;
      }
      s += v;
      s2 += v * v;
    }
    const double m = s / n, se = std::sqrt((s2 / n - m * m) / n);
    CHECK(std::abs(m - closed) < 3 * se);
  }
}

TEST_CASE("orientation warping") {
  Fixture f(7);
  // Tie the two OFEs.
  for (const auto& name : f.model.params().names()) {
    if (name.rfind("ofe_start.", 0) != 0) continue;
    auto src = f.model.params().get(name);
    auto dst = f.model.params().get("ofe_end." + name.substr(10));
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
  NoGradGuard ng;
  Tensor o = f.batch.orient_start;
  Tensor input;
  Tensor fo = f.model.owm_offset(o, o, &input);
  for (double v : input.data()) CHECK(v == 0.0);
  CHECK(fo.cols() == f.cfg.width);

  Fixture raw(7, DecoderMode::no_ofe);
  raw.model.owm_offset(raw.batch.orient_start, raw.batch.orient_end, &input);
  CHECK(input.cols() == 6);
  Fixture none(7, DecoderMode::mhsa);
  CHECK_THROWS_AS(none.model.owm_offset(o, o), ValidationError);
}

TEST_CASE("decoder output shape, determinism and latent sensitivity") {
  for (auto mode : {DecoderMode::owm, DecoderMode::no_ofe, DecoderMode::mhsa}) {
    Fixture f(8, mode);
    NoGradGuard ng;
    auto c = f.model.condition(f.batch);
    Rng rng(1);
    Tensor z1 = Tensor::constant({f.batch.size, 4}, rng.normal_vector(f.batch.size * 4));
    Tensor z2 = Tensor::constant({f.batch.size, 4}, rng.normal_vector(f.batch.size * 4));
    Tensor a = f.model.decode(c, z1);
    Tensor b = f.model.decode(c, z1);
    Tensor d = f.model.decode(c, z2);
    CHECK(a.rows() == f.batch.size * f.cfg.t_between);
    CHECK(a.cols() == kPoseDim);
    CHECK(l2(a.data(), b.data()) == 0.0);
    CHECK(l2(a.data(), d.data()) > 0.0);
    for (const auto& item : f.model.to_poses(f.batch, a)) {
      CHECK(item.size() == f.cfg.t_between);
      for (const auto& p : item) CHECK_NOTHROW(p.validate());
    }
  }
}

TEST_CASE("ELBO arithmetic") {
  Tensor y = Tensor::constant({2, 2}, {1, 2, 3, 4});
  auto g = gauss({0.3}, {0.8});
  auto zero = elbo_loss(y, y, g, g, 100, 0.001);
  CHECK(zero.total.item() == 0.0);

  Tensor shifted = add_scalar(y, std::sqrt(0.5));
  auto l = elbo_loss(shifted, y, gauss({2.0}, {1.0}), gauss({0.0}, {1.0}), 100, 0.001);
  CHECK(l.mse.item() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(l.kl.item() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(l.total.item() == doctest::Approx(50.002).epsilon(1e-12));
  CHECK(l.total.item() == 100 * l.mse.item() + 0.001 * l.kl.item());
  CHECK(l.total.item() >= 0);
}

TEST_CASE("ELBO decomposition on the model") {
  Fixture f(9);
  Rng rng(2);
  auto l = f.model.loss(f.batch, rng);
  CHECK(l.total.item() == f.cfg.w_mse * l.mse.item() + f.cfg.w_kl * l.kl.item());
}

TEST_CASE("full VAE loss gradient check on a width-8 model") {
  for (auto mode : {DecoderMode::owm, DecoderMode::no_ofe, DecoderMode::mhsa}) {
    Fixture f(10, mode);
    Rng rng(3);
    Tensor eps = Tensor::constant({f.batch.size, 4}, rng.normal_vector(f.batch.size * 4));
    GradCheckOptions opts;
    opts.max_entries_per_param = 6;
    auto report = grad_check([&] { return f.model.loss(f.batch, eps).total; }, f.model.params(),
                             1e-3, opts);
    for (const auto& e : report.entries)
      CHECK_MESSAGE(e.passed, decoder_mode_name(mode) << " " << e.name << " " << e.max_rel_error);
  }
}

TEST_CASE("training steps reduce the loss on a toy set") {
  int decreasing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Fixture f(seed);
    Rng rng(seed);
    std::vector<double> losses;
    for (int step = 0; step < 50; ++step) losses.push_back(f.model.train_step(f.batch, 1e-3, rng));
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) head += losses[i], tail += losses[40 + i];
    decreasing += tail < head && losses.back() < losses.front();
  }
  CHECK(decreasing >= 9);
  Fixture f(1);
  CHECK_THROWS_AS(f.model.make_batch({}, {}), ValidationError);
}

TEST_CASE("prior sampling") {
  Fixture f(11);
  ContextPair ctx{{f.seqs[0].frames.begin(), f.seqs[0].frames.begin() + 2},
                  {f.seqs[0].frames.begin() + 5, f.seqs[0].frames.begin() + 7}};
  auto a = f.model.sample_inbetween(ctx, 1, 5);
  auto b = f.model.sample_inbetween(ctx, 1, 5);
  auto c = f.model.sample_inbetween(ctx, 1, 6);
  CHECK(a.size() == f.cfg.t_between);
  CHECK(l2(pose_vectorize(a[1]), pose_vectorize(b[1])) == 0.0);
  CHECK(l2(pose_vectorize(a[1]), pose_vectorize(c[1])) > 0.0);

  NoGradGuard ng;
  const VaeBatch batch = f.model.make_batch({ctx}, {1});
  const auto p = f.model.prior(f.model.condition(batch));
  Rng rng(4);
  const int n = 10000;
  std::vector<double> s(4, 0.0);
  for (int i = 0; i < n; ++i) {
    Tensor z = reparameterize(p, Tensor::constant({1, 4}, rng.normal_vector(4)));
    for (int k = 0; k < 4; ++k) s[k] += z.at(0, k);
  }
  for (int k = 0; k < 4; ++k) {
    const double se = std::exp(p.log_sigma.at(0, k)) / std::sqrt(n);
    CHECK(std::abs(s[k] / n - p.mu.at(0, k)) < 3 * se);
  }
}

TEST_CASE("all decoder modes train on a smoke set and checkpoints round trip") {
  auto seqs = toy::gait_set(2, 12, 3);
  for (auto mode : {DecoderMode::owm, DecoderMode::no_ofe, DecoderMode::mhsa}) {
    AinbVae m(toy::vae_config(mode), 4);
    TrainVaeOptions o;
    o.epochs = 3;
    o.batch_size = 4;
    auto losses = train_vae(m, seqs, o);
    CHECK(losses.size() == 6);
    const auto path = std::filesystem::temp_directory_path() / "motionpred_vae.mfpk";
    m.save(path);
    AinbVae back = AinbVae::load(path);
    CHECK(back.config().mode == mode);
    CHECK(back.params().fingerprint() == m.params().fingerprint());
    ContextPair ctx{{seqs[0].frames.begin(), seqs[0].frames.begin() + 2},
                    {seqs[0].frames.begin() + 5, seqs[0].frames.begin() + 7}};
    CHECK(l2(pose_vectorize(m.sample_inbetween(ctx, 0, 1)[2]),
             pose_vectorize(back.sample_inbetween(ctx, 0, 1)[2])) == 0.0);
    std::filesystem::remove(path);
    std::filesystem::remove(sidecar_path(path));
  }
}
