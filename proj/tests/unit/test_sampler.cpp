#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>

#include "motionpred/error.hpp"
#include "motionpred/grad_check.hpp"
#include "motionpred/sampler.hpp"
#include "toy.hpp"

using namespace motionpred;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor::constant({r, c}, std::move(v));
}

BranchMaps single_item(std::vector<Tensor> a, std::vector<Tensor> b) {
  BranchMaps m;
  m.batch = 1;
  m.branches = a.size();
  m.a = std::move(a);
  m.b = std::move(b);
  return m;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.data()[i * t.cols() + j];
  return m;
}

// log density of N(mean, cov) at x
double log_normal(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  const Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::VectorXd r = llt.matrixL().solve(x - mean);
  double logdet = 0;
  for (Eigen::Index i = 0; i < cov.rows(); ++i) logdet += 2 * std::log(llt.matrixL()(i, i));
  return -0.5 * (r.squaredNorm() + logdet + cov.rows() * std::log(2 * M_PI));
}

struct ToyVae {
  VaeConfig cfg = toy::vae_config();
  AinbVae vae;
  std::vector<MotionSequence> seqs;
  explicit ToyVae(std::uint64_t seed) : vae(cfg, seed), seqs(toy::gait_set(4, 14, seed)) {
    vae.set_norm(window_norm_stats(seqs, cfg));
  }
};

}  // namespace

TEST_CASE("affine branch maps") {
  const std::size_t k = 3;
  const Tensor z = mat(1, k, {0.5, -1.0, 2.0});
  const Tensor eye = mat(k, k, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor zero_b = mat(1, k, {0, 0, 0});
  auto out = map_latents(z, single_item({eye, eye, eye}, {zero_b, zero_b, zero_b}));
  REQUIRE(out.size() == 3);
  for (const auto& o : out)
    for (std::size_t i = 0; i < k; ++i) CHECK(o.data()[i] == z.data()[i]);

  const Tensor zero_a = mat(k, k, std::vector<double>(k * k, 0.0));
  const Tensor c = mat(1, k, {3, -2, 1});
  out = map_latents(z, single_item({zero_a, zero_a}, {c, c}));
  for (const auto& o : out)
    for (std::size_t i = 0; i < k; ++i) CHECK(o.data()[i] == c.data()[i]);

  CHECK_THROWS_AS(map_latents(z, single_item({eye}, {zero_b})), ValidationError);
  CHECK_THROWS_AS(DiversitySampler(SamplerConfig{.branches = 1}, 0), ValidationError);
}

TEST_CASE("branch covariance and mean by Monte Carlo") {
  const std::size_t k = 4, n = 100000;
  Rng rng(3);
  const Tensor a = mat(k, k, rng.normal_vector(k * k));
  const Tensor b = mat(1, k, rng.normal_vector(k));
  const BranchMaps m = single_item({a, a}, {b, b});
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(k, k);
  std::vector<Eigen::VectorXd> draws;
  for (std::size_t s = 0; s < n; ++s) {
    const auto zl = map_latents(mat(1, k, rng.normal_vector(k)), m)[0];
    Eigen::VectorXd x(k);
    for (std::size_t i = 0; i < k; ++i) x[i] = zl.data()[i];
    mean += x;
    draws.push_back(x);
  }
  mean /= n;
  for (const auto& x : draws) second += (x - mean) * (x - mean).transpose();
  second /= n - 1;
  const Eigen::MatrixXd want = to_eigen(a) * to_eigen(a).transpose();
  CHECK((second - want).norm() / want.norm() < 0.02);
  for (std::size_t i = 0; i < k; ++i) CHECK(std::abs(mean[i] - b.data()[i]) < 0.03);
}

TEST_CASE("branch KL closed form") {
  const std::size_t k = 3;
  const Tensor mu = mat(1, k, {0.3, -0.2, 1.0});
  const std::vector<double> sigma{0.5, 2.0, 1.5};
  std::vector<double> ls, diag(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    ls.push_back(std::log(sigma[i]));
    diag[i * k + i] = sigma[i];
  }
  CHECK(branch_kl(mat(k, k, diag), mu, mu, mat(1, k, ls)).kl.item() == doctest::Approx(0.0).epsilon(1e-12));
  const Tensor eye = mat(k, k, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor zeros = mat(1, k, {0, 0, 0});
  const auto kl0 = branch_kl(eye, zeros, zeros, zeros);
  CHECK(std::abs(kl0.kl.item()) < 1e-14);
  CHECK_FALSE(kl0.clamped);

  const auto sing = branch_kl(mat(k, k, std::vector<double>(k * k, 0.0)), zeros, zeros, zeros);
  CHECK(sing.clamped);
  CHECK(std::isfinite(sing.kl.item()));
  CHECK(sing.kl.item() == doctest::Approx(0.5 * (60.0 * k - k)));
}

TEST_CASE("branch KL matches Monte Carlo on random parameterizations") {
  const std::size_t k = 3, n = 100000;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(50 + seed);
    auto av = rng.normal_vector(k * k);
    for (std::size_t i = 0; i < k; ++i) av[i * k + i] += 1.5;
    const Tensor a = mat(k, k, av), b = mat(1, k, rng.normal_vector(k));
    const Tensor mu = mat(1, k, rng.normal_vector(k));
    std::vector<double> ls;
    for (std::size_t i = 0; i < k; ++i) ls.push_back(rng.uniform(-0.5, 0.8));
    const double closed = branch_kl(a, b, mu, mat(1, k, ls)).kl.item();

    const Eigen::MatrixXd A = to_eigen(a);
    const Eigen::MatrixXd cov_q = A * A.transpose();
    Eigen::VectorXd bq(k), mp(k), sp(k);
    for (std::size_t i = 0; i < k; ++i) {
      bq[i] = b.data()[i];
      mp[i] = mu.data()[i];
      sp[i] = std::exp(2 * ls[i]);
    }
    const Eigen::MatrixXd cov_p = sp.asDiagonal();
    double s = 0, s2 = 0;
    for (std::size_t d = 0; d < n; ++d) {
      Eigen::VectorXd e(k);
      for (std::size_t i = 0; i < k; ++i) e[i] = rng.normal();
      const Eigen::VectorXd x = A * e + bq;
      const double v = log_normal(x, bq, cov_q) - log_normal(x, mp, cov_p);
      s += v;
      s2 += v * v;
    }
    const double mc = s / n, se = std::sqrt((s2 / n - mc * mc) / n);
    CHECK(std::abs(mc - closed) < 3 * se);
  }
}

TEST_CASE("sampler loss terms") {
  const Tensor y = mat(2, 2, {1, 2, 3, 4});
  const Tensor zero = Tensor::scalar(0.0);
  CHECK(sampler_loss({y, y}, 1, {zero, zero}, 200, 1).item() == 0.0);

  const Tensor y1 = mat(2, 2, {0, 0, 0, 0}), y2 = mat(2, 2, {1, 0, 0, 1}), y3 = mat(2, 2, {3, 1, 0, 0});
  const std::vector<Tensor> ys{y1, y2, y3};
  double best = 1e300;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      if (i == j) continue;
      double d = 0;
      for (std::size_t e = 0; e < 4; ++e) d += std::pow(ys[i].data()[e] - ys[j].data()[e], 2);
      best = std::min(best, std::sqrt(d));
    }
  CHECK(best == std::sqrt(2.0));
  CHECK(sampler_loss(ys, 1, {zero, zero, zero}, 200, 1).item() == doctest::Approx(-200 * best));
  const Tensor kl = Tensor::scalar(0.7);
  CHECK(sampler_loss(ys, 1, {kl, kl, kl}, 200, 2).item() == doctest::Approx(-200 * best + 2 * 2.1));

  // every branch equal to the prior and identical outputs
  const std::size_t k = 2;
  const Tensor mu = mat(1, k, {0.1, 0.2}), ls = mat(1, k, {std::log(0.3), std::log(0.4)});
  const Tensor a = mat(k, k, {0.3, 0, 0, 0.4});
  std::vector<Tensor> kls;
  for (int l = 0; l < 3; ++l) kls.push_back(branch_kl(a, mu, mu, ls).kl);
  CHECK(std::abs(sampler_loss({y, y, y}, 1, kls, 200, 1).item()) < 1e-12);
  CHECK_THROWS_AS(sampler_loss({y}, 1, {zero}, 200, 1), ValidationError);
}

TEST_CASE("min-pairwise penalty reacts more to a collapsed pair than mean-pairwise") {
  // branches 1 and 2 nearly coincide, branch 3 is far away and level with
  // branch 2 along the probed axis, so only the collapsed pair's distance moves
  const auto build = [](double sep, bool use_min) {
    const std::vector<Tensor> ys{mat(1, 3, {0, 0, 0}), mat(1, 3, {sep, 0, 0}), mat(1, 3, {0.05, 5, 5})};
    std::vector<Tensor> d;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = i + 1; j < 3; ++j) d.push_back(pair_distance(ys[i], ys[j]));
    if (use_min) return -200.0 * min_of(d).item();
    double s = 0;
    for (const auto& x : d) s += x.item();
    return -200.0 * s / 3.0;
  };
  const double sep = 0.05, h = 1e-4;
  const double g_min = (build(sep + h, true) - build(sep - h, true)) / (2 * h);
  const double g_mean = (build(sep + h, false) - build(sep - h, false)) / (2 * h);
  CHECK(g_min < 0);
  CHECK(g_mean < 0);
  CHECK(std::abs(g_min) > std::abs(g_mean));
  // the library loss uses the min form
  const Tensor zero = Tensor::scalar(0.0);
  const auto lib = [&](double s) {
    return sampler_loss({mat(1, 3, {0, 0, 0}), mat(1, 3, {s, 0, 0}), mat(1, 3, {0.05, 5, 5})}, 1,
                        {zero, zero, zero}, 200, 1)
        .item();
  };
  CHECK((lib(sep + h) - lib(sep - h)) / (2 * h) == doctest::Approx(g_min).epsilon(1e-6));
}

TEST_CASE("sampler loss gradients") {
  ToyVae t(2);
  const auto windows = toy::windows(t.seqs, t.cfg.window(), 2);
  const VaeBatch b = t.vae.batch_from_windows({windows[0], windows[1]});
  DiversitySampler s(DiversitySampler::config_for(t.cfg, 3), 2);
  Rng rng(5);
  const Tensor z = mat(2, t.cfg.latent, rng.normal_vector(2 * t.cfg.latent));
  GradCheckOptions o;
  o.max_entries_per_param = 8;
  const auto rep = grad_check([&] { return s.loss(t.vae, b, z); }, s.params(), 1e-4, o);
  CHECK(rep.passed);
  t.vae.params().zero_grad();
}

TEST_CASE("sampler training keeps the VAE frozen and lowers the loss") {
  ToyVae t(3);
  TrainVaeOptions vo;
  vo.epochs = 20;
  vo.batch_size = 8;
  vo.seed = 3;
  train_vae(t.vae, t.seqs, vo);
  const auto before = t.vae.params().fingerprint();
  DiversitySampler s(DiversitySampler::config_for(t.cfg), 3);
  TrainSamplerOptions so;
  so.epochs = 40;
  so.batch_size = 8;
  so.seed = 3;
  const auto steps = train_sampler(s, t.vae, t.seqs, so);
  CHECK(t.vae.params().fingerprint() == before);
  REQUIRE(steps.size() >= 40);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    head += steps[i].loss;
    tail += steps[steps.size() - 20 + i].loss;
  }
  CHECK(tail < head);
  for (const auto& st : steps) CHECK(std::isfinite(st.loss));

  const auto w = toy::windows(t.seqs, t.cfg.window(), 9)[0];
  ContextPair ctx;
  for (std::size_t k = 0; k < t.cfg.t_start; ++k) ctx.start.push_back(w.frames[k]);
  for (std::size_t k = 0; k < t.cfg.t_end; ++k)
    ctx.end.push_back(w.frames[t.cfg.t_start + t.cfg.t_between + k]);
  const auto a = s.sample(t.vae, ctx, 0, 11), a2 = s.sample(t.vae, ctx, 0, 11);
  REQUIRE(a.size() == 5);
  CHECK(a[0].size() == t.cfg.t_between);
  for (std::size_t l = 0; l < a.size(); ++l)
    for (std::size_t k = 0; k < a[l].size(); ++k) CHECK(pose_vectorize(a[l][k]) == pose_vectorize(a2[l][k]));

  const auto path = std::filesystem::temp_directory_path() / "sampler_roundtrip.mfpk";
  s.save(path);
  const auto back = DiversitySampler::load(path);
  CHECK(back.config().branches == 5);
  const auto c = back.sample(t.vae, ctx, 0, 11);
  for (std::size_t l = 0; l < a.size(); ++l)
    for (std::size_t k = 0; k < a[l].size(); ++k) CHECK(pose_vectorize(a[l][k]) == pose_vectorize(c[l][k]));
  std::filesystem::remove(path);
  std::filesystem::remove(sidecar_path(path));
}
