#include <cmath>
#include <cstring>
#include <limits>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "motionpred/error.hpp"
#include "motionpred/grad_check.hpp"
#include "motionpred/ops.hpp"
#include "motionpred/param_store.hpp"
#include "motionpred/rng.hpp"

using namespace motionpred;

namespace {

Tensor random_leaf(Shape shape, Rng& rng, bool grad = true) {
  NdValue v(std::move(shape));
  for (auto& x : v.data) x = rng.normal();
  return Tensor::leaf(std::move(v), grad);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("motionpred_test_" + name);
}

}  // namespace

TEST_CASE("identity linear layer passes input through") {
  Tensor w = Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor b = Tensor::constant({3}, {0, 0, 0});
  Tensor x = Tensor::constant({1, 3}, {0.5, -2.0, 7.25});
  Tensor y = add_row(matmul(x, w), b);
  for (std::size_t i = 0; i < 3; ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("matmul by identity") {
  Tensor a = Tensor::constant({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::constant({2, 2}, {1, 0, 0, 1});
  Tensor c = matmul(a, eye);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("softmax rows are a distribution") {
  Rng rng(3);
  for (int s = 0; s < 20; ++s) {
    Tensor x = random_leaf({4, 7}, rng, false);
    Tensor y = softmax_rows(scale(x, 5.0));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        const double p = y.at(r, c);
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        total += p;
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("shape mismatch names the op and scope") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  NameScope scope("decoder.layer0");
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("decoder.layer0") != std::string::npos);
  }
}

TEST_CASE("non-finite intermediate is rejected") {
  Tensor x = Tensor::constant({2}, {1.0, -1.0});
  CHECK_THROWS_AS((void)log(x), NumericError);
}

TEST_CASE("sqrt at zero has a zero gradient") {
  Tensor x = Tensor::leaf(NdValue({2}, {0.0, 4.0}), true);
  backward(sum(sqrt(x)));
  CHECK((*x.grad())[0] == 0.0);
  CHECK((*x.grad())[1] == 0.25);
  CHECK_THROWS_AS((void)sqrt(Tensor::constant({1}, {-1.0})), NumericError);
}

TEST_CASE("backward of x^2 at 3 gives 6") {
  Tensor x = Tensor::leaf(NdValue({1}, {3.0}), true);
  backward(sum(square(x)));
  REQUIRE(x.grad());
  CHECK((*x.grad())[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("gradient of sum(softmax(x)) is zero") {
  Rng rng(11);
  Tensor x = random_leaf({1, 6}, rng);
  backward(sum(softmax_rows(x)));
  for (double g : *x.grad()) CHECK(std::abs(g) < 1e-15);
}

TEST_CASE("backward requires a scalar") {
  Tensor x = Tensor::leaf(NdValue({2}, {1.0, 2.0}), true);
  CHECK_THROWS_AS(backward(square(x)), ShapeError);
}

TEST_CASE("gradients accumulate over repeated use") {
  // f(w) = sum(x w) + sum(y w) should equal the gradient of a graph that
  // uses two independent copies of w, summed.
  Rng rng(5);
  Tensor x = random_leaf({2, 3}, rng, false);
  Tensor y = random_leaf({2, 3}, rng, false);
  Tensor w = random_leaf({3, 2}, rng);
  backward(add(sum(matmul(x, w)), sum(matmul(y, w))));
  auto shared = *w.grad();

  Tensor w1 = Tensor::leaf(w.value(), true);
  Tensor w2 = Tensor::leaf(w.value(), true);
  w1.clear_grad();
  w2.clear_grad();
  backward(add(sum(matmul(x, w1)), sum(matmul(y, w2))));
  for (std::size_t i = 0; i < shared.size(); ++i) {
    CHECK(shared[i] == doctest::Approx((*w1.grad())[i] + (*w2.grad())[i]).epsilon(1e-14));
  }
}

TEST_CASE("random three-layer network matches finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    ParamStore store;
    Tensor w1 = store.add_normal("w1", {4, 6}, 0.5, rng);
    Tensor b1 = store.add_normal("b1", {6}, 0.1, rng);
    Tensor w2 = store.add_normal("w2", {6, 5}, 0.5, rng);
    Tensor b2 = store.add_normal("b2", {5}, 0.1, rng);
    Tensor w3 = store.add_normal("w3", {5, 1}, 0.5, rng);
    Tensor x = random_leaf({3, 4}, rng, false);
    auto build = [&] {
      Tensor h = gelu(add_row(matmul(x, w1), b1));
      h = gelu(add_row(matmul(h, w2), b2));
      return sum(square(matmul(h, w3)));
    };
    auto report = grad_check(build, store, 1e-4);
    CHECK_MESSAGE(report.passed, "max rel err " << report.max_rel_error);
  }
}

TEST_CASE("every primitive op passes gradient checks over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    Tensor a = random_leaf({3, 4}, rng);
    Tensor b = random_leaf({3, 4}, rng);
    Tensor row = random_leaf({4}, rng);
    Tensor sq = random_leaf({4, 4}, rng);
    Tensor pos = Tensor::leaf(NdValue({3, 4}, std::vector<double>(12)), true);
    for (auto& v : pos.mutable_data()) v = 0.5 + rng.uniform();
    const std::size_t labels[] = {0, 3, 1};
    const std::size_t pick[] = {2, 0, 2, 1};
    auto build = [&] {
      Tensor t = add(mul(a, b), sub(a, scale(b, 0.3)));
      t = add_row(mul_row(t, row), row);
      t = layer_norm(t, row, row);
      t = add(t, softmax_rows(b));
      t = add(t, exp(scale(a, 0.2)));
      t = add(t, log(pos));
      t = add(t, sqrt(pos));
      t = concat_cols({slice_cols(t, 0, 2), slice_cols(t, 2, 2)});
      t = concat_rows({slice_rows(t, 0, 1), gather_rows(t, pick)});
      Tensor ce = cross_entropy(slice_rows(t, 0, 3), labels);
      Tensor r = row_sum(transpose(t));
      Tensor det = logabsdet(add(sq, Tensor::constant({4, 4}, {4, 0, 0, 0, 0, 4, 0, 0, 0, 0, 4, 0,
                                                                 0, 0, 0, 4})));
      return add(add(add(sum(square(r)), ce), det), mean(gelu(t)));
    };
    auto report = grad_check(build, {{"a", a}, {"b", b}, {"row", row}, {"sq", sq}, {"pos", pos}},
                             1e-3);
    CHECK_MESSAGE(report.passed, "seed " << seed << " max rel err " << report.max_rel_error);
  }
}

TEST_CASE("attention op gradients over 20 seeds, with and without mask") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(200 + seed);
    Tensor q = random_leaf({2 * 3, 8}, rng);
    Tensor k = random_leaf({2 * 4, 8}, rng);
    Tensor v = random_leaf({2 * 4, 8}, rng);
    AttentionMask mask{3, 4, {0, -1, -std::numeric_limits<double>::infinity(), 0, 0, 0, -2, -1,
                              -std::numeric_limits<double>::infinity(), 0, 0, 0}};
    auto build = [&] {
      return add(sum(square(attention(q, k, v, 2, 2))), sum(square(attention(q, k, v, 2, 4, &mask))));
    };
    auto report = grad_check(build, {{"q", q}, {"k", k}, {"v", v}}, 1e-3);
    CHECK_MESSAGE(report.passed, "seed " << seed << " max rel err " << report.max_rel_error);
  }
}

TEST_CASE("fully masked attention row is rejected") {
  Tensor q = Tensor::zeros({1, 4});
  Tensor k = Tensor::zeros({2, 4});
  const double inf = std::numeric_limits<double>::infinity();
  AttentionMask mask{1, 2, {-inf, -inf}};
  CHECK_THROWS_AS((void)attention(q, k, k, 1, 2, &mask), ValidationError);
}

TEST_CASE("forward is deterministic for identical seeds") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    ParamStore store;
    Tensor w = store.add_normal("w", {5, 5}, 1.0, rng);
    Tensor x = random_leaf({4, 5}, rng, false);
    Tensor y = softmax_rows(gelu(matmul(x, w)));
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  CHECK(run(42) == run(42));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParamStore store;
  Tensor p = store.add("p", NdValue({3}, {1.0, -2.0, 0.5}));
  p.value().grad = std::vector<double>(3, 0.0);
  store.adam_step(0.001);
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) ==
        std::vector<double>{1.0, -2.0, 0.5});
  CHECK(store.step_count() == 1);
}

TEST_CASE("adam: first step with unit gradient moves by lr") {
  // Bias-corrected first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  ParamStore store;
  Tensor p = store.add("p", NdValue({1}, {0.25}));
  p.value().grad = std::vector<double>{1.0};
  store.adam_step(0.001);
  const double expected = 0.25 - 0.001 * 1.0 / (1.0 + 1e-8);
  CHECK(p.data()[0] == doctest::Approx(expected).epsilon(1e-14));
  CHECK(!p.grad());
}

TEST_CASE("adam: step counter and missing gradient") {
  ParamStore store;
  Tensor p = store.add("p", NdValue({1}, {0.0}));
  Tensor q = store.add("q", NdValue({1}, {0.0}));
  for (int i = 0; i < 2; ++i) {
    p.value().grad = std::vector<double>{1.0};
    q.value().grad = std::vector<double>{1.0};
    store.adam_step(0.01);
  }
  CHECK(store.step_count() == 2);
  p.value().grad = std::vector<double>{1.0};
  CHECK_THROWS_AS(store.adam_step(0.01), ValidationError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(9);
  ParamStore a;
  a.add_normal("enc.weight", {3, 4}, 1.0, rng);
  a.add_normal("enc.bias", {4}, 1.0, rng);
  const auto path = temp_path("ckpt.mfpk");
  a.save(path);

  Rng other(77);
  ParamStore b;
  b.add_normal("enc.weight", {3, 4}, 1.0, other);
  b.add_normal("enc.bias", {4}, 1.0, other);
  CHECK(a.fingerprint() != b.fingerprint());
  b.load(path);
  CHECK(a.fingerprint() == b.fingerprint());

  auto records = read_checkpoint(path);
  REQUIRE(records.size() == 2);
  CHECK(records[0].name == "enc.weight");
  CHECK(records[0].value.shape == Shape{3, 4});
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint layout is magic, version, then records") {
  const auto path = temp_path("layout.mfpk");
  write_checkpoint(path, {{"w", NdValue({2}, {1.5, -2.0})}});
  std::ifstream is(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  // 4 magic + 4 version + 4 name len + 1 name + 4 rank + 8 dim + 16 data
  REQUIRE(bytes.size() == 41);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MFPK");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 1);
  CHECK(bytes[12] == 'w');
  double first;
  std::memcpy(&first, bytes.data() + 25, 8);
  CHECK(first == 1.5);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint errors") {
  const auto path = temp_path("bad.mfpk");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_AS(read_checkpoint(path), FormatError);
  write_checkpoint(path, {{"w", NdValue({4}, {1, 2, 3, 4})}});
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
  CHECK_THROWS_AS(read_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}
