#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include "motionpred/dataset.hpp"
#include "motionpred/error.hpp"
#include "motionpred/rng.hpp"

using namespace motionpred;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("motionpred_" + name);
}

Pose random_pose(Rng& rng) {
  Pose p;
  p.root_translation = Vec3(rng.normal(), rng.normal(), rng.normal());
  p.root_orientation = Quat(rng.normal(), rng.normal(), rng.normal(), rng.normal()).normalized();
  for (auto& r : p.joint_rotations) {
    const Mat3 m = Quat(rng.normal(), rng.normal(), rng.normal(), rng.normal())
                       .normalized()
                       .toRotationMatrix();
    r = matrix_to_rot6(m);
  }
  return p;
}

double heading_diff(double a, double b) {
  return std::remainder(a - b, 2 * std::numbers::pi);
}

}  // namespace

TEST_CASE("zero turn keeps the heading") {
  for (std::uint64_t seed : {0u, 3u, 11u}) {
    auto seq = synth_generate(Action::Walk, 60, 0.0, seed);
    CHECK(std::abs(heading_diff(heading_of(seq.frames.back().root_orientation),
                                heading_of(seq.frames.front().root_orientation))) < 1e-9);
  }
}

TEST_CASE("quarter turn arc ends rotated by pi/2") {
  auto seq = synth_generate(Action::Walk, 60, std::numbers::pi / 2, 7);
  const double h0 = heading_of(seq.frames.front().root_orientation);
  const double h1 = heading_of(seq.frames.back().root_orientation);
  CHECK(std::abs(heading_diff(h1, h0 + std::numbers::pi / 2)) < 1e-6);
  CHECK(std::abs(total_heading_change(seq.frames) - std::numbers::pi / 2) < 1e-6);

  // Arc oracle: chord of a circular arc of length L and angle a is 2 (L/a) sin(a/2).
  const double len = 1.2 * 59.0 / 30.0;
  const double a = std::numbers::pi / 2;
  Vec3 d = seq.frames.back().root_translation - seq.frames.front().root_translation;
  d.y() = 0;
  CHECK(d.norm() == doctest::Approx(2 * len / a * std::sin(a / 2)).epsilon(1e-9));
}

TEST_CASE("run versus walk displacement follows the speeds") {
  for (std::uint64_t seed : {1u, 2u}) {
    auto walk = synth_generate(Action::Walk, 60, 0.0, seed);
    auto run = synth_generate(Action::Run, 60, 0.0, seed);
    auto disp = [](const MotionSequence& s) {
      Vec3 d = s.frames.back().root_translation - s.frames.front().root_translation;
      d.y() = 0;
      return d.norm();
    };
    CHECK(disp(run) / disp(walk) == doctest::Approx(3.5 / 1.2).epsilon(0.05));
  }
}

TEST_CASE("heading change is additive across concatenated arcs") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const double a = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double b = rng.uniform(-std::numbers::pi, std::numbers::pi);
    auto first = synth_generate(Action::Jog, 40, a, 10 + trial);
    SynthOptions o;
    o.initial_heading = heading_of(first.frames.back().root_orientation);
    o.start_x = first.frames.back().root_translation.x();
    o.start_z = first.frames.back().root_translation.z();
    auto second = synth_generate(Action::Jog, 40, b, 50 + trial, o);
    std::vector<Pose> all = first.frames;
    all.insert(all.end(), second.frames.begin() + 1, second.frames.end());
    CHECK(std::abs(total_heading_change(all) - (a + b)) < 1e-6);
  }
}

TEST_CASE("stance feet do not skate") {
  const Action gaits[] = {Action::Walk, Action::Jog, Action::Run, Action::Step};
  for (Action act : gaits) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const double turn = (static_cast<double>(seed) - 2.0) * 0.6;
      auto seq = synth_generate(act, 90, turn, seed);
      auto contacts = synth_contacts(act, 90, seed);
      double worst = 0.0;
      std::size_t stance_pairs = 0;
      for (std::size_t t = 1; t < seq.size(); ++t) {
        auto a = forward_kinematics(seq.frames[t - 1]);
        auto b = forward_kinematics(seq.frames[t]);
        for (auto [ankle, flags] : {std::pair{kLeftAnkle, &contacts.left},
                                    std::pair{kRightAnkle, &contacts.right}}) {
          if (!(*flags)[t - 1] || !(*flags)[t]) continue;
          Vec3 d = b[ankle] - a[ankle];
          d.y() = 0;
          worst = std::max(worst, d.norm() * seq.fps);
          ++stance_pairs;
        }
      }
      CHECK(stance_pairs > 0);
      CHECK_MESSAGE(worst < 0.05, action_name(act) << " seed " << seed << " speed " << worst);
    }
  }
}

TEST_CASE("1-NN on joint angular speeds separates the gait actions") {
  const Action gaits[] = {Action::Walk, Action::Jog, Action::Run, Action::Step};
  Rng rng(77);
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int a = 0; a < 4; ++a)
    for (int i = 0; i < 50; ++i) {
      auto seq = synth_generate(gaits[a], 60, rng.uniform(-1.0, 1.0), 1000 + 50 * a + i);
      feats.push_back(joint_angular_speeds(seq));
      labels.push_back(a);
    }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int pred = -1;
    for (std::size_t k = 0; k < feats.size(); ++k) {
      if (k == i) continue;
      double d = 0;
      for (std::size_t j = 0; j < kJoints; ++j) d += std::pow(feats[i][j] - feats[k][j], 2);
      if (d < best) best = d, pred = labels[k];
    }
    correct += pred == labels[i];
  }
  CHECK(static_cast<double>(correct) / feats.size() >= 0.95);
}

TEST_CASE("generator rejects bad arguments") {
  CHECK_THROWS_AS(synth_generate(static_cast<Action>(99), 60, 0.0, 0), ValidationError);
  CHECK_THROWS_AS(synth_generate(Action::Walk, 1, 0.0, 0), ValidationError);
  CHECK_THROWS_AS(synth_generate(Action::Walk, 60, 4.0, 0), ValidationError);
}

TEST_CASE("upper-body actions keep the root and feet in place") {
  for (Action a : target_actions().actions) {
    auto seq = synth_generate(a, 60, 0.0, 3);
    auto first = forward_kinematics(seq.frames.front());
    for (const auto& f : seq.frames) {
      auto fk = forward_kinematics(f);
      CHECK((fk[kLeftAnkle] - first[kLeftAnkle]).norm() < 1e-9);
      CHECK((fk[kRightAnkle] - first[kRightAnkle]).norm() < 1e-9);
    }
  }
}

TEST_CASE("generated poses carry unit quaternions and valid rotations") {
  auto seq = synth_generate(Action::Step, 30, 0.5, 9);
  for (const auto& f : seq.frames) {
    CHECK_NOTHROW(f.validate());
    CHECK(f.root_orientation.w() >= 0);
    for (const auto& r : f.joint_rotations) {
      const Mat3 m = rot6_to_matrix(r);
      CHECK((m.transpose() * m - Mat3::Identity()).norm() < 1e-9);
    }
  }
}

TEST_CASE("forward kinematics of the rest pose") {
  Pose p;
  p.root_translation = Vec3(1, 2, 3);
  auto fk = forward_kinematics(p);
  const auto& sk = skeleton();
  CHECK((fk[kLeftHip] - Vec3(1.1, 1.95, 3)).norm() < 1e-12);
  CHECK((fk[kLeftAnkle] - Vec3(1.1, 1.95 - 0.9, 3)).norm() < 1e-12);
  CHECK((fk[kRightKnee] - Vec3(0.9, 1.95 - sk.thigh, 3)).norm() < 1e-12);
  CHECK((fk[kRightShoulder] - Vec3(0.82, 2.45, 3)).norm() < 1e-12);
}

TEST_CASE("pose vectorization round trips") {
  Pose id;
  auto v = pose_vectorize(id);
  CHECK(v.size() == kPoseDim);
  Pose back = pose_devectorize(v);
  CHECK(pose_vectorize(back) == v);

  NormStats norm{std::vector<double>(kPoseDim), std::vector<double>(kPoseDim)};
  Rng rng(12);
  for (std::size_t i = 0; i < kPoseDim; ++i) {
    norm.mean[i] = rng.normal();
    norm.std[i] = 0.1 + rng.uniform();
  }
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng r(seed);
    Pose p = random_pose(r);
    auto x = pose_vectorize(p, &norm);
    auto y = pose_vectorize(pose_devectorize(x, &norm));
    auto ref = pose_vectorize(p);
    double err = 0;
    for (std::size_t i = 0; i < kPoseDim; ++i) err = std::max(err, std::abs(y[i] - ref[i]));
    CHECK(err < 1e-9);
  }
  std::vector<double> short_v(kPoseDim - 1, 0.0);
  CHECK_THROWS_AS(pose_devectorize(short_v), ValidationError);
  v[10] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(pose_devectorize(v), ValidationError);
}

TEST_CASE("devectorize renormalizes the quaternion") {
  auto v = pose_vectorize(Pose{});
  v[3] = 2.0;
  Pose p = pose_devectorize(v);
  CHECK(p.root_orientation.norm() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("normalization statistics") {
  MotionSequence s;
  s.frames = std::vector<Pose>(4);
  auto n = compute_norm_stats({s});
  for (double d : n.std) CHECK(d == kStdFloor);

  MotionSequence two;
  two.frames = std::vector<Pose>(2);
  two.frames[1].root_translation.x() = 2.0;
  auto m = compute_norm_stats({two});
  CHECK(m.mean[0] == doctest::Approx(1.0));
  CHECK(m.std[0] == doctest::Approx(1.0));

  CHECK_THROWS_AS(compute_norm_stats({}), ValidationError);

  GenDataOptions g;
  g.actions = {Action::Walk, Action::Run};
  g.per_action = 5;
  g.frames = 20;
  auto split = generate_dataset(g);
  CHECK(split.test.size() == 2);
  auto again = compute_norm_stats(split.train);
  CHECK(again.mean == split.norm.mean);
  split.test.front().frames.front().root_translation.x() += 100;
  CHECK(compute_norm_stats(split.train).mean == split.norm.mean);
}

TEST_CASE("dataset files round trip bit-exactly") {
  GenDataOptions g;
  g.actions = {Action::Jog};
  g.per_action = 1;
  g.frames = 12;
  g.test_fraction = 0;
  auto split = generate_dataset(g);
  const auto path = temp_path("roundtrip.jsonl");
  save_dataset(split, path);
  auto back = load_dataset(path);
  REQUIRE(back.train.size() == 1);
  CHECK(back.test.empty());
  CHECK(back.norm.mean == split.norm.mean);
  CHECK(back.norm.std == split.norm.std);
  const auto& a = split.train[0];
  const auto& b = back.train[0];
  CHECK(a.id == b.id);
  CHECK(a.label == b.label);
  REQUIRE(a.size() == b.size());
  for (std::size_t t = 0; t < a.size(); ++t) CHECK(pose_vectorize(a.frames[t]) == pose_vectorize(b.frames[t]));
  fs::remove(path);
}

TEST_CASE("dataset loading rejects bad files") {
  GenDataOptions g;
  g.actions = {Action::Walk};
  g.per_action = 1;
  g.frames = 5;
  g.test_fraction = 0;
  auto split = generate_dataset(g);

  const auto empty = temp_path("empty.jsonl");
  std::ofstream(empty).close();
  CHECK_THROWS_AS(load_dataset(empty), FormatError);

  const auto bad_q = temp_path("badq.jsonl");
  split.train[0].frames[3].root_orientation = Quat(0.5, 0, 0, 0);
  {
    std::ofstream out(bad_q);
    out << nlohmann::json{{"format", "motionpred-dataset"}, {"version", 1}}.dump() << '\n';
    out << sequence_to_json(split.train[0]).dump() << '\n';
  }
  try {
    load_dataset(bad_q);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("frame 3") != std::string::npos);
  }

  const auto version = temp_path("version.jsonl");
  std::ofstream(version) << nlohmann::json{{"format", "motionpred-dataset"}, {"version", 9}}.dump()
                         << '\n';
  CHECK_THROWS_AS(load_dataset(version), FormatError);

  const auto truncated = temp_path("truncated.jsonl");
  split.train[0].frames[3].root_orientation = Quat::Identity();
  {
    std::ofstream out(truncated);
    out << nlohmann::json{{"format", "motionpred-dataset"}, {"version", 1}}.dump() << '\n';
    const auto line = sequence_to_json(split.train[0]).dump();
    out << line.substr(0, line.size() / 2);
  }
  CHECK_THROWS_AS(load_dataset(truncated), FormatError);
  for (const auto& p : {empty, bad_q, version, truncated}) fs::remove(p);
}
