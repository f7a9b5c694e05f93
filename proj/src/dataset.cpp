#include "motionpred/dataset.hpp"

#include <cmath>
#include <fstream>

#include "motionpred/error.hpp"

namespace motionpred {

using nlohmann::json;

json sequence_to_json(const MotionSequence& seq) {
  json frames = json::array();
  for (const auto& f : seq.frames) {
    const auto& t = f.root_translation;
    const auto& q = f.root_orientation;
    json joints = json::array();
    for (const auto& r : f.joint_rotations) joints.push_back(r);
    frames.push_back({{"t", {t.x(), t.y(), t.z()}},
                      {"q", {q.w(), q.x(), q.y(), q.z()}},
                      {"j", std::move(joints)}});
  }
  return {{"id", seq.id},
          {"fps", seq.fps},
          {"label", action_name(seq.label)},
          {"split", seq.split},
          {"frames", std::move(frames)}};
}

MotionSequence sequence_from_json(const json& j, const std::string& where) {
  MotionSequence seq;
  try {
    seq.id = j.at("id").get<std::string>();
    seq.fps = j.at("fps").get<double>();
    seq.label = action_from_name(j.at("label").get<std::string>());
    seq.split = j.value("split", std::string("train"));
    const auto& frames = j.at("frames");
    if (!frames.is_array() || frames.empty()) {
      throw FormatError(where + "sequence '" + seq.id + "' has no frames");
    }
    if (!(seq.fps > 0)) throw FormatError(where + "sequence '" + seq.id + "' has fps <= 0");
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const auto& f = frames[i];
      Pose p;
      const auto t = f.at("t").get<std::array<double, 3>>();
      const auto q = f.at("q").get<std::array<double, 4>>();
      p.root_translation = Vec3(t[0], t[1], t[2]);
      p.root_orientation = Quat(q[0], q[1], q[2], q[3]);
      p.joint_rotations = f.at("j").get<std::vector<Rot6>>();
      try {
        p.validate();
      } catch (const ValidationError& e) {
        throw FormatError(where + "sequence '" + seq.id + "' frame " + std::to_string(i) + ": " +
                          e.what());
      }
      seq.frames.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw FormatError(where + "malformed sequence: " + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(where + e.what());
  }
  return seq;
}

json norm_to_json(const NormStats& n) { return {{"mean", n.mean}, {"std", n.std}}; }

NormStats norm_from_json(const json& j) {
  NormStats n{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
  if (n.mean.size() != kPoseDim || n.std.size() != kPoseDim) {
    throw FormatError("normalization statistics must have " + std::to_string(kPoseDim) +
                      " entries");
  }
  return n;
}

void save_dataset(const DatasetSplit& split, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset " + path.string());
  json header = {{"format", "motionpred-dataset"}, {"version", kDatasetVersion}};
  if (!split.norm.empty()) header["normalization"] = norm_to_json(split.norm);
  out << header.dump() << '\n';
  for (const auto* part : {&split.train, &split.test})
    for (const auto& seq : *part) out << sequence_to_json(seq).dump() << '\n';
  if (!out) throw Error("failed writing dataset " + path.string());
}

DatasetSplit load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read dataset " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.empty()) {
    throw FormatError(path.string() + ": empty dataset file");
  }
  DatasetSplit split;
  try {
    const json header = json::parse(line);
    if (header.value("format", std::string()) != "motionpred-dataset") {
      throw FormatError(path.string() + ":1: not a motionpred dataset header");
    }
    const int version = header.at("version").get<int>();
    if (version != kDatasetVersion) {
      throw FormatError(path.string() + ":1: dataset version " + std::to_string(version) +
                        ", expected " + std::to_string(kDatasetVersion));
    }
    if (header.contains("normalization")) split.norm = norm_from_json(header["normalization"]);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ":1: " + e.what());
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(where + "truncated or malformed line: " + e.what());
    }
    auto seq = sequence_from_json(j, where);
    (seq.split == "test" ? split.test : split.train).push_back(std::move(seq));
  }
  return split;
}

}  // namespace motionpred
