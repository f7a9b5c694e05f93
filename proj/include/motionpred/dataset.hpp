#pragma once

// Line-delimited JSON datasets. The first line is a header carrying the
// format version and the normalization statistics; every following line is
// one sequence.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "motionpred/synth.hpp"

namespace motionpred {

inline constexpr int kDatasetVersion = 1;

nlohmann::json sequence_to_json(const MotionSequence& seq);
/// `where` prefixes error messages (file and line).
MotionSequence sequence_from_json(const nlohmann::json& j, const std::string& where = "");

nlohmann::json norm_to_json(const NormStats& n);
NormStats norm_from_json(const nlohmann::json& j);

void save_dataset(const DatasetSplit& split, const std::filesystem::path& path);
DatasetSplit load_dataset(const std::filesystem::path& path);

}  // namespace motionpred
