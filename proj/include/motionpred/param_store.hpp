#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "motionpred/rng.hpp"
#include "motionpred/tensor.hpp"

namespace motionpred {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named learnable parameters with Adam moments.
///
/// Parameters keep their registration order; checkpoints are written in
/// that order. A store has a single writer: training code owns it for the
/// duration of a step.
class ParamStore {
 public:
  /// Registers a parameter; names must be unique.
  Tensor add(const std::string& name, NdValue init);
  /// Registers a parameter drawn from N(0, stddev^2).
  Tensor add_normal(const std::string& name, Shape shape, double stddev, Rng& rng);
  Tensor add_constant(const std::string& name, Shape shape, double value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor get(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& names() const { return order_; }
  std::size_t parameter_count() const;
  std::uint64_t step_count() const { return steps_; }

  /// One Adam update with bias correction, then clears gradients.
  /// Throws if any registered parameter lacks a gradient.
  void adam_step(double lr, const AdamConfig& cfg = {});
  void zero_grad();
  /// Toggles gradient recording for every parameter (used to freeze a model).
  void set_trainable(bool on);

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t fingerprint() const;

  void save(const std::filesystem::path& path) const;
  /// Loads values into already-registered parameters of matching shape.
  void load(const std::filesystem::path& path);

  const std::vector<double>& first_moment(const std::string& name) const;
  const std::vector<double>& second_moment(const std::string& name) const;

 private:
  struct Entry {
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };
  const Entry& entry(const std::string& name) const;

  std::vector<std::string> order_;
  std::map<std::string, std::size_t> index_;
  std::vector<Entry> entries_;
  std::uint64_t steps_ = 0;
};

/// Raw checkpoint record, as stored on disk.
struct CheckpointEntry {
  std::string name;
  NdValue value;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes the "MFPK" container: magic, u32 version, then for each entry a
/// u32 name length, name bytes, u32 rank, u64 dims and little-endian f64 data.
void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

}  // namespace motionpred
