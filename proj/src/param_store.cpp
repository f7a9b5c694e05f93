#include "motionpred/param_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "motionpred/error.hpp"

namespace motionpred {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

Tensor ParamStore::add(const std::string& name, NdValue init) {
  if (index_.count(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  const std::size_t n = init.numel();
  Tensor t = Tensor::leaf(std::move(init), true);
  index_[name] = entries_.size();
  order_.push_back(name);
  entries_.push_back(Entry{t, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  return t;
}

Tensor ParamStore::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  NdValue v(std::move(shape));
  for (auto& x : v.data) x = stddev * rng.normal();
  return add(name, std::move(v));
}

Tensor ParamStore::add_constant(const std::string& name, Shape shape, double value) {
  NdValue v(std::move(shape));
  std::fill(v.data.begin(), v.data.end(), value);
  return add(name, std::move(v));
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return entries_[it->second];
}

Tensor ParamStore::get(const std::string& name) const { return entry(name).param; }

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.param.numel();
  return n;
}

void ParamStore::adam_step(double lr, const AdamConfig& cfg) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!entries_[i].param.grad()) {
      throw ValidationError("adam_step: parameter '" + order_[i] + "' has no gradient");
    }
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& e : entries_) {
    auto w = e.param.mutable_data();
    const auto& g = *e.param.grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      e.m[k] = cfg.beta1 * e.m[k] + (1.0 - cfg.beta1) * g[k];
      e.v[k] = cfg.beta2 * e.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = e.m[k] / bc1;
      const double vhat = e.v[k] / bc2;
      w[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    e.param.clear_grad();
  }
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.param.clear_grad();
}

void ParamStore::set_trainable(bool on) {
  for (auto& e : entries_) e.param.set_requires_grad(on);
}

std::uint64_t ParamStore::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    mix(order_[i].data(), order_[i].size());
    const auto& v = entries_[i].param.value();
    for (auto d : v.shape) mix(&d, sizeof d);
    mix(v.data.data(), v.data.size() * sizeof(double));
  }
  return h;
}

void ParamStore::save(const std::filesystem::path& path) const {
  std::vector<CheckpointEntry> out;
  out.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& v = entries_[i].param.value();
    out.push_back({order_[i], NdValue(v.shape, v.data)});
  }
  write_checkpoint(path, out);
}

void ParamStore::load(const std::filesystem::path& path) {
  auto records = read_checkpoint(path);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto it = by_name.find(order_[i]);
    if (it == by_name.end()) {
      throw FormatError(path.string() + ": missing parameter '" + order_[i] + "'");
    }
    auto& dst = entries_[i].param.value();
    if (it->second->value.shape != dst.shape) {
      throw FormatError(path.string() + ": parameter '" + order_[i] + "' has shape " +
                        shape_str(it->second->value.shape) + ", expected " +
                        shape_str(dst.shape));
    }
    dst.data = it->second->value.data;
  }
  if (records.size() != entries_.size()) {
    throw FormatError(path.string() + ": " + std::to_string(records.size()) +
                      " parameters in file, model has " + std::to_string(entries_.size()));
  }
}

const std::vector<double>& ParamStore::first_moment(const std::string& name) const {
  return entry(name).m;
}
const std::vector<double>& ParamStore::second_moment(const std::string& name) const {
  return entry(name).v;
}

namespace {

constexpr char kMagic[4] = {'M', 'F', 'P', 'K'};

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T take(std::ifstream& is, const std::string& where) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw FormatError("truncated checkpoint at " + where);
  }
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  for (const auto& e : entries) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.shape.size()));
    for (auto d : e.value.shape) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(e.value.data.data()),
             static_cast<std::streamsize>(e.value.data.size() * sizeof(double)));
  }
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(path.string() + ": not an MFPK checkpoint");
  }
  const auto version = take<std::uint32_t>(is, "header");
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " +
                      std::to_string(version));
  }
  std::vector<CheckpointEntry> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    const std::string where = "record " + std::to_string(out.size());
    const auto len = take<std::uint32_t>(is, where);
    if (len > (1u << 20)) throw FormatError("implausible name length at " + where);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated checkpoint at " + where);
    const auto rank = take<std::uint32_t>(is, where);
    if (rank > 8) throw FormatError("implausible rank at " + where);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(is, where);
    NdValue v(shape);
    if (!is.read(reinterpret_cast<char*>(v.data.data()),
                 static_cast<std::streamsize>(v.data.size() * sizeof(double)))) {
      throw FormatError("truncated checkpoint at " + where + " ('" + name + "')");
    }
    out.push_back({std::move(name), std::move(v)});
  }
  return out;
}

}  // namespace motionpred
