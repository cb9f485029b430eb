#pragma once

// Named parameter sets, their Adam state, per-point MLP layers and the
// checkpoint file format shared by the loss and reconstruction networks.
//
// Checkpoint layout (all integers little-endian):
//   magic    8 bytes  "LCDCKPT\0"
//   version  u32      currently 1
//   count    u32      number of tensors
//   per tensor, in insertion order:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank u32, dims u64 x rank
//     values f64 x product(dims), IEEE-754 binary64 little-endian

#include "lcd/autodiff.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace lcd {

using ad::GradMap;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor m;  // first moment
    Tensor v;  // second moment
    std::uint64_t step = 0;
  };

  void add(std::string name, Tensor value) {
    if (index_.contains(name)) throw std::invalid_argument("params: duplicate name " + name);
    index_.emplace(name, entries_.size());
    Entry e{name, value, Tensor(value.shape()), Tensor(value.shape()), 0};
    entries_.push_back(std::move(e));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t size() const { return entries_.size(); }

  const Tensor& at(const std::string& name) const { return entry(name).value; }
  Tensor& at(const std::string& name) { return entries_[find(name)].value; }
  const Entry& entry(const std::string& name) const { return entries_[find(name)]; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  // Copy values from `other`; names and shapes must match exactly. Shape
  // conflicts on shared names are reported before missing or extra names.
  void assign_values(const ParamSet& other) {
    for (const auto& e : entries_) {
      if (!other.contains(e.name)) continue;
      const Tensor& src = other.at(e.name);
      if (src.shape() != e.value.shape())
        throw std::invalid_argument("checkpoint: tensor '" + e.name + "' has shape " +
                                    ad::to_string(src.shape()) + ", expected " +
                                    ad::to_string(e.value.shape()));
    }
    for (const auto& e : other.entries_)
      if (!contains(e.name))
        throw std::invalid_argument("checkpoint: unexpected tensor '" + e.name + "'");
    for (const auto& e : entries_)
      if (!other.contains(e.name))
        throw std::invalid_argument("checkpoint: missing tensor '" + e.name + "'");
    for (auto& e : entries_) e.value = other.at(e.name);
  }

  bool values_equal(const ParamSet& other) const {
    if (size() != other.size()) return false;
    for (const auto& e : entries_)
      if (!other.contains(e.name) || !(other.at(e.name) == e.value)) return false;
    return true;
  }

 private:
  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("params: no tensor named " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Parameters placed on a tape, looked up by name.
class Bound {
 public:
  Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("bound params: no tensor named " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.contains(name); }
  void add(const std::string& name, Var v) { vars_.insert_or_assign(name, v); }

 private:
  friend Bound bind(Tape&, const ParamSet&, bool);
  std::unordered_map<std::string, Var> vars_;
};

// Trainable parameters become named variables; frozen ones become constants.
inline Bound bind(Tape& tape, const ParamSet& params, bool trainable) {
  Bound b;
  for (const auto& e : params.entries())
    b.vars_.emplace(e.name, trainable ? tape.variable(e.name, e.value) : tape.constant(e.value));
  return b;
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam step. `grads` must be keyed exactly like `params`.
inline void adam_update(ParamSet& params, const GradMap& grads, double lr,
                        const AdamOptions& opt = {}) {
  if (grads.size() != params.size())
    throw std::invalid_argument("adam: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " parameters");
  for (const auto& e : params.entries()) {
    auto it = grads.find(e.name);
    if (it == grads.end()) throw std::invalid_argument("adam: no gradient for " + e.name);
    if (it->second.shape() != e.value.shape())
      throw std::invalid_argument("adam: gradient shape mismatch for " + e.name);
  }
  for (auto& e : params.entries()) {
    const Tensor& g = grads.find(e.name)->second;
    ++e.step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(e.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(e.step));
    for (std::size_t i = 0; i < g.size(); ++i) {
      e.m[i] = opt.beta1 * e.m[i] + (1.0 - opt.beta1) * g[i];
      e.v[i] = opt.beta2 * e.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double mhat = e.m[i] / c1;
      const double vhat = e.v[i] / c2;
      e.value[i] -= lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

inline double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Per-point MLP: layer k maps [n, in] -> [n, out] with weight "<prefix>.k.weight"
// of shape [in, out] and bias "<prefix>.k.bias" of shape [1, out].

inline void add_mlp(ParamSet& params, const std::string& prefix, std::size_t in,
                    const std::vector<std::size_t>& widths, std::mt19937_64& rng,
                    bool zero_last = false) {
  std::size_t fan_in = in;
  for (std::size_t k = 0; k < widths.size(); ++k) {
    const std::size_t fan_out = widths[k];
    Tensor w({fan_in, fan_out});
    if (!(zero_last && k + 1 == widths.size())) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (auto& x : w.data()) x = dist(rng);
    }
    params.add(prefix + "." + std::to_string(k) + ".weight", std::move(w));
    params.add(prefix + "." + std::to_string(k) + ".bias", Tensor({1, fan_out}));
    fan_in = fan_out;
  }
}

inline Var dense(const Bound& p, const std::string& prefix, std::size_t layer, Var x) {
  const std::string base = prefix + "." + std::to_string(layer);
  return ad::matmul(x, p[base + ".weight"]) + p[base + ".bias"];
}

// relu after every layer except, when `linear_last`, the final one.
inline Var mlp(const Bound& p, const std::string& prefix, std::size_t layers, Var x,
               bool linear_last) {
  for (std::size_t k = 0; k < layers; ++k) {
    x = dense(p, prefix, k, x);
    if (!(linear_last && k + 1 == layers)) x = ad::relu(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::array<char, 8> kCheckpointMagic = {'L', 'C', 'D', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw std::runtime_error("checkpoint " + path + ": truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) detail::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(e.value.data().data()),
             static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

inline ParamSet load_checkpoint(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + p);
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic)
    throw std::runtime_error("checkpoint " + p + ": bad magic number (not an LCD checkpoint)");
  const auto version = detail::get<std::uint32_t>(is, p);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint " + p + ": unsupported version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is, p);
  ParamSet params;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = detail::get<std::uint32_t>(is, p);
    if (len > 4096) throw std::runtime_error("checkpoint " + p + ": corrupt tensor name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("checkpoint " + p + ": truncated file");
    const auto rank = detail::get<std::uint32_t>(is, p);
    if (rank > 2) throw std::runtime_error("checkpoint " + p + ": tensor '" + name + "' has rank > 2");
    Shape shape(rank);
    for (auto& d : shape) d = detail::get<std::uint64_t>(is, p);
    const std::size_t n = ad::numel(shape);
    if (n > (std::size_t{1} << 32))
      throw std::runtime_error("checkpoint " + p + ": tensor '" + name + "' is implausibly large");
    std::vector<double> data(n);
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double))))
      throw std::runtime_error("checkpoint " + p + ": truncated file");
    params.add(name, Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

}  // namespace lcd
