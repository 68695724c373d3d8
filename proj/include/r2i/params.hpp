#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>

#include "r2i/tape.hpp"
#include "r2i/tensor.hpp"

namespace r2i {

/// Named trainable weights, ordered by name.
template <class T>
class ParamSet {
 public:
  using Map = std::map<std::string, BasicTensor<T>>;

  void add(const std::string& name, BasicTensor<T> value) {
    if (!tensors_.emplace(name, std::move(value)).second) throw std::invalid_argument("duplicate parameter " + name);
  }
  const BasicTensor<T>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  BasicTensor<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  std::size_t size() const noexcept { return tensors_.size(); }
  bool empty() const noexcept { return tensors_.empty(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [k, v] : tensors_) out.add(k, v.template cast<U>());
    return out;
  }

  /// Entries whose name starts with `prefix`, prefix kept.
  ParamSet with_prefix(const std::string& prefix) const {
    ParamSet out;
    for (const auto& [k, v] : tensors_)
      if (k.rfind(prefix, 0) == 0) out.add(k, v);
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) return false;
    for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib)
      if (ia->first != ib->first || !bitwise_equal(ia->second, ib->second)) return false;
    return true;
  }

 private:
  Map tensors_;
};

/// Parameters bound as leaves on one tape.
template <class T>
class Bound {
 public:
  Bound(Tape<T>& tape, const ParamSet<T>& params, bool trainable) : tape_(&tape) {
    for (const auto& [name, value] : params) vars_.emplace(name, tape.leaf(value, name, trainable));
  }

  Var<T> operator()(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("unbound parameter " + name);
    return it->second;
  }
  Tape<T>& tape() const { return *tape_; }

 private:
  Tape<T>* tape_;
  std::map<std::string, Var<T>> vars_;
};

/// Uniform(-bound, bound) with bound = gain * sqrt(3 / fan_in).
template <class T>
BasicTensor<T> init_uniform(Shape shape, std::int64_t fan_in, std::mt19937_64& rng, double gain = 1.0) {
  BasicTensor<T> t(std::move(shape));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// Checkpoint container: "R2I1", u32 count, then per tensor u16 name length, UTF-8 name,
// u8 rank, rank x u64 dims, raw little-endian f32 data.
namespace detail {

template <class V>
void write_le(std::ostream& os, V v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V read_le(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw std::runtime_error("checkpoint truncated");
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ParamSet<float>& params) {
  os.write("R2I1", 4);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    if (name.size() > 0xffff) throw std::invalid_argument("parameter name too long: " + name);
    if (t.rank() > 0xff) throw std::invalid_argument("tensor rank too large: " + name);
    detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("checkpoint write failed");
}

inline ParamSet<float> read_checkpoint(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "R2I1") throw std::runtime_error("not an R2I1 checkpoint");
  const auto count = detail::read_le<std::uint32_t>(is);
  ParamSet<float> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::read_le<std::uint16_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = detail::read_le<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(detail::read_le<std::uint64_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint truncated in tensor " + name);
    out.add(name, std::move(t));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const ParamSet<float>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(os, params);
}

inline ParamSet<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace r2i
