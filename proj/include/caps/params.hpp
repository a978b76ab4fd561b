#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "caps/rng.hpp"
#include "caps/tensor.hpp"

namespace caps {

enum class InitRule { Zeros, UniformFanIn, Normal };

template <typename T>
struct ParamSpec {
  std::string name;
  int rows;
  int cols;
  InitRule rule = InitRule::UniformFanIn;
  double sigma = 0.0;  // for Normal
};

// All learned weights, keyed by dotted name. Shapes are fixed at creation;
// every entry carries a same-shape gradient buffer.
template <typename T>
class ParameterStoreT {
 public:
  struct Entry {
    Tensor<T> value;
    Tensor<T> grad;
  };

  void create(const std::string& name, int rows, int cols, InitRule rule, Rng& rng,
              double sigma = 0.0) {
    if (entries_.count(name))
      throw ValidationError("duplicate parameter name: " + name);
    Entry e;
    e.value = Tensor<T>(rows, cols);
    e.grad = Tensor<T>(rows, cols);
    switch (rule) {
      case InitRule::Zeros:
        break;
      case InitRule::UniformFanIn: {
        // fan_in = input dim = rows for a (in x out) weight matrix
        double bound = 1.0 / std::sqrt(static_cast<double>(rows));
        for (auto& v : e.value.data)
          v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case InitRule::Normal:
        for (auto& v : e.value.data) v = static_cast<T>(rng.normal() * sigma);
        break;
    }
    entries_.emplace(name, std::move(e));
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ValidationError("unknown parameter: " + name);
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ValidationError("unknown parameter: " + name);
    return it->second;
  }

  Tensor<T>& value(const std::string& name) { return entry(name).value; }
  const Tensor<T>& value(const std::string& name) const { return entry(name).value; }
  Tensor<T>& grad(const std::string& name) { return entry(name).grad; }

  void zero_grads() {
    for (auto& [_, e] : entries_) e.grad.data.assign(e.grad.data.size(), T(0));
  }

  // Sorted by name (std::map), so iteration order is deterministic.
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
  }

  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries_)
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
  }

  size_t total_size() const {
    size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
  }

  template <typename U>
  ParameterStoreT<U> cast() const {
    ParameterStoreT<U> out;
    for (const auto& [k, e] : entries_) {
      typename ParameterStoreT<U>::Entry ne;
      ne.value = e.value.template cast<U>();
      ne.grad = Tensor<U>(e.grad.rows, e.grad.cols);
      out.entries_.emplace(k, std::move(ne));
    }
    return out;
  }

  // Copy values (and reset grads) for all entries whose name starts with
  // prefix, from another store with identical shapes.
  void copy_prefix_from(const ParameterStoreT& src, const std::string& prefix) {
    for (const auto& name : src.names_with_prefix(prefix)) {
      entry(name).value = src.entry(name).value;
    }
  }

  bool operator==(const ParameterStoreT& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (const auto& [k, e] : entries_) {
      auto it = other.entries_.find(k);
      if (it == other.entries_.end()) return false;
      if (e.value.data != it->second.value.data) return false;
    }
    return true;
  }

  std::map<std::string, Entry> entries_;
};

using ParameterStore = ParameterStoreT<float>;

template <typename T>
ParameterStoreT<T> init_parameters(const std::vector<ParamSpec<T>>& specs, Rng rng) {
  ParameterStoreT<T> store;
  for (const auto& s : specs) {
    // Per-parameter substream keyed by name hash keeps init independent of
    // spec ordering.
    uint64_t h = 1469598103934665603ull;
    for (char c : s.name) h = (h ^ static_cast<uint8_t>(c)) * 1099511628211ull;
    Rng sub = rng.split(h);
    store.create(s.name, s.rows, s.cols, s.rule, sub, s.sigma);
  }
  return store;
}

}  // namespace caps
