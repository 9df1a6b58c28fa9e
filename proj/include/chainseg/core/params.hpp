#pragma once

#include <map>
#include <string>
#include <vector>

#include "chainseg/core/autodiff.hpp"
#include "chainseg/core/rng.hpp"
#include "chainseg/core/tensor.hpp"

namespace chainseg {

enum class Init { kZeros, kOnes, kHeNormal };

// Registry of trainable leaves. Creation order is stable and recorded, which
// fixes both the optimizer update order and the checkpoint layout.
template <typename T>
class ParamStore {
 public:
  Var<T> create(const std::string& name, std::vector<int64_t> shape, Init init,
                Rng& rng, int64_t fan_in = 0) {
    CS_CHECK(!by_name_.count(name), "parameter '" << name << "' already exists");
    Tensor<T> t(shape);
    switch (init) {
      case Init::kZeros:
        break;
      case Init::kOnes:
        t.fill(T(1));
        break;
      case Init::kHeNormal: {
        CS_CHECK(fan_in > 0, "parameter '" << name << "': he init needs fan_in > 0");
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
        break;
      }
    }
    auto v = make_var(std::move(t), true, name);
    by_name_[name] = v;
    ordered_.push_back(name);
    return v;
  }

  Var<T> get(const std::string& name) const {
    auto it = by_name_.find(name);
    CS_CHECK(it != by_name_.end(), "unknown parameter '" << name << "'");
    return it->second;
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }

  const std::vector<std::string>& names() const { return ordered_; }

  size_t size() const { return ordered_.size(); }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& name : ordered_) n += by_name_.at(name)->value.numel();
    return n;
  }

  void zero_grad() {
    for (const auto& name : ordered_) by_name_.at(name)->drop_grad();
  }

 private:
  std::map<std::string, Var<T>> by_name_;
  std::vector<std::string> ordered_;
};

}  // namespace chainseg
