#pragma once
// Adam shared by the MFA and DMFA trainers.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dmfa/error.hpp"
#include "dmfa/tensorio.hpp"

namespace dmfa {

struct AdamConfig {
  double lr = 4e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void to_json(json& j, const AdamConfig& c) {
  j = {{"optimizer", "adam"}, {"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

/// A parameter block: value and gradient buffers of equal length, owned
/// elsewhere.
template <typename T>
struct ParamRef {
  std::string name;
  std::span<T> value;
  std::span<T> grad;
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  std::int64_t steps() const { return step_; }

  /// One update of every block; moment buffers are created on first use and
  /// must keep the same block layout afterwards.
  void step(const std::vector<ParamRef<T>>& params) {
    if (first_.empty()) {
      for (const auto& p : params) {
        first_.emplace_back(p.value.size(), T(0));
        second_.emplace_back(p.value.size(), T(0));
      }
    }
    if (first_.size() != params.size()) throw ShapeError("Adam: parameter layout changed");
    ++step_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    const T lr = static_cast<T>(config_.lr * std::sqrt(c2) / c1);
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T eps = static_cast<T>(config_.eps * std::sqrt(c2));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& m = first_[k];
      auto& v = second_[k];
      const auto& p = params[k];
      if (m.size() != p.value.size()) throw ShapeError("Adam: parameter block '" + p.name + "' changed size");
      for (std::size_t i = 0; i < m.size(); ++i) {
        const T g = p.grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        p.value[i] -= lr * m[i] / (std::sqrt(v[i]) + eps);
      }
    }
  }

  /// Appends the moment buffers (roles "adam_m"/"adam_v") and the step count.
  void save(Container& c, const std::vector<ParamRef<T>>& params) const {
    c.meta["adam"] = config_;
    c.meta["adam"]["step"] = step_;
    if (first_.empty()) return;
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto n = static_cast<std::int64_t>(first_[k].size());
      c.add("adam_m/" + params[k].name, "adam_m", {n}, {first_[k].begin(), first_[k].end()});
      c.add("adam_v/" + params[k].name, "adam_v", {n}, {second_[k].begin(), second_[k].end()});
    }
  }

  void load(const Container& c, const std::vector<ParamRef<T>>& params) {
    const auto& a = c.meta.at("adam");
    config_.lr = a.at("lr").get<double>();
    config_.beta1 = a.at("beta1").get<double>();
    config_.beta2 = a.at("beta2").get<double>();
    config_.eps = a.at("eps").get<double>();
    step_ = a.at("step").get<std::int64_t>();
    first_.clear();
    second_.clear();
    if (step_ == 0) return;
    for (const auto& p : params) {
      const auto& m = c.at("adam_m/" + p.name);
      const auto& v = c.at("adam_v/" + p.name);
      if (m.data.size() != p.value.size() || v.data.size() != p.value.size()) {
        throw FormatError("Adam state for '" + p.name + "' has the wrong size");
      }
      first_.emplace_back(m.data.begin(), m.data.end());
      second_.emplace_back(v.data.begin(), v.data.end());
    }
  }

  void set_lr(double lr) { config_.lr = lr; }

 private:
  AdamConfig config_;
  std::int64_t step_ = 0;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
};

template <typename T>
T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

template <typename T>
T softplus_inverse(T y) {
  return y > T(20) ? y : std::log(std::expm1(y));
}

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

/// Lower bound added to every softplus-parameterized noise variance.
inline constexpr double kNoiseFloor = 1e-6;

}  // namespace dmfa
