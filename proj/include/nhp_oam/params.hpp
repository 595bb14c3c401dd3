#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "matrix.hpp"
#include "rng.hpp"

namespace nhp {

struct Param {
  std::string name;
  std::string group;
  Matrix value;
};

/// Ordered, named collection of trainable tensors. Order is insertion order
/// and is part of the checkpoint format.
class ParamStore {
 public:
  int add(std::string name, std::string group, Matrix value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    const int id = static_cast<int>(params_.size());
    index_[name] = id;
    params_.push_back({std::move(name), std::move(group), std::move(value)});
    return id;
  }

  int id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Param& operator[](int id) { return params_[static_cast<std::size_t>(id)]; }
  const Param& operator[](int id) const { return params_[static_cast<std::size_t>(id)]; }
  Matrix& value(int id) { return params_[static_cast<std::size_t>(id)].value; }
  const Matrix& value(int id) const { return params_[static_cast<std::size_t>(id)].value; }

  std::size_t size() const { return params_.size(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::vector<std::string> groups() const {
    std::vector<std::string> out;
    for (const auto& p : params_)
      if (std::find(out.begin(), out.end(), p.group) == out.end()) out.push_back(p.group);
    return out;
  }

  bool all_finite() const {
    for (const auto& p : params_)
      if (!p.value.all_finite()) return false;
    return true;
  }

  double norm() const {
    double s = 0.0;
    for (const auto& p : params_) s += p.value.squared_norm();
    return std::sqrt(s);
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) return false;
    }
    return true;
  }

 private:
  std::vector<Param> params_;
  std::map<std::string, int> index_;
};

/// Gradient buffers shaped like a ParamStore.
class GradStore {
 public:
  GradStore() = default;
  explicit GradStore(const ParamStore& params) {
    grads_.reserve(params.size());
    for (const auto& p : params) grads_.emplace_back(p.value.rows(), p.value.cols());
  }

  Matrix& operator[](int id) { return grads_[static_cast<std::size_t>(id)]; }
  const Matrix& operator[](int id) const { return grads_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return grads_.size(); }

  void zero() {
    for (auto& g : grads_) g.zero();
  }
  void scale(double s) {
    for (auto& g : grads_)
      for (double& v : g.flat()) v *= s;
  }
  GradStore& operator+=(const GradStore& o) {
    for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += o.grads_[i];
    return *this;
  }
  double norm() const {
    double s = 0.0;
    for (const auto& g : grads_) s += g.squared_norm();
    return std::sqrt(s);
  }
  bool all_finite() const {
    for (const auto& g : grads_)
      if (!g.all_finite()) return false;
    return true;
  }

 private:
  std::vector<Matrix> grads_;
};

/// Adam with bias correction.
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam() = default;
  Adam(const ParamStore& params, Options opts) : opts_(opts), m_(params), v_(params) {}

  void step(ParamStore& params, const GradStore& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const int id = static_cast<int>(i);
      auto w = params.value(id).flat();
      auto g = grads[id].flat();
      auto m = m_[id].flat();
      auto v = v_[id].flat();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * g[k];
        v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * g[k] * g[k];
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        w[k] -= opts_.learning_rate * mhat / (std::sqrt(vhat) + opts_.epsilon);
      }
    }
  }

  long steps() const { return t_; }
  const GradStore& first_moment() const { return m_; }
  const GradStore& second_moment() const { return v_; }
  GradStore& first_moment() { return m_; }
  GradStore& second_moment() { return v_; }
  void set_steps(long t) { t_ = t; }

 private:
  Options opts_;
  GradStore m_;
  GradStore v_;
  long t_ = 0;
};

/// Scales gradients so their global L2 norm is at most max_norm. Returns the
/// pre-clipping norm.
inline double clip_global_norm(GradStore& grads, double max_norm) {
  const double n = grads.norm();
  if (max_norm > 0.0 && n > max_norm) grads.scale(max_norm / n);
  return n;
}

inline Matrix uniform_init(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = rng.uniform(-bound, bound);
  return m;
}

}  // namespace nhp
