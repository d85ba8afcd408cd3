#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pseudoseg/autodiff.hpp"
#include "pseudoseg/rng.hpp"
#include "pseudoseg/tensor.hpp"

namespace pseudoseg::net {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor momentum;
};

// Owns named parameter tensors plus their gradient/momentum buffers. The
// trainer is the single writer; forward passes read values concurrently.
class ParamStore {
 public:
  int add(std::string name, Tensor init) {
    Param p;
    p.name = std::move(name);
    p.grad = Tensor(init.shape());
    p.momentum = Tensor(init.shape());
    p.value = std::move(init);
    params_.push_back(std::move(p));
    return static_cast<int>(params_.size()) - 1;
  }

  Param& at(int i) { return params_[static_cast<std::size_t>(i)]; }
  const Param& at(int i) const { return params_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return params_.size(); }
  std::int64_t num_scalars() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.zero();
  }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

 private:
  std::vector<Param> params_;
};

// Per-tape view of a ParamStore: hands out external leaves lazily and later
// folds the tape's gradients back into the store. accumulate_grads() must be
// called from one thread at a time; calling it per image in index order keeps
// the reduction order fixed and training bit-reproducible.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, ParamStore& store, bool requires_grad)
      : tape_(tape), store_(store), requires_grad_(requires_grad) {
    bound_.resize(store.size());
  }

  ad::Value operator[](int idx) {
    auto& slot = bound_[static_cast<std::size_t>(idx)];
    if (!slot.valid()) slot = tape_.external(&store_.at(idx).value, requires_grad_);
    return slot;
  }

  void accumulate_grads() {
    if (!requires_grad_) return;
    for (std::size_t i = 0; i < bound_.size(); ++i) {
      const auto& v = bound_[i];
      if (!v.valid() || !v.node()->grad_ready) continue;
      Tensor& g = store_.at(static_cast<int>(i)).grad;
      const Tensor& src = v.node()->grad;
      for (std::int64_t k = 0; k < g.size(); ++k) g[k] += src[k];
    }
  }

  double max_abs_grad() const {
    double mx = 0.0;
    for (const auto& v : bound_) {
      if (!v.valid() || !v.node()->grad_ready) continue;
      const Tensor& g = v.node()->grad;
      for (std::int64_t k = 0; k < g.size(); ++k) mx = std::max(mx, std::fabs(g[k]));
    }
    return mx;
  }

  bool requires_grad() const { return requires_grad_; }

 private:
  ad::Tape& tape_;
  ParamStore& store_;
  bool requires_grad_;
  std::vector<ad::Value> bound_;
};

// He-normal initialization for a fan_in x fan_out weight matrix.
inline Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace pseudoseg::net
