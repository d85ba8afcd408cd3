#pragma once

#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <new>
#include <string>
#include <vector>

#include "pseudoseg/errors.hpp"

namespace pseudoseg {

// 64-byte-aligned allocator. Uniform buffer alignment keeps vectorized
// kernels on the same code path for every allocation, which makes results
// independent of heap addresses (bit-reproducible training).
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    void* p = ::operator new(n * sizeof(T), std::align_val_t(kAlign));
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t n) {
    if (p) ::operator delete(p, n * sizeof(T), std::align_val_t(kAlign));
  }
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

using AlignedDoubles = std::vector<double, AlignedAllocator<double>>;

// Dense row-major double tensor. Spatial maps use shape {H, W, C} so that the
// channel vector of a pixel is contiguous; matrices use {rows, cols}. Ops that
// treat a tensor as a matrix view it as (size/last_dim) x last_dim.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, double fill) : Tensor(std::move(shape)) {
    for (auto& v : data_) v = fill;
  }
  Tensor(std::vector<int> shape, std::initializer_list<double> data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_contract(static_cast<std::int64_t>(data_.size()) == count(shape_),
                   "Tensor: data size does not match shape");
  }
  Tensor(std::vector<int> shape, const std::vector<double>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_contract(static_cast<std::int64_t>(data_.size()) == count(shape_),
                   "Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool empty() const { return data_.empty(); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int last_dim() const { return shape_.empty() ? 1 : shape_.back(); }
  // Matrix view: number of rows when the last dimension is the column count.
  std::int64_t rows() const { return last_dim() == 0 ? 0 : size() / last_dim(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at(int i, int j) { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
  double at(int i, int j) const { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
  double& at(int i, int j, int k) {
    return data_[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  double at(int i, int j, int k) const {
    return data_[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { for (auto& x : data_) x = v; }
  void zero() { fill(0.0); }

  Tensor reshaped(std::vector<int> shape) const {
    check_contract(count(shape) == size(), "Tensor::reshaped: element count mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      check_contract(d >= 0, "Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  AlignedDoubles data_;
};

}  // namespace pseudoseg
