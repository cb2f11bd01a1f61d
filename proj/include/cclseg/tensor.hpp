#pragma once

#include <initializer_list>
#include <numeric>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cclseg/common.hpp"

namespace cclseg {

// Dense tensor with immutable shape and flat row-major storage. Rank is free
// but everything in this project is rank 1, 2 or 4 ([B,C,H,W]). Storage bytes
// are reported to MemTracker so the benchmark can measure, not estimate.
template <class S>
class Tensor {
 public:
  using Scalar = S;
  using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;
  using MatMap = Eigen::Map<
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatMap = Eigen::Map<
      const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using VecMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
  using ConstVecMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

  Tensor() = default;

  explicit Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
    Index n = 1;
    for (Index e : shape_) {
      CCLSEG_REQUIRE(e >= 0, "Tensor: negative extent");
      n *= e;
    }
    data_.setZero(n);
    track(n);
  }

  Tensor(const Tensor& o) : shape_(o.shape_), data_(o.data_) {
    track(data_.size());
  }
  Tensor(Tensor&& o) noexcept
      : shape_(std::move(o.shape_)), data_(std::move(o.data_)) {
    o.shape_.clear();
    // Eigen move leaves the source empty; the bytes follow this object.
  }
  Tensor& operator=(const Tensor& o) {
    if (this != &o) {
      untrack(data_.size());
      shape_ = o.shape_;
      data_ = o.data_;
      track(data_.size());
    }
    return *this;
  }
  Tensor& operator=(Tensor&& o) noexcept {
    if (this != &o) {
      untrack(data_.size());
      shape_ = std::move(o.shape_);
      data_ = std::move(o.data_);
      o.shape_.clear();
    }
    return *this;
  }
  ~Tensor() { untrack(data_.size()); }

  static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<Index> shape, S v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }
  static Tensor scalar(S v) { return full({1}, v); }
  static Tensor from(std::vector<Index> shape, std::initializer_list<S> vals) {
    Tensor t(std::move(shape));
    CCLSEG_REQUIRE(static_cast<Index>(vals.size()) == t.numel(),
                   "Tensor::from: value count does not match shape");
    Index i = 0;
    for (S v : vals) t.data_[i++] = v;
    return t;
  }
  static Tensor randn(std::vector<Index> shape, Rng& rng, S stddev = S(1)) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.numel(); ++i)
      t.data_[i] = static_cast<S>(rng.normal()) * stddev;
    return t;
  }
  static Tensor rand_uniform(std::vector<Index> shape, Rng& rng, S lo, S hi) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.numel(); ++i)
      t.data_[i] = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size(Index d) const { return shape_[static_cast<size_t>(d)]; }
  Index numel() const { return data_.size(); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  S& operator[](Index i) { return data_[i]; }
  S operator[](Index i) const { return data_[i]; }

  S& at2(Index i, Index j) { return data_[i * size(1) + j]; }
  S at2(Index i, Index j) const { return data_[i * size(1) + j]; }
  S& at4(Index b, Index c, Index h, Index w) {
    return data_[((b * size(1) + c) * size(2) + h) * size(3) + w];
  }
  S at4(Index b, Index c, Index h, Index w) const {
    return data_[((b * size(1) + c) * size(2) + h) * size(3) + w];
  }

  // Matrix view [rows, cols]; total must equal numel.
  MatMap mat(Index rows, Index cols) {
    CCLSEG_REQUIRE(rows * cols == numel(), "Tensor::mat: size mismatch");
    return MatMap(data_.data(), rows, cols);
  }
  ConstMatMap mat(Index rows, Index cols) const {
    CCLSEG_REQUIRE(rows * cols == numel(), "Tensor::mat: size mismatch");
    return ConstMatMap(data_.data(), rows, cols);
  }
  MatMap mat2() { return mat(size(0), size(1)); }
  ConstMatMap mat2() const { return mat(size(0), size(1)); }

  VecMap vec() { return VecMap(data_.data(), data_.size()); }
  ConstVecMap vec() const { return ConstVecMap(data_.data(), data_.size()); }

  // Same storage contents under a new shape (copy; shapes stay immutable).
  Tensor reshaped(std::vector<Index> shape) const {
    Tensor t(std::move(shape));
    CCLSEG_REQUIRE(t.numel() == numel(), "Tensor::reshaped: size mismatch");
    t.data_ = data_;
    return t;
  }

  bool all_finite() const {
    for (Index i = 0; i < numel(); ++i)
      if (!std::isfinite(static_cast<double>(data_[i]))) return false;
    return true;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> t(shape_);
    for (Index i = 0; i < numel(); ++i) t[i] = static_cast<T>(data_[i]);
    return t;
  }

 private:
  static void track(Index n) {
    MemTracker::instance().add(static_cast<long long>(n) * sizeof(S));
  }
  static void untrack(Index n) {
    MemTracker::instance().sub(static_cast<long long>(n) * sizeof(S));
  }

  std::vector<Index> shape_;
  Storage data_;
};

template <class S>
inline std::string shape_str(const Tensor<S>& t) {
  std::string s = "[";
  for (size_t i = 0; i < t.shape().size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape()[i]);
  }
  return s + "]";
}

}  // namespace cclseg
