#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gridhaze/common.hpp"

namespace gridhaze {

// Dense 4-D (batch, channel, height, width) shape, row-major.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated iff tracked
  bool tracked = false;
  bool leaf = true;  // false for op outputs; their grads are consumed by backward
};

// Value-semantics handle over shared storage. T is float for training and
// double for gradient checking.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(const Shape& s, bool tracked = false) {
    return filled(s, T(0), tracked);
  }

  static Tensor filled(const Shape& s, T v, bool tracked = false) {
    check_shape(s);
    auto st = std::make_shared<Storage<T>>();
    st->shape = s;
    st->data.assign(static_cast<std::size_t>(s.numel()), v);
    if (tracked) {
      st->tracked = true;
      st->grad.assign(st->data.size(), T(0));
    }
    return Tensor(std::move(st));
  }

  static Tensor from_data(const Shape& s, std::vector<T> values, bool tracked = false) {
    check_shape(s);
    require(static_cast<std::int64_t>(values.size()) == s.numel(),
            "Tensor: data length " + std::to_string(values.size()) +
                " does not match shape " + s.str());
    auto st = std::make_shared<Storage<T>>();
    st->shape = s;
    st->data = std::move(values);
    if (tracked) {
      st->tracked = true;
      st->grad.assign(st->data.size(), T(0));
    }
    return Tensor(std::move(st));
  }

  static Tensor scalar(T v, bool tracked = false) { return filled({1, 1, 1, 1}, v, tracked); }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  std::int64_t size() const { return st_->shape.numel(); }

  std::span<T> data() { return st_->data; }
  std::span<const T> data() const { return st_->data; }

  bool tracked() const { return st_ && st_->tracked; }

  std::span<T> grad() {
    require(tracked(), "Tensor::grad: tensor is not tracked");
    return st_->grad;
  }
  std::span<const T> grad() const {
    require(tracked(), "Tensor::grad: tensor is not tracked");
    return st_->grad;
  }

  void set_tracked(bool t) {
    if (t && !st_->tracked) {
      st_->tracked = true;
      st_->grad.assign(st_->data.size(), T(0));
    } else if (!t && st_->tracked) {
      st_->tracked = false;
      st_->grad.clear();
      st_->grad.shrink_to_fit();
    }
  }

  void zero_grad() {
    if (tracked()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
  }

  T item() const {
    require(defined() && size() == 1,
            "Tensor::item: requires a scalar tensor");
    return st_->data[0];
  }

  std::int64_t offset(int n, int c, int h, int w) const {
    const Shape& s = st_->shape;
    return ((static_cast<std::int64_t>(n) * s.c + c) * s.h + h) * s.w + w;
  }

  T& at(int n, int c, int h, int w) { return st_->data[offset(n, c, h, w)]; }
  T at(int n, int c, int h, int w) const { return st_->data[offset(n, c, h, w)]; }

  bool all_finite() const {
    for (T v : st_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Deep copy of the values; the copy is untracked.
  Tensor clone() const {
    return from_data(st_->shape, st_->data);
  }

  const std::shared_ptr<Storage<T>>& st() const { return st_; }

 private:
  explicit Tensor(std::shared_ptr<Storage<T>> st) : st_(std::move(st)) {}

  static void check_shape(const Shape& s) {
    require(s.n >= 0 && s.c >= 0 && s.h >= 0 && s.w >= 0,
            "Tensor: negative dimension in shape " + s.str());
  }

  std::shared_ptr<Storage<T>> st_;
};

}  // namespace gridhaze
