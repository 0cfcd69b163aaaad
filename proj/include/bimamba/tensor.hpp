// Copyright 2026 The bimamba Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major tensors and a reverse-mode tape.
//
// Every model type in the library is templated on the scalar: `float` is the
// training/inference precision, `double` is the gradient-check precision.
// Both are explicitly instantiated in src/tensor.cpp and src/ops.cpp.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bimamba {

using Shape = std::vector<std::size_t>;

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  // Rank-2 accessors.
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !grad_.empty(); }
  std::span<T> grad() { return grad_; }
  std::span<const T> grad() const { return grad_; }
  void zero_grad();

  void fill(T value);
  bool all_finite() const;
  // Throws TensorError naming `what` and the first bad index.
  void check_finite(std::string_view what) const;

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) {
      out[i] = static_cast<U>(data_[i]);
    }
    return out;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
  bool requires_grad_ = false;
};

enum class TapeMode { kTrain, kEval };

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

template <typename T>
class Tape {
 public:
  // Receives the gradient flowing into the node's output.
  using Backward = std::function<void(std::span<const T>)>;

  explicit Tape(TapeMode mode = TapeMode::kTrain) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  TapeMode mode() const { return mode_; }
  bool recording() const { return mode_ == TapeMode::kTrain; }
  std::size_t size() const { return nodes_.size(); }

  // Leaf bound to a parameter; on backward the gradient is accumulated into
  // `param.grad()` when the parameter requires grad. The tensor is copied
  // onto the tape, so later mutation of `param` does not affect this graph.
  Var<T> param(Tensor<T>& param);
  Var<T> constant(Tensor<T> value);

  // Appends an operation result. The backward rule is kept only in training
  // mode and only when at least one input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                Backward backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }
  // Gradient accumulator of a node; allocated on first use.
  std::span<T> grad_of(Var<T> v);

  // Reverse replay from a scalar root. Each recorded node is visited once.
  void backward(Var<T> root);

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    Backward backward;
    Tensor<T>* param = nullptr;
    bool needs_grad = false;
  };

  TapeMode mode_;
  bool consumed_ = false;
  // deque: references to node values stay valid as the tape grows.
  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace bimamba
