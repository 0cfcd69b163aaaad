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

#include "bimamba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace bimamba {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw TensorError("tensor shape " + shape_str(shape_) + " does not match " +
                      std::to_string(data_.size()) + " values");
  }
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw TensorError("axis " + std::to_string(axis) + " out of range for " +
                      shape_str(shape_));
  }
  return shape_[axis];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on && grad_.size() != data_.size()) grad_.assign(data_.size(), T{0});
  if (!on) grad_.clear();
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(grad_.begin(), grad_.end(), T{0});
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
void Tensor<T>::check_finite(std::string_view what) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      std::ostringstream os;
      os << what << ": non-finite value " << data_[i] << " at flat index " << i
         << " of " << shape_str(shape_);
      throw TensorError(os.str());
    }
  }
}

template <typename T>
Var<T> Tape<T>::param(Tensor<T>& param) {
  Node node;
  node.value = Tensor<T>(param.shape(),
                         std::vector<T>(param.data().begin(), param.data().end()));
  node.needs_grad = recording() && param.requires_grad();
  if (node.needs_grad) node.param = &param;
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       Backward backward) {
  Node node;
  node.value = std::move(value);
  if (recording()) {
    for (const Var<T>& in : inputs) {
      if (in.tape != this) throw TensorError("input belongs to another tape");
      if (nodes_[in.id].needs_grad) node.needs_grad = true;
    }
    if (node.needs_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
std::span<T> Tape<T>::grad_of(Var<T> v) {
  Node& node = nodes_[v.id];
  if (node.grad.size() != node.value.size()) {
    node.grad.assign(node.value.size(), T{0});
  }
  return node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (!recording()) {
    throw TensorError("backward called on a tape recorded in evaluation mode");
  }
  if (consumed_) throw TensorError("backward already ran on this tape");
  if (root.tape != this) throw TensorError("root belongs to another tape");
  if (nodes_[root.id].value.size() != 1) {
    throw TensorError("backward root must be a scalar, got " +
                      shape_str(nodes_[root.id].value.shape()));
  }
  consumed_ = true;
  if (!nodes_[root.id].needs_grad) return;
  grad_of(root)[0] = T{1};
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.grad.empty()) continue;
    if (node.param != nullptr) {
      std::span<T> dst = node.param->grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += node.grad[i];
    } else if (node.backward) {
      node.backward(node.grad);
    }
    // Release intermediate gradients as soon as they have been propagated.
    std::vector<T>().swap(node.grad);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace bimamba
