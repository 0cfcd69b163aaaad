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

// Central finite-difference oracle for tape gradients (64-bit only).

#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "bimamba/tensor.hpp"

namespace bimamba {

// Builds a scalar loss on the given tape from whatever parameters it closes
// over.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

// Compares the tape gradient of `loss` w.r.t. `param` against central
// differences with step `eps`. The relative error per coordinate is
// |analytic - numeric| / max(1, |analytic|). `param` must require grad; its
// grad buffer is overwritten. When `max_coords` is nonzero only that many
// evenly spaced coordinates are probed.
GradCheckResult check_param_gradient(const LossBuilder& loss,
                                     Tensor<double>& param, double eps,
                                     std::size_t max_coords = 0);

// f maps a leaf bound to theta to a scalar. Returns the max relative error.
double grad_check(
    const std::function<Var<double>(Tape<double>&, Var<double>)>& f,
    const Tensor<double>& theta, double eps);

}  // namespace bimamba
