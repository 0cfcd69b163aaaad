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

#include "bimamba/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace bimamba {
namespace {

double eval_loss(const LossBuilder& loss) {
  Tape<double> tape(TapeMode::kEval);
  Var<double> out = loss(tape);
  if (out.size() != 1) {
    throw TensorError("gradient check needs a scalar function, got " +
                      shape_str(out.shape()));
  }
  return out.value()[0];
}

}  // namespace

GradCheckResult check_param_gradient(const LossBuilder& loss,
                                     Tensor<double>& param, double eps,
                                     std::size_t max_coords) {
  if (!param.requires_grad()) {
    throw TensorError("gradient check on a tensor that does not require grad");
  }
  param.zero_grad();
  {
    Tape<double> tape(TapeMode::kTrain);
    Var<double> out = loss(tape);
    if (out.size() != 1) {
      throw TensorError("gradient check needs a scalar function, got " +
                        shape_str(out.shape()));
    }
    tape.backward(out);
  }
  GradCheckResult result;
  const std::size_t n = param.size();
  const std::size_t probes = max_coords == 0 ? n : std::min(n, max_coords);
  for (std::size_t k = 0; k < probes; ++k) {
    const std::size_t i = probes == n ? k : k * n / probes;
    const double saved = param[i];
    param[i] = saved + eps;
    const double up = eval_loss(loss);
    param[i] = saved - eps;
    const double down = eval_loss(loss);
    param[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = param.grad()[i];
    result.analytic.push_back(analytic);
    result.numeric.push_back(numeric);
    const double rel =
        std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
    result.max_rel_error = std::max(result.max_rel_error, rel);
  }
  return result;
}

double grad_check(
    const std::function<Var<double>(Tape<double>&, Var<double>)>& f,
    const Tensor<double>& theta, double eps) {
  Tensor<double> param = theta;
  param.set_requires_grad(true);
  LossBuilder loss = [&](Tape<double>& tape) { return f(tape, tape.param(param)); };
  return check_param_gradient(loss, param, eps).max_rel_error;
}

}  // namespace bimamba
