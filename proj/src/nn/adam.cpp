// Copyright 2026 The fedcq Authors
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

#include "fedcq/nn/adam.hpp"

#include <cmath>

#include "fedcq/error.hpp"

namespace fedcq::nn {

Adam::Adam(ParamRefs params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (Param* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    t_.push_back(0);
  }
}

void Adam::step() {
  for (Param* p : params_) {
    if (p->trainable && !p->grad.allFinite()) {
      throw NumericError("non-finite gradient in parameter '" + p->name + "' at step " +
                         std::to_string(steps_));
    }
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) {
      throw ShapeError("gradient shape of '" + p->name + "' does not match its value");
    }
  }
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    if (!p.trainable) continue;
    ++t_[i];
    const double t = static_cast<double>(t_[i]);
    Matrix g = p.grad;
    if (config_.l2 != 0.0) g += config_.l2 * p.value;
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    p.value.array() -=
        config_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
  }
  ++steps_;
}

}  // namespace fedcq::nn
