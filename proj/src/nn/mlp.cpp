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

#include "fedcq/nn/mlp.hpp"

#include <cmath>
#include <string>

#include "fedcq/error.hpp"

namespace fedcq::nn {

void MlpSpec::validate() const {
  if (input_width <= 0) throw ConfigError("MLP input width must be positive");
  if (widths.empty()) throw ConfigError("MLP needs at least one layer");
  for (int w : widths) {
    if (w <= 0) throw ConfigError("MLP layer widths must be positive");
  }
}

long long MlpSpec::parameter_count() const {
  long long n = 0;
  long long in = input_width;
  for (int w : widths) {
    n += in * w + w;
    in = w;
  }
  return n;
}

Mlp::Mlp(MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
  spec_.validate();
  int in = spec_.input_width;
  for (std::size_t l = 0; l < spec_.widths.size(); ++l) {
    const int out = spec_.widths[l];
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Matrix w(in, out);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      w.data()[i] = (2.0 * uniform01(rng) - 1.0) * limit;
    }
    weights_.emplace_back("layer" + std::to_string(l) + ".weight", std::move(w));
    biases_.emplace_back("layer" + std::to_string(l) + ".bias", Matrix::Zero(1, out));
    in = out;
  }
}

void Mlp::check_input(Eigen::Index width, std::size_t layer) const {
  if (width != weights_[layer].value.rows()) {
    throw ShapeError("layer " + std::to_string(layer) + ": expected input width " +
                     std::to_string(weights_[layer].value.rows()) + ", got " +
                     std::to_string(width));
  }
}

Var Mlp::forward(Tape& tape, Var x) {
  Var h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    check_input(tape.value(h).cols(), l);
    h = tape.add_row(tape.matmul(h, tape.param(weights_[l])), tape.param(biases_[l]));
    h = tape.activate(h, l + 1 == weights_.size() ? spec_.output : spec_.hidden);
  }
  return h;
}

Matrix Mlp::forward(const Matrix& x) const {
  Matrix h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    check_input(h.cols(), l);
    Matrix next = h * weights_[l].value;
    next.rowwise() += biases_[l].value.row(0);
    h = apply_activation(next, l + 1 == weights_.size() ? spec_.output : spec_.hidden);
  }
  return h;
}

ParamRefs Mlp::params() {
  ParamRefs out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

Matrix apply_activation(const Matrix& x, Activation act) {
  switch (act) {
    case Activation::kIdentity:
      return x;
    case Activation::kRelu:
      return x.cwiseMax(0.0);
    case Activation::kSigmoid:
      return (1.0 / (1.0 + (-x.array()).exp())).matrix();
  }
  throw Error("unknown activation");
}

}  // namespace fedcq::nn
