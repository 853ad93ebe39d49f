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

#pragma once

#include <vector>

#include "fedcq/nn/tape.hpp"
#include "fedcq/nn/tensor.hpp"
#include "fedcq/rng.hpp"

namespace fedcq::nn {

struct MlpSpec {
  int input_width = 0;
  // Output width of each affine layer, in order; the last is the net's output.
  std::vector<int> widths;
  Activation hidden = Activation::kRelu;
  Activation output = Activation::kIdentity;

  void validate() const;
  int output_width() const { return widths.back(); }
  // Weights plus biases over all layers.
  long long parameter_count() const;
};

// Stack of affine layers. Weights are Glorot-uniform, biases zero.
class Mlp {
 public:
  Mlp() = default;
  Mlp(MlpSpec spec, Rng& rng);

  const MlpSpec& spec() const { return spec_; }
  std::size_t num_layers() const { return weights_.size(); }
  Param& weight(std::size_t layer) { return weights_.at(layer); }
  Param& bias(std::size_t layer) { return biases_.at(layer); }
  const Param& weight(std::size_t layer) const { return weights_.at(layer); }
  const Param& bias(std::size_t layer) const { return biases_.at(layer); }

  // Records the forward pass on `tape`.
  Var forward(Tape& tape, Var x);
  // Inference without recording.
  Matrix forward(const Matrix& x) const;

  ParamRefs params();

 private:
  void check_input(Eigen::Index width, std::size_t layer) const;

  MlpSpec spec_;
  std::vector<Param> weights_;
  std::vector<Param> biases_;
};

Matrix apply_activation(const Matrix& x, Activation act);

}  // namespace fedcq::nn
