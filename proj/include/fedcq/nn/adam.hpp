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

#include <cstdint>
#include <vector>

#include "fedcq/nn/tensor.hpp"

namespace fedcq::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Added to the gradient as l2 * w before the moment update.
  double l2 = 0.0;
};

// Adaptive-moment optimizer bound to a fixed parameter list. Moments are kept
// per parameter, and so is the step count used for bias correction, so a
// parameter frozen for a while resumes with its own schedule.
class Adam {
 public:
  Adam() = default;
  Adam(ParamRefs params, AdamConfig config);

  // Applies one update to every trainable parameter from its grad. Throws
  // NumericError (and leaves all parameters untouched) on a non-finite grad.
  void step();

  AdamConfig& config() { return config_; }
  const AdamConfig& config() const { return config_; }
  std::int64_t steps() const { return steps_; }
  const Matrix& first_moment(std::size_t i) const { return m_.at(i); }
  const Matrix& second_moment(std::size_t i) const { return v_.at(i); }
  const ParamRefs& params() const { return params_; }

 private:
  ParamRefs params_;
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::vector<std::int64_t> t_;
  std::int64_t steps_ = 0;
};

}  // namespace fedcq::nn
