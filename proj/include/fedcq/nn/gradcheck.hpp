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

#include <functional>
#include <string>

#include "fedcq/nn/tape.hpp"
#include "fedcq/nn/tensor.hpp"

namespace fedcq::nn {

// Records a scalar loss on the given tape from the current parameter values.
// Must be pure: the same parameters always give the same loss.
using LossBuilder = std::function<Var(Tape&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<flat index>]"
  double analytic = 0.0;
  double numeric = 0.0;
  long long coordinates = 0;
};

// kCentral: (f(x+h) - f(x-h)) / 2h, error O(h^2).
// kFivePoint: Richardson-extrapolated central difference, error O(h^4); it
// tolerates a larger h and so resolves small gradients above rounding noise.
enum class Stencil { kCentral, kFivePoint };

// Compares tape gradients against finite differences over every coordinate
// of `params`. Relative error per coordinate is
// |analytic - numeric| / (|numeric| + 1e-8).
GradCheckReport finite_diff_check(const LossBuilder& loss, const ParamRefs& params,
                                  double eps = 1e-4, Stencil stencil = Stencil::kCentral);

}  // namespace fedcq::nn
