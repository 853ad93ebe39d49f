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

#include "fedcq/nn/gradcheck.hpp"

#include <cmath>

#include "fedcq/error.hpp"

namespace fedcq::nn {
namespace {

double evaluate(const LossBuilder& loss) {
  Tape tape;
  const double v = tape.scalar(loss(tape));
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: loss is not finite");
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const LossBuilder& loss, const ParamRefs& params,
                                  double eps, Stencil stencil) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_check: eps must be positive");
  zero_grads(params);
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  GradCheckReport report;
  for (Param* p : params) {
    for (Eigen::Index k = 0; k < p->value.size(); ++k) {
      double& x = p->value.data()[k];
      const double saved = x;
      auto at = [&](double offset) {
        x = saved + offset;
        const double v = evaluate(loss);
        x = saved;
        return v;
      };
      double numeric = (at(eps) - at(-eps)) / (2.0 * eps);
      if (stencil == Stencil::kFivePoint) {
        numeric = (4.0 * numeric - (at(2 * eps) - at(-2 * eps)) / (4.0 * eps)) / 3.0;
      }
      const double analytic = p->grad.data()[k];
      const double rel = std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
      ++report.coordinates;
      if (report.worst.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = p->name + "[" + std::to_string(k) + "]";
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace fedcq::nn
