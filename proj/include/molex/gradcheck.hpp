// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "molex/numerics.hpp"

namespace molex {

using LossFn = std::function<double(const Matrix&)>;

// Central-difference check of an analytic gradient. Returns the max over
// coordinates of |fd - analytic| / max(1e-8, |fd| + |analytic|).
inline double finite_diff_check(const LossFn& loss_fn, const Matrix& params,
                                const Matrix& analytic_grad, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be positive");
  if (!params.same_shape(analytic_grad)) {
    throw ShapeError("finite_diff_check: gradient shape " + detail::shape_str(analytic_grad) +
                     " != parameter shape " + detail::shape_str(params));
  }
  Matrix probe = params;
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = loss_fn(probe);
    probe[i] = orig - h;
    const double down = loss_fn(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_check: non-finite loss at coordinate " + std::to_string(i));
    }
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(fd - analytic_grad[i]) /
                       std::max(1e-8, std::abs(fd) + std::abs(analytic_grad[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace molex
