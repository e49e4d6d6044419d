// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "molex/numerics.hpp"

namespace molex {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments for one parameter tensor.
struct AdamMoments {
  Matrix m;
  Matrix v;
};

// Decoupled weight decay (AdamW) with bias-corrected moments. `step` is the
// 1-based index of this update.
inline void adamw_update(Matrix& param, const Matrix& grad, AdamMoments& mom, std::int64_t step,
                         double lr, double weight_decay, const AdamWConfig& cfg = {}) {
  if (!param.same_shape(grad)) throw ShapeError("adamw: gradient shape mismatch");
  if (mom.m.empty()) {
    mom.m = Matrix(param.rows(), param.cols());
    mom.v = Matrix(param.rows(), param.cols());
  }
  if (!grad.all_finite()) throw TrainingError("non-finite gradient at step " + std::to_string(step));
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * grad[i];
    mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = mom.m[i] / bc1;
    const double vhat = mom.v[i] / bc2;
    param[i] -= lr * weight_decay * param[i];
    param[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// Optimizer over an ordered list of parameter slots. Callers register slots
// once (in a fixed order) and pass gradients in the same order each step.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  std::int64_t step_count() const { return step_; }
  const std::vector<AdamMoments>& moments() const { return moments_; }

  // Applies one update. params[i] is paired with grads[i] and group[i].
  struct Group {
    double lr;
    double weight_decay;
  };

  void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
            const std::vector<Group>& groups) {
    if (params.size() != grads.size() || params.size() != groups.size()) {
      throw ShapeError("adamw: parameter/gradient/group count mismatch");
    }
    if (moments_.empty()) moments_.resize(params.size());
    if (moments_.size() != params.size()) throw ShapeError("adamw: parameter set changed");
    ++step_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!grads[i]->all_finite()) {
        throw TrainingError("non-finite gradient at step " + std::to_string(step_));
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i)
      adamw_update(*params[i], *grads[i], moments_[i], step_, groups[i].lr, groups[i].weight_decay, cfg_);
  }

 private:
  AdamWConfig cfg_;
  std::vector<AdamMoments> moments_;
  std::int64_t step_ = 0;
};

// Linear warmup over ceil(warmup_ratio·total) steps, then linear decay to 0
// at step `total`. Steps are 1-based; lr(1) > 0.
struct LinearSchedule {
  std::int64_t total_steps = 1;
  double warmup_ratio = 0.06;

  std::int64_t warmup_steps() const {
    return static_cast<std::int64_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
  }

  double factor(std::int64_t step) const {
    if (step <= 0) return 0.0;
    if (step >= total_steps) return 0.0;
    const std::int64_t w = warmup_steps();
    if (w > 0 && step <= w) return static_cast<double>(step) / static_cast<double>(w);
    return static_cast<double>(total_steps - step) / static_cast<double>(total_steps - w);
  }
};

}  // namespace molex
