#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "jstts/autodiff.hpp"

namespace jstts {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  int64_t step_count = 0;
  AdamConfig config;

  AdamState() = default;
  AdamState(std::span<Parameter* const> params, AdamConfig cfg);
};

// Bias-corrected Adam update using each parameter's accumulated grad.
// Throws ValueError naming `group` when any gradient is NaN/Inf.
void adam_step(std::span<Parameter* const> params, AdamState& state, std::string_view group);

// Rescales gradients in place so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_global_norm(std::span<Parameter* const> params, double max_norm);

double grad_norm(std::span<Parameter* const> params);

}  // namespace jstts
