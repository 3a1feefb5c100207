#include "jstts/optim.hpp"

#include <cmath>
#include <string>

#include "jstts/error.hpp"

namespace jstts {

AdamState::AdamState(std::span<Parameter* const> params, AdamConfig cfg) : config(cfg) {
  if (!(cfg.beta1 > 0 && cfg.beta1 < 1 && cfg.beta2 > 0 && cfg.beta2 < 1)) {
    throw ValueError("adam: betas must lie in (0, 1)");
  }
  for (const Parameter* p : params) {
    first_moment.emplace_back(p->value.shape());
    second_moment.emplace_back(p->value.shape());
  }
}

void adam_step(std::span<Parameter* const> params, AdamState& state, std::string_view group) {
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: state for " + std::to_string(state.first_moment.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (const Parameter* p : params) {
    if (!p->grad.all_finite()) {
      throw ValueError("adam_step: non-finite gradient in group '" + std::string(group) + "' (" + p->name + ")");
    }
  }
  const AdamConfig& c = state.config;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    if (!m.same_shape(p.value)) throw ShapeError("adam_step: moment shape mismatch for " + p.name);
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

double grad_norm(std::span<Parameter* const> params) {
  double s = 0.0;
  for (const Parameter* p : params) s += p->grad.squared_norm();
  return std::sqrt(s);
}

double clip_global_norm(std::span<Parameter* const> params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (Parameter* p : params)
      for (double& g : p->grad.values()) g *= f;
  }
  return norm;
}

}  // namespace jstts
