// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgen/model.hpp"

namespace dualgen {

struct NonFiniteGradientError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

struct OptimState {
  AdamConfig cfg;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;  // parallel to model.parameters()

  static OptimState for_model(const DualModel& model, const AdamConfig& cfg) {
    OptimState s;
    s.cfg = cfg;
    for (const auto& p : model.parameters()) {
      s.m.emplace_back(p.tensor.size(), 0.0);
      s.v.emplace_back(p.tensor.size(), 0.0);
    }
    return s;
  }
};

inline double global_grad_norm(const DualModel& model) {
  double sq = 0.0;
  for (const auto& p : model.parameters())
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
  return std::sqrt(sq);
}

// Clips the global gradient norm to cfg.clip_norm, then applies one
// bias-corrected Adam update. Returns the pre-clip norm.
inline double adam_step(const DualModel& model, OptimState& state) {
  const auto& params = model.parameters();
  if (state.m.size() != params.size()) throw std::logic_error("adam_step: optimizer state does not match model");
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i])) {
        std::ostringstream os;
        os << "adam_step: non-finite gradient " << g[i] << " in '" << p.name << "' at flat index " << i
           << " (optimizer step " << state.step << ")";
        throw NonFiniteGradientError(os.str());
      }
  }
  const double norm = global_grad_norm(model);
  const double clip = (state.cfg.clip_norm > 0.0 && norm > state.cfg.clip_norm) ? state.cfg.clip_norm / norm : 1.0;

  ++state.step;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    // Parameters without gradient this step see g = 0; their moments still decay.
    ad::Tensor t = params[k].tensor;
    auto w = t.mutable_values();
    const auto g = t.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      w[i] -= state.cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.cfg.eps);
    }
  }
  return norm;
}

}  // namespace dualgen
