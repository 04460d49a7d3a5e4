// SPDX-License-Identifier: Apache-2.0
#pragma once

// Finite-difference check of full step objectives on a tiny model.

#include <optional>
#include <vector>

#include "dualgen/autodiff.hpp"
#include "dualgen/model.hpp"
#include "dualgen/objectives.hpp"
#include "dualgen/rng.hpp"

namespace dualgen {

// d_model 8, one layer each side, 2 heads, 3 patches (2x6 image, p=2), 4 text tokens.
inline ModelConfig gradcheck_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers_enc = c.n_layers_dec = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.visual_vocab = 12;
  c.max_text_len = 4;
  c.max_patches = 3;
  c.patch_size = 2;
  c.d_feat = 4;
  c.d_code = 4;
  return c;
}

// Tiny model with every parameter redrawn from [-0.5, 0.5] (norm gains from
// [0.5, 1.5]) so nonlinearities sit away from their linear regime.
inline DualModel gradcheck_model(std::uint64_t seed) {
  DualModel m = init_model(gradcheck_config(), seed);
  Rng rng(seed + 1);
  for (const auto& p : m.parameters()) {
    const double centre = p.name.ends_with(".gain") ? 1.0 : 0.0;
    for (double& v : ad::Tensor(p.tensor).mutable_values()) v = centre + rng.uniform(-0.5, 0.5);
  }
  return m;
}

inline PreparedExample gradcheck_example(const DualModel& m, Rng& rng) {
  const auto& cfg = m.config();
  std::vector<double> px(cfg.patch_size * cfg.patch_size * 3 * ImageGrid::kChannels);
  for (double& v : px) v = rng.uniform();
  const ImageGrid img(cfg.patch_size, cfg.patch_size * 3, std::move(px));
  PreparedExample ex;
  ex.image = m.featurizer().featurize(img);
  ex.codes = tokenize_image(img, m.codebook()).tokens;
  const TokenSpace ts = m.tokens();
  for (std::size_t i = 0; i < cfg.max_text_len; ++i)
    ex.caption.push_back(SpecialTokens::kCount + rng.below(ts.text_words));
  return ex;
}

// One step objective (alpha·(NLL + beta·L_com) for image kinds, NLL for text
// kinds, or the full mixed sum when `kind` is empty) checked against central
// differences over every trainable parameter. The relative-error floor of
// 1e-5 sits above the ~1e-10 rounding noise of a central difference at h=1e-5.
inline ad::GradCheckReport gradcheck_step(std::optional<TaskKind> kind, std::uint64_t seed = 1, double h = 1e-5,
                                          double floor = 1e-5, double alpha = 0.05, double beta = 1.0) {
  DualModel m = gradcheck_model(seed);
  Rng rng(seed + 2);
  std::vector<PreparedExample> examples;
  for (int i = 0; i < 2; ++i) examples.push_back(gradcheck_example(m, rng));
  std::vector<TaskBatch> parts;
  for (int k = 0; k < 4; ++k) {
    const auto tk = static_cast<TaskKind>(k);
    if (!kind || *kind == tk)
      parts.push_back(build_task_batch(std::span<const PreparedExample>(examples), tk, rng, m.tokens()));
  }
  std::vector<ad::Tensor> params;
  for (const auto& p : m.parameters()) params.push_back(p.tensor);
  return ad::check_gradients(
      [&] { return step_loss(std::span<const TaskBatch>(parts), m, alpha, beta)->total; }, params, h, floor);
}

}  // namespace dualgen
