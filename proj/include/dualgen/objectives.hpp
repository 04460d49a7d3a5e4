// SPDX-License-Identifier: Apache-2.0
#pragma once

// The four dual pre-training losses, the stop-gradient commitment loss, the
// loss mixing rule and the task sampler.

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgen/autodiff.hpp"
#include "dualgen/corruption.hpp"
#include "dualgen/data.hpp"
#include "dualgen/model.hpp"
#include "dualgen/rng.hpp"
#include "dualgen/vision.hpp"

namespace dualgen {

enum class TaskKind { kDaeImage, kDaeText, kMtCaption, kMtT2i };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::kDaeImage: return "dae_image";
    case TaskKind::kDaeText: return "dae_text";
    case TaskKind::kMtCaption: return "mt_caption";
    case TaskKind::kMtT2i: return "mt_t2i";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  for (TaskKind k : {TaskKind::kDaeImage, TaskKind::kDaeText, TaskKind::kMtCaption, TaskKind::kMtT2i})
    if (s == task_name(k)) return k;
  throw std::invalid_argument("unknown task '" + s + "'");
}

inline bool targets_image(TaskKind k) { return k == TaskKind::kDaeImage || k == TaskKind::kMtT2i; }
inline bool is_dae(TaskKind k) { return k == TaskKind::kDaeImage || k == TaskKind::kDaeText; }

struct KindMismatchError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// An example with its frozen-side products computed once.
struct PreparedExample {
  std::vector<std::size_t> caption;  // unified text ids
  PatchSequence image;               // clean features, constant
  std::vector<std::size_t> codes;    // visual tokens in [0, K)
};

inline PreparedExample prepare_example(const PairedExample& ex, const DualModel& model) {
  ad::NoGradGuard guard;
  PreparedExample p;
  p.caption = ex.caption;
  p.image = model.featurizer().featurize(ex.image);
  p.codes = tokenize_image(ex.image, model.codebook()).tokens;
  return p;
}

inline std::vector<PreparedExample> prepare_dataset(const std::vector<PairedExample>& data,
                                                    const DualModel& model) {
  std::vector<PreparedExample> out;
  out.reserve(data.size());
  for (const auto& ex : data) out.push_back(prepare_example(ex, model));
  return out;
}

struct CorruptionConfig {
  double image_mask_rate = 0.5;
  double text_mask_rate = 0.5;
  double span_lambda = 3.0;
  BlockMaskParams blocks;
};

struct TaskItem {
  std::optional<std::vector<std::size_t>> enc_text;
  std::optional<PatchSequence> enc_image;
  std::optional<PatchMask> patch_mask;
  std::vector<std::size_t> targets;  // bracketed decoder sequence
  PatchSequence clean_image;         // for the commitment loss
  std::vector<std::size_t> codes;
};

struct TaskBatch {
  TaskKind kind = TaskKind::kDaeImage;
  std::vector<TaskItem> items;
};

inline std::vector<std::size_t> text_targets(const std::vector<std::size_t>& caption) {
  std::vector<std::size_t> t{SpecialTokens::kBos};
  t.insert(t.end(), caption.begin(), caption.end());
  t.push_back(SpecialTokens::kEos);
  return t;
}

inline std::vector<std::size_t> image_targets(const std::vector<std::size_t>& codes, const TokenSpace& ts) {
  std::vector<std::size_t> t{SpecialTokens::kBoi};
  for (std::size_t c : codes) t.push_back(ts.visual_id(c));
  t.push_back(SpecialTokens::kEoi);
  return t;
}

inline TaskBatch build_task_batch(std::span<const PreparedExample> examples, TaskKind kind, Rng& rng,
                                  const TokenSpace& ts, const CorruptionConfig& cfg = {}) {
  if (examples.empty()) throw std::invalid_argument("build_task_batch: empty example list");
  TaskBatch batch{kind, {}};
  batch.items.reserve(examples.size());
  for (const auto& ex : examples) {
    TaskItem item;
    item.clean_image = ex.image;
    item.codes = ex.codes;
    switch (kind) {
      case TaskKind::kDaeImage:
        item.enc_image = ex.image;
        item.patch_mask = blockwise_mask(ex.image.grid.rows, ex.image.grid.cols, cfg.image_mask_rate, rng, cfg.blocks);
        item.enc_text = ex.caption;
        item.targets = image_targets(ex.codes, ts);
        break;
      case TaskKind::kDaeText:
        item.enc_image = ex.image;
        item.enc_text = span_infill(ex.caption, cfg.text_mask_rate, cfg.span_lambda, rng, SpecialTokens::kMask,
                                    [&ts](std::size_t id) { return ts.is_special(id); })
                            .corrupted;
        item.targets = text_targets(ex.caption);
        break;
      case TaskKind::kMtCaption:
        item.enc_image = ex.image;
        item.targets = text_targets(ex.caption);
        break;
      case TaskKind::kMtT2i:
        item.enc_text = ex.caption;
        item.targets = image_targets(ex.codes, ts);
        break;
    }
    batch.items.push_back(std::move(item));
  }
  return batch;
}

inline TaskBatch build_task_batch(const std::vector<PairedExample>& examples, TaskKind kind, Rng& rng,
                                  const DualModel& model, const CorruptionConfig& cfg = {}) {
  const auto prepared = prepare_dataset(examples, model);
  return build_task_batch(prepared, kind, rng, model.tokens(), cfg);
}

namespace detail {
// Token-weighted mean NLL of each item's targets[1..] given targets[..T-1].
inline ad::Tensor sequence_nll(const TaskBatch& batch, const DualModel& model, const ForwardContext& ctx) {
  std::size_t total = 0;
  for (const auto& it : batch.items) total += it.targets.size() - 1;
  std::vector<ad::Tensor> parts;
  for (const auto& it : batch.items) {
    const ad::Tensor enc = model.encode(it.enc_text ? &*it.enc_text : nullptr,
                                        it.enc_image ? &*it.enc_image : nullptr,
                                        it.patch_mask ? &*it.patch_mask : nullptr, ctx);
    const std::vector<std::size_t> inputs(it.targets.begin(), it.targets.end() - 1);
    const std::span<const std::size_t> next(it.targets.begin() + 1, it.targets.end());
    const ad::Tensor ce = ad::cross_entropy_logits(model.decode_forward(inputs, enc, ctx), next);
    parts.push_back(ad::scale(ce, static_cast<double>(inputs.size()) / static_cast<double>(total)));
  }
  ad::Tensor acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = ad::add(acc, parts[i]);
  return acc;
}

inline void require_kind(const TaskBatch& b, TaskKind want, const char* who) {
  if (b.kind != want)
    throw KindMismatchError(std::string(who) + ": batch is " + task_name(b.kind) + ", expected " + task_name(want));
}
}  // namespace detail

inline ad::Tensor loss_dae_image(const TaskBatch& b, const DualModel& m, const ForwardContext& ctx = {}) {
  detail::require_kind(b, TaskKind::kDaeImage, "loss_dae_image");
  return detail::sequence_nll(b, m, ctx);
}
inline ad::Tensor loss_dae_text(const TaskBatch& b, const DualModel& m, const ForwardContext& ctx = {}) {
  detail::require_kind(b, TaskKind::kDaeText, "loss_dae_text");
  return detail::sequence_nll(b, m, ctx);
}
inline ad::Tensor loss_mt_text(const TaskBatch& b, const DualModel& m, const ForwardContext& ctx = {}) {
  detail::require_kind(b, TaskKind::kMtCaption, "loss_mt_text");
  return detail::sequence_nll(b, m, ctx);
}
inline ad::Tensor loss_mt_image(const TaskBatch& b, const DualModel& m, const ForwardContext& ctx = {}) {
  detail::require_kind(b, TaskKind::kMtT2i, "loss_mt_image");
  return detail::sequence_nll(b, m, ctx);
}

namespace detail {
inline ad::Tensor commitment(const std::vector<const TaskItem*>& items, const DualModel& m) {
  std::size_t total = 0;
  for (const auto* it : items) total += it->codes.size();
  std::vector<ad::Tensor> parts;
  for (const auto* it : items) {
    const ad::Tensor anchor = ad::stop_gradient(m.project_patches(it->clean_image.features));
    const ad::Tensor decoded = ad::gather_rows(m.visual_embed(), it->codes);
    parts.push_back(ad::scale(ad::squared_error(anchor, decoded),
                              static_cast<double>(it->codes.size()) / static_cast<double>(total)));
  }
  ad::Tensor acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = ad::add(acc, parts[i]);
  return acc;
}
}  // namespace detail

// Mean over patch positions of ||sg[patch_proj(clean features)] - visual_embed[code]||².
// Bracket tokens have no patch and do not participate.
inline ad::Tensor loss_commitment(const TaskBatch& b, const DualModel& m) {
  if (!targets_image(b.kind))
    throw KindMismatchError(std::string("loss_commitment: not defined for ") + task_name(b.kind));
  std::vector<const TaskItem*> items;
  for (const auto& it : b.items) items.push_back(&it);
  return detail::commitment(items, m);
}

inline ad::Tensor task_loss(const TaskBatch& b, const DualModel& m, const ForwardContext& ctx = {}) {
  switch (b.kind) {
    case TaskKind::kDaeImage: return loss_dae_image(b, m, ctx);
    case TaskKind::kDaeText: return loss_dae_text(b, m, ctx);
    case TaskKind::kMtCaption: return loss_mt_text(b, m, ctx);
    case TaskKind::kMtT2i: return loss_mt_image(b, m, ctx);
  }
  throw std::logic_error("unreachable");
}

// Scalar terms of one step; absent terms are nullopt.
struct LossTerms {
  std::optional<double> dae_image, dae_text, mt_image, mt_text, com;
};

struct LossBreakdown {
  double l_dae_image = 0, l_dae_text = 0, l_mt_image = 0, l_mt_text = 0, l_com = 0;
  bool has_dae_image = false, has_dae_text = false, has_mt_image = false, has_mt_text = false, has_com = false;
  double l_image = 0, l_text = 0, l_total = 0;
  double alpha = 0, beta = 0;
};

struct NoLossTermsError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// l_image = l_dae_image + l_mt_image + beta·l_com,
// l_text  = l_dae_text + l_mt_text,
// l_total = l_text + alpha·l_image.
inline LossBreakdown total_loss(const LossTerms& t, double alpha, double beta) {
  if (!t.dae_image && !t.dae_text && !t.mt_image && !t.mt_text && !t.com)
    throw NoLossTermsError("total_loss: no loss term present");
  LossBreakdown b;
  b.alpha = alpha;
  b.beta = beta;
  b.has_dae_image = t.dae_image.has_value(), b.l_dae_image = t.dae_image.value_or(0.0);
  b.has_dae_text = t.dae_text.has_value(), b.l_dae_text = t.dae_text.value_or(0.0);
  b.has_mt_image = t.mt_image.has_value(), b.l_mt_image = t.mt_image.value_or(0.0);
  b.has_mt_text = t.mt_text.has_value(), b.l_mt_text = t.mt_text.value_or(0.0);
  b.has_com = t.com.has_value(), b.l_com = t.com.value_or(0.0);
  b.l_image = b.l_dae_image + b.l_mt_image + beta * b.l_com;
  b.l_text = b.l_dae_text + b.l_mt_text;
  b.l_total = b.l_text + alpha * b.l_image;
  return b;
}

// Which families an ablation keeps.
struct LossSwitches {
  bool image = true;       // image-target tasks (inpainting, text-to-image)
  bool text = true;        // text-target tasks (infilling, captioning)
  bool commitment = true;
};

// Differentiable step objective plus its breakdown. A step holds at most one
// batch per task kind; each present task contributes its mean NLL and the
// commitment term averages over every image-target position in the step.
// Returns nullopt when the switches remove every term.
struct StepLoss {
  ad::Tensor total;
  LossBreakdown breakdown;
};

inline std::optional<StepLoss> step_loss(std::span<const TaskBatch> parts, const DualModel& m, double alpha,
                                         double beta, const LossSwitches& sw = {}, const ForwardContext& ctx = {}) {
  LossTerms terms;
  std::optional<ad::Tensor> text, image;
  std::vector<const TaskItem*> image_items;
  auto accumulate = [](std::optional<ad::Tensor>& acc, const ad::Tensor& t) { acc = acc ? ad::add(*acc, t) : t; };
  bool seen[4] = {};
  for (const TaskBatch& b : parts) {
    auto& once = seen[static_cast<int>(b.kind)];
    if (once) throw std::invalid_argument(std::string("step_loss: two batches of kind ") + task_name(b.kind));
    once = true;
    if (b.items.empty()) continue;
    const bool image_kind = targets_image(b.kind);
    if ((image_kind && !sw.image) || (!image_kind && !sw.text)) continue;
    const ad::Tensor nll = task_loss(b, m, ctx);
    switch (b.kind) {
      case TaskKind::kDaeImage: terms.dae_image = nll.item(); break;
      case TaskKind::kDaeText: terms.dae_text = nll.item(); break;
      case TaskKind::kMtCaption: terms.mt_text = nll.item(); break;
      case TaskKind::kMtT2i: terms.mt_image = nll.item(); break;
    }
    if (image_kind) {
      accumulate(image, nll);
      for (const auto& it : b.items) image_items.push_back(&it);
    } else {
      accumulate(text, nll);
    }
  }
  if (!text && !image) return std::nullopt;
  if (image && sw.commitment) {
    const ad::Tensor com = detail::commitment(image_items, m);
    terms.com = com.item();
    image = ad::add(*image, ad::scale(com, beta));
  }
  ad::Tensor total;
  if (text && image) total = ad::add(*text, ad::scale(*image, alpha));
  else total = text ? *text : ad::scale(*image, alpha);
  return StepLoss{total, total_loss(terms, alpha, beta)};
}

inline std::optional<StepLoss> step_loss(const TaskBatch& b, const DualModel& m, double alpha, double beta,
                                         const LossSwitches& sw = {}, const ForwardContext& ctx = {}) {
  return step_loss(std::span<const TaskBatch>(&b, 1), m, alpha, beta, sw, ctx);
}

// Family by p_dae, then a fair coin for the direction. Always consumes two
// draws so the stream does not depend on p_dae.
inline TaskKind sample_task(Rng& rng, double p_dae) {
  if (!(p_dae >= 0.0 && p_dae <= 1.0)) throw std::invalid_argument("sample_task: p_dae outside [0,1]");
  const bool dae = rng.uniform() < p_dae;
  const bool image = rng.uniform() < 0.5;
  if (dae) return image ? TaskKind::kDaeImage : TaskKind::kDaeText;
  return image ? TaskKind::kMtT2i : TaskKind::kMtCaption;
}

}  // namespace dualgen
