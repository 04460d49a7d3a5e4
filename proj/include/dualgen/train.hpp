// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pre-training and fine-tuning loops plus held-out evaluation.

#include <array>
#include <cstdio>
#include <numeric>
#include <span>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgen/model.hpp"
#include "dualgen/objectives.hpp"
#include "dualgen/optim.hpp"
#include "dualgen/rng.hpp"

namespace dualgen {

struct PretrainConfig {
  double alpha = 0.05;
  double beta = 1.0;
  double p_dae = 0.6;
  std::size_t batch_size = 16;
  LossSwitches switches;
  CorruptionConfig corruption;
};

// Everything needed to resume a run bit-exactly.
struct TrainState {
  DualModel model;
  OptimState optim;
  Rng rng;
  std::uint64_t step = 0;
};

inline TrainState make_train_state(const ModelConfig& mcfg, const AdamConfig& acfg, std::uint64_t seed) {
  TrainState s;
  s.model = init_model(mcfg, seed);
  s.optim = OptimState::for_model(s.model, acfg);
  s.rng = Rng(seed ^ 0x9E3779B97F4A7C15ull);
  return s;
}

struct LogRow {
  std::uint64_t step = 0;
  std::array<std::size_t, 4> counts{};  // examples per TaskKind in this step
  bool skipped = false;                 // every term removed by an ablation switch; no update made
  LossBreakdown loss;
  double grad_norm = 0.0;
};

// "step  counts  l_total  l_text  l_image  l_com  grad_norm", tab separated;
// counts reads "dae_image=5,dae_text=3,...", suffixed "!skip" for skipped steps.
inline std::string format_log_row(const LogRow& r) {
  std::string counts;
  for (int k = 0; k < 4; ++k) {
    if (!counts.empty()) counts += ',';
    counts += task_name(static_cast<TaskKind>(k));
    counts += '=' + std::to_string(r.counts[k]);
  }
  if (r.skipped) counts += "!skip";
  char buf[192];
  std::snprintf(buf, sizeof buf, "\t%.10g\t%.10g\t%.10g\t%.10g\t%.10g", r.loss.l_total, r.loss.l_text,
                r.loss.l_image, r.loss.l_com, r.grad_norm);
  return std::to_string(r.step) + '\t' + counts + buf;
}

// One optimizer update on the step's task batches; returns the log row.
inline LogRow train_on_batches(TrainState& s, std::span<const TaskBatch> parts, double alpha, double beta,
                               const LossSwitches& sw) {
  LogRow row;
  row.step = s.step;
  for (const auto& b : parts) row.counts[static_cast<int>(b.kind)] += b.items.size();
  ForwardContext ctx{&s.rng};
  auto loss = step_loss(parts, s.model, alpha, beta, sw, ctx);
  if (!loss) {
    row.skipped = true;
    row.loss.alpha = alpha;
    row.loss.beta = beta;
    return row;
  }
  s.model.zero_grad();
  ad::backward(loss->total);
  row.grad_norm = adam_step(s.model, s.optim);
  s.model.zero_grad();
  row.loss = loss->breakdown;
  return row;
}

// Draws one step's examples: per instance a task kind and an example index
// (with replacement), then corrupts each kind's group as one batch, in
// TaskKind order.
inline std::vector<TaskBatch> draw_step_batches(const std::vector<PreparedExample>& data, std::size_t batch_size,
                                                double p_dae, Rng& rng, const TokenSpace& ts,
                                                const CorruptionConfig& corruption) {
  std::array<std::vector<PreparedExample>, 4> groups;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const TaskKind kind = sample_task(rng, p_dae);
    groups[static_cast<int>(kind)].push_back(data[rng.below(data.size())]);
  }
  std::vector<TaskBatch> parts;
  for (int k = 0; k < 4; ++k)
    if (!groups[k].empty())
      parts.push_back(build_task_batch(std::span<const PreparedExample>(groups[k]), static_cast<TaskKind>(k), rng,
                                       ts, corruption));
  return parts;
}

// Per step: draw and corrupt a mixed batch, compute the combined loss,
// backpropagate and apply Adam. Switched-off terms drop out of the loss but
// their draws still happen, so every ablation sees the same schedule.
inline std::vector<LogRow> pretrain(const std::vector<PreparedExample>& data, TrainState& s, std::size_t steps,
                                    const PretrainConfig& cfg, std::ostream* log = nullptr) {
  if (data.empty()) throw std::invalid_argument("pretrain: empty dataset");
  std::vector<LogRow> rows;
  rows.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const auto parts = draw_step_batches(data, cfg.batch_size, cfg.p_dae, s.rng, s.model.tokens(), cfg.corruption);
    rows.push_back(train_on_batches(s, parts, cfg.alpha, cfg.beta, cfg.switches));
    ++s.step;
    if (log) *log << format_log_row(rows.back()) << '\n';
  }
  return rows;
}

struct FinetuneConfig {
  std::size_t epochs = 1;
  double lr = 0.0;  // 0 selects the task default
  std::size_t batch_size = 16;
  double beta = 1.0;
  bool commitment = true;
  CorruptionConfig corruption;

  static constexpr double kDefaultLrT2i = 1e-4;
  static constexpr double kDefaultLrCaption = 3e-5;
};

inline double default_finetune_lr(TaskKind task) {
  switch (task) {
    case TaskKind::kMtT2i: return FinetuneConfig::kDefaultLrT2i;
    case TaskKind::kMtCaption: return FinetuneConfig::kDefaultLrCaption;
    default: throw std::invalid_argument("finetune: only mt_caption and mt_t2i are fine-tuning tasks");
  }
}

// Single-task training: the task NLL, plus beta·L_com for text-to-image.
// Optimizer moments are reset and the learning rate replaced.
inline std::vector<LogRow> finetune(const std::vector<PreparedExample>& data, TrainState& s, TaskKind task,
                                    const FinetuneConfig& cfg, std::ostream* log = nullptr) {
  if (data.empty()) throw std::invalid_argument("finetune: empty dataset");
  AdamConfig acfg = s.optim.cfg;
  acfg.lr = cfg.lr > 0.0 ? cfg.lr : default_finetune_lr(task);
  s.optim = OptimState::for_model(s.model, acfg);
  LossSwitches sw;
  sw.image = task == TaskKind::kMtT2i;
  sw.text = task == TaskKind::kMtCaption;
  sw.commitment = cfg.commitment;

  std::vector<LogRow> rows;
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[s.rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<PreparedExample> examples;
      for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch_size); ++j)
        examples.push_back(data[order[j]]);
      const TaskBatch batch = build_task_batch(examples, task, s.rng, s.model.tokens(), cfg.corruption);
      // alpha = 1: there is no text/image trade-off inside a single task.
      rows.push_back(train_on_batches(s, std::span<const TaskBatch>(&batch, 1), 1.0, cfg.beta, sw));
      ++s.step;
      if (log) *log << format_log_row(rows.back()) << '\n';
    }
  }
  return rows;
}

// Token-weighted mean NLL of one task over a dataset (no commitment term).
// Corruption draws come from a stream seeded by `seed`, so repeated
// evaluations see identical masks.
inline double evaluate_task(const std::vector<PreparedExample>& data, const DualModel& model, TaskKind kind,
                            std::uint64_t seed = 0, const CorruptionConfig& corruption = {},
                            std::size_t chunk = 64) {
  if (data.empty()) throw std::invalid_argument("evaluate_task: empty dataset");
  ad::NoGradGuard guard;
  Rng rng(seed);
  double weighted = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::span<const PreparedExample> part(data.data() + start, std::min(chunk, data.size() - start));
    const TaskBatch b = build_task_batch(part, kind, rng, model.tokens(), corruption);
    std::size_t n = 0;
    for (const auto& it : b.items) n += it.targets.size() - 1;
    weighted += task_loss(b, model).item() * static_cast<double>(n);
    tokens += n;
  }
  return weighted / static_cast<double>(tokens);
}

}  // namespace dualgen
