// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "dualgen/decode.hpp"
#include "dualgen/train.hpp"

using namespace dualgen;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers_enc = c.n_layers_dec = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  return c;
}

std::vector<double> flat_params(const DualModel& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

// Next-token table lookup keyed by prefix length and last token.
Scorer table_scorer(std::size_t vocab, std::uint64_t seed) {
  auto cache = std::make_shared<std::map<std::vector<std::size_t>, std::vector<double>>>();
  return [=](const std::vector<std::size_t>& prefix) {
    auto it = cache->find(prefix);
    if (it != cache->end()) return it->second;
    std::uint64_t h = seed;
    for (std::size_t t : prefix) h = h * 1000003u + t + 1;
    Rng rng(h);
    std::vector<double> logits(vocab);
    for (double& v : logits) v = rng.uniform(-3.0, 3.0);
    cache->emplace(prefix, logits);
    return logits;
  };
}

}  // namespace

TEST(Adam, FirstStepIsLrTimesSign) {
  const DualModel m = init_model(small_config(), 1);
  AdamConfig cfg;
  cfg.clip_norm = 0.0;
  OptimState s = OptimState::for_model(m, cfg);
  ad::Tensor w = m.parameters()[0].tensor;
  const std::vector<double> before(w.values().begin(), w.values().end());
  auto g = w.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = (i % 2 ? 1.0 : -1.0) * (0.01 + 0.001 * i);
  adam_step(m, s);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double sign = i % 2 ? 1.0 : -1.0;
    EXPECT_NEAR(w.values()[i] - before[i], -cfg.lr * sign, 1e-9);
  }
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, ClipScalesGlobalNorm) {
  const DualModel m = init_model(small_config(), 1);
  ad::Tensor w = m.parameters()[0].tensor;
  auto g = w.mutable_grad();
  g[0] = 3.0, g[1] = 4.0;
  EXPECT_DOUBLE_EQ(global_grad_norm(m), 5.0);
  AdamConfig cfg;
  cfg.clip_norm = 1.0;
  OptimState s = OptimState::for_model(m, cfg);
  EXPECT_DOUBLE_EQ(adam_step(m, s), 5.0);
  EXPECT_NEAR(s.m[0][0], 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(s.m[0][1], 0.1 * 0.8, 1e-15);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  const DualModel m = init_model(small_config(), 1);
  ad::Tensor(m.parameters()[3].tensor).mutable_grad()[2] = std::nan("");
  OptimState s = OptimState::for_model(m, AdamConfig{});
  try {
    adam_step(m, s);
    FAIL() << "expected NonFiniteGradientError";
  } catch (const NonFiniteGradientError& e) {
    EXPECT_NE(std::string(e.what()).find(m.parameters()[3].name), std::string::npos);
  }
}

TEST(Pretrain, ZeroStepsLeavesInitialParameters) {
  const auto data = prepare_dataset(gen_dataset(4, 1, grammar_vocab()), init_model(small_config(), 2));
  TrainState s = make_train_state(small_config(), AdamConfig{}, 2);
  const auto before = flat_params(s.model);
  EXPECT_TRUE(pretrain(data, s, 0, PretrainConfig{}).empty());
  EXPECT_EQ(flat_params(s.model), before);
}

TEST(Pretrain, DeterministicAndLogged) {
  const auto data = prepare_dataset(gen_dataset(6, 1, grammar_vocab()), init_model(small_config(), 2));
  PretrainConfig cfg;
  cfg.batch_size = 4;
  auto run = [&](std::ostream* log) {
    TrainState s = make_train_state(small_config(), AdamConfig{}, 2);
    pretrain(data, s, 3, cfg, log);
    return flat_params(s.model);
  };
  std::ostringstream log;
  EXPECT_EQ(run(&log), run(nullptr));
  std::istringstream lines(log.str());
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line); ++n) {
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 6);
    EXPECT_EQ(line.rfind(std::to_string(n) + "\tdae_image=", 0), 0u);
  }
  EXPECT_EQ(n, 3u);
}

TEST(Pretrain, FullyAblatedStepsAreSkipped) {
  const auto data = prepare_dataset(gen_dataset(4, 1, grammar_vocab()), init_model(small_config(), 2));
  PretrainConfig cfg;
  cfg.batch_size = 2;
  cfg.switches = {false, false, false};
  TrainState s = make_train_state(small_config(), AdamConfig{}, 2);
  const auto before = flat_params(s.model);
  const auto rows = pretrain(data, s, 2, cfg);
  for (const auto& r : rows) EXPECT_TRUE(r.skipped);
  EXPECT_NE(format_log_row(rows[0]).find("!skip"), std::string::npos);
  EXPECT_EQ(flat_params(s.model), before);
}

TEST(Finetune, DefaultLearningRates) {
  EXPECT_DOUBLE_EQ(default_finetune_lr(TaskKind::kMtT2i), 1e-4);
  EXPECT_DOUBLE_EQ(default_finetune_lr(TaskKind::kMtCaption), 3e-5);
  EXPECT_THROW(default_finetune_lr(TaskKind::kDaeText), std::invalid_argument);
}

TEST(Finetune, OnePassOverData) {
  const auto data = prepare_dataset(gen_dataset(5, 1, grammar_vocab()), init_model(small_config(), 2));
  TrainState s = make_train_state(small_config(), AdamConfig{}, 2);
  FinetuneConfig cfg;
  cfg.batch_size = 2;
  const auto rows = finetune(data, s, TaskKind::kMtCaption, cfg);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].counts[static_cast<int>(TaskKind::kMtCaption)], 2u);
  EXPECT_DOUBLE_EQ(s.optim.cfg.lr, 3e-5);
}

TEST(Search, BeamNeverWorseThanGreedy) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Scorer f = table_scorer(6, seed);
    SearchSpec spec{{0}, 5, 5, {}};
    const Hypothesis g = greedy_search(f, spec), b = beam_search(f, spec, 3);
    EXPECT_GE(b.score, g.score - 1e-12);
  }
}

TEST(Search, WideBeamIsExhaustive) {
  const std::size_t vocab = 3, max_len = 3, end = 2;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scorer f = table_scorer(vocab, seed);
    SearchSpec spec{{0}, end, max_len, {}};
    double best = -1e300;
    std::function<void(std::vector<std::size_t>, double)> walk = [&](std::vector<std::size_t> toks, double lp) {
      if (!toks.empty() && (toks.back() == end || toks.size() == max_len)) {
        best = std::max(best, normalized_score(lp, toks.size(), 1.0));
        return;
      }
      const auto l = masked_log_softmax(f(detail::with_prefix(spec.prefix, toks)), {});
      for (std::size_t id = 0; id < vocab; ++id) {
        auto next = toks;
        next.push_back(id);
        walk(next, lp + l[id]);
      }
    };
    walk({}, 0.0);
    EXPECT_NEAR(beam_search(f, spec, 27).score, best, 1e-12);
  }
}

TEST(Filters, NucleusAndTopK) {
  const std::vector<double> p = {0.5, 0.3, 0.15, 0.05};
  const auto n = nucleus_filter(p, 0.7);
  EXPECT_NEAR(n[0], 0.625, 1e-15);
  EXPECT_NEAR(n[1], 0.375, 1e-15);
  EXPECT_EQ(n[2], 0.0);
  const auto all = nucleus_filter(p, 1.0);
  EXPECT_NEAR(all[3], 0.05, 1e-15);
  const auto k1 = top_k_filter(p, 1);
  EXPECT_EQ(k1, (std::vector<double>{1, 0, 0, 0}));
  const auto tie = top_k_filter({0.25, 0.25, 0.25, 0.25}, 2);
  EXPECT_EQ(tie, (std::vector<double>{0.5, 0.5, 0, 0}));
  EXPECT_THROW(nucleus_filter(p, 0.0), std::invalid_argument);
  EXPECT_THROW(top_k_filter(p, 0), std::invalid_argument);
}

TEST(Filters, MaskedSoftmaxRenormalizes) {
  const auto lp = masked_log_softmax({1.0, 2.0, 3.0}, {true, false, true});
  EXPECT_TRUE(std::isinf(lp[1]));
  EXPECT_NEAR(std::exp(lp[0]) + std::exp(lp[2]), 1.0, 1e-15);
  EXPECT_THROW(masked_log_softmax({1.0}, {false}), std::logic_error);
}

TEST(ImageGeneration, BracketedAndExactLength) {
  const DualModel m = init_model(small_config(), 1);
  DecodeConfig cfg;
  cfg.strategy = Strategy::kNucleus;
  cfg.n_samples = 2;
  Rng rng(1);
  const std::vector<std::size_t> caption = encode_text("a red block at center", grammar_vocab());
  const auto out = generate_image(m, caption, {8, 8}, cfg, rng);
  ASSERT_EQ(out.size(), 2u);
  for (const auto& g : out) {
    EXPECT_EQ(g.tokens.size(), 66u);
    EXPECT_EQ(g.tokens.front(), SpecialTokens::kBoi);
    EXPECT_EQ(g.tokens.back(), SpecialTokens::kEoi);
    EXPECT_EQ(g.codes.size(), 64u);
    EXPECT_EQ(g.image.height(), 32u);
  }
  std::vector<ImageGrid> imgs{out[0].image, out[1].image};
  const auto r = rerank(m, caption, imgs);
  EXPECT_EQ(r.scores.size(), 2u);
  EXPECT_EQ(r.scores[r.index], std::max(r.scores[0], r.scores[1]));
}

TEST(Captioning, OnlyWordsAreEmitted) {
  const DualModel m = init_model(small_config(), 1);
  DecodeConfig cfg;
  cfg.beam_size = 2;
  cfg.max_len = 6;
  const auto caption = caption_image(m, m.featurizer().featurize(ImageGrid::filled(32, 32, kPalette[3])), cfg);
  EXPECT_LE(caption.size(), 6u);
  for (std::size_t id : caption) EXPECT_TRUE(m.tokens().is_word(id));
}
