// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "dualgen/gradcheck.hpp"
#include "dualgen/model.hpp"
#include "dualgen/objectives.hpp"

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

std::vector<double> row(const ad::Tensor& t, std::size_t r) {
  const auto v = t.values().subspan(r * t.cols(), t.cols());
  return {v.begin(), v.end()};
}

}  // namespace

TEST(ModelConfig, ToyParameterCount) {
  const DualModel m = init_model(ModelConfig{}, 1);
  EXPECT_EQ(m.tokens().size(), 89u);
  EXPECT_EQ(m.parameter_count(), 251673u);
  EXPECT_EQ(parameter_count_formula(ModelConfig{}), 251673u);
}

TEST(ModelConfig, FormulaMatchesOtherShapes) {
  for (const ModelConfig& c : {small_config(), gradcheck_config()})
    EXPECT_EQ(init_model(c, 1).parameter_count(), parameter_count_formula(c));
}

TEST(ModelConfig, RejectsIndivisibleHeads) {
  ModelConfig c;
  c.d_model = 63;
  c.n_heads = 4;
  EXPECT_THROW(init_model(c, 1), ConfigError);
}

TEST(ModelInit, SeedDeterminesParameters) {
  const DualModel a = init_model(small_config(), 5), b = init_model(small_config(), 5), c = init_model(small_config(), 6);
  bool all_equal = true, any_diff = false;
  for (std::size_t k = 0; k < a.parameters().size(); ++k) {
    const auto va = a.parameters()[k].tensor.values(), vb = b.parameters()[k].tensor.values(),
               vc = c.parameters()[k].tensor.values();
    all_equal &= std::equal(va.begin(), va.end(), vb.begin());
    any_diff |= !std::equal(va.begin(), va.end(), vc.begin());
  }
  EXPECT_TRUE(all_equal);
  EXPECT_TRUE(any_diff);
}

TEST(ModelInit, CloneHasIndependentStorage) {
  const DualModel a = init_model(small_config(), 5);
  const DualModel b = a.clone();
  ad::Tensor(b.parameters()[0].tensor).mutable_values()[0] += 1.0;
  EXPECT_NE(a.parameters()[0].tensor.values()[0], b.parameters()[0].tensor.values()[0]);
}

TEST(Encode, SequenceLengths) {
  const DualModel m = init_model(small_config(), 1);
  const Featurizer& f = m.featurizer();
  const PatchSequence img = f.featurize(ImageGrid::filled(32, 32, kPalette[1]));
  const std::vector<std::size_t> text = {8, 9, 10};
  EXPECT_EQ(m.encode(&text, &img).rows(), 64u + 3u);
  EXPECT_EQ(m.encode(&text, nullptr).rows(), 1u + 3u);
  EXPECT_EQ(m.encode(nullptr, &img).rows(), 64u + 1u);
  EXPECT_EQ(m.encode(&text, &img).cols(), 16u);
  EXPECT_THROW(m.encode(nullptr, nullptr), std::invalid_argument);
  const std::vector<std::size_t> too_long(25, 8);
  EXPECT_THROW(m.encode(&too_long, nullptr), std::invalid_argument);
  const std::vector<std::size_t> visual_in_text = {8, 30};
  EXPECT_THROW(m.encode(&visual_in_text, nullptr), std::exception);
}

TEST(Encode, MaskedPatchesUseMaskEmbedding) {
  const DualModel m = init_model(small_config(), 1);
  const PatchSequence a = m.featurizer().featurize(ImageGrid::filled(32, 32, kPalette[1]));
  const PatchSequence b = m.featurizer().featurize(ImageGrid::filled(32, 32, kPalette[2]));
  PatchMask all{a.grid, std::vector<bool>(64, true)};
  const std::vector<std::size_t> text = {8};
  // Fully masked images carry no information about their pixels.
  EXPECT_EQ(row(m.encode(&text, &a, &all), 0), row(m.encode(&text, &b, &all), 0));
  EXPECT_NE(row(m.encode(&text, &a), 0), row(m.encode(&text, &b), 0));
}

TEST(Decode, LogitsShapeAndCausality) {
  const DualModel m = init_model(small_config(), 1);
  const std::vector<std::size_t> text = {8, 9};
  const ad::Tensor enc = m.encode(&text, nullptr);
  const std::vector<std::size_t> a = {1, 10, 11, 12}, b = {1, 10, 11, 40};
  const ad::Tensor la = m.decode_forward(a, enc), lb = m.decode_forward(b, enc);
  EXPECT_EQ(la.shape(), (ad::Shape{4, 89}));
  // Vectorized GEMM may differ in the last ulp between the two runs.
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 89; ++c) EXPECT_NEAR(la.at(t, c), lb.at(t, c), 1e-12);
  double changed = 0;
  for (std::size_t c = 0; c < 89; ++c) changed = std::max(changed, std::abs(la.at(3, c) - lb.at(3, c)));
  EXPECT_GT(changed, 1e-6);
  const std::vector<std::size_t> bad = {1, 89};
  EXPECT_THROW(m.decode_forward(bad, enc), std::exception);
}

TEST(Decode, InitialLossNearUniform) {
  const DualModel m = init_model(ModelConfig{}, 7);
  const auto data = gen_dataset(4, 1, grammar_vocab());
  Rng rng(1);
  for (TaskKind k : {TaskKind::kMtCaption, TaskKind::kMtT2i}) {
    const double nll = task_loss(build_task_batch(data, k, rng, m), m).item();
    EXPECT_NEAR(nll, std::log(89.0), 0.1 * std::log(89.0)) << task_name(k);
  }
}

TEST(Decode, HeadSharesEmbeddingTables) {
  // Gradient of the head reaches text_embed and visual_embed even for rows
  // that never appear as inputs.
  const DualModel m = init_model(small_config(), 1);
  const std::vector<std::size_t> text = {8};
  const std::vector<std::size_t> in = {1};
  const std::size_t target[] = {30};
  m.zero_grad();
  ad::backward(ad::cross_entropy_logits(m.decode_forward(in, m.encode(&text, nullptr)), target));
  const auto g = m.visual_embed().grad();
  const std::size_t row30 = 30 - m.tokens().text_rows();
  double mag = 0;
  for (std::size_t c = 0; c < 16; ++c) mag += std::abs(g[row30 * 16 + c]);
  EXPECT_GT(mag, 0.0);
}
