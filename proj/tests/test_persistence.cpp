// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dualgen/checkpoint.hpp"
#include "dualgen/cli.hpp"
#include "dualgen/config.hpp"

using namespace dualgen;
namespace fs = std::filesystem;

namespace {

RunConfig small_run() {
  RunConfig c;
  c.set("d_model", "16");
  c.set("n_layers_enc", "1");
  c.set("n_layers_dec", "1");
  c.set("n_heads", "2");
  c.set("d_ff", "32");
  c.validate();
  return c;
}

TrainState trained_state(const RunConfig& cfg, std::size_t steps) {
  TrainState s = make_train_state(cfg.model, cfg.adam, cfg.seed);
  const auto data = prepare_dataset(gen_dataset(6, 1, grammar_vocab()), s.model);
  PretrainConfig p = cfg.pretrain;
  p.batch_size = 3;
  pretrain(data, s, steps, p);
  return s;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dualgen_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "dualgen");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

std::vector<std::string> small_sets() {
  return {"--set", "d_model=16", "--set", "n_layers_enc=1", "--set", "n_layers_dec=1",
          "--set", "n_heads=2",   "--set", "d_ff=32"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(Config, RoundTripThroughText) {
  RunConfig c = small_run();
  c.set("alpha", "0.125");
  c.set("loss_commitment", "false");
  c.set("strategy", "topk");
  const RunConfig back = parse_run_config(c.to_string());
  EXPECT_EQ(back.to_string(), c.to_string());
  EXPECT_EQ(back.pretrain.alpha, 0.125);
  EXPECT_FALSE(back.pretrain.switches.commitment);
  EXPECT_EQ(back.decode.strategy, Strategy::kTopK);
}

TEST(Config, DefaultsAndComments) {
  const RunConfig c = parse_run_config("# comment\n\nalpha = 0.1  # trailing\n");
  EXPECT_EQ(c.pretrain.alpha, 0.1);
  EXPECT_EQ(c.pretrain.beta, 1.0);
  EXPECT_EQ(c.model.text_vocab, 17u);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_run_config("alpah = 0.1\n"), ConfigParseError);
  EXPECT_THROW(parse_run_config("alpha 0.1\n"), ConfigParseError);
  EXPECT_THROW(parse_run_config("alpha = fast\n"), ConfigParseError);
  EXPECT_THROW(parse_run_config("d_model = 63\n"), ConfigParseError);
  EXPECT_THROW(parse_run_config("image_size = 30\n"), ConfigParseError);
  EXPECT_THROW(parse_run_config("p_dae = 1.5\n"), ConfigParseError);
  RunConfig c;
  EXPECT_THROW(apply_override(c, "alpha"), ConfigParseError);
  EXPECT_NO_THROW(apply_override(c, "alpha=0.3"));
  EXPECT_EQ(c.pretrain.alpha, 0.3);
}

TEST(Checkpoint, SaveLoadIsBitwise) {
  const RunConfig cfg = small_run();
  const TrainState s = trained_state(cfg, 2);
  const std::string bytes = serialize_checkpoint(cfg, s);
  const Checkpoint ck = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(ck.config, ck.state), bytes);
  EXPECT_EQ(ck.state.step, 2u);
  EXPECT_EQ(ck.state.optim.step, 2u);
  EXPECT_TRUE(ck.state.rng == s.rng);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const RunConfig cfg = small_run();
  const TrainState straight = trained_state(cfg, 4);
  TrainState half = trained_state(cfg, 2);
  Checkpoint ck = deserialize_checkpoint(serialize_checkpoint(cfg, half));
  const auto data = prepare_dataset(gen_dataset(6, 1, grammar_vocab()), ck.state.model);
  PretrainConfig p = cfg.pretrain;
  p.batch_size = 3;
  pretrain(data, ck.state, 2, p);
  EXPECT_EQ(serialize_checkpoint(cfg, ck.state), serialize_checkpoint(cfg, straight));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const RunConfig cfg = small_run();
  const std::string bytes = serialize_checkpoint(cfg, trained_state(cfg, 0));
  EXPECT_THROW(deserialize_checkpoint("NOTACKPT" + bytes), BadMagicError);
  EXPECT_THROW(deserialize_checkpoint(""), BadMagicError);
  std::string v2 = bytes;
  v2[sizeof kCheckpointMagic - 1] = 2;
  EXPECT_THROW(deserialize_checkpoint(v2), VersionMismatchError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 5)), TruncatedCheckpointError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchIsReported) {
  // Same parameter names, but the stored config claims a wider model.
  const RunConfig cfg = small_run();
  RunConfig wide = cfg;
  wide.set("d_ff", "48");
  std::string bytes = serialize_checkpoint(cfg, trained_state(cfg, 0));
  const std::string a = cfg.to_string(), b = wide.to_string();
  ASSERT_EQ(a.size(), b.size());
  bytes.replace(bytes.find(a), a.size(), b);
  try {
    deserialize_checkpoint(bytes);
    FAIL();
  } catch (const ShapeMismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("ff.w1"), std::string::npos);
  }
}

TEST(Checkpoint, FileRoundTrip) {
  TempDir dir;
  const RunConfig cfg = small_run();
  const TrainState s = trained_state(cfg, 1);
  save_checkpoint(dir / "a.ckpt", cfg, s);
  EXPECT_FALSE(fs::exists(dir / "a.ckpt.tmp"));
  EXPECT_EQ(serialize_checkpoint(cfg, load_checkpoint(dir / "a.ckpt").state), serialize_checkpoint(cfg, s));
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
}

TEST(Cli, UsageErrors) {
  std::string err;
  EXPECT_EQ(run_cli({"frobnicate"}, nullptr, &err), 2);
  EXPECT_EQ(run_cli({}, nullptr, &err), 2);
  EXPECT_EQ(run_cli({"pretrain", "--data", "x"}, nullptr, &err), 2);
  EXPECT_EQ(run_cli({"gen-data", "--out", "/tmp/x", "--set", "nonsense=1"}, nullptr, &err), 2);
  EXPECT_NE(err.find("nonsense"), std::string::npos);
  EXPECT_EQ(run_cli({"--help"}), 0);
}

TEST(Cli, EndToEndWorkflow) {
  TempDir dir;
  std::string out, err;
  ASSERT_EQ(run_cli({"gen-data", "--n", "12", "--out", dir / "d.tsv"}, &out, &err), 0) << err;
  EXPECT_NE(out.find("# resolved config"), std::string::npos);

  // Zero steps writes the initial model.
  ASSERT_EQ(run_cli(cat({"pretrain", "--data", dir / "d.tsv", "--steps", "0", "--out", dir / "init.ckpt"}, small_sets()),
                    &out, &err),
            0)
      << err;
  const Checkpoint init = load_checkpoint(dir / "init.ckpt");
  const RunConfig cfg = small_run();
  const TrainState fresh = make_train_state(cfg.model, cfg.adam, cfg.seed);
  EXPECT_EQ(serialize_checkpoint(init.config, init.state), serialize_checkpoint(init.config, fresh));

  ASSERT_EQ(run_cli(cat({"pretrain", "--data", dir / "d.tsv", "--steps", "2", "--out", dir / "p.ckpt", "--log",
                         dir / "log.tsv", "--set", "batch_size=2", "--no-commitment"},
                        small_sets()),
                    &out, &err),
            0)
      << err;
  std::ifstream log(dir / "log.tsv");
  std::size_t lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  EXPECT_EQ(lines, 2u);

  // Model keys cannot change on resume.
  EXPECT_EQ(run_cli({"pretrain", "--data", dir / "d.tsv", "--resume", dir / "p.ckpt", "--out", dir / "q.ckpt", "--set",
                     "d_model=32"},
                    &out, &err),
            2);

  ASSERT_EQ(run_cli({"finetune", "--ckpt", dir / "p.ckpt", "--data", dir / "d.tsv", "--task", "mt_caption", "--out",
                     dir / "f.ckpt", "--set", "batch_size=4"},
                    &out, &err),
            0)
      << err;
  EXPECT_NE(out.find("fine-tuned mt_caption"), std::string::npos);

  ASSERT_EQ(run_cli({"caption", "--ckpt", dir / "f.ckpt", "--spec", "red@top_left", "--set", "beam_size=2"}, &out, &err),
            0)
      << err;
  EXPECT_NE(out.find("caption:"), std::string::npos);

  ASSERT_EQ(run_cli({"imagine", "--ckpt", dir / "f.ckpt", "--caption", "a red block at center", "--n", "2",
                     "--out-dir", dir / "imgs"},
                    &out, &err),
            0)
      << err;
  EXPECT_TRUE(fs::exists(dir / "imgs/sample_01.img"));
  EXPECT_EQ(load_image(dir / "imgs/sample_00.img").height(), 32u);
  EXPECT_NE(out.find("rerank choice: "), std::string::npos);

  ASSERT_EQ(run_cli({"eval", "--ckpt", dir / "f.ckpt", "--data", dir / "d.tsv", "--limit", "2", "--set", "beam_size=1"},
                    &out, &err),
            0)
      << err;
  EXPECT_NE(out.find("nll\tmt_t2i\t"), std::string::npos);
  EXPECT_NE(out.find("caption\tbleu4\t"), std::string::npos);

  EXPECT_EQ(run_cli({"caption", "--ckpt", dir / "missing.ckpt", "--spec", "red@center"}, &out, &err), 1);
  EXPECT_EQ(run_cli({"imagine", "--ckpt", dir / "f.ckpt", "--caption", "a purple block", "--out-dir", dir / "x"}, &out,
                    &err),
            1);
}
