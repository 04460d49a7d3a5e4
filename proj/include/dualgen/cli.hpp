// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line front end. Every subcommand prints its resolved RunConfig
// before doing any work. Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dualgen/bleu.hpp"
#include "dualgen/checkpoint.hpp"
#include "dualgen/config.hpp"
#include "dualgen/decode.hpp"
#include "dualgen/gradcheck.hpp"
#include "dualgen/train.hpp"

namespace dualgen {

namespace cli_detail {

struct CommonOptions {
  std::string config_file;
  std::vector<std::string> overrides;
  bool no_image_loss = false;
  bool no_text_loss = false;
  bool no_commitment = false;
};

inline void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_file, "key = value config file");
  cmd->add_option("--set", o.overrides, "override one key, as key=value (repeatable)");
  cmd->add_flag("--no-image-loss", o.no_image_loss, "drop image-target losses (inpainting, text-to-image)");
  cmd->add_flag("--no-text-loss", o.no_text_loss, "drop text-target losses (infilling, captioning)");
  cmd->add_flag("--no-commitment", o.no_commitment, "drop the commitment loss");
}

inline std::string model_keys(const RunConfig& c) {
  std::string s;
  for (const char* k : {"d_model", "n_layers_enc", "n_layers_dec", "n_heads", "d_ff", "visual_vocab", "max_text_len",
                        "max_patches", "patch_size", "d_feat", "d_code", "seed"})
    s += c.get(k) + ' ';
  return s;
}

// Layers the config file, --set overrides and ablation flags over `base`.
inline RunConfig resolve(const CommonOptions& o, RunConfig base, bool base_from_checkpoint) {
  RunConfig cfg = base;
  if (!o.config_file.empty()) {
    std::ifstream is(o.config_file);
    if (!is) throw std::runtime_error("cannot read config " + o.config_file);
    cfg = parse_run_config(is, cfg);
  }
  for (const auto& a : o.overrides) apply_override(cfg, a);
  if (o.no_image_loss) cfg.pretrain.switches.image = false;
  if (o.no_text_loss) cfg.pretrain.switches.text = false;
  if (o.no_commitment) cfg.pretrain.switches.commitment = false;
  cfg.validate();
  if (base_from_checkpoint && model_keys(cfg) != model_keys(base))
    throw ConfigParseError("model shape keys and seed cannot be changed for an existing checkpoint");
  return cfg;
}

inline void print_config(std::ostream& out, const RunConfig& cfg) {
  out << "# resolved config\n" << cfg.to_string() << "# end config\n";
}

inline std::vector<PreparedExample> load_prepared(const std::string& path, const RunConfig& cfg,
                                                  const DualModel& model) {
  return prepare_dataset(load_dataset(path, grammar_vocab(), cfg.data), model);
}

// Training side of the split, or everything when the split leaves it empty.
inline std::vector<PreparedExample> train_part(const std::vector<PreparedExample>& all, const RunConfig& cfg) {
  auto [train, val] = split_dataset(all, cfg.val_fraction);
  return train.empty() ? all : train;
}
inline std::vector<PreparedExample> val_part(const std::vector<PreparedExample>& all, const RunConfig& cfg) {
  auto [train, val] = split_dataset(all, cfg.val_fraction);
  return val.empty() ? all : val;
}

}  // namespace cli_detail

inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Image-to-text and text-to-image generation on synthetic block scenes", "dualgen"};
  app.require_subcommand(1);

  CommonOptions common;
  std::string data_path, out_path, ckpt_path, resume_path, log_path, task_name_arg, image_path, spec_arg, caption_arg,
      out_dir, strategy_arg = "nucleus";
  std::size_t n = 1000, steps = 0, limit = 0;
  std::optional<std::size_t> n_images;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic caption/spec dataset");
  add_common(gen, common);
  gen->add_option("--n", n, "number of pairs")->check(CLI::PositiveNumber);
  gen->add_option("--out", out_path, "dataset file")->required();

  auto* pre = app.add_subcommand("pretrain", "mixed-objective pre-training");
  add_common(pre, common);
  pre->add_option("--data", data_path, "dataset file")->required();
  pre->add_option("--steps", steps, "optimizer steps to run");
  pre->add_option("--out", out_path, "checkpoint to write")->required();
  pre->add_option("--resume", resume_path, "checkpoint to continue from");
  pre->add_option("--log", log_path, "training log (tab separated)");

  auto* ft = app.add_subcommand("finetune", "single-task fine-tuning");
  add_common(ft, common);
  ft->add_option("--ckpt", ckpt_path, "starting checkpoint")->required();
  ft->add_option("--data", data_path, "dataset file")->required();
  ft->add_option("--task", task_name_arg, "mt_caption or mt_t2i")->required();
  ft->add_option("--out", out_path, "checkpoint to write")->required();
  ft->add_option("--log", log_path, "training log (tab separated)");

  auto* cap = app.add_subcommand("caption", "caption one image");
  add_common(cap, common);
  cap->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  auto* img_opt = cap->add_option("--image", image_path, "image file");
  auto* spec_opt = cap->add_option("--spec", spec_arg, "block spec, e.g. red@top_left;blue@center");
  img_opt->excludes(spec_opt);

  auto* imag = app.add_subcommand("imagine", "sample images for a caption and rerank them");
  add_common(imag, common);
  imag->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  imag->add_option("--caption", caption_arg, "caption text")->required();
  imag->add_option("--n", n_images, "number of samples (default: n_samples)")->check(CLI::PositiveNumber);
  imag->add_option("--strategy", strategy_arg, "nucleus, topk, full or greedy");
  imag->add_option("--out-dir", out_dir, "directory for sample_XX.img files")->required();

  auto* ev = app.add_subcommand("eval", "held-out NLL per task plus captioning BLEU-4 and exact match");
  add_common(ev, common);
  ev->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  ev->add_option("--data", data_path, "dataset file")->required();
  ev->add_option("--limit", limit, "caption at most this many held-out pairs (0 = all)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every step objective on a tiny model");
  add_common(gc, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code != 0) err << app.help();
    return code == 0 ? 0 : 2;
  }

  try {
    const TextVocab vocab = grammar_vocab();
    if (gen->parsed()) {
      const RunConfig cfg = resolve(common, RunConfig{}, false);
      print_config(out, cfg);
      const auto data = gen_dataset(n, cfg.seed, vocab, cfg.data);
      std::ostringstream os;
      write_dataset(os, data, vocab);
      write_file_atomic(out_path, os.str());
      out << "wrote " << data.size() << " pairs to " << out_path << "\n";
      return 0;
    }

    if (pre->parsed()) {
      RunConfig cfg;
      TrainState state;
      if (!resume_path.empty()) {
        Checkpoint ck = load_checkpoint(resume_path);
        cfg = resolve(common, ck.config, true);
        state = std::move(ck.state);
        state.optim.cfg = cfg.adam;
      } else {
        cfg = resolve(common, RunConfig{}, false);
        state = make_train_state(cfg.model, cfg.adam, cfg.seed);
      }
      print_config(out, cfg);
      const auto all = load_prepared(data_path, cfg, state.model);
      const auto train = train_part(all, cfg);
      std::unique_ptr<std::ofstream> log;
      if (!log_path.empty()) log = std::make_unique<std::ofstream>(log_path, std::ios::app);
      const auto rows = pretrain(train, state, steps, cfg.pretrain, log.get());
      save_checkpoint(out_path, cfg, state);
      out << "trained " << rows.size() << " steps on " << train.size() << " pairs; step " << state.step << "; wrote "
          << out_path << "\n";
      if (!rows.empty()) out << "last\t" << format_log_row(rows.back()) << "\n";
      return 0;
    }

    // Remaining commands start from a checkpoint.
    Checkpoint ck;
    RunConfig cfg;
    if (!gc->parsed()) {
      ck = load_checkpoint(ckpt_path);
      cfg = resolve(common, ck.config, true);
    } else {
      cfg = resolve(common, RunConfig{}, false);
    }

    if (ft->parsed()) {
      const TaskKind task = parse_task(task_name_arg);
      print_config(out, cfg);
      const auto all = load_prepared(data_path, cfg, ck.state.model);
      const auto train = train_part(all, cfg);
      FinetuneConfig fc;
      fc.epochs = cfg.finetune_epochs;
      fc.lr = cfg.finetune_lr;
      fc.batch_size = cfg.pretrain.batch_size;
      fc.beta = cfg.pretrain.beta;
      fc.commitment = cfg.pretrain.switches.commitment;
      fc.corruption = cfg.pretrain.corruption;
      std::unique_ptr<std::ofstream> log;
      if (!log_path.empty()) log = std::make_unique<std::ofstream>(log_path, std::ios::app);
      const auto rows = finetune(train, ck.state, task, fc, log.get());
      save_checkpoint(out_path, cfg, ck.state);
      out << "fine-tuned " << task_name(task) << " for " << rows.size() << " steps at lr "
          << ck.state.optim.cfg.lr << "; wrote " << out_path << "\n";
      return 0;
    }

    if (cap->parsed()) {
      print_config(out, cfg);
      ImageGrid img;
      if (!image_path.empty()) img = load_image(image_path);
      else if (!spec_arg.empty()) img = render_blocks(parse_spec_string(spec_arg), cfg.data);
      else throw CLI::RequiredError("--image or --spec");
      Rng rng(cfg.seed);
      const auto words = caption_image(ck.state.model, ck.state.model.featurizer().featurize(img), cfg.decode, &rng);
      out << "caption: " << decode_text(words, vocab) << "\n";
      return 0;
    }

    if (imag->parsed()) {
      cfg.decode.strategy = parse_strategy(strategy_arg);
      if (n_images) cfg.decode.n_samples = *n_images;
      cfg.validate();
      print_config(out, cfg);
      const auto caption = encode_text(caption_arg, vocab);
      const std::size_t side = cfg.data.image_size / cfg.model.patch_size;
      Rng rng(cfg.seed);
      const auto samples = generate_image(ck.state.model, caption, GridDims{side, side}, cfg.decode, rng);
      std::filesystem::create_directories(out_dir);
      std::vector<ImageGrid> images;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        std::ostringstream name;
        name << "sample_" << std::setw(2) << std::setfill('0') << i << ".img";
        const std::string path = (std::filesystem::path(out_dir) / name.str()).string();
        std::ostringstream os;
        write_image(os, samples[i].image);
        write_file_atomic(path, os.str());
        out << "wrote " << path << "\n";
        images.push_back(samples[i].image);
      }
      const RerankResult r = rerank(ck.state.model, caption, images);
      out << "rerank choice: " << r.index << "\n";
      return 0;
    }

    if (ev->parsed()) {
      print_config(out, cfg);
      const auto all = load_prepared(data_path, cfg, ck.state.model);
      const auto val = val_part(all, cfg);
      out << "held-out pairs: " << val.size() << "\n";
      for (int k = 0; k < 4; ++k) {
        const auto kind = static_cast<TaskKind>(k);
        out << "nll\t" << task_name(kind) << "\t"
            << evaluate_task(val, ck.state.model, kind, cfg.seed, cfg.pretrain.corruption) << "\n";
      }
      const std::size_t m = limit == 0 ? val.size() : std::min(limit, val.size());
      double bleu = 0.0;
      std::size_t exact = 0;
      Rng rng(cfg.seed);
      for (std::size_t i = 0; i < m; ++i) {
        const auto words = caption_image(ck.state.model, val[i].image, cfg.decode, &rng);
        bleu += bleu4(words, {val[i].caption});
        exact += words == val[i].caption;
      }
      out << "caption\tbleu4\t" << (m ? bleu / static_cast<double>(m) : 0.0) << "\texact\t" << exact << "/" << m
          << "\n";
      return 0;
    }

    if (gc->parsed()) {
      print_config(out, cfg);
      bool ok = true;
      for (int k = -1; k < 4; ++k) {
        const auto kind = k < 0 ? std::nullopt : std::optional<TaskKind>(static_cast<TaskKind>(k));
        const auto r = gradcheck_step(kind, cfg.seed, 1e-5, 1e-5, cfg.pretrain.alpha, cfg.pretrain.beta);
        const bool pass = r.max_rel_error < 1e-4;
        ok = ok && pass;
        out << (kind ? task_name(*kind) : "mixed") << "\tmax_rel_error\t" << r.max_rel_error << "\tchecked\t"
            << r.checked << "\t" << (pass ? "ok" : "FAIL") << "\n";
      }
      return ok ? 0 : 1;
    }
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  } catch (const ConfigParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace dualgen
