// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

// tsdiffuse forge|train|sample|eval

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tsdiffuse.hpp"

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Config file (JSON or key=value lines)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Run seed (overrides the config)");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--set", c.overrides, "Config override, e.g. --set trainer.epochs=2");
}

tsdiffuse::RunConfig resolve(const Common& c) {
  std::vector<std::string> overrides = c.overrides;
  if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
  return c.config_path.empty() ? tsdiffuse::parse_config("", overrides)
                               : tsdiffuse::load_config(c.config_path, overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-conditioned time-series diffusion toolkit"};
  app.require_subcommand(1);

  Common forge_c, train_c, sample_c, eval_c;
  std::optional<std::string> stock, ucr, truce;
  auto* forge = app.add_subcommand("forge", "Build the JSONL training corpus");
  add_common(forge, forge_c);
  forge->add_option("--stock", stock, "timestamp,value CSV file or directory of them");
  forge->add_option("--ucr", ucr, "Directory of *_TRAIN files");
  forge->add_option("--truce", truce, "JSONL of {series, captions}");

  std::string corpus;
  std::optional<std::string> resume;
  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  add_common(train, train_c);
  train->add_option("--corpus", corpus, "Corpus directory or *_train.jsonl file");
  train->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  std::string checkpoint, prompt;
  int n = 1;
  auto* sample = app.add_subcommand("sample", "Generate series for a prompt");
  add_common(sample, sample_c);
  sample->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  sample->add_option("--prompt", prompt, "Text description")->required();
  sample->add_option("-n", n, "Number of series")->check(CLI::PositiveNumber);

  std::string eval_ckpt, test;
  bool oracle = false;
  std::string types;
  auto* eval = app.add_subcommand("eval", "Score generated series against a test corpus");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->check(CLI::ExistingFile);
  eval->add_option("--test", test, "Corpus directory or *_test.jsonl file");
  eval->add_flag("--oracle", oracle, "Use ground truth as the generated series");
  eval->add_option("--types", types, "Comma-separated description types to include");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*forge) {
      const auto cfg = resolve(forge_c);
      tsdiffuse::ForgeInputs in;
      if (stock) in.stock = *stock;
      if (ucr) in.ucr = *ucr;
      if (truce) in.truce = *truce;
      tsdiffuse::cmd_forge(cfg, in, forge_c.out.empty() ? cfg.paths.corpus : forge_c.out, std::cout);
    } else if (*train) {
      const auto cfg = resolve(train_c);
      std::optional<tsdiffuse::fs::path> r;
      if (resume) r = *resume;
      const auto s = tsdiffuse::cmd_train(cfg, corpus.empty() ? cfg.paths.corpus : corpus,
                                          train_c.out.empty() ? cfg.paths.checkpoints : train_c.out, std::cout, r);
      std::cout << "trained to step " << s.steps << " (epoch " << s.epoch << ")\n";
    } else if (*sample) {
      const auto cfg = resolve(sample_c);
      tsdiffuse::cmd_sample(checkpoint, prompt, n, cfg.seed, sample_c.out.empty() ? cfg.paths.reports : sample_c.out,
                            std::cout);
    } else if (*eval) {
      const auto cfg = resolve(eval_c);
      tsdiffuse::EvalOptions opt;
      if (!eval_ckpt.empty()) opt.checkpoint = eval_ckpt;
      opt.oracle = oracle;
      if (!types.empty()) opt.types = tsdiffuse::parse_type_list(types);
      opt.seed = cfg.seed;
      tsdiffuse::cmd_eval(cfg, test.empty() ? cfg.paths.corpus : test, opt,
                          eval_c.out.empty() ? cfg.paths.reports : eval_c.out, std::cout);
    }
  } catch (const tsdiffuse::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const tsdiffuse::IncompatibleVersionError& e) {
    std::cerr << "incompatible checkpoint: " << e.what() << "\n";
    return 3;
  } catch (const tsdiffuse::FormatError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 3;
  } catch (const tsdiffuse::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
