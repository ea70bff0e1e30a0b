// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// The four pipeline stages behind the command-line tool. Each writes its
// artifacts under an output directory and stamps them with the hash of the
// configuration that produced them.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsdiffuse/checkpoint_io.hpp"
#include "tsdiffuse/config.hpp"
#include "tsdiffuse/dataset_forge.hpp"
#include "tsdiffuse/error.hpp"
#include "tsdiffuse/eval_harness.hpp"
#include "tsdiffuse/plot.hpp"
#include "tsdiffuse/records.hpp"
#include "tsdiffuse/rng.hpp"
#include "tsdiffuse/training.hpp"

namespace tsdiffuse {

namespace fs = std::filesystem;

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

inline std::string fmt_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// A corpus argument is a single JSONL file, or a directory whose files
/// ending in `suffix` are read in name order.
inline std::vector<PairRecord> read_corpus_arg(const fs::path& p, const std::string& suffix, std::size_t length) {
  std::vector<fs::path> files;
  if (fs::is_directory(p)) {
    for (const auto& e : fs::directory_iterator(p))
      if (e.is_regular_file() && e.path().filename().string().ends_with(suffix)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw FormatError("no *" + suffix + " files in " + p.string());
  } else {
    files.push_back(p);
  }
  std::vector<PairRecord> out;
  for (const auto& f : files) {
    auto part = read_corpus(f, length);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

/// TSDIFFUSE_THREADS caps the worker count; otherwise hardware concurrency.
inline unsigned worker_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TSDIFFUSE_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
  }
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// forge

struct ForgeInputs {
  std::optional<fs::path> stock;
  std::optional<fs::path> ucr;
  std::optional<fs::path> truce;
};

struct ForgeSummary {
  struct Counts {
    std::size_t series = 0, train_pairs = 0, test_pairs = 0;
  };
  std::map<std::string, Counts> by_source;
};

/// Writes `<source>_{train,test}.jsonl` for the synthetic corpus and every
/// supplied input, plus manifest.json. Input failures are collected and
/// reported together after the readable sources have been written.
inline ForgeSummary cmd_forge(const RunConfig& cfg, const ForgeInputs& inputs, const fs::path& out_dir,
                              std::ostream& log, Captioner* captioner = nullptr) {
  cfg.validate();
  fs::create_directories(out_dir);
  const auto L = static_cast<std::size_t>(cfg.length);
  TemplateCaptioner default_captioner;
  Captioner& cap = captioner ? *captioner : default_captioner;
  ForgeSummary summary;
  std::vector<std::string> errors;

  auto emit = [&](Source source, std::vector<PairRecord> records) {
    const std::string name(to_string(source));
    if (records.empty()) {
      errors.push_back(name + ": input produced no series");
      return;
    }
    const Split split = split_grouped(records, cfg.forge.test_fraction, derive_seed(cfg.seed, "split/" + name));
    std::set<std::string> ids;
    for (const auto& r : records) ids.insert(r.series_id());
    summary.by_source[name] = {ids.size(), split.train.size(), split.test.size()};
    write_corpus(out_dir / (name + "_train.jsonl"), split.train);
    write_corpus(out_dir / (name + "_test.jsonl"), split.test);
    log << name << ": " << ids.size() << " series, " << split.train.size() << " train pairs, " << split.test.size()
        << " test pairs\n";
  };
  auto guarded = [&](const fs::path& input, Source source, auto&& build) {
    try {
      emit(source, build());
    } catch (const std::exception& e) {
      errors.push_back(input.string() + ": " + e.what());
    }
  };

  emit(Source::synthetic, synthetic_records(L));
  if (inputs.stock) {
    guarded(*inputs.stock, Source::stock, [&] {
      Rng rng(derive_seed(cfg.seed, "forge/stock"));
      return stock_records(*inputs.stock, cfg.forge, L, rng, cap);
    });
  }
  if (inputs.ucr) {
    guarded(*inputs.ucr, Source::ucr,
            [&] { return ucr_records(*inputs.ucr, cfg.forge, L, derive_seed(cfg.seed, "forge/ucr"), cap); });
  }
  if (inputs.truce) {
    guarded(*inputs.truce, Source::truce, [&] { return truce_records(*inputs.truce, L); });
  }

  nlohmann::ordered_json manifest;
  manifest["config_hash"] = config_hash(cfg);
  manifest["config"] = to_json(cfg);
  for (const auto& [name, c] : summary.by_source)
    manifest["sources"][name] = {{"series", c.series}, {"train_pairs", c.train_pairs}, {"test_pairs", c.test_pairs}};
  detail::write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");

  if (!errors.empty()) {
    std::string msg = "forge could not read " + std::to_string(errors.size()) + " input(s):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw FormatError(msg);
  }
  return summary;
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  std::uint64_t steps = 0;
  int epoch = 0;
  std::vector<fs::path> epoch_checkpoints;
  double best_running_loss = std::numeric_limits<double>::infinity();
};

/// Trains on `corpus` and writes ckpt_epoch_<e>.tsd per epoch, best.tsd
/// (lowest running loss so far) and loss.csv. On resume the loss log is
/// appended to and the step counter continues from the checkpoint.
inline TrainSummary cmd_train(const RunConfig& cfg, const fs::path& corpus, const fs::path& out_dir, std::ostream& log,
                              const std::optional<fs::path>& resume = std::nullopt) {
  std::optional<Checkpoint> start;
  if (resume) start = load_checkpoint(*resume);
  const RunConfig& model_cfg = start ? start->config : cfg;
  const auto records = detail::read_corpus_arg(corpus, "_train.jsonl", static_cast<std::size_t>(model_cfg.length));
  if (records.empty()) throw FormatError("training corpus " + corpus.string() + " is empty");
  fs::create_directories(out_dir);

  const fs::path loss_path = out_dir / "loss.csv";
  const bool append = resume && fs::exists(loss_path);
  std::ofstream loss_csv(loss_path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
  if (!loss_csv) throw FormatError("cannot write " + loss_path.string());
  if (!append) loss_csv << "# config_hash=" << config_hash(cfg) << "\nstep,epoch,loss\n";

  struct Observer : TrainObserver {
    std::ofstream& csv;
    std::ostream& log;
    const fs::path& dir;
    TrainSummary summary;
    Observer(std::ofstream& c, std::ostream& l, const fs::path& d) : csv(c), log(l), dir(d) {}
    void on_step(std::uint64_t step, int epoch, double loss) override {
      csv << step << ',' << epoch << ',' << detail::fmt_value(loss) << '\n';
      summary.steps = step;
    }
    void on_epoch(int epoch, const Checkpoint& ckpt, double running) override {
      csv.flush();
      const fs::path p = dir / ("ckpt_epoch_" + std::to_string(epoch) + ".tsd");
      save_checkpoint(p, ckpt);
      summary.epoch_checkpoints.push_back(p);
      summary.epoch = epoch;
      if (running < summary.best_running_loss) {
        summary.best_running_loss = running;
        save_checkpoint(dir / "best.tsd", ckpt);
      }
      log << "epoch " << epoch << " step " << ckpt.step << " running loss " << running << "\n";
    }
  } observer(loss_csv, log, out_dir);

  Rng rng(derive_seed(cfg.seed, "train"));
  const Checkpoint final = train(cfg, records, rng, start ? &*start : nullptr, &observer);
  observer.summary.steps = final.step;
  observer.summary.epoch = final.epoch;
  return observer.summary;
}

// ---------------------------------------------------------------------------
// sample

/// Generates `n` series for one prompt. Sample k draws from
/// derive_seed(seed, "sample/<k>"). Writes samples.csv (one row per series)
/// and sample_<k>.svg.
inline std::vector<Series> cmd_sample(const fs::path& checkpoint, const std::string& prompt, int n,
                                      std::uint64_t seed, const fs::path& out_dir, std::ostream& log) {
  if (n < 1) throw ConfigError("sample count must be >= 1");
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const std::string hash = config_hash(ckpt.config);
  Sampler sampler(ckpt);
  sampler.set_warning_handler([&](const std::string& msg) { log << "warning: " << msg << "\n"; });
  fs::create_directories(out_dir);
  std::vector<Series> out;
  std::string csv = "# config_hash=" + hash + "\n";
  for (int k = 0; k < n; ++k) {
    Rng rng(derive_seed(seed, "sample/" + std::to_string(k)));
    Series s = sampler.sample(prompt, rng);
    for (std::size_t i = 0; i < s.values.size(); ++i) csv += (i ? "," : "") + detail::fmt_value(s.values[i]);
    csv += "\n";
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03d.svg", k);
    detail::write_text(out_dir / name, render_svg(s.values, prompt, hash));
    out.push_back(std::move(s));
  }
  detail::write_text(out_dir / "samples.csv", csv);
  log << "wrote " << n << " sample(s) to " << out_dir.string() << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::optional<fs::path> checkpoint;  // required unless oracle
  bool oracle = false;                 // generated := ground truth
  std::optional<std::set<DescType>> types;
  std::uint64_t seed = 0;
};

inline std::set<DescType> parse_type_list(const std::string& list) {
  std::set<DescType> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto dt = parse_desc_type(item);
    if (!dt) throw ConfigError("unknown description type '" + item + "'");
    out.insert(*dt);
  }
  if (out.empty()) throw ConfigError("empty description type list");
  return out;
}

/// Generates one series per test pair (seeded by pair id), then writes
/// report.csv and report.txt. Pairs are generated in parallel and
/// aggregated in id order.
inline EvalReport cmd_eval(const RunConfig& cfg, const fs::path& test_corpus, const EvalOptions& opt,
                           const fs::path& out_dir, std::ostream& log) {
  std::optional<Checkpoint> ckpt;
  if (!opt.oracle) {
    if (!opt.checkpoint) throw ConfigError("eval needs a checkpoint unless --oracle is given");
    ckpt = load_checkpoint(*opt.checkpoint);
  }
  const RunConfig& run_cfg = ckpt ? ckpt->config : cfg;
  auto records = detail::read_corpus_arg(test_corpus, "_test.jsonl", static_cast<std::size_t>(run_cfg.length));
  if (opt.types)
    std::erase_if(records, [&](const PairRecord& r) { return !opt.types->count(r.desc_type); });
  if (records.empty()) throw ConfigError("test set is empty");
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

  std::vector<EvalPair> pairs(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    pairs[i] = {records[i].id, std::string(to_string(records[i].desc_type)), {}, records[i].series};

  if (opt.oracle) {
    for (auto& p : pairs) p.generated = p.truth;
  } else {
    Sampler sampler(*ckpt);
    std::mutex log_mu;
    sampler.set_warning_handler([&](const std::string& msg) {
      std::lock_guard lock(log_mu);
      log << "warning: " << msg << "\n";
    });
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex fail_mu;
    auto work = [&] {
      for (std::size_t i = next++; i < pairs.size(); i = next++) {
        try {
          Rng rng(derive_seed(opt.seed, pairs[i].id));
          pairs[i].generated = sampler.sample(records[i].text, rng).values;
        } catch (...) {
          std::lock_guard lock(fail_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    };
    const unsigned n_workers = std::min<std::size_t>(detail::worker_count(), pairs.size());
    std::vector<std::thread> workers;
    for (unsigned w = 1; w < n_workers; ++w) workers.emplace_back(work);
    work();
    for (auto& t : workers) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  const EvalReport rep = evaluate(pairs, opt.types);
  const std::string hash = config_hash(run_cfg);
  fs::create_directories(out_dir);
  detail::write_text(out_dir / "report.csv", report_csv(rep, hash));
  const std::string table = report_table(rep, hash);
  detail::write_text(out_dir / "report.txt", table);
  log << table;
  return rep;
}

}  // namespace tsdiffuse
