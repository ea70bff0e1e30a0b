// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <iostream>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tsdiffuse/autograd.hpp"
#include "tsdiffuse/config.hpp"
#include "tsdiffuse/diffusion.hpp"
#include "tsdiffuse/error.hpp"
#include "tsdiffuse/model.hpp"
#include "tsdiffuse/records.hpp"
#include "tsdiffuse/rng.hpp"

namespace tsdiffuse {

/// Bias-corrected Adam over every tensor of a parameter store.
class Adam {
 public:
  Adam(const ParamStore& store, const TrainerConfig& cfg)
      : lr_(cfg.lr), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_eps) {
    for (const auto& p : store) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }

  void step(ParamStore& store, const GradStore& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& w = store[i].value;
      const auto& g = grads[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
        v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
        w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      }
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Hooks for progress reporting and checkpoint persistence.
struct TrainObserver {
  virtual ~TrainObserver() = default;
  virtual void on_step(std::uint64_t /*step*/, int /*epoch*/, double /*loss*/) {}
  /// `running_loss` is the mean of the most recent `running_window` step losses.
  virtual void on_epoch(int /*epoch*/, const Checkpoint& /*ckpt*/, double /*running_loss*/) {}
};

inline std::vector<TrainingExample> make_examples(std::span<const PairRecord> records, const TextToSeriesModel& model) {
  std::vector<TrainingExample> out;
  out.reserve(records.size());
  const auto L = static_cast<std::size_t>(model.config().length);
  for (const auto& r : records) {
    if (r.series.size() != L)
      throw ShapeError("record '" + r.id + "' has " + std::to_string(r.series.size()) + " values, expected " +
                       std::to_string(L));
    out.push_back({r.id, model.tokenize(r.text), r.series});
  }
  return out;
}

/// Runs the optimizer over `epochs` passes of shuffled mini-batches.
///
/// A fresh run builds the vocabulary from the record texts and draws the
/// initial weights from `rng`. With `resume`, architecture and vocabulary
/// come from the checkpoint, the step counter continues from it, and only
/// the trainer section of `config` is used. Adam moments restart from zero.
inline Checkpoint train(const RunConfig& config, std::span<const PairRecord> records, Rng& rng,
                        const Checkpoint* resume = nullptr, TrainObserver* observer = nullptr) {
  if (records.empty()) throw ConfigError("train: dataset is empty");
  config.validate();
  const TrainerConfig& tc = config.trainer;

  TextToSeriesModel model = [&] {
    if (resume) {
      Checkpoint c = *resume;
      c.config.trainer = tc;
      return TextToSeriesModel::from_checkpoint(c);
    }
    std::vector<std::string> texts;
    texts.reserve(records.size());
    for (const auto& r : records) texts.push_back(r.text);
    return TextToSeriesModel::initialized(config, build_vocab(texts, config.conditioner.vocab_size), rng);
  }();
  std::uint64_t step = resume ? resume->step : 0;
  const int first_epoch = resume ? resume->epoch : 0;
  if (tc.epochs == 0) return model.snapshot(step, first_epoch);

  const std::vector<TrainingExample> examples = make_examples(records, model);
  const NoiseSchedule schedule = build_schedule(model.config().schedule);
  Adam adam(model.params(), tc);
  GradStore grads(model.params());
  std::deque<double> window;
  double window_sum = 0.0;
  const auto batch = static_cast<std::size_t>(tc.batch);

  std::vector<std::size_t> order(examples.size());
  std::vector<TrainingExample> chunk;
  Checkpoint last;
  for (int e = 1; e <= tc.epochs; ++e) {
    const int epoch = first_epoch + e;
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      chunk.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + batch); ++k) chunk.push_back(examples[order[k]]);
      grads.zero();
      const double loss = training_loss(std::span<const TrainingExample>(chunk), model, schedule, rng, &grads);
      ++step;
      if (!std::isfinite(loss))
        throw NumericError("training loss became " + std::to_string(loss) + " at step " + std::to_string(step) +
                           " (epoch " + std::to_string(epoch) + ")");
      adam.step(model.params(), grads);
      window.push_back(loss);
      window_sum += loss;
      if (window.size() > static_cast<std::size_t>(tc.running_window)) {
        window_sum -= window.front();
        window.pop_front();
      }
      if (observer) observer->on_step(step, epoch, loss);
    }
    last = model.snapshot(step, epoch);
    if (observer) observer->on_epoch(epoch, last, window_sum / static_cast<double>(window.size()));
  }
  return last;
}

/// Reverse-process generation from a fixed checkpoint.
class Sampler {
 public:
  using WarningHandler = std::function<void(const std::string&)>;

  explicit Sampler(const Checkpoint& ckpt)
      : model_(TextToSeriesModel::from_checkpoint(ckpt)), schedule_(build_schedule(ckpt.config.schedule)) {}

  void set_warning_handler(WarningHandler h) { warn_ = std::move(h); }

  Series sample(std::string_view prompt, Rng& rng) const {
    const TokenSeq tokens = model_.tokenize(prompt);
    const bool any_word = std::any_of(tokens.ids.begin(), tokens.ids.end(), [](int id) { return id >= Vocab::kNumSpecial; });
    if (!any_word && warn_)
      warn_("prompt \"" + std::string(prompt) + "\" has no in-vocabulary words; conditioning on special tokens only");
    ag::Tape memory_tape;
    const TextMemory memory = model_.encode(memory_tape, tokens);
    const auto L = static_cast<std::size_t>(model_.config().length);
    std::vector<double> x = rng.normal_vector(L);
    for (int t = schedule_.steps(); t >= 1; --t) {
      ag::Tape tape;
      ag::Var eps = model_.predict_noise(tape, tape.constant(1, L, x), t, memory);
      x = reverse_step(x, t, eps.to_vector(), schedule_, rng);
    }
    return Series{std::move(x), std::nullopt};
  }

  const TextToSeriesModel& model() const { return model_; }

 private:
  TextToSeriesModel model_;
  NoiseSchedule schedule_;
  WarningHandler warn_ = [](const std::string& msg) { std::cerr << "warning: " << msg << "\n"; };
};

inline Series sample(std::string_view prompt, const Checkpoint& ckpt, Rng& rng) { return Sampler(ckpt).sample(prompt, rng); }

}  // namespace tsdiffuse
