// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>

#include "tsdiffuse/autograd.hpp"
#include "tsdiffuse/conditioner.hpp"
#include "tsdiffuse/config.hpp"
#include "tsdiffuse/denoiser.hpp"
#include "tsdiffuse/error.hpp"
#include "tsdiffuse/rng.hpp"

namespace tsdiffuse {

/// Everything needed to regenerate samples: configuration, vocabulary and
/// learned parameters. Parameter values are always float32-representable so
/// a saved file reproduces the in-memory state exactly.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint32_t format_version = kFormatVersion;
  RunConfig config;
  Vocab vocab;
  ParamStore params;
  std::uint64_t step = 0;
  int epoch = 0;
};

/// Text conditioner and denoising U-Net sharing one parameter store.
class TextToSeriesModel {
 public:
  TextToSeriesModel(RunConfig config, Vocab vocab) : config_(std::move(config)), vocab_(std::move(vocab)) {
    config_.validate();
    conditioner_ = Conditioner(params_, config_.conditioner, vocab_.size());
    denoiser_ = Denoiser(params_, config_.denoiser, static_cast<std::size_t>(config_.length), config_.conditioner.width);
  }

  static TextToSeriesModel initialized(const RunConfig& config, Vocab vocab, Rng& rng) {
    TextToSeriesModel m(config, std::move(vocab));
    m.conditioner_.init(m.params_, rng);
    m.denoiser_.init(m.params_, rng);
    return m;
  }

  static TextToSeriesModel from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.format_version != Checkpoint::kFormatVersion)
      throw IncompatibleVersionError("checkpoint format version " + std::to_string(ckpt.format_version) +
                                     " is not supported (expected " + std::to_string(Checkpoint::kFormatVersion) + ")");
    TextToSeriesModel m(ckpt.config, ckpt.vocab);
    if (ckpt.params.size() != m.params_.size())
      throw FormatError("checkpoint has " + std::to_string(ckpt.params.size()) + " tensors, model expects " +
                        std::to_string(m.params_.size()));
    for (auto& p : m.params_) {
      const Parameter* src = ckpt.params.find(p.name);
      if (!src) throw FormatError("checkpoint is missing tensor '" + p.name + "'");
      if (src->rows != p.rows || src->cols != p.cols) throw FormatError("checkpoint tensor '" + p.name + "' has wrong shape");
      p.value = src->value;
    }
    if (!m.params_.all_finite()) throw NumericError("checkpoint weights contain NaN or Inf");
    return m;
  }

  /// Copy of the current state with every parameter rounded to float32.
  Checkpoint snapshot(std::uint64_t step, int epoch) const {
    Checkpoint c;
    c.config = config_;
    c.vocab = vocab_;
    c.params = params_;
    for (auto& p : c.params)
      for (auto& v : p.value) v = static_cast<double>(static_cast<float>(v));
    c.step = step;
    c.epoch = epoch;
    return c;
  }

  TokenSeq tokenize(std::string_view text) const { return tsdiffuse::tokenize(text, vocab_, config_.conditioner.max_len); }

  TextMemory encode(ag::Tape& tape, const TokenSeq& tokens) const { return conditioner_.encode(tape, params_, tokens); }

  ag::Var predict_noise(ag::Tape& tape, ag::Var x_t, int t, const TextMemory& memory) const {
    return denoiser_.forward(tape, params_, x_t, t, memory);
  }

  const RunConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }
  const Conditioner& conditioner() const { return conditioner_; }
  const Denoiser& denoiser() const { return denoiser_; }

 private:
  RunConfig config_;
  Vocab vocab_;
  ParamStore params_;
  Conditioner conditioner_;
  Denoiser denoiser_;
};

}  // namespace tsdiffuse
