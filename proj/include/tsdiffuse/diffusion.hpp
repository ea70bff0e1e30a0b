// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Noise schedule, forward (noising) and reverse (denoising) steps, and the
// noise-prediction training objective.

#include <cmath>
#include <concepts>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsdiffuse/autograd.hpp"
#include "tsdiffuse/conditioner.hpp"
#include "tsdiffuse/config.hpp"
#include "tsdiffuse/error.hpp"
#include "tsdiffuse/rng.hpp"

namespace tsdiffuse {

/// Affine map back to source units: source = offset + scale * normalized.
struct Denorm {
  double offset = 0.0;
  double scale = 1.0;
  bool degenerate = false;  // constant input, scale is 0
};

struct Series {
  std::vector<double> values;
  std::optional<Denorm> denorm;

  std::size_t size() const { return values.size(); }
  bool finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

/// Per-step coefficients. Steps are 1-based: step t uses index t-1.
class NoiseSchedule {
 public:
  /// Linearly spaced betas from beta_start to beta_end inclusive.
  static NoiseSchedule linear(int steps, double beta_start, double beta_end) {
    validate_schedule(steps, beta_start, beta_end);
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i)
      betas[static_cast<std::size_t>(i)] =
          steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (steps - 1);
    if (steps > 1) betas.back() = beta_end;
    return from_betas(std::move(betas));
  }

  static NoiseSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ConfigError("noise schedule needs at least one step");
    NoiseSchedule s;
    double bar = 1.0;
    for (double b : betas) {
      if (!(b > 0.0 && b < 1.0)) throw ConfigError("every beta must lie in (0, 1), got " + std::to_string(b));
      s.alphas_.push_back(1.0 - b);
      bar *= 1.0 - b;
      s.alpha_bars_.push_back(bar);
    }
    s.betas_ = std::move(betas);
    return s;
  }

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_[index(t)]; }
  double alpha(int t) const { return alphas_[index(t)]; }
  double alpha_bar(int t) const { return alpha_bars_[index(t)]; }
  std::span<const double> betas() const { return betas_; }
  std::span<const double> alphas() const { return alphas_; }
  std::span<const double> alpha_bars() const { return alpha_bars_; }

  void check_step(int t) const {
    if (t < 1 || t > steps())
      throw ShapeError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }

 private:
  std::size_t index(int t) const {
    check_step(t);
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> betas_, alphas_, alpha_bars_;
};

inline NoiseSchedule build_schedule(int steps, double beta_start, double beta_end) {
  return NoiseSchedule::linear(steps, beta_start, beta_end);
}

inline NoiseSchedule build_schedule(const ScheduleConfig& c) { return build_schedule(c.steps, c.beta_start, c.beta_end); }

/// sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps.
inline std::vector<double> forward_sample(std::span<const double> x0, std::span<const double> eps, double alpha_bar) {
  if (x0.size() != eps.size()) throw ShapeError("forward_sample: noise length differs from series length");
  const double a = std::sqrt(alpha_bar), s = std::sqrt(1.0 - alpha_bar);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + s * eps[i];
  return out;
}

inline Series forward_sample(const Series& x0, int t, std::span<const double> eps, const NoiseSchedule& schedule) {
  return Series{forward_sample(x0.values, eps, schedule.alpha_bar(t)), x0.denorm};
}

/// One Markov noising step: sqrt(alpha) * x + sqrt(1 - alpha) * z.
inline std::vector<double> forward_step(std::span<const double> x_prev, double alpha, Rng& rng) {
  const double a = std::sqrt(alpha), s = std::sqrt(1.0 - alpha);
  std::vector<double> out(x_prev.size());
  for (std::size_t i = 0; i < x_prev.size(); ++i) out[i] = a * x_prev[i] + s * rng.normal();
  return out;
}

inline Series forward_step(const Series& x_prev, int t, const NoiseSchedule& schedule, Rng& rng) {
  return Series{forward_step(x_prev.values, schedule.alpha(t), rng), x_prev.denorm};
}

struct StepCoefficients {
  double alpha;
  double beta;
  double alpha_bar;
};

/// mu = (x_t - beta / sqrt(1 - alpha_bar) * eps_hat) / sqrt(alpha), plus
/// sqrt(beta) * z unless this is the final step.
inline std::vector<double> reverse_step(std::span<const double> x_t, std::span<const double> eps_hat,
                                        const StepCoefficients& c, bool final_step, Rng& rng) {
  if (x_t.size() != eps_hat.size()) throw ShapeError("reverse_step: noise prediction length differs");
  for (double e : eps_hat)
    if (!std::isfinite(e)) throw NumericError("reverse_step: noise prediction is not finite (diverged model?)");
  const double noise_coef = c.beta == 0.0 ? 0.0 : c.beta / std::sqrt(1.0 - c.alpha_bar);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(c.alpha);
  const double sigma = final_step ? 0.0 : std::sqrt(c.beta);
  std::vector<double> out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    out[i] = inv_sqrt_alpha * (x_t[i] - noise_coef * eps_hat[i]);
    if (sigma > 0.0) out[i] += sigma * rng.normal();
  }
  return out;
}

inline std::vector<double> reverse_step(std::span<const double> x_t, int t, std::span<const double> eps_hat,
                                        const NoiseSchedule& schedule, Rng& rng) {
  return reverse_step(x_t, eps_hat, {schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t)}, t == 1, rng);
}

/// One tokenized (text, series) pair ready for training.
struct TrainingExample {
  std::string id;
  TokenSeq tokens;
  std::vector<double> series;
};

/// Anything that encodes a prompt and predicts noise on a tape.
template <class M>
concept NoisePredictor = requires(const M& m, ag::Tape& tape, const TokenSeq& tok, ag::Var x, int t,
                                  const TextMemory& mem) {
  { m.encode(tape, tok) } -> std::same_as<TextMemory>;
  { m.predict_noise(tape, x, t, mem) } -> std::same_as<ag::Var>;
};

/// Mean over the batch of the per-record mean squared error between the
/// drawn noise and the prediction. Each record draws its own step t
/// (uniform in [1, T]) and then its noise, in that order.
///
/// With `grads` set, d(loss)/d(params) is accumulated into it.
template <NoisePredictor Model>
double training_loss(std::span<const TrainingExample> batch, const Model& model, const NoiseSchedule& schedule,
                     Rng& rng, GradStore* grads = nullptr) {
  if (batch.empty()) throw ShapeError("training_loss: empty batch");
  const std::size_t L = batch.front().series.size();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  ag::Tape tape(grads);
  double total = 0.0;
  for (const auto& ex : batch) {
    if (ex.series.size() != L)
      throw ShapeError("training_loss: series '" + ex.id + "' has length " + std::to_string(ex.series.size()) +
                       ", expected " + std::to_string(L));
    const int t = static_cast<int>(rng.uniform_int(1, schedule.steps()));
    const std::vector<double> eps = rng.normal_vector(L);
    ag::Var x_t = tape.constant(1, L, forward_sample(ex.series, eps, schedule.alpha_bar(t)));
    TextMemory mem = model.encode(tape, ex.tokens);
    ag::Var loss = ag::mse(model.predict_noise(tape, x_t, t, mem), eps);
    total += loss.item();
    if (grads) tape.backward(ag::scale(loss, inv_b));
    tape.clear();
  }
  return total * inv_b;
}

}  // namespace tsdiffuse
