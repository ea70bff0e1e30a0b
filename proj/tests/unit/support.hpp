// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Reference implementations used as test oracles. They are written with
// plain loops and share no code with the library's kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tsdiffuse.hpp"

namespace tsd_test {

using Mat = std::vector<std::vector<double>>;  // row-major rows

inline Mat to_mat(std::span<const double> v, std::size_t rows, std::size_t cols) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = v[r * cols + c];
  return m;
}

inline Mat param_mat(const tsdiffuse::ParamStore& s, const std::string& name) {
  const auto* p = s.find(name);
  if (!p) throw std::runtime_error("missing parameter " + name);
  return to_mat(p->value, p->rows, p->cols);
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline void add_row_vec(Mat& a, const Mat& bias) {  // bias is 1 x cols
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[0][j];
}

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, double eps = 1e-5) {
  Mat y = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    double mean = 0, var = 0;
    for (double v : x[r]) mean += v;
    mean /= static_cast<double>(x[r].size());
    for (double v : x[r]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x[r].size());
    for (std::size_t j = 0; j < x[r].size(); ++j) y[r][j] = g[0][j] * (x[r][j] - mean) / std::sqrt(var + eps) + b[0][j];
  }
  return y;
}

inline double gelu(double v) {
  return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
}

/// Pre-norm transformer encoder evaluated directly from the parameter store.
inline Mat reference_encoder(const tsdiffuse::ParamStore& s, const tsdiffuse::ConditionerConfig& cfg,
                             const std::vector<int>& ids, const std::vector<std::uint8_t>& mask) {
  const std::size_t n = ids.size(), w = static_cast<std::size_t>(cfg.width);
  const Mat tok = param_mat(s, "cond.tok_emb"), pos = param_mat(s, "cond.pos_emb");
  Mat x(n, std::vector<double>(w));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) x[i][j] = tok[static_cast<std::size_t>(ids[i])][j] + pos[i][j];
  const std::size_t heads = static_cast<std::size_t>(cfg.heads), hd = w / heads;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "cond.layer" + std::to_string(l) + ".";
    auto lin = [&](const Mat& in, const std::string& wn, const std::string& bn) {
      Mat o = matmul(in, param_mat(s, p + wn));
      add_row_vec(o, param_mat(s, p + bn));
      return o;
    };
    const Mat h = layer_norm(x, param_mat(s, p + "ln1.g"), param_mat(s, p + "ln1.b"));
    const Mat q = lin(h, "attn.wq", "attn.bq"), k = lin(h, "attn.wk", "attn.bk"), v = lin(h, "attn.wv", "attn.bv");
    Mat concat(n, std::vector<double>(w, 0.0));
    for (std::size_t hh = 0; hh < heads; ++hh) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> score(n, -std::numeric_limits<double>::infinity());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          if (!mask[j]) continue;
          double d = 0;
          for (std::size_t c = 0; c < hd; ++c) d += q[i][hh * hd + c] * k[j][hh * hd + c];
          score[j] = d / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, score[j]);
        }
        double z = 0;
        for (std::size_t j = 0; j < n; ++j)
          if (mask[j]) z += std::exp(score[j] - mx);
        for (std::size_t j = 0; j < n; ++j) {
          if (!mask[j]) continue;
          const double a = std::exp(score[j] - mx) / z;
          for (std::size_t c = 0; c < hd; ++c) concat[i][hh * hd + c] += a * v[j][hh * hd + c];
        }
      }
    }
    const Mat att = lin(concat, "attn.wo", "attn.bo");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) x[i][j] += att[i][j];
    const Mat h2 = layer_norm(x, param_mat(s, p + "ln2.g"), param_mat(s, p + "ln2.b"));
    Mat f = lin(h2, "ff1.w", "ff1.b");
    for (auto& row : f)
      for (auto& e : row) e = gelu(e);
    const Mat f2 = lin(f, "ff2.w", "ff2.b");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) x[i][j] += f2[i][j];
  }
  x = layer_norm(x, param_mat(s, "cond.ln_f.g"), param_mat(s, "cond.ln_f.b"));
  for (std::size_t i = 0; i < n; ++i)
    if (!mask[i]) std::fill(x[i].begin(), x[i].end(), 0.0);
  return x;
}

/// Direct-definition 1-D convolution: out[o][p] = b[o] + sum_{c,k} w[o][c*K+k] x[c][p*stride+k-pad].
inline Mat naive_conv1d(const Mat& x, const Mat& w, const std::vector<double>& b, std::size_t K, std::size_t stride,
                        std::size_t pad) {
  const std::size_t cin = x.size(), n = x[0].size(), cout = w.size();
  const std::size_t n_out = (n + 2 * pad - K) / stride + 1;
  Mat out(cout, std::vector<double>(n_out, 0.0));
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t p = 0; p < n_out; ++p) {
      double s = b.empty() ? 0.0 : b[o];
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t k = 0; k < K; ++k) {
          const long src = static_cast<long>(p * stride + k) - static_cast<long>(pad);
          if (src >= 0 && src < static_cast<long>(n)) s += w[o][c * K + k] * x[c][static_cast<std::size_t>(src)];
        }
      out[o][p] = s;
    }
  return out;
}

/// Gather form of the transposed convolution: each output position sums the
/// input positions and taps that map onto it.
inline Mat naive_conv_transpose1d(const Mat& x, const Mat& w, const std::vector<double>& b, std::size_t K,
                                  std::size_t stride, std::size_t crop, std::size_t out_len) {
  const std::size_t cin = x.size(), n = x[0].size(), cout = w.size() / K;
  Mat out(cout, std::vector<double>(out_len, 0.0));
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t p = 0; p < out_len; ++p) {
      double s = b.empty() ? 0.0 : b[o];
      for (std::size_t k = 0; k < K; ++k) {
        const long num = static_cast<long>(p + crop) - static_cast<long>(k);
        if (num < 0 || num % static_cast<long>(stride) != 0) continue;
        const auto i = static_cast<std::size_t>(num / static_cast<long>(stride));
        if (i >= n) continue;
        for (std::size_t c = 0; c < cin; ++c) s += w[o * K + k][c] * x[c][i];
      }
      out[o][p] = s;
    }
  return out;
}

/// Exhaustive minimum over all warping paths that start at (0,0), end at
/// (n-1,m-1) and advance x by one and y by 0, 1 or 2 per step.
inline double brute_dtw(const std::vector<double>& x, const std::vector<double>& y) {
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double cost) {
    cost += std::abs(x[i] - y[j]);
    if (i + 1 == x.size()) {
      if (j + 1 == y.size()) best = std::min(best, cost);
      return;
    }
    for (std::size_t dj = 0; dj <= 2; ++dj)
      if (j + dj < y.size()) walk(i + 1, j + dj, cost);
  };
  walk(0, 0, 0.0);
  return best;
}

/// Analytic gradient of a scalar function vs central differences over
/// selected parameter entries. Returns the largest relative error.
struct FdEntry {
  std::size_t param;
  std::size_t index;
};

inline double max_relative_error(tsdiffuse::ParamStore& store, const std::vector<FdEntry>& entries,
                                 const std::function<double(tsdiffuse::GradStore*)>& loss, double h = 1e-4,
                                 double floor = 1e-6, double* worst_abs = nullptr) {
  tsdiffuse::GradStore grads(store);
  loss(&grads);
  double worst = 0.0;
  for (const auto& e : entries) {
    double& w = store[e.param].value[e.index];
    const double orig = w;
    w = orig + h;
    const double up = loss(nullptr);
    w = orig - h;
    const double down = loss(nullptr);
    w = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grads[e.param][e.index];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    if (rel > worst) {
      worst = rel;
      if (worst_abs) *worst_abs = std::abs(analytic - numeric);
    }
  }
  return worst;
}

inline std::vector<double> random_vec(std::mt19937_64& g, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(g);
  return v;
}

inline Mat random_mat(std::mt19937_64& g, std::size_t r, std::size_t c) {
  Mat m(r);
  for (auto& row : m) row = random_vec(g, c);
  return m;
}

inline std::vector<double> flatten(const Mat& m) {
  std::vector<double> v;
  for (const auto& r : m) v.insert(v.end(), r.begin(), r.end());
  return v;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tsdiffuse_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Small model configuration for fast end-to-end tests.
inline tsdiffuse::RunConfig tiny_config(int steps = 20) {
  tsdiffuse::RunConfig c;
  c.seed = 7;
  c.schedule.steps = steps;
  c.denoiser.base_channels = 4;
  c.denoiser.groupnorm_groups = 2;
  c.denoiser.t_embed_dim = 8;
  c.conditioner.width = 8;
  c.conditioner.layers = 1;
  c.conditioner.heads = 2;
  c.conditioner.max_len = 16;
  c.conditioner.vocab_size = 64;
  c.trainer.batch = 16;
  c.trainer.epochs = 1;
  c.trainer.lr = 1e-3;
  return c;
}


/// Miniature model for finite-difference checks: L=8, base_channels=4,
/// width 8, every weight random (including the zero-initialized output
/// projection, whose zeros would otherwise hide all upstream gradients).
inline tsdiffuse::TextToSeriesModel gradcheck_model(std::uint64_t seed) {
  auto cfg = tiny_config();
  cfg.length = 8;
  cfg.conditioner.max_len = 8;
  tsdiffuse::TextToSeriesModel model(cfg, tsdiffuse::Vocab({"rise", "fall"}));
  std::mt19937_64 g(seed);
  for (auto& p : model.params()) p.value = random_vec(g, p.value.size(), -0.5, 0.5);
  return model;
}

/// Worst relative error of the training-objective gradient over `count`
/// randomly chosen parameter entries.
inline double gradcheck_worst(std::uint64_t seed, std::size_t count, double* worst_abs = nullptr) {
  auto model = gradcheck_model(seed);
  const std::vector<tsdiffuse::TrainingExample> batch{
      {"a", model.tokenize("rise"), {0.1, 0.4, -0.3, 0.8, -0.9, 0.2, 0.0, 0.5}},
      {"b", model.tokenize("fall rise"), {-0.6, 0.3, 0.9, -0.1, 0.4, -0.7, 0.6, -0.2}}};
  const auto schedule = tsdiffuse::build_schedule(model.config().schedule);
  auto loss = [&](tsdiffuse::GradStore* grads) {
    tsdiffuse::Rng rng(seed);
    return tsdiffuse::training_loss(std::span<const tsdiffuse::TrainingExample>(batch), model, schedule, rng, grads);
  };
  std::vector<FdEntry> all;
  for (std::size_t p = 0; p < model.params().size(); ++p)
    for (std::size_t i = 0; i < model.params()[p].value.size(); ++i) all.push_back({p, i});
  std::mt19937_64 g(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(all.begin(), all.end(), g);
  all.resize(std::min(count, all.size()));
  return max_relative_error(model.params(), all, loss, 1e-4, 1e-6, worst_abs);
}

}  // namespace tsd_test
