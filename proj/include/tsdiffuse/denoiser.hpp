// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Temporal denoising U-Net: 1-D convolutional encoder/decoder with
// concatenative skips, sinusoidal timestep conditioning and cross-attention
// from feature positions into the text memory.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsdiffuse/autograd.hpp"
#include "tsdiffuse/conditioner.hpp"
#include "tsdiffuse/config.hpp"
#include "tsdiffuse/error.hpp"
#include "tsdiffuse/rng.hpp"

namespace tsdiffuse {

/// [sin(t*w_0) .. sin(t*w_{h-1}), cos(t*w_0) .. cos(t*w_{h-1})] with
/// w_k = 10000^(-k/h), h = dim/2.
inline std::vector<double> timestep_embedding(double t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("timestep embedding dim must be positive and even (got " +
                                                   std::to_string(dim) + ")");
  const int half = dim / 2;
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int k = 0; k < half; ++k) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(k) / half);
    out[static_cast<std::size_t>(k)] = std::sin(t * w);
    out[static_cast<std::size_t>(k + half)] = std::cos(t * w);
  }
  return out;
}

struct CrossAttentionWeights {
  ag::Var wq;  // d x C
  ag::Var wk;  // width x d
  ag::Var wv;  // width x d
  ag::Var wo;  // C x d
};

struct CrossAttentionResult {
  ag::Var out;      // C x N, features + attended values
  ag::Var weights;  // N x T, one row per feature position
};

/// Queries come from feature positions, keys and values from the text
/// memory, so the result keeps the C x N feature shape and is added back
/// residually. Masked tokens receive zero weight; with no valid token the
/// attended term is zero.
inline CrossAttentionResult cross_attention(ag::Var features, ag::Var memory, std::span<const std::uint8_t> mask,
                                            const CrossAttentionWeights& w) {
  if (w.wq.cols() != features.rows() || w.wo.rows() != features.rows())
    throw ShapeError("cross_attention: projection does not match feature channels");
  if (w.wk.rows() != memory.cols() || w.wv.rows() != memory.cols())
    throw ShapeError("cross_attention: projection does not match memory width");
  if (!mask.empty() && mask.size() != memory.rows()) throw ShapeError("cross_attention: mask must cover every token");
  const double d = static_cast<double>(w.wq.rows());
  ag::Var q_t = ag::matmul(w.wq, features);     // d x N
  ag::Var k = ag::matmul(memory, w.wk);         // T x d
  ag::Var v = ag::matmul(memory, w.wv);         // T x d
  ag::Var scores = ag::scale(ag::matmul(q_t, k, true, true), 1.0 / std::sqrt(d));  // N x T
  ag::Var att = ag::softmax_rows(scores, mask);
  ag::Var attended = ag::matmul(att, v);                // N x d
  ag::Var proj = ag::matmul(w.wo, attended, false, true);  // C x N
  return {ag::add(features, proj), att};
}

/// Feature lengths per encoder level: level 0 keeps L, every further level
/// is a stride-2 convolution padded by kernel/2 on both sides.
inline std::vector<std::size_t> unet_lengths(std::size_t length, const DenoiserConfig& cfg) {
  std::vector<std::size_t> n{length};
  const std::size_t pad = static_cast<std::size_t>(cfg.kernel / 2);
  for (int l = 1; l < cfg.levels; ++l) n.push_back((n.back() + 2 * pad - static_cast<std::size_t>(cfg.kernel)) / 2 + 1);
  return n;
}

class Denoiser {
 public:
  struct Block {
    std::string name;  // enc1.., dec1..
    bool transposed = false;
    std::size_t cin = 0, cout = 0, stride = 1, out_len = 0;
    std::size_t conv_w = 0, conv_b = 0, temb_w = 0, temb_b = 0, gn_g = 0, gn_b = 0;
    bool attn = false;
    std::size_t wq = 0, wk = 0, wv = 0, wo = 0;
  };

  Denoiser() = default;

  Denoiser(ParamStore& store, const DenoiserConfig& cfg, std::size_t length, int text_width,
           const std::string& prefix = "unet.")
      : cfg_(cfg), length_(length), text_width_(static_cast<std::size_t>(text_width)) {
    validate(cfg);
    const auto K = static_cast<std::size_t>(cfg.kernel);
    const auto td = static_cast<std::size_t>(cfg.t_embed_dim);
    const auto levels = static_cast<std::size_t>(cfg.levels);
    lengths_ = unet_lengths(length, cfg);
    std::vector<std::size_t> ch;
    for (std::size_t l = 0; l < levels; ++l) ch.push_back(static_cast<std::size_t>(cfg.base_channels) << l);

    temb_w1_ = store.add(prefix + "temb.w1", td, td);
    temb_b1_ = store.add(prefix + "temb.b1", 1, td);

    auto make = [&](const std::string& name, bool transposed, std::size_t cin, std::size_t cout, std::size_t stride,
                    std::size_t out_len) {
      Block b;
      b.name = name;
      b.transposed = transposed;
      b.cin = cin;
      b.cout = cout;
      b.stride = stride;
      b.out_len = out_len;
      const std::string p = prefix + name + ".";
      if (transposed)
        b.conv_w = store.add(p + "convT.w", cout * K, cin);
      else
        b.conv_w = store.add(p + "conv.w", cout, cin * K);
      b.conv_b = store.add(p + (transposed ? "convT.b" : "conv.b"), 1, cout);
      b.temb_w = store.add(p + "temb.w", td, cout);
      b.temb_b = store.add(p + "temb.b", 1, cout);
      b.gn_g = store.add(p + "gn.g", 1, cout, 1.0);
      b.gn_b = store.add(p + "gn.b", 1, cout);
      for (const auto& a : cfg.attn_levels) b.attn = b.attn || a == name;
      if (b.attn) {
        b.wq = store.add(p + "attn.wq", cout, cout);
        b.wk = store.add(p + "attn.wk", text_width_, cout);
        b.wv = store.add(p + "attn.wv", text_width_, cout);
        b.wo = store.add(p + "attn.wo", cout, cout);
      }
      return b;
    };

    for (std::size_t l = 0; l < levels; ++l)
      enc_.push_back(make("enc" + std::to_string(l + 1), false, l == 0 ? 1 : ch[l - 1], ch[l], l == 0 ? 1 : 2,
                          lengths_[l]));
    for (std::size_t k = 1; k <= levels; ++k) {
      const std::size_t skip = levels - k;  // encoder level whose output joins this input (k >= 2)
      const std::size_t cin = k == 1 ? ch[levels - 1] : 2 * ch[skip];
      const std::size_t target = k < levels ? levels - k - 1 : 0;
      dec_.push_back(make("dec" + std::to_string(k), true, cin, ch[target], k < levels ? 2 : 1, lengths_[target]));
    }
    out_w_ = store.add(prefix + "out.w", 1, ch[0]);
    out_b_ = store.add(prefix + "out.b", 1, 1);
  }

  /// Fan-in scaled uniform weights, zero biases, unit norm gains. The output
  /// projection stays zero so a fresh model predicts zero noise.
  void init(ParamStore& store, Rng& rng) const {
    auto fill = [&](std::size_t idx, double fan_in) {
      const double bound = 1.0 / std::sqrt(fan_in);
      for (auto& v : store[idx].value) v = (2.0 * rng.uniform() - 1.0) * bound;
    };
    const auto K = static_cast<double>(cfg_.kernel);
    const auto td = static_cast<double>(cfg_.t_embed_dim);
    fill(temb_w1_, td);
    for (const auto* blocks : {&enc_, &dec_})
      for (const Block& b : *blocks) {
        fill(b.conv_w, static_cast<double>(b.cin) * K);
        fill(b.temb_w, td);
        if (b.attn) {
          fill(b.wq, static_cast<double>(b.cout));
          fill(b.wk, static_cast<double>(text_width_));
          fill(b.wv, static_cast<double>(text_width_));
          fill(b.wo, static_cast<double>(b.cout));
        }
      }
    std::fill(store[out_w_].value.begin(), store[out_w_].value.end(), 0.0);
    std::fill(store[out_b_].value.begin(), store[out_b_].value.end(), 0.0);
  }

  const DenoiserConfig& config() const { return cfg_; }
  std::size_t length() const { return length_; }
  std::size_t text_width() const { return text_width_; }
  const std::vector<std::size_t>& lengths() const { return lengths_; }
  const std::vector<Block>& encoder() const { return enc_; }
  const std::vector<Block>& decoder() const { return dec_; }
  std::size_t out_weight() const { return out_w_; }
  std::size_t out_bias() const { return out_b_; }

  /// Noise prediction for x (1 x L) at diffusion step t.
  ag::Var forward(ag::Tape& tape, const ParamStore& store, ag::Var x, int t, const TextMemory& memory) const {
    if (x.rows() != 1 || x.cols() != length_)
      throw ShapeError("denoiser: expected a 1 x " + std::to_string(length_) + " input");
    if (memory.states && memory.states.cols() != text_width_) throw ShapeError("denoiser: text memory width mismatch");
    auto P = [&](std::size_t idx) { return tape.param(store, idx); };
    const auto td = static_cast<std::size_t>(cfg_.t_embed_dim);
    ag::Var temb = tape.constant(1, td, timestep_embedding(static_cast<double>(t), cfg_.t_embed_dim));
    ag::Var hidden_t = ag::silu(ag::add_col_bias(ag::matmul(temb, P(temb_w1_)), P(temb_b1_)));
    const auto K = static_cast<std::size_t>(cfg_.kernel);
    const std::size_t pad = K / 2;
    const auto groups = static_cast<std::size_t>(cfg_.groupnorm_groups);

    auto finish = [&](const Block& b, ag::Var h) {
      h = ag::add_row_bias(h, ag::add_col_bias(ag::matmul(hidden_t, P(b.temb_w)), P(b.temb_b)));
      h = ag::silu(ag::group_norm(h, P(b.gn_g), P(b.gn_b), groups));
      if (b.attn && memory.states) {
        h = cross_attention(h, memory.states, memory.mask, {P(b.wq), P(b.wk), P(b.wv), P(b.wo)}).out;
      }
      return h;
    };

    std::vector<ag::Var> skips;
    ag::Var h = x;
    for (const Block& b : enc_) {
      h = finish(b, ag::conv1d(h, P(b.conv_w), P(b.conv_b), K, b.stride, pad));
      skips.push_back(h);
    }
    const std::size_t levels = enc_.size();
    for (std::size_t k = 1; k <= levels; ++k) {
      const Block& b = dec_[k - 1];
      ag::Var in = k == 1 ? h : ag::concat_rows(h, skips[levels - k]);
      h = finish(b, ag::conv_transpose1d(in, P(b.conv_w), P(b.conv_b), K, b.stride, pad, b.out_len));
    }
    return ag::add_row_bias(ag::matmul(P(out_w_), h), P(out_b_));
  }

 private:
  DenoiserConfig cfg_;
  std::size_t length_ = 0;
  std::size_t text_width_ = 0;
  std::vector<std::size_t> lengths_;
  std::size_t temb_w1_ = 0, temb_b1_ = 0, out_w_ = 0, out_b_ = 0;
  std::vector<Block> enc_, dec_;
};

/// One-shot inference helper. `memory` is tokens x width row-major.
inline std::vector<double> denoise(const Denoiser& net, const ParamStore& store, std::span<const double> x_t, int t,
                                   std::span<const double> memory, std::size_t tokens,
                                   std::span<const std::uint8_t> mask) {
  if (!store.all_finite()) throw NumericError("denoiser weights contain NaN or Inf");
  if (x_t.size() != net.length())
    throw ShapeError("denoise: input length " + std::to_string(x_t.size()) + " != " + std::to_string(net.length()));
  ag::Tape tape;
  ag::Var x = tape.constant(1, x_t.size(), {x_t.begin(), x_t.end()});
  TextMemory mem;
  if (tokens > 0) {
    if (memory.size() != tokens * net.text_width()) throw ShapeError("denoise: memory size mismatch");
    mem.states = tape.constant(tokens, net.text_width(), {memory.begin(), memory.end()});
    mem.mask.assign(mask.begin(), mask.end());
  }
  return net.forward(tape, store, x, t, mem).to_vector();
}

}  // namespace tsdiffuse
