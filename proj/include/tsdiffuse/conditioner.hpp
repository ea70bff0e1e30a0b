// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tsdiffuse/autograd.hpp"
#include "tsdiffuse/config.hpp"
#include "tsdiffuse/error.hpp"
#include "tsdiffuse/rng.hpp"

namespace tsdiffuse {

/// Word-level vocabulary. Ids 0..3 are reserved for the special tokens;
/// corpus words follow from id 4 in descending frequency order.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kNumSpecial = 4;

  Vocab() = default;
  explicit Vocab(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!ids_.emplace(words_[i], static_cast<int>(i) + kNumSpecial).second)
        throw FormatError("vocabulary contains duplicate token '" + words_[i] + "'");
    }
  }

  int size() const { return static_cast<int>(words_.size()) + kNumSpecial; }
  int id_of(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    return it == ids_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view word) const { return ids_.contains(std::string(word)); }
  const std::vector<std::string>& words() const { return words_; }

  /// One token per line; line i (0-based) holds id i + 4.
  std::string to_lines() const {
    std::string out;
    for (const auto& w : words_) {
      out += w;
      out += '\n';
    }
    return out;
  }
  static Vocab from_lines(std::string_view text) {
    std::vector<std::string> words;
    std::size_t start = 0;
    while (start < text.size()) {
      auto nl = text.find('\n', start);
      if (nl == std::string_view::npos) nl = text.size();
      std::string w(text.substr(start, nl - start));
      if (!w.empty() && w.back() == '\r') w.pop_back();
      if (w.empty()) throw FormatError("vocabulary line " + std::to_string(words.size()) + " is empty");
      words.push_back(std::move(w));
      start = nl + 1;
    }
    return Vocab(std::move(words));
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.words_ == b.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

/// Lowercased words; any byte that is not ASCII alphanumeric (and not part
/// of a multi-byte UTF-8 sequence) separates words and is dropped.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    const bool word_char = std::isalnum(c) || c >= 0x80;
    if (word_char) {
      cur += static_cast<char>(c < 0x80 ? std::tolower(c) : c);
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline Vocab build_vocab(std::span<const std::string> corpus, int size) {
  if (size < 5) throw ConfigError("vocab size must be >= 5 (got " + std::to_string(size) + ")");
  if (corpus.empty()) throw ConfigError("cannot build a vocabulary from an empty corpus");
  std::map<std::string, long> counts;
  for (const auto& text : corpus)
    for (auto& w : split_words(text)) ++counts[w];
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const std::size_t keep = std::min(ranked.size(), static_cast<std::size_t>(size - Vocab::kNumSpecial));
  std::vector<std::string> words;
  words.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) words.push_back(ranked[i].first);
  return Vocab(std::move(words));
}

struct TokenSeq {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;  // 1 on real tokens (including BOS/EOS)

  std::size_t real_length() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
  /// Number of tokens that are neither special nor padding.
  std::size_t content_length() const { return real_length() >= 2 ? real_length() - 2 : 0; }
};

/// BOS + word ids (UNK for unknown words) + EOS, truncated to max_len with
/// EOS kept, then padded with PAD.
inline TokenSeq tokenize(std::string_view text, const Vocab& vocab, int max_len) {
  if (max_len < 2) throw ConfigError("max_len must be >= 2 (got " + std::to_string(max_len) + ")");
  const auto words = split_words(text);
  const std::size_t cap = static_cast<std::size_t>(max_len);
  const std::size_t content = std::min(words.size(), cap - 2);
  TokenSeq seq;
  seq.ids.assign(cap, Vocab::kPad);
  seq.mask.assign(cap, 0);
  seq.ids[0] = Vocab::kBos;
  for (std::size_t i = 0; i < content; ++i) seq.ids[i + 1] = vocab.id_of(words[i]);
  seq.ids[content + 1] = Vocab::kEos;
  std::fill_n(seq.mask.begin(), content + 2, 1);
  return seq;
}

/// Encoded prompt consumed by cross-attention: one row per token.
struct TextMemory {
  ag::Var states;
  std::vector<std::uint8_t> mask;
};

/// Small pre-norm transformer encoder producing the token memory.
class Conditioner {
 public:
  struct Layer {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
  };

  Conditioner() = default;

  /// Register parameters (zero-filled) under `prefix`.
  Conditioner(ParamStore& store, const ConditionerConfig& cfg, int vocab_rows, const std::string& prefix = "cond.")
      : cfg_(cfg), vocab_rows_(vocab_rows) {
    validate(cfg);
    const auto w = static_cast<std::size_t>(cfg.width);
    const auto f = w * static_cast<std::size_t>(cfg.ff_mult);
    tok_emb_ = store.add(prefix + "tok_emb", static_cast<std::size_t>(vocab_rows), w);
    pos_emb_ = store.add(prefix + "pos_emb", static_cast<std::size_t>(cfg.max_len), w);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = prefix + "layer" + std::to_string(l) + ".";
      Layer L{};
      L.ln1_g = store.add(p + "ln1.g", 1, w, 1.0);
      L.ln1_b = store.add(p + "ln1.b", 1, w);
      L.wq = store.add(p + "attn.wq", w, w);
      L.bq = store.add(p + "attn.bq", 1, w);
      L.wk = store.add(p + "attn.wk", w, w);
      L.bk = store.add(p + "attn.bk", 1, w);
      L.wv = store.add(p + "attn.wv", w, w);
      L.bv = store.add(p + "attn.bv", 1, w);
      L.wo = store.add(p + "attn.wo", w, w);
      L.bo = store.add(p + "attn.bo", 1, w);
      L.ln2_g = store.add(p + "ln2.g", 1, w, 1.0);
      L.ln2_b = store.add(p + "ln2.b", 1, w);
      L.ff1_w = store.add(p + "ff1.w", w, f);
      L.ff1_b = store.add(p + "ff1.b", 1, f);
      L.ff2_w = store.add(p + "ff2.w", f, w);
      L.ff2_b = store.add(p + "ff2.b", 1, w);
      layers_.push_back(L);
    }
    lnf_g_ = store.add(prefix + "ln_f.g", 1, w, 1.0);
    lnf_b_ = store.add(prefix + "ln_f.b", 1, w);
  }

  /// Random initialization: embeddings uniform in +-0.1, matrices uniform
  /// in +-1/sqrt(fan_in), biases zero, norm gains one.
  void init(ParamStore& store, Rng& rng) const {
    auto fill = [&](std::size_t idx, double bound) {
      for (auto& v : store[idx].value) v = (2.0 * rng.uniform() - 1.0) * bound;
    };
    fill(tok_emb_, 0.1);
    fill(pos_emb_, 0.1);
    const double w = cfg_.width;
    for (const auto& L : layers_) {
      fill(L.wq, 1.0 / std::sqrt(w));
      fill(L.wk, 1.0 / std::sqrt(w));
      fill(L.wv, 1.0 / std::sqrt(w));
      fill(L.wo, 1.0 / std::sqrt(w));
      fill(L.ff1_w, 1.0 / std::sqrt(w));
      fill(L.ff2_w, 1.0 / std::sqrt(w * cfg_.ff_mult));
    }
  }

  const ConditionerConfig& config() const { return cfg_; }
  int vocab_rows() const { return vocab_rows_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t tok_emb() const { return tok_emb_; }
  std::size_t pos_emb() const { return pos_emb_; }

  /// Encode all rows of `tokens` (padded included); padded rows come out zero
  /// and never influence real rows.
  ag::Var forward(ag::Tape& tape, const ParamStore& store, std::span<const int> ids,
                  std::span<const std::uint8_t> mask) const {
    const std::size_t n = ids.size();
    if (n == 0 || n > static_cast<std::size_t>(cfg_.max_len)) throw ShapeError("conditioner: bad token count");
    for (int id : ids)
      if (id < 0 || id >= vocab_rows_)
        throw ShapeError("conditioner: token id " + std::to_string(id) + " out of range for vocabulary of " +
                         std::to_string(vocab_rows_));
    std::vector<int> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);
    ag::Var x = ag::add(ag::embedding(tape.param(store, tok_emb_), ids),
                        ag::embedding(tape.param(store, pos_emb_), positions));
    const auto heads = static_cast<std::size_t>(cfg_.heads);
    const std::size_t hd = static_cast<std::size_t>(cfg_.width) / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    auto P = [&](std::size_t idx) { return tape.param(store, idx); };
    auto linear = [&](ag::Var in, std::size_t w, std::size_t b) { return ag::add_col_bias(ag::matmul(in, P(w)), P(b)); };
    for (const auto& L : layers_) {
      ag::Var h = ag::layer_norm(x, P(L.ln1_g), P(L.ln1_b));
      ag::Var q = linear(h, L.wq, L.bq);
      ag::Var k = linear(h, L.wk, L.bk);
      ag::Var v = linear(h, L.wv, L.bv);
      std::vector<ag::Var> outs;
      outs.reserve(heads);
      for (std::size_t hh = 0; hh < heads; ++hh) {
        ag::Var qh = ag::slice_cols(q, hh * hd, hd);
        ag::Var kh = ag::slice_cols(k, hh * hd, hd);
        ag::Var vh = ag::slice_cols(v, hh * hd, hd);
        ag::Var att = ag::softmax_rows(ag::scale(ag::matmul(qh, kh, false, true), inv_sqrt), mask);
        outs.push_back(ag::matmul(att, vh));
      }
      x = ag::add(x, linear(heads == 1 ? outs[0] : ag::concat_cols(outs), L.wo, L.bo));
      ag::Var h2 = ag::layer_norm(x, P(L.ln2_g), P(L.ln2_b));
      x = ag::add(x, linear(ag::gelu(linear(h2, L.ff1_w, L.ff1_b)), L.ff2_w, L.ff2_b));
    }
    x = ag::layer_norm(x, P(lnf_g_), P(lnf_b_));
    return ag::mask_rows(x, mask);
  }

  /// Memory for cross-attention. Only the real-token prefix is encoded:
  /// masked keys carry zero attention weight, so dropping the padded rows
  /// leaves every real row unchanged.
  TextMemory encode(ag::Tape& tape, const ParamStore& store, const TokenSeq& tokens) const {
    const std::size_t n = std::max<std::size_t>(tokens.real_length(), 1);
    std::span<const int> ids(tokens.ids.data(), n);
    std::vector<std::uint8_t> mask(n, 1);
    return TextMemory{forward(tape, store, ids, mask), std::move(mask)};
  }

 private:
  ConditionerConfig cfg_;
  int vocab_rows_ = 0;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0;
  std::vector<Layer> layers_;
};

/// Final-layer token states, max_len x width row-major, padded rows zero.
struct EncodedText {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<double> states;
  std::vector<std::uint8_t> mask;
};

inline EncodedText encode_text(const TokenSeq& tokens, const Conditioner& conditioner, const ParamStore& store) {
  ag::Tape tape;
  ag::Var out = conditioner.forward(tape, store, tokens.ids, tokens.mask);
  return EncodedText{out.rows(), out.cols(), out.to_vector(), tokens.mask};
}

}  // namespace tsdiffuse
