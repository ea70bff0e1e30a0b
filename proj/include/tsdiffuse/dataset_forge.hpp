// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Corpus construction: closed-form synthetic families, windowing and
// resampling of recorded series, min-max normalization, template and
// external captioning, grouped train/test splits and JSONL persistence.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsdiffuse/config.hpp"
#include "tsdiffuse/diffusion.hpp"
#include "tsdiffuse/error.hpp"
#include "tsdiffuse/plot.hpp"
#include "tsdiffuse/records.hpp"
#include "tsdiffuse/rng.hpp"

namespace tsdiffuse {

// ---------------------------------------------------------------------------
// Synthetic families

enum class SynthKind { linear, quadratic, cubic, sinusoidal };

inline constexpr std::array<SynthKind, 4> kAllSynthKinds{SynthKind::linear, SynthKind::quadratic, SynthKind::cubic,
                                                         SynthKind::sinusoidal};

inline std::string_view to_string(SynthKind k) {
  switch (k) {
    case SynthKind::linear: return "linear";
    case SynthKind::quadratic: return "quadratic";
    case SynthKind::cubic: return "cubic";
    case SynthKind::sinusoidal: return "sinusoidal";
  }
  return "?";
}

struct SynthSpec {
  SynthKind kind = SynthKind::linear;
  double m = 1.0;
  int index = 0;  // position within the kind's coefficient grid
};

/// n evenly spaced values from a to b; both endpoints are exact.
inline std::vector<double> linspace(double a, double b, std::size_t n) {
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = a;
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
  out.back() = b;
  return out;
}

/// Coefficient grid per kind. Linear uses 100 points on [-1, 1]; the other
/// kinds keep the outer 41 + 41 points of a 101-point grid, dropping the
/// near-zero middle. Sinusoidal coefficients span [-pi, pi].
inline std::vector<double> synth_param_grid(SynthKind kind) {
  if (kind == SynthKind::linear) return linspace(-1.0, 1.0, 100);
  const double r = kind == SynthKind::sinusoidal ? std::numbers::pi : 1.0;
  const auto full = linspace(-r, r, 101);
  std::vector<double> out(full.begin(), full.begin() + 41);
  out.insert(out.end(), full.begin() + 60, full.end());
  return out;
}

inline Series synth_series(const SynthSpec& spec, std::size_t length = 100) {
  const auto u = linspace(-1.0, 1.0, length);
  Series s;
  s.values.resize(length);
  for (std::size_t i = 0; i < length; ++i) {
    const double x = u[i];
    switch (spec.kind) {
      case SynthKind::linear: s.values[i] = spec.m * x; break;
      case SynthKind::quadratic: s.values[i] = spec.m * x * x; break;
      case SynthKind::cubic: s.values[i] = spec.m * x * x * x; break;
      case SynthKind::sinusoidal: s.values[i] = std::sin(spec.m * x); break;
    }
  }
  return s;
}

struct SynthSeries {
  SynthSpec spec;
  Series series;
};

inline std::vector<SynthSeries> gen_synthetic(std::size_t length = 100) {
  std::vector<SynthSeries> out;
  for (SynthKind k : kAllSynthKinds) {
    const auto grid = synth_param_grid(k);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      SynthSpec spec{k, grid[i], static_cast<int>(i)};
      out.push_back({spec, synth_series(spec, length)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling, windowing, normalization

/// Linear interpolation at `length` evenly spaced fractional positions over
/// the whole input. Output ends equal input ends exactly.
inline std::vector<double> resample_linear(std::span<const double> x, std::size_t length) {
  if (x.size() < 2) throw ShapeError("resample_linear: need at least 2 input points, got " + std::to_string(x.size()));
  if (length < 2) throw ShapeError("resample_linear: output length must be at least 2");
  std::vector<double> out(length);
  const double span = static_cast<double>(x.size() - 1);
  for (std::size_t i = 0; i < length; ++i) {
    const double pos = static_cast<double>(i) * span / static_cast<double>(length - 1);
    const auto k = static_cast<std::size_t>(std::floor(pos));
    if (k >= x.size() - 1) {
      out[i] = x.back();
      continue;
    }
    const double frac = pos - static_cast<double>(k);
    out[i] = frac == 0.0 ? x[k] : x[k] + frac * (x[k + 1] - x[k]);
  }
  out.front() = x.front();
  out.back() = x.back();
  return out;
}

/// Every stride-aligned window of `length` points whose points are all valid.
inline std::vector<std::vector<double>> window_series(std::span<const double> values, std::span<const std::uint8_t> valid,
                                                      std::size_t length, std::size_t stride) {
  if (stride < 1) throw ConfigError("window_series: stride must be >= 1");
  if (valid.size() != values.size()) throw ShapeError("window_series: validity flags must cover every point");
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start + length <= values.size(); start += stride) {
    const auto end = start + length;
    if (std::all_of(valid.begin() + static_cast<std::ptrdiff_t>(start), valid.begin() + static_cast<std::ptrdiff_t>(end),
                    [](std::uint8_t v) { return v != 0; }))
      out.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(start),
                       values.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

/// Min-max map onto [-1, 1]. A constant input becomes all zeros with a zero,
/// flagged scale.
inline Series normalize(std::span<const double> x) {
  if (x.empty()) throw ShapeError("normalize: empty series");
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError("normalize: series contains NaN or Inf");
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  Denorm d;
  d.offset = (*hi + *lo) / 2.0;
  d.scale = (*hi - *lo) / 2.0;
  Series s;
  s.values.resize(x.size());
  if (d.scale == 0.0) {
    d.degenerate = true;
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) s.values[i] = std::clamp((x[i] - d.offset) / d.scale, -1.0, 1.0);
  }
  s.denorm = d;
  return s;
}

inline std::vector<double> denormalize(const Series& s) {
  std::vector<double> out = s.values;
  if (s.denorm)
    for (auto& v : out) v = s.denorm->offset + s.denorm->scale * v;
  return out;
}

// ---------------------------------------------------------------------------
// Captions

/// Five descriptions in the order short, medium, long, creative, resembles.
using CaptionSet = std::array<std::string, 5>;
inline constexpr std::array<DescType, 5> kCaptionTypes{DescType::short_, DescType::medium, DescType::long_,
                                                       DescType::creative, DescType::resembles};

namespace detail {
// 0 gentle, 1 moderate, 2 steep, from the coefficient's share of its range.
inline int strength_bucket(double ratio) { return ratio < 1.0 / 3.0 ? 0 : ratio < 2.0 / 3.0 ? 1 : 2; }
}  // namespace detail

inline CaptionSet template_caption(const SynthSpec& spec) {
  const bool pos = spec.m > 0;
  const double range = spec.kind == SynthKind::sinusoidal ? std::numbers::pi : 1.0;
  const int b = detail::strength_bucket(std::abs(spec.m) / range);
  static constexpr std::array<const char*, 3> adverb{"gently", "steadily", "steeply"};
  static constexpr std::array<const char*, 3> adjective{"gentle", "moderate", "sharp"};
  const std::string adv = adverb[static_cast<std::size_t>(b)];
  const std::string adj = adjective[static_cast<std::size_t>(b)];

  switch (spec.kind) {
    case SynthKind::linear: {
      const std::string dir = pos ? "increasing" : "decreasing";
      const std::string verb = pos ? "rises" : "falls";
      return {"a line " + dir + " " + adv,
              "A straight line that " + verb + " " + adv + " from start to end at a constant rate.",
              "The series is a straight line with no changes in direction. It starts at its " +
                  std::string(pos ? "lowest" : "highest") + " value and " + verb + " " + adv +
                  " at a constant rate until it ends at its " + (pos ? "highest" : "lowest") + " value.",
              std::string("a ") + adj + (pos ? " climb up" : " slide down") + " a perfectly smooth ramp",
              std::string("resembles a ramp going ") + (pos ? "uphill" : "downhill")};
    }
    case SynthKind::quadratic: {
      if (pos)
        return {"a " + adj + " U-shaped curve",
                "The series falls " + adv + " to a minimum in the middle and then rises back symmetrically.",
                "The series begins high, decreases " + adv + " while flattening out, reaches its lowest point at the "
                "midpoint, then increases again at the same rate, ending as high as it started.",
                "a " + adj + " dip into a valley and back out the other side",
                "resembles a valley or the inside of a bowl"};
      return {"a " + adj + " upside-down U-shaped curve",
              "The series rises " + adv + " to a maximum in the middle and then falls back symmetrically.",
              "The series begins low, increases " + adv + " while flattening out, reaches its highest point at the "
              "midpoint, then decreases again at the same rate, ending as low as it started.",
              "a " + adj + " climb over a rounded hilltop and down the far side",
              "resembles a hill or an arch"};
    }
    case SynthKind::cubic: {
      const std::string dir = pos ? "rising" : "falling";
      return {"an S-shaped curve " + dir + " " + adv,
              std::string("The series ") + (pos ? "rises" : "falls") + " " + adv +
                  ", levels off briefly in the middle, then continues " + (pos ? "upward." : "downward."),
              std::string("The series starts ") + (pos ? "low" : "high") + " and changes quickly at first, " +
                  "slows to an almost flat stretch around the midpoint, then speeds up again and keeps " + dir +
                  " " + adv + " until the end without ever changing direction.",
              std::string("a ") + adj + (pos ? " ascent" : " descent") + " that pauses on a landing halfway",
              std::string("resembles a staircase with a single wide step going ") + (pos ? "up" : "down")};
    }
    case SynthKind::sinusoidal: {
      const bool turns = std::abs(spec.m) > std::numbers::pi / 2.0;
      if (turns) {
        const std::string first = pos ? "trough" : "peak", second = pos ? "peak" : "trough";
        return {"a " + adj + " wave with one " + first + " and one " + second,
                "The series " + std::string(pos ? "dips" : "climbs") + " to a " + first + ", swings through the middle to a " +
                    second + ", then turns back toward the center.",
                "The series oscillates smoothly. It first moves " + std::string(pos ? "down" : "up") + " to a " +
                    first + ", reverses and crosses the midline at the center, reaches a " + second +
                    ", and finally heads back toward the middle, completing most of one cycle.",
                "a " + adj + " swell rolling through like a single ocean wave",
                "resembles a single wave cycle of a sine curve"};
      }
      const std::string dir = pos ? "rising" : "falling";
      return {"a smooth curve " + dir + " " + adv + " with soft ends",
              std::string("The series ") + (pos ? "rises" : "falls") +
                  " smoothly, steepest in the middle and flattening near both ends.",
              std::string("The series starts ") + (pos ? "low" : "high") +
                  " on a nearly flat stretch, bends into a steeper " + (pos ? "climb" : "drop") +
                  " through the middle, then eases off again as it approaches its final value.",
              std::string("a ") + adj + (pos ? " rise" : " fall") + " like a tide easing in",
              "resembles part of a gentle wave"};
    }
  }
  return {};
}

/// Shape summary of an arbitrary series, used to caption recorded data.
struct SeriesFeatures {
  double net_change = 0;  // end minus start, in normalized units
  int turns = 0;          // direction changes after smoothing
  double argmax_frac = 0, argmin_frac = 0;
  double roughness = 0;  // mean absolute second difference
};

inline SeriesFeatures series_features(std::span<const double> raw) {
  if (raw.size() < 3) throw ShapeError("series_features: need at least 3 points");
  const Series n = normalize(raw);
  const auto& x = n.values;
  SeriesFeatures f;
  f.net_change = x.back() - x.front();
  const auto size = static_cast<double>(x.size() - 1);
  f.argmax_frac = static_cast<double>(std::max_element(x.begin(), x.end()) - x.begin()) / size;
  f.argmin_frac = static_cast<double>(std::min_element(x.begin(), x.end()) - x.begin()) / size;
  double r = 0;
  for (std::size_t i = 1; i + 1 < x.size(); ++i) r += std::abs(x[i + 1] - 2 * x[i] + x[i - 1]);
  f.roughness = r / static_cast<double>(x.size() - 2);
  // Swings smaller than 0.2 (a tenth of the normalized range) are ignored.
  int dir = 0;
  double anchor = x.front();
  for (double v : x) {
    if (dir >= 0 && v < anchor - 0.2) {
      if (dir > 0) ++f.turns;
      dir = -1;
      anchor = v;
    } else if (dir <= 0 && v > anchor + 0.2) {
      if (dir < 0) ++f.turns;
      dir = 1;
      anchor = v;
    } else if ((dir > 0 && v > anchor) || (dir < 0 && v < anchor)) {
      anchor = v;
    }
  }
  return f;
}

inline CaptionSet describe_series(std::span<const double> series) {
  const SeriesFeatures f = series_features(series);
  auto where = [](double frac) { return frac < 1.0 / 3.0 ? "early" : frac < 2.0 / 3.0 ? "in the middle" : "late"; };
  const std::string trend = f.net_change > 0.3 ? "rising" : f.net_change < -0.3 ? "falling" : "roughly level";
  const std::string texture = f.roughness > 0.15 ? "jagged" : f.roughness > 0.04 ? "noisy" : "smooth";
  const std::string turns = f.turns == 0   ? "without changing direction"
                            : f.turns == 1 ? "with one change in direction"
                                           : "with " + std::to_string(f.turns) + " changes in direction";
  CaptionSet c;
  c[0] = "a " + texture + " " + trend + " series " + turns;
  c[1] = "The series is " + texture + " and " + trend + " overall " + turns + ", peaking " + where(f.argmax_frac) +
         " and bottoming out " + where(f.argmin_frac) + ".";
  c[2] = "Overall the series is " + trend + ", ending " +
         (f.net_change > 0 ? "above" : f.net_change < 0 ? "below" : "level with") + " where it started. It moves " +
         turns + ". The highest value comes " + where(f.argmax_frac) + " and the lowest " + where(f.argmin_frac) +
         ", and the line looks " + texture + " throughout.";
  c[3] = f.turns >= 3 ? "a restless line that keeps changing its mind"
         : trend == "rising" ? "a " + texture + " path climbing toward higher ground"
         : trend == "falling" ? "a " + texture + " path sliding toward lower ground"
                              : "a " + texture + " path that wanders but ends near where it began";
  c[4] = f.turns >= 3            ? "resembles a sensor signal with repeated oscillations"
         : f.roughness > 0.15    ? "resembles a volatile stock price chart"
         : trend == "rising"     ? "resembles a growth curve"
         : trend == "falling"    ? "resembles a decay curve"
                                 : "resembles a signal hovering around a baseline";
  return c;
}

/// Produces the five description types for one series.
class Captioner {
 public:
  virtual ~Captioner() = default;
  virtual CaptionSet describe(std::span<const double> series) = 0;
};

class TemplateCaptioner : public Captioner {
 public:
  CaptionSet describe(std::span<const double> series) override { return describe_series(series); }
};

/// Transport to a remote describer. Implementations throw a retryable
/// CaptionError when the provider cannot be reached.
class CaptionClient {
 public:
  virtual ~CaptionClient() = default;
  virtual std::string submit(std::string_view svg, std::string_view prompt) = 0;
};

inline constexpr std::string_view kCaptionPrompt =
    "Describe this time series with a short, medium, and long description. Make sure to describe the overall "
    "trends and changes in direction of the line. Also, a creative description and a description of what it "
    "resembles.";

/// Reads "Short: ...", "Medium: ...", "Long: ...", "Creative: ..." and
/// "Resembles: ..." lines. Labels are case-insensitive and may carry list or
/// bold markers.
inline CaptionSet parse_caption_response(std::string_view text) {
  static constexpr std::array<std::pair<const char*, std::size_t>, 6> labels{
      {{"short", 0}, {"medium", 1}, {"long", 2}, {"creative", 3}, {"resembles", 4}, {"resemblance", 4}}};
  CaptionSet out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    std::size_t p = line.find_first_not_of(" \t-*#");
    const std::size_t colon = line.find(':');
    if (p == std::string::npos || colon == std::string::npos || colon < p) continue;
    std::string label;
    for (std::size_t i = p; i < colon; ++i)
      if (line[i] != '*') label += static_cast<char>(std::tolower(static_cast<unsigned char>(line[i])));
    while (!label.empty() && label.back() == ' ') label.pop_back();
    if (label.size() > 12 && label.ends_with(" description")) label.resize(label.size() - 12);
    std::string body = line.substr(colon + 1);
    const auto b = body.find_first_not_of(" \t*");
    const auto e = body.find_last_not_of(" \t\r*");
    body = b == std::string::npos ? "" : body.substr(b, e - b + 1);
    for (const auto& [name, slot] : labels)
      if (label == name && out[slot].empty()) out[slot] = body;
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i].empty())
      throw CaptionError("caption response is missing the '" + std::string(to_string(kCaptionTypes[i])) +
                             "' description",
                         false);
  return out;
}

inline CaptionSet annotate_external(std::span<const double> series, CaptionClient& client,
                                    std::string_view prompt = kCaptionPrompt) {
  const std::string svg = render_svg(series, "");
  return parse_caption_response(client.submit(svg, prompt));
}

class ExternalCaptioner : public Captioner {
 public:
  explicit ExternalCaptioner(CaptionClient& client, std::string prompt = std::string(kCaptionPrompt))
      : client_(client), prompt_(std::move(prompt)) {}
  CaptionSet describe(std::span<const double> series) override { return annotate_external(series, client_, prompt_); }

 private:
  CaptionClient& client_;
  std::string prompt_;
};

// ---------------------------------------------------------------------------
// Record builders

inline std::vector<PairRecord> caption_records(const std::string& series_id, Source source,
                                               const std::vector<double>& values, const CaptionSet& captions) {
  std::vector<PairRecord> out;
  for (std::size_t i = 0; i < captions.size(); ++i)
    out.push_back({series_id + "/" + std::string(to_string(kCaptionTypes[i])), source, kCaptionTypes[i], captions[i],
                   values});
  return out;
}

inline std::string synth_series_id(const SynthSpec& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "synthetic-%s-%03d", std::string(to_string(s.kind)).c_str(), s.index);
  return buf;
}

/// 346 synthetic series, five template captions each.
inline std::vector<PairRecord> synthetic_records(std::size_t length = 100) {
  std::vector<PairRecord> out;
  for (const auto& s : gen_synthetic(length)) {
    auto recs = caption_records(synth_series_id(s.spec), Source::synthetic, s.series.values, template_caption(s.spec));
    out.insert(out.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  return out;
}

namespace detail {

inline bool parse_double(std::string_view tok, double& out) {
  while (!tok.empty() && std::isspace(static_cast<unsigned char>(tok.front()))) tok.remove_prefix(1);
  while (!tok.empty() && std::isspace(static_cast<unsigned char>(tok.back()))) tok.remove_suffix(1);
  if (tok.empty()) return false;
  std::string s(tok);
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

inline std::vector<std::filesystem::path> list_files(const std::filesystem::path& root, auto&& accept) {
  namespace fs = std::filesystem;
  std::vector<fs::path> out;
  if (fs::is_regular_file(root)) return {root};
  if (!fs::is_directory(root)) throw FormatError("input path does not exist: " + root.string());
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && accept(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string file_stem_id(const std::filesystem::path& p) {
  std::string s = p.stem().string();
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  return s;
}

}  // namespace detail

/// One `timestamp,value` CSV. A header line is skipped; an empty,
/// non-numeric or non-finite value marks the point invalid.
struct PointSeries {
  std::vector<double> values;
  std::vector<std::uint8_t> valid;
};

inline PointSeries read_timestamp_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  PointSeries s;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    double v = 0;
    const bool ok = comma != std::string::npos && detail::parse_double(std::string_view(line).substr(comma + 1), v) &&
                    std::isfinite(v);
    if (first && !ok && comma != std::string::npos) {  // header
      first = false;
      continue;
    }
    first = false;
    s.values.push_back(ok ? v : 0.0);
    s.valid.push_back(ok ? 1 : 0);
  }
  return s;
}

/// Windows every CSV under `path`, keeps ceil(n * keep_fraction) windows
/// chosen at random, normalizes and captions them.
inline std::vector<PairRecord> stock_records(const std::filesystem::path& path, const ForgeConfig& cfg,
                                             std::size_t length, Rng& rng, Captioner& captioner) {
  struct Window {
    std::string id;
    std::vector<double> values;
  };
  std::vector<Window> windows;
  const auto files = detail::list_files(path, [](const auto& p) { return p.extension() == ".csv"; });
  for (const auto& f : files) {
    const PointSeries s = read_timestamp_csv(f);
    const auto stride = static_cast<std::size_t>(cfg.stock_stride);
    std::size_t k = 0;
    for (std::size_t start = 0; start + length <= s.values.size(); start += stride, ++k) {
      const auto w = window_series(std::span(s.values).subspan(start, length),
                                   std::span(s.valid).subspan(start, length), length, length);
      if (w.empty()) continue;
      char buf[32];
      std::snprintf(buf, sizeof buf, "-%06zu", start);
      windows.push_back({"stock-" + detail::file_stem_id(f) + buf, w.front()});
    }
  }
  const auto keep = static_cast<std::size_t>(std::ceil(static_cast<double>(windows.size()) * cfg.stock_keep_fraction - 1e-9));
  std::vector<std::size_t> idx(windows.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  idx.resize(std::min(keep, idx.size()));
  std::sort(idx.begin(), idx.end());
  std::vector<PairRecord> out;
  for (std::size_t i : idx) {
    const Series n = normalize(windows[i].values);
    auto recs = caption_records(windows[i].id, Source::stock, n.values, captioner.describe(n.values));
    out.insert(out.end(), recs.begin(), recs.end());
  }
  return out;
}

/// Rows of one delimited UCR-style file: class label, then values. Trailing
/// NaN padding is dropped; rows with interior gaps or fewer than 2 values
/// are skipped.
inline std::vector<std::vector<double>> read_ucr_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    for (char& c : line)
      if (c == ',' || c == '\t' || c == '\r') c = ' ';
    std::istringstream ls(line);
    std::string tok;
    std::vector<double> vals;
    bool first = true, bad = false;
    while (ls >> tok) {
      double v = 0;
      if (!detail::parse_double(tok, v)) {
        if (first) {
          bad = true;  // header or non-numeric label
          break;
        }
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": cannot parse value '" + tok + "'");
      }
      if (!first) vals.push_back(v);
      first = false;
    }
    if (bad) continue;
    while (!vals.empty() && std::isnan(vals.back())) vals.pop_back();
    if (vals.size() < 2 || !std::all_of(vals.begin(), vals.end(), [](double v) { return std::isfinite(v); })) continue;
    rows.push_back(std::move(vals));
  }
  return rows;
}

/// Scans `root` for training-split files, takes up to `ucr_per_dataset` rows
/// at random from each, resamples to `length`, normalizes and captions.
inline std::vector<PairRecord> ucr_records(const std::filesystem::path& root, const ForgeConfig& cfg,
                                           std::size_t length, std::uint64_t seed, Captioner& captioner) {
  const auto files = detail::list_files(root, [](const std::filesystem::path& p) {
    return p.filename().string().find("_TRAIN") != std::string::npos;
  });
  std::vector<PairRecord> out;
  for (const auto& f : files) {
    std::string dataset = detail::file_stem_id(f);
    if (const auto pos = dataset.find("_TRAIN"); pos != std::string::npos) dataset.resize(pos);
    const auto rows = read_ucr_file(f);
    std::vector<std::size_t> idx(rows.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > static_cast<std::size_t>(cfg.ucr_per_dataset)) {
      Rng rng(derive_seed(seed, "ucr/" + dataset));
      rng.shuffle(idx);
      idx.resize(static_cast<std::size_t>(cfg.ucr_per_dataset));
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      const Series n = normalize(resample_linear(rows[i], length));
      char buf[32];
      std::snprintf(buf, sizeof buf, "-%05zu", i);
      auto recs = caption_records("ucr-" + dataset + buf, Source::ucr, n.values, captioner.describe(n.values));
      out.insert(out.end(), recs.begin(), recs.end());
    }
  }
  return out;
}

/// JSONL of {"id"?: str, "series": [numbers], "captions": [str, ...]}; each
/// caption becomes one pair over the resampled, normalized series.
inline std::vector<PairRecord> truce_records(const std::filesystem::path& path, std::size_t length) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<PairRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    try {
      const auto j = nlohmann::json::parse(line);
      char buf[32];
      std::snprintf(buf, sizeof buf, "truce-%05zu", line_no);
      const std::string sid = j.contains("id") ? "truce-" + j.at("id").get<std::string>() : std::string(buf);
      const auto raw = j.at("series").get<std::vector<double>>();
      const auto caps = j.at("captions").get<std::vector<std::string>>();
      if (caps.empty()) throw FormatError("no captions");
      const Series n = normalize(resample_linear(raw, length));
      for (std::size_t c = 0; c < caps.size(); ++c) {
        if (caps[c].empty()) throw FormatError("caption " + std::to_string(c) + " is empty");
        out.push_back({sid + "/c" + std::to_string(c), Source::truce, DescType::truce, caps[c], n.values});
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + e.what());
    } catch (const Error& e) {
      throw FormatError(where + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits and persistence

struct Split {
  std::vector<PairRecord> train, test;
};

/// Shuffles the sorted series ids with `seed` and sends the first
/// floor(groups * test_fraction) of them, with all their pairs, to test.
inline Split split_grouped(std::span<const PairRecord> records, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("test_fraction must lie in (0, 1), got " + std::to_string(test_fraction));
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.series_id());
  if (ids.size() < 2) throw ConfigError("split_grouped: need at least 2 series, got " + std::to_string(ids.size()));
  std::vector<std::string> groups(ids.begin(), ids.end());
  Rng rng(seed);
  rng.shuffle(groups);
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(groups.size()) * test_fraction + 1e-9));
  const std::set<std::string> test_ids(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_test));
  Split s;
  for (const auto& r : records) (test_ids.count(r.series_id()) ? s.test : s.train).push_back(r);
  return s;
}

inline std::string record_to_json(const PairRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["source"] = std::string(to_string(r.source));
  j["desc_type"] = std::string(to_string(r.desc_type));
  j["text"] = r.text;
  j["series"] = r.series;
  return j.dump();
}

inline PairRecord record_from_json(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  if (!j.is_object()) throw FormatError("record is not a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "id" && k != "source" && k != "desc_type" && k != "text" && k != "series")
      throw FormatError("unexpected field '" + k + "'");
  PairRecord r;
  r.id = j.at("id").get<std::string>();
  const auto src = parse_source(j.at("source").get<std::string>());
  if (!src) throw FormatError("unknown source '" + j.at("source").get<std::string>() + "'");
  const auto dt = parse_desc_type(j.at("desc_type").get<std::string>());
  if (!dt) throw FormatError("unknown desc_type '" + j.at("desc_type").get<std::string>() + "'");
  r.source = *src;
  r.desc_type = *dt;
  r.text = j.at("text").get<std::string>();
  r.series = j.at("series").get<std::vector<double>>();
  return r;
}

/// Writes records sorted by id, one JSON object per line.
inline void write_corpus(const std::filesystem::path& path, std::vector<PairRecord> records) {
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& r : records) out << record_to_json(r) << '\n';
  if (!out) throw FormatError("write failed: " + path.string());
}

/// Schema errors name the file and line.
inline std::vector<PairRecord> read_corpus(const std::filesystem::path& path, std::size_t length) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read corpus " + path.string());
  std::vector<PairRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      PairRecord r = record_from_json(line);
      r.check(length);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace tsdiffuse
