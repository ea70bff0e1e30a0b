// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

#include "tsdiffuse/error.hpp"

namespace tsdiffuse {

inline std::string xml_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

namespace detail {
inline std::string fmt_num(double v, const char* f = "%.2f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}
}  // namespace detail

/// Line plot of one series on a fixed 800x300 canvas, with the title on top
/// and y ticks at the series minimum, zero and maximum.
inline std::string render_svg(std::span<const double> values, std::string_view title,
                              std::string_view config_hash = {}) {
  if (values.empty()) throw ShapeError("render_svg: empty series");
  for (double v : values)
    if (!std::isfinite(v)) throw NumericError("render_svg: series contains NaN or Inf");
  constexpr double W = 800, H = 300, left = 60, right = 20, top = 40, bottom = 30;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double vmin = *lo_it, vmax = *hi_it;
  double lo = std::min(vmin, 0.0), hi = std::max(vmax, 0.0);
  if (hi - lo < 1e-12) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pw = W - left - right, ph = H - top - bottom;
  auto xpix = [&](std::size_t i) {
    return values.size() == 1 ? left + pw / 2 : left + pw * static_cast<double>(i) / static_cast<double>(values.size() - 1);
  };
  auto ypix = [&](double v) { return top + ph * (hi - v) / (hi - lo); };

  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  if (!config_hash.empty()) s += "<!-- config_hash=" + std::string(config_hash) + " -->\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 300\" width=\"800\" height=\"300\">\n";
  s += "  <title>" + xml_escape(title) + "</title>\n";
  s += "  <rect x=\"0\" y=\"0\" width=\"800\" height=\"300\" fill=\"white\"/>\n";
  s += "  <text x=\"400\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
       xml_escape(title) + "</text>\n";
  s += "  <line x1=\"" + detail::fmt_num(left) + "\" y1=\"" + detail::fmt_num(top) + "\" x2=\"" + detail::fmt_num(left) +
       "\" y2=\"" + detail::fmt_num(top + ph) + "\" stroke=\"black\"/>\n";
  s += "  <line x1=\"" + detail::fmt_num(left) + "\" y1=\"" + detail::fmt_num(top + ph) + "\" x2=\"" +
       detail::fmt_num(left + pw) + "\" y2=\"" + detail::fmt_num(top + ph) + "\" stroke=\"black\"/>\n";
  double last_y = -1e9;
  for (double tick : {vmax, 0.0, vmin}) {
    const double y = ypix(tick);
    if (std::abs(y - last_y) < 1e-9) continue;  // min == 0 or max == 0
    last_y = y;
    s += "  <line x1=\"" + detail::fmt_num(left - 5) + "\" y1=\"" + detail::fmt_num(y) + "\" x2=\"" +
         detail::fmt_num(left) + "\" y2=\"" + detail::fmt_num(y) + "\" stroke=\"black\"/>\n";
    s += "  <text x=\"" + detail::fmt_num(left - 8) + "\" y=\"" + detail::fmt_num(y + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + detail::fmt_num(tick, "%.3g") +
         "</text>\n";
  }
  s += "  <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ' ';
    s += detail::fmt_num(xpix(i)) + "," + detail::fmt_num(ypix(values[i]));
  }
  s += "\"/>\n</svg>\n";
  return s;
}

}  // namespace tsdiffuse
