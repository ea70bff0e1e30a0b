// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tsdiffuse/error.hpp"

namespace tsdiffuse {

enum class Source { stock, ucr, synthetic, truce };

/// Description types in report order.
enum class DescType { short_, medium, long_, creative, resembles, truce };

inline constexpr std::array<Source, 4> kAllSources{Source::stock, Source::ucr, Source::synthetic, Source::truce};
inline constexpr std::array<DescType, 6> kAllDescTypes{DescType::short_,   DescType::medium,    DescType::long_,
                                                       DescType::creative, DescType::resembles, DescType::truce};

inline std::string_view to_string(Source s) {
  switch (s) {
    case Source::stock: return "stock";
    case Source::ucr: return "ucr";
    case Source::synthetic: return "synthetic";
    case Source::truce: return "truce";
  }
  return "?";
}

inline std::string_view to_string(DescType d) {
  switch (d) {
    case DescType::short_: return "short";
    case DescType::medium: return "medium";
    case DescType::long_: return "long";
    case DescType::creative: return "creative";
    case DescType::resembles: return "resembles";
    case DescType::truce: return "truce";
  }
  return "?";
}

inline std::optional<Source> parse_source(std::string_view s) {
  for (Source v : kAllSources)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

inline std::optional<DescType> parse_desc_type(std::string_view s) {
  for (DescType v : kAllDescTypes)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

/// One (description, series) training pair.
///
/// Ids have the form "<series id>/<suffix>"; every description of one
/// underlying series shares the part before the last '/'.
struct PairRecord {
  std::string id;
  Source source = Source::synthetic;
  DescType desc_type = DescType::short_;
  std::string text;
  std::vector<double> series;

  std::string series_id() const {
    const auto slash = id.rfind('/');
    return slash == std::string::npos ? id : id.substr(0, slash);
  }

  /// Throws FormatError when the record breaks the pair invariants.
  void check(std::size_t length) const {
    if (id.empty()) throw FormatError("record has an empty id");
    if (text.empty()) throw FormatError("record '" + id + "' has empty text");
    if (series.size() != length)
      throw FormatError("record '" + id + "' has " + std::to_string(series.size()) + " values, expected " +
                        std::to_string(length));
    if ((desc_type == DescType::truce) != (source == Source::truce))
      throw FormatError("record '" + id + "': desc_type truce is reserved for source truce");
  }
};

}  // namespace tsdiffuse
