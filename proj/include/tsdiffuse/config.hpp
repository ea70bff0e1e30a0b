// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsdiffuse/error.hpp"
#include "tsdiffuse/rng.hpp"

namespace tsdiffuse {

struct ScheduleConfig {
  int steps = 500;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct DenoiserConfig {
  int base_channels = 32;
  int levels = 4;
  int kernel = 3;
  int groupnorm_groups = 8;
  int t_embed_dim = 64;
  std::vector<std::string> attn_levels{"enc3", "enc4", "dec1", "dec2"};
};

struct ConditionerConfig {
  int vocab_size = 2048;
  int width = 128;
  int layers = 4;
  int heads = 4;
  int max_len = 128;
  int ff_mult = 4;
};

struct TrainerConfig {
  int epochs = 30;
  int batch = 64;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Window (in optimizer steps) of the running loss used to pick best.tsd.
  int running_window = 50;
};

struct ForgeConfig {
  double test_fraction = 0.05;
  double stock_keep_fraction = 0.1;
  int stock_stride = 100;
  int ucr_per_dataset = 50;
};

struct PathsConfig {
  std::string corpus = "corpus";
  std::string checkpoints = "checkpoints";
  std::string reports = "reports";
};

struct RunConfig {
  std::uint64_t seed = 0;
  int length = 100;
  ScheduleConfig schedule;
  DenoiserConfig denoiser;
  ConditionerConfig conditioner;
  TrainerConfig trainer;
  ForgeConfig forge;
  PathsConfig paths;

  void validate() const;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

inline bool valid_attn_level(const std::string& name, int levels) {
  for (const char* prefix : {"enc", "dec"}) {
    if (name.rfind(prefix, 0) == 0 && name.size() > 3) {
      try {
        std::size_t used = 0;
        const int idx = std::stoi(name.substr(3), &used);
        return used == name.size() - 3 && idx >= 1 && idx <= levels;
      } catch (const std::exception&) {
        return false;
      }
    }
  }
  return false;
}

}  // namespace detail

inline void validate_schedule(int steps, double beta_start, double beta_end) {
  using detail::require;
  require(steps >= 1, "schedule.steps must be >= 1 (got " + std::to_string(steps) + ")");
  require(beta_start > 0.0, "schedule.beta_start must be > 0 (got " + std::to_string(beta_start) + ")");
  require(beta_start <= beta_end, "schedule.beta_start must be <= schedule.beta_end");
  require(beta_end < 1.0, "schedule.beta_end must be < 1 (got " + std::to_string(beta_end) + ")");
}

inline void validate(const DenoiserConfig& d) {
  using detail::require;
  require(d.base_channels >= 1, "denoiser.base_channels must be positive");
  require(d.levels >= 2, "denoiser.levels must be >= 2");
  require(d.kernel >= 1 && d.kernel % 2 == 1, "denoiser.kernel must be a positive odd integer");
  require(d.groupnorm_groups >= 1 && d.base_channels % d.groupnorm_groups == 0,
          "denoiser.groupnorm_groups must divide every channel count (base_channels=" +
              std::to_string(d.base_channels) + ")");
  require(d.t_embed_dim >= 2 && d.t_embed_dim % 2 == 0, "denoiser.t_embed_dim must be even");
  for (const auto& a : d.attn_levels)
    require(detail::valid_attn_level(a, d.levels), "denoiser.attn_levels: unknown hook '" + a + "'");
}

inline void validate(const ConditionerConfig& c) {
  using detail::require;
  require(c.vocab_size >= 5, "conditioner.vocab_size must be >= 5");
  require(c.width >= 1 && c.heads >= 1 && c.width % c.heads == 0, "conditioner.width must be divisible by heads");
  require(c.layers >= 0, "conditioner.layers must be >= 0");
  require(c.max_len >= 2, "conditioner.max_len must be >= 2");
  require(c.ff_mult >= 1, "conditioner.ff_mult must be >= 1");
}

inline void RunConfig::validate() const {
  using detail::require;
  require(length >= 2, "length must be >= 2");
  validate_schedule(schedule.steps, schedule.beta_start, schedule.beta_end);
  tsdiffuse::validate(denoiser);
  tsdiffuse::validate(conditioner);
  require(trainer.epochs >= 0, "trainer.epochs must be >= 0");
  require(trainer.batch >= 1, "trainer.batch must be >= 1");
  require(trainer.lr > 0.0, "trainer.lr must be > 0");
  require(trainer.running_window >= 1, "trainer.running_window must be >= 1");
  require(forge.test_fraction > 0.0 && forge.test_fraction < 1.0, "forge.test_fraction must be in (0, 1)");
  require(forge.stock_keep_fraction > 0.0 && forge.stock_keep_fraction <= 1.0,
          "forge.stock_keep_fraction must be in (0, 1]");
  require(forge.stock_stride >= 1, "forge.stock_stride must be >= 1");
  require(forge.ucr_per_dataset >= 1, "forge.ucr_per_dataset must be >= 1");
}

// ---------------------------------------------------------------------------
// JSON mapping. Parsing starts from defaults; unknown keys are rejected.

using json = nlohmann::json;

inline json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["length"] = c.length;
  j["schedule"] = {{"steps", c.schedule.steps}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
  j["denoiser"] = {{"base_channels", c.denoiser.base_channels}, {"levels", c.denoiser.levels},
                   {"kernel", c.denoiser.kernel},           {"groupnorm_groups", c.denoiser.groupnorm_groups},
                   {"t_embed_dim", c.denoiser.t_embed_dim}, {"attn_levels", c.denoiser.attn_levels}};
  j["conditioner"] = {{"vocab_size", c.conditioner.vocab_size}, {"width", c.conditioner.width},
                      {"layers", c.conditioner.layers},         {"heads", c.conditioner.heads},
                      {"max_len", c.conditioner.max_len},       {"ff_mult", c.conditioner.ff_mult}};
  j["trainer"] = {{"epochs", c.trainer.epochs}, {"batch", c.trainer.batch},
                  {"lr", c.trainer.lr},         {"beta1", c.trainer.beta1},
                  {"beta2", c.trainer.beta2},   {"adam_eps", c.trainer.adam_eps},
                  {"running_window", c.trainer.running_window}};
  j["forge"] = {{"test_fraction", c.forge.test_fraction},
                {"stock_keep_fraction", c.forge.stock_keep_fraction},
                {"stock_stride", c.forge.stock_stride},
                {"ucr_per_dataset", c.forge.ucr_per_dataset}};
  j["paths"] = {{"corpus", c.paths.corpus}, {"checkpoints", c.paths.checkpoints}, {"reports", c.paths.reports}};
  return j;
}

namespace detail {

template <class T>
void read_field(const json& obj, const std::string& section, const std::string& key, T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + (section.empty() ? key : section + "." + key) + "' has the wrong type");
  }
}

inline void reject_unknown(const json& obj, const std::string& section, std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown config key '" + (section.empty() ? it.key() : section + "." + it.key()) + "'");
  }
}

}  // namespace detail

inline RunConfig config_from_json(const json& j) {
  using detail::read_field;
  using detail::reject_unknown;
  RunConfig c;
  reject_unknown(j, "", {"seed", "length", "schedule", "denoiser", "conditioner", "trainer", "forge", "paths"});
  read_field(j, "", "seed", c.seed);
  read_field(j, "", "length", c.length);
  if (j.contains("schedule")) {
    const json& s = j["schedule"];
    reject_unknown(s, "schedule", {"steps", "beta_start", "beta_end"});
    read_field(s, "schedule", "steps", c.schedule.steps);
    read_field(s, "schedule", "beta_start", c.schedule.beta_start);
    read_field(s, "schedule", "beta_end", c.schedule.beta_end);
  }
  if (j.contains("denoiser")) {
    const json& s = j["denoiser"];
    reject_unknown(s, "denoiser", {"base_channels", "levels", "kernel", "groupnorm_groups", "t_embed_dim", "attn_levels"});
    read_field(s, "denoiser", "base_channels", c.denoiser.base_channels);
    read_field(s, "denoiser", "levels", c.denoiser.levels);
    read_field(s, "denoiser", "kernel", c.denoiser.kernel);
    read_field(s, "denoiser", "groupnorm_groups", c.denoiser.groupnorm_groups);
    read_field(s, "denoiser", "t_embed_dim", c.denoiser.t_embed_dim);
    read_field(s, "denoiser", "attn_levels", c.denoiser.attn_levels);
  }
  if (j.contains("conditioner")) {
    const json& s = j["conditioner"];
    reject_unknown(s, "conditioner", {"vocab_size", "width", "layers", "heads", "max_len", "ff_mult"});
    read_field(s, "conditioner", "vocab_size", c.conditioner.vocab_size);
    read_field(s, "conditioner", "width", c.conditioner.width);
    read_field(s, "conditioner", "layers", c.conditioner.layers);
    read_field(s, "conditioner", "heads", c.conditioner.heads);
    read_field(s, "conditioner", "max_len", c.conditioner.max_len);
    read_field(s, "conditioner", "ff_mult", c.conditioner.ff_mult);
  }
  if (j.contains("trainer")) {
    const json& s = j["trainer"];
    reject_unknown(s, "trainer", {"epochs", "batch", "lr", "beta1", "beta2", "adam_eps", "running_window"});
    read_field(s, "trainer", "epochs", c.trainer.epochs);
    read_field(s, "trainer", "batch", c.trainer.batch);
    read_field(s, "trainer", "lr", c.trainer.lr);
    read_field(s, "trainer", "beta1", c.trainer.beta1);
    read_field(s, "trainer", "beta2", c.trainer.beta2);
    read_field(s, "trainer", "adam_eps", c.trainer.adam_eps);
    read_field(s, "trainer", "running_window", c.trainer.running_window);
  }
  if (j.contains("forge")) {
    const json& s = j["forge"];
    reject_unknown(s, "forge", {"test_fraction", "stock_keep_fraction", "stock_stride", "ucr_per_dataset"});
    read_field(s, "forge", "test_fraction", c.forge.test_fraction);
    read_field(s, "forge", "stock_keep_fraction", c.forge.stock_keep_fraction);
    read_field(s, "forge", "stock_stride", c.forge.stock_stride);
    read_field(s, "forge", "ucr_per_dataset", c.forge.ucr_per_dataset);
  }
  if (j.contains("paths")) {
    const json& s = j["paths"];
    reject_unknown(s, "paths", {"corpus", "checkpoints", "reports"});
    read_field(s, "paths", "corpus", c.paths.corpus);
    read_field(s, "paths", "checkpoints", c.paths.checkpoints);
    read_field(s, "paths", "reports", c.paths.reports);
  }
  return c;
}

/// Compact JSON with sorted keys; the byte string the config hash covers.
inline std::string canonical_json(const RunConfig& c) { return to_json(c).dump(); }

inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical_json(c))));
  return buf;
}

/// Apply one dotted override such as "schedule.steps=100" to a JSON tree.
/// The value is parsed as JSON when possible, otherwise taken as a string.
inline void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  const std::string key = trim(assignment.substr(0, eq));
  const std::string raw = trim(assignment.substr(eq + 1));
  if (key.empty()) throw ConfigError("empty key in '" + assignment + "'");
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* cur = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*cur)[part] = value;
      break;
    }
    cur = &(*cur)[part];
    start = dot + 1;
  }
}

/// Parse a config document: JSON when it starts with '{', otherwise flat
/// `dotted.key = value` lines with '#' comments.
inline RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {}) {
  json root = json::object();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      root = json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  } else {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      apply_override(root, line);
    }
  }
  for (const auto& o : overrides) apply_override(root, o);
  RunConfig c = config_from_json(root);
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

}  // namespace tsdiffuse
