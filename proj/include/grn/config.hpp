#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "grn/error.hpp"
#include "grn/model.hpp"
#include "grn/signal.hpp"
#include "grn/synchrony.hpp"
#include "grn/train.hpp"

namespace grn {

// Everything a command needs, fully resolved. Every field has a default.
struct RunConfig {
  SynthConfig synth;
  GrnConfig model;
  TrainConfig train;
  WelchConfig welch;
  // When set, must agree with the dataset; otherwise taken from it.
  std::optional<std::size_t> channels;
  std::optional<std::size_t> bands;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::size_t> k_r_values = default_k_r_values();
  std::vector<std::size_t> m_values = default_m_values();

  // Resolves C / B / n_classes against the data; mismatches are errors.
  GrnConfig resolve_model(const Dataset& ds, std::size_t n_bands) const {
    if (channels && *channels != ds.channels)
      throw ConfigError("config/dataset mismatch: channels = " + std::to_string(*channels) + " but dataset has C = " +
                        std::to_string(ds.channels));
    if (bands && *bands != n_bands)
      throw ConfigError("config/dataset mismatch: bands = " + std::to_string(*bands) + " but " +
                        std::to_string(n_bands) + " bands are defined");
    GrnConfig g = model;
    g.C = ds.channels;
    g.B = n_bands;
    g.n_classes = ds.n_classes;
    g.validate();
    return g;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

struct KeyHandler {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define GRN_KEY_NUM(name, field, type)                                                                    \
  {                                                                                                       \
    name, {                                                                                               \
      [](RunConfig& c, const std::string& v) { c.field = parse_number<type>(name, v); },                  \
          [](const RunConfig& c) { return fmt_value(c.field); }                                           \
    }                                                                                                     \
  }

template <typename T>
std::string fmt_value(T v) {
  if constexpr (std::is_floating_point_v<T>)
    return fmt_num(v);
  else
    return std::to_string(v);
}

inline const std::map<std::string, KeyHandler>& key_table() {
  static const std::map<std::string, KeyHandler> table = {
      GRN_KEY_NUM("synth.n_subjects", synth.n_subjects, std::size_t),
      GRN_KEY_NUM("synth.n_trials_per_class", synth.n_trials_per_class, std::size_t),
      GRN_KEY_NUM("synth.n_classes", synth.n_classes, std::size_t),
      GRN_KEY_NUM("synth.channels", synth.channels, std::size_t),
      GRN_KEY_NUM("synth.samples", synth.samples, std::size_t),
      GRN_KEY_NUM("synth.fs", synth.fs, double),
      GRN_KEY_NUM("synth.phase_jitter_std", synth.phase_jitter_std, double),
      GRN_KEY_NUM("synth.subject_noise_std", synth.subject_noise_std, double),
      GRN_KEY_NUM("synth.mixing_strength", synth.mixing_strength, double),
      GRN_KEY_NUM("synth.jitter_bandwidth_hz", synth.jitter_bandwidth_hz, double),
      GRN_KEY_NUM("synth.seed", synth.seed, std::uint64_t),
      GRN_KEY_NUM("model.d", model.d, std::size_t),
      GRN_KEY_NUM("model.M", model.M, std::size_t),
      GRN_KEY_NUM("model.K_r", model.K_r, std::size_t),
      GRN_KEY_NUM("model.hidden", model.hidden, std::size_t),
      GRN_KEY_NUM("model.conv_channels", model.conv_channels, std::size_t),
      GRN_KEY_NUM("model.lambda_proto", model.lambda_proto, double),
      GRN_KEY_NUM("model.temperature", model.temperature, double),
      {"model.C",
       {[](RunConfig& c, const std::string& v) { c.channels = parse_number<std::size_t>("model.C", v); },
        [](const RunConfig& c) { return c.channels ? std::to_string(*c.channels) : std::string("auto"); }}},
      {"model.B",
       {[](RunConfig& c, const std::string& v) { c.bands = parse_number<std::size_t>("model.B", v); },
        [](const RunConfig& c) { return c.bands ? std::to_string(*c.bands) : std::string("auto"); }}},
      GRN_KEY_NUM("train.batch_size", train.batch_size, std::size_t),
      GRN_KEY_NUM("train.max_epochs", train.max_epochs, std::size_t),
      GRN_KEY_NUM("train.patience", train.patience, std::size_t),
      GRN_KEY_NUM("train.lr", train.lr, double),
      GRN_KEY_NUM("train.weight_decay", train.weight_decay, double),
      GRN_KEY_NUM("train.seed", train.seed, std::uint64_t),
      GRN_KEY_NUM("train.val_frac", train.val_frac, double),
      GRN_KEY_NUM("train.test_frac", train.test_frac, double),
      {"train.variant",
       {[](RunConfig& c, const std::string& v) { c.train.variant = parse_variant(v); },
        [](const RunConfig& c) { return variant_name(c.train.variant); }}},
      {"train.inject_leak",
       {[](RunConfig& c, const std::string& v) { c.train.inject_leak = parse_bool("train.inject_leak", v); },
        [](const RunConfig& c) { return std::string(c.train.inject_leak ? "true" : "false"); }}},
      GRN_KEY_NUM("welch.segment_len", welch.segment_len, std::size_t),
      GRN_KEY_NUM("welch.overlap", welch.overlap, double),
      {"sweep.seeds",
       {[](RunConfig& c, const std::string& v) { c.seeds = parse_list<std::uint64_t>("sweep.seeds", v); },
        [](const RunConfig& c) { return join(c.seeds); }}},
      {"sweep.k_r_values",
       {[](RunConfig& c, const std::string& v) { c.k_r_values = parse_list<std::size_t>("sweep.k_r_values", v); },
        [](const RunConfig& c) { return join(c.k_r_values); }}},
      {"sweep.m_values",
       {[](RunConfig& c, const std::string& v) { c.m_values = parse_list<std::size_t>("sweep.m_values", v); },
        [](const RunConfig& c) { return join(c.m_values); }}},
  };
  return table;
}

#undef GRN_KEY_NUM

}  // namespace detail

// Flat `key = value` lines, `#` starts a comment. Unknown keys are errors.
inline RunConfig parse_config(std::istream& is, const std::string& source = "<config>") {
  RunConfig cfg;
  const auto& table = detail::key_table();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (value.empty()) throw ConfigError(where + ": empty value for '" + key + "'");
    try {
      it->second.set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  cfg.synth.validate();
  cfg.train.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  return parse_config(in, path);
}

// Every key with its resolved value, in key order.
inline std::vector<std::pair<std::string, std::string>> config_items(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [key, h] : detail::key_table()) out.emplace_back(key, h.get(cfg));
  return out;
}

inline void write_config(std::ostream& os, const RunConfig& cfg) {
  for (const auto& [k, v] : config_items(cfg)) os << k << " = " << v << '\n';
}

}  // namespace grn
