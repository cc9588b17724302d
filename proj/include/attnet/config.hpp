#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "attnet/errors.hpp"
#include "attnet/frontend.hpp"
#include "attnet/metrics.hpp"
#include "attnet/model.hpp"
#include "attnet/taskgen.hpp"
#include "attnet/trainer.hpp"

namespace attnet {

// Every knob of the pipeline, read from `key = value` lines.
struct RunConfig {
  // run
  std::uint64_t seed = 1;
  std::uint64_t frontend_seed = 7;
  std::string data_dir;  // empty: generate displays in memory

  // frontend / model
  std::size_t image_size = 56;
  std::size_t channels = 16;
  std::size_t it1_hidden = 128;
  std::size_t it2_hidden = 32;
  std::size_t dorsal_window = 0;  // 0 resolves to the map size

  // trainer
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double temperature = 1.0;
  double baseline_decay = 0.9;
  double policy_weight = 1.0;
  double entropy_weight = 0.0;
  std::size_t train_size = 2000;
  std::size_t val_size = 200;

  // taskgen
  int margin = 2;
  double target_intensity = 1.0;
  double distractor_intensity = 0.8;
  double noise_max = 0.2;
  int min_distractors = 4;
  int max_distractors = 7;

  // metrics
  double density_sigma = 1.0;

  // gradcheck
  double gradcheck_h = 1e-5;
  double gradcheck_tolerance = 1e-5;
  // Relative-error denominator floor: gradients below it are judged on
  // absolute error, since central differences cannot resolve them.
  double gradcheck_floor = 1e-4;
  bool gradcheck_inject_fault = false;

  std::size_t map_size() const { return image_size / FrontendConfig::reduction; }

  FrontendConfig frontend_config() const { return {image_size, channels}; }

  ModelConfig model_config() const { return {map_size(), channels, it1_hidden, it2_hidden, dorsal_window}; }

  TrainerConfig trainer_config() const {
    TrainerConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.temperature = temperature;
    t.baseline_decay = baseline_decay;
    t.policy_weight = policy_weight;
    t.entropy_weight = entropy_weight;
    t.seed = seed;
    return t;
  }

  DisplaySpec display_spec() const {
    DisplaySpec d;
    d.image_size = static_cast<int>(image_size);
    d.margin = margin;
    d.target_intensity = target_intensity;
    d.distractor_intensity = distractor_intensity;
    d.noise_max = noise_max;
    d.min_distractors = min_distractors;
    d.max_distractors = max_distractors;
    return d;
  }

  MapGeometry geometry() const {
    return {static_cast<int>(image_size), static_cast<int>(image_size), map_size(), map_size()};
  }

  // Validates every component config and fills in derived defaults.
  void resolve() {
    frontend_config().validate();
    if (dorsal_window == 0) dorsal_window = map_size();
    model_config().validate();
    trainer_config().validate();
    display_spec().validate();
    if (train_size == 0 || train_size % 2 != 0) throw ConfigError("train_size must be a positive even number");
    if (val_size == 0 || val_size % 2 != 0) throw ConfigError("val_size must be a positive even number");
    if (density_sigma < 0.0) throw ConfigError("density_sigma must be non-negative");
    if (!(gradcheck_h > 0.0) || !(gradcheck_tolerance > 0.0) || !(gradcheck_floor > 0.0)) throw ConfigError("gradcheck_h, gradcheck_tolerance and gradcheck_floor must be positive");
  }

  struct Field {
    const char* name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
  };

  static const std::vector<Field>& fields();

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string to_config_string(double v) { return format_real(v); }
inline std::string to_config_string(bool v) { return v ? "true" : "false"; }
inline std::string to_config_string(const std::string& v) { return v; }
template <class T>
std::string to_config_string(T v) {
  return std::to_string(v);
}

inline void from_config_string(const std::string&, const std::string& s, std::string& out) { out = s; }
inline void from_config_string(const std::string& key, const std::string& s, bool& out) {
  if (s == "true" || s == "1") {
    out = true;
  } else if (s == "false" || s == "0") {
    out = false;
  } else {
    throw ConfigError("config key " + key + ": expected true/false, got '" + s + "'");
  }
}
template <class T>
void from_config_string(const std::string& key, const std::string& s, T& out) {
  T v{};
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("config key " + key + ": cannot parse '" + s + "'");
  }
  out = v;
}

template <class T>
RunConfig::Field make_field(const char* name, T RunConfig::*member) {
  return {name, [member](const RunConfig& c) { return to_config_string(c.*member); },
          [member, name](RunConfig& c, const std::string& s) { from_config_string(name, s, c.*member); }};
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline const std::vector<RunConfig::Field>& RunConfig::fields() {
  using detail::make_field;
  static const std::vector<Field> table = {
      make_field("seed", &RunConfig::seed),
      make_field("frontend_seed", &RunConfig::frontend_seed),
      make_field("data_dir", &RunConfig::data_dir),
      make_field("image_size", &RunConfig::image_size),
      make_field("channels", &RunConfig::channels),
      make_field("it1_hidden", &RunConfig::it1_hidden),
      make_field("it2_hidden", &RunConfig::it2_hidden),
      make_field("dorsal_window", &RunConfig::dorsal_window),
      make_field("epochs", &RunConfig::epochs),
      make_field("batch_size", &RunConfig::batch_size),
      make_field("learning_rate", &RunConfig::learning_rate),
      make_field("temperature", &RunConfig::temperature),
      make_field("baseline_decay", &RunConfig::baseline_decay),
      make_field("policy_weight", &RunConfig::policy_weight),
      make_field("entropy_weight", &RunConfig::entropy_weight),
      make_field("train_size", &RunConfig::train_size),
      make_field("val_size", &RunConfig::val_size),
      make_field("margin", &RunConfig::margin),
      make_field("target_intensity", &RunConfig::target_intensity),
      make_field("distractor_intensity", &RunConfig::distractor_intensity),
      make_field("noise_max", &RunConfig::noise_max),
      make_field("min_distractors", &RunConfig::min_distractors),
      make_field("max_distractors", &RunConfig::max_distractors),
      make_field("density_sigma", &RunConfig::density_sigma),
      make_field("gradcheck_h", &RunConfig::gradcheck_h),
      make_field("gradcheck_tolerance", &RunConfig::gradcheck_tolerance),
      make_field("gradcheck_floor", &RunConfig::gradcheck_floor),
      make_field("gradcheck_inject_fault", &RunConfig::gradcheck_inject_fault),
  };
  return table;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : RunConfig::fields()) {
    if (key == f.name) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

// Parses `key = value` lines over the defaults. `#` starts a comment.
// The result is not yet resolved.
inline RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse_config(in);
}

inline std::string config_text(const RunConfig& cfg) {
  std::string s;
  for (const auto& f : RunConfig::fields()) s += std::string(f.name) + " = " + f.get(cfg) + "\n";
  return s;
}

}  // namespace attnet
