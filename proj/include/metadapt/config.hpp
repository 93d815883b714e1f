#pragma once

// Flat `key = value` configuration with dotted section names.
//
//   # comment
//   inner.alpha = 0.1
//   policy.hidden_sizes = 32,32
//
// Every key has a default; unknown keys and malformed values are errors.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "metadapt/analysis.hpp"
#include "metadapt/digest.hpp"
#include "metadapt/environment.hpp"
#include "metadapt/error.hpp"
#include "metadapt/format.hpp"
#include "metadapt/maml.hpp"
#include "metadapt/policy.hpp"
#include "metadapt/safe_meta.hpp"
#include "metadapt/train.hpp"

namespace metadapt {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct SweepSettings {
  double low = 0.0;
  double high = 3.0;
  double step = 0.1;
  EvalConfig eval;
};

struct Config {
  std::uint64_t seed = 0;
  TaskFamily family = TaskFamily::GoalVelocity;
  EnvConstants env;
  double task_low = 0.0;
  double task_high = 2.0;
  RolloutConfig rollout;
  AdaptConfig adapt;
  MetaConfig meta;
  Baseline baseline = Baseline::None;
  PolicyArchitecture arch;
  double log_std_init = -0.5;
  bool safe_enabled = false;
  SafetyConfig safety;
  SweepSettings sweep;
  std::size_t workers = 1;

  [[nodiscard]] MamlSettings maml() const { return {env, rollout, adapt, baseline}; }

  [[nodiscard]] TaskDistribution task_distribution() const { return {family, task_low, task_high}; }

  [[nodiscard]] TrainConfig train_config() const {
    TrainConfig t;
    t.arch = arch;
    t.log_std_init = log_std_init;
    t.maml = maml();
    t.meta = meta;
    t.tasks = task_distribution();
    if (safe_enabled) t.safety = safety;
    t.workers = workers;
    return t;
  }

  [[nodiscard]] std::vector<TaskSpec> sweep_grid() const { return task_grid(family, sweep.low, sweep.high, sweep.step); }

  [[nodiscard]] std::pair<double, double> training_range() const {
    if (family == TaskFamily::GoalDirection) return {-1.0, 1.0};
    return {task_low, task_high};
  }

  void validate() const {
    try {
      train_config().validate();
      safety.validate();
      sweep.eval.validate();
      if (!(sweep.step > 0.0)) throw Error("sweep.step must be > 0");
      if (!(sweep.low <= sweep.high)) throw Error("sweep.low must be <= sweep.high");
      if (family == TaskFamily::GoalVelocity && !(sweep.low >= 0.0))
        throw Error("sweep.low must be >= 0 for goal_velocity");
      if (family == TaskFamily::GoalVelocity && !(task_low >= 0.0))
        throw Error("task.low must be >= 0 for goal_velocity");
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(std::string("invalid configuration: ") + e.what());
    }
  }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

inline std::size_t parse_count(const std::string& s) { return static_cast<std::size_t>(parse_u64(s)); }

inline double parse_real(const std::string& s) {
  try {
    return parse_double(s);
  } catch (const Error&) {
    throw ConfigError("expected a number, got '" + s + "'");
  }
}

inline bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  std::string_view rest = s;
  while (true) {
    const auto comma = rest.find(',');
    out.push_back(parse_count(trim(rest.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::string bool_text(bool b) { return b ? "true" : "false"; }

struct Key {
  std::string name;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

#define METADAPT_REAL(key, field) \
  Key { key, [](Config& c, const std::string& v) { c.field = parse_real(v); }, [](const Config& c) { return fmt_double(c.field); } }
#define METADAPT_COUNT(key, field) \
  Key { key, [](Config& c, const std::string& v) { c.field = parse_count(v); }, [](const Config& c) { return std::to_string(c.field); } }
#define METADAPT_BOOL(key, field) \
  Key { key, [](Config& c, const std::string& v) { c.field = parse_bool(v); }, [](const Config& c) { return bool_text(c.field); } }

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      {"seed", [](Config& c, const std::string& v) { c.seed = parse_u64(v); },
       [](const Config& c) { return std::to_string(c.seed); }},
      {"env.family", [](Config& c, const std::string& v) { c.family = parse_task_family(v); },
       [](const Config& c) { return to_string(c.family); }},
      METADAPT_COUNT("env.horizon", env.horizon),
      METADAPT_REAL("env.dt", env.dt),
      METADAPT_REAL("env.v_max", env.v_max),
      METADAPT_REAL("env.c_ctrl", env.c_ctrl),
      METADAPT_REAL("task.low", task_low),
      METADAPT_REAL("task.high", task_high),
      METADAPT_COUNT("rollout.num_trajectories", rollout.num_trajectories),
      METADAPT_REAL("rollout.gamma", rollout.gamma),
      METADAPT_REAL("inner.alpha", adapt.alpha),
      METADAPT_BOOL("inner.first_order", adapt.first_order),
      METADAPT_COUNT("outer.meta_batch_size", meta.meta_batch_size),
      METADAPT_COUNT("outer.iterations", meta.iterations),
      METADAPT_REAL("outer.lr", meta.outer_lr),
      {"outer.optimizer", [](Config& c, const std::string& v) { c.meta.optimizer = parse_optimizer(v); },
       [](const Config& c) { return to_string(c.meta.optimizer); }},
      METADAPT_REAL("outer.adam_beta1", meta.adam_beta1),
      METADAPT_REAL("outer.adam_beta2", meta.adam_beta2),
      METADAPT_REAL("outer.adam_epsilon", meta.adam_epsilon),
      {"outer.grad_clip_norm",
       [](Config& c, const std::string& v) {
         c.meta.grad_clip_norm = v == "none" ? std::nullopt : std::optional<double>(parse_real(v));
       },
       [](const Config& c) { return c.meta.grad_clip_norm ? fmt_double(*c.meta.grad_clip_norm) : "none"; }},
      {"outer.baseline", [](Config& c, const std::string& v) { c.baseline = parse_baseline(v); },
       [](const Config& c) { return to_string(c.baseline); }},
      {"policy.hidden_sizes", [](Config& c, const std::string& v) { c.arch.hidden_sizes = parse_sizes(v); },
       [](const Config& c) { return join_sizes(c.arch.hidden_sizes); }},
      METADAPT_REAL("policy.log_std_init", log_std_init),
      METADAPT_BOOL("safe.enabled", safe_enabled),
      METADAPT_REAL("safe.lambda", safety.lambda),
      METADAPT_REAL("safe.beta", safety.beta),
      METADAPT_REAL("safe.delta", safety.delta),
      METADAPT_REAL("safe.dual_lr", safety.dual_lr),
      METADAPT_COUNT("safe.eval_trajectories", safety.eval_trajectories),
      METADAPT_REAL("sweep.low", sweep.low),
      METADAPT_REAL("sweep.high", sweep.high),
      METADAPT_REAL("sweep.step", sweep.step),
      METADAPT_COUNT("sweep.eval_rollouts", sweep.eval.eval_rollouts),
      METADAPT_REAL("sweep.gamma_eval", sweep.eval.gamma_eval),
      {"sweep.flag_rule", [](Config& c, const std::string& v) { c.sweep.eval.flag_rule = parse_flag_rule(v); },
       [](const Config& c) { return to_string(c.sweep.eval.flag_rule); }},
      METADAPT_COUNT("runtime.workers", workers),
  };
  return table;
}

#undef METADAPT_REAL
#undef METADAPT_COUNT
#undef METADAPT_BOOL

inline const Key& find_key(const std::string& name) {
  for (const auto& k : keys())
    if (k.name == name) return k;
  throw ConfigError("unknown configuration key '" + name + "'");
}

}  // namespace config_detail

// Applies one `key = value` assignment.
inline void set_config_value(Config& c, const std::string& key, const std::string& value) {
  const auto& k = config_detail::find_key(key);
  try {
    k.set(c, value);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  } catch (const Error& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

// Parses `key=value` (as given to --set).
inline void apply_override(Config& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set_config_value(c, config_detail::trim(std::string_view(assignment).substr(0, eq)),
                   config_detail::trim(std::string_view(assignment).substr(eq + 1)));
}

// Assignments on top of `base`; the result is not validated.
inline Config parse_config_text(const std::string& text, Config base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const std::string body = config_detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = "line " + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = config_detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = config_detail::trim(std::string_view(body).substr(eq + 1));
    for (const auto& s : seen)
      if (s == key) throw ConfigError(where + ": duplicate key '" + key + "'");
    seen.push_back(key);
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return base;
}

inline Config load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Every key with its effective value, one per line, in table order.
inline std::string resolved_text(const Config& c) {
  std::string out;
  for (const auto& k : config_detail::keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

// Digest over everything that can change results; runtime.* keys only
// affect scheduling and are left out.
inline std::uint64_t config_digest(const Config& c) {
  std::string text;
  for (const auto& k : config_detail::keys())
    if (!k.name.starts_with("runtime.")) text += k.name + " = " + k.get(c) + "\n";
  return fnv1a(text);
}

}  // namespace metadapt
