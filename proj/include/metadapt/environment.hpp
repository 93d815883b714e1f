#pragma once

// One-dimensional point-mass control tasks. Every task shares the same
// dynamics; only the reward depends on the task parameter.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "metadapt/error.hpp"
#include "metadapt/rng.hpp"

namespace metadapt {

enum class TaskFamily { GoalVelocity, GoalDirection };

inline std::string to_string(TaskFamily f) {
  return f == TaskFamily::GoalVelocity ? "goal_velocity" : "goal_direction";
}

inline TaskFamily parse_task_family(const std::string& s) {
  if (s == "goal_velocity") return TaskFamily::GoalVelocity;
  if (s == "goal_direction") return TaskFamily::GoalDirection;
  throw Error("unknown task family '" + s + "' (expected goal_velocity or goal_direction)");
}

struct TaskSpec {
  TaskFamily family = TaskFamily::GoalVelocity;
  double parameter = 0.0;  // goal velocity, or direction sign

  static TaskSpec goal_velocity(double v_goal) { return TaskSpec{TaskFamily::GoalVelocity, v_goal}.validated(); }
  static TaskSpec goal_direction(double d) { return TaskSpec{TaskFamily::GoalDirection, d}.validated(); }

  void validate() const {
    if (family == TaskFamily::GoalDirection) {
      if (parameter != -1.0 && parameter != 1.0) {
        throw Error("goal_direction parameter must be -1 or +1, got " + std::to_string(parameter));
      }
    } else if (!std::isfinite(parameter) || parameter < 0.0) {
      throw Error("goal_velocity parameter must be finite and >= 0, got " + std::to_string(parameter));
    }
  }

  [[nodiscard]] TaskSpec validated() const {
    validate();
    return *this;
  }

  bool operator==(const TaskSpec&) const = default;
};

struct EnvConstants {
  double dt = 0.1;
  double v_max = 3.0;
  double c_ctrl = 0.01;
  std::size_t horizon = 100;

  void validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw Error("env.dt must be > 0");
    if (!(v_max > 0.0) || !std::isfinite(v_max)) throw Error("env.v_max must be > 0");
    if (!(c_ctrl >= 0.0) || !std::isfinite(c_ctrl)) throw Error("env.c_ctrl must be >= 0");
    if (horizon < 1) throw Error("env.horizon must be >= 1");
  }
};

struct EnvState {
  double position = 0.0;
  double velocity = 0.0;
  std::size_t step_index = 0;
};

struct StepOutcome {
  EnvState next_state;
  double reward = 0.0;
  bool done = false;
};

struct TaskDistribution {
  TaskFamily family = TaskFamily::GoalVelocity;
  double low = 0.0;
  double high = 2.0;

  void validate() const {
    if (family == TaskFamily::GoalVelocity) {
      if (!std::isfinite(low) || !std::isfinite(high) || low < 0.0 || low > high) {
        throw Error("task distribution needs 0 <= low <= high");
      }
    }
  }
};

inline EnvState reset(const TaskSpec& task, RngStream& rng) {
  task.validate();
  EnvState s;
  s.velocity = rng.uniform(-0.05, 0.05);
  return s;
}

inline double task_reward(const TaskSpec& task, double next_velocity, double clipped_action, const EnvConstants& env) {
  const double control = env.c_ctrl * clipped_action * clipped_action;
  if (task.family == TaskFamily::GoalVelocity) return -std::fabs(next_velocity - task.parameter) - control;
  return task.parameter * next_velocity - control;
}

inline StepOutcome step(const EnvState& state, double action, const TaskSpec& task, const EnvConstants& env) {
  if (state.step_index >= env.horizon) throw Error("step() called on a finished episode");
  const double a = std::clamp(action, -1.0, 1.0);
  StepOutcome out;
  out.next_state.velocity = std::clamp(state.velocity + env.dt * a, -env.v_max, env.v_max);
  out.next_state.position = state.position + env.dt * out.next_state.velocity;
  out.next_state.step_index = state.step_index + 1;
  out.reward = task_reward(task, out.next_state.velocity, a, env);
  out.done = out.next_state.step_index == env.horizon;
  return out;
}

inline std::vector<TaskSpec> sample_tasks(const TaskDistribution& dist, std::size_t n, RngStream& rng) {
  if (n < 1) throw Error("sample_tasks requires n >= 1");
  dist.validate();
  std::vector<TaskSpec> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (dist.family == TaskFamily::GoalVelocity) {
      const double v = dist.low == dist.high ? dist.low : rng.uniform(dist.low, dist.high);
      out.push_back(TaskSpec::goal_velocity(v));
    } else {
      out.push_back(TaskSpec::goal_direction(rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0));
    }
  }
  return out;
}

// Evenly spaced tasks low, low+step, ... up to high (inclusive within 1e-9).
// The direction family always yields {-1, +1}.
inline std::vector<TaskSpec> task_grid(TaskFamily family, double low, double high, double step) {
  if (!(step > 0.0)) throw Error("task_grid step must be > 0");
  if (family == TaskFamily::GoalDirection) {
    return {TaskSpec::goal_direction(-1.0), TaskSpec::goal_direction(1.0)};
  }
  if (!(low <= high)) throw Error("task_grid requires low <= high");
  const auto count = static_cast<std::size_t>(std::floor((high - low) / step + 1e-9)) + 1;
  std::vector<TaskSpec> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    // Rounded to 12 decimals so 0.1 * 3 comes out as 0.3.
    const double v = std::round((low + static_cast<double>(i) * step) * 1e12) / 1e12;
    out.push_back(TaskSpec::goal_velocity(std::min(v, high)));
  }
  return out;
}

}  // namespace metadapt
