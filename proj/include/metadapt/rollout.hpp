#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "metadapt/autodiff.hpp"
#include "metadapt/digest.hpp"
#include "metadapt/environment.hpp"
#include "metadapt/error.hpp"
#include "metadapt/format.hpp"
#include "metadapt/policy.hpp"
#include "metadapt/rng.hpp"

namespace metadapt {

// One episode. rewards[t] is the reward received after actions(t).
struct Trajectory {
  ad::Array observations;  // H x obs_dim
  ad::Array actions;       // H x action_dim, unclipped
  std::vector<double> rewards;

  [[nodiscard]] std::size_t length() const { return rewards.size(); }
};

struct Dataset {
  TaskSpec task;
  std::vector<Trajectory> trajectories;
  std::uint64_t behavior_params_digest = 0;
  // Per-trajectory weights in the surrogate loss. Empty means 1/N each.
  std::vector<double> weights;

  [[nodiscard]] std::size_t size() const { return trajectories.size(); }

  [[nodiscard]] double weight(std::size_t i) const {
    return weights.empty() ? 1.0 / static_cast<double>(trajectories.size()) : weights[i];
  }

  [[nodiscard]] std::size_t total_steps() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.length();
    return n;
  }

  // All observations (or actions) stacked trajectory-major.
  [[nodiscard]] ad::Array stacked_observations() const { return stack(&Trajectory::observations); }
  [[nodiscard]] ad::Array stacked_actions() const { return stack(&Trajectory::actions); }

 private:
  ad::Array stack(ad::Array Trajectory::*field) const {
    if (trajectories.empty()) throw Error("empty dataset");
    const std::size_t cols = (trajectories.front().*field).cols();
    ad::Array out(ad::Shape{total_steps(), cols});
    std::size_t row = 0;
    for (const auto& t : trajectories) {
      const ad::Array& a = t.*field;
      std::copy(a.data.begin(), a.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(row * cols));
      row += a.rows();
    }
    return out;
  }
};

struct RolloutConfig {
  std::size_t num_trajectories = 20;
  double gamma = 0.95;

  void validate() const {
    if (num_trajectories < 1) throw Error("rollout.num_trajectories must be >= 1");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error("rollout.gamma must lie in [0, 1]");
  }
};

struct ReturnSeries {
  std::vector<double> values;  // values[t] = G_t
};

// G_t = r_t + gamma * G_{t+1}, truncated at the episode end.
inline ReturnSeries discounted_return_series(std::span<const double> rewards, double gamma) {
  if (rewards.empty()) throw Error("discounted_return_series on an empty trajectory");
  ReturnSeries out;
  out.values.resize(rewards.size());
  double running = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    running = rewards[t] + gamma * running;
    out.values[t] = running;
  }
  return out;
}

inline ReturnSeries discounted_return_series(const Trajectory& traj, double gamma) {
  return discounted_return_series(traj.rewards, gamma);
}

inline double discounted_return(std::span<const double> rewards, double gamma) {
  return discounted_return_series(rewards, gamma).values.front();
}

inline double mean_return(const Dataset& d, double gamma) {
  double s = 0.0;
  for (const auto& t : d.trajectories) s += discounted_return(t.rewards, gamma);
  return s / static_cast<double>(d.size());
}

inline std::vector<double> episode_returns(const Dataset& d, double gamma) {
  std::vector<double> out;
  out.reserve(d.size());
  for (const auto& t : d.trajectories) out.push_back(discounted_return(t.rewards, gamma));
  return out;
}

// Runs cfg.num_trajectories episodes of `task` under `params`. Trajectory i
// draws its initial state and action noise from rng.child(i), so two calls
// with the same stream share noise per trajectory index.
inline Dataset collect_dataset(const TaskSpec& task, const PolicyParams& params, const RolloutConfig& cfg,
                               const EnvConstants& env, const RngStream& rng) {
  cfg.validate();
  task.validate();
  if (params.arch.obs_dim != 1) throw ShapeError("point-mass tasks observe velocity only (obs_dim must be 1)");
  if (params.arch.action_dim != 1) throw ShapeError("point-mass tasks take a single action (action_dim must be 1)");

  const std::size_t n = cfg.num_trajectories;
  const std::size_t horizon = env.horizon;
  Dataset ds;
  ds.task = task;
  ds.behavior_params_digest = fnv1a(params.flatten());
  ds.trajectories.resize(n);

  std::vector<RngStream> streams;
  std::vector<EnvState> states;
  streams.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    streams.push_back(rng.child(i));
    states.push_back(reset(task, streams.back()));
    auto& tr = ds.trajectories[i];
    tr.observations = ad::Array(ad::Shape{horizon, 1});
    tr.actions = ad::Array(ad::Shape{horizon, 1});
    tr.rewards.resize(horizon);
  }

  const double sigma = std::exp(params.log_std().data[0]);
  ad::Array obs(ad::Shape{n, 1});
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t i = 0; i < n; ++i) obs.data[i] = states[i].velocity;
    const ad::Array mu = policy_mean(params, obs);
    for (std::size_t i = 0; i < n; ++i) {
      const double action = mu.data[i] + sigma * streams[i].normal();
      const StepOutcome out = step(states[i], action, task, env);
      auto& tr = ds.trajectories[i];
      tr.observations.data[t] = states[i].velocity;
      tr.actions.data[t] = action;
      tr.rewards[t] = out.reward;
      states[i] = out.next_state;
    }
  }
  return ds;
}

// One row per step: traj_id,t,obs0..,action0..,reward
inline void write_dataset_csv(std::ostream& os, const Dataset& d) {
  if (d.trajectories.empty()) throw Error("empty dataset");
  const std::size_t od = d.trajectories.front().observations.cols();
  const std::size_t ad_ = d.trajectories.front().actions.cols();
  os << "traj_id,t";
  for (std::size_t j = 0; j < od; ++j) os << ",obs" << j;
  for (std::size_t j = 0; j < ad_; ++j) os << ",action" << j;
  os << ",reward\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& tr = d.trajectories[i];
    for (std::size_t t = 0; t < tr.length(); ++t) {
      os << i << ',' << t;
      for (std::size_t j = 0; j < od; ++j) os << ',' << fmt_double(tr.observations(t, j));
      for (std::size_t j = 0; j < ad_; ++j) os << ',' << fmt_double(tr.actions(t, j));
      os << ',' << fmt_double(tr.rewards[t]) << '\n';
    }
  }
}

}  // namespace metadapt
