#pragma once

// Exact-enumeration verification bed: a tiny finite MDP with a softmax
// policy, where every trajectory can be listed with its probability. The
// sampled REINFORCE and MAML code paths are fed the full enumeration with
// exact probabilities as trajectory weights, which turns Monte-Carlo
// estimates into exact expectations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "metadapt/autodiff.hpp"
#include "metadapt/error.hpp"
#include "metadapt/maml.hpp"
#include "metadapt/rollout.hpp"

namespace metadapt::oracle {

inline constexpr std::size_t kMaxOutcomes = 1'000'000;

struct EnumerableMDP {
  std::size_t n_states = 1;
  std::size_t n_actions = 2;
  std::size_t horizon = 1;
  std::vector<double> transitions;  // [s][a][s']
  std::vector<double> rewards;      // [s][a]
  std::vector<double> initial;      // [s]
  double gamma = 1.0;

  [[nodiscard]] double p(std::size_t s, std::size_t a, std::size_t next) const {
    return transitions[(s * n_actions + a) * n_states + next];
  }
  [[nodiscard]] double r(std::size_t s, std::size_t a) const { return rewards[s * n_actions + a]; }

  void validate() const {
    if (n_states < 1 || n_states > 4) throw Error("enumerable MDP needs 1..4 states");
    if (n_actions < 1 || n_actions > 3) throw Error("enumerable MDP needs 1..3 actions");
    if (horizon < 1 || horizon > 4) throw Error("enumerable MDP needs horizon 1..4");
    if (transitions.size() != n_states * n_actions * n_states || rewards.size() != n_states * n_actions ||
        initial.size() != n_states) {
      throw ShapeError("enumerable MDP table sizes do not match its dimensions");
    }
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error("gamma must lie in [0, 1]");
    auto check_row = [](std::span<const double> row) {
      double total = 0.0;
      for (double v : row) {
        if (!(v >= 0.0)) throw Error("negative probability in enumerable MDP");
        total += v;
      }
      if (std::fabs(total - 1.0) > 1e-12) throw Error("probability row does not sum to 1");
    };
    check_row(initial);
    for (std::size_t s = 0; s < n_states; ++s)
      for (std::size_t a = 0; a < n_actions; ++a)
        check_row(std::span<const double>(transitions).subspan((s * n_actions + a) * n_states, n_states));
  }
};

// Softmax over actions, one row of logits per state.
class CategoricalPolicy {
 public:
  CategoricalPolicy(std::size_t n_states, std::size_t n_actions) : n_states_(n_states), n_actions_(n_actions) {}

  [[nodiscard]] ad::Shape logits_shape() const { return {n_states_, n_actions_}; }

  std::vector<ad::Node> declare_parameters(ad::Graph& g) const { return {g.parameter(logits_shape(), "logits")}; }

  // Observations and actions are integer indices stored as doubles (m x 1).
  [[nodiscard]] ad::Node log_prob_column(std::span<const ad::Node> params, const ad::Array& observations,
                                         const ad::Array& actions) const {
    const std::size_t m = observations.rows();
    ad::Array state_onehot(ad::Shape{m, n_states_});
    ad::Array action_onehot(ad::Shape{m, n_actions_});
    for (std::size_t r = 0; r < m; ++r) {
      state_onehot(r, static_cast<std::size_t>(observations.data[r])) = 1.0;
      action_onehot(r, static_cast<std::size_t>(actions.data[r])) = 1.0;
    }
    ad::Graph& g = *params.front().graph;
    const ad::Node row_logits = ad::matmul(g.constant(state_onehot), params.front());
    const ad::Node chosen = ad::sum_cols(row_logits * g.constant(action_onehot));
    const ad::Node log_normalizer = ad::log(ad::sum_cols(ad::exp(row_logits)));
    return chosen - log_normalizer;
  }

  // pi(a | s) from numeric logits.
  [[nodiscard]] double probability(const ad::Array& logits, std::size_t s, std::size_t a) const {
    double mx = logits(s, 0);
    for (std::size_t k = 1; k < n_actions_; ++k) mx = std::max(mx, logits(s, k));
    double z = 0.0;
    for (std::size_t k = 0; k < n_actions_; ++k) z += std::exp(logits(s, k) - mx);
    return std::exp(logits(s, a) - mx) / z;
  }

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
};

struct EnumeratedTrajectory {
  std::vector<std::size_t> states;   // s_0 .. s_{H-1}
  std::vector<std::size_t> actions;  // a_0 .. a_{H-1}
  std::vector<double> rewards;       // r(s_t, a_t)
  double probability = 0.0;          // under the policy
  double log_env_probability = 0.0;  // initial state and transitions only
};

// Every (state, action) sequence of positive environment probability, with
// its exact probability under `logits`.
inline std::vector<EnumeratedTrajectory> enumerate_trajectories(const EnumerableMDP& mdp, const ad::Array& logits) {
  mdp.validate();
  if (logits.shape != ad::Shape{mdp.n_states, mdp.n_actions}) throw ShapeError("logits shape does not match MDP");
  double bound = static_cast<double>(mdp.n_states);
  for (std::size_t t = 0; t < mdp.horizon; ++t) bound *= static_cast<double>(mdp.n_actions * mdp.n_states);
  if (bound > static_cast<double>(kMaxOutcomes)) throw Error("enumeration exceeds the outcome guard");

  const CategoricalPolicy policy(mdp.n_states, mdp.n_actions);
  std::vector<EnumeratedTrajectory> out;
  EnumeratedTrajectory partial;

  // Depth-first over (action, next state) choices.
  auto expand = [&](auto&& self, std::size_t s, double prob, double log_env) -> void {
    const std::size_t t = partial.states.size();
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      partial.states.push_back(s);
      partial.actions.push_back(a);
      partial.rewards.push_back(mdp.r(s, a));
      const double pa = prob * policy.probability(logits, s, a);
      if (t + 1 == mdp.horizon) {
        EnumeratedTrajectory done = partial;
        done.probability = pa;
        done.log_env_probability = log_env;
        out.push_back(std::move(done));
      } else {
        for (std::size_t next = 0; next < mdp.n_states; ++next) {
          const double pt = mdp.p(s, a, next);
          if (pt > 0.0) self(self, next, pa * pt, log_env + std::log(pt));
        }
      }
      partial.states.pop_back();
      partial.actions.pop_back();
      partial.rewards.pop_back();
    }
  };
  for (std::size_t s = 0; s < mdp.n_states; ++s)
    if (mdp.initial[s] > 0.0) expand(expand, s, mdp.initial[s], std::log(mdp.initial[s]));
  return out;
}

inline Trajectory to_trajectory(const EnumeratedTrajectory& e) {
  Trajectory t;
  const std::size_t h = e.states.size();
  t.observations = ad::Array(ad::Shape{h, 1});
  t.actions = ad::Array(ad::Shape{h, 1});
  for (std::size_t k = 0; k < h; ++k) {
    t.observations.data[k] = static_cast<double>(e.states[k]);
    t.actions.data[k] = static_cast<double>(e.actions[k]);
  }
  t.rewards = e.rewards;
  return t;
}

// The full enumeration as a dataset whose weights are exact probabilities.
inline Dataset weighted_dataset(const std::vector<EnumeratedTrajectory>& all) {
  Dataset d;
  for (const auto& e : all) {
    d.trajectories.push_back(to_trajectory(e));
    d.weights.push_back(e.probability);
  }
  return d;
}

// E_tau[-sum_t gamma^t G_t log pi(a_t|s_t)] with the trajectory probabilities
// taken at the current value of `logits` and held constant, so the gradient
// is the expected REINFORCE gradient.
inline ad::Node exact_surrogate_loss(const EnumerableMDP& mdp, ad::Evaluator& eval, ad::Node logits,
                                     Baseline baseline = Baseline::None) {
  const Dataset d = weighted_dataset(enumerate_trajectories(mdp, eval.value(logits)));
  const CategoricalPolicy policy(mdp.n_states, mdp.n_actions);
  const ad::Node params[] = {logits};
  return reinforce_loss(policy, std::span<const ad::Node>(params), d, mdp.gamma, baseline);
}

// E_tau[G_0] as a fully differentiable function of the logits: the
// probabilities themselves are graph expressions.
inline ad::Node exact_expected_return(const EnumerableMDP& mdp, ad::Evaluator& eval, ad::Node logits) {
  const auto all = enumerate_trajectories(mdp, eval.value(logits));
  const Dataset d = weighted_dataset(all);
  const CategoricalPolicy policy(mdp.n_states, mdp.n_actions);
  const ad::Node params[] = {logits};
  const ad::Node log_probs = policy.log_prob_column(params, d.stacked_observations(), d.stacked_actions());

  // segment[i, r] = 1 when row r belongs to trajectory i
  ad::Array segment(ad::Shape{all.size(), d.total_steps()});
  ad::Array log_env(ad::Shape{all.size(), 1});
  ad::Array returns(ad::Shape{all.size(), 1});
  std::size_t row = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t k = 0; k < all[i].states.size(); ++k) segment(i, row++) = 1.0;
    log_env.data[i] = all[i].log_env_probability;
    returns.data[i] = discounted_return(all[i].rewards, mdp.gamma);
  }
  ad::Graph& g = *logits.graph;
  const ad::Node traj_prob = ad::exp(ad::matmul(g.constant(segment), log_probs) + g.constant(log_env));
  return ad::sum(traj_prob * g.constant(returns));
}

struct ExactMetaLoss {
  ad::Node loss;
  ad::Node adapted;  // theta' as an expression of theta
};

// theta' = theta - alpha * grad(exact surrogate at theta); loss = exact
// surrogate at theta'. Both sets of trajectory probabilities are constants
// fixed at the current bindings.
inline ExactMetaLoss exact_meta_loss(const EnumerableMDP& mdp, ad::Evaluator& eval, ad::Node logits, double alpha,
                                     bool first_order = false) {
  const ad::Node inner = exact_surrogate_loss(mdp, eval, logits);
  const ad::Node params[] = {logits};
  const AdaptConfig cfg{alpha, first_order};
  const ad::Node adapted = adapt_step(eval, params, inner, cfg).front();
  return {exact_surrogate_loss(mdp, eval, adapted), adapted};
}

inline double relative_error(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8});
}

// Sum over all trajectories of probability x (single-trajectory REINFORCE
// gradient), compared against the gradient of exact_surrogate_loss.
inline double estimator_consistency_check(const EnumerableMDP& mdp, const ad::Array& logits) {
  const CategoricalPolicy policy(mdp.n_states, mdp.n_actions);
  ad::Graph g;
  const ad::Node theta = g.parameter(logits.shape, "logits");
  ad::Evaluator eval(g, ad::Bindings{}.bind(theta, logits));
  const ad::Node params[] = {theta};

  const auto all = enumerate_trajectories(mdp, logits);
  std::vector<double> averaged(logits.size(), 0.0);
  for (const auto& e : all) {
    Dataset single;
    single.trajectories.push_back(to_trajectory(e));
    const ad::Node loss = reinforce_loss(policy, std::span<const ad::Node>(params), single, mdp.gamma);
    const ad::Array& grad = eval.value(g.gradient(loss, params).front());
    for (std::size_t k = 0; k < averaged.size(); ++k) averaged[k] += e.probability * grad.data[k];
  }

  const ad::Node exact = exact_surrogate_loss(mdp, eval, theta);
  const ad::Array& expected = eval.value(g.gradient(exact, params).front());
  double worst = 0.0;
  for (std::size_t k = 0; k < averaged.size(); ++k)
    worst = std::max(worst, relative_error(averaged[k], expected.data[k]));
  return worst;
}

// Hand-built beds.

// One state, two arms, horizon 1, rewards [1, 0].
inline EnumerableMDP two_arm_bandit() {
  EnumerableMDP m;
  m.n_states = 1;
  m.n_actions = 2;
  m.horizon = 1;
  m.transitions = {1.0, 1.0};
  m.rewards = {1.0, 0.0};
  m.initial = {1.0};
  m.gamma = 0.9;
  return m;
}

// Deterministic chain: action 1 moves right, action 0 stays; reward for
// acting in the right state.
inline EnumerableMDP two_state_chain() {
  EnumerableMDP m;
  m.n_states = 2;
  m.n_actions = 2;
  m.horizon = 3;
  m.transitions = {
      1.0, 0.0,  // s0 a0
      0.0, 1.0,  // s0 a1
      0.0, 1.0,  // s1 a0
      1.0, 0.0,  // s1 a1
  };
  m.rewards = {0.0, -0.1, 1.0, 0.3};
  m.initial = {1.0, 0.0};
  m.gamma = 0.9;
  return m;
}

// Two states, three actions, noisy transitions and a mixed initial state.
inline EnumerableMDP stochastic_two_state() {
  EnumerableMDP m;
  m.n_states = 2;
  m.n_actions = 3;
  m.horizon = 3;
  m.transitions = {
      0.8, 0.2,  // s0 a0
      0.3, 0.7,  // s0 a1
      0.5, 0.5,  // s0 a2
      0.6, 0.4,  // s1 a0
      0.1, 0.9,  // s1 a1
      0.25, 0.75,  // s1 a2
  };
  m.rewards = {0.5, -0.2, 0.1, 1.0, 0.4, -0.6};
  m.initial = {0.7, 0.3};
  m.gamma = 0.95;
  return m;
}

}  // namespace metadapt::oracle
