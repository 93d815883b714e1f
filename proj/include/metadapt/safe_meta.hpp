#pragma once

// Penalty relaxation of the chance-constrained meta-objective. The
// per-task penalty is hinge(b - J) where b is the mean pre-adaptation return
// and J carries the mean post-adaptation return as its value and the
// negated REINFORCE surrogate as its derivative.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "metadapt/analysis.hpp"
#include "metadapt/autodiff.hpp"
#include "metadapt/error.hpp"
#include "metadapt/maml.hpp"
#include "metadapt/rng.hpp"

namespace metadapt {

struct SafetyConfig {
  double beta = 0.1;
  double delta = 0.1;
  double lambda = 1.0;
  double dual_lr = 0.0;
  std::size_t eval_trajectories = 20;

  void validate() const {
    if (!(beta > 0.0 && beta < 1.0)) throw Error("safe.beta must lie in (0, 1)");
    if (!(delta > 0.0 && delta < 1.0)) throw Error("safe.delta must lie in (0, 1)");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error("safe.lambda must be finite and >= 0");
    if (!(dual_lr >= 0.0) || !std::isfinite(dual_lr)) throw Error("safe.dual_lr must be finite and >= 0");
    if (eval_trajectories < 1) throw Error("safe.eval_trajectories must be >= 1");
  }
};

struct ImprovementPenalty {
  ad::Node penalty;     // hinge(b - J), a node of the task graph
  ad::Node post_value;  // J
  double gamma_mean = 0.0;  // b - mean post G_0
  double penalty_value = 0.0;
  std::vector<double> gamma_samples;  // paired pre - post G_0
};

// J = c + (S - value(S)): evaluates to c exactly, differentiates like S.
inline ad::Node pass_through(ad::Evaluator& eval, ad::Node surrogate, double value) {
  ad::Graph& g = *surrogate.graph;
  return (surrogate - g.constant(eval.scalar(surrogate))) + value;
}

struct Shortfall {
  ad::Node post_value;
  ad::Node penalty;
};

// hinge(b - J) with J = pass_through(surrogate, c).
inline Shortfall shortfall_penalty(ad::Evaluator& eval, ad::Node surrogate, double b, double c) {
  const ad::Node j = pass_through(eval, surrogate, c);
  return {j, ad::max0(surrogate.graph->constant(b) - j)};
}

// Builds the penalty on an existing per-task graph. Pre and post evaluation
// episodes share eval_stream.
inline ImprovementPenalty improvement_penalty(OuterLoss& ol, const MamlSettings& s, const SafetyConfig& sc,
                                              const RngStream& eval_stream) {
  const RolloutConfig cfg{sc.eval_trajectories, s.rollout.gamma};
  const Dataset pre = collect_dataset(ol.pre.task, snapshot(*ol.eval, ol.theta, ol.adapted_params.arch), cfg, s.env,
                                      eval_stream);
  const Dataset post = collect_dataset(ol.pre.task, ol.adapted_params, cfg, s.env, eval_stream);
  const std::vector<double> pre_g = episode_returns(pre, s.rollout.gamma);
  const std::vector<double> post_g = episode_returns(post, s.rollout.gamma);

  ImprovementPenalty out;
  double b = 0.0;
  double c = 0.0;
  for (std::size_t k = 0; k < pre_g.size(); ++k) {
    out.gamma_samples.push_back(pre_g[k] - post_g[k]);
    b += pre_g[k];
    c += post_g[k];
  }
  b /= static_cast<double>(pre_g.size());
  c /= static_cast<double>(post_g.size());

  const ad::Node surrogate = -reinforce_loss(ol.policy, ol.adapted, post, s.rollout.gamma, s.baseline);
  const Shortfall sf = shortfall_penalty(*ol.eval, surrogate, b, c);
  out.post_value = sf.post_value;
  out.penalty = sf.penalty;
  out.gamma_mean = b - c;
  out.penalty_value = ol.eval->scalar(out.penalty);
  return out;
}

// Stand-alone variant: builds the task graph from scratch.
struct PenaltyResult {
  OuterLoss outer;
  ImprovementPenalty penalty;
};

inline PenaltyResult improvement_penalty(const PolicyParams& theta, const TaskSpec& task, const MamlSettings& s,
                                         const SafetyConfig& sc, const RngStream& task_stream) {
  PenaltyResult r{outer_loss_for_task(theta, task, s, TaskStreams::derive(task_stream)), {}};
  r.penalty = improvement_penalty(r.outer, s, sc, task_stream.child(streams::kSafety));
  return r;
}

// Per-task objective node. With lambda = 0 the penalty is left out of the
// graph entirely, so gradients match the unpenalized objective bit for bit.
inline ad::Node penalized_task_objective(ad::Node outer_loss, ad::Node penalty, double lambda) {
  if (lambda == 0.0) return outer_loss;
  return outer_loss + lambda * penalty;
}

// mean_i (loss_i + lambda * penalty_i)
inline double penalized_objective_value(std::span<const double> losses, std::span<const double> penalties,
                                        double lambda) {
  if (losses.empty() || losses.size() != penalties.size()) throw Error("losses and penalties must pair up");
  const auto m = static_cast<double>(losses.size());
  double total = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) total += (losses[i] + lambda * penalties[i]) / m;
  return total;
}

// lambda' = max(0, lambda + eta * (rate - delta))
inline double dual_lambda_update(double lambda, double violation_rate, double delta, double dual_lr) {
  if (!(dual_lr >= 0.0)) throw Error("dual learning rate must be >= 0");
  return std::max(0.0, lambda + dual_lr * (violation_rate - delta));
}

// Fraction of tasks whose improvement probability falls below 1 - beta.
inline double violation_rate_from_gammas(const std::vector<std::vector<double>>& gamma_per_task, double beta) {
  const ConstraintEstimate est = constraint_probability_estimate(gamma_per_task, beta);
  std::size_t violated = 0;
  for (double p : est.p_hat)
    if (p < 1.0 - beta) ++violated;
  return static_cast<double>(violated) / static_cast<double>(est.p_hat.size());
}

struct SafeMetaGradient {
  MetaGradient base;  // gradient of the penalized objective; loss/return means are unpenalized
  double penalty_mean = 0.0;
  double violation_rate = 0.0;
  double objective = 0.0;
};

// Task i uses rng.child(i); the adaptation and post-adaptation data are
// drawn exactly as in meta_gradient, and evaluation episodes come from a
// separate child stream.
inline SafeMetaGradient penalized_meta_gradient(const PolicyParams& theta, std::span<const TaskSpec> tasks,
                                                const MamlSettings& s, const SafetyConfig& sc, double lambda,
                                                const RngStream& rng,
                                                std::optional<double> grad_clip_norm = std::nullopt,
                                                std::size_t workers = 1) {
  sc.validate();
  std::vector<double> penalties(tasks.size());
  std::vector<std::vector<double>> gammas(tasks.size());
  SafeMetaGradient out;
  out.base = reduce_task_gradients(
      tasks, grad_clip_norm, workers, [&](std::size_t i, std::vector<double>& grad, TaskDiagnostics& diag) {
        PenaltyResult r = improvement_penalty(theta, tasks[i], s, sc, rng.child(i));
        const ad::Node objective = penalized_task_objective(r.outer.loss, r.penalty.penalty, lambda);
        grad = flatten_values(*r.outer.eval, r.outer.graph->gradient(objective, r.outer.theta));
        diag = {r.outer.pre_return, r.outer.post_return, r.outer.loss_value};
        penalties[i] = r.penalty.penalty_value;
        gammas[i] = std::move(r.penalty.gamma_samples);
      });
  std::vector<double> losses;
  for (const auto& d : out.base.tasks) losses.push_back(d.outer_loss);
  for (double p : penalties) out.penalty_mean += p / static_cast<double>(penalties.size());
  out.objective = penalized_objective_value(losses, penalties, lambda);
  out.violation_rate = violation_rate_from_gammas(gammas, sc.beta);
  return out;
}

// Empirical violation rate for theta over a set of tasks: each task's
// improvement probability comes from eval_trajectories paired episodes.
inline double constraint_violation_rate(const PolicyParams& theta, std::span<const TaskSpec> tasks, double beta,
                                        const MamlSettings& s, const SafetyConfig& sc, const RngStream& rng,
                                        std::size_t workers = 1) {
  if (tasks.empty()) throw Error("constraint_violation_rate needs at least one task");
  std::vector<std::vector<double>> gammas(tasks.size());
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    const RngStream task_stream = rng.child(i);
    const PolicyParams adapted = adapted_parameters(theta, tasks[i], s, task_stream.child(streams::kAdapt));
    auto [pre, post] = paired_returns(tasks[i], theta, adapted, sc.eval_trajectories, s.rollout.gamma, s.env,
                                      task_stream.child(streams::kSafety));
    for (std::size_t k = 0; k < pre.size(); ++k) gammas[i].push_back(pre[k] - post[k]);
  });
  return violation_rate_from_gammas(gammas, beta);
}

}  // namespace metadapt
