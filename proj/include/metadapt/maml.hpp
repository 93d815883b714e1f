#pragma once

// REINFORCE surrogate, one-step inner adaptation, and the second-order MAML
// meta-gradient.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metadapt/autodiff.hpp"
#include "metadapt/environment.hpp"
#include "metadapt/error.hpp"
#include "metadapt/parallel.hpp"
#include "metadapt/policy.hpp"
#include "metadapt/rng.hpp"
#include "metadapt/rollout.hpp"

namespace metadapt {

struct AdaptConfig {
  double alpha = 0.1;
  bool first_order = false;

  void validate() const {
    // alpha = 0 is accepted: it disables adaptation, which the audit tooling relies on.
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw Error("inner.alpha must be finite and >= 0");
  }
};

enum class Baseline { None, MeanReturn };

inline std::string to_string(Baseline b) { return b == Baseline::None ? "none" : "mean_return"; }

inline Baseline parse_baseline(const std::string& s) {
  if (s == "none") return Baseline::None;
  if (s == "mean_return") return Baseline::MeanReturn;
  throw Error("unknown baseline '" + s + "' (expected none or mean_return)");
}

// Everything needed to turn (theta, task) into adapted parameters and datasets.
struct MamlSettings {
  EnvConstants env;
  RolloutConfig rollout;
  AdaptConfig adapt;
  Baseline baseline = Baseline::None;

  void validate() const {
    env.validate();
    rollout.validate();
    adapt.validate();
  }
};

// A policy whose log-densities can be expressed as graph nodes over a batch
// of stacked (observation, action) rows.
template <class P>
concept PolicyModel = requires(const P& p, std::span<const ad::Node> params, const ad::Array& a) {
  { p.log_prob_column(params, a, a) } -> std::same_as<ad::Node>;
};

// Per-row weights w_i * gamma^t * (G_t - b) of the surrogate, stacked
// trajectory-major into an m x 1 column. b is the weighted mean G_0 when the
// mean_return baseline is on, else 0.
inline ad::Array return_weights(const Dataset& d, double gamma, Baseline baseline) {
  if (d.trajectories.empty()) throw Error("reinforce loss on an empty dataset");
  std::vector<ReturnSeries> series;
  series.reserve(d.size());
  for (const auto& t : d.trajectories) series.push_back(discounted_return_series(t.rewards, gamma));

  double b = 0.0;
  if (baseline == Baseline::MeanReturn) {
    double total_w = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      b += d.weight(i) * series[i].values.front();
      total_w += d.weight(i);
    }
    b /= total_w;
  }

  ad::Array w(ad::Shape{d.total_steps(), 1});
  std::size_t row = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    double discount = 1.0;
    for (double g : series[i].values) {
      w.data[row++] = d.weight(i) * discount * (g - b);
      discount *= gamma;
    }
  }
  return w;
}

// -sum_r weights_r * log_prob_r
inline ad::Node surrogate_loss(ad::Node log_probs, const ad::Array& weights) {
  return -ad::sum(log_probs.graph->constant(weights) * log_probs);
}

// L(theta; D) = -(1/N) sum_i sum_t gamma^t G_t^(i) log pi_theta(a_t^(i) | s_t^(i)).
// Returns are constants; only the log-densities carry parameters.
template <PolicyModel P>
ad::Node reinforce_loss(const P& policy, std::span<const ad::Node> params, const Dataset& d, double gamma,
                        Baseline baseline = Baseline::None) {
  const ad::Array weights = return_weights(d, gamma, baseline);
  const ad::Node log_probs = policy.log_prob_column(params, d.stacked_observations(), d.stacked_actions());
  return surrogate_loss(log_probs, weights);
}

// theta' = theta - alpha * grad L(theta). With first_order the gradient is
// evaluated and inserted as a constant, so nothing flows back through it.
inline std::vector<ad::Node> adapt_step(ad::Evaluator& eval, std::span<const ad::Node> params, ad::Node loss,
                                        const AdaptConfig& cfg) {
  ad::Graph& g = *loss.graph;
  std::vector<ad::Node> grads = g.gradient(loss, params);
  std::vector<ad::Node> adapted;
  adapted.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Node step = grads[i];
    if (cfg.first_order) step = g.constant(eval.value(grads[i]));
    adapted.push_back(params[i] - cfg.alpha * step);
  }
  return adapted;
}

template <PolicyModel P>
std::vector<ad::Node> inner_adapt(const P& policy, ad::Evaluator& eval, std::span<const ad::Node> params,
                                  const Dataset& d, const AdaptConfig& cfg, double gamma,
                                  Baseline baseline = Baseline::None) {
  const ad::Node loss = reinforce_loss(policy, params, d, gamma, baseline);
  return adapt_step(eval, params, loss, cfg);
}

// Numeric snapshot of parameter-shaped nodes.
inline PolicyParams snapshot(ad::Evaluator& eval, std::span<const ad::Node> nodes, const PolicyArchitecture& arch) {
  PolicyParams p{arch, {}};
  for (ad::Node n : nodes) p.tensors.push_back(eval.value(n));
  return p;
}

inline std::vector<double> flatten_values(ad::Evaluator& eval, std::span<const ad::Node> nodes) {
  std::vector<double> flat;
  for (ad::Node n : nodes) {
    const ad::Array& a = eval.value(n);
    flat.insert(flat.end(), a.data.begin(), a.data.end());
  }
  return flat;
}

// Streams for the adaptation set D and the post-adaptation set D'.
struct TaskStreams {
  RngStream adapt;
  RngStream post;

  static TaskStreams derive(const RngStream& task_stream) {
    return {task_stream.child(streams::kAdapt), task_stream.child(streams::kPost)};
  }
};

// The per-task graph: theta as parameters, theta' as expressions of theta,
// and L(theta'; D') as the outer loss.
struct OuterLoss {
  std::unique_ptr<ad::Graph> graph;
  std::unique_ptr<ad::Evaluator> eval;
  GaussianPolicy policy{PolicyArchitecture{}};
  std::vector<ad::Node> theta;
  std::vector<ad::Node> adapted;
  ad::Node loss;
  Dataset pre;   // D, sampled under theta
  Dataset post;  // D', sampled under theta'
  PolicyParams adapted_params;
  double pre_return = 0.0;   // mean discounted G_0 over D
  double post_return = 0.0;  // mean discounted G_0 over D'
  double loss_value = 0.0;

  [[nodiscard]] std::vector<double> gradient() {
    const std::vector<ad::Node> grads = graph->gradient(loss, theta);
    return flatten_values(*eval, grads);
  }
};

inline OuterLoss outer_loss_for_task(const PolicyParams& theta, const TaskSpec& task, const MamlSettings& s,
                                     const TaskStreams& rng) {
  OuterLoss out;
  out.graph = std::make_unique<ad::Graph>();
  out.policy = GaussianPolicy(theta.arch);
  out.theta = out.policy.declare_parameters(*out.graph);
  out.eval = std::make_unique<ad::Evaluator>(*out.graph, GaussianPolicy::bind(out.theta, theta));

  out.pre = collect_dataset(task, theta, s.rollout, s.env, rng.adapt);
  out.adapted = inner_adapt(out.policy, *out.eval, out.theta, out.pre, s.adapt, s.rollout.gamma, s.baseline);
  out.adapted_params = snapshot(*out.eval, out.adapted, theta.arch);
  out.post = collect_dataset(task, out.adapted_params, s.rollout, s.env, rng.post);
  out.loss = reinforce_loss(out.policy, out.adapted, out.post, s.rollout.gamma, s.baseline);
  out.loss_value = out.eval->scalar(out.loss);
  out.pre_return = mean_return(out.pre, s.rollout.gamma);
  out.post_return = mean_return(out.post, s.rollout.gamma);
  return out;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Rescales v to norm max_norm when it is longer. Returns the original norm.
inline double clip_to_norm(std::vector<double>& v, std::optional<double> max_norm) {
  const double norm = l2_norm(v);
  if (max_norm && norm > *max_norm) {
    const double f = *max_norm / norm;
    for (double& x : v) x *= f;
  }
  return norm;
}

struct TaskDiagnostics {
  double pre_return = 0.0;
  double post_return = 0.0;
  double outer_loss = 0.0;
};

struct MetaGradient {
  std::vector<double> gradient;  // averaged over tasks, clipped
  double raw_norm = 0.0;         // norm before clipping
  double mean_outer_loss = 0.0;
  double mean_pre_return = 0.0;
  double mean_post_return = 0.0;
  std::vector<TaskDiagnostics> tasks;
};

inline void require_finite(std::span<const double> v, const std::string& what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NonFiniteError("non-finite " + what);
}

// Runs task_fn(i, grad, diag) for every task and averages in task order.
// Failures are rethrown with the task index and parameter attached.
template <class TaskFn>
MetaGradient reduce_task_gradients(std::span<const TaskSpec> tasks, std::optional<double> grad_clip_norm,
                                   std::size_t workers, TaskFn&& task_fn) {
  if (tasks.empty()) throw Error("meta_gradient needs at least one task");
  std::vector<std::vector<double>> grads(tasks.size());
  std::vector<TaskDiagnostics> diag(tasks.size());
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    const std::string where = "task " + std::to_string(i) + " (" + to_string(tasks[i].family) + " " +
                              std::to_string(tasks[i].parameter) + ")";
    try {
      task_fn(i, grads[i], diag[i]);
      require_finite(grads[i], "meta-gradient");
      if (!std::isfinite(diag[i].outer_loss)) throw NonFiniteError("non-finite outer loss");
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(where + ": " + e.what());
    }
  });

  MetaGradient out;
  out.gradient.assign(grads.front().size(), 0.0);
  for (const auto& g : grads)
    for (std::size_t k = 0; k < g.size(); ++k) out.gradient[k] += g[k];
  const double m = static_cast<double>(tasks.size());
  for (double& v : out.gradient) v /= m;
  for (const auto& d : diag) {
    out.mean_outer_loss += d.outer_loss / m;
    out.mean_pre_return += d.pre_return / m;
    out.mean_post_return += d.post_return / m;
  }
  out.tasks = std::move(diag);
  out.raw_norm = clip_to_norm(out.gradient, grad_clip_norm);
  return out;
}

// One stream per task. The reduction runs in task order, so the result does
// not depend on the worker count.
inline MetaGradient meta_gradient(const PolicyParams& theta, std::span<const TaskSpec> tasks, const MamlSettings& s,
                                  std::span<const RngStream> task_streams,
                                  std::optional<double> grad_clip_norm = std::nullopt, std::size_t workers = 1) {
  if (task_streams.size() != tasks.size()) throw Error("meta_gradient needs one stream per task");
  return reduce_task_gradients(tasks, grad_clip_norm, workers,
                               [&](std::size_t i, std::vector<double>& grad, TaskDiagnostics& diag) {
                                 OuterLoss ol = outer_loss_for_task(theta, tasks[i], s, TaskStreams::derive(task_streams[i]));
                                 grad = ol.gradient();
                                 diag = {ol.pre_return, ol.post_return, ol.loss_value};
                               });
}

// Task i uses rng.child(i).
inline MetaGradient meta_gradient(const PolicyParams& theta, std::span<const TaskSpec> tasks, const MamlSettings& s,
                                  const RngStream& rng, std::optional<double> grad_clip_norm = std::nullopt,
                                  std::size_t workers = 1) {
  std::vector<RngStream> task_streams;
  task_streams.reserve(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) task_streams.push_back(rng.child(i));
  return meta_gradient(theta, tasks, s, std::span<const RngStream>(task_streams), grad_clip_norm, workers);
}

enum class OptimizerKind { Sgd, Adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw Error("unknown optimizer '" + s + "' (expected sgd or adam)");
}

struct MetaConfig {
  std::size_t meta_batch_size = 20;
  std::size_t iterations = 500;
  double outer_lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::optional<double> grad_clip_norm = 10.0;

  void validate() const {
    if (meta_batch_size < 1) throw Error("outer.meta_batch_size must be >= 1");
    if (!(outer_lr >= 0.0) || !std::isfinite(outer_lr)) throw Error("outer.lr must be finite and >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw Error("outer.adam_beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw Error("outer.adam_beta2 must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) throw Error("outer.adam_epsilon must be > 0");
    if (grad_clip_norm && !(*grad_clip_norm > 0.0)) throw Error("outer.grad_clip_norm must be > 0 or none");
  }
};

// Descent on a flat parameter vector.
class OuterOptimizer {
 public:
  explicit OuterOptimizer(const MetaConfig& cfg) : cfg_(cfg) {}

  void step(std::vector<double>& params, std::span<const double> grad) {
    if (cfg_.optimizer == OptimizerKind::Sgd) {
      for (std::size_t k = 0; k < params.size(); ++k) params[k] -= cfg_.outer_lr * grad[k];
      return;
    }
    if (m_.empty()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }
    ++t_;
    const double b1 = cfg_.adam_beta1;
    const double b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      m_[k] = b1 * m_[k] + (1.0 - b1) * grad[k];
      v_[k] = b2 * v_[k] + (1.0 - b2) * grad[k] * grad[k];
      params[k] -= cfg_.outer_lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + cfg_.adam_epsilon);
    }
  }

 private:
  MetaConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace metadapt
