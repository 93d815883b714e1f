#pragma once

// Negative-adaptation audit: paired pre/post evaluation, percentile bands,
// task sweeps and region detection.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "metadapt/autodiff.hpp"
#include "metadapt/environment.hpp"
#include "metadapt/error.hpp"
#include "metadapt/format.hpp"
#include "metadapt/maml.hpp"
#include "metadapt/parallel.hpp"
#include "metadapt/policy.hpp"
#include "metadapt/rng.hpp"
#include "metadapt/rollout.hpp"

namespace metadapt {

// Linear interpolation at rank q/100 * (n - 1) of the sorted samples.
inline double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) throw Error("percentile of an empty sample");
  if (!(q >= 0.0 && q <= 100.0)) throw Error("percentile q must lie in [0, 100]");
  std::sort(samples.begin(), samples.end());
  const double rank = q / 100.0 * static_cast<double>(samples.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = static_cast<std::size_t>(std::ceil(rank));
  const double frac = rank - static_cast<double>(lo);
  return samples[lo] + frac * (samples[hi] - samples[lo]);
}

struct ReturnStats {
  std::size_t n = 0;
  double median = 0.0;
  double p5 = 0.0;
  double p25 = 0.0;
  double p75 = 0.0;
  double p95 = 0.0;
  double mean = 0.0;
};

inline ReturnStats summarize(const std::vector<double>& samples) {
  if (samples.empty()) throw Error("cannot summarize an empty sample");
  ReturnStats s;
  s.n = samples.size();
  s.median = percentile(samples, 50.0);
  s.p5 = percentile(samples, 5.0);
  s.p25 = percentile(samples, 25.0);
  s.p75 = percentile(samples, 75.0);
  s.p95 = percentile(samples, 95.0);
  double total = 0.0;
  for (double v : samples) total += v;
  s.mean = total / static_cast<double>(samples.size());
  return s;
}

enum class FlagRule { Median, Mean };

inline std::string to_string(FlagRule r) { return r == FlagRule::Median ? "median" : "mean"; }

inline FlagRule parse_flag_rule(const std::string& s) {
  if (s == "median") return FlagRule::Median;
  if (s == "mean") return FlagRule::Mean;
  throw Error("unknown flag rule '" + s + "' (expected median or mean)");
}

struct AdaptationReport {
  TaskSpec task;
  ReturnStats pre;
  ReturnStats post;
  std::vector<double> pre_samples;
  std::vector<double> post_samples;
  std::vector<double> gamma_samples;  // pre - post, paired
  double gamma_mean = 0.0;
  double prob_improve = 0.0;  // fraction of pairs with gamma <= 0
  bool negative_flag = false;
};

// Fraction of samples with gamma <= 0. A tie counts as improvement.
inline double improvement_probability(const std::vector<double>& gammas) {
  if (gammas.empty()) throw Error("no gamma samples");
  std::size_t ok = 0;
  for (double g : gammas)
    if (g <= 0.0) ++ok;
  return static_cast<double>(ok) / static_cast<double>(gammas.size());
}

inline AdaptationReport build_report(const TaskSpec& task, std::vector<double> pre, std::vector<double> post,
                                     FlagRule rule = FlagRule::Median) {
  if (pre.size() != post.size()) throw Error("pre and post samples must be paired");
  AdaptationReport r;
  r.task = task;
  r.pre = summarize(pre);
  r.post = summarize(post);
  double total = 0.0;
  for (std::size_t k = 0; k < pre.size(); ++k) {
    r.gamma_samples.push_back(pre[k] - post[k]);
    total += r.gamma_samples.back();
  }
  r.gamma_mean = total / static_cast<double>(pre.size());
  r.prob_improve = improvement_probability(r.gamma_samples);
  r.negative_flag = rule == FlagRule::Median ? r.post.median < r.pre.median : r.post.mean < r.pre.mean;
  r.pre_samples = std::move(pre);
  r.post_samples = std::move(post);
  return r;
}

// K evaluation episodes under each of two parameter sets. Episode k of both
// uses the same stream, so initial states and action noise are shared.
inline std::pair<std::vector<double>, std::vector<double>> paired_returns(const TaskSpec& task,
                                                                          const PolicyParams& before,
                                                                          const PolicyParams& after, std::size_t k,
                                                                          double gamma, const EnvConstants& env,
                                                                          const RngStream& rng) {
  const RolloutConfig cfg{k, gamma};
  const Dataset pre = collect_dataset(task, before, cfg, env, rng);
  const Dataset post = collect_dataset(task, after, cfg, env, rng);
  return {episode_returns(pre, gamma), episode_returns(post, gamma)};
}

struct EvalConfig {
  std::size_t eval_rollouts = 40;
  double gamma_eval = 1.0;
  FlagRule flag_rule = FlagRule::Median;

  void validate() const {
    if (eval_rollouts < 1) throw Error("sweep.eval_rollouts must be >= 1");
    if (!(gamma_eval >= 0.0 && gamma_eval <= 1.0)) throw Error("sweep.gamma_eval must lie in [0, 1]");
  }
};

// Adapted parameters theta' from N trajectories collected under theta.
inline PolicyParams adapted_parameters(const PolicyParams& theta, const TaskSpec& task, const MamlSettings& s,
                                       const RngStream& adapt_stream) {
  const Dataset d = collect_dataset(task, theta, s.rollout, s.env, adapt_stream);
  ad::Graph g;
  const GaussianPolicy policy(theta.arch);
  const auto nodes = policy.declare_parameters(g);
  ad::Evaluator eval(g, GaussianPolicy::bind(nodes, theta));
  AdaptConfig first_order = s.adapt;
  first_order.first_order = true;  // only the value of theta' is needed
  const auto adapted = inner_adapt(policy, eval, nodes, d, first_order, s.rollout.gamma, s.baseline);
  return snapshot(eval, adapted, theta.arch);
}

inline AdaptationReport evaluate_adaptation(const PolicyParams& theta, const TaskSpec& task, const MamlSettings& s,
                                            const EvalConfig& ec, const RngStream& task_stream) {
  s.validate();
  ec.validate();
  const PolicyParams adapted = adapted_parameters(theta, task, s, task_stream.child(streams::kAdapt));
  auto [pre, post] = paired_returns(task, theta, adapted, ec.eval_rollouts, ec.gamma_eval, s.env,
                                    task_stream.child(streams::kEval));
  return build_report(task, std::move(pre), std::move(post), ec.flag_rule);
}

struct SweepReport {
  std::vector<AdaptationReport> reports;
  double training_low = 0.0;
  double training_high = 0.0;
};

// The per-task stream is keyed by the task parameter itself, so a task's
// report does not depend on where it sits in the grid.
inline RngStream sweep_task_stream(const RngStream& rng, const TaskSpec& task) {
  return rng.child(streams::kSweep).child(std::bit_cast<std::uint64_t>(task.parameter));
}

inline SweepReport task_sweep(const PolicyParams& theta, std::vector<TaskSpec> grid, const MamlSettings& s,
                              const EvalConfig& ec, const RngStream& rng, std::pair<double, double> training_range,
                              std::size_t workers = 1) {
  if (grid.empty()) throw Error("task sweep needs a nonempty grid");
  std::stable_sort(grid.begin(), grid.end(),
                   [](const TaskSpec& a, const TaskSpec& b) { return a.parameter < b.parameter; });
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i].parameter > grid[i - 1].parameter)) throw Error("sweep grid parameters must be distinct");

  SweepReport out;
  out.training_low = training_range.first;
  out.training_high = training_range.second;
  out.reports.resize(grid.size());
  parallel_for(grid.size(), workers, [&](std::size_t i) {
    out.reports[i] = evaluate_adaptation(theta, grid[i], s, ec, sweep_task_stream(rng, grid[i]));
  });
  return out;
}

// Maximal runs of consecutive flagged tasks as closed parameter intervals.
inline std::vector<std::pair<double, double>> negative_region(const SweepReport& sweep) {
  std::vector<std::pair<double, double>> runs;
  bool open = false;
  for (const auto& r : sweep.reports) {
    if (r.negative_flag) {
      if (!open) runs.emplace_back(r.task.parameter, r.task.parameter);
      runs.back().second = r.task.parameter;
      open = true;
    } else {
      open = false;
    }
  }
  return runs;
}

struct ConstraintEstimate {
  std::vector<double> p_hat;   // per task: fraction of gamma <= 0
  double outer_fraction = 0.0;  // fraction of tasks with p_hat >= 1 - beta
};

inline ConstraintEstimate constraint_probability_estimate(const std::vector<std::vector<double>>& gamma_per_task,
                                                          double beta) {
  if (gamma_per_task.empty()) throw Error("constraint estimate needs at least one task");
  ConstraintEstimate out;
  std::size_t satisfied = 0;
  for (const auto& g : gamma_per_task) {
    out.p_hat.push_back(improvement_probability(g));
    if (out.p_hat.back() >= 1.0 - beta) ++satisfied;
  }
  out.outer_fraction = static_cast<double>(satisfied) / static_cast<double>(gamma_per_task.size());
  return out;
}

inline ConstraintEstimate constraint_probability_estimate(const SweepReport& sweep, double beta) {
  std::vector<std::vector<double>> g;
  for (const auto& r : sweep.reports) g.push_back(r.gamma_samples);
  return constraint_probability_estimate(g, beta);
}

// CSV output.

inline const std::vector<std::string>& sweep_stat_columns() {
  static const std::vector<std::string> cols = {
      "n_eval",    "pre_median", "pre_p5",  "pre_p25",  "pre_p75",    "pre_p95",      "pre_mean",     "post_median",
      "post_p5",   "post_p25",   "post_p75", "post_p95", "post_mean", "gamma_mean", "prob_improve", "negative_flag"};
  return cols;
}

inline std::vector<std::string> report_fields(const AdaptationReport& r) {
  return {std::to_string(r.pre.n),      fmt_double(r.pre.median),  fmt_double(r.pre.p5),    fmt_double(r.pre.p25),
          fmt_double(r.pre.p75),        fmt_double(r.pre.p95),     fmt_double(r.pre.mean),  fmt_double(r.post.median),
          fmt_double(r.post.p5),        fmt_double(r.post.p25),    fmt_double(r.post.p75),  fmt_double(r.post.p95),
          fmt_double(r.post.mean),      fmt_double(r.gamma_mean),  fmt_double(r.prob_improve),
          r.negative_flag ? "1" : "0"};
}

inline std::string sweep_csv_header() {
  std::string h = "task_param";
  for (const auto& c : sweep_stat_columns()) h += "," + c;
  return h;
}

inline void write_sweep_csv(std::ostream& os, const SweepReport& sweep) {
  os << sweep_csv_header() << '\n';
  for (const auto& r : sweep.reports) {
    os << fmt_double(r.task.parameter);
    for (const auto& f : report_fields(r)) os << ',' << f;
    os << '\n';
  }
}

inline void write_sweep_sidecar(std::ostream& os, const SweepReport& sweep) {
  os << "training_range," << fmt_double(sweep.training_low) << ',' << fmt_double(sweep.training_high) << '\n';
}

inline std::string compare_csv_header() {
  std::string h = "task_param";
  for (const char* suffix : {"_a", "_b"})
    for (const auto& c : sweep_stat_columns()) h += "," + c + suffix;
  return h;
}

inline void write_compare_csv(std::ostream& os, const SweepReport& a, const SweepReport& b) {
  if (a.reports.size() != b.reports.size()) throw Error("compared sweeps cover different grids");
  os << compare_csv_header() << '\n';
  for (std::size_t i = 0; i < a.reports.size(); ++i) {
    if (a.reports[i].task.parameter != b.reports[i].task.parameter) throw Error("compared sweeps cover different grids");
    os << fmt_double(a.reports[i].task.parameter);
    for (const auto& f : report_fields(a.reports[i])) os << ',' << f;
    for (const auto& f : report_fields(b.reports[i])) os << ',' << f;
    os << '\n';
  }
}

}  // namespace metadapt
