#pragma once

// Meta-training loop, training log, and the single-task specialist recipe.

#include <chrono>
#include <cstddef>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "metadapt/environment.hpp"
#include "metadapt/error.hpp"
#include "metadapt/format.hpp"
#include "metadapt/maml.hpp"
#include "metadapt/policy.hpp"
#include "metadapt/rng.hpp"
#include "metadapt/safe_meta.hpp"

namespace metadapt {

struct TrainConfig {
  PolicyArchitecture arch;
  double log_std_init = -0.5;
  MamlSettings maml;
  MetaConfig meta;
  TaskDistribution tasks;
  std::optional<SafetyConfig> safety;  // set when the penalized objective is trained
  std::size_t workers = 1;

  void validate() const {
    arch.validate();
    if (!std::isfinite(log_std_init)) throw Error("policy.log_std_init must be finite");
    maml.validate();
    meta.validate();
    tasks.validate();
    if (safety) safety->validate();
  }
};

struct TrainingLogRecord {
  std::size_t iteration = 0;
  double pre_return = 0.0;
  double post_return = 0.0;
  double outer_loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  double wall_ms = 0.0;
  // Penalized runs only.
  double penalty_mean = 0.0;
  double violation_rate = 0.0;
  double lambda = 0.0;
};

struct TrainResult {
  PolicyParams initial;
  PolicyParams params;
  std::vector<TrainingLogRecord> log;
  double final_lambda = 0.0;
};

inline PolicyParams initial_params(const TrainConfig& cfg, const RngStream& root) {
  RngStream init = root.child(streams::kInit);
  return init_params(cfg.arch, init, cfg.log_std_init);
}

// Iteration k samples its tasks from root/kTasks/k and draws all rollout
// noise from root/kIteration/k.
inline TrainResult meta_train(const TrainConfig& cfg, const RngStream& root,
                              const std::function<void(const TrainingLogRecord&)>& on_record = {}) {
  cfg.validate();
  TrainResult out;
  out.initial = initial_params(cfg, root);
  std::vector<double> flat = out.initial.flatten();
  OuterOptimizer opt(cfg.meta);
  double lambda = cfg.safety ? cfg.safety->lambda : 0.0;

  for (std::size_t it = 0; it < cfg.meta.iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    const PolicyParams theta = PolicyParams::unflatten(cfg.arch, flat);
    RngStream task_rng = root.child(streams::kTasks).child(it);
    const std::vector<TaskSpec> tasks = sample_tasks(cfg.tasks, cfg.meta.meta_batch_size, task_rng);
    const RngStream iter_rng = root.child(streams::kIteration).child(it);

    TrainingLogRecord rec;
    rec.iteration = it;
    MetaGradient mg;
    try {
      if (cfg.safety) {
        SafeMetaGradient sg = penalized_meta_gradient(theta, tasks, cfg.maml, *cfg.safety, lambda, iter_rng,
                                                      cfg.meta.grad_clip_norm, cfg.workers);
        mg = std::move(sg.base);
        rec.penalty_mean = sg.penalty_mean;
        rec.violation_rate = sg.violation_rate;
        rec.lambda = lambda;
        lambda = dual_lambda_update(lambda, sg.violation_rate, cfg.safety->delta, cfg.safety->dual_lr);
      } else {
        mg = meta_gradient(theta, tasks, cfg.maml, iter_rng, cfg.meta.grad_clip_norm, cfg.workers);
      }
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("iteration " + std::to_string(it) + ", " + e.what());
    }

    opt.step(flat, mg.gradient);
    require_finite(flat, "parameters after iteration " + std::to_string(it));
    rec.pre_return = mg.mean_pre_return;
    rec.post_return = mg.mean_post_return;
    rec.outer_loss = mg.mean_outer_loss;
    rec.grad_norm = mg.raw_norm;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    out.log.push_back(rec);
    if (on_record) on_record(rec);
  }
  out.params = PolicyParams::unflatten(cfg.arch, flat);
  out.final_lambda = lambda;
  return out;
}

inline void write_training_log(std::ostream& os, const std::vector<TrainingLogRecord>& log, bool safety_columns) {
  os << "iter,pre_return,post_return,outer_loss,grad_norm,wall_ms";
  if (safety_columns) os << ",penalty_mean,violation_rate,lambda";
  os << '\n';
  for (const auto& r : log) {
    os << r.iteration << ',' << fmt_double(r.pre_return) << ',' << fmt_double(r.post_return) << ','
       << fmt_double(r.outer_loss) << ',' << fmt_double(r.grad_norm) << ',' << fmt_double(r.wall_ms);
    if (safety_columns)
      os << ',' << fmt_double(r.penalty_mean) << ',' << fmt_double(r.violation_rate) << ',' << fmt_double(r.lambda);
    os << '\n';
  }
}

// Plain policy gradient on one fixed task, no inner adaptation. Used to
// produce an over-specialized starting point for the audit.
struct SpecialistRecipe {
  TaskSpec task{TaskFamily::GoalVelocity, 0.5};
  std::size_t iterations = 200;
  double lr = 1e-2;
  std::optional<double> grad_clip_norm = 10.0;
};

inline PolicyParams pretrain_specialist(const PolicyParams& start, const SpecialistRecipe& recipe,
                                        const MamlSettings& s, const RngStream& root) {
  recipe.task.validate();
  MetaConfig mc;
  mc.outer_lr = recipe.lr;
  mc.grad_clip_norm = recipe.grad_clip_norm;
  mc.validate();
  OuterOptimizer opt(mc);
  std::vector<double> flat = start.flatten();
  const GaussianPolicy policy(start.arch);
  for (std::size_t it = 0; it < recipe.iterations; ++it) {
    const PolicyParams theta = PolicyParams::unflatten(start.arch, flat);
    const Dataset d = collect_dataset(recipe.task, theta, s.rollout, s.env, root.child(it));
    ad::Graph g;
    const auto nodes = policy.declare_parameters(g);
    ad::Evaluator eval(g, GaussianPolicy::bind(nodes, theta));
    const ad::Node loss = reinforce_loss(policy, nodes, d, s.rollout.gamma, s.baseline);
    std::vector<double> grad = flatten_values(eval, g.gradient(loss, nodes));
    require_finite(grad, "specialist gradient at iteration " + std::to_string(it));
    clip_to_norm(grad, recipe.grad_clip_norm);
    opt.step(flat, grad);
  }
  return PolicyParams::unflatten(start.arch, flat);
}

}  // namespace metadapt
