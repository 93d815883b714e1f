#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "metadapt/safe_meta.hpp"
#include "metadapt/train.hpp"
#include "test_support.hpp"

using namespace metadapt;
using testing_support::small_params;
using testing_support::small_settings;

namespace {

struct ScalarGraph {
  ad::Graph g;
  ad::Node x;
  std::unique_ptr<ad::Evaluator> eval;

  explicit ScalarGraph(double v) {
    x = g.parameter({1, 1}, "x");
    eval = std::make_unique<ad::Evaluator>(g, ad::Bindings{}.bind(x, ad::Array({1, 1}, v)));
  }

  double grad(ad::Node root) { return eval->value(g.gradient(root, {x}).front()).data[0]; }
};

std::vector<std::vector<double>> gaussian_gammas(std::size_t tasks, std::size_t k, RngStream& rng) {
  std::vector<std::vector<double>> out(tasks);
  for (auto& g : out)
    for (std::size_t j = 0; j < k; ++j) g.push_back(rng.normal());
  return out;
}

// Independent count of Bernoulli successes (gamma <= 0) per task.
double bernoulli_violation_rate(const std::vector<std::vector<double>>& gammas, double beta) {
  std::size_t violated = 0;
  for (const auto& g : gammas) {
    std::size_t ok = 0;
    for (double v : g) ok += v <= 0.0 ? 1 : 0;
    const double p_hat = static_cast<double>(ok) / static_cast<double>(g.size());
    if (p_hat < 1.0 - beta) ++violated;
  }
  return static_cast<double>(violated) / static_cast<double>(gammas.size());
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.arch = testing_support::small_arch();
  c.maml = small_settings();
  c.meta.meta_batch_size = 3;
  c.meta.iterations = 3;
  c.meta.outer_lr = 1e-2;
  return c;
}

}  // namespace

TEST(SafetyConfig, Validation) {
  EXPECT_NO_THROW(SafetyConfig{}.validate());
  SafetyConfig c;
  c.beta = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.delta = 1.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.lambda = -1e-9;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.dual_lr = -0.5;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.eval_trajectories = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(ShortfallPenalty, HingeInactiveWhenPostBeatsPre) {
  ScalarGraph sg(0.7);
  const ad::Node s = ad::tanh(sg.x) * 3.0;
  const Shortfall sf = shortfall_penalty(*sg.eval, s, 3.0, 5.0);
  EXPECT_EQ(sg.eval->scalar(sf.post_value), 5.0);
  EXPECT_EQ(sg.eval->scalar(sf.penalty), 0.0);
  EXPECT_EQ(sg.grad(sf.penalty), 0.0);
}

TEST(ShortfallPenalty, HingeActiveWhenPreBeatsPost) {
  ScalarGraph sg(0.7);
  const ad::Node s = ad::tanh(sg.x) * 3.0;
  const Shortfall sf = shortfall_penalty(*sg.eval, s, 5.0, 3.0);
  EXPECT_EQ(sg.eval->scalar(sf.penalty), 2.0);
  EXPECT_EQ(sg.grad(sf.penalty), -sg.grad(s));
}

TEST(PassThrough, ValueIsEmpiricalDerivativeIsSurrogate) {
  RngStream rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    ScalarGraph sg(rng.uniform(-2.0, 2.0));
    const ad::Node s = ad::exp(sg.x * 0.5) * 40.0;
    const double c = rng.uniform(-50.0, 0.0);
    const ad::Node j = pass_through(*sg.eval, s, c);
    EXPECT_NEAR(sg.eval->scalar(j), c, 1e-12);
    EXPECT_EQ(sg.grad(j), sg.grad(s));
  }
}

TEST(ImprovementPenalty, AlphaZeroGivesZeroShortfall) {
  MamlSettings s = small_settings();
  s.adapt.alpha = 0.0;
  SafetyConfig sc;
  sc.eval_trajectories = 8;
  for (double v : {0.2, 1.0, 1.9}) {
    const PenaltyResult r = improvement_penalty(small_params(), TaskSpec::goal_velocity(v), s, sc, RngStream(2).child(7));
    EXPECT_EQ(r.penalty.gamma_mean, 0.0);
    EXPECT_EQ(r.penalty.penalty_value, 0.0);
    for (double g : r.penalty.gamma_samples) EXPECT_EQ(g, 0.0);
  }
}

TEST(ImprovementPenalty, ValueAndGradientFidelity) {
  const MamlSettings s = small_settings();
  SafetyConfig sc;
  sc.eval_trajectories = 7;
  const RngStream task_stream = RngStream(3).child(0);
  const TaskSpec task = TaskSpec::goal_velocity(1.3);
  PenaltyResult r = improvement_penalty(small_params(), task, s, sc, task_stream);
  OuterLoss& ol = r.outer;

  const RolloutConfig cfg{sc.eval_trajectories, s.rollout.gamma};
  const Dataset post = collect_dataset(task, ol.adapted_params, cfg, s.env, task_stream.child(streams::kSafety));
  const Dataset pre = collect_dataset(task, small_params(), cfg, s.env, task_stream.child(streams::kSafety));
  double post_mean = 0.0;
  double pre_mean = 0.0;
  for (std::size_t k = 0; k < post.size(); ++k) {
    post_mean += discounted_return(post.trajectories[k].rewards, s.rollout.gamma) / 7.0;
    pre_mean += discounted_return(pre.trajectories[k].rewards, s.rollout.gamma) / 7.0;
  }
  EXPECT_NEAR(ol.eval->scalar(r.penalty.post_value), post_mean, 1e-12);
  EXPECT_NEAR(r.penalty.gamma_mean, pre_mean - post_mean, 1e-12);
  EXPECT_NEAR(r.penalty.penalty_value, std::max(0.0, pre_mean - post_mean), 1e-12);

  const ad::Node neg = -reinforce_loss(ol.policy, ol.adapted, post, s.rollout.gamma, s.baseline);
  const auto a = flatten_values(*ol.eval, ol.graph->gradient(r.penalty.post_value, ol.adapted));
  const auto b = flatten_values(*ol.eval, ol.graph->gradient(neg, ol.adapted));
  EXPECT_EQ(a, b);
}

TEST(PenalizedObjective, LambdaZeroIsBitExact) {
  const MamlSettings s = small_settings();
  const std::vector<TaskSpec> tasks{TaskSpec::goal_velocity(0.3), TaskSpec::goal_velocity(1.7),
                                    TaskSpec::goal_velocity(1.1)};
  const RngStream rng(4);
  const SafeMetaGradient safe = penalized_meta_gradient(small_params(), tasks, s, SafetyConfig{}, 0.0, rng, 10.0);
  const MetaGradient plain = meta_gradient(small_params(), tasks, s, rng, 10.0);
  EXPECT_EQ(safe.base.gradient, plain.gradient);
  EXPECT_EQ(safe.base.raw_norm, plain.raw_norm);
  EXPECT_EQ(safe.base.mean_outer_loss, plain.mean_outer_loss);
  EXPECT_EQ(safe.base.mean_pre_return, plain.mean_pre_return);
  EXPECT_EQ(safe.base.mean_post_return, plain.mean_post_return);
  EXPECT_EQ(safe.objective, plain.mean_outer_loss);
}

TEST(PenalizedObjective, ArithmeticAndLinearityInLambda) {
  const double l = 0.731;
  const std::vector<double> losses{l, l};
  const std::vector<double> penalties{0.0, 2.0};
  EXPECT_NEAR(penalized_objective_value(losses, penalties, 1.0), l + 1.0, 1e-15);
  EXPECT_EQ(penalized_objective_value(losses, penalties, 0.0), l);
  const double one = penalized_objective_value(losses, penalties, 1.5) - l;
  const double two = penalized_objective_value(losses, penalties, 3.0) - l;
  EXPECT_NEAR(two, 2.0 * one, 1e-15);
  EXPECT_THROW(penalized_objective_value(losses, std::vector<double>{1.0}, 1.0), Error);
}

TEST(PenalizedObjective, GraphNodeAddsWeightedPenalty) {
  ScalarGraph sg(0.4);
  const ad::Node loss = ad::tanh(sg.x);
  const ad::Node pen = sg.x * sg.x;
  EXPECT_EQ(penalized_task_objective(loss, pen, 0.0).id, loss.id);
  const double base = sg.eval->scalar(loss);
  const double p = sg.eval->scalar(pen);
  EXPECT_NEAR(sg.eval->scalar(penalized_task_objective(loss, pen, 2.0)), base + 2.0 * p, 1e-15);
  EXPECT_NEAR(sg.grad(penalized_task_objective(loss, pen, 2.0)), sg.grad(loss) + 2.0 * 2.0 * 0.4, 1e-15);
}

TEST(PenalizedObjective, ReportsPenaltyAndRate) {
  const MamlSettings s = small_settings();
  const std::vector<TaskSpec> tasks{TaskSpec::goal_velocity(0.3), TaskSpec::goal_velocity(1.7)};
  SafetyConfig sc;
  sc.eval_trajectories = 5;
  const SafeMetaGradient g = penalized_meta_gradient(small_params(), tasks, s, sc, 2.0, RngStream(5));
  EXPECT_GE(g.penalty_mean, 0.0);
  EXPECT_GE(g.violation_rate, 0.0);
  EXPECT_LE(g.violation_rate, 1.0);
  const std::vector<double> losses{g.base.tasks[0].outer_loss, g.base.tasks[1].outer_loss};
  EXPECT_NEAR(g.objective, (losses[0] + losses[1]) / 2.0 + 2.0 * g.penalty_mean, 1e-12);
}

TEST(DualUpdate, Examples) {
  EXPECT_EQ(dual_lambda_update(0.8, 0.1, 0.1, 0.5), 0.8);
  EXPECT_EQ(dual_lambda_update(0.0, 0.05, 0.1, 0.5), 0.0);
  EXPECT_NEAR(dual_lambda_update(1.0, 0.3, 0.1, 0.5), 1.1, 1e-15);
  EXPECT_EQ(dual_lambda_update(1.0, 0.9, 0.1, 0.0), 1.0);
  EXPECT_THROW(dual_lambda_update(1.0, 0.3, 0.1, -1.0), Error);
}

TEST(DualUpdate, MonotoneGrowthAndFiniteDecay) {
  double lambda = 0.5;
  for (int k = 1; k <= 50; ++k) {
    lambda = dual_lambda_update(lambda, 0.35, 0.1, 0.2);
    EXPECT_NEAR(lambda, 0.5 + k * 0.2 * 0.25, 1e-12);
  }
  // each step removes 0.2 * 0.08 = 0.016
  int steps = 0;
  while (lambda > 0.0) {
    const double next = dual_lambda_update(lambda, 0.02, 0.1, 0.2);
    EXPECT_LT(next, lambda);
    lambda = next;
    ASSERT_LT(++steps, 1000);
  }
  EXPECT_EQ(steps, static_cast<int>(std::ceil(3.0 / 0.016)));
  EXPECT_EQ(dual_lambda_update(lambda, 0.02, 0.1, 0.2), 0.0);
}

TEST(ViolationRate, AllNegativeAndAllPositive) {
  const std::vector<std::vector<double>> neg(5, std::vector<double>{-1.0, -0.2, -3.0});
  const std::vector<std::vector<double>> pos(5, std::vector<double>{1.0, 0.2, 3.0});
  EXPECT_EQ(violation_rate_from_gammas(neg, 0.1), 0.0);
  EXPECT_EQ(violation_rate_from_gammas(pos, 0.1), 1.0);
}

TEST(ViolationRate, MatchesExactBernoulliCount) {
  RngStream rng(6);
  for (std::size_t k : {1u, 4u, 10u, 25u}) {
    for (double beta : {0.05, 0.3, 0.5, 0.9}) {
      const auto gammas = gaussian_gammas(200, k, rng);
      EXPECT_EQ(violation_rate_from_gammas(gammas, beta), bernoulli_violation_rate(gammas, beta));
    }
  }
}

TEST(ViolationRate, FixedImprovementFractions) {
  // Task j has exactly j of its 10 samples <= 0, so p_hat = j / 10.
  std::vector<std::vector<double>> gammas;
  for (int j = 0; j <= 10; ++j) {
    std::vector<double> g;
    for (int m = 0; m < 10; ++m) g.push_back(m < j ? -1.0 : 1.0);
    gammas.push_back(g);
  }
  // p_hat < 0.5 for j = 0..4
  EXPECT_EQ(violation_rate_from_gammas(gammas, 0.5), 5.0 / 11.0);
  // p_hat < 0.8 for j = 0..7
  EXPECT_EQ(violation_rate_from_gammas(gammas, 0.2), 8.0 / 11.0);
}

TEST(ViolationRate, StandardNormalAtHalf) {
  RngStream rng(7);
  const std::size_t tasks = 400;
  const auto gammas = gaussian_gammas(tasks, 1, rng);
  const double rate = violation_rate_from_gammas(gammas, 0.5);
  EXPECT_NEAR(rate, 0.5, 3.0 / std::sqrt(static_cast<double>(tasks)));
  EXPECT_EQ(rate, bernoulli_violation_rate(gammas, 0.5));
}

TEST(ConstraintViolationRate, AlphaZeroNeverViolates) {
  MamlSettings s = small_settings();
  s.adapt.alpha = 0.0;
  SafetyConfig sc;
  sc.eval_trajectories = 4;
  const std::vector<TaskSpec> tasks{TaskSpec::goal_velocity(0.1), TaskSpec::goal_velocity(1.4)};
  EXPECT_EQ(constraint_violation_rate(small_params(), tasks, 0.1, s, sc, RngStream(8)), 0.0);
  EXPECT_THROW(constraint_violation_rate(small_params(), std::span<const TaskSpec>{}, 0.1, s, sc, RngStream(8)),
               Error);
}

TEST(ConstraintViolationRate, IndependentOfWorkers) {
  const MamlSettings s = small_settings();
  SafetyConfig sc;
  sc.eval_trajectories = 6;
  const std::vector<TaskSpec> tasks{TaskSpec::goal_velocity(0.1), TaskSpec::goal_velocity(1.4),
                                    TaskSpec::goal_velocity(0.9)};
  EXPECT_EQ(constraint_violation_rate(small_params(), tasks, 0.3, s, sc, RngStream(9), 1),
            constraint_violation_rate(small_params(), tasks, 0.3, s, sc, RngStream(9), 3));
}

TEST(SafeTraining, LambdaZeroLogMatchesUnpenalized) {
  TrainConfig plain = tiny_train_config();
  TrainConfig safe = plain;
  safe.safety = SafetyConfig{};
  safe.safety->lambda = 0.0;
  const TrainResult a = meta_train(plain, RngStream(10));
  const TrainResult b = meta_train(safe, RngStream(10));
  EXPECT_EQ(a.params.flatten(), b.params.flatten());

  std::ostringstream sa;
  std::ostringstream sb;
  write_training_log(sa, a.log, false);
  write_training_log(sb, b.log, true);
  std::istringstream la(sa.str());
  std::istringstream lb(sb.str());
  std::string ra;
  std::string rb;
  std::getline(la, ra);
  std::getline(lb, rb);
  EXPECT_EQ(ra, "iter,pre_return,post_return,outer_loss,grad_norm,wall_ms");
  EXPECT_EQ(rb, ra + ",penalty_mean,violation_rate,lambda");
  std::size_t rows = 0;
  while (std::getline(la, ra) && std::getline(lb, rb)) {
    const auto fa = split_csv(ra);
    const auto fb = split_csv(rb);
    ASSERT_EQ(fa.size(), 6u);
    ASSERT_EQ(fb.size(), 9u);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(fa[c], fb[c]);
    EXPECT_EQ(fb[8], "0");
    ++rows;
  }
  EXPECT_EQ(rows, 3u);
}

TEST(SafeTraining, DualAscentRaisesLambdaUnderViolations) {
  TrainConfig c = tiny_train_config();
  c.safety = SafetyConfig{};
  c.safety->lambda = 0.5;
  c.safety->dual_lr = 0.1;
  c.safety->eval_trajectories = 4;
  const TrainResult r = meta_train(c, RngStream(11));
  double lambda = 0.5;
  for (const auto& rec : r.log) {
    EXPECT_EQ(rec.lambda, lambda);
    lambda = dual_lambda_update(lambda, rec.violation_rate, 0.1, 0.1);
  }
  EXPECT_EQ(r.final_lambda, lambda);
}
