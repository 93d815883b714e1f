#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "metadapt/analysis.hpp"
#include "test_support.hpp"

using namespace metadapt;
using testing_support::small_params;
using testing_support::small_settings;

namespace {

double brute_percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double r = q / 100.0 * static_cast<double>(v.size() - 1);
  const double lo = v[static_cast<std::size_t>(std::floor(r))];
  const double hi = v[static_cast<std::size_t>(std::ceil(r))];
  return lo + (r - std::floor(r)) * (hi - lo);
}

SweepReport flagged(const std::vector<double>& params, const std::vector<bool>& flags) {
  SweepReport s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    AdaptationReport r;
    r.task = TaskSpec::goal_velocity(params[i]);
    r.negative_flag = flags[i];
    s.reports.push_back(r);
  }
  return s;
}

EvalConfig small_eval() {
  EvalConfig ec;
  ec.eval_rollouts = 5;
  return ec;
}

std::string sweep_csv(const SweepReport& s) {
  std::ostringstream os;
  write_sweep_csv(os, s);
  return os.str();
}

}  // namespace

TEST(Percentile, Examples) {
  EXPECT_EQ(percentile({1, 2, 3}, 50), 2.0);
  EXPECT_EQ(percentile({0, 10}, 25), 2.5);
  for (double q : {0.0, 13.0, 50.0, 100.0}) EXPECT_EQ(percentile({5}, q), 5.0);
  EXPECT_EQ(percentile({3, 1, 2}, 0), 1.0);
  EXPECT_EQ(percentile({3, 1, 2}, 100), 3.0);
}

TEST(Percentile, Errors) {
  EXPECT_THROW(percentile({}, 50), Error);
  EXPECT_THROW(percentile({1, 2}, -0.1), Error);
  EXPECT_THROW(percentile({1, 2}, 100.5), Error);
}

TEST(Percentile, MatchesBruteForceAndOrders) {
  RngStream rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform(1.0, 60.0));
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-100.0, 10.0);
    const double q = rng.uniform(0.0, 100.0);
    EXPECT_EQ(percentile(v, q), brute_percentile(v, q));
    const ReturnStats s = summarize(v);
    EXPECT_LE(s.p5, s.p25);
    EXPECT_LE(s.p25, s.median);
    EXPECT_LE(s.median, s.p75);
    EXPECT_LE(s.p75, s.p95);
    EXPECT_EQ(s.n, n);
  }
}

TEST(Report, HandBuiltNegativeAdaptation) {
  const AdaptationReport r = build_report(TaskSpec::goal_velocity(1.0), {3, 3}, {1, 1});
  EXPECT_EQ(r.gamma_samples, (std::vector<double>{2, 2}));
  EXPECT_EQ(r.gamma_mean, 2.0);
  EXPECT_EQ(r.prob_improve, 0.0);
  EXPECT_TRUE(r.negative_flag);
}

TEST(Report, TieCountsAsImprovement) {
  EXPECT_EQ(improvement_probability({0.0, 0.0}), 1.0);
  EXPECT_EQ(improvement_probability({0.0, 1.0, -1.0, 2.0}), 0.5);
  EXPECT_THROW(improvement_probability({}), Error);
}

TEST(Report, FlagRules) {
  // median falls, mean rises
  const std::vector<double> pre{0, 5, 5};
  const std::vector<double> post{100, 4, 4};
  EXPECT_TRUE(build_report(TaskSpec::goal_velocity(1.0), pre, post, FlagRule::Median).negative_flag);
  EXPECT_FALSE(build_report(TaskSpec::goal_velocity(1.0), pre, post, FlagRule::Mean).negative_flag);
  EXPECT_EQ(parse_flag_rule("mean"), FlagRule::Mean);
  EXPECT_EQ(to_string(FlagRule::Median), "median");
  EXPECT_THROW(parse_flag_rule("mode"), Error);
  EXPECT_THROW(build_report(TaskSpec::goal_velocity(1.0), {1, 2}, {1}), Error);
}

TEST(EvaluateAdaptation, AlphaZeroGivesExactZeroGamma) {
  MamlSettings s = small_settings();
  s.adapt.alpha = 0.0;
  for (double v : {0.0, 0.8, 2.5}) {
    const AdaptationReport r = evaluate_adaptation(small_params(), TaskSpec::goal_velocity(v), s, small_eval(),
                                                   RngStream(2).child(3));
    for (double g : r.gamma_samples) EXPECT_EQ(g, 0.0);
    EXPECT_EQ(r.prob_improve, 1.0);
    EXPECT_FALSE(r.negative_flag);
    EXPECT_EQ(r.pre_samples, r.post_samples);
  }
}

TEST(EvaluateAdaptation, PairedSamplesAndCounts) {
  const AdaptationReport r = evaluate_adaptation(small_params(), TaskSpec::goal_velocity(1.2), small_settings(),
                                                 small_eval(), RngStream(3));
  ASSERT_EQ(r.gamma_samples.size(), 5u);
  EXPECT_EQ(r.pre.n, 5u);
  EXPECT_EQ(r.post.n, 5u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(r.gamma_samples[k], r.pre_samples[k] - r.post_samples[k]);
  EXPECT_GE(r.prob_improve, 0.0);
  EXPECT_LE(r.prob_improve, 1.0);
}

TEST(EvaluateAdaptation, UndiscountedByDefault) {
  MamlSettings s = small_settings();
  s.adapt.alpha = 0.0;
  const AdaptationReport r = evaluate_adaptation(small_params(), TaskSpec::goal_velocity(1.0), s, small_eval(),
                                                 RngStream(4));
  const RngStream eval_stream = RngStream(4).child(streams::kEval);
  const Dataset d = collect_dataset(TaskSpec::goal_velocity(1.0), small_params(), {5, 1.0}, s.env, eval_stream);
  for (std::size_t k = 0; k < 5; ++k) {
    double total = 0.0;
    for (double x : d.trajectories[k].rewards) total += x;
    EXPECT_NEAR(r.pre_samples[k], total, 1e-12);
  }
}

TEST(Sweep, OneTaskGivesOneReport) {
  const SweepReport s = task_sweep(small_params(), {TaskSpec::goal_velocity(0.5)}, small_settings(), small_eval(),
                                   RngStream(5), {0.0, 2.0});
  EXPECT_EQ(s.reports.size(), 1u);
  EXPECT_THROW(task_sweep(small_params(), {}, small_settings(), small_eval(), RngStream(5), {0.0, 2.0}), Error);
  EXPECT_THROW(task_sweep(small_params(), {TaskSpec::goal_velocity(0.5), TaskSpec::goal_velocity(0.5)},
                          small_settings(), small_eval(), RngStream(5), {0.0, 2.0}),
               Error);
}

TEST(Sweep, OrderedAndTaggedWithTrainingRange) {
  const auto grid = task_grid(TaskFamily::GoalVelocity, 0.0, 3.0, 0.5);
  const SweepReport s = task_sweep(small_params(), grid, small_settings(), small_eval(), RngStream(6), {0.0, 2.0});
  ASSERT_EQ(s.reports.size(), 7u);
  for (std::size_t i = 1; i < s.reports.size(); ++i)
    EXPECT_GT(s.reports[i].task.parameter, s.reports[i - 1].task.parameter);
  EXPECT_EQ(s.reports.back().task.parameter, 3.0);
  EXPECT_EQ(s.training_low, 0.0);
  EXPECT_EQ(s.training_high, 2.0);
  std::ostringstream os;
  write_sweep_sidecar(os, s);
  EXPECT_EQ(os.str(), "training_range,0,2\n");
}

TEST(Sweep, InvariantToGridOrderAndWorkers) {
  auto grid = task_grid(TaskFamily::GoalVelocity, 0.0, 2.0, 0.4);
  const SweepReport a = task_sweep(small_params(), grid, small_settings(), small_eval(), RngStream(7), {0.0, 2.0});
  std::reverse(grid.begin(), grid.end());
  std::swap(grid[1], grid[3]);
  const SweepReport b =
      task_sweep(small_params(), grid, small_settings(), small_eval(), RngStream(7), {0.0, 2.0}, 3);
  EXPECT_EQ(sweep_csv(a), sweep_csv(b));
  EXPECT_EQ(negative_region(a), negative_region(b));
}

TEST(Sweep, TaskResultIndependentOfOtherTasks) {
  const SweepReport full = task_sweep(small_params(), task_grid(TaskFamily::GoalVelocity, 0.0, 2.0, 0.5),
                                      small_settings(), small_eval(), RngStream(8), {0.0, 2.0});
  const SweepReport one = task_sweep(small_params(), {TaskSpec::goal_velocity(1.5)}, small_settings(), small_eval(),
                                     RngStream(8), {0.0, 2.0});
  EXPECT_EQ(one.reports[0].pre_samples, full.reports[3].pre_samples);
  EXPECT_EQ(one.reports[0].post_samples, full.reports[3].post_samples);
}

TEST(NegativeRegion, Examples) {
  EXPECT_EQ(negative_region(flagged({0, 1, 2, 3}, {false, true, true, false})),
            (std::vector<std::pair<double, double>>{{1, 2}}));
  EXPECT_TRUE(negative_region(flagged({0, 1, 2}, {false, false, false})).empty());
  EXPECT_EQ(negative_region(flagged({0.5, 1, 1.5}, {true, false, true})),
            (std::vector<std::pair<double, double>>{{0.5, 0.5}, {1.5, 1.5}}));
  EXPECT_EQ(negative_region(flagged({0, 1, 2}, {true, true, true})),
            (std::vector<std::pair<double, double>>{{0, 2}}));
}

TEST(ConstraintEstimate, Examples) {
  const auto all_neg = constraint_probability_estimate({{-1, -2}, {-0.5}}, 0.3);
  EXPECT_EQ(all_neg.p_hat, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(all_neg.outer_fraction, 1.0);
  // p_hat = 0.6 against 1 - beta = 0.5
  const auto sixty = constraint_probability_estimate({{-1, -1, -1, 1, 1}}, 0.5);
  EXPECT_EQ(sixty.p_hat[0], 0.6);
  EXPECT_EQ(sixty.outer_fraction, 1.0);
  EXPECT_THROW(constraint_probability_estimate(std::vector<std::vector<double>>{}, 0.5), Error);
}

TEST(ConstraintEstimate, FromSweep) {
  SweepReport s;
  for (const auto& g : std::vector<std::vector<double>>{{-1, 1}, {-1, -1}}) {
    AdaptationReport r;
    r.gamma_samples = g;
    s.reports.push_back(r);
  }
  const auto est = constraint_probability_estimate(s, 0.1);
  EXPECT_EQ(est.p_hat, (std::vector<double>{0.5, 1.0}));
  EXPECT_EQ(est.outer_fraction, 0.5);
}

TEST(SweepCsv, SchemaStrings) {
  EXPECT_EQ(sweep_csv_header(),
            "task_param,n_eval,pre_median,pre_p5,pre_p25,pre_p75,pre_p95,pre_mean,post_median,post_p5,post_p25,"
            "post_p75,post_p95,post_mean,gamma_mean,prob_improve,negative_flag");
  std::size_t commas = 0;
  for (char c : compare_csv_header()) commas += c == ',' ? 1 : 0;
  EXPECT_EQ(commas + 1, 33u);
  EXPECT_EQ(compare_csv_header().substr(0, 28), "task_param,n_eval_a,pre_medi");
}

TEST(SweepCsv, RowsMatchReports) {
  const SweepReport s = task_sweep(small_params(), task_grid(TaskFamily::GoalVelocity, 0.0, 1.0, 0.5),
                                   small_settings(), small_eval(), RngStream(9), {0.0, 2.0});
  std::istringstream is(sweep_csv(s));
  std::string line;
  std::getline(is, line);
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    std::size_t commas = 0;
    for (char c : line) commas += c == ',' ? 1 : 0;
    EXPECT_EQ(commas, 16u);
    EXPECT_EQ(line.substr(0, line.find(',')), fmt_double(s.reports[rows].task.parameter));
    const char flag = line.back();
    EXPECT_EQ(flag, s.reports[rows].negative_flag ? '1' : '0');
    ++rows;
  }
  EXPECT_EQ(rows, 3u);
}

TEST(CompareCsv, MismatchedGridsAreAnError) {
  const SweepReport a = task_sweep(small_params(), {TaskSpec::goal_velocity(0.5)}, small_settings(), small_eval(),
                                   RngStream(10), {0.0, 2.0});
  const SweepReport b = task_sweep(small_params(), {TaskSpec::goal_velocity(0.6)}, small_settings(), small_eval(),
                                   RngStream(10), {0.0, 2.0});
  std::ostringstream os;
  EXPECT_THROW(write_compare_csv(os, a, b), Error);
  std::ostringstream ok;
  write_compare_csv(ok, a, a);
  EXPECT_NE(ok.str().find("\n0.5,"), std::string::npos);
}
