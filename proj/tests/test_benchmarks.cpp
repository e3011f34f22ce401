#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "damsgrad/benchmarks.hpp"
#include "damsgrad/random.hpp"

using namespace damsgrad;

namespace {

long double rastrigin_ld(long double x1, long double x2) {
  const long double tau = 2 * std::numbers::pi_v<long double>;
  return 20 + x1 * x1 - 10 * std::cos(tau * x1) + x2 * x2 - 10 * std::cos(tau * x2);
}

OptimizerChoice choice(OptimizerKind kind, double alpha, double beta3 = 1.0) {
  HyperParams hp;
  hp.alpha = alpha;
  hp.beta3 = beta3;
  return {kind, hp};
}

DriftRegressionTask small_task(std::int64_t steps) {
  DriftRegressionTask t = shifted_drift_task(steps);
  t.batch_size = 8;
  return t;
}

} // namespace

TEST_SUITE("benchmarks") {

TEST_CASE("rastrigin values") {
  const auto at0 = rastrigin_eval<double>({0.0, 0.0});
  CHECK(at0.loss == 0.0);
  CHECK(at0.grad.isZero(0));
  CHECK(rastrigin_eval<double>({-3.0, 5.0}).loss == doctest::Approx(34.0).epsilon(1e-14));
}

TEST_CASE("rastrigin gradient against finite differences") {
  Rng rng(31);
  for (int k = 0; k < 100; ++k) {
    const Eigen::Vector2d x(rng.uniform(-5.12, 5.12), rng.uniform(-5.12, 5.12));
    const auto v = rastrigin_eval<double>(x);
    const long double h = 1e-6L;
    const long double fd1 = (rastrigin_ld(x[0] + h, x[1]) - rastrigin_ld(x[0] - h, x[1])) / (2 * h);
    const long double fd2 = (rastrigin_ld(x[0], x[1] + h) - rastrigin_ld(x[0], x[1] - h)) / (2 * h);
    CHECK(v.grad[0] == doctest::Approx((double)fd1).epsilon(1e-7).scale(1.0));
    CHECK(v.grad[1] == doctest::Approx((double)fd2).epsilon(1e-7).scale(1.0));
    CHECK(v.loss == doctest::Approx((double)rastrigin_ld(x[0], x[1])).epsilon(1e-12).scale(1.0));
  }
}

TEST_CASE("rastrigin basin map") {
  // Local minima sit near integer lattice points. Polish each lattice point
  // with Newton steps in long double and read off the basin values.
  const long double tau = 2 * std::numbers::pi_v<long double>;
  auto polish = [&](long double x) {
    for (int i = 0; i < 50; ++i) {
      const long double g = 2 * x + 10 * tau * std::sin(tau * x);
      const long double h = 2 + 10 * tau * tau * std::cos(tau * x);
      x -= g / h;
    }
    return x;
  };
  long double second_best = INFINITY;
  for (int i = -5; i <= 5; ++i) {
    for (int j = -5; j <= 5; ++j) {
      const long double v = rastrigin_ld(polish(i), polish(j));
      if (i == 0 && j == 0) {
        CHECK(std::abs((double)v) < 1e-15);
      } else {
        second_best = std::min(second_best, v);
      }
    }
  }
  // The nearest competing minima, near (+-1, 0) and (0, +-1), sit just below 1.
  CHECK((double)second_best == doctest::Approx(0.99496).epsilon(1e-4));
  // Brute-force grid: every point with loss below 0.99 lies in the origin cell.
  for (int a = -400; a <= 400; ++a) {
    for (int b = -400; b <= 400; ++b) {
      const double x1 = a * 0.0125, x2 = b * 0.0125;
      if (rastrigin_eval<double>({x1, x2}).loss < 0.99) {
        REQUIRE(std::abs(x1) < 0.5);
        REQUIRE(std::abs(x2) < 0.5);
      }
    }
  }
}

TEST_CASE("zero learning rate keeps the start") {
  for (auto kind : {OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::AmsGrad, OptimizerKind::DAmsGrad}) {
    auto c = choice(kind, 0.0, 0.99999);
    const RunRecord rec = run_rastrigin(c, 50, {-3.0, 5.0});
    REQUIRE(rec.steps() == 50);
    CHECK(rec.trajectory.size() == 50);
    for (const auto &p : rec.trajectory) CHECK(p == Eigen::Vector2d(-3.0, 5.0));
    CHECK(rec.final_loss == doctest::Approx(34.0));
  }
}

TEST_CASE("rastrigin record shape and determinism") {
  const auto c = choice(OptimizerKind::DAmsGrad, 0.3, 0.99999);
  const RunRecord a = run_rastrigin(c, 500, {-3.0, 5.0}, 1);
  const RunRecord b = run_rastrigin(c, 500, {-3.0, 5.0}, 1);
  CHECK(a == b);
  CHECK(a.loss.size() == 500);
  CHECK(a.v_max_probe.size() == 500);
  CHECK(a.replacements.elements() == 2);
  CHECK(a.final_loss == a.loss.back());
  const RunRecord sgd = run_rastrigin(choice(OptimizerKind::Sgd, 1e-3), 10, {-3.0, 5.0});
  CHECK(sgd.v_max_probe.empty());
}

TEST_CASE("divergence is flagged, not thrown") {
  const RunRecord rec = run_rastrigin(choice(OptimizerKind::Sgd, 1e300), 100, {-3.0, 5.0});
  CHECK(rec.diverged);
  CHECK(std::isinf(rec.final_loss));
  CHECK(rec.steps() < 100);
  CHECK(rec.loss.size() == rec.trajectory.size());
}

TEST_CASE("beta3 = 1 reproduces amsgrad on both benchmarks") {
  const RunRecord a = run_rastrigin(choice(OptimizerKind::AmsGrad, 0.5), 2000, {-3.0, 5.0});
  const RunRecord b = run_rastrigin(choice(OptimizerKind::DAmsGrad, 0.5, 1.0), 2000, {-3.0, 5.0});
  CHECK(a == b);
  const auto task = small_task(400);
  const Mlp net = default_drift_network(task.input_dim, 3);
  const RunRecord c = run_drift_regression(choice(OptimizerKind::AmsGrad, 1e-3), task, net, 3);
  const RunRecord d = run_drift_regression(choice(OptimizerKind::DAmsGrad, 1e-3, 1.0), task, net, 3);
  CHECK(c == d);
}

TEST_CASE("drift task schedule") {
  const auto task = shifted_drift_task(1000, 0.01);
  REQUIRE(task.phases.size() == 2);
  CHECK(task.total_steps() == 1000);
  CHECK(task.phases[1].scale == doctest::Approx(0.01 * task.phases[0].scale));
  CHECK(task.phases[0].target_id != task.phases[1].target_id);
  CHECK(task.phase_of(1) == 0);
  CHECK(task.phase_of(500) == 0);
  CHECK(task.phase_of(501) == 1);
  CHECK(task.phase_begin(1) == 501);
  CHECK_THROWS(task.phase_of(1001));
  const auto flat = stationary_drift_task(300);
  CHECK(flat.phases.size() == 1);
  CHECK(flat.phases[0].scale == 1.0);

  DriftRegressionTask bad = task;
  bad.phases[0].scale = 0.0;
  CHECK_THROWS(bad.validate());
  bad = task;
  bad.phases[1].target_id = kDriftTargetCount;
  CHECK_THROWS(bad.validate());
  bad = task;
  bad.phases.clear();
  CHECK_THROWS(bad.validate());
}

TEST_CASE("drift batches depend only on seed and step") {
  const auto task = small_task(100);
  const Batch a = task.sample(5, 17), b = task.sample(5, 17);
  CHECK(a.inputs == b.inputs);
  CHECK(a.targets == b.targets);
  CHECK(a.inputs.rows() == task.batch_size);
  CHECK(a.inputs.cols() == task.input_dim);
  CHECK(a.inputs.cwiseAbs().maxCoeff() <= 1.0);
  CHECK(task.sample(5, 18).inputs != a.inputs);
  CHECK(task.sample(6, 17).inputs != a.inputs);
  // the second phase has 100x smaller targets
  const Batch late = task.sample(5, 90);
  CHECK(late.targets.cwiseAbs().maxCoeff() < 0.1 * std::max(1e-3, a.targets.cwiseAbs().maxCoeff()));
}

TEST_CASE("drift record shape") {
  const auto task = small_task(300);
  const Mlp net = default_drift_network(task.input_dim, 1);
  CHECK(net.sizes() == std::vector<Eigen::Index>{4, 32, 32, 1});
  const RunRecord rec = run_drift_regression(choice(OptimizerKind::DAmsGrad, 1e-3, 0.99999), task, net, 1);
  CHECK(rec.steps() == 300);
  CHECK(rec.v_max_probe.size() == 300);
  CHECK(rec.trajectory.empty());
  const auto [begin, end] = output_layer_slice(net);
  CHECK(end == net.parameter_count());
  CHECK(end - begin == 33);
  CHECK(rec.replacements.elements() == 33);
  CHECK(rec == run_drift_regression(choice(OptimizerKind::DAmsGrad, 1e-3, 0.99999), task, net, 1));
  DriftRegressionTask wide = task;
  wide.input_dim = 5;
  CHECK_THROWS_AS(run_drift_regression(choice(OptimizerKind::Adam, 1e-3), wide, net, 1), DimensionError);
}

TEST_CASE("monitored maximum decays at beta3 under zero gradients") {
  const auto task = small_task(200);
  DriftSession s = start_drift_session(choice(OptimizerKind::DAmsGrad, 1e-3, 0.99999), default_drift_network(4, 2));
  advance_drift_session(s, task, 2, 200);
  const Eigen::Index probe = s.net.parameter_count() - 1;
  const double start = s.optimizer.state().v_max[probe];
  CHECK(s.record.v_max_probe.back() == start);
  REQUIRE(start > 0.0);
  Eigen::VectorXd theta = s.net.flatten();
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(theta.size());
  for (int k = 1; k <= 500; ++k) {
    const auto rep = s.optimizer.step(theta, zero);
    REQUIRE_FALSE(rep->replaced_mask[probe]);
    REQUIRE(s.optimizer.state().v_max[probe] == doctest::Approx(std::pow(0.99999, k) * start).epsilon(1e-12));
  }
}

TEST_CASE("recovery metric on a synthetic record") {
  DriftRegressionTask task;
  task.phases = {{100, 0, 1.0}, {400, 1, 0.01}};
  RunRecord rec;
  for (int k = 1; k <= 100; ++k) rec.loss.push_back(1.0);
  // phase two: loss 10 for 150 steps, then 1
  for (int k = 1; k <= 400; ++k) rec.loss.push_back(k <= 150 ? 10.0 : 1.0);
  RecoveryOptions opt;
  opt.smoothing_window = 10;
  CHECK(phase_floor(rec, task, 1, opt) == 1.0);
  // the 10-step mean falls below 2 once at most one 10 remains in the window
  CHECK(recovery_steps(rec, task, 1, 1.0, opt) == 159);
  CHECK_FALSE(recovery_steps(rec, task, 1, 0.1, opt).has_value());

  RunRecord faster = rec;
  for (int k = 100 + 120; k < 100 + 150; ++k) faster.loss[k] = 1.0;
  const auto pr = paired_recovery(faster, rec, task, 1, opt);
  CHECK(pr.floor == 1.0);
  CHECK(pr.first == 129);
  CHECK(pr.second == 159);
  CHECK(pr.first_wins());
  CHECK_FALSE(paired_recovery(rec, rec, task, 1, opt).first_wins());
}

TEST_CASE("tuner basics") {
  TuneSpec spec;
  spec.budget = 1;
  const auto one = random_search_tune(spec, HyperParams{}, [](const HyperParams &hp) { return hp.alpha; });
  REQUIRE(one.best.has_value());
  CHECK(one.trials.size() == 1);
  CHECK(one.best->alpha == one.trials[0].hp.alpha);

  spec.budget = 64;
  const auto many = random_search_tune(spec, HyperParams{}, [](const HyperParams &hp) { return hp.alpha; });
  double smallest = INFINITY;
  for (const auto &t : many.trials) {
    smallest = std::min(smallest, t.hp.alpha);
    CHECK(t.hp.alpha >= spec.alpha.lo);
    CHECK(t.hp.alpha <= spec.alpha.hi);
  }
  CHECK(many.best->alpha == smallest);
  CHECK(many.best_objective == smallest);
  // trials are reproducible and prefix-stable
  spec.budget = 10;
  const auto prefix = random_search_tune(spec, HyperParams{}, [](const HyperParams &hp) { return hp.alpha; });
  for (int i = 0; i < 10; ++i) CHECK(prefix.trials[i].hp == many.trials[i].hp);

  const auto none = random_search_tune(spec, HyperParams{}, [](const HyperParams &) { return INFINITY; });
  CHECK_FALSE(none.best.has_value());
  CHECK(none.best_index == -1);
  CHECK(none.trials.size() == 10);

  spec.budget = 0;
  CHECK_THROWS(random_search_tune(spec, HyperParams{}, [](const HyperParams &) { return 0.0; }));
}

TEST_CASE("tuner optional beta ranges") {
  TuneSpec spec;
  spec.budget = 20;
  spec.beta1 = SearchRange{0.5, 0.6};
  const auto res = random_search_tune(spec, HyperParams{}, [](const HyperParams &hp) { return hp.beta1; });
  for (const auto &t : res.trials) {
    CHECK(t.hp.beta1 >= 0.5);
    CHECK(t.hp.beta1 <= 0.6);
    CHECK(t.hp.beta2 == 0.999);
  }
}

TEST_CASE("tuned adam beats the default learning rate on rastrigin") {
  TuneSpec spec;
  spec.budget = 200;
  spec.steps = 10000;
  const Eigen::Vector2d start(-3.0, 5.0);
  const auto obj = rastrigin_objective(OptimizerKind::Adam, spec.steps, start);
  const auto res = random_search_tune(spec, HyperParams{}, obj);
  REQUIRE(res.best.has_value());
  const double default_loss = obj(HyperParams{});
  CHECK(res.best_objective <= default_loss);
}

}
