#include "damsgrad/benchmarks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "damsgrad/random.hpp"

namespace damsgrad {

namespace {

constexpr double kPi = std::numbers::pi;

void record_adaptive(RunRecord &rec, const Optimizer &opt, const std::optional<StepReport<double>> &report,
                     std::int64_t step, Eigen::Index probe, Eigen::Index slice_begin,
                     Eigen::Index slice_size) {
  if (!report) return;
  rec.v_max_probe.push_back(opt.state().v_max[probe]);
  rec.replacements.record(step, Mask(report->replaced_mask.segment(slice_begin, slice_size)));
}

} // namespace

RastriginSession start_rastrigin_session(const OptimizerChoice &choice, const Eigen::Vector2d &start) {
  RastriginSession s{Optimizer(choice.kind, choice.hp, 2), start, 0, {}};
  if (choice.kind != OptimizerKind::Sgd) s.record.replacements = ReplacementTrace(2);
  s.record.final_loss = rastrigin_eval<double>(start).loss;
  return s;
}

void advance_rastrigin_session(RastriginSession &s, std::int64_t until) {
  if (s.x.size() != 2) throw DimensionError("rastrigin session needs a 2-vector");
  auto value = rastrigin_eval<double>(Eigen::Vector2d(s.x));
  auto &rec = s.record;
  while (!rec.diverged && s.step < until) {
    const std::int64_t k = s.step + 1;
    std::optional<StepReport<double>> report;
    try {
      report = s.optimizer.step(s.x, Eigen::VectorXd(value.grad));
    } catch (const NumericError &) {
      rec.diverged = true;
      break;
    }
    value = rastrigin_eval<double>(Eigen::Vector2d(s.x));
    if (!std::isfinite(value.loss) || !value.grad.allFinite()) {
      rec.diverged = true;
      break;
    }
    rec.loss.push_back(value.loss);
    rec.trajectory.emplace_back(s.x);
    record_adaptive(rec, s.optimizer, report, k, 0, 0, 2);
    rec.final_loss = value.loss;
    s.step = k;
  }
  if (rec.diverged) rec.final_loss = std::numeric_limits<double>::infinity();
}

RunRecord run_rastrigin(const OptimizerChoice &choice, std::int64_t steps,
                        const Eigen::Vector2d &start, std::uint64_t /*seed*/) {
  if (steps < 0) throw ModeError("step count must be non-negative");
  RastriginSession s = start_rastrigin_session(choice, start);
  s.record.loss.reserve(static_cast<std::size_t>(steps));
  s.record.trajectory.reserve(static_cast<std::size_t>(steps));
  advance_rastrigin_session(s, steps);
  return std::move(s.record);
}

double drift_target(int id, const Eigen::Ref<const Eigen::RowVectorXd> &x) {
  const Eigen::Index d = x.size();
  if (d == 0) throw DimensionError("drift target needs at least one input");
  auto at = [&](Eigen::Index i) { return x[i % d]; };
  switch (id) {
  case 0: return std::sin(kPi * at(0)) * std::cos(0.5 * kPi * at(1)) + 0.5 * at(2) - 0.25 * at(3);
  case 1: return std::tanh(2.0 * (at(0) - at(1))) + 0.5 * at(2) * at(3);
  case 2: return 0.5 * (at(0) * at(0) + at(1) * at(1) - at(2) * at(2)) + 0.3 * std::sin(2.0 * kPi * at(3));
  default: break;
  }
  throw ModeError("unknown drift target id " + std::to_string(id));
}

void DriftRegressionTask::validate() const {
  if (phases.empty()) throw ModeError("drift task needs at least one phase");
  for (const auto &p : phases) {
    if (p.steps < 1) throw ModeError("drift phases must span at least one step");
    if (!(p.scale > 0.0) || !std::isfinite(p.scale)) throw ModeError("drift phase scale must be positive");
    if (p.target_id < 0 || p.target_id >= kDriftTargetCount) {
      throw ModeError("unknown drift target id " + std::to_string(p.target_id));
    }
  }
  if (input_dim < 1) throw DimensionError("drift input dimension must be positive");
  if (batch_size < 1) throw DimensionError("drift batch size must be positive");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ModeError("drift noise must be non-negative");
}

std::int64_t DriftRegressionTask::total_steps() const {
  std::int64_t n = 0;
  for (const auto &p : phases) n += p.steps;
  return n;
}

std::size_t DriftRegressionTask::phase_of(std::int64_t step) const {
  std::int64_t end = 0;
  for (std::size_t p = 0; p < phases.size(); ++p) {
    end += phases[p].steps;
    if (step <= end) return p;
  }
  throw ModeError("step " + std::to_string(step) + " lies beyond the last phase");
}

std::int64_t DriftRegressionTask::phase_begin(std::size_t p) const {
  std::int64_t begin = 1;
  for (std::size_t q = 0; q < p; ++q) begin += phases.at(q).steps;
  return begin;
}

Batch DriftRegressionTask::sample(std::uint64_t seed, std::int64_t step) const {
  const auto &phase = phases.at(phase_of(step));
  Rng rng(derive_seed(seed, {0xd41f7ULL, static_cast<std::uint64_t>(step)}));
  Batch batch{Eigen::MatrixXd(batch_size, input_dim), Eigen::MatrixXd(batch_size, 1)};
  for (Eigen::Index r = 0; r < batch_size; ++r) {
    for (Eigen::Index c = 0; c < input_dim; ++c) batch.inputs(r, c) = rng.uniform(-1.0, 1.0);
    const double clean = drift_target(phase.target_id, batch.inputs.row(r));
    batch.targets(r, 0) = phase.scale * (clean + noise * rng.normal());
  }
  return batch;
}

DriftRegressionTask stationary_drift_task(std::int64_t steps) {
  DriftRegressionTask task;
  task.phases = {{steps, 0, 1.0}};
  return task;
}

DriftRegressionTask shifted_drift_task(std::int64_t steps, double shift) {
  DriftRegressionTask task;
  const std::int64_t first = steps / 2;
  task.phases = {{first, 0, 1.0}, {steps - first, 1, shift}};
  return task;
}

Mlp default_drift_network(Eigen::Index input_dim, std::uint64_t seed) {
  Mlp net({input_dim, 32, 32, 1}, Activation::Swish, OutputMap::Identity);
  net.init_uniform(derive_seed(seed, {0x1217ULL}));
  return net;
}

std::pair<Eigen::Index, Eigen::Index> output_layer_slice(const Mlp &net) {
  const auto &last = net.layers().back();
  const Eigen::Index size = last.weights.size() + last.bias.size();
  return {net.parameter_count() - size, net.parameter_count()};
}

DriftSession start_drift_session(const OptimizerChoice &choice, const Mlp &net) {
  DriftSession s{net, Optimizer(choice.kind, choice.hp, net.parameter_count()), 0, {}};
  if (choice.kind != OptimizerKind::Sgd) {
    const auto [begin, end] = output_layer_slice(net);
    s.record.replacements = ReplacementTrace(end - begin);
  }
  return s;
}

void advance_drift_session(DriftSession &s, const DriftRegressionTask &task, std::uint64_t seed,
                           std::int64_t until) {
  task.validate();
  if (s.net.input_dim() != task.input_dim) throw DimensionError("network input width differs from the task");
  if (s.net.output_dim() != 1) throw DimensionError("drift regression needs a single network output");
  until = std::min(until, task.total_steps());
  const auto [begin, end] = output_layer_slice(s.net);
  Eigen::VectorXd theta = s.net.flatten();
  while (!s.record.diverged && s.step < until) {
    const std::int64_t k = s.step + 1;
    const Batch batch = task.sample(seed, k);
    const auto [loss, grad] = loss_and_gradient(s.net, batch);
    if (!std::isfinite(loss) || !grad.allFinite()) {
      s.record.diverged = true;
      break;
    }
    std::optional<StepReport<double>> report;
    try {
      report = s.optimizer.step(theta, grad);
    } catch (const NumericError &) {
      s.record.diverged = true;
      break;
    }
    s.net.unflatten(theta);
    s.record.loss.push_back(loss);
    record_adaptive(s.record, s.optimizer, report, k, end - 1, begin, end - begin);
    s.step = k;
  }
  const auto &losses = s.record.loss;
  if (s.record.diverged) {
    s.record.final_loss = std::numeric_limits<double>::infinity();
  } else if (!losses.empty()) {
    const std::size_t n = std::min<std::size_t>(100, losses.size());
    s.record.final_loss = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(n), losses.end(), 0.0) /
                          static_cast<double>(n);
  }
}

RunRecord run_drift_regression(const OptimizerChoice &choice, const DriftRegressionTask &task,
                               const Mlp &net, std::uint64_t seed) {
  DriftSession s = start_drift_session(choice, net);
  advance_drift_session(s, task, seed, task.total_steps());
  return std::move(s.record);
}

double phase_floor(const RunRecord &record, const DriftRegressionTask &task, std::size_t p,
                   const RecoveryOptions &options) {
  const std::int64_t begin = task.phase_begin(p);
  const std::int64_t end = begin + task.phases.at(p).steps; // exclusive, 1-based
  if (record.steps() < end - 1) throw ModeError("run ended before the phase was complete");
  const auto span = static_cast<std::int64_t>(
      std::max(1.0, std::ceil(options.tail_fraction * static_cast<double>(task.phases[p].steps))));
  double sum = 0.0;
  for (std::int64_t k = end - span; k < end; ++k) sum += record.loss[static_cast<std::size_t>(k - 1)];
  return sum / static_cast<double>(span);
}

std::optional<std::int64_t> recovery_steps(const RunRecord &record, const DriftRegressionTask &task,
                                           std::size_t p, double floor, const RecoveryOptions &options) {
  const std::int64_t begin = task.phase_begin(p);
  const std::int64_t end = std::min(begin + task.phases.at(p).steps, record.steps() + 1);
  const std::int64_t w = std::max<std::int64_t>(1, options.smoothing_window);
  const double threshold = options.factor * floor;
  double window_sum = 0.0;
  for (std::int64_t k = begin; k < end; ++k) {
    window_sum += record.loss[static_cast<std::size_t>(k - 1)];
    if (k - begin >= w) window_sum -= record.loss[static_cast<std::size_t>(k - w - 1)];
    if (k - begin + 1 >= w && window_sum / static_cast<double>(w) < threshold) return k - begin + 1;
  }
  return std::nullopt;
}

bool PairedRecovery::first_wins() const {
  if (!first) return false;
  if (!second) return true;
  return *first < *second;
}

PairedRecovery paired_recovery(const RunRecord &first, const RunRecord &second,
                               const DriftRegressionTask &task, std::size_t p,
                               const RecoveryOptions &options) {
  PairedRecovery out{};
  if (first.diverged || second.diverged) {
    out.floor = std::numeric_limits<double>::quiet_NaN();
    if (!first.diverged) out.first = recovery_steps(first, task, p, std::numeric_limits<double>::infinity(), options);
    if (!second.diverged) out.second = recovery_steps(second, task, p, std::numeric_limits<double>::infinity(), options);
    return out;
  }
  out.floor = std::min(phase_floor(first, task, p, options), phase_floor(second, task, p, options));
  out.first = recovery_steps(first, task, p, out.floor, options);
  out.second = recovery_steps(second, task, p, out.floor, options);
  return out;
}

void TuneSpec::validate() const {
  if (!(alpha.lo > 0.0 && alpha.lo <= alpha.hi)) throw ModeError("alpha search range must satisfy 0 < lo <= hi");
  auto unit = [](const std::optional<SearchRange> &r, const char *name) {
    if (r && !(r->lo >= 0.0 && r->lo <= r->hi && r->hi < 1.0)) {
      throw ModeError(std::string(name) + " search range must satisfy 0 <= lo <= hi < 1");
    }
  };
  unit(beta1, "beta1");
  unit(beta2, "beta2");
  if (budget < 1) throw ModeError("tuning budget must be at least 1");
  if (steps < 1) throw ModeError("tuning steps must be at least 1");
}

TuneResult random_search_tune(const TuneSpec &spec, const HyperParams &base,
                              const TuneObjective &objective) {
  spec.validate();
  TuneResult result;
  for (std::int64_t i = 0; i < spec.budget; ++i) {
    Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(i)}));
    HyperParams hp = base;
    hp.alpha = rng.log_uniform(spec.alpha.lo, spec.alpha.hi);
    if (spec.beta1) hp.beta1 = rng.uniform(spec.beta1->lo, spec.beta1->hi);
    if (spec.beta2) hp.beta2 = rng.uniform(spec.beta2->lo, spec.beta2->hi);
    const double value = objective(hp);
    const bool diverged = !std::isfinite(value);
    result.trials.push_back({i, hp, value, diverged});
    if (!diverged && (result.best_index < 0 || value < result.best_objective)) {
      result.best = hp;
      result.best_objective = value;
      result.best_index = i;
    }
  }
  return result;
}

TuneObjective rastrigin_objective(OptimizerKind kind, std::int64_t steps, const Eigen::Vector2d &start) {
  return [kind, steps, start](const HyperParams &hp) {
    const RunRecord rec = run_rastrigin({kind, hp}, steps, start);
    return rec.diverged ? std::numeric_limits<double>::infinity() : rec.final_loss;
  };
}

} // namespace damsgrad
