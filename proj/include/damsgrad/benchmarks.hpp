#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "damsgrad/analysis.hpp"
#include "damsgrad/network.hpp"
#include "damsgrad/optimizer.hpp"

namespace damsgrad {

// ---------------------------------------------------------------------------
// Rastrigin

template <typename Scalar> struct RastriginValue {
  Scalar loss;
  Eigen::Matrix<Scalar, 2, 1> grad;
};

/// 20 + sum_i (x_i^2 - 10 cos(2 pi x_i)); minimum 0 at the origin.
template <typename Scalar>
RastriginValue<Scalar> rastrigin_eval(const Eigen::Matrix<Scalar, 2, 1> &x) {
  using std::cos;
  using std::sin;
  const Scalar two_pi = Scalar(2) * std::numbers::pi_v<Scalar>;
  RastriginValue<Scalar> out{Scalar(20), {}};
  for (int i = 0; i < 2; ++i) {
    out.loss += x[i] * x[i] - Scalar(10) * cos(two_pi * x[i]);
    out.grad[i] = Scalar(2) * x[i] + Scalar(10) * two_pi * sin(two_pi * x[i]);
  }
  return out;
}

struct RastriginProblem {
  Eigen::Vector2d start{-3.0, 5.0};
};

// ---------------------------------------------------------------------------
// Run records

struct OptimizerChoice {
  OptimizerKind kind = OptimizerKind::DAmsGrad;
  HyperParams hp;
};

/// Per-step series of one benchmark run. Row k (1-based) describes step k.
struct RunRecord {
  std::vector<double> loss;
  /// Parameters after each step; filled for two-dimensional problems only.
  std::vector<Eigen::Vector2d> trajectory;
  /// v_max of the monitored parameter after each step (empty for SGD).
  std::vector<double> v_max_probe;
  ReplacementTrace replacements;
  double final_loss = 0.0;
  bool diverged = false;

  std::int64_t steps() const { return static_cast<std::int64_t>(loss.size()); }
  bool operator==(const RunRecord &) const = default;
};

/// Resumable state of a Rastrigin run.
struct RastriginSession {
  Optimizer optimizer;
  Eigen::VectorXd x;
  std::int64_t step = 0;
  RunRecord record;
};

RastriginSession start_rastrigin_session(const OptimizerChoice &choice, const Eigen::Vector2d &start);

/// Advances up to step `until` (1-based, inclusive) or until divergence.
void advance_rastrigin_session(RastriginSession &session, std::int64_t until);

/// Loss after each step is recorded at the updated point; the seed is unused
/// because the problem is deterministic, and is accepted for a uniform runner
/// interface. A non-finite loss or update ends the run with diverged = true.
RunRecord run_rastrigin(const OptimizerChoice &choice, std::int64_t steps,
                        const Eigen::Vector2d &start, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Drift regression

/// One contiguous block of steps with a fixed target function and amplitude.
struct DriftPhase {
  std::int64_t steps = 0;
  int target_id = 0;
  double scale = 1.0;

  bool operator==(const DriftPhase &) const = default;
};

/// Number of built-in target functions (ids 0 .. count-1).
inline constexpr int kDriftTargetCount = 3;

/// Target function `id` at x (inputs read cyclically if x is short).
double drift_target(int id, const Eigen::Ref<const Eigen::RowVectorXd> &x);

/// Online regression whose target function and amplitude change by phase.
/// The batch for step k depends only on (seed, k), so runs can be resumed.
struct DriftRegressionTask {
  std::vector<DriftPhase> phases;
  Eigen::Index input_dim = 4;
  Eigen::Index batch_size = 16;
  /// Standard deviation of additive target noise, relative to the phase scale.
  double noise = 0.05;

  void validate() const;
  std::int64_t total_steps() const;
  /// Phase index of 1-based step k.
  std::size_t phase_of(std::int64_t step) const;
  /// First 1-based step of phase p.
  std::int64_t phase_begin(std::size_t p) const;
  Batch sample(std::uint64_t seed, std::int64_t step) const;

  bool operator==(const DriftRegressionTask &) const = default;
};

/// The stationary control: one phase of `steps` steps on target 0 at scale 1.
DriftRegressionTask stationary_drift_task(std::int64_t steps);
/// Two equal phases, the second on a different target with `shift` times
/// the amplitude of the first.
DriftRegressionTask shifted_drift_task(std::int64_t steps, double shift = 0.01);

/// 2 hidden layers x 32 Swish units, identity output, scaled-uniform init.
Mlp default_drift_network(Eigen::Index input_dim, std::uint64_t seed);

/// Resumable state of a drift-regression run.
struct DriftSession {
  Mlp net;
  Optimizer optimizer;
  std::int64_t step = 0;
  RunRecord record;
};

/// Starts a session: the monitored parameter is the output bias and the
/// replacement trace covers the whole output layer.
DriftSession start_drift_session(const OptimizerChoice &choice, const Mlp &net);

/// Advances up to `until` (1-based, inclusive) or until divergence.
void advance_drift_session(DriftSession &session, const DriftRegressionTask &task, std::uint64_t seed,
                           std::int64_t until);

/// Records the batch loss observed at each step before its update.
/// final_loss is the mean of the last 100 recorded losses (or all, if fewer).
RunRecord run_drift_regression(const OptimizerChoice &choice, const DriftRegressionTask &task,
                               const Mlp &net, std::uint64_t seed);

/// First index range [begin, end) of the output layer in the flat vector.
std::pair<Eigen::Index, Eigen::Index> output_layer_slice(const Mlp &net);

struct RecoveryOptions {
  std::int64_t smoothing_window = 100;
  double tail_fraction = 0.1;
  double factor = 2.0;
};

/// Mean loss over the last tail_fraction of phase p.
double phase_floor(const RunRecord &record, const DriftRegressionTask &task, std::size_t p,
                   const RecoveryOptions &options = {});

/// Steps from the start of phase p until the moving mean of the loss first
/// falls below factor * floor. Empty if it never does within the phase.
std::optional<std::int64_t> recovery_steps(const RunRecord &record, const DriftRegressionTask &task,
                                           std::size_t p, double floor,
                                           const RecoveryOptions &options = {});

/// Recovery steps of two runs on the same task and seed, both measured
/// against the lower of their two phase floors.
struct PairedRecovery {
  double floor;
  std::optional<std::int64_t> first;
  std::optional<std::int64_t> second;
  /// first recovered strictly sooner than second (never recovering counts as infinitely late)
  bool first_wins() const;
};

PairedRecovery paired_recovery(const RunRecord &first, const RunRecord &second,
                               const DriftRegressionTask &task, std::size_t p,
                               const RecoveryOptions &options = {});

// ---------------------------------------------------------------------------
// Hyperparameter search

struct SearchRange {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const SearchRange &) const = default;
};

struct TuneSpec {
  /// Sampled log-uniformly.
  SearchRange alpha{1e-4, 10.0};
  /// Sampled uniformly when present; otherwise taken from the base hyperparameters.
  std::optional<SearchRange> beta1;
  std::optional<SearchRange> beta2;
  std::int64_t budget = 50;
  /// Steps per trial.
  std::int64_t steps = 10000;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TuneSpec &) const = default;
};

struct TrialRecord {
  std::int64_t index;
  HyperParams hp;
  double objective;
  bool diverged;
};

struct TuneResult {
  /// Empty when every trial diverged.
  std::optional<HyperParams> best;
  double best_objective = std::numeric_limits<double>::infinity();
  std::int64_t best_index = -1;
  std::vector<TrialRecord> trials;
};

/// Returns the final loss of a trial; non-finite means the trial diverged.
using TuneObjective = std::function<double(const HyperParams &)>;

/// Trial i draws from its own stream derive_seed(spec.seed, {i}); ties keep
/// the earliest trial.
TuneResult random_search_tune(const TuneSpec &spec, const HyperParams &base,
                              const TuneObjective &objective);

/// Final loss of run_rastrigin from `start`; diverged runs map to +inf.
TuneObjective rastrigin_objective(OptimizerKind kind, std::int64_t steps, const Eigen::Vector2d &start);

} // namespace damsgrad
