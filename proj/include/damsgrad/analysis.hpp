#pragma once

// Replacement analysis for d-AmsGrad.
//
// After a replacement at step T (so v_T == v_T^max), a run of t steps without
// replacement leaves v_max = beta3^t v_T^max while v follows its moving
// average. With a common expected squared gradient v_bar the next replacement
// happens at the first t where
//
//   v_T^max <= c(t) * v_bar,    c(t) = (1 - beta2^t) / (beta3^t - beta2^t).
//
// c(t) >= 1 for every t and grows without bound when beta3 < 1, so a decayed
// maximum is always eventually overtaken; with beta3 == 1 it is identically 1.

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "damsgrad/optimizer.hpp"

namespace damsgrad {

/// c(t). Requires t >= 1 and beta2 < beta3 <= 1; beta3 <= beta2 throws
/// ModeError. Powers are formed in log space so large t cannot produce 0/0;
/// the result saturates to +inf once it leaves the double range.
double replacement_coefficient(std::int64_t t, double beta2, double beta3);

struct ReplacementQuery {
  std::int64_t T = 0;
  double v_max_at_T = 0.0;
  double v_bar = 0.0;
};

struct ReplacementPrediction {
  std::int64_t T = 0;
  double v_max_at_T = 0.0;
  double v_bar = 0.0;
  /// First t >= 1 with v_max_at_T <= c(t) * v_bar; empty means unbounded.
  std::optional<std::int64_t> t_star;
};

/// Only defined in the decayed-max regime; other regimes throw ModeError.
/// Uses galloping plus bisection on the monotone inequality.
ReplacementPrediction predict_first_replacement(const ReplacementQuery &query,
                                                const HyperParams &hp);

/// Runs d-AmsGrad on one element starting from v = v_max = v_max_at_T and a
/// constant squared gradient, returning the number of steps until the first
/// replacement (1-based), or empty if none happens within max_steps.
std::optional<std::int64_t> simulate_first_replacement(const HyperParams &hp, double v_max_at_T,
                                                       double g_squared,
                                                       std::int64_t max_steps);

/// Window over which the expected squared gradient is estimated:
/// ceil(1 / (1 - beta2)).
std::int64_t v_bar_window(double beta2);

/// Mean of the trailing v_bar_window(beta2) entries (or all, if fewer).
double estimate_v_bar(std::span<const double> g_squared, double beta2);

/// Replacement events of an instrumented run, per element.
class ReplacementTrace {
public:
  ReplacementTrace() = default;
  explicit ReplacementTrace(Eigen::Index elements);

  /// Rebuilds a trace from its event list, e.g. when loading a checkpoint.
  static ReplacementTrace restore(Eigen::Index elements,
                                  const std::vector<std::pair<std::int64_t, std::int64_t>> &events,
                                  std::int64_t last_step);

  /// Step indices must be strictly increasing across calls.
  void record(std::int64_t step, const Mask &replaced);

  Eigen::Index elements() const { return static_cast<Eigen::Index>(gaps_.size()); }
  /// (step, element) in recording order.
  const std::vector<std::pair<std::int64_t, std::int64_t>> &events() const { return events_; }
  const std::vector<std::int64_t> &gaps(Eigen::Index element) const { return gaps_.at(element); }
  /// Gaps of all elements concatenated in element order.
  std::vector<std::int64_t> all_gaps() const;
  std::int64_t event_count(Eigen::Index element) const;
  std::int64_t last_step() const { return last_step_; }

  bool operator==(const ReplacementTrace &) const = default;

private:
  std::vector<std::pair<std::int64_t, std::int64_t>> events_;
  std::vector<std::vector<std::int64_t>> gaps_;
  std::vector<std::int64_t> last_event_;
  std::vector<std::int64_t> counts_;
  std::int64_t last_step_ = -1;
};

/// Collects a trace from consecutive step reports; reports[k] is step first_step + k.
ReplacementTrace empirical_replacement_trace(std::span<const StepReport<double>> reports,
                                             std::int64_t first_step = 1);

} // namespace damsgrad
