#include "damsgrad/analysis.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace damsgrad {

double replacement_coefficient(std::int64_t t, double beta2, double beta3) {
  if (t < 1) throw ModeError("replacement coefficient needs t >= 1");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ModeError("beta2 must lie in [0, 1)");
  if (!(beta3 <= 1.0)) throw ModeError("beta3 must not exceed 1");
  if (!(beta3 > beta2)) throw ModeError("replacement coefficient needs beta3 > beta2");

  const double tt = static_cast<double>(t);
  // 1 - beta2^t
  const double numer = -std::expm1(tt * std::log(beta2));
  // beta3^t - beta2^t = beta3^t * (1 - (beta2 / beta3)^t)
  const double log_b3t = tt * std::log(beta3);
  const double ratio_term = -std::expm1(tt * (std::log(beta2) - std::log(beta3)));
  const double log_c = std::log(numer) - log_b3t - std::log(ratio_term);
  return std::exp(log_c);
}

namespace {

bool overtaken(const ReplacementQuery &q, std::int64_t t, double beta2, double beta3) {
  return q.v_max_at_T <= replacement_coefficient(t, beta2, beta3) * q.v_bar;
}

} // namespace

ReplacementPrediction predict_first_replacement(const ReplacementQuery &query,
                                                const HyperParams &hp) {
  hp.validate();
  if (classify_mode(hp) != Mode::DecayedMax) {
    throw ModeError("replacement prediction is only defined for beta2 < beta3 < 1");
  }
  if (!(query.v_bar >= 0.0) || !(query.v_max_at_T >= 0.0)) {
    throw ModeError("v_bar and v_max_at_T must be non-negative");
  }
  if (query.T < 0) throw ModeError("T must be non-negative");

  ReplacementPrediction out{query.T, query.v_max_at_T, query.v_bar, std::nullopt};
  if (query.v_max_at_T == 0.0) {
    out.t_star = 1;
    return out;
  }
  if (query.v_bar == 0.0) return out;

  const double b2 = hp.beta2, b3 = hp.beta3;
  if (overtaken(query, 1, b2, b3)) {
    out.t_star = 1;
    return out;
  }
  constexpr std::int64_t kLimit = std::int64_t{1} << 62;
  std::int64_t lo = 1, hi = 2;
  while (!overtaken(query, hi, b2, b3)) {
    if (hi >= kLimit) return out;
    lo = hi;
    hi *= 2;
  }
  // predicate false at lo, true at hi
  while (hi - lo > 1) {
    const std::int64_t mid = lo + (hi - lo) / 2;
    if (overtaken(query, mid, b2, b3)) hi = mid;
    else lo = mid;
  }
  out.t_star = hi;
  return out;
}

std::optional<std::int64_t> simulate_first_replacement(const HyperParams &hp, double v_max_at_T,
                                                       double g_squared,
                                                       std::int64_t max_steps) {
  if (!(g_squared >= 0.0) || !(v_max_at_T >= 0.0)) {
    throw ModeError("squared gradient and v_max must be non-negative");
  }
  OptimizerState<double> state = OptimizerState<double>::zeros(1);
  state.v.setConstant(v_max_at_T);
  state.v_max.setConstant(v_max_at_T);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(1);
  const Eigen::VectorXd g = Eigen::VectorXd::Constant(1, std::sqrt(g_squared));
  HyperParams quiet = hp;
  quiet.alpha = 0.0;
  for (std::int64_t k = 1; k <= max_steps; ++k) {
    const auto report = d_amsgrad_step(state, theta, g, quiet);
    if (report.replaced_mask[0]) return k;
  }
  return std::nullopt;
}

std::int64_t v_bar_window(double beta2) {
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ModeError("beta2 must lie in [0, 1)");
  return static_cast<std::int64_t>(std::ceil(1.0 / (1.0 - beta2)));
}

double estimate_v_bar(std::span<const double> g_squared, double beta2) {
  if (g_squared.empty()) return 0.0;
  const auto window = static_cast<std::size_t>(v_bar_window(beta2));
  const auto tail = g_squared.size() > window ? g_squared.last(window) : g_squared;
  return std::accumulate(tail.begin(), tail.end(), 0.0) / static_cast<double>(tail.size());
}

ReplacementTrace::ReplacementTrace(Eigen::Index elements)
    : gaps_(static_cast<std::size_t>(elements)),
      last_event_(static_cast<std::size_t>(elements), -1),
      counts_(static_cast<std::size_t>(elements), 0) {}

void ReplacementTrace::record(std::int64_t step, const Mask &replaced) {
  if (replaced.size() != elements()) {
    throw DimensionError("replacement mask has " + std::to_string(replaced.size()) +
                         " elements, trace expects " + std::to_string(elements()));
  }
  if (step <= last_step_) throw ModeError("trace steps must be strictly increasing");
  last_step_ = step;
  for (Eigen::Index i = 0; i < replaced.size(); ++i) {
    if (!replaced[i]) continue;
    const auto k = static_cast<std::size_t>(i);
    events_.emplace_back(step, i);
    if (last_event_[k] >= 0) gaps_[k].push_back(step - last_event_[k]);
    last_event_[k] = step;
    ++counts_[k];
  }
}

ReplacementTrace ReplacementTrace::restore(Eigen::Index elements,
                                           const std::vector<std::pair<std::int64_t, std::int64_t>> &events,
                                           std::int64_t last_step) {
  ReplacementTrace trace(elements);
  std::size_t i = 0;
  while (i < events.size()) {
    const std::int64_t step = events[i].first;
    Mask mask = Mask::Constant(elements, false);
    for (; i < events.size() && events[i].first == step; ++i) {
      if (events[i].second < 0 || events[i].second >= elements) {
        throw DimensionError("replacement event refers to element " + std::to_string(events[i].second));
      }
      mask[events[i].second] = true;
    }
    trace.record(step, mask);
  }
  if (last_step < trace.last_step_) throw ModeError("trace last step precedes its events");
  trace.last_step_ = last_step;
  return trace;
}

std::vector<std::int64_t> ReplacementTrace::all_gaps() const {
  std::vector<std::int64_t> out;
  for (const auto &g : gaps_) out.insert(out.end(), g.begin(), g.end());
  return out;
}

std::int64_t ReplacementTrace::event_count(Eigen::Index element) const {
  return counts_.at(static_cast<std::size_t>(element));
}

ReplacementTrace empirical_replacement_trace(std::span<const StepReport<double>> reports,
                                             std::int64_t first_step) {
  if (reports.empty()) return {};
  ReplacementTrace trace(reports.front().replaced_mask.size());
  std::int64_t step = first_step;
  for (const auto &r : reports) trace.record(step++, r.replaced_mask);
  return trace;
}

} // namespace damsgrad
