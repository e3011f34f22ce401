#pragma once

// Step rules for SGD, Adam, AmsGrad and d-AmsGrad over flat parameter
// vectors. All rules are templated on the scalar type of the Eigen vectors
// they receive; the library itself instantiates them with double.
//
// The adaptive rules share one update expression,
//
//   theta <- theta - alpha * (m / (1 - beta1^t)) / (sqrt(s / (1 - beta2^t)) + eps)
//
// where s is v (Adam), max(v_max, v) (AmsGrad) or max(beta3 * v_max, v)
// (d-AmsGrad). Sharing the expression keeps the three rules bitwise equal in
// the regimes where they coincide mathematically.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "damsgrad/errors.hpp"

namespace damsgrad {

template <typename Scalar> using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

struct HyperParams {
  double alpha = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double beta3 = 1.0;
  double epsilon = 1e-8;

  /// Throws ModeError naming the first violated range.
  void validate() const;

  friend bool operator==(const HyperParams &, const HyperParams &) = default;
};

/// The three regimes of the max-momentum decay factor.
enum class Mode { AdamEquivalent, AmsGradEquivalent, DecayedMax };

/// beta3 <= beta2 collapses to Adam (ties included), beta3 == 1 to AmsGrad,
/// anything strictly between is the decayed-max regime.
Mode classify_mode(const HyperParams &hp);

std::string_view to_string(Mode mode);

template <typename Scalar = double> struct OptimizerState {
  Vector<Scalar> m;
  Vector<Scalar> v;
  Vector<Scalar> v_max;
  std::int64_t t = 0;

  static OptimizerState zeros(Eigen::Index n) {
    return {Vector<Scalar>::Zero(n), Vector<Scalar>::Zero(n), Vector<Scalar>::Zero(n), 0};
  }

  Eigen::Index size() const { return m.size(); }

  bool operator==(const OptimizerState &o) const {
    return t == o.t && m.size() == o.m.size() && v.size() == o.v.size() &&
           v_max.size() == o.v_max.size() && (m.array() == o.m.array()).all() &&
           (v.array() == o.v.array()).all() && (v_max.array() == o.v_max.array()).all();
  }
};

/// Per-element instrumentation of one adaptive step.
template <typename Scalar = double> struct StepReport {
  /// True where the max selected the fresh v over the (decayed) previous maximum.
  Mask replaced_mask;
  /// alpha / (sqrt(s / (1 - beta2^t)) + eps) per element.
  Vector<Scalar> effective_lr;
};

namespace detail {

enum class SecondMoment { Plain, Max, DecayedMax };

template <typename DerivedA, typename DerivedB>
void require_same_size(const Eigen::MatrixBase<DerivedA> &a, const Eigen::MatrixBase<DerivedB> &b,
                       const char *what) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(what) + ": length " + std::to_string(a.size()) +
                         " does not match " + std::to_string(b.size()));
  }
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived> &x, const char *what) {
  if (!x.allFinite()) throw NumericError(std::string(what) + " contains a non-finite entry");
}

template <typename Scalar, typename ThetaDerived, typename GradDerived>
StepReport<Scalar> adaptive_step(OptimizerState<Scalar> &state,
                                 Eigen::MatrixBase<ThetaDerived> &theta,
                                 const Eigen::MatrixBase<GradDerived> &g, const HyperParams &hp,
                                 SecondMoment rule) {
  static_assert(std::is_same_v<typename ThetaDerived::Scalar, Scalar>);
  require_same_size(theta, g, "gradient");
  require_same_size(theta, state.m, "first momentum");
  require_same_size(theta, state.v, "second momentum");
  require_same_size(theta, state.v_max, "max second momentum");
  require_finite(g, "gradient");
  require_finite(theta, "parameters");

  const Scalar alpha(hp.alpha), beta1(hp.beta1), beta2(hp.beta2), beta3(hp.beta3);
  const Scalar eps(hp.epsilon);
  const std::int64_t t = state.t + 1;

  Vector<Scalar> m = beta1 * state.m + (Scalar(1) - beta1) * g;
  Vector<Scalar> v = beta2 * state.v + (Scalar(1) - beta2) * g.cwiseAbs2();

  StepReport<Scalar> report;
  Vector<Scalar> v_max;
  switch (rule) {
  case SecondMoment::Plain:
    v_max = v;
    report.replaced_mask = Mask::Constant(v.size(), true);
    break;
  case SecondMoment::Max:
    report.replaced_mask = v.array() >= state.v_max.array();
    v_max = state.v_max.cwiseMax(v);
    break;
  case SecondMoment::DecayedMax: {
    Vector<Scalar> decayed = beta3 * state.v_max;
    report.replaced_mask = v.array() >= decayed.array();
    v_max = decayed.cwiseMax(v);
    break;
  }
  }

  using std::pow;
  using std::sqrt;
  const Scalar bias1 = Scalar(1) - pow(beta1, Scalar(t));
  const Scalar bias2 = Scalar(1) - pow(beta2, Scalar(t));
  report.effective_lr = (alpha / ((v_max.array() / bias2).sqrt() + eps)).matrix();
  Vector<Scalar> next =
      theta - (alpha * (m.array() / bias1) / ((v_max.array() / bias2).sqrt() + eps)).matrix();
  require_finite(next, "updated parameters");

  theta = next;
  state.m = std::move(m);
  state.v = std::move(v);
  state.v_max = std::move(v_max);
  state.t = t;
  return report;
}

} // namespace detail

/// theta <- theta - alpha * g.
template <typename ThetaDerived, typename GradDerived>
void sgd_step(Eigen::MatrixBase<ThetaDerived> &theta, const Eigen::MatrixBase<GradDerived> &g,
              typename ThetaDerived::Scalar alpha) {
  detail::require_same_size(theta, g, "gradient");
  detail::require_finite(g, "gradient");
  if (!(alpha >= 0)) throw ModeError("sgd learning rate must be non-negative");
  Vector<typename ThetaDerived::Scalar> next = theta - alpha * g;
  detail::require_finite(next, "updated parameters");
  theta = next;
}

/// Adam. The counter is incremented before use, so the first call bias-corrects
/// with t = 1. v_max mirrors v so the state layout is shared by all rules.
template <typename Scalar, typename ThetaDerived, typename GradDerived>
void adam_step(OptimizerState<Scalar> &state, Eigen::MatrixBase<ThetaDerived> &theta,
               const Eigen::MatrixBase<GradDerived> &g, const HyperParams &hp) {
  detail::adaptive_step(state, theta, g, hp, detail::SecondMoment::Plain);
}

/// AmsGrad: v_max <- max(v_max, v), bias-corrected inside the square root.
template <typename Scalar, typename ThetaDerived, typename GradDerived>
void amsgrad_step(OptimizerState<Scalar> &state, Eigen::MatrixBase<ThetaDerived> &theta,
                  const Eigen::MatrixBase<GradDerived> &g, const HyperParams &hp) {
  detail::adaptive_step(state, theta, g, hp, detail::SecondMoment::Max);
}

/// d-AmsGrad: v_max <- max(beta3 * v_max, v). Ties count as replacements.
template <typename Scalar, typename ThetaDerived, typename GradDerived>
StepReport<Scalar> d_amsgrad_step(OptimizerState<Scalar> &state,
                                  Eigen::MatrixBase<ThetaDerived> &theta,
                                  const Eigen::MatrixBase<GradDerived> &g, const HyperParams &hp) {
  if (!(hp.beta3 >= 0.0 && hp.beta3 <= 1.0)) throw ModeError("beta3 must lie in [0, 1]");
  return detail::adaptive_step(state, theta, g, hp, detail::SecondMoment::DecayedMax);
}

enum class OptimizerKind { Sgd, Adam, AmsGrad, DAmsGrad };

/// Accepts "sgd", "adam", "amsgrad", "d-amsgrad".
std::optional<OptimizerKind> parse_optimizer_kind(std::string_view name);
std::string_view to_string(OptimizerKind kind);

/// The regime a kind runs in: Adam and AmsGrad are fixed, d-AmsGrad follows
/// classify_mode. Empty for SGD.
std::optional<Mode> mode_of(OptimizerKind kind, const HyperParams &hp);

/// Runtime-dispatched optimizer over double vectors, used by the benchmarks.
class Optimizer {
public:
  Optimizer(OptimizerKind kind, const HyperParams &hp, Eigen::Index n);

  /// One update in place. SGD yields no report; Adam reports every element
  /// as replaced; AmsGrad reports against the undecayed maximum.
  std::optional<StepReport<double>> step(Eigen::Ref<Eigen::VectorXd> theta,
                                         const Eigen::Ref<const Eigen::VectorXd> &g);

  OptimizerKind kind() const { return kind_; }
  const HyperParams &hyper_params() const { return hp_; }
  const OptimizerState<double> &state() const { return state_; }
  void set_state(OptimizerState<double> state);

private:
  OptimizerKind kind_;
  HyperParams hp_;
  OptimizerState<double> state_;
};

} // namespace damsgrad
