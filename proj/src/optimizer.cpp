#include "damsgrad/optimizer.hpp"

#include <cmath>

namespace damsgrad {

void HyperParams::validate() const {
  auto finite = [](double x) { return std::isfinite(x); };
  if (!finite(alpha) || !(alpha > 0.0)) throw ModeError("alpha must be a positive finite number");
  if (!finite(epsilon) || !(epsilon > 0.0)) throw ModeError("epsilon must be a positive finite number");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ModeError("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ModeError("beta2 must lie in [0, 1)");
  if (!(beta3 >= 0.0 && beta3 <= 1.0)) throw ModeError("beta3 must lie in [0, 1]");
}

Mode classify_mode(const HyperParams &hp) {
  if (hp.beta3 <= hp.beta2) return Mode::AdamEquivalent;
  if (hp.beta3 == 1.0) return Mode::AmsGradEquivalent;
  return Mode::DecayedMax;
}

std::string_view to_string(Mode mode) {
  switch (mode) {
  case Mode::AdamEquivalent: return "adam-equivalent";
  case Mode::AmsGradEquivalent: return "amsgrad-equivalent";
  case Mode::DecayedMax: return "decayed-max";
  }
  return "unknown";
}

std::optional<OptimizerKind> parse_optimizer_kind(std::string_view name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "amsgrad") return OptimizerKind::AmsGrad;
  if (name == "d-amsgrad") return OptimizerKind::DAmsGrad;
  return std::nullopt;
}

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
  case OptimizerKind::Sgd: return "sgd";
  case OptimizerKind::Adam: return "adam";
  case OptimizerKind::AmsGrad: return "amsgrad";
  case OptimizerKind::DAmsGrad: return "d-amsgrad";
  }
  return "unknown";
}

std::optional<Mode> mode_of(OptimizerKind kind, const HyperParams &hp) {
  switch (kind) {
  case OptimizerKind::Sgd: return std::nullopt;
  case OptimizerKind::Adam: return Mode::AdamEquivalent;
  case OptimizerKind::AmsGrad: return Mode::AmsGradEquivalent;
  case OptimizerKind::DAmsGrad: return classify_mode(hp);
  }
  return std::nullopt;
}

Optimizer::Optimizer(OptimizerKind kind, const HyperParams &hp, Eigen::Index n)
    : kind_(kind), hp_(hp), state_(OptimizerState<double>::zeros(n)) {}

std::optional<StepReport<double>> Optimizer::step(Eigen::Ref<Eigen::VectorXd> theta,
                                                  const Eigen::Ref<const Eigen::VectorXd> &g) {
  switch (kind_) {
  case OptimizerKind::Sgd:
    sgd_step(theta, g, hp_.alpha);
    return std::nullopt;
  case OptimizerKind::Adam:
    return detail::adaptive_step(state_, theta, g, hp_, detail::SecondMoment::Plain);
  case OptimizerKind::AmsGrad:
    return detail::adaptive_step(state_, theta, g, hp_, detail::SecondMoment::Max);
  case OptimizerKind::DAmsGrad:
    return d_amsgrad_step(state_, theta, g, hp_);
  }
  return std::nullopt;
}

void Optimizer::set_state(OptimizerState<double> state) {
  if (state.m.size() != state_.m.size() || state.v.size() != state_.v.size() ||
      state.v_max.size() != state_.v_max.size()) {
    throw DimensionError("optimizer state length does not match the parameter count");
  }
  if (state.t < 0) throw ModeError("step counter must be non-negative");
  state_ = std::move(state);
}

} // namespace damsgrad
