#include "damsgrad/network.hpp"

namespace damsgrad {

std::string_view to_string(Activation a) {
  switch (a) {
  case Activation::Swish: return "swish";
  case Activation::Tanh: return "tanh";
  case Activation::Identity: return "identity";
  }
  return "unknown";
}

std::string_view to_string(OutputMap g) {
  switch (g) {
  case OutputMap::Identity: return "identity";
  case OutputMap::Sigmoid: return "sigmoid";
  }
  return "unknown";
}

Activation parse_activation(std::string_view name) {
  if (name == "swish") return Activation::Swish;
  if (name == "tanh") return Activation::Tanh;
  if (name == "identity") return Activation::Identity;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

OutputMap parse_output_map(std::string_view name) {
  if (name == "identity") return OutputMap::Identity;
  if (name == "sigmoid") return OutputMap::Sigmoid;
  throw ConfigError("unknown output map '" + std::string(name) + "'");
}

LossAndGradient loss_and_gradient(const Mlp &net, const Batch &batch) {
  batch.validate();
  auto [y, cache] = forward(net, batch.inputs);
  const double loss = mse_loss(y, batch.targets);
  return {loss, backward(net, cache, batch.targets)};
}

} // namespace damsgrad
