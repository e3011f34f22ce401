#pragma once

// Fully-connected network with analytic backpropagation.
//
// Layout conventions:
//  - a batch is a matrix with one example per row;
//  - layer k holds weights W_k of shape (out x in) and bias b_k of length out,
//    so a layer maps rows h to f(h W_k^T + b_k^T);
//  - hidden layers share one activation; the output layer applies OutputMap;
//  - flattening walks layers in order, weights row-major, then the bias.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "damsgrad/errors.hpp"
#include "damsgrad/optimizer.hpp"
#include "damsgrad/random.hpp"

namespace damsgrad {

enum class Activation { Swish, Tanh, Identity };
enum class OutputMap { Identity, Sigmoid };

std::string_view to_string(Activation a);
std::string_view to_string(OutputMap g);
Activation parse_activation(std::string_view name);
OutputMap parse_output_map(std::string_view name);

template <typename Scalar> Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

/// x * sigmoid(x).
template <typename Scalar> Scalar swish(Scalar x) { return x * sigmoid(x); }

template <typename Scalar> Scalar swish_derivative(Scalar x) {
  const Scalar s = sigmoid(x);
  return s + x * s * (Scalar(1) - s);
}

template <typename Scalar> Scalar activate(Activation a, Scalar x) {
  using std::tanh;
  switch (a) {
  case Activation::Swish: return swish(x);
  case Activation::Tanh: return tanh(x);
  case Activation::Identity: return x;
  }
  return x;
}

template <typename Scalar> Scalar activate_derivative(Activation a, Scalar x) {
  using std::tanh;
  switch (a) {
  case Activation::Swish: return swish_derivative(x);
  case Activation::Tanh: {
    const Scalar th = tanh(x);
    return Scalar(1) - th * th;
  }
  case Activation::Identity: return Scalar(1);
  }
  return Scalar(1);
}

template <typename Scalar = double> class MlpT {
public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Vector<Scalar>;

  struct Layer {
    Matrix weights; // out x in
    Vec bias;       // out
  };

  MlpT() = default;

  /// sizes = {input, hidden..., output}; parameters start at zero.
  MlpT(const std::vector<Eigen::Index> &sizes, Activation activation, OutputMap output_map)
      : activation_(activation), output_map_(output_map) {
    if (sizes.size() < 2) throw DimensionError("an mlp needs at least input and output sizes");
    for (auto s : sizes) {
      if (s < 1) throw DimensionError("layer sizes must be positive");
    }
    for (std::size_t k = 1; k < sizes.size(); ++k) {
      layers_.push_back({Matrix::Zero(sizes[k], sizes[k - 1]), Vec::Zero(sizes[k])});
    }
  }

  MlpT(std::vector<Layer> layers, Activation activation, OutputMap output_map)
      : layers_(std::move(layers)), activation_(activation), output_map_(output_map) {
    check_shapes();
  }

  /// Uniform in [-r, r] with r = sqrt(6 / (fan_in + fan_out)); biases zero.
  void init_uniform(std::uint64_t seed) {
    Rng rng(seed);
    for (auto &layer : layers_) {
      const double r = std::sqrt(6.0 / static_cast<double>(layer.weights.rows() + layer.weights.cols()));
      for (Eigen::Index i = 0; i < layer.weights.rows(); ++i)
        for (Eigen::Index j = 0; j < layer.weights.cols(); ++j)
          layer.weights(i, j) = Scalar(rng.uniform(-r, r));
      layer.bias.setZero();
    }
  }

  Eigen::Index input_dim() const { return layers_.empty() ? 0 : layers_.front().weights.cols(); }
  Eigen::Index output_dim() const { return layers_.empty() ? 0 : layers_.back().weights.rows(); }
  std::size_t layer_count() const { return layers_.size(); }
  Activation activation() const { return activation_; }
  OutputMap output_map() const { return output_map_; }
  const std::vector<Layer> &layers() const { return layers_; }
  Layer &layer(std::size_t k) { return layers_.at(k); }

  /// {input, hidden..., output}
  std::vector<Eigen::Index> sizes() const {
    std::vector<Eigen::Index> out;
    if (layers_.empty()) return out;
    out.push_back(input_dim());
    for (const auto &l : layers_) out.push_back(l.weights.rows());
    return out;
  }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto &l : layers_) n += l.weights.size() + l.bias.size();
    return n;
  }

  Vec flatten() const {
    Vec theta(parameter_count());
    Eigen::Index k = 0;
    for (const auto &l : layers_) {
      for (Eigen::Index i = 0; i < l.weights.rows(); ++i)
        for (Eigen::Index j = 0; j < l.weights.cols(); ++j) theta[k++] = l.weights(i, j);
      theta.segment(k, l.bias.size()) = l.bias;
      k += l.bias.size();
    }
    return theta;
  }

  void unflatten(const Eigen::Ref<const Vec> &theta) {
    if (theta.size() != parameter_count()) {
      throw DimensionError("flat parameter vector has " + std::to_string(theta.size()) +
                           " entries, network expects " + std::to_string(parameter_count()));
    }
    Eigen::Index k = 0;
    for (auto &l : layers_) {
      for (Eigen::Index i = 0; i < l.weights.rows(); ++i)
        for (Eigen::Index j = 0; j < l.weights.cols(); ++j) l.weights(i, j) = theta[k++];
      l.bias = theta.segment(k, l.bias.size());
      k += l.bias.size();
    }
  }

  template <typename Other> MlpT<Other> cast() const {
    std::vector<typename MlpT<Other>::Layer> out;
    for (const auto &l : layers_) {
      out.push_back({l.weights.template cast<Other>(), l.bias.template cast<Other>()});
    }
    return MlpT<Other>(std::move(out), activation_, output_map_);
  }

private:
  void check_shapes() const {
    if (layers_.empty()) throw DimensionError("an mlp needs at least one layer");
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto &l = layers_[k];
      if (l.bias.size() != l.weights.rows()) {
        throw DimensionError("layer " + std::to_string(k) + ": bias length differs from weight rows");
      }
      if (k > 0 && l.weights.cols() != layers_[k - 1].weights.rows()) {
        throw DimensionError("layer " + std::to_string(k) + ": input width differs from previous output");
      }
    }
  }

  std::vector<Layer> layers_;
  Activation activation_ = Activation::Swish;
  OutputMap output_map_ = OutputMap::Identity;
};

using Mlp = MlpT<double>;

template <typename Scalar = double> struct BatchT {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> inputs;  // examples x input dim
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> targets; // examples x output dim

  void validate() const {
    if (inputs.rows() != targets.rows()) throw DimensionError("batch inputs and targets differ in rows");
    if (!inputs.allFinite() || !targets.allFinite()) throw NumericError("batch contains a non-finite entry");
  }
};

using Batch = BatchT<double>;

/// Everything backward needs from a forward pass.
template <typename Scalar = double> struct ForwardCache {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  std::vector<Matrix> inputs;          // input to layer k (inputs[0] is x)
  std::vector<Matrix> pre_activations; // h W^T + b for layer k
  Matrix output;                       // y
};

template <typename Scalar> struct ForwardResult {
  typename MlpT<Scalar>::Matrix y;
  ForwardCache<Scalar> cache;
};

template <typename Scalar>
ForwardResult<Scalar> forward(const MlpT<Scalar> &net,
                              const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> &x) {
  using Matrix = typename MlpT<Scalar>::Matrix;
  if (x.cols() != net.input_dim()) {
    throw DimensionError("input has " + std::to_string(x.cols()) + " columns, network expects " +
                         std::to_string(net.input_dim()));
  }
  ForwardCache<Scalar> cache;
  Matrix h = x;
  const auto &layers = net.layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    Matrix z = h * layers[k].weights.transpose();
    z.rowwise() += layers[k].bias.transpose();
    cache.inputs.push_back(std::move(h));
    const bool last = k + 1 == layers.size();
    if (!last) {
      h = z.unaryExpr([a = net.activation()](Scalar s) { return activate(a, s); });
    } else if (net.output_map() == OutputMap::Sigmoid) {
      h = z.unaryExpr([](Scalar s) { return sigmoid(s); });
    } else {
      h = z;
    }
    cache.pre_activations.push_back(std::move(z));
  }
  cache.output = h;
  return {std::move(h), std::move(cache)};
}

/// Mean over examples of ||d - y||^2 / 2.
template <typename DerivedY, typename DerivedD>
typename DerivedY::Scalar mse_loss(const Eigen::MatrixBase<DerivedY> &y,
                                   const Eigen::MatrixBase<DerivedD> &d) {
  if (y.rows() != d.rows() || y.cols() != d.cols()) throw DimensionError("loss: output and target shapes differ");
  using Scalar = typename DerivedY::Scalar;
  if (y.rows() == 0) return Scalar(0);
  return (d - y).squaredNorm() / (Scalar(2) * Scalar(y.rows()));
}

/// Gradient of mse_loss(forward(net, x).y, d) with respect to the flattened parameters.
template <typename Scalar>
Vector<Scalar> backward(const MlpT<Scalar> &net, const ForwardCache<Scalar> &cache,
                        const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> &d) {
  using Matrix = typename MlpT<Scalar>::Matrix;
  const auto &layers = net.layers();
  if (cache.inputs.size() != layers.size() || cache.pre_activations.size() != layers.size()) {
    throw DimensionError("forward cache was produced by a network with a different depth");
  }
  const Eigen::Index n = cache.output.rows();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (cache.inputs[k].cols() != layers[k].weights.cols() ||
        cache.pre_activations[k].cols() != layers[k].weights.rows() ||
        cache.inputs[k].rows() != n || cache.pre_activations[k].rows() != n) {
      throw DimensionError("forward cache does not match layer " + std::to_string(k));
    }
  }
  if (d.rows() != n || d.cols() != cache.output.cols()) throw DimensionError("targets do not match the cached output");

  Vector<Scalar> grad(net.parameter_count());
  if (n == 0) {
    grad.setZero();
    return grad;
  }

  // dL/dy
  Matrix delta = (cache.output - d) / Scalar(n);
  if (net.output_map() == OutputMap::Sigmoid) {
    delta.array() *= cache.output.array() * (Scalar(1) - cache.output.array());
  }

  Eigen::Index end = grad.size();
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto &l = layers[k];
    const Matrix dw = delta.transpose() * cache.inputs[k];
    const Vector<Scalar> db = delta.colwise().sum().transpose();
    end -= l.bias.size();
    grad.segment(end, l.bias.size()) = db;
    end -= l.weights.size();
    for (Eigen::Index i = 0; i < dw.rows(); ++i)
      for (Eigen::Index j = 0; j < dw.cols(); ++j) grad[end + i * dw.cols() + j] = dw(i, j);
    if (k == 0) break;
    Matrix upstream = delta * l.weights;
    const auto &z = cache.pre_activations[k - 1];
    delta = upstream.cwiseProduct(
        z.unaryExpr([a = net.activation()](Scalar s) { return activate_derivative(a, s); }));
  }
  return grad;
}

struct LossAndGradient {
  double loss;
  Eigen::VectorXd gradient;
};

LossAndGradient loss_and_gradient(const Mlp &net, const Batch &batch);

} // namespace damsgrad
