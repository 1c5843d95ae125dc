/*
 * Copyright 2026 The covshift Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef COVSHIFT_RATIO_NET_HPP
#define COVSHIFT_RATIO_NET_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "covshift/numeric.hpp"
#include "covshift/rng.hpp"

namespace covshift::net {

/// Raised when an optimizer step would consume a NaN or infinite gradient.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fully connected network f with softplus hidden units, followed by
/// r(z) = max(softplus(f(z)), floor).
///
/// Parameters live in one flat vector, layer by layer: the weight matrix of
/// layer l (out x in, column-major) followed by its bias. Batches are d x n
/// matrices, one column per point.
struct RatioModel {
  std::vector<int> layer_sizes;
  Eigen::VectorXd params;
  double floor = 1e-3;

  int input_dim() const { return layer_sizes.front(); }
  std::size_t num_layers() const { return layer_sizes.size() - 1; }

  std::size_t weight_offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < l; ++i)
      off += static_cast<std::size_t>(layer_sizes[i + 1]) * (layer_sizes[i] + 1);
    return off;
  }
  std::size_t bias_offset(std::size_t l) const {
    return weight_offset(l) + static_cast<std::size_t>(layer_sizes[l + 1]) * layer_sizes[l];
  }

  Eigen::Map<const Eigen::MatrixXd> weight(std::size_t l) const {
    return {params.data() + weight_offset(l), layer_sizes[l + 1], layer_sizes[l]};
  }
  Eigen::Map<Eigen::MatrixXd> weight(std::size_t l) {
    return {params.data() + weight_offset(l), layer_sizes[l + 1], layer_sizes[l]};
  }
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t l) const {
    return {params.data() + bias_offset(l), layer_sizes[l + 1]};
  }
  Eigen::Map<Eigen::VectorXd> bias(std::size_t l) {
    return {params.data() + bias_offset(l), layer_sizes[l + 1]};
  }
};

inline std::size_t parameter_count(std::span<const int> layer_sizes) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < layer_sizes.size(); ++i)
    n += static_cast<std::size_t>(layer_sizes[i + 1]) * (layer_sizes[i] + 1);
  return n;
}

inline void validate_layout(std::span<const int> layer_sizes, double floor) {
  require(layer_sizes.size() >= 2, "RatioModel: need at least input and output sizes");
  for (int s : layer_sizes) require(s >= 1, "RatioModel: layer sizes must be positive");
  require(layer_sizes.back() == 1, "RatioModel: output layer must have width 1");
  require(floor > 0.0 && std::isfinite(floor), "RatioModel: floor must be positive");
}

/// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
/// weights and biases alike.
inline RatioModel init_model(std::vector<int> layer_sizes, double floor, std::uint64_t seed) {
  validate_layout(layer_sizes, floor);
  RatioModel m;
  m.layer_sizes = std::move(layer_sizes);
  m.floor = floor;
  m.params.resize(static_cast<Eigen::Index>(parameter_count(m.layer_sizes)));
  Rng rng(seed);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.layer_sizes[l]));
    auto w = m.weight(l);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-bound, bound);
    auto b = m.bias(l);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(-bound, bound);
  }
  return m;
}

template <typename Scalar = double>
using Batch = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar = double>
inline Batch<Scalar> as_batch(std::span<const double> zs) {
  return Eigen::Map<const Eigen::RowVectorXd>(zs.data(), static_cast<Eigen::Index>(zs.size())).cast<Scalar>();
}

/// Cached activations of one forward pass, reused by backward(). The
/// arithmetic type is a template parameter: double for checks and
/// evaluation, float for the training fast path. Buffers are reused when a
/// pass object is fed to forward_into() again with the same batch size.
template <typename Scalar = double>
struct ForwardPass {
  std::vector<Batch<Scalar>> inputs;  // input to each layer
  std::vector<Batch<Scalar>> slopes;  // softplus'(pre-activation) per layer
  std::vector<double> ratio;          // floored output
  std::vector<bool> floored;          // output on the clamped branch
};

/// Scratch space for backward_into().
template <typename Scalar = double>
struct BackwardScratch {
  Batch<Scalar> delta;
  Batch<Scalar> next;
};

/// Columns processed together. A block of every layer's activations stays
/// in cache between the matrix product and the elementwise work.
inline constexpr Eigen::Index kColumnBlock = 512;

namespace detail {

// sigmoid(x) = (1 + tanh(x / 2)) / 2 and
// softplus(x) = max(x, 0) - log(max(sigmoid(x), 1 - sigmoid(x))).
// Both come from one tanh and one log, without per-element branches, so
// Eigen vectorizes them.
template <typename Pre, typename Slope>
inline void softplus_inplace(Pre&& pre, Slope&& slope) {
  using Scalar = typename std::decay_t<Pre>::Scalar;
  const Scalar half(0.5);
  slope.array() = half + half * (half * pre.array()).tanh();
  pre.array() = pre.array().max(Scalar(0)) - slope.array().max(Scalar(1) - slope.array()).log();
}

}  // namespace detail

inline double softplus(double x) noexcept { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

template <typename Scalar>
inline void forward_into(const RatioModel& model, const Batch<Scalar>& batch, ForwardPass<Scalar>& pass) {
  require(batch.rows() == model.input_dim(), "forward: batch dimension does not match the model input");
  const std::size_t L = model.num_layers();
  const Eigen::Index n = batch.cols();
  pass.inputs.resize(L + 1);
  pass.slopes.resize(L);
  pass.inputs[0] = batch;
  std::vector<Batch<Scalar>> w(L);
  std::vector<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> b(L);
  for (std::size_t l = 0; l < L; ++l) {
    w[l] = model.weight(l).template cast<Scalar>();
    b[l] = model.bias(l).template cast<Scalar>();
    pass.inputs[l + 1].resize(w[l].rows(), n);
    pass.slopes[l].resize(w[l].rows(), n);
  }
  for (Eigen::Index c0 = 0; c0 < n; c0 += kColumnBlock) {
    const Eigen::Index c = std::min(kColumnBlock, n - c0);
    for (std::size_t l = 0; l < L; ++l) {
      auto pre = pass.inputs[l + 1].middleCols(c0, c);
      pre.noalias() = w[l] * pass.inputs[l].middleCols(c0, c);
      pre.colwise() += b[l];
      detail::softplus_inplace(pre, pass.slopes[l].middleCols(c0, c));
    }
  }
  // The last entry holds softplus(f) as a 1 x n matrix.
  const Batch<Scalar>& out = pass.inputs[L];
  pass.ratio.resize(static_cast<std::size_t>(n));
  pass.floored.assign(static_cast<std::size_t>(n), false);
  for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
    const double s = static_cast<double>(out(0, static_cast<Eigen::Index>(i)));
    if (s < model.floor) {
      pass.ratio[i] = model.floor;
      pass.floored[i] = true;
    } else {
      pass.ratio[i] = s;
    }
  }
}

template <typename Scalar>
inline ForwardPass<Scalar> forward(const RatioModel& model, const Batch<Scalar>& batch) {
  ForwardPass<Scalar> pass;
  forward_into(model, batch, pass);
  return pass;
}

/// r(z) for every column of the batch.
inline std::vector<double> evaluate(const RatioModel& model, const Batch<double>& batch) {
  return forward<double>(model, batch).ratio;
}

inline std::vector<double> evaluate(const RatioModel& model, std::span<const double> zs) {
  return evaluate(model, as_batch<double>(zs));
}

inline double evaluate(const RatioModel& model, double z) {
  const double v[1] = {z};
  return evaluate(model, std::span<const double>(v, 1)).front();
}

/// Gradient of sum_i upstream_i * r(z_i) with respect to the flat parameter
/// vector, written into `grad`. Points on the floored branch contribute
/// nothing.
template <typename Scalar>
inline void backward_into(const RatioModel& model, const ForwardPass<Scalar>& pass,
                          std::span<const double> upstream, BackwardScratch<Scalar>& scratch,
                          Eigen::VectorXd& grad) {
  const std::size_t n = pass.ratio.size();
  require(upstream.size() == n, "gradient: upstream length does not match the batch");
  grad.resize(model.params.size());
  const std::size_t L = model.num_layers();

  int width = 1;
  for (int d : model.layer_sizes) width = std::max(width, d);
  scratch.delta.resize(width, kColumnBlock);
  scratch.next.resize(width, kColumnBlock);
  std::vector<Batch<Scalar>> wt(L), gw(L);
  std::vector<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> gb(L);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(grad.size());
  for (std::size_t l = 0; l < L; ++l) {
    wt[l] = model.weight(l).transpose().template cast<Scalar>();
    gw[l].resize(model.layer_sizes[l + 1], model.layer_sizes[l]);
    gb[l].resize(model.layer_sizes[l + 1]);
  }

  // Per-block sums are formed in Scalar and accumulated in double.
  for (Eigen::Index c0 = 0; c0 < static_cast<Eigen::Index>(n); c0 += kColumnBlock) {
    const Eigen::Index c = std::min(kColumnBlock, static_cast<Eigen::Index>(n) - c0);
    Batch<Scalar>* cur = &scratch.delta;
    Batch<Scalar>* nxt = &scratch.next;
    for (Eigen::Index j = 0; j < c; ++j) {
      const auto i = static_cast<std::size_t>(c0 + j);
      (*cur)(0, j) = pass.floored[i] ? Scalar(0) : static_cast<Scalar>(upstream[i]);
    }
    for (std::size_t l = L; l-- > 0;) {
      const int out = model.layer_sizes[l + 1];
      const int in = model.layer_sizes[l];
      auto delta = cur->topLeftCorner(out, c);
      delta.array() *= pass.slopes[l].middleCols(c0, c).array();
      gw[l].noalias() = delta * pass.inputs[l].middleCols(c0, c).transpose();
      gb[l].noalias() = delta.rowwise().sum();
      Eigen::Map<Eigen::MatrixXd>(acc.data() + model.weight_offset(l), out, in) += gw[l].template cast<double>();
      Eigen::Map<Eigen::VectorXd>(acc.data() + model.bias_offset(l), out) += gb[l].template cast<double>();
      if (l > 0) {
        nxt->topLeftCorner(in, c).noalias() = wt[l] * delta;
        std::swap(cur, nxt);
      }
    }
  }
  grad = acc;
}

template <typename Scalar>
inline Eigen::VectorXd backward(const RatioModel& model, const ForwardPass<Scalar>& pass,
                                std::span<const double> upstream) {
  BackwardScratch<Scalar> scratch;
  Eigen::VectorXd grad;
  backward_into(model, pass, upstream, scratch, grad);
  return grad;
}

inline Eigen::VectorXd gradient(const RatioModel& model, const Batch<double>& batch,
                                std::span<const double> upstream) {
  return backward(model, forward<double>(model, batch), upstream);
}

inline Eigen::VectorXd gradient(const RatioModel& model, std::span<const double> zs,
                                std::span<const double> upstream) {
  return gradient(model, as_batch<double>(zs), upstream);
}

struct AdamState {
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;
  long step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;
};

inline AdamState make_adam(const RatioModel& model, double lr = 1e-3) {
  AdamState s;
  s.first_moment = Eigen::VectorXd::Zero(model.params.size());
  s.second_moment = Eigen::VectorXd::Zero(model.params.size());
  s.lr = lr;
  return s;
}

/// One bias-corrected Adam update, applied in place.
inline void adam_step(RatioModel& model, AdamState& state, const Eigen::VectorXd& grad) {
  require(grad.size() == model.params.size() && state.first_moment.size() == grad.size(),
          "adam_step: gradient shape does not match the parameters");
  if (!grad.allFinite()) {
    Eigen::Index bad = 0;
    for (; bad < grad.size() && std::isfinite(grad(bad)); ++bad) {
    }
    std::ostringstream msg;
    msg << "adam_step: non-finite gradient at coordinate " << bad << " (step " << state.step_count << ")";
    throw NonFiniteError(msg.str());
  }
  ++state.step_count;
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad;
  state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  model.params.array() -= state.lr * (state.first_moment.array() / c1) /
                          ((state.second_moment.array() / c2).sqrt() + state.eps_hat);
}

// Checkpoints. Doubles are written in shortest round-trip form, so a
// save/load cycle reproduces the parameters bit for bit.

inline nlohmann::json to_json(const RatioModel& model) {
  nlohmann::json j;
  j["format"] = "covshift.ratio_model";
  j["version"] = 1;
  j["activation"] = "softplus";
  j["layer_sizes"] = model.layer_sizes;
  j["floor"] = model.floor;
  j["params"] = std::vector<double>(model.params.data(), model.params.data() + model.params.size());
  return j;
}

inline RatioModel model_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "covshift.ratio_model" || j.value("version", 0) != 1)
    throw std::runtime_error("checkpoint: unsupported format or version");
  if (j.value("activation", "") != "softplus") throw std::runtime_error("checkpoint: unsupported activation");
  RatioModel m;
  m.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
  m.floor = j.at("floor").get<double>();
  validate_layout(m.layer_sizes, m.floor);
  const auto p = j.at("params").get<std::vector<double>>();
  if (p.size() != parameter_count(m.layer_sizes))
    throw std::runtime_error("checkpoint: parameter count does not match layer sizes");
  m.params = Eigen::Map<const Eigen::VectorXd>(p.data(), static_cast<Eigen::Index>(p.size()));
  return m;
}

inline void save_checkpoint(const RatioModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path);
  out << to_json(model).dump() << '\n';
}

inline RatioModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  return model_from_json(nlohmann::json::parse(in));
}

}  // namespace covshift::net

#endif  // COVSHIFT_RATIO_NET_HPP
