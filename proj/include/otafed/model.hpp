#pragma once

// Small fully-connected classifier: forward pass, softmax cross-entropy,
// exact backpropagation and the Gauss-Newton-Bartlett diagonal curvature
// estimate.
//
// Parameter layout is fixed: for each layer in order, the out x in weight
// matrix (row-major), then the out biases. Other modules chunk ParamVector
// by index and rely on this layout being stable.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "otafed/rng.hpp"

namespace otafed {

using ParamVector = std::vector<double>;

enum class Activation { tanh, relu };

struct MlpArch {
  std::vector<std::size_t> layer_sizes;
  Activation activation = Activation::tanh;

  void validate() const {
    if (layer_sizes.size() < 2) throw std::invalid_argument("MlpArch: need at least input and output layers");
    for (std::size_t s : layer_sizes)
      if (s == 0) throw std::invalid_argument("MlpArch: layer sizes must be >= 1");
  }
  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t class_count() const { return layer_sizes.back(); }
  std::size_t layer_count() const { return layer_sizes.size() - 1; }

  std::size_t param_count() const {
    std::size_t d = 0;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) d += layer_sizes[l] * layer_sizes[l + 1] + layer_sizes[l + 1];
    return d;
  }

  /// Offset of layer l's weight block; its biases follow at offset + in*out.
  std::size_t layer_offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t j = 0; j < l; ++j) off += layer_sizes[j] * layer_sizes[j + 1] + layer_sizes[j + 1];
    return off;
  }

  friend bool operator==(const MlpArch&, const MlpArch&) = default;
};

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw std::invalid_argument("Matrix: value count does not match shape");
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

using Logits = Matrix;

struct Batch {
  Matrix inputs;
  std::vector<std::size_t> labels;
};

namespace detail {

inline void check_params(std::span<const double> params, const MlpArch& arch) {
  arch.validate();
  if (params.size() != arch.param_count())
    throw std::invalid_argument("parameter vector length " + std::to_string(params.size()) +
                                " does not match architecture (" + std::to_string(arch.param_count()) + ")");
}

inline void check_inputs(const Matrix& inputs, const MlpArch& arch) {
  if (inputs.cols != arch.input_dim())
    throw std::invalid_argument("input width " + std::to_string(inputs.cols) + " does not match architecture input " +
                                std::to_string(arch.input_dim()));
}

inline double activate(Activation a, double z) { return a == Activation::tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0); }

// Derivative expressed through the activation output.
inline double activate_grad(Activation a, double out) {
  return a == Activation::tanh ? 1.0 - out * out : (out > 0.0 ? 1.0 : 0.0);
}

// out = in * W^T + b for one layer.
inline Matrix dense(std::span<const double> params, std::size_t offset, std::size_t in, std::size_t out,
                    const Matrix& x) {
  Matrix z(x.rows, out);
  const double* w = params.data() + offset;
  const double* b = w + in * out;
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double* xr = x.data.data() + r * in;
    double* zr = z.data.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wo = w + o * in;
      double acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xr[i];
      zr[o] = acc;
    }
  }
  return z;
}

// Activations of every layer; front() is the input, back() the logits.
inline std::vector<Matrix> forward_all(std::span<const double> params, const MlpArch& arch, const Matrix& inputs) {
  std::vector<Matrix> acts;
  acts.reserve(arch.layer_sizes.size());
  acts.push_back(inputs);
  for (std::size_t l = 0; l < arch.layer_count(); ++l) {
    Matrix z = dense(params, arch.layer_offset(l), arch.layer_sizes[l], arch.layer_sizes[l + 1], acts.back());
    if (l + 1 < arch.layer_count())
      for (double& v : z.data) v = activate(arch.activation, v);
    acts.push_back(std::move(z));
  }
  return acts;
}

inline void softmax_row(std::span<const double> logits, std::span<double> probs) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    probs[c] = std::exp(logits[c] - mx);
    sum += probs[c];
  }
  for (double& p : probs) p /= sum;
}

inline void check_labels(std::span<const std::size_t> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows)
    throw std::invalid_argument("label count " + std::to_string(labels.size()) + " does not match batch rows " +
                                std::to_string(rows));
  for (std::size_t y : labels)
    if (y >= classes)
      throw std::out_of_range("label " + std::to_string(y) + " out of range for " + std::to_string(classes) +
                              " classes");
}

}  // namespace detail

/// Weights ~ N(0, 1/fan_in), biases zero.
inline ParamVector init_params(const MlpArch& arch, std::uint64_t seed) {
  arch.validate();
  ParamVector p(arch.param_count(), 0.0);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t l = 0; l < arch.layer_count(); ++l) {
    const std::size_t in = arch.layer_sizes[l];
    const std::size_t out = arch.layer_sizes[l + 1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    const std::size_t off = arch.layer_offset(l);
    for (std::size_t k = 0; k < in * out; ++k) p[off + k] = scale * normal(rng);
  }
  return p;
}

inline Logits forward(std::span<const double> params, const MlpArch& arch, const Matrix& inputs) {
  detail::check_params(params, arch);
  detail::check_inputs(inputs, arch);
  return std::move(detail::forward_all(params, arch, inputs).back());
}

/// Mean softmax cross-entropy of the rows of `logits` against `labels`.
inline double cross_entropy(const Logits& logits, std::span<const std::size_t> labels) {
  detail::check_labels(labels, logits.rows, logits.cols);
  if (logits.rows == 0) throw std::invalid_argument("cross_entropy: empty batch");
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    auto z = logits.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    total += std::log(sum) + mx - z[labels[r]];
  }
  return total / static_cast<double>(logits.rows);
}

/// Mini-batch loss and the exact gradient of the mean loss.
inline std::pair<double, ParamVector> loss_and_grad(std::span<const double> params, const MlpArch& arch,
                                                    const Matrix& inputs, std::span<const std::size_t> labels) {
  detail::check_params(params, arch);
  detail::check_inputs(inputs, arch);
  detail::check_labels(labels, inputs.rows, arch.class_count());
  if (inputs.rows == 0) throw std::invalid_argument("loss_and_grad: empty batch");

  const std::vector<Matrix> acts = detail::forward_all(params, arch, inputs);
  const Matrix& logits = acts.back();
  const std::size_t rows = inputs.rows;
  const std::size_t classes = arch.class_count();
  const double inv_b = 1.0 / static_cast<double>(rows);

  // dL/dlogits = (softmax - onehot) / B
  Matrix delta(rows, classes);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto z = logits.row(r);
    auto p = delta.row(r);
    detail::softmax_row(z, p);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    loss += std::log(sum) + mx - z[labels[r]];
    p[labels[r]] -= 1.0;
    for (double& v : p) v *= inv_b;
  }
  loss *= inv_b;

  ParamVector grad(params.size(), 0.0);
  for (std::size_t l = arch.layer_count(); l-- > 0;) {
    const std::size_t in = arch.layer_sizes[l];
    const std::size_t out = arch.layer_sizes[l + 1];
    const std::size_t off = arch.layer_offset(l);
    const Matrix& a_prev = acts[l];
    double* gw = grad.data() + off;
    double* gb = gw + in * out;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* dr = delta.data.data() + r * out;
      const double* ar = a_prev.data.data() + r * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double d = dr[o];
        gb[o] += d;
        double* gwo = gw + o * in;
        for (std::size_t i = 0; i < in; ++i) gwo[i] += d * ar[i];
      }
    }
    if (l == 0) break;
    Matrix next(rows, in);
    const double* w = params.data() + off;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* dr = delta.data.data() + r * out;
      double* nr = next.data.data() + r * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double d = dr[o];
        const double* wo = w + o * in;
        for (std::size_t i = 0; i < in; ++i) nr[i] += d * wo[i];
      }
      const double* ar = a_prev.data.data() + r * in;
      for (std::size_t i = 0; i < in; ++i) nr[i] *= detail::activate_grad(arch.activation, ar[i]);
    }
    delta = std::move(next);
  }
  return {loss, std::move(grad)};
}

inline std::pair<double, ParamVector> loss_and_grad(std::span<const double> params, const MlpArch& arch,
                                                    const Batch& batch) {
  return loss_and_grad(params, arch, batch.inputs, batch.labels);
}

/// Draws one label per row from Categorical(softmax(row)).
inline std::vector<std::size_t> sample_labels(const Logits& logits, Rng& rng) {
  std::vector<std::size_t> labels(logits.rows);
  std::vector<double> probs(logits.cols);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    detail::softmax_row(logits.row(r), probs);
    const double u = uniform(rng);
    double cum = 0.0;
    std::size_t pick = logits.cols - 1;
    for (std::size_t c = 0; c < logits.cols; ++c) {
      cum += probs[c];
      if (u < cum) {
        pick = c;
        break;
      }
    }
    labels[r] = pick;
  }
  return labels;
}

/// B * g ⊙ g for a mini-batch gradient g.
inline ParamVector gnb_from_gradient(std::span<const double> grad, std::size_t batch_size) {
  ParamVector h(grad.size());
  const double b = static_cast<double>(batch_size);
  for (std::size_t i = 0; i < grad.size(); ++i) h[i] = b * grad[i] * grad[i];
  return h;
}

/// Gauss-Newton-Bartlett estimate of the Hessian diagonal: the mini-batch
/// gradient is taken against labels sampled from the model's own softmax.
inline ParamVector gnb_diag_hessian(std::span<const double> params, const MlpArch& arch, const Matrix& inputs,
                                    Rng& rng) {
  if (inputs.rows == 0) throw std::invalid_argument("gnb_diag_hessian: empty batch");
  const Logits logits = forward(params, arch, inputs);
  const std::vector<std::size_t> sampled = sample_labels(logits, rng);
  const auto [loss, grad] = loss_and_grad(params, arch, inputs, sampled);
  (void)loss;
  return gnb_from_gradient(grad, inputs.rows);
}

}  // namespace otafed
