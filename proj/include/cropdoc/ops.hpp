#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cropdoc/tape.hpp"
#include "cropdoc/tensor.hpp"

namespace cropdoc {

// ---- Layer primitives -------------------------------------------------------

/// 1-D convolution along the last (spectral) axis with a 1x1 spatial
/// footprint. x: [..., B], kernels: [K, L] (L odd), bias: [K] -> [..., B, K].
/// Same padding; out-of-range bands replicate the edge band.
Var conv_spectral(Var x, Var kernels, Var bias);

/// Depthwise spectral convolution whose kernel spans the whole band axis
/// (valid padding), collapsing it. x: [..., B, K], kernels: [K, B],
/// bias: [K] -> [..., K].
Var conv_band_collapse(Var x, Var kernels, Var bias);

/// Valid 3-D cross-correlation over a c x c spatial window and all input
/// channels. x: [N, H, W, C], kernels: [K2, c, c, C], bias: [K2]
/// -> [N, H-c+1, W-c+1, K2].
Var conv_spatial3d(Var x, Var kernels, Var bias);

/// Affine map on the last axis. x: [..., n], weights: [m, n], bias: [m] -> [..., m].
Var fully_connected(Var x, Var weights, Var bias);

enum class NormMode { train, infer };

struct BatchNormState {
  explicit BatchNormState(std::size_t channels = 0);

  std::size_t channels() const { return running_mean.size(); }

  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;
  double epsilon = 1e-5;
};

/// Per-channel normalization over every axis but the last.
/// Train mode uses batch statistics and updates the running estimates as
/// running = momentum * running + (1 - momentum) * batch.
Var batch_norm(Var x, BatchNormState& state, NormMode mode);
/// Same as above with gamma/beta already bound on the tape.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, NormMode mode);
/// Inference-mode normalization from running statistics; never mutates state.
Var batch_norm_infer(Var x, Var gamma, Var beta, const BatchNormState& state);

Var relu(Var x);
Var sigmoid(Var x);

// ---- Capsule primitives -----------------------------------------------------

/// Squash along the last axis: u * |u| / (1 + |u|^2). Zero vectors stay zero.
Var squash(Var x);

/// Euclidean norm along the last axis: [..., D] -> [...].
Var vector_norm(Var x);

/// Numerically stable softmax along the last axis.
Var softmax(Var x);

/// Prediction vectors u_hat[n, z, c, :] = W[z, c] * u[n, z, :] + B[c].
/// u: [N, Z, K], W: [Z, C, D, K], B: [C, D] -> [N, Z, C, D].
Var capsule_predictions(Var u, Var weights, Var bias);

/// s[n, c, :] = sum_z coeff[n, z, c] * u_hat[n, z, c, :].
/// coeff: [N, Z, C], u_hat: [N, Z, C, D] -> [N, C, D].
Var routing_combine(Var coeff, Var u_hat);

/// agreement[n, z, c] = v[n, c, :] . u_hat[n, z, c, :].
/// v: [N, C, D], u_hat: [N, Z, C, D] -> [N, Z, C].
Var routing_agreement(Var v, Var u_hat);

/// Zeroes every capsule except the selected one per sample and flattens.
/// v: [N, C, D] -> [N, C * D].
Var mask_capsules(Var v, std::span<const std::size_t> selected);

// ---- Generic ----------------------------------------------------------------

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var sum(Var x);
Var mean(Var x);
Var reshape(Var x, Shape shape);

/// Mean squared error against a constant target of equal size.
Var mse(Var prediction, const Tensor& target);

}  // namespace cropdoc
