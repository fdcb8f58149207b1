#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cropdoc/ops.hpp"
#include "cropdoc/tape.hpp"
#include "cropdoc/tensor.hpp"

namespace cropdoc {

/// Architecture hyperparameters. Defaults are the converged configuration
/// (K1 = 128, K2 = 64, Z = 32, 13x13 patches, four classes).
struct NetworkConfig {
  std::size_t bands = 125;           // B
  std::size_t spectral_kernels = 128;  // K1
  std::size_t spatial_kernels = 64;    // K2
  std::size_t capsules = 32;           // Z
  std::size_t capsule_dim = 16;        // K
  std::size_t class_dim = 16;          // D_class
  std::size_t n_class = 4;
  std::size_t patch = 13;              // d
  std::size_t kernel = 13;             // c
  std::size_t receptive_field = 7;     // L_rf
  std::size_t routing_iters = 3;
  std::size_t decoder_hidden = 64;

  // Throws ConfigError on inconsistent settings.
  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

/// Margin/reconstruction loss weights.
struct LossConfig {
  double edge_plus = 0.9;
  double edge_minus = 0.1;
  double mu = 0.5;
  double theta = 0.0005;

  void validate() const;
};

/// Z capsule vectors of dimension K for one sample.
struct CapsuleTensor {
  Tensor vectors;  // [Z, K]
  bool squashed = false;

  std::size_t count() const { return vectors.dim(0); }
  std::size_t dim() const { return vectors.dim(1); }
};

/// Per-iteration record of dynamic routing for a batch.
struct RoutingTrace {
  Tensor predictions;                 // u_hat [N, Z, C, D]
  std::vector<Tensor> log_priors;     // b before each softmax [N, Z, C]
  std::vector<Tensor> coefficients;   // c [N, Z, C]
  std::vector<Tensor> preactivations; // s [N, C, D]
  std::vector<Tensor> activations;    // v [N, C, D]
};

// ---- plain-value helpers ----------------------------------------------------

/// Squash of a single vector; the zero vector maps to itself.
std::vector<double> squash(std::span<const double> u);

/// Squared-hinge margin loss for one sample given its class-capsule norms.
double margin_loss(std::span<const double> norms, std::size_t label, const LossConfig& cfg);

/// L_margin + theta * MSE(reconstruction, target).
double total_loss(double margin, std::span<const double> reconstruction, std::span<const double> target,
                  const LossConfig& cfg);

struct Prediction {
  std::size_t label = 0;
  double confidence = 0.0;
  std::vector<double> norms;
};

/// argmax of capsule norms; ties resolve to the lowest class index.
Prediction classify_norms(std::span<const double> norms);

// ---- differentiable building blocks ------------------------------------------

/// Dynamic routing by agreement.
/// caps: [N, Z, K] squashed capsules, weights: [Z, C, D, K], bias: [C, D].
/// Returns class activations v: [N, C, D]. The last iteration skips the
/// log-prior update.
Var route(Var caps, Var weights, Var bias, std::size_t iters, RoutingTrace* trace = nullptr);

/// Single-sample routing on plain values; returns the full trace.
RoutingTrace route(const CapsuleTensor& caps, const Tensor& weights, const Tensor& bias, std::size_t iters);

/// Batched margin loss (mean over samples). v: [N, C, D].
Var margin_loss(Var v, std::span<const std::size_t> labels, const LossConfig& cfg);

/// Batched L_end = L_margin + theta * MSE.
Var total_loss(Var margin, Var reconstruction, const Tensor& target, const LossConfig& cfg);

/// One-hot targets [N, n_class].
Tensor one_hot(std::span<const std::size_t> labels, std::size_t n_class);

// ---- the network ---------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

/// Spectral encoder -> spectral-spatial encoder -> feature encapsulation ->
/// class capsules (dynamic routing) -> decoder.
class CapsNet {
 public:
  explicit CapsNet(NetworkConfig config, std::uint64_t seed = 42);

  const NetworkConfig& config() const { return config_; }

  struct Forward {
    Var spectral;        // X1 [N, d, d, K1]
    Var spectral_spatial;// X2 [N, 1, 1, K2]
    Var capsules;        // X3 [N, Z, K], squashed
    Var activations;     // v  [N, C, D]
    Var norms;           // |v| [N, C]
  };

  /// Training-capable forward pass. Parameters are bound as gradient
  /// leaves; train mode updates batch-norm running statistics.
  Forward forward(Tape& tape, const Tensor& batch, NormMode mode, RoutingTrace* trace = nullptr);
  /// Inference forward pass; parameters are read-only.
  Forward infer(Tape& tape, const Tensor& batch, RoutingTrace* trace = nullptr) const;

  /// Decoder on masked class capsules: FC(hidden) -> ReLU -> FC(n_class) ->
  /// sigmoid. `selected` holds one class per sample.
  Var decode(Tape& tape, Var activations, std::span<const std::size_t> selected);
  Var decode(Tape& tape, Var activations, std::span<const std::size_t> selected) const;

  /// batch: [N, d, d, B].
  std::vector<Prediction> predict(const Tensor& batch) const;
  Prediction predict_one(const Tensor& patch) const;  // [d, d, B]

  /// Trainable parameters in a fixed order.
  std::vector<NamedTensor> parameters();
  /// Every serialized block: parameters plus batch-norm running statistics.
  template <class T>
  struct BasicBlock {
    std::string name;
    Shape shape;
    std::span<T> values;
  };
  using Block = BasicBlock<double>;
  using ConstBlock = BasicBlock<const double>;
  std::vector<Block> blocks();
  std::vector<ConstBlock> blocks() const;
  std::size_t parameter_count() const;

 private:
  // Shared by the mutable (training) and const (inference) entry points.
  template <class Self>
  static Forward run(Self& self, Tape& tape, const Tensor& batch, NormMode mode, RoutingTrace* trace);
  template <class Self, class Visit>
  static void visit_blocks(Self& self, Visit&& visit);
  template <class Self>
  static Var run_decoder(Self& self, Tape& tape, Var activations, std::span<const std::size_t> selected);
  void check_batch(const Tensor& batch) const;

  NetworkConfig config_;

 public:
  // Raw parameter storage, exposed for tests and serialization.
  Tensor conv1_w, conv1_b;   // [K1, L_rf], [K1]
  BatchNormState bn1;
  Tensor conv2_w, conv2_b;   // [K1, B], [K1]
  BatchNormState bn2;
  Tensor spatial_w, spatial_b;  // [K2, c, c, K1], [K2]
  BatchNormState bn3;
  Tensor encap_w, encap_b;   // [Z*K, K2], [Z*K]
  Tensor route_w, route_b;   // [Z, C, D, K], [C, D]
  Tensor dec1_w, dec1_b;     // [H, C*D], [H]
  Tensor dec2_w, dec2_b;     // [C, H], [C]
};

}  // namespace cropdoc
