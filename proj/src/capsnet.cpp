#include "cropdoc/capsnet.hpp"

#include <cmath>
#include <string>
#include <type_traits>

#include "cropdoc/errors.hpp"
#include "cropdoc/random.hpp"

namespace cropdoc {

void NetworkConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(bands, "bands");
  positive(spectral_kernels, "spectral_kernels");
  positive(spatial_kernels, "spatial_kernels");
  positive(capsules, "capsules");
  positive(capsule_dim, "capsule_dim");
  positive(class_dim, "class_dim");
  positive(patch, "patch");
  positive(kernel, "kernel");
  positive(decoder_hidden, "decoder_hidden");
  if (n_class < 2) throw ConfigError("n_class must be at least 2");
  if (routing_iters < 1) throw ConfigError("routing_iters must be at least 1");
  if (receptive_field % 2 == 0) throw ConfigError("receptive_field must be odd");
  if (bands < receptive_field) throw ConfigError("bands must be at least the spectral receptive field");
  if (patch % 2 == 0) throw ConfigError("patch edge must be odd");
  // The spatial encoder must collapse the patch to 1x1.
  if (patch != kernel) {
    throw ConfigError("patch edge (" + std::to_string(patch) + ") must equal the 3-D kernel edge (" +
                      std::to_string(kernel) + ")");
  }
}

void LossConfig::validate() const {
  if (!(0.0 < edge_minus && edge_minus < edge_plus && edge_plus < 1.0)) {
    throw ConfigError("loss margins must satisfy 0 < edge_minus < edge_plus < 1");
  }
  if (!(mu > 0.0)) throw ConfigError("mu must be positive");
  if (!(theta > 0.0)) throw ConfigError("theta must be positive");
}

// ---- plain-value helpers ----------------------------------------------------

std::vector<double> squash(std::span<const double> u) {
  double sq = 0.0;
  for (double x : u) sq += x * x;
  const double factor = std::sqrt(sq) / (1.0 + sq);
  std::vector<double> out(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = factor * u[i];
  return out;
}

double margin_loss(std::span<const double> norms, std::size_t label, const LossConfig& cfg) {
  if (label >= norms.size()) throw ArgumentError("margin_loss: label out of range");
  double loss = 0.0;
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (i == label) {
      const double h = std::max(0.0, cfg.edge_plus - norms[i]);
      loss += h * h;
    } else {
      const double h = std::max(0.0, norms[i] - cfg.edge_minus);
      loss += cfg.mu * h * h;
    }
  }
  return loss;
}

double total_loss(double margin, std::span<const double> reconstruction, std::span<const double> target,
                  const LossConfig& cfg) {
  if (reconstruction.size() != target.size() || target.empty()) {
    throw DimensionError("total_loss: reconstruction and target lengths differ");
  }
  double mse = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = reconstruction[i] - target[i];
    mse += d * d;
  }
  mse /= static_cast<double>(target.size());
  return margin + cfg.theta * mse;
}

Prediction classify_norms(std::span<const double> norms) {
  if (norms.empty()) throw ArgumentError("classify_norms: no classes");
  Prediction p;
  p.norms.assign(norms.begin(), norms.end());
  for (std::size_t i = 1; i < norms.size(); ++i) {
    if (norms[i] > norms[p.label]) p.label = i;
  }
  p.confidence = norms[p.label];
  return p;
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t n_class) {
  Tensor out({labels.size(), n_class});
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] >= n_class) throw ArgumentError("one_hot: label out of range");
    out[n * n_class + labels[n]] = 1.0;
  }
  return out;
}

// ---- routing and losses --------------------------------------------------------

Var route(Var caps, Var weights, Var bias, std::size_t iters, RoutingTrace* trace) {
  if (iters == 0) throw ConfigError("routing requires at least one iteration");
  Tape& tape = caps.tape();
  Var u_hat = capsule_predictions(caps, weights, bias);
  const Shape& ps = u_hat.shape();
  Var logits = tape.constant(Tensor({ps[0], ps[1], ps[2]}, 0.0));
  if (trace) trace->predictions = u_hat.value();

  Var v;
  for (std::size_t it = 0; it < iters; ++it) {
    Var coeff = softmax(logits);
    Var s = routing_combine(coeff, u_hat);
    v = squash(s);
    if (trace) {
      trace->log_priors.push_back(logits.value());
      trace->coefficients.push_back(coeff.value());
      trace->preactivations.push_back(s.value());
      trace->activations.push_back(v.value());
    }
    if (it + 1 < iters) logits = add(logits, routing_agreement(v, u_hat));
  }
  return v;
}

RoutingTrace route(const CapsuleTensor& caps, const Tensor& weights, const Tensor& bias, std::size_t iters) {
  if (!caps.squashed) throw ArgumentError("route: capsules must be squashed");
  Tape tape;
  Var u = tape.constant(caps.vectors.reshaped({1, caps.count(), caps.dim()}));
  RoutingTrace trace;
  route(u, tape.reference(weights), tape.reference(bias), iters, &trace);
  return trace;
}

Var margin_loss(Var v, std::span<const std::size_t> labels, const LossConfig& cfg) {
  Var norms = vector_norm(v);
  const Tensor& nv = norms.value();
  const std::size_t n_batch = v.shape()[0];
  const std::size_t classes = v.shape()[1];
  if (labels.size() != n_batch) throw DimensionError("margin_loss: one label per sample required");
  std::vector<double> dnorm(nv.size(), 0.0);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n_batch);
  for (std::size_t n = 0; n < n_batch; ++n) {
    if (labels[n] >= classes) throw ArgumentError("margin_loss: label out of range");
    for (std::size_t i = 0; i < classes; ++i) {
      const double r = nv[n * classes + i];
      if (i == labels[n]) {
        const double h = std::max(0.0, cfg.edge_plus - r);
        loss += h * h;
        dnorm[n * classes + i] = -2.0 * h * inv_n;
      } else {
        const double h = std::max(0.0, r - cfg.edge_minus);
        loss += cfg.mu * h * h;
        dnorm[n * classes + i] = 2.0 * cfg.mu * h * inv_n;
      }
    }
  }
  const std::size_t ni = norms.id();
  return v.tape().record(Tensor({1}, {loss * inv_n}), {ni}, [ni, dnorm = std::move(dnorm)](Tape& t, std::size_t self) {
    const double g = t.adjoint(self)[0];
    std::span<double> gn = t.adjoint(ni);
    for (std::size_t i = 0; i < gn.size(); ++i) gn[i] += g * dnorm[i];
  });
}

Var total_loss(Var margin, Var reconstruction, const Tensor& target, const LossConfig& cfg) {
  return add(margin, scale(mse(reconstruction, target), cfg.theta));
}

// ---- the network ---------------------------------------------------------------

namespace {

void xavier(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& w : t.data()) w = rng.uniform(-bound, bound);
}

}  // namespace

CapsNet::CapsNet(NetworkConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const auto& c = config_;
  const std::size_t k1 = c.spectral_kernels, k2 = c.spatial_kernels;
  const std::size_t zk = c.capsules * c.capsule_dim;
  Rng rng(seed);

  conv1_w = Tensor({k1, c.receptive_field});
  conv1_b = Tensor({k1});
  bn1 = BatchNormState(k1);
  conv2_w = Tensor({k1, c.bands});
  conv2_b = Tensor({k1});
  bn2 = BatchNormState(k1);
  spatial_w = Tensor({k2, c.kernel, c.kernel, k1});
  spatial_b = Tensor({k2});
  bn3 = BatchNormState(k2);
  encap_w = Tensor({zk, k2});
  encap_b = Tensor({zk});
  route_w = Tensor({c.capsules, c.n_class, c.class_dim, c.capsule_dim});
  route_b = Tensor({c.n_class, c.class_dim});
  dec1_w = Tensor({c.decoder_hidden, c.n_class * c.class_dim});
  dec1_b = Tensor({c.decoder_hidden});
  dec2_w = Tensor({c.n_class, c.decoder_hidden});
  dec2_b = Tensor({c.n_class});

  xavier(conv1_w, c.receptive_field, k1 * c.receptive_field, rng);
  xavier(conv2_w, c.bands, c.bands, rng);
  xavier(spatial_w, c.kernel * c.kernel * k1, c.kernel * c.kernel * k2, rng);
  xavier(encap_w, k2, zk, rng);
  xavier(route_w, c.capsule_dim, c.class_dim, rng, 0.1);
  xavier(dec1_w, c.n_class * c.class_dim, c.decoder_hidden, rng);
  xavier(dec2_w, c.decoder_hidden, c.n_class, rng);

  for (NamedTensor& p : parameters()) p.tensor->set_requires_grad(true);
}

template <class Self, class Visit>
void CapsNet::visit_blocks(Self& self, Visit&& visit) {
  auto tensor = [&](const char* name, auto& t) { visit(name, t.shape(), t.data(), &t); };
  auto stats = [&](const std::string& prefix, auto& bn) {
    visit(prefix + ".running_mean", Shape{bn.channels()}, std::span(bn.running_mean), nullptr);
    visit(prefix + ".running_var", Shape{bn.channels()}, std::span(bn.running_var), nullptr);
  };
  tensor("spectral.conv1.weight", self.conv1_w);
  tensor("spectral.conv1.bias", self.conv1_b);
  tensor("spectral.bn1.gamma", self.bn1.gamma);
  tensor("spectral.bn1.beta", self.bn1.beta);
  tensor("spectral.conv2.weight", self.conv2_w);
  tensor("spectral.conv2.bias", self.conv2_b);
  tensor("spectral.bn2.gamma", self.bn2.gamma);
  tensor("spectral.bn2.beta", self.bn2.beta);
  tensor("spatial.conv.weight", self.spatial_w);
  tensor("spatial.conv.bias", self.spatial_b);
  tensor("spatial.bn.gamma", self.bn3.gamma);
  tensor("spatial.bn.beta", self.bn3.beta);
  tensor("encapsulation.weight", self.encap_w);
  tensor("encapsulation.bias", self.encap_b);
  tensor("class_capsules.weight", self.route_w);
  tensor("class_capsules.bias", self.route_b);
  tensor("decoder.fc1.weight", self.dec1_w);
  tensor("decoder.fc1.bias", self.dec1_b);
  tensor("decoder.fc2.weight", self.dec2_w);
  tensor("decoder.fc2.bias", self.dec2_b);
  stats("spectral.bn1", self.bn1);
  stats("spectral.bn2", self.bn2);
  stats("spatial.bn", self.bn3);
}

std::vector<NamedTensor> CapsNet::parameters() {
  std::vector<NamedTensor> out;
  visit_blocks(*this, [&out](const std::string& name, const Shape&, std::span<double>, Tensor* t) {
    if (t) out.push_back({name, t});
  });
  return out;
}

std::vector<CapsNet::Block> CapsNet::blocks() {
  std::vector<Block> out;
  visit_blocks(*this, [&out](const std::string& name, const Shape& shape, std::span<double> values, Tensor*) {
    out.push_back({name, shape, values});
  });
  return out;
}

std::vector<CapsNet::ConstBlock> CapsNet::blocks() const {
  std::vector<ConstBlock> out;
  visit_blocks(*this, [&out](const std::string& name, const Shape& shape, std::span<const double> values,
                             const Tensor*) { out.push_back({name, shape, values}); });
  return out;
}

std::size_t CapsNet::parameter_count() const {
  std::size_t n = 0;
  visit_blocks(*this, [&n](const std::string&, const Shape&, std::span<const double> values, const Tensor* t) {
    if (t) n += values.size();
  });
  return n;
}

void CapsNet::check_batch(const Tensor& batch) const {
  if (batch.rank() != 4 || batch.dim(1) != config_.patch || batch.dim(2) != config_.patch ||
      batch.dim(3) != config_.bands) {
    throw DimensionError("expected patch batch [N," + std::to_string(config_.patch) + "," +
                         std::to_string(config_.patch) + "," + std::to_string(config_.bands) + "], got " +
                         shape_string(batch.shape()));
  }
}

template <class Self>
CapsNet::Forward CapsNet::run(Self& self, Tape& tape, const Tensor& batch, NormMode mode, RoutingTrace* trace) {
  constexpr bool frozen = std::is_const_v<Self>;
  self.check_batch(batch);
  auto bind = [&tape](auto& t) {
    if constexpr (frozen) {
      return tape.reference(t);
    } else {
      return tape.variable(t);
    }
  };
  auto norm = [&](Var x, auto& bn) {
    if constexpr (frozen) {
      return batch_norm_infer(x, bind(bn.gamma), bind(bn.beta), bn);
    } else {
      return batch_norm(x, bind(bn.gamma), bind(bn.beta), bn, mode);
    }
  };
  const NetworkConfig& c = self.config_;
  const std::size_t n_batch = batch.dim(0);

  Forward f;
  // Spectral encoder: [N,d,d,B] -> [N,d,d,B,K1] -> [N,d,d,K1].
  Var x = tape.reference(batch);
  Var h = conv_spectral(x, bind(self.conv1_w), bind(self.conv1_b));
  h = norm(h, self.bn1);
  h = conv_band_collapse(h, bind(self.conv2_w), bind(self.conv2_b));
  h = norm(h, self.bn2);
  f.spectral = relu(h);

  // Spectral-spatial encoder: valid c x c x K1 convolution collapses space.
  h = conv_spatial3d(f.spectral, bind(self.spatial_w), bind(self.spatial_b));
  h = norm(h, self.bn3);
  f.spectral_spatial = relu(h);

  // Feature encapsulation: Z units of K 1x1xK2 filters, squashed.
  h = reshape(f.spectral_spatial, {n_batch, c.spatial_kernels});
  h = fully_connected(h, bind(self.encap_w), bind(self.encap_b));
  h = reshape(h, {n_batch, c.capsules, c.capsule_dim});
  f.capsules = squash(h);

  f.activations = route(f.capsules, bind(self.route_w), bind(self.route_b), c.routing_iters, trace);
  f.norms = vector_norm(f.activations);
  return f;
}

template <class Self>
Var CapsNet::run_decoder(Self& self, Tape& tape, Var activations, std::span<const std::size_t> selected) {
  auto bind = [&tape](auto& t) {
    if constexpr (std::is_const_v<Self>) {
      return tape.reference(t);
    } else {
      return tape.variable(t);
    }
  };
  Var h = mask_capsules(activations, selected);
  h = relu(fully_connected(h, bind(self.dec1_w), bind(self.dec1_b)));
  return sigmoid(fully_connected(h, bind(self.dec2_w), bind(self.dec2_b)));
}

CapsNet::Forward CapsNet::forward(Tape& tape, const Tensor& batch, NormMode mode, RoutingTrace* trace) {
  return run(*this, tape, batch, mode, trace);
}

CapsNet::Forward CapsNet::infer(Tape& tape, const Tensor& batch, RoutingTrace* trace) const {
  return run(*this, tape, batch, NormMode::infer, trace);
}

Var CapsNet::decode(Tape& tape, Var activations, std::span<const std::size_t> selected) {
  return run_decoder(*this, tape, activations, selected);
}

Var CapsNet::decode(Tape& tape, Var activations, std::span<const std::size_t> selected) const {
  return run_decoder(*this, tape, activations, selected);
}

std::vector<Prediction> CapsNet::predict(const Tensor& batch) const {
  Tape tape;
  Forward f = infer(tape, batch);
  const Tensor& norms = f.norms.value();
  const std::size_t classes = config_.n_class;
  std::vector<Prediction> out;
  out.reserve(batch.dim(0));
  for (std::size_t n = 0; n < batch.dim(0); ++n) {
    out.push_back(classify_norms(norms.data().subspan(n * classes, classes)));
  }
  return out;
}

Prediction CapsNet::predict_one(const Tensor& patch) const {
  if (patch.rank() != 3) throw DimensionError("predict_one expects a [d,d,B] patch, got " + shape_string(patch.shape()));
  return predict(patch.reshaped({1, patch.dim(0), patch.dim(1), patch.dim(2)})).front();
}

}  // namespace cropdoc
