#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cropdoc/capsnet.hpp"
#include "cropdoc/ops.hpp"
#include "cropdoc/random.hpp"
#include "cropdoc/tape.hpp"
#include "cropdoc/tensor.hpp"

namespace testing {

using cropdoc::Shape;
using cropdoc::Tape;
using cropdoc::Tensor;
using cropdoc::Var;

inline Tensor random_tensor(const Shape& shape, cropdoc::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so kinks (relu, norms) stay out of reach of
// the finite-difference step.
inline Tensor random_nonzero(const Shape& shape, cropdoc::Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data()) {
    const double mag = rng.uniform(0.1, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

using Builder = std::function<Var(Tape&, std::vector<Var>&)>;

struct GradCheck {
  double max_rel = 0.0;  // worst relative error among entries above abs_tol
  double max_abs = 0.0;
  std::size_t checked = 0;
};

// Central finite differences (step h) on every element of every input,
// compared with the tape gradient. Entries whose absolute error is below
// abs_tol count as exact.
inline GradCheck grad_check(const Builder& build, std::vector<Tensor*> inputs, double h = 1e-5,
                            double abs_tol = 1e-6) {
  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> vars;
    for (Tensor* t : inputs) vars.push_back(tape.variable(*t));
    return build(tape, vars).value()[0];
  };
  for (Tensor* t : inputs) {
    t->set_requires_grad(true);
    t->clear_grad();
  }
  {
    Tape tape;
    std::vector<Var> vars;
    for (Tensor* t : inputs) vars.push_back(tape.variable(*t));
    tape.backward(build(tape, vars));
  }
  GradCheck out;
  for (Tensor* t : inputs) {
    const std::vector<double> analytic = t->has_grad() ? std::vector<double>(t->grad().begin(), t->grad().end())
                                                       : std::vector<double>(t->size(), 0.0);
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double saved = (*t)[i];
      (*t)[i] = saved + h;
      const double up = evaluate();
      (*t)[i] = saved - h;
      const double down = evaluate();
      (*t)[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(numeric - analytic[i]);
      out.max_abs = std::max(out.max_abs, err);
      if (err > abs_tol) {
        out.max_rel = std::max(out.max_rel, err / std::max(std::abs(numeric), std::abs(analytic[i])));
      }
      ++out.checked;
    }
  }
  for (Tensor* t : inputs) t->clear_grad();
  return out;
}

// Scalar projection <f(x), r> with a fixed random r, so every output entry
// contributes to the gradient.
inline Var project(Var out, std::uint64_t seed = 7) {
  cropdoc::Rng rng(seed);
  Tape& tape = out.tape();
  Var r = tape.constant(random_tensor(out.shape(), rng));
  return cropdoc::sum(cropdoc::mul(out, r));
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cropdoc_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Loss of one training step; BN in train mode, decoder masked by the labels.
inline Var step_loss(cropdoc::CapsNet& net, Tape& tape, const Tensor& batch,
                     const std::vector<std::size_t>& labels, const cropdoc::LossConfig& cfg) {
  const cropdoc::CapsNet::Forward f = net.forward(tape, batch, cropdoc::NormMode::train);
  const Var margin = cropdoc::margin_loss(f.activations, labels, cfg);
  const Var recon = net.decode(tape, f.activations, labels);
  return cropdoc::total_loss(margin, recon, cropdoc::one_hot(labels, net.config().n_class), cfg);
}

struct GradError {
  double relative = 0.0;  // worst over gradients above the near-zero floor
  double absolute = 0.0;  // worst over gradients below it
};

// Five-point central differences against the taped gradient of every parameter.
inline GradError network_grad_error(cropdoc::CapsNet& net, const Tensor& batch,
                                    const std::vector<std::size_t>& labels, const cropdoc::LossConfig& cfg) {
  auto params = net.parameters();
  for (auto& p : params) p.tensor->zero_grad();
  {
    Tape tape;
    tape.backward(step_loss(net, tape, batch, labels, cfg));
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.emplace_back(p.tensor->grad().begin(), p.tensor->grad().end());
  auto loss_at = [&] {
    Tape tape;
    return step_loss(net, tape, batch, labels, cfg).value()[0];
  };
  constexpr double h = 1e-5, floor = 1e-6;
  GradError worst;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& t = *params[k].tensor;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      auto at = [&](double dx) {
        t[i] = saved + dx;
        return loss_at();
      };
      const double numeric = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
      t[i] = saved;
      const double err = std::abs(numeric - analytic[k][i]);
      const double scale = std::max(std::abs(numeric), std::abs(analytic[k][i]));
      if (scale > floor) worst.relative = std::max(worst.relative, err / scale);
      else worst.absolute = std::max(worst.absolute, err);
    }
  }
  for (auto& p : params) p.tensor->clear_grad();
  return worst;
}

}  // namespace testing
