#include "cropdoc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cropdoc/errors.hpp"

namespace cropdoc {

namespace {

void expect_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_string(t.shape()));
  }
}

void expect_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ArgumentError("operands recorded on different tapes");
  return a.tape();
}

// Leading extent when the last axis (or last `trailing` axes) are peeled off.
std::size_t leading(const Tensor& t, std::size_t trailing) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing < t.rank(); ++i) n *= t.dim(i);
  return n;
}

Shape with_last(Shape shape, std::size_t extent) {
  shape.back() = extent;
  return shape;
}

}  // namespace

// ---- conv_spectral -----------------------------------------------------------

Var conv_spectral(Var x, Var kernels, Var bias) {
  Tape& tape = same_tape(x, kernels);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = kernels.value();
  const Tensor& bv = bias.value();
  expect_rank(wv, 2, "conv_spectral kernels");
  expect_rank(bv, 1, "conv_spectral bias");
  if (xv.rank() < 1) throw DimensionError("conv_spectral input must have a spectral axis");
  const std::size_t k_count = wv.dim(0);
  const std::size_t len = wv.dim(1);
  if (len % 2 == 0) throw ConfigError("conv_spectral receptive field must be odd, got " + std::to_string(len));
  if (bv.dim(0) != k_count) throw DimensionError("conv_spectral bias length does not match kernel count");

  const std::size_t bands = xv.shape().back();
  const std::size_t positions = xv.size() / bands;
  const std::ptrdiff_t radius = static_cast<std::ptrdiff_t>(len / 2);

  // Window index table: band b, tap l -> clamped source band.
  std::vector<std::size_t> src(bands * len);
  for (std::size_t b = 0; b < bands; ++b) {
    for (std::size_t l = 0; l < len; ++l) {
      std::ptrdiff_t s = static_cast<std::ptrdiff_t>(b) + static_cast<std::ptrdiff_t>(l) - radius;
      s = std::clamp<std::ptrdiff_t>(s, 0, static_cast<std::ptrdiff_t>(bands) - 1);
      src[b * len + l] = static_cast<std::size_t>(s);
    }
  }

  Shape out_shape = xv.shape();
  out_shape.push_back(k_count);
  Tensor out(out_shape);
  {
    const double* xp = xv.data().data();
    const double* wp = wv.data().data();
    const double* bp = bv.data().data();
    double* op = out.data().data();
    std::vector<double> window(len);
    for (std::size_t p = 0; p < positions; ++p) {
      const double* xrow = xp + p * bands;
      for (std::size_t b = 0; b < bands; ++b) {
        for (std::size_t l = 0; l < len; ++l) window[l] = xrow[src[b * len + l]];
        double* orow = op + (p * bands + b) * k_count;
        for (std::size_t k = 0; k < k_count; ++k) {
          const double* wk = wp + k * len;
          double acc = bp[k];
          for (std::size_t l = 0; l < len; ++l) acc += wk[l] * window[l];
          orow[k] = acc;
        }
      }
    }
  }

  const std::size_t xi = x.id(), wi = kernels.id(), bi = bias.id();
  return tape.record(std::move(out), {xi, wi, bi},
                     [xi, wi, bi, bands, positions, len, k_count, src = std::move(src)](Tape& t, std::size_t self) {
                       const double* g = t.adjoint(self).data();
                       const double* xp = t.value(xi).data().data();
                       const double* wp = t.value(wi).data().data();
                       if (t.needs_grad(xi)) {
                         double* gx = t.adjoint(xi).data();
                         for (std::size_t p = 0; p < positions; ++p) {
                           for (std::size_t b = 0; b < bands; ++b) {
                             const double* grow = g + (p * bands + b) * k_count;
                             for (std::size_t l = 0; l < len; ++l) {
                               double acc = 0.0;
                               for (std::size_t k = 0; k < k_count; ++k) acc += wp[k * len + l] * grow[k];
                               gx[p * bands + src[b * len + l]] += acc;
                             }
                           }
                         }
                       }
                       if (t.needs_grad(wi)) {
                         double* gw = t.adjoint(wi).data();
                         std::vector<double> window(len);
                         for (std::size_t p = 0; p < positions; ++p) {
                           const double* xrow = xp + p * bands;
                           for (std::size_t b = 0; b < bands; ++b) {
                             for (std::size_t l = 0; l < len; ++l) window[l] = xrow[src[b * len + l]];
                             const double* grow = g + (p * bands + b) * k_count;
                             for (std::size_t k = 0; k < k_count; ++k) {
                               const double gk = grow[k];
                               double* gwk = gw + k * len;
                               for (std::size_t l = 0; l < len; ++l) gwk[l] += gk * window[l];
                             }
                           }
                         }
                       }
                       if (t.needs_grad(bi)) {
                         double* gb = t.adjoint(bi).data();
                         for (std::size_t r = 0; r < positions * bands; ++r) {
                           for (std::size_t k = 0; k < k_count; ++k) gb[k] += g[r * k_count + k];
                         }
                       }
                     });
}

// ---- conv_band_collapse ------------------------------------------------------

Var conv_band_collapse(Var x, Var kernels, Var bias) {
  Tape& tape = same_tape(x, kernels);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = kernels.value();
  const Tensor& bv = bias.value();
  expect_rank(wv, 2, "conv_band_collapse kernels");
  expect_rank(bv, 1, "conv_band_collapse bias");
  if (xv.rank() < 2) throw DimensionError("conv_band_collapse input must be [..., B, K]");
  const std::size_t k_count = xv.shape()[xv.rank() - 1];
  const std::size_t bands = xv.shape()[xv.rank() - 2];
  if (wv.dim(0) != k_count || wv.dim(1) != bands || bv.dim(0) != k_count) {
    throw DimensionError("conv_band_collapse: kernels " + shape_string(wv.shape()) + " incompatible with input " +
                         shape_string(xv.shape()));
  }
  const std::size_t positions = leading(xv, 2);

  // Band-major copy of the kernels so the channel loop is contiguous.
  std::vector<double> wt(bands * k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t b = 0; b < bands; ++b) wt[b * k_count + k] = wv[k * bands + b];
  }

  Shape out_shape(xv.shape().begin(), xv.shape().end() - 1);
  out_shape.back() = k_count;
  Tensor out(out_shape);
  {
    const double* xp = xv.data().data();
    double* op = out.data().data();
    for (std::size_t p = 0; p < positions; ++p) {
      double* orow = op + p * k_count;
      for (std::size_t k = 0; k < k_count; ++k) orow[k] = bv[k];
      for (std::size_t b = 0; b < bands; ++b) {
        const double* xrow = xp + (p * bands + b) * k_count;
        const double* wrow = wt.data() + b * k_count;
        for (std::size_t k = 0; k < k_count; ++k) orow[k] += wrow[k] * xrow[k];
      }
    }
  }

  const std::size_t xi = x.id(), wi = kernels.id(), bi = bias.id();
  return tape.record(std::move(out), {xi, wi, bi},
                     [xi, wi, bi, bands, positions, k_count, wt = std::move(wt)](Tape& t, std::size_t self) {
                       const double* g = t.adjoint(self).data();
                       if (t.needs_grad(xi)) {
                         double* gx = t.adjoint(xi).data();
                         for (std::size_t p = 0; p < positions; ++p) {
                           const double* grow = g + p * k_count;
                           for (std::size_t b = 0; b < bands; ++b) {
                             double* gxrow = gx + (p * bands + b) * k_count;
                             const double* wrow = wt.data() + b * k_count;
                             for (std::size_t k = 0; k < k_count; ++k) gxrow[k] += wrow[k] * grow[k];
                           }
                         }
                       }
                       if (t.needs_grad(wi)) {
                         double* gw = t.adjoint(wi).data();
                         const double* xp = t.value(xi).data().data();
                         for (std::size_t p = 0; p < positions; ++p) {
                           const double* grow = g + p * k_count;
                           for (std::size_t b = 0; b < bands; ++b) {
                             const double* xrow = xp + (p * bands + b) * k_count;
                             for (std::size_t k = 0; k < k_count; ++k) gw[k * bands + b] += grow[k] * xrow[k];
                           }
                         }
                       }
                       if (t.needs_grad(bi)) {
                         double* gb = t.adjoint(bi).data();
                         for (std::size_t p = 0; p < positions; ++p) {
                           for (std::size_t k = 0; k < k_count; ++k) gb[k] += g[p * k_count + k];
                         }
                       }
                     });
}

// ---- conv_spatial3d ----------------------------------------------------------

Var conv_spatial3d(Var x, Var kernels, Var bias) {
  Tape& tape = same_tape(x, kernels);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = kernels.value();
  const Tensor& bv = bias.value();
  expect_rank(xv, 4, "conv_spatial3d input");
  expect_rank(wv, 4, "conv_spatial3d kernels");
  expect_rank(bv, 1, "conv_spatial3d bias");
  const std::size_t n_batch = xv.dim(0), height = xv.dim(1), width = xv.dim(2), channels = xv.dim(3);
  const std::size_t k_count = wv.dim(0), edge = wv.dim(1);
  if (wv.dim(2) != edge) throw DimensionError("conv_spatial3d kernels must be square");
  if (wv.dim(3) != channels) {
    throw DimensionError("conv_spatial3d kernel channel extent " + std::to_string(wv.dim(3)) +
                         " does not match input channels " + std::to_string(channels));
  }
  if (bv.dim(0) != k_count) throw DimensionError("conv_spatial3d bias length does not match kernel count");
  if (edge > height || edge > width) {
    throw DimensionError("conv_spatial3d kernel edge " + std::to_string(edge) + " exceeds input " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t out_h = height - edge + 1, out_w = width - edge + 1;
  const std::size_t span_len = edge * channels;  // contiguous run of one kernel row

  Tensor out({n_batch, out_h, out_w, k_count});
  {
    const double* xp = xv.data().data();
    const double* wp = wv.data().data();
    double* op = out.data().data();
    for (std::size_t n = 0; n < n_batch; ++n) {
      for (std::size_t i = 0; i < out_h; ++i) {
        for (std::size_t j = 0; j < out_w; ++j) {
          double* orow = op + ((n * out_h + i) * out_w + j) * k_count;
          for (std::size_t o = 0; o < k_count; ++o) {
            double acc = bv[o];
            for (std::size_t a = 0; a < edge; ++a) {
              const double* xs = xp + ((n * height + i + a) * width + j) * channels;
              const double* ws = wp + (o * edge + a) * span_len;
              for (std::size_t q = 0; q < span_len; ++q) acc += ws[q] * xs[q];
            }
            orow[o] = acc;
          }
        }
      }
    }
  }

  const std::size_t xi = x.id(), wi = kernels.id(), bi = bias.id();
  return tape.record(std::move(out), {xi, wi, bi},
                     [=](Tape& t, std::size_t self) {
                       const double* g = t.adjoint(self).data();
                       const double* xp = t.value(xi).data().data();
                       const double* wp = t.value(wi).data().data();
                       double* gx = t.needs_grad(xi) ? t.adjoint(xi).data() : nullptr;
                       double* gw = t.needs_grad(wi) ? t.adjoint(wi).data() : nullptr;
                       double* gb = t.needs_grad(bi) ? t.adjoint(bi).data() : nullptr;
                       for (std::size_t n = 0; n < n_batch; ++n) {
                         for (std::size_t i = 0; i < out_h; ++i) {
                           for (std::size_t j = 0; j < out_w; ++j) {
                             const double* grow = g + ((n * out_h + i) * out_w + j) * k_count;
                             for (std::size_t o = 0; o < k_count; ++o) {
                               const double go = grow[o];
                               if (gb) gb[o] += go;
                               if (go == 0.0) continue;
                               for (std::size_t a = 0; a < edge; ++a) {
                                 const std::size_t xoff = ((n * height + i + a) * width + j) * channels;
                                 const std::size_t woff = (o * edge + a) * span_len;
                                 if (gx) {
                                   for (std::size_t q = 0; q < span_len; ++q) gx[xoff + q] += go * wp[woff + q];
                                 }
                                 if (gw) {
                                   for (std::size_t q = 0; q < span_len; ++q) gw[woff + q] += go * xp[xoff + q];
                                 }
                               }
                             }
                           }
                         }
                       }
                     });
}

// ---- fully_connected ---------------------------------------------------------

Var fully_connected(Var x, Var weights, Var bias) {
  Tape& tape = same_tape(x, weights);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = weights.value();
  const Tensor& bv = bias.value();
  expect_rank(wv, 2, "fully_connected weights");
  expect_rank(bv, 1, "fully_connected bias");
  const std::size_t in = xv.shape().back();
  const std::size_t out_dim = wv.dim(0);
  if (wv.dim(1) != in || bv.dim(0) != out_dim) {
    throw DimensionError("fully_connected: weights " + shape_string(wv.shape()) + " / bias " +
                         shape_string(bv.shape()) + " incompatible with input " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.size() / in;
  Tensor out(with_last(xv.shape(), out_dim));
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * in;
    for (std::size_t m = 0; m < out_dim; ++m) {
      const double* wr = wv.data().data() + m * in;
      double acc = bv[m];
      for (std::size_t k = 0; k < in; ++k) acc += wr[k] * xr[k];
      out[r * out_dim + m] = acc;
    }
  }
  const std::size_t xi = x.id(), wi = weights.id(), bi = bias.id();
  return tape.record(std::move(out), {xi, wi, bi}, [=](Tape& t, std::size_t self) {
    const double* g = t.adjoint(self).data();
    const double* xp = t.value(xi).data().data();
    const double* wp = t.value(wi).data().data();
    double* gx = t.needs_grad(xi) ? t.adjoint(xi).data() : nullptr;
    double* gw = t.needs_grad(wi) ? t.adjoint(wi).data() : nullptr;
    double* gb = t.needs_grad(bi) ? t.adjoint(bi).data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t m = 0; m < out_dim; ++m) {
        const double gm = g[r * out_dim + m];
        if (gb) gb[m] += gm;
        if (gx) {
          for (std::size_t k = 0; k < in; ++k) gx[r * in + k] += gm * wp[m * in + k];
        }
        if (gw) {
          for (std::size_t k = 0; k < in; ++k) gw[m * in + k] += gm * xp[r * in + k];
        }
      }
    }
  });
}

// ---- batch_norm --------------------------------------------------------------

BatchNormState::BatchNormState(std::size_t channels)
    : gamma(channels ? Tensor({channels}, 1.0) : Tensor()),
      beta(channels ? Tensor({channels}, 0.0) : Tensor()),
      running_mean(channels, 0.0),
      running_var(channels, 1.0) {}

Var batch_norm(Var x, BatchNormState& state, NormMode mode) {
  Tape& tape = x.tape();
  return batch_norm(x, tape.variable(state.gamma), tape.variable(state.beta), state, mode);
}

namespace {

Var batch_norm_impl(Var x, Var gamma, Var beta, const BatchNormState& state, NormMode mode, BatchNormState* update) {
  Tape& tape = same_tape(x, gamma);
  same_tape(x, beta);
  const Tensor& xv = x.value();
  const std::size_t channels = xv.shape().back();
  if (state.channels() != channels || gamma.size() != channels || beta.size() != channels) {
    throw DimensionError("batch_norm: state has " + std::to_string(state.channels()) + " channels, input has " +
                         std::to_string(channels));
  }
  const std::size_t rows = xv.size() / channels;
  if (rows == 0) throw ArgumentError("batch_norm: zero batch size");
  const double eps = state.epsilon;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();

  std::vector<double> mean(channels, 0.0), inv_std(channels, 0.0);
  if (mode == NormMode::train) {
    std::vector<double> var(channels, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t ch = 0; ch < channels; ++ch) mean[ch] += xv[r * channels + ch];
    }
    for (double& m : mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double d = xv[r * channels + ch] - mean[ch];
        var[ch] += d * d;
      }
    }
    for (std::size_t ch = 0; ch < channels; ++ch) {
      var[ch] /= static_cast<double>(rows);
      inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
      if (update) {
        update->running_mean[ch] = update->momentum * update->running_mean[ch] + (1.0 - update->momentum) * mean[ch];
        update->running_var[ch] = update->momentum * update->running_var[ch] + (1.0 - update->momentum) * var[ch];
      }
    }
  } else {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + eps);
    }
  }

  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  // x-hat is only kept when a backward pass can use it.
  const bool keep = tape.needs_grad(xi) || tape.needs_grad(gi) || tape.needs_grad(bi);
  Tensor normalized = keep ? Tensor(xv.shape()) : Tensor();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const std::size_t i = r * channels + ch;
      const double xhat = (xv[i] - mean[ch]) * inv_std[ch];
      if (keep) normalized[i] = xhat;
      out[i] = gv[ch] * xhat + bv[ch];
    }
  }

  const bool batch_stats = mode == NormMode::train;
  return tape.record(std::move(out), {xi, gi, bi},
                     [=, xhat = std::move(normalized), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                       const double* g = t.adjoint(self).data();
                       const Tensor& gam = t.value(gi);
                       std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t ch = 0; ch < channels; ++ch) {
                           const std::size_t i = r * channels + ch;
                           sum_g[ch] += g[i];
                           sum_gx[ch] += g[i] * xhat[i];
                         }
                       }
                       if (t.needs_grad(gi)) {
                         double* gg = t.adjoint(gi).data();
                         for (std::size_t ch = 0; ch < channels; ++ch) gg[ch] += sum_gx[ch];
                       }
                       if (t.needs_grad(bi)) {
                         double* gb = t.adjoint(bi).data();
                         for (std::size_t ch = 0; ch < channels; ++ch) gb[ch] += sum_g[ch];
                       }
                       if (t.needs_grad(xi)) {
                         double* gx = t.adjoint(xi).data();
                         const double inv_rows = 1.0 / static_cast<double>(rows);
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t ch = 0; ch < channels; ++ch) {
                             const std::size_t i = r * channels + ch;
                             const double k = gam[ch] * inv_std[ch];
                             if (batch_stats) {
                               gx[i] += k * (g[i] - sum_g[ch] * inv_rows - xhat[i] * sum_gx[ch] * inv_rows);
                             } else {
                               gx[i] += k * g[i];
                             }
                           }
                         }
                       }
                     });
}

}  // namespace

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, NormMode mode) {
  return batch_norm_impl(x, gamma, beta, state, mode, &state);
}

Var batch_norm_infer(Var x, Var gamma, Var beta, const BatchNormState& state) {
  return batch_norm_impl(x, gamma, beta, state, NormMode::infer, nullptr);
}

// ---- elementwise activations -------------------------------------------------

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi](Tape& t, std::size_t self) {
    const double* g = t.adjoint(self).data();
    const Tensor& y = t.value(self);
    double* gx = t.adjoint(xi).data();
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var sigmoid(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    // Evaluated on the side that avoids overflow in exp.
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi](Tape& t, std::size_t self) {
    const double* g = t.adjoint(self).data();
    const Tensor& y = t.value(self);
    double* gx = t.adjoint(xi).data();
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

// ---- capsule primitives ------------------------------------------------------

Var squash(Var x) {
  const Tensor& xv = x.value();
  const std::size_t dim = xv.shape().back();
  const std::size_t rows = xv.size() / dim;
  Tensor out(xv.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* u = xv.data().data() + r * dim;
    double sq = 0.0;
    for (std::size_t k = 0; k < dim; ++k) sq += u[k] * u[k];
    const double norm = std::sqrt(sq);
    norms[r] = norm;
    const double factor = norm / (1.0 + sq);
    for (std::size_t k = 0; k < dim; ++k) out[r * dim + k] = factor * u[k];
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, dim, rows, norms = std::move(norms)](Tape& t, std::size_t self) {
    const double* g = t.adjoint(self).data();
    const double* u = t.value(xi).data().data();
    double* gx = t.adjoint(xi).data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double norm = norms[r];
      if (norm == 0.0) continue;  // Jacobian vanishes at the origin.
      const double sq = norm * norm;
      const double factor = norm / (1.0 + sq);
      const double dfactor = (1.0 - sq) / ((1.0 + sq) * (1.0 + sq));
      double dot = 0.0;
      for (std::size_t k = 0; k < dim; ++k) dot += u[r * dim + k] * g[r * dim + k];
      const double radial = dfactor / norm * dot;
      for (std::size_t k = 0; k < dim; ++k) gx[r * dim + k] += factor * g[r * dim + k] + radial * u[r * dim + k];
    }
  });
}

Var vector_norm(Var x) {
  const Tensor& xv = x.value();
  const std::size_t dim = xv.shape().back();
  const std::size_t rows = xv.size() / dim;
  Shape out_shape(xv.shape().begin(), xv.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t k = 0; k < dim; ++k) sq += xv[r * dim + k] * xv[r * dim + k];
    out[r] = std::sqrt(sq);
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, dim, rows](Tape& t, std::size_t self) {
    const double* g = t.adjoint(self).data();
    const double* u = t.value(xi).data().data();
    const Tensor& norms = t.value(self);
    double* gx = t.adjoint(xi).data();
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] == 0.0) continue;
      const double k = g[r] / norms[r];
      for (std::size_t d = 0; d < dim; ++d) gx[r * dim + d] += k * u[r * dim + d];
    }
  });
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  const std::size_t dim = xv.shape().back();
  const std::size_t rows = xv.size() / dim;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * dim;
    double* o = out.data().data() + r * dim;
    const double peak = *std::max_element(in, in + dim);
    double total = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      o[k] = std::exp(in[k] - peak);
      total += o[k];
    }
    for (std::size_t k = 0; k < dim; ++k) o[k] /= total;
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, dim, rows](Tape& t, std::size_t self) {
    const double* g = t.adjoint(self).data();
    const Tensor& y = t.value(self);
    double* gx = t.adjoint(xi).data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t k = 0; k < dim; ++k) dot += g[r * dim + k] * y[r * dim + k];
      for (std::size_t k = 0; k < dim; ++k) gx[r * dim + k] += y[r * dim + k] * (g[r * dim + k] - dot);
    }
  });
}

Var capsule_predictions(Var u, Var weights, Var bias) {
  Tape& tape = same_tape(u, weights);
  same_tape(u, bias);
  const Tensor& uv = u.value();
  const Tensor& wv = weights.value();
  const Tensor& bv = bias.value();
  expect_rank(uv, 3, "capsule_predictions input");
  expect_rank(wv, 4, "capsule_predictions weights");
  expect_rank(bv, 2, "capsule_predictions bias");
  const std::size_t n_batch = uv.dim(0), caps = uv.dim(1), in_dim = uv.dim(2);
  const std::size_t classes = wv.dim(1), out_dim = wv.dim(2);
  if (wv.dim(0) != caps || wv.dim(3) != in_dim || bv.dim(0) != classes || bv.dim(1) != out_dim) {
    throw DimensionError("capsule_predictions: weights " + shape_string(wv.shape()) + " / bias " +
                         shape_string(bv.shape()) + " incompatible with capsules " + shape_string(uv.shape()));
  }
  Tensor out({n_batch, caps, classes, out_dim});
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t z = 0; z < caps; ++z) {
      const double* uz = uv.data().data() + (n * caps + z) * in_dim;
      for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t d = 0; d < out_dim; ++d) {
          const double* w = wv.data().data() + ((z * classes + c) * out_dim + d) * in_dim;
          double acc = bv[c * out_dim + d];
          for (std::size_t k = 0; k < in_dim; ++k) acc += w[k] * uz[k];
          out[((n * caps + z) * classes + c) * out_dim + d] = acc;
        }
      }
    }
  }
  const std::size_t ui = u.id(), wi = weights.id(), bi = bias.id();
  return tape.record(std::move(out), {ui, wi, bi}, [=](Tape& t, std::size_t self) {
    const double* g = t.adjoint(self).data();
    const double* up = t.value(ui).data().data();
    const double* wp = t.value(wi).data().data();
    double* gu = t.needs_grad(ui) ? t.adjoint(ui).data() : nullptr;
    double* gw = t.needs_grad(wi) ? t.adjoint(wi).data() : nullptr;
    double* gb = t.needs_grad(bi) ? t.adjoint(bi).data() : nullptr;
    for (std::size_t n = 0; n < n_batch; ++n) {
      for (std::size_t z = 0; z < caps; ++z) {
        const std::size_t uoff = (n * caps + z) * in_dim;
        for (std::size_t c = 0; c < classes; ++c) {
          for (std::size_t d = 0; d < out_dim; ++d) {
            const double gd = g[((n * caps + z) * classes + c) * out_dim + d];
            const std::size_t woff = ((z * classes + c) * out_dim + d) * in_dim;
            if (gb) gb[c * out_dim + d] += gd;
            if (gu) {
              for (std::size_t k = 0; k < in_dim; ++k) gu[uoff + k] += gd * wp[woff + k];
            }
            if (gw) {
              for (std::size_t k = 0; k < in_dim; ++k) gw[woff + k] += gd * up[uoff + k];
            }
          }
        }
      }
    }
  });
}

Var routing_combine(Var coeff, Var u_hat) {
  Tape& tape = same_tape(coeff, u_hat);
  const Tensor& cv = coeff.value();
  const Tensor& uv = u_hat.value();
  expect_rank(cv, 3, "routing_combine coefficients");
  expect_rank(uv, 4, "routing_combine predictions");
  const std::size_t n_batch = uv.dim(0), caps = uv.dim(1), classes = uv.dim(2), dim = uv.dim(3);
  if (cv.dim(0) != n_batch || cv.dim(1) != caps || cv.dim(2) != classes) {
    throw DimensionError("routing_combine: coefficients " + shape_string(cv.shape()) + " vs predictions " +
                         shape_string(uv.shape()));
  }
  Tensor out({n_batch, classes, dim});
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t z = 0; z < caps; ++z) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double w = cv[(n * caps + z) * classes + c];
        const double* src = uv.data().data() + ((n * caps + z) * classes + c) * dim;
        double* dst = out.data().data() + (n * classes + c) * dim;
        for (std::size_t d = 0; d < dim; ++d) dst[d] += w * src[d];
      }
    }
  }
  const std::size_t ci = coeff.id(), ui = u_hat.id();
  return tape.record(std::move(out), {ci, ui}, [=](Tape& t, std::size_t self) {
    const double* g = t.adjoint(self).data();
    const double* cp = t.value(ci).data().data();
    const double* up = t.value(ui).data().data();
    double* gc = t.needs_grad(ci) ? t.adjoint(ci).data() : nullptr;
    double* gu = t.needs_grad(ui) ? t.adjoint(ui).data() : nullptr;
    for (std::size_t n = 0; n < n_batch; ++n) {
      for (std::size_t z = 0; z < caps; ++z) {
        for (std::size_t c = 0; c < classes; ++c) {
          const std::size_t cidx = (n * caps + z) * classes + c;
          const double* gs = g + (n * classes + c) * dim;
          const std::size_t uoff = cidx * dim;
          if (gc) {
            double acc = 0.0;
            for (std::size_t d = 0; d < dim; ++d) acc += gs[d] * up[uoff + d];
            gc[cidx] += acc;
          }
          if (gu) {
            for (std::size_t d = 0; d < dim; ++d) gu[uoff + d] += cp[cidx] * gs[d];
          }
        }
      }
    }
  });
}

Var routing_agreement(Var v, Var u_hat) {
  Tape& tape = same_tape(v, u_hat);
  const Tensor& vv = v.value();
  const Tensor& uv = u_hat.value();
  expect_rank(vv, 3, "routing_agreement activations");
  expect_rank(uv, 4, "routing_agreement predictions");
  const std::size_t n_batch = uv.dim(0), caps = uv.dim(1), classes = uv.dim(2), dim = uv.dim(3);
  if (vv.dim(0) != n_batch || vv.dim(1) != classes || vv.dim(2) != dim) {
    throw DimensionError("routing_agreement: activations " + shape_string(vv.shape()) + " vs predictions " +
                         shape_string(uv.shape()));
  }
  Tensor out({n_batch, caps, classes});
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t z = 0; z < caps; ++z) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double* a = vv.data().data() + (n * classes + c) * dim;
        const double* b = uv.data().data() + ((n * caps + z) * classes + c) * dim;
        double acc = 0.0;
        for (std::size_t d = 0; d < dim; ++d) acc += a[d] * b[d];
        out[(n * caps + z) * classes + c] = acc;
      }
    }
  }
  const std::size_t vi = v.id(), ui = u_hat.id();
  return tape.record(std::move(out), {vi, ui}, [=](Tape& t, std::size_t self) {
    const double* g = t.adjoint(self).data();
    const double* vp = t.value(vi).data().data();
    const double* up = t.value(ui).data().data();
    double* gv = t.needs_grad(vi) ? t.adjoint(vi).data() : nullptr;
    double* gu = t.needs_grad(ui) ? t.adjoint(ui).data() : nullptr;
    for (std::size_t n = 0; n < n_batch; ++n) {
      for (std::size_t z = 0; z < caps; ++z) {
        for (std::size_t c = 0; c < classes; ++c) {
          const double gz = g[(n * caps + z) * classes + c];
          const std::size_t voff = (n * classes + c) * dim;
          const std::size_t uoff = ((n * caps + z) * classes + c) * dim;
          if (gv) {
            for (std::size_t d = 0; d < dim; ++d) gv[voff + d] += gz * up[uoff + d];
          }
          if (gu) {
            for (std::size_t d = 0; d < dim; ++d) gu[uoff + d] += gz * vp[voff + d];
          }
        }
      }
    }
  });
}

Var mask_capsules(Var v, std::span<const std::size_t> selected) {
  const Tensor& vv = v.value();
  expect_rank(vv, 3, "mask_capsules input");
  const std::size_t n_batch = vv.dim(0), classes = vv.dim(1), dim = vv.dim(2);
  if (selected.size() != n_batch) throw DimensionError("mask_capsules: one selection per sample required");
  std::vector<std::size_t> picks(selected.begin(), selected.end());
  for (std::size_t p : picks) {
    if (p >= classes) throw ArgumentError("mask_capsules: selected class out of range");
  }
  Tensor out({n_batch, classes * dim});
  for (std::size_t n = 0; n < n_batch; ++n) {
    const std::size_t off = (n * classes + picks[n]) * dim;
    for (std::size_t d = 0; d < dim; ++d) out[n * classes * dim + picks[n] * dim + d] = vv[off + d];
  }
  const std::size_t vi = v.id();
  return v.tape().record(std::move(out), {vi},
                         [vi, n_batch, classes, dim, picks = std::move(picks)](Tape& t, std::size_t self) {
                           const double* g = t.adjoint(self).data();
                           double* gv = t.adjoint(vi).data();
                           for (std::size_t n = 0; n < n_batch; ++n) {
                             const std::size_t off = (n * classes + picks[n]) * dim;
                             for (std::size_t d = 0; d < dim; ++d) gv[off + d] += g[off + d];
                           }
                         });
}

// ---- generic -----------------------------------------------------------------

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  expect_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.clear_grad();
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    std::span<double> g = t.adjoint(self);
    for (std::size_t id : {ai, bi}) {
      if (!t.needs_grad(id)) continue;
      std::span<double> gx = t.adjoint(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  expect_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    std::span<double> g = t.adjoint(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (t.needs_grad(ai)) {
      std::span<double> ga = t.adjoint(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(bi)) {
      std::span<double> gb = t.adjoint(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var x, double factor) {
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x.value()[i];
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, factor](Tape& t, std::size_t self) {
    std::span<double> g = t.adjoint(self);
    std::span<double> gx = t.adjoint(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  const std::size_t xi = x.id();
  return x.tape().record(Tensor({1}, {total}), {xi}, [xi](Tape& t, std::size_t self) {
    const double g = t.adjoint(self)[0];
    for (double& gx : t.adjoint(xi)) gx += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi](Tape& t, std::size_t self) {
    std::span<double> g = t.adjoint(self);
    std::span<double> gx = t.adjoint(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var mse(Var prediction, const Tensor& target) {
  const Tensor& pv = prediction.value();
  if (pv.size() != target.size()) {
    throw DimensionError("mse: prediction " + shape_string(pv.shape()) + " vs target " + shape_string(target.shape()));
  }
  double total = 0.0;
  std::vector<double> diff(pv.size());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    diff[i] = pv[i] - target[i];
    total += diff[i] * diff[i];
  }
  const double inv_n = 1.0 / static_cast<double>(pv.size());
  const std::size_t pi = prediction.id();
  return prediction.tape().record(Tensor({1}, {total * inv_n}), {pi},
                                  [pi, inv_n, diff = std::move(diff)](Tape& t, std::size_t self) {
                                    const double g = t.adjoint(self)[0];
                                    std::span<double> gp = t.adjoint(pi);
                                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += 2.0 * inv_n * diff[i] * g;
                                  });
}

}  // namespace cropdoc
