#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cropdoc/hsi.hpp"
#include "cropdoc/keyvalue.hpp"

namespace cropdoc {

/// Parameters of a synthetic potato-field scene.
///
/// Class layout comes from thresholded Gaussian random fields with unit
/// marginal variance: a pixel is crop with probability crop_fraction; crop
/// pixels are diseased with probability blob_density; non-crop pixels are
/// soil with probability soil_fraction, background otherwise.
struct SyntheticSceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t bands = 125;
  double wavelength_min = 450.0;
  double wavelength_max = 950.0;
  // n_class rows of `bands` reflectances; empty selects default_prototypes().
  std::vector<std::vector<double>> prototypes;
  double sigma = 0.02;               // spectral noise standard deviation
  double correlation_length = 4.0;   // spatial noise smoothing, pixels
  double region_scale = 8.0;         // class-region smoothing, pixels
  double crop_fraction = 0.6;
  double soil_fraction = 0.5;
  double blob_density = 0.3;

  // Throws ConfigError for out-of-range parameters or prototypes.
  void validate() const;
  std::vector<double> wavelengths() const;
};

struct Scene {
  HsiCube cube;
  LabelMap labels;
};

/// Healthy canopy, late-blight canopy, soil and background reflectance
/// curves sampled at the given wavelengths.
std::vector<std::vector<double>> default_prototypes(const std::vector<double>& wavelengths);

/// Expected per-class pixel fraction implied by the spec's layout
/// probabilities.
std::vector<double> expected_class_fractions(const SyntheticSceneSpec& spec);

/// Deterministic in (spec, seed).
Scene generate_scene(const SyntheticSceneSpec& spec, std::uint64_t seed);

/// Zero-mean, unit-variance Gaussian random field smoothed with a Gaussian
/// kernel of the given length (white noise when length <= 0).
std::vector<double> gaussian_field(std::size_t height, std::size_t width, double length, std::uint64_t seed);

/// Inverse standard normal CDF; +/-infinity at 1 and 0.
double normal_quantile(double p);

SyntheticSceneSpec read_scene_spec(const KeyValues& kv);

}  // namespace cropdoc
