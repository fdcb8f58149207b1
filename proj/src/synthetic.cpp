#include "cropdoc/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cropdoc/errors.hpp"
#include "cropdoc/random.hpp"

namespace cropdoc {

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double bump(double x, double center, double width) {
  const double z = (x - center) / width;
  return std::exp(-0.5 * z * z);
}

void check_fraction(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
}

// Field streams per scene seed.
enum Stream : std::uint64_t { kCropField = 0, kDiseaseField = 1, kSoilField = 2, kNoiseBase = 16 };

}  // namespace

void SyntheticSceneSpec::validate() const {
  if (height == 0 || width == 0 || bands == 0) throw ConfigError("scene extents must be positive");
  if (!(wavelength_max > wavelength_min) && bands > 1) throw ConfigError("wavelength range must be increasing");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be non-negative");
  if (!(correlation_length >= 0.0)) throw ConfigError("correlation_length must be non-negative");
  if (!(region_scale >= 0.0)) throw ConfigError("region_scale must be non-negative");
  check_fraction(crop_fraction, "crop_fraction");
  check_fraction(soil_fraction, "soil_fraction");
  check_fraction(blob_density, "blob_density");
  if (!prototypes.empty()) {
    if (prototypes.size() != kDefaultClasses) {
      throw ConfigError("expected " + std::to_string(kDefaultClasses) + " prototypes, got " +
                        std::to_string(prototypes.size()));
    }
    for (std::size_t c = 0; c < prototypes.size(); ++c) {
      if (prototypes[c].size() != bands) {
        throw ConfigError("prototype " + std::to_string(c) + " has " + std::to_string(prototypes[c].size()) +
                          " bands, expected " + std::to_string(bands));
      }
      for (double v : prototypes[c]) {
        if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("prototype " + std::to_string(c) + " leaves [0, 1]");
      }
    }
  }
}

std::vector<double> SyntheticSceneSpec::wavelengths() const {
  std::vector<double> wl(bands);
  for (std::size_t b = 0; b < bands; ++b) {
    wl[b] = bands == 1 ? wavelength_min
                       : wavelength_min + (wavelength_max - wavelength_min) * static_cast<double>(b) /
                                              static_cast<double>(bands - 1);
  }
  return wl;
}

std::vector<std::vector<double>> default_prototypes(const std::vector<double>& wavelengths) {
  std::vector<std::vector<double>> protos(kDefaultClasses, std::vector<double>(wavelengths.size()));
  for (std::size_t b = 0; b < wavelengths.size(); ++b) {
    const double wl = wavelengths[b];
    const double t = std::clamp((wl - 450.0) / 500.0, 0.0, 1.0);
    // Green peak, chlorophyll well, steep red edge and a high NIR plateau.
    protos[kHealthy][b] = 0.04 + 0.05 * bump(wl, 550.0, 30.0) + 0.46 * logistic((wl - 715.0) / 12.0);
    // Lesions flatten the green peak, raise red and depress NIR.
    protos[kLateBlight][b] =
        0.07 + 0.025 * bump(wl, 560.0, 35.0) + 0.04 * bump(wl, 670.0, 25.0) + 0.24 * logistic((wl - 705.0) / 18.0);
    protos[kSoil][b] = 0.12 + 0.16 * t + 0.02 * bump(wl, 900.0, 60.0);
    protos[kBackground][b] = 0.03 + 0.02 * t;
  }
  return protos;
}

std::vector<double> expected_class_fractions(const SyntheticSceneSpec& spec) {
  std::vector<double> f(kDefaultClasses);
  f[kHealthy] = spec.crop_fraction * (1.0 - spec.blob_density);
  f[kLateBlight] = spec.crop_fraction * spec.blob_density;
  f[kSoil] = (1.0 - spec.crop_fraction) * spec.soil_fraction;
  f[kBackground] = (1.0 - spec.crop_fraction) * (1.0 - spec.soil_fraction);
  return f;
}

double normal_quantile(double p) {
  if (p <= 0.0) return -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return std::numeric_limits<double>::infinity();
  // Bisection on Phi(x) = erfc(-x / sqrt 2) / 2; monotone, 200 halvings
  // exhaust double precision on [-40, 40].
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

std::vector<double> gaussian_field(std::size_t height, std::size_t width, double length, std::uint64_t seed) {
  Rng rng(seed);
  if (length <= 0.0) {
    std::vector<double> white(height * width);
    for (double& v : white) v = rng.normal();
    return white;
  }
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * length));
  std::vector<double> kernel(2 * radius + 1);
  double energy = 0.0;
  for (std::size_t i = 0; i < kernel.size(); ++i) {
    const double x = static_cast<double>(i) - static_cast<double>(radius);
    kernel[i] = std::exp(-0.5 * x * x / (length * length));
    energy += kernel[i] * kernel[i];
  }
  // Unit sum of squares per axis keeps the separable output at unit variance.
  for (double& k : kernel) k /= std::sqrt(energy);

  // White noise on a padded domain so every output pixel sees a full kernel.
  const std::size_t ph = height + 2 * radius, pw = width + 2 * radius;
  std::vector<double> white(ph * pw);
  for (double& v : white) v = rng.normal();

  std::vector<double> rows(ph * width, 0.0);
  for (std::size_t r = 0; r < ph; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kernel.size(); ++k) acc += kernel[k] * white[r * pw + c + k];
      rows[r * width + c] = acc;
    }
  }
  std::vector<double> out(height * width, 0.0);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kernel.size(); ++k) acc += kernel[k] * rows[(r + k) * width + c];
      out[r * width + c] = acc;
    }
  }
  return out;
}

Scene generate_scene(const SyntheticSceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width, bands = spec.bands;
  const std::vector<double> wl = spec.wavelengths();
  const auto protos = spec.prototypes.empty() ? default_prototypes(wl) : spec.prototypes;
  for (const auto& p : protos) {
    for (double v : p) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("prototype reflectance leaves [0, 1]");
    }
  }

  // P(field > quantile(1 - p)) = p for a unit normal field.
  const double crop_cut = normal_quantile(1.0 - spec.crop_fraction);
  const double disease_cut = normal_quantile(1.0 - spec.blob_density);
  const double soil_cut = normal_quantile(1.0 - spec.soil_fraction);
  const auto crop = gaussian_field(h, w, spec.region_scale, derive_seed(seed, kCropField));
  const auto disease = gaussian_field(h, w, 0.5 * spec.region_scale, derive_seed(seed, kDiseaseField));
  const auto soil = gaussian_field(h, w, spec.region_scale, derive_seed(seed, kSoilField));

  LabelMap labels(h, w, kBackground);
  for (std::size_t i = 0; i < h * w; ++i) {
    std::uint8_t id;
    if (crop[i] > crop_cut) {
      id = disease[i] > disease_cut ? kLateBlight : kHealthy;
    } else {
      id = soil[i] > soil_cut ? kSoil : kBackground;
    }
    labels.set(i / w, i % w, id);
  }

  std::vector<float> values(h * w * bands);
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto& proto = protos[labels.ids()[i]];
    for (std::size_t b = 0; b < bands; ++b) values[i * bands + b] = static_cast<float>(proto[b]);
  }
  if (spec.sigma > 0.0) {
    for (std::size_t b = 0; b < bands; ++b) {
      const auto noise = gaussian_field(h, w, spec.correlation_length, derive_seed(seed, kNoiseBase + b));
      for (std::size_t i = 0; i < h * w; ++i) {
        const auto& proto = protos[labels.ids()[i]];
        const double v = std::clamp(proto[b] + spec.sigma * noise[i], 0.0, 1.0);
        values[i * bands + b] = static_cast<float>(v);
      }
    }
  }
  return Scene{HsiCube(h, w, wl, std::move(values)), std::move(labels)};
}

SyntheticSceneSpec read_scene_spec(const KeyValues& kv) {
  SyntheticSceneSpec s;
  s.height = kv.get_size("height", s.height);
  s.width = kv.get_size("width", s.width);
  s.bands = kv.get_size("bands", s.bands);
  s.wavelength_min = kv.get_double("wavelength_min", s.wavelength_min);
  s.wavelength_max = kv.get_double("wavelength_max", s.wavelength_max);
  s.sigma = kv.get_double("sigma", s.sigma);
  s.correlation_length = kv.get_double("correlation_length", s.correlation_length);
  s.region_scale = kv.get_double("region_scale", s.region_scale);
  s.crop_fraction = kv.get_double("crop_fraction", s.crop_fraction);
  s.soil_fraction = kv.get_double("soil_fraction", s.soil_fraction);
  s.blob_density = kv.get_double("blob_density", s.blob_density);
  std::vector<std::vector<double>> protos;
  for (std::size_t c = 0; c < kDefaultClasses; ++c) {
    if (auto p = kv.get_list("prototype_" + std::to_string(c))) protos.push_back(std::move(*p));
  }
  if (!protos.empty()) s.prototypes = std::move(protos);
  return s;
}

}  // namespace cropdoc
