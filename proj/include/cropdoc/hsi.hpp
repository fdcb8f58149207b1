#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cropdoc/tensor.hpp"

namespace cropdoc {

enum CropClass : std::uint8_t { kHealthy = 0, kLateBlight = 1, kSoil = 2, kBackground = 3 };
inline constexpr std::uint8_t kUnlabeled = 255;
inline constexpr std::size_t kDefaultClasses = 4;

/// H x W x B reflectance raster (row-major, band fastest) with per-band
/// wavelengths in nm.
class HsiCube {
 public:
  HsiCube() = default;
  // Throws ArgumentError unless wavelengths are strictly increasing and every
  // reflectance value lies in [0, 1].
  HsiCube(std::size_t height, std::size_t width, std::vector<double> wavelengths, std::vector<float> reflectance);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t bands() const { return wavelengths_.size(); }
  std::span<const double> wavelengths() const { return wavelengths_; }
  std::span<const float> reflectance() const { return reflectance_; }
  std::span<const float> pixel(std::size_t row, std::size_t col) const {
    return std::span<const float>(reflectance_).subspan((row * width_ + col) * bands(), bands());
  }
  float at(std::size_t row, std::size_t col, std::size_t band) const {
    return reflectance_[(row * width_ + col) * bands() + band];
  }

  bool operator==(const HsiCube&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<double> wavelengths_;
  std::vector<float> reflectance_;
};

/// Per-pixel class ids; kUnlabeled marks pixels without ground truth.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(std::size_t height, std::size_t width, std::uint8_t fill = kUnlabeled);
  LabelMap(std::size_t height, std::size_t width, std::vector<std::uint8_t> ids);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::span<const std::uint8_t> ids() const { return ids_; }
  std::uint8_t at(std::size_t row, std::size_t col) const { return ids_[row * width_ + col]; }
  void set(std::size_t row, std::size_t col, std::uint8_t id) { ids_[row * width_ + col] = id; }
  bool labeled(std::size_t row, std::size_t col) const { return at(row, col) != kUnlabeled; }
  std::size_t labeled_count() const;
  // Per-class pixel counts, unlabeled pixels excluded.
  std::vector<std::size_t> histogram(std::size_t n_class) const;
  // Throws ArgumentError if any labeled id is >= n_class.
  void validate(std::size_t n_class) const;

  bool operator==(const LabelMap&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> ids_;
};

/// A labeled pixel location.
struct Sample {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t label = 0;
};

struct Patch {
  Tensor data;  // [d, d, B]
  std::size_t label = 0;
  std::size_t row = 0;  // center pixel
  std::size_t col = 0;
};

/// Reflect-101 border index: -1 -> 1, n -> n - 2.
std::size_t mirror_index(std::ptrdiff_t i, std::size_t n);

/// Writes the d x d x B neighborhood centered at (row, col) into `out`,
/// mirror-padding across the raster border.
void fill_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t d, std::span<double> out);
Tensor extract_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t d);

/// Labeled pixels in row-major order.
std::vector<Sample> labeled_samples(const LabelMap& labels);

/// One patch per labeled pixel in row-major order. Throws ConfigError for an
/// even d and DimensionError if d exceeds the raster or the shapes differ.
std::vector<Patch> extract_patches(const HsiCube& cube, const LabelMap& labels, std::size_t d);

/// Stacks the patches for `samples` into a [N, d, d, B] batch.
Tensor assemble_batch(const HsiCube& cube, std::span<const Sample> samples, std::size_t d);

/// Rotates a [..., d, d, B] patch batch by 90 degrees counter-clockwise in
/// the spatial plane.
Tensor rotate90(const Tensor& batch);

struct SplitScheme {
  enum class Kind { kfold, holdout };
  Kind kind = Kind::kfold;
  std::size_t k = 5;
  double fraction = 0.2;

  static SplitScheme kfold(std::size_t k) { return {Kind::kfold, k, 0.0}; }
  static SplitScheme holdout(double fraction) { return {Kind::holdout, 0, fraction}; }
};

/// Stratified, seed-deterministic partition of item indices.
/// kfold(k): k disjoint folds covering every item, sizes within one of each
/// other per class. holdout(f): {train, held_out} with round(f * n_c) of each
/// class held out.
std::vector<std::vector<std::size_t>> split_dataset(std::span<const std::size_t> labels, const SplitScheme& scheme,
                                                    std::uint64_t seed);

// ---- file I/O ---------------------------------------------------------------
//
// Cube:  "HSIC\n" + one-line JSON header {"version","height","width","bands",
//        "wavelengths"} + "\n" + H*W*B little-endian float32 (row, col, band).
// Label: "HSIL\n" + one-line JSON header {"version","height","width"} + "\n"
//        + H*W uint8 class ids (255 = unlabeled).

void write_cube(const HsiCube& cube, const std::filesystem::path& path);
HsiCube read_cube(const std::filesystem::path& path);
void write_labels(const LabelMap& labels, const std::filesystem::path& path);
LabelMap read_labels(const std::filesystem::path& path);

}  // namespace cropdoc
