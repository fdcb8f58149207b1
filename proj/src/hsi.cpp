#include "cropdoc/hsi.hpp"

#include <cmath>
#include <map>
#include <string>

#include "cropdoc/errors.hpp"
#include "cropdoc/random.hpp"

namespace cropdoc {

HsiCube::HsiCube(std::size_t height, std::size_t width, std::vector<double> wavelengths,
                 std::vector<float> reflectance)
    : height_(height), width_(width), wavelengths_(std::move(wavelengths)), reflectance_(std::move(reflectance)) {
  if (height_ == 0 || width_ == 0 || wavelengths_.empty()) throw ArgumentError("cube extents must be positive");
  for (std::size_t b = 0; b < wavelengths_.size(); ++b) {
    if (!std::isfinite(wavelengths_[b])) throw ArgumentError("wavelengths must be finite");
    if (b > 0 && !(wavelengths_[b] > wavelengths_[b - 1])) {
      throw ArgumentError("wavelengths must be strictly increasing (band " + std::to_string(b) + ")");
    }
  }
  if (reflectance_.size() != height_ * width_ * wavelengths_.size()) {
    throw ArgumentError("reflectance length does not match H*W*B");
  }
  for (float v : reflectance_) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("reflectance values must lie in [0, 1]");
  }
}

LabelMap::LabelMap(std::size_t height, std::size_t width, std::uint8_t fill)
    : height_(height), width_(width), ids_(height * width, fill) {}

LabelMap::LabelMap(std::size_t height, std::size_t width, std::vector<std::uint8_t> ids)
    : height_(height), width_(width), ids_(std::move(ids)) {
  if (ids_.size() != height_ * width_) throw ArgumentError("label payload length does not match H*W");
}

std::size_t LabelMap::labeled_count() const {
  std::size_t n = 0;
  for (std::uint8_t id : ids_) n += id != kUnlabeled;
  return n;
}

std::vector<std::size_t> LabelMap::histogram(std::size_t n_class) const {
  std::vector<std::size_t> counts(n_class, 0);
  for (std::uint8_t id : ids_) {
    if (id != kUnlabeled && id < n_class) ++counts[id];
  }
  return counts;
}

void LabelMap::validate(std::size_t n_class) const {
  for (std::uint8_t id : ids_) {
    if (id != kUnlabeled && id >= n_class) {
      throw ArgumentError("label id " + std::to_string(id) + " out of range for " + std::to_string(n_class) +
                          " classes");
    }
  }
}

std::size_t mirror_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto last = static_cast<std::ptrdiff_t>(n) - 1;
  while (i < 0 || i > last) {
    if (i < 0) i = -i;
    if (i > last) i = 2 * last - i;
  }
  return static_cast<std::size_t>(i);
}

void fill_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t d, std::span<double> out) {
  const std::size_t bands = cube.bands();
  const auto radius = static_cast<std::ptrdiff_t>(d / 2);
  std::size_t k = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const std::size_t r = mirror_index(static_cast<std::ptrdiff_t>(row) + static_cast<std::ptrdiff_t>(i) - radius,
                                       cube.height());
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t c = mirror_index(
          static_cast<std::ptrdiff_t>(col) + static_cast<std::ptrdiff_t>(j) - radius, cube.width());
      const std::span<const float> px = cube.pixel(r, c);
      for (std::size_t b = 0; b < bands; ++b) out[k++] = px[b];
    }
  }
}

namespace {

void check_patch_extent(const HsiCube& cube, std::size_t d) {
  if (d % 2 == 0) throw ConfigError("patch edge must be odd, got " + std::to_string(d));
  if (d > cube.height() || d > cube.width()) {
    throw DimensionError("patch edge " + std::to_string(d) + " exceeds raster " + std::to_string(cube.height()) +
                         "x" + std::to_string(cube.width()));
  }
}

}  // namespace

Tensor extract_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t d) {
  check_patch_extent(cube, d);
  if (row >= cube.height() || col >= cube.width()) throw ArgumentError("patch center outside the raster");
  Tensor out({d, d, cube.bands()});
  fill_patch(cube, row, col, d, out.data());
  return out;
}

std::vector<Sample> labeled_samples(const LabelMap& labels) {
  std::vector<Sample> out;
  for (std::size_t r = 0; r < labels.height(); ++r) {
    for (std::size_t c = 0; c < labels.width(); ++c) {
      if (labels.labeled(r, c)) out.push_back({r, c, labels.at(r, c)});
    }
  }
  return out;
}

std::vector<Patch> extract_patches(const HsiCube& cube, const LabelMap& labels, std::size_t d) {
  check_patch_extent(cube, d);
  if (cube.height() != labels.height() || cube.width() != labels.width()) {
    throw DimensionError("cube and label map extents differ");
  }
  std::vector<Patch> out;
  for (const Sample& s : labeled_samples(labels)) {
    Patch p;
    p.data = Tensor({d, d, cube.bands()});
    fill_patch(cube, s.row, s.col, d, p.data.data());
    p.label = s.label;
    p.row = s.row;
    p.col = s.col;
    out.push_back(std::move(p));
  }
  return out;
}

Tensor assemble_batch(const HsiCube& cube, std::span<const Sample> samples, std::size_t d) {
  check_patch_extent(cube, d);
  if (samples.empty()) throw ArgumentError("assemble_batch: empty sample list");
  const std::size_t stride = d * d * cube.bands();
  Tensor batch({samples.size(), d, d, cube.bands()});
  for (std::size_t n = 0; n < samples.size(); ++n) {
    fill_patch(cube, samples[n].row, samples[n].col, d, batch.data().subspan(n * stride, stride));
  }
  return batch;
}

Tensor rotate90(const Tensor& batch) {
  if (batch.rank() < 3) throw DimensionError("rotate90 expects [..., d, d, B]");
  const std::size_t rank = batch.rank();
  const std::size_t d = batch.dim(rank - 3);
  if (batch.dim(rank - 2) != d) throw DimensionError("rotate90 expects square patches");
  const std::size_t bands = batch.dim(rank - 1);
  const std::size_t stride = d * d * bands;
  const std::size_t count = batch.size() / stride;
  Tensor out(batch.shape());
  for (std::size_t n = 0; n < count; ++n) {
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        // Counter-clockwise: out[i][j] = in[j][d-1-i].
        const double* src = batch.data().data() + n * stride + (j * d + (d - 1 - i)) * bands;
        double* dst = out.data().data() + n * stride + (i * d + j) * bands;
        for (std::size_t b = 0; b < bands; ++b) dst[b] = src[b];
      }
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> split_dataset(std::span<const std::size_t> labels, const SplitScheme& scheme,
                                                    std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  Rng rng(seed);
  for (auto& [cls, items] : by_class) rng.shuffle(items);

  if (scheme.kind == SplitScheme::Kind::kfold) {
    if (scheme.k < 2) throw ArgumentError("k-fold split needs k >= 2");
    if (labels.size() < scheme.k) {
      throw ArgumentError("cannot split " + std::to_string(labels.size()) + " items into " +
                          std::to_string(scheme.k) + " folds");
    }
    std::vector<std::vector<std::size_t>> folds(scheme.k);
    // Dealing continues across classes so fold sizes stay within one.
    std::size_t next = 0;
    for (auto& [cls, items] : by_class) {
      for (std::size_t item : items) {
        folds[next].push_back(item);
        next = (next + 1) % scheme.k;
      }
    }
    return folds;
  }

  if (!(scheme.fraction > 0.0 && scheme.fraction < 1.0)) throw ArgumentError("holdout fraction must lie in (0, 1)");
  if (labels.size() < 2) throw ArgumentError("holdout split needs at least two items");
  std::vector<std::vector<std::size_t>> parts(2);
  for (auto& [cls, items] : by_class) {
    const auto held = static_cast<std::size_t>(std::llround(scheme.fraction * static_cast<double>(items.size())));
    for (std::size_t i = 0; i < items.size(); ++i) parts[i < held ? 1 : 0].push_back(items[i]);
  }
  return parts;
}

}  // namespace cropdoc
