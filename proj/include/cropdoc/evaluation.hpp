#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cropdoc/capsnet.hpp"
#include "cropdoc/hsi.hpp"

namespace cropdoc {

/// Square count table; rows are predicted classes, columns actual classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_class);
  // rows[p][t]; throws ArgumentError unless the table is square.
  explicit ConfusionMatrix(const std::vector<std::vector<std::size_t>>& rows);

  std::size_t n_class() const { return n_; }
  std::size_t at(std::size_t predicted, std::size_t actual) const { return counts_[predicted * n_ + actual]; }
  void add(std::size_t predicted, std::size_t actual, std::size_t count = 1);

  std::size_t total() const;
  std::size_t trace() const;
  std::size_t row_sum(std::size_t predicted) const;
  std::size_t col_sum(std::size_t actual) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> counts_;
};

/// Pixels unlabeled in either map are skipped. Throws ArgumentError on a
/// shape mismatch, an id >= n_class, or when no pixel is labeled in both.
ConfusionMatrix confusion(const LabelMap& predicted, const LabelMap& truth, std::size_t n_class = kDefaultClasses);
ConfusionMatrix confusion(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                          std::size_t n_class);

/// One-vs-rest statistics; a zero denominator leaves the value empty.
struct ClassMetrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::optional<double> sensitivity;   // TP / (TP + FN)
  std::optional<double> specificity;   // TN / (TN + FP)
  std::optional<double> user_accuracy; // TP / (TP + FP)
  std::optional<double> producer_accuracy;  // TP / (TP + FN)
};

ClassMetrics class_metrics(const ConfusionMatrix& cm, std::size_t cls);

struct OverallMetrics {
  double oa = 0.0;
  std::optional<double> aa;     // mean of the defined producer's accuracies
  std::optional<double> kappa;  // empty when expected agreement is 1
  double expected_agreement = 0.0;
};

/// Throws ArgumentError for an empty matrix.
OverallMetrics overall_metrics(const ConfusionMatrix& cm);

struct McNemarResult {
  std::size_t n01 = 0;  // A correct, B wrong
  std::size_t n10 = 0;  // A wrong, B correct
  std::optional<double> chi_square;  // continuity corrected; empty if n01 + n10 = 0
  bool significant_05 = false;
  bool significant_01 = false;
};

inline constexpr double kChiSquare05 = 3.841;
inline constexpr double kChiSquare01 = 6.635;

McNemarResult mcnemar_from_counts(std::size_t n01, std::size_t n10);
/// Throws ArgumentError on length mismatch.
McNemarResult mcnemar(std::span<const std::size_t> pred_a, std::span<const std::size_t> pred_b,
                      std::span<const std::size_t> truth);
/// Map form; pixels unlabeled in the truth are skipped.
McNemarResult mcnemar(const LabelMap& pred_a, const LabelMap& pred_b, const LabelMap& truth);

struct MapPrediction {
  LabelMap map;
  std::vector<double> norms;  // H * W * n_class class-capsule norms
};

/// Classifies every pixel from its mirror-padded patch. Rows are sharded
/// over `threads`; the result does not depend on the thread count.
MapPrediction predict_map(const CapsNet& model, const HsiCube& cube, std::size_t threads = 1,
                          std::size_t batch_size = 256);
LabelMap assemble_map(const CapsNet& model, const HsiCube& cube, std::size_t threads = 1);

struct GridCell {
  std::size_t cell_row = 0, cell_col = 0;
  std::size_t row0 = 0, col0 = 0, rows = 0, cols = 0;
  bool partial = false;  // truncated at the raster edge
  std::optional<double> truth_ratio;
  std::optional<double> predicted_ratio;
  std::optional<double> difference;  // |predicted - truth|
};

struct PatchGridReport {
  std::size_t cell_px = 0;
  std::size_t grid_rows = 0, grid_cols = 0;
  std::vector<GridCell> cells;  // row-major
  std::optional<double> mean_difference;
  std::optional<double> max_difference;
};

/// Disease ratio per cell = late-blight / (healthy + late-blight) pixels.
/// Throws ArgumentError for a shape mismatch or cell_px outside
/// [1, min(H, W)].
PatchGridReport patch_aggregate(const LabelMap& predicted, const LabelMap& truth, std::size_t cell_px);

// ---- reports -------------------------------------------------------------------

/// Header: class,sensitivity,specificity,user_accuracy,producer_accuracy,oa,aa,kappa
/// One row per class, then an "overall" row. Undefined values print as NA.
void write_metrics_csv(const ConfusionMatrix& cm, std::ostream& out);
/// key=value lines: n01, n10, chi_square, significant_0.05, significant_0.01.
void write_mcnemar_report(const McNemarResult& result, std::ostream& out);
void write_grid_csv(const PatchGridReport& report, std::ostream& out);
/// pixel_row,pixel_col,norm_class_0..; one row per pixel labeled in `mask`
/// (every pixel when mask is null), row-major.
void write_norms_csv(const MapPrediction& prediction, std::size_t n_class, const LabelMap* mask, std::ostream& out);

// ---- class raster --------------------------------------------------------------

struct Rgb {
  unsigned char r, g, b;
  bool operator==(const Rgb&) const = default;
};

/// Healthy, late blight, soil, background, then the unlabeled color.
std::span<const Rgb> map_palette();

/// Binary PPM (P6) plus a legend at `path` + ".legend.txt". Throws
/// ArgumentError for ids outside the palette.
void export_map(const LabelMap& map, const std::filesystem::path& path);
/// Inverse of export_map; throws FormatError for colors outside the palette.
LabelMap read_map(const std::filesystem::path& path);

}  // namespace cropdoc
