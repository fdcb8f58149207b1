#include "cropdoc/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cropdoc/errors.hpp"
#include "cropdoc/keyvalue.hpp"
#include "cropdoc/parallel.hpp"

namespace cropdoc {

namespace {

std::string fmt(const std::optional<double>& v) { return v ? format_double(*v) : "NA"; }

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

constexpr std::array<Rgb, 5> kPalette{{
    {34, 139, 34},    // healthy
    {178, 34, 34},    // late blight
    {160, 110, 60},   // soil
    {40, 40, 40},     // background
    {255, 255, 255},  // unlabeled
}};
constexpr std::array<const char*, 4> kClassNames{"healthy", "late_blight", "soil", "background"};

std::size_t palette_slot(std::uint8_t id) {
  if (id == kUnlabeled) return kPalette.size() - 1;
  if (id >= kPalette.size() - 1) throw ArgumentError("class id " + std::to_string(id) + " has no palette color");
  return id;
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::size_t n_class) : n_(n_class), counts_(n_class * n_class, 0) {
  if (n_class == 0) throw ArgumentError("confusion matrix needs at least one class");
}

ConfusionMatrix::ConfusionMatrix(const std::vector<std::vector<std::size_t>>& rows) : ConfusionMatrix(rows.size()) {
  for (std::size_t p = 0; p < n_; ++p) {
    if (rows[p].size() != n_) throw ArgumentError("confusion matrix rows must be square");
    for (std::size_t t = 0; t < n_; ++t) counts_[p * n_ + t] = rows[p][t];
  }
}

void ConfusionMatrix::add(std::size_t predicted, std::size_t actual, std::size_t count) {
  if (predicted >= n_ || actual >= n_) throw ArgumentError("class id out of range for confusion matrix");
  counts_[predicted * n_ + actual] += count;
}

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (std::size_t i = 0; i < n_; ++i) t += at(i, i);
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t predicted) const {
  std::size_t s = 0;
  for (std::size_t t = 0; t < n_; ++t) s += at(predicted, t);
  return s;
}

std::size_t ConfusionMatrix::col_sum(std::size_t actual) const {
  std::size_t s = 0;
  for (std::size_t p = 0; p < n_; ++p) s += at(p, actual);
  return s;
}

ConfusionMatrix confusion(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                          std::size_t n_class) {
  if (predicted.size() != truth.size()) throw ArgumentError("prediction and truth lengths differ");
  if (predicted.empty()) throw ArgumentError("no samples to compare");
  ConfusionMatrix cm(n_class);
  for (std::size_t i = 0; i < predicted.size(); ++i) cm.add(predicted[i], truth[i]);
  return cm;
}

ConfusionMatrix confusion(const LabelMap& predicted, const LabelMap& truth, std::size_t n_class) {
  if (predicted.height() != truth.height() || predicted.width() != truth.width()) {
    throw ArgumentError("prediction and truth maps differ in shape");
  }
  ConfusionMatrix cm(n_class);
  const auto p = predicted.ids();
  const auto t = truth.ids();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == kUnlabeled || t[i] == kUnlabeled) continue;
    cm.add(p[i], t[i]);
  }
  if (cm.total() == 0) throw ArgumentError("prediction and truth share no labeled pixel");
  return cm;
}

ClassMetrics class_metrics(const ConfusionMatrix& cm, std::size_t cls) {
  if (cls >= cm.n_class()) throw ArgumentError("class id out of range");
  ClassMetrics m;
  m.tp = cm.at(cls, cls);
  m.fp = cm.row_sum(cls) - m.tp;
  m.fn = cm.col_sum(cls) - m.tp;
  m.tn = cm.total() - m.tp - m.fp - m.fn;
  m.sensitivity = ratio(m.tp, m.tp + m.fn);
  m.specificity = ratio(m.tn, m.tn + m.fp);
  m.user_accuracy = ratio(m.tp, m.tp + m.fp);
  m.producer_accuracy = m.sensitivity;
  return m;
}

OverallMetrics overall_metrics(const ConfusionMatrix& cm) {
  const std::size_t total = cm.total();
  if (total == 0) throw ArgumentError("metrics need a non-empty confusion matrix");
  OverallMetrics out;
  const double n = static_cast<double>(total);
  out.oa = static_cast<double>(cm.trace()) / n;
  double pa_sum = 0.0;
  std::size_t defined = 0;
  double pe = 0.0;
  for (std::size_t c = 0; c < cm.n_class(); ++c) {
    if (auto pa = class_metrics(cm, c).producer_accuracy) {
      pa_sum += *pa;
      ++defined;
    }
    pe += static_cast<double>(cm.row_sum(c)) * static_cast<double>(cm.col_sum(c));
  }
  pe /= n * n;
  out.expected_agreement = pe;
  if (defined) out.aa = pa_sum / static_cast<double>(defined);
  if (pe < 1.0) out.kappa = (out.oa - pe) / (1.0 - pe);
  return out;
}

McNemarResult mcnemar_from_counts(std::size_t n01, std::size_t n10) {
  McNemarResult r;
  r.n01 = n01;
  r.n10 = n10;
  if (n01 + n10 == 0) return r;
  const double diff = std::abs(static_cast<double>(n01) - static_cast<double>(n10)) - 1.0;
  const double chi = diff * diff / static_cast<double>(n01 + n10);
  r.chi_square = chi;
  r.significant_05 = chi > kChiSquare05;
  r.significant_01 = chi > kChiSquare01;
  return r;
}

McNemarResult mcnemar(std::span<const std::size_t> a, std::span<const std::size_t> b,
                      std::span<const std::size_t> truth) {
  if (a.size() != b.size() || a.size() != truth.size()) throw ArgumentError("McNemar inputs differ in length");
  std::size_t n01 = 0, n10 = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool ca = a[i] == truth[i], cb = b[i] == truth[i];
    n01 += ca && !cb;
    n10 += !ca && cb;
  }
  return mcnemar_from_counts(n01, n10);
}

McNemarResult mcnemar(const LabelMap& a, const LabelMap& b, const LabelMap& truth) {
  if (a.height() != truth.height() || a.width() != truth.width() || b.height() != truth.height() ||
      b.width() != truth.width()) {
    throw ArgumentError("McNemar maps differ in shape");
  }
  std::vector<std::size_t> va, vb, vt;
  for (std::size_t i = 0; i < truth.ids().size(); ++i) {
    if (truth.ids()[i] == kUnlabeled) continue;
    va.push_back(a.ids()[i]);
    vb.push_back(b.ids()[i]);
    vt.push_back(truth.ids()[i]);
  }
  return mcnemar(va, vb, vt);
}

MapPrediction predict_map(const CapsNet& model, const HsiCube& cube, std::size_t threads, std::size_t batch_size) {
  const NetworkConfig& cfg = model.config();
  if (cube.bands() != cfg.bands) {
    throw DimensionError("cube has " + std::to_string(cube.bands()) + " bands, model expects " +
                         std::to_string(cfg.bands));
  }
  if (batch_size == 0) throw ArgumentError("batch_size must be positive");
  const std::size_t h = cube.height(), w = cube.width(), classes = cfg.n_class;
  std::vector<std::uint8_t> ids(h * w);
  std::vector<double> norms(h * w * classes);
  // Inference treats each sample independently, so batch boundaries and
  // sharding do not change the result.
  parallel_for(h, threads, [&](std::size_t r0, std::size_t r1) {
    std::vector<Sample> pending;
    auto flush = [&] {
      if (pending.empty()) return;
      const auto preds = model.predict(assemble_batch(cube, pending, cfg.patch));
      for (std::size_t i = 0; i < pending.size(); ++i) {
        const std::size_t px = pending[i].row * w + pending[i].col;
        ids[px] = static_cast<std::uint8_t>(preds[i].label);
        std::copy(preds[i].norms.begin(), preds[i].norms.end(), norms.begin() + static_cast<std::ptrdiff_t>(px * classes));
      }
      pending.clear();
    };
    for (std::size_t r = r0; r < r1; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        pending.push_back({r, c, 0});
        if (pending.size() == batch_size) flush();
      }
    }
    flush();
  });
  return MapPrediction{LabelMap(h, w, std::move(ids)), std::move(norms)};
}

LabelMap assemble_map(const CapsNet& model, const HsiCube& cube, std::size_t threads) {
  return predict_map(model, cube, threads).map;
}

PatchGridReport patch_aggregate(const LabelMap& predicted, const LabelMap& truth, std::size_t cell_px) {
  if (predicted.height() != truth.height() || predicted.width() != truth.width()) {
    throw ArgumentError("prediction and truth maps differ in shape");
  }
  const std::size_t h = truth.height(), w = truth.width();
  if (cell_px == 0 || cell_px > std::min(h, w)) {
    throw ArgumentError("grid cell size must lie in [1, " + std::to_string(std::min(h, w)) + "]");
  }
  PatchGridReport rep;
  rep.cell_px = cell_px;
  rep.grid_rows = (h + cell_px - 1) / cell_px;
  rep.grid_cols = (w + cell_px - 1) / cell_px;
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t gr = 0; gr < rep.grid_rows; ++gr) {
    for (std::size_t gc = 0; gc < rep.grid_cols; ++gc) {
      GridCell cell;
      cell.cell_row = gr;
      cell.cell_col = gc;
      cell.row0 = gr * cell_px;
      cell.col0 = gc * cell_px;
      cell.rows = std::min(cell_px, h - cell.row0);
      cell.cols = std::min(cell_px, w - cell.col0);
      cell.partial = cell.rows < cell_px || cell.cols < cell_px;
      std::size_t t_veg = 0, t_dis = 0, p_veg = 0, p_dis = 0;
      for (std::size_t r = cell.row0; r < cell.row0 + cell.rows; ++r) {
        for (std::size_t c = cell.col0; c < cell.col0 + cell.cols; ++c) {
          const auto t = truth.at(r, c), p = predicted.at(r, c);
          t_veg += t == kHealthy || t == kLateBlight;
          t_dis += t == kLateBlight;
          p_veg += p == kHealthy || p == kLateBlight;
          p_dis += p == kLateBlight;
        }
      }
      cell.truth_ratio = ratio(t_dis, t_veg);
      cell.predicted_ratio = ratio(p_dis, p_veg);
      if (cell.truth_ratio && cell.predicted_ratio) {
        cell.difference = std::abs(*cell.predicted_ratio - *cell.truth_ratio);
        sum += *cell.difference;
        ++defined;
        rep.max_difference = std::max(rep.max_difference.value_or(0.0), *cell.difference);
      }
      rep.cells.push_back(cell);
    }
  }
  if (defined) rep.mean_difference = sum / static_cast<double>(defined);
  return rep;
}

void write_metrics_csv(const ConfusionMatrix& cm, std::ostream& out) {
  out << "class,sensitivity,specificity,user_accuracy,producer_accuracy,oa,aa,kappa\n";
  for (std::size_t c = 0; c < cm.n_class(); ++c) {
    const ClassMetrics m = class_metrics(cm, c);
    out << (c < kClassNames.size() ? kClassNames[c] : "class_" + std::to_string(c)) << ',' << fmt(m.sensitivity)
        << ',' << fmt(m.specificity) << ',' << fmt(m.user_accuracy) << ',' << fmt(m.producer_accuracy)
        << ",,,\n";
  }
  const OverallMetrics o = overall_metrics(cm);
  out << "overall,,,,," << format_double(o.oa) << ',' << fmt(o.aa) << ',' << fmt(o.kappa) << '\n';
}

void write_mcnemar_report(const McNemarResult& r, std::ostream& out) {
  out << "n01=" << r.n01 << '\n';
  out << "n10=" << r.n10 << '\n';
  out << "chi_square=" << (r.chi_square ? format_double(*r.chi_square) : "undefined") << '\n';
  out << "significant_0.05=" << (r.significant_05 ? "yes" : "no") << '\n';
  out << "significant_0.01=" << (r.significant_01 ? "yes" : "no") << '\n';
}

void write_grid_csv(const PatchGridReport& rep, std::ostream& out) {
  out << "cell_row,cell_col,row0,col0,rows,cols,partial,truth_ratio,predicted_ratio,abs_difference\n";
  for (const GridCell& c : rep.cells) {
    out << c.cell_row << ',' << c.cell_col << ',' << c.row0 << ',' << c.col0 << ',' << c.rows << ',' << c.cols
        << ',' << (c.partial ? 1 : 0) << ',' << fmt(c.truth_ratio) << ',' << fmt(c.predicted_ratio) << ','
        << fmt(c.difference) << '\n';
  }
  out << "mean,,,,,,,,," << fmt(rep.mean_difference) << '\n';
}

void write_norms_csv(const MapPrediction& pred, std::size_t n_class, const LabelMap* mask, std::ostream& out) {
  if (pred.norms.size() != pred.map.ids().size() * n_class) throw ArgumentError("norm buffer size mismatch");
  if (mask && (mask->height() != pred.map.height() || mask->width() != pred.map.width())) {
    throw ArgumentError("mask and prediction differ in shape");
  }
  out << "pixel_row,pixel_col";
  for (std::size_t c = 0; c < n_class; ++c) out << ",norm_class_" << c;
  out << '\n';
  const std::size_t w = pred.map.width();
  for (std::size_t i = 0; i < pred.map.ids().size(); ++i) {
    if (mask && mask->ids()[i] == kUnlabeled) continue;
    out << i / w << ',' << i % w;
    for (std::size_t c = 0; c < n_class; ++c) out << ',' << format_double(pred.norms[i * n_class + c]);
    out << '\n';
  }
}

std::span<const Rgb> map_palette() { return kPalette; }

void export_map(const LabelMap& map, const std::filesystem::path& path) {
  std::string pixels;
  pixels.reserve(map.ids().size() * 3);
  for (std::uint8_t id : map.ids()) {
    const Rgb c = kPalette[palette_slot(id)];
    pixels.push_back(static_cast<char>(c.r));
    pixels.push_back(static_cast<char>(c.g));
    pixels.push_back(static_cast<char>(c.b));
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << "P6\n" << map.width() << ' ' << map.height() << "\n255\n";
    out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw FormatError("failed writing " + path.string());
  }
  std::ofstream legend(path.string() + ".legend.txt", std::ios::trunc);
  if (!legend) throw FormatError("cannot write legend for " + path.string());
  for (std::size_t i = 0; i < kPalette.size(); ++i) {
    const Rgb c = kPalette[i];
    legend << (i < kClassNames.size() ? std::to_string(i) : std::to_string(kUnlabeled)) << ' '
           << (i < kClassNames.size() ? kClassNames[i] : "unlabeled") << ' ' << int(c.r) << ' ' << int(c.g) << ' '
           << int(c.b) << '\n';
  }
}

LabelMap read_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  if (!(in >> magic >> width >> height >> maxval) || magic != "P6" || maxval != 255 || width == 0 || height == 0) {
    throw FormatError(path.string() + ": not an 8-bit binary PPM");
  }
  in.get();  // single whitespace before the raster
  std::string raster((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raster.size() != width * height * 3) throw FormatError(path.string() + ": raster size mismatch");
  std::vector<std::uint8_t> ids(width * height);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Rgb c{static_cast<unsigned char>(raster[3 * i]), static_cast<unsigned char>(raster[3 * i + 1]),
                static_cast<unsigned char>(raster[3 * i + 2])};
    const auto it = std::find(kPalette.begin(), kPalette.end(), c);
    if (it == kPalette.end()) throw FormatError(path.string() + ": color outside the class palette");
    const auto slot = static_cast<std::size_t>(it - kPalette.begin());
    ids[i] = slot + 1 == kPalette.size() ? kUnlabeled : static_cast<std::uint8_t>(slot);
  }
  return LabelMap(height, width, std::move(ids));
}

}  // namespace cropdoc
