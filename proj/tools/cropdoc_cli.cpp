// cropdoc: scene synthesis, training, prediction, evaluation and depth sweeps.
//
// Exit codes: 0 success, 2 usage or input format problems, 3 numeric failure
// during training.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cropdoc/checkpoint.hpp"
#include "cropdoc/errors.hpp"
#include "cropdoc/evaluation.hpp"
#include "cropdoc/parallel.hpp"
#include "cropdoc/random.hpp"
#include "cropdoc/synthetic.hpp"
#include "cropdoc/training.hpp"

namespace fs = std::filesystem;
using namespace cropdoc;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::uint64_t seed = 42;
  std::size_t threads = 1;
  std::string config;
  std::vector<std::string> sets;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_option("--threads", c.threads, "Worker threads (0 = all cores)")->capture_default_str();
  cmd->add_option("--config", c.config, "key=value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override a configuration key (key=value), repeatable");
  cmd->add_flag("--quiet", c.quiet, "Suppress progress output");
}

// Config file first, then --set overrides in order.
KeyValues load_config(const Common& c) {
  KeyValues kv = c.config.empty() ? KeyValues{} : KeyValues::load(c.config);
  for (const std::string& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw FormatError("--set expects key=value, got '" + s + "'");
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return kv;
}

void reject_unused(const KeyValues& kv) {
  const auto unused = kv.unused();
  if (unused.empty()) return;
  std::string list;
  for (const auto& k : unused) list += (list.empty() ? "" : ", ") + k;
  throw ConfigError("unknown configuration keys: " + list);
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

// Label maps are accepted either as HSIL label files or as class rasters.
LabelMap read_any_map(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] == 'P' && magic[1] == '6') return read_map(path);
  return read_labels(path);
}

const char* class_name(std::size_t c) {
  static const char* names[] = {"healthy", "late_blight", "soil", "background"};
  return c < 4 ? names[c] : "other";
}

// Data-preparation keys shared by train and sweep.
struct DataPlan {
  double val_fraction = 0.2;
  std::size_t max_patches = 0;
  std::size_t max_val_patches = 0;
};

DataPlan read_data_plan(const KeyValues& kv) {
  DataPlan p;
  p.val_fraction = kv.get_double("val_fraction", p.val_fraction);
  p.max_patches = kv.get_size("max_patches", p.max_patches);
  p.max_val_patches = kv.get_size("max_val_patches", p.max_val_patches);
  if (!(p.val_fraction >= 0.0 && p.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  return p;
}

HoldoutSplit plan_split(const std::vector<Sample>& samples, const DataPlan& plan, std::uint64_t seed) {
  HoldoutSplit split;
  if (plan.val_fraction > 0.0) {
    split = holdout_split(samples, plan.val_fraction, derive_seed(seed, 1));
  } else {
    split.train = samples;
  }
  split.train = subsample(split.train, plan.max_patches, derive_seed(seed, 2));
  split.held_out = subsample(split.held_out, plan.max_val_patches, derive_seed(seed, 3));
  return split;
}

struct Dataset {
  HsiCube cube;
  LabelMap labels;
  std::vector<Sample> samples;
};

Dataset load_dataset(const std::string& cube_path, const std::string& label_path, std::size_t n_class) {
  Dataset d{read_cube(cube_path), read_labels(label_path), {}};
  if (d.cube.height() != d.labels.height() || d.cube.width() != d.labels.width()) {
    throw DimensionError("cube is " + std::to_string(d.cube.height()) + "x" + std::to_string(d.cube.width()) +
                         " but labels are " + std::to_string(d.labels.height()) + "x" +
                         std::to_string(d.labels.width()));
  }
  d.labels.validate(n_class);
  d.samples = labeled_samples(d.labels);
  if (d.samples.empty()) throw ArgumentError("label map has no labeled pixels");
  return d;
}

EpochCallback progress(bool quiet, const std::string& prefix) {
  if (quiet) return {};
  return [prefix](const EpochRecord& r) {
    std::fprintf(stderr, "%sepoch %zu loss %.6f val_oa %.4f lr %.3g (%.1fs)\n", prefix.c_str(), r.epoch,
                 r.train_loss, r.val_oa, r.lr, r.seconds);
  };
}

// ---- synth ----------------------------------------------------------------------

struct SynthArgs {
  Common common;
  std::string cube, labels;
};

int cmd_synth(const SynthArgs& a) {
  const KeyValues kv = load_config(a.common);
  const SyntheticSceneSpec spec = read_scene_spec(kv);
  reject_unused(kv);
  const Scene scene = generate_scene(spec, a.common.seed);
  write_cube(scene.cube, a.cube);
  write_labels(scene.labels, a.labels);
  const auto hist = scene.labels.histogram(kDefaultClasses);
  for (std::size_t c = 0; c < hist.size(); ++c) std::cout << class_name(c) << ' ' << hist[c] << '\n';
  std::cout << "total " << scene.labels.ids().size() << '\n';
  return 0;
}

// ---- train ----------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string cube, labels, checkpoint, report;
  std::size_t kfold = 0;
};

int cmd_train(const TrainArgs& a) {
  KeyValues kv = load_config(a.common);
  NetworkConfig base;
  if (!kv.has("bands")) {
    // Band count defaults to the cube's.
    base.bands = read_cube(a.cube).bands();
  }
  const NetworkConfig net = read_network_config(kv, base);
  TrainOptions opts = read_train_options(kv);
  opts.seed = a.common.seed;
  const DataPlan plan = read_data_plan(kv);
  reject_unused(kv);
  net.validate();
  opts.validate();

  const Dataset data = load_dataset(a.cube, a.labels, net.n_class);
  if (data.cube.bands() != net.bands) {
    throw DimensionError("cube has " + std::to_string(data.cube.bands()) + " bands, config expects " +
                         std::to_string(net.bands));
  }
  const fs::path report_path = a.report.empty() ? fs::path(a.checkpoint + ".report.csv") : fs::path(a.report);

  if (a.kfold > 0) {
    const auto samples = subsample(data.samples, plan.max_patches, derive_seed(opts.seed, 2));
    const CrossValidation cv = cross_validate(net, data.cube, samples, a.kfold, opts, a.common.threads);
    std::size_t best = 0;
    for (std::size_t f = 0; f < cv.fold_oa.size(); ++f) {
      if (cv.fold_oa[f] > cv.fold_oa[best]) best = f;
      fs::path p = report_path;
      p.replace_extension(".fold" + std::to_string(f + 1) + ".csv");
      auto out = open_out(p);
      write_report_csv(cv.reports[f], out);
    }
    fs::path summary = report_path;
    summary.replace_extension(".summary.csv");
    auto out = open_out(summary);
    out << "fold,train_samples,val_samples,best_epoch,val_oa\n";
    for (std::size_t f = 0; f < cv.fold_oa.size(); ++f) {
      out << f + 1 << ',' << samples.size() - cv.folds[f].size() << ',' << cv.folds[f].size() << ','
          << cv.reports[f].best_epoch << ',' << format_double(cv.fold_oa[f]) << '\n';
    }
    out << "mean,,,," << format_double(cv.mean_oa) << '\n';
    out << "std,,,," << format_double(cv.std_oa) << '\n';
    save_checkpoint(cv.models[best], a.checkpoint);
    std::cout << "cv_mean_oa " << cv.mean_oa << " std " << cv.std_oa << " best_fold " << best + 1 << '\n';
    return 0;
  }

  const HoldoutSplit split = plan_split(data.samples, plan, opts.seed);
  if (!a.common.quiet) {
    std::fprintf(stderr, "training on %zu patches, validating on %zu\n", split.train.size(), split.held_out.size());
  }
  CapsNet model(net, opts.seed);
  TrainReport report;
  try {
    report = train(model, data.cube, split.train, split.held_out, opts, progress(a.common.quiet, ""));
  } catch (const DivergenceError& e) {
    auto out = open_out(report_path);
    write_report_csv(e.report(), out);
    throw;
  }
  save_checkpoint(model, a.checkpoint);
  auto out = open_out(report_path);
  write_report_csv(report, out);
  std::cout << "epochs " << report.epochs.size() << " best_epoch " << report.best_epoch << " best_val_oa "
            << report.best_val_oa << '\n';
  return 0;
}

// ---- predict --------------------------------------------------------------------

struct PredictArgs {
  Common common;
  std::string checkpoint, cube, out, raster, norms, mask;
};

int cmd_predict(const PredictArgs& a) {
  const KeyValues kv = load_config(a.common);
  reject_unused(kv);
  const CapsNet model = load_checkpoint(a.checkpoint);
  const HsiCube cube = read_cube(a.cube);
  if (cube.bands() != model.config().bands) {
    throw DimensionError("cube has " + std::to_string(cube.bands()) + " bands, checkpoint expects " +
                         std::to_string(model.config().bands));
  }
  const MapPrediction pred = predict_map(model, cube, a.common.threads);
  write_labels(pred.map, a.out);
  if (!a.raster.empty()) export_map(pred.map, a.raster);
  if (!a.norms.empty()) {
    std::optional<LabelMap> mask;
    if (!a.mask.empty()) mask = read_labels(a.mask);
    auto out = open_out(a.norms);
    write_norms_csv(pred, model.config().n_class, mask ? &*mask : nullptr, out);
  }
  const auto hist = pred.map.histogram(model.config().n_class);
  for (std::size_t c = 0; c < hist.size(); ++c) std::cout << class_name(c) << ' ' << hist[c] << '\n';
  return 0;
}

// ---- eval -----------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string pred, truth, pred_b, metrics, mcnemar_out, grid_out;
  std::size_t grid = 0;
  std::size_t n_class = kDefaultClasses;
};

int cmd_eval(const EvalArgs& a) {
  const KeyValues kv = load_config(a.common);
  reject_unused(kv);
  const LabelMap pred = read_any_map(a.pred);
  const LabelMap truth = read_any_map(a.truth);
  const ConfusionMatrix cm = confusion(pred, truth, a.n_class);
  {
    auto out = open_out(a.metrics);
    write_metrics_csv(cm, out);
  }
  const OverallMetrics o = overall_metrics(cm);
  std::cout << "oa " << format_double(o.oa) << " kappa " << (o.kappa ? format_double(*o.kappa) : "NA") << '\n';

  if (!a.pred_b.empty()) {
    const McNemarResult r = mcnemar(pred, read_any_map(a.pred_b), truth);
    const fs::path path = a.mcnemar_out.empty() ? fs::path(a.metrics + ".mcnemar.txt") : fs::path(a.mcnemar_out);
    auto out = open_out(path);
    write_mcnemar_report(r, out);
    write_mcnemar_report(r, std::cout);
  }
  if (a.grid > 0) {
    const PatchGridReport rep = patch_aggregate(pred, truth, a.grid);
    const fs::path path = a.grid_out.empty() ? fs::path(a.metrics + ".grid.csv") : fs::path(a.grid_out);
    auto out = open_out(path);
    write_grid_csv(rep, out);
    std::cout << "grid_cells " << rep.cells.size() << " mean_difference "
              << (rep.mean_difference ? format_double(*rep.mean_difference) : "NA") << '\n';
  }
  return 0;
}

// ---- sweep ----------------------------------------------------------------------

struct SweepArgs {
  Common common;
  std::string cube, labels, out;
  std::vector<std::size_t> k1{8, 16, 32}, k2{8, 16}, z{4, 8, 16};
};

// "yes" when OA never drops as `axis` grows with the other two held fixed.
struct SweepRow {
  std::size_t k1, k2, z, params, best_epoch;
  double oa;
};

std::string monotone(const std::vector<SweepRow>& rows, int axis) {
  auto key = [axis](const SweepRow& r) {
    return axis == 0 ? std::make_pair(r.k2, r.z) : axis == 1 ? std::make_pair(r.k1, r.z) : std::make_pair(r.k1, r.k2);
  };
  auto depth = [axis](const SweepRow& r) { return axis == 0 ? r.k1 : axis == 1 ? r.k2 : r.z; };
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::pair<std::size_t, double>>> groups;
  for (const auto& r : rows) groups[key(r)].emplace_back(depth(r), r.oa);
  for (auto& [k, seq] : groups) {
    std::sort(seq.begin(), seq.end());
    for (std::size_t i = 1; i < seq.size(); ++i) {
      if (seq[i].second < seq[i - 1].second) return "no";
    }
  }
  return "yes";
}

int cmd_sweep(const SweepArgs& a) {
  KeyValues kv = load_config(a.common);
  NetworkConfig base;
  if (!kv.has("bands")) base.bands = read_cube(a.cube).bands();
  const NetworkConfig net = read_network_config(kv, base);
  TrainOptions opts = read_train_options(kv);
  opts.seed = a.common.seed;
  const DataPlan plan = read_data_plan(kv);
  reject_unused(kv);
  opts.validate();
  const Dataset data = load_dataset(a.cube, a.labels, net.n_class);
  const HoldoutSplit split = plan_split(data.samples, plan, opts.seed);
  if (split.held_out.empty()) throw ConfigError("sweep needs val_fraction > 0");

  std::vector<SweepRow> rows;
  for (std::size_t k1 : a.k1) {
    for (std::size_t k2 : a.k2) {
      for (std::size_t z : a.z) rows.push_back({k1, k2, z, 0, 0, 0.0});
    }
  }
  parallel_for(rows.size(), a.common.threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      NetworkConfig cfg = net;
      cfg.spectral_kernels = rows[i].k1;
      cfg.spatial_kernels = rows[i].k2;
      cfg.capsules = rows[i].z;
      cfg.validate();
      CapsNet model(cfg, opts.seed);
      const TrainReport rep = train(model, data.cube, split.train, split.held_out, opts);
      rows[i].params = model.parameter_count();
      rows[i].best_epoch = rep.best_epoch;
      rows[i].oa = overall_accuracy(model, data.cube, split.held_out);
      if (!a.common.quiet) {
        std::fprintf(stderr, "K1=%zu K2=%zu Z=%zu val_oa %.4f\n", rows[i].k1, rows[i].k2, rows[i].z, rows[i].oa);
      }
    }
  });
  auto out = open_out(a.out);
  out << "spectral_kernels,spatial_kernels,capsules,parameters,best_epoch,val_oa\n";
  for (const auto& r : rows) {
    out << r.k1 << ',' << r.k2 << ',' << r.z << ',' << r.params << ',' << r.best_epoch << ',' << format_double(r.oa)
        << '\n';
  }
  std::cout << "monotone_k1 " << monotone(rows, 0) << '\n';
  std::cout << "monotone_k2 " << monotone(rows, 1) << '\n';
  std::cout << "monotone_z " << monotone(rows, 2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Capsule-network crop disease mapping on hyperspectral scenes"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic scene (cube + labels)");
  add_common(s, synth.common);
  s->add_option("--spec", synth.common.config, "Scene spec file (alias of --config)")->check(CLI::ExistingFile);
  s->add_option("--cube", synth.cube, "Output cube file")->required();
  s->add_option("--labels", synth.labels, "Output label file")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  add_common(t, tr.common);
  t->add_option("--cube", tr.cube)->required()->check(CLI::ExistingFile);
  t->add_option("--labels", tr.labels)->required()->check(CLI::ExistingFile);
  t->add_option("--out", tr.checkpoint, "Output checkpoint")->required();
  t->add_option("--report", tr.report, "Report CSV (default <out>.report.csv)");
  t->add_option("--kfold", tr.kfold, "Run k-fold cross-validation instead of a holdout split");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Classify every pixel of a cube");
  add_common(p, pr.common);
  p->add_option("--checkpoint", pr.checkpoint)->required()->check(CLI::ExistingFile);
  p->add_option("--cube", pr.cube)->required()->check(CLI::ExistingFile);
  p->add_option("--out", pr.out, "Output label file")->required();
  p->add_option("--raster", pr.raster, "Output class raster (PPM)");
  p->add_option("--norms", pr.norms, "Output capsule-norm CSV");
  p->add_option("--mask", pr.mask, "Label file restricting the norm CSV to labeled pixels")
      ->check(CLI::ExistingFile);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Compare predictions with ground truth");
  add_common(e, ev.common);
  e->add_option("--pred", ev.pred)->required()->check(CLI::ExistingFile);
  e->add_option("--truth", ev.truth)->required()->check(CLI::ExistingFile);
  e->add_option("--pred-b", ev.pred_b, "Second prediction for McNemar's test")->check(CLI::ExistingFile);
  e->add_option("--out", ev.metrics, "Metrics CSV")->required();
  e->add_option("--mcnemar-out", ev.mcnemar_out);
  e->add_option("--grid", ev.grid, "Grid cell edge in pixels for disease-ratio aggregation");
  e->add_option("--grid-out", ev.grid_out);
  e->add_option("--classes", ev.n_class)->capture_default_str();

  SweepArgs sw;
  auto* w = app.add_subcommand("sweep", "Accuracy against network depth");
  add_common(w, sw.common);
  w->add_option("--cube", sw.cube)->required()->check(CLI::ExistingFile);
  w->add_option("--labels", sw.labels)->required()->check(CLI::ExistingFile);
  w->add_option("--out", sw.out, "Sweep CSV")->required();
  w->add_option("--k1", sw.k1)->delimiter(',')->capture_default_str();
  w->add_option("--k2", sw.k2)->delimiter(',')->capture_default_str();
  w->add_option("--z", sw.z)->delimiter(',')->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitUsage;
  }

  try {
    if (*s) {
      if (synth.common.config.empty()) throw ArgumentError("synth needs --spec");
      return cmd_synth(synth);
    }
    if (*t) return cmd_train(tr);
    if (*p) return cmd_predict(pr);
    if (*e) return cmd_eval(ev);
    if (*w) return cmd_sweep(sw);
  } catch (const TrainingError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitNumeric;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
