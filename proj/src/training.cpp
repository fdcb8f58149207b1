#include "cropdoc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>

#include "cropdoc/checkpoint.hpp"
#include "cropdoc/parallel.hpp"
#include "cropdoc/random.hpp"

namespace cropdoc {

namespace {

// Seed streams derived from TrainOptions::seed.
constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kFoldStream = 0x464f;
constexpr std::uint64_t kSplitStream = 0x5350;

// Batch boundaries; a trailing single sample joins the previous batch so
// batch norm never sees a batch of one.
std::vector<std::size_t> batch_bounds(std::size_t n, std::size_t batch) {
  std::vector<std::size_t> bounds{0};
  while (bounds.back() < n) bounds.push_back(std::min(n, bounds.back() + batch));
  if (bounds.size() > 2 && bounds[bounds.size() - 1] - bounds[bounds.size() - 2] == 1) {
    bounds.erase(bounds.end() - 2);
  }
  return bounds;
}

std::vector<std::vector<double>> snapshot(const CapsNet& model) {
  std::vector<std::vector<double>> out;
  for (const auto& b : model.blocks()) out.emplace_back(b.values.begin(), b.values.end());
  return out;
}

void restore(CapsNet& model, const std::vector<std::vector<double>>& saved) {
  auto blocks = model.blocks();
  for (std::size_t i = 0; i < blocks.size(); ++i) std::copy(saved[i].begin(), saved[i].end(), blocks[i].values.begin());
}

}  // namespace

double schedule_rate(std::size_t step, const Schedule& s) {
  const double moved = static_cast<double>(step) * s.delta;
  if (s.literal_increase) return s.base_rate + moved;
  return std::max(s.base_rate - moved, s.floor);
}

double adam_step(std::span<const NamedTensor> params, AdamState& state) {
  for (const NamedTensor& p : params) {
    for (double g : p.tensor->grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  if (state.m.empty()) {
    for (const NamedTensor& p : params) {
      state.m.emplace_back(p.tensor->shape());
      state.v.emplace_back(p.tensor->shape());
    }
  }
  if (state.m.size() != params.size()) throw ArgumentError("Adam state tracks a different parameter list");

  const double rate = schedule_rate(state.step, state.schedule);
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i].tensor;
    if (state.m[i].shape() != w.shape()) {
      throw DimensionError("Adam moment shape differs for '" + params[i].name + "'");
    }
    const auto grad = w.grad();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    auto x = w.data();
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      x[j] -= rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.epsilon);
    }
  }
  ++state.step;
  return rate;
}

void TrainOptions::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(schedule.base_rate > 0.0) || !(schedule.floor >= 0.0) || !(schedule.delta >= 0.0)) {
    throw ConfigError("learning-rate schedule values must be non-negative with a positive base");
  }
  loss.validate();
}

double overall_accuracy(const CapsNet& model, const HsiCube& cube, std::span<const Sample> samples,
                        std::size_t batch_size) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    const auto chunk = samples.subspan(begin, std::min(batch_size, samples.size() - begin));
    const auto preds = model.predict(assemble_batch(cube, chunk, model.config().patch));
    for (std::size_t i = 0; i < chunk.size(); ++i) correct += preds[i].label == chunk[i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainReport train(CapsNet& model, const HsiCube& cube, std::span<const Sample> train_set,
                  std::span<const Sample> validation, const TrainOptions& options, const EpochCallback& on_epoch) {
  options.validate();
  TrainReport report;
  if (options.epochs == 0) return report;
  if (train_set.empty()) throw ArgumentError("training set is empty");
  const NetworkConfig& cfg = model.config();
  if (cube.bands() != cfg.bands) {
    throw DimensionError("cube has " + std::to_string(cube.bands()) + " bands, model expects " +
                         std::to_string(cfg.bands));
  }
  for (const Sample& s : train_set) {
    if (s.label >= cfg.n_class) throw ArgumentError("sample label out of range: " + std::to_string(s.label));
  }

  AdamState adam;
  adam.schedule = options.schedule;
  const auto params = model.parameters();
  std::vector<std::size_t> order(train_set.size());
  std::vector<Sample> batch_samples;
  std::vector<std::size_t> labels;
  std::vector<std::vector<double>> best;
  std::size_t stale = 0;
  double rate = schedule_rate(0, options.schedule);

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(derive_seed(options.seed, kShuffleStream), epoch));
    rng.shuffle(order);

    const auto bounds = batch_bounds(order.size(), options.batch_size);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b + 1 < bounds.size(); ++b) {
      batch_samples.clear();
      labels.clear();
      for (std::size_t i = bounds[b]; i < bounds[b + 1]; ++i) {
        batch_samples.push_back(train_set[order[i]]);
        labels.push_back(train_set[order[i]].label);
      }
      const Tensor batch = assemble_batch(cube, batch_samples, cfg.patch);
      Tape tape;
      const CapsNet::Forward f = model.forward(tape, batch, NormMode::train);
      const Var margin = margin_loss(f.activations, labels, options.loss);
      const Var recon = model.decode(tape, f.activations, labels);
      const Var loss = total_loss(margin, recon, one_hot(labels, cfg.n_class), options.loss);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw DivergenceError("training loss became non-finite in epoch " + std::to_string(epoch), report);
      }
      for (const NamedTensor& p : params) p.tensor->zero_grad();
      tape.backward(loss);
      try {
        rate = adam_step(params, adam);
      } catch (const TrainingError& e) {
        throw DivergenceError(std::string(e.what()) + " in epoch " + std::to_string(epoch), report);
      }
      loss_sum += value * static_cast<double>(batch_samples.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_oa = overall_accuracy(model, cube, validation);
    rec.lr = rate;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    // Without a validation set the latest epoch counts as best.
    const bool improved = validation.empty() || report.best_epoch == 0 || rec.val_oa > report.best_val_oa;
    if (improved) {
      report.best_epoch = epoch;
      report.best_val_oa = rec.val_oa;
      best = snapshot(model);
      stale = 0;
    } else if (options.patience > 0 && ++stale >= options.patience) {
      report.stopped_early = epoch < options.epochs;
      break;
    }
  }
  for (const NamedTensor& p : params) p.tensor->clear_grad();
  if (!best.empty()) restore(model, best);
  return report;
}

CrossValidation cross_validate(const NetworkConfig& config, const HsiCube& cube, std::span<const Sample> samples,
                               std::size_t k, const TrainOptions& options, std::size_t threads) {
  if (k < 2) throw ArgumentError("cross-validation needs k >= 2");
  std::vector<std::size_t> labels;
  for (const Sample& s : samples) labels.push_back(s.label);
  CrossValidation cv;
  cv.folds = split_dataset(labels, SplitScheme::kfold(k), derive_seed(options.seed, kSplitStream));
  cv.reports.resize(k);
  cv.fold_oa.resize(k);
  std::vector<std::optional<CapsNet>> models(k);

  parallel_for(k, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t f = begin; f < end; ++f) {
      std::vector<Sample> train_set, val_set;
      for (std::size_t g = 0; g < k; ++g) {
        for (std::size_t idx : cv.folds[g]) (g == f ? val_set : train_set).push_back(samples[idx]);
      }
      TrainOptions opts = options;
      opts.seed = derive_seed(derive_seed(options.seed, kFoldStream), f);
      CapsNet model(config, opts.seed);
      cv.reports[f] = train(model, cube, train_set, val_set, opts);
      cv.fold_oa[f] = cv.reports[f].best_val_oa;
      models[f].emplace(std::move(model));
    }
  });

  for (auto& m : models) cv.models.push_back(std::move(*m));
  cv.mean_oa = std::accumulate(cv.fold_oa.begin(), cv.fold_oa.end(), 0.0) / static_cast<double>(k);
  double ss = 0.0;
  for (double oa : cv.fold_oa) ss += (oa - cv.mean_oa) * (oa - cv.mean_oa);
  cv.std_oa = std::sqrt(ss / static_cast<double>(k - 1));
  return cv;
}

std::vector<Sample> subsample(std::span<const Sample> samples, std::size_t limit, std::uint64_t seed) {
  if (limit == 0 || limit >= samples.size()) return {samples.begin(), samples.end()};
  const double fraction = static_cast<double>(limit) / static_cast<double>(samples.size());
  // The held-out part of a stratified split is the kept subset.
  return holdout_split(samples, fraction, seed).held_out;
}

HoldoutSplit holdout_split(std::span<const Sample> samples, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> labels;
  for (const Sample& s : samples) labels.push_back(s.label);
  auto parts = split_dataset(labels, SplitScheme::holdout(fraction), seed);
  HoldoutSplit out;
  for (int part = 0; part < 2; ++part) {
    std::sort(parts[part].begin(), parts[part].end());
    for (std::size_t i : parts[part]) (part == 0 ? out.train : out.held_out).push_back(samples[i]);
  }
  return out;
}

void write_report_csv(const TrainReport& report, std::ostream& out) {
  out << "epoch,train_loss,val_oa,lr,seconds\n";
  for (const EpochRecord& r : report.epochs) {
    out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_oa) << ','
        << format_double(r.lr) << ',' << format_double(r.seconds) << '\n';
  }
}

void write_train_options(KeyValues& kv, const TrainOptions& o) {
  kv.set("epochs", o.epochs);
  kv.set("batch_size", o.batch_size);
  kv.set("seed", static_cast<std::size_t>(o.seed));
  kv.set("patience", o.patience);
  kv.set("lr_base", o.schedule.base_rate);
  kv.set("lr_delta", o.schedule.delta);
  kv.set("lr_floor", o.schedule.floor);
  kv.set("lr_literal_increase", std::string(o.schedule.literal_increase ? "true" : "false"));
  kv.set("edge_plus", o.loss.edge_plus);
  kv.set("edge_minus", o.loss.edge_minus);
  kv.set("mu", o.loss.mu);
  kv.set("theta", o.loss.theta);
}

TrainOptions read_train_options(const KeyValues& kv, TrainOptions o) {
  o.epochs = kv.get_size("epochs", o.epochs);
  o.batch_size = kv.get_size("batch_size", o.batch_size);
  o.seed = kv.get_u64("seed", o.seed);
  o.patience = kv.get_size("patience", o.patience);
  o.schedule.base_rate = kv.get_double("lr_base", o.schedule.base_rate);
  o.schedule.delta = kv.get_double("lr_delta", o.schedule.delta);
  o.schedule.floor = kv.get_double("lr_floor", o.schedule.floor);
  o.schedule.literal_increase = kv.get_bool("lr_literal_increase", o.schedule.literal_increase);
  o.loss = read_loss_config(kv, o.loss);
  return o;
}

}  // namespace cropdoc
