#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "cropdoc/capsnet.hpp"
#include "cropdoc/errors.hpp"
#include "cropdoc/hsi.hpp"
#include "cropdoc/keyvalue.hpp"

namespace cropdoc {

/// Per-optimizer-step learning rate: base - step * delta, floored. With
/// literal_increase the rate instead grows by delta each step.
struct Schedule {
  double base_rate = 1e-3;
  double delta = 1e-6;
  double floor = 1e-5;
  bool literal_increase = false;
};

double schedule_rate(std::size_t step, const Schedule& schedule = {});

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  Schedule schedule;
  std::size_t step = 0;
  std::vector<Tensor> m;  // first moments, shaped like the parameters
  std::vector<Tensor> v;  // second moments
};

/// One bias-corrected Adam update of every parameter from its grad() at the
/// current scheduled rate; parameters without a gradient buffer see zero.
/// Throws TrainingError naming the first parameter with a non-finite gradient
/// (nothing is updated in that case). Returns the rate used.
double adam_step(std::span<const NamedTensor> params, AdamState& state);

struct TrainOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  std::uint64_t seed = 42;
  // Stop after this many epochs without a validation OA improvement; 0 disables.
  std::size_t patience = 10;
  Schedule schedule;
  LossConfig loss;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_oa = 0.0;  // NaN without a validation set
  double lr = 0.0;      // rate of the epoch's last step
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 0 if no epoch ran
  double best_val_oa = 0.0;
  bool stopped_early = false;
};

/// Thrown when the training loss becomes non-finite; carries the epochs
/// completed so far.
class DivergenceError : public TrainingError {
 public:
  DivergenceError(const std::string& what, TrainReport report) : TrainingError(what), report_(std::move(report)) {}
  const TrainReport& report() const { return report_; }

 private:
  TrainReport report_;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch training on patches centered at `train` samples, validated on
/// `validation` after every epoch. Batches are reshuffled each epoch from a
/// seed derived from options.seed. The parameters (and batch-norm statistics)
/// of the best-validation epoch are restored before returning.
TrainReport train(CapsNet& model, const HsiCube& cube, std::span<const Sample> train_set,
                  std::span<const Sample> validation, const TrainOptions& options,
                  const EpochCallback& on_epoch = {});

/// Fraction of samples whose predicted class matches the label.
double overall_accuracy(const CapsNet& model, const HsiCube& cube, std::span<const Sample> samples,
                        std::size_t batch_size = 256);

struct CrossValidation {
  std::vector<TrainReport> reports;
  std::vector<CapsNet> models;
  std::vector<std::vector<std::size_t>> folds;  // validation indices per fold
  std::vector<double> fold_oa;                 // best validation OA per fold
  double mean_oa = 0.0;
  double std_oa = 0.0;  // sample standard deviation
};

/// k stratified folds; model i trains on the other k - 1 folds and
/// validates on fold i. Folds run concurrently on up to `threads` threads,
/// each with its own model and seed stream, so results do not depend on the
/// thread count.
CrossValidation cross_validate(const NetworkConfig& config, const HsiCube& cube, std::span<const Sample> samples,
                               std::size_t k, const TrainOptions& options, std::size_t threads = 1);

/// Stratified, seed-deterministic subset of about `limit` samples (per-class
/// rounding may shift the count slightly); everything when limit is 0 or not
/// smaller than the input. Keeps row-major order.
std::vector<Sample> subsample(std::span<const Sample> samples, std::size_t limit, std::uint64_t seed);

struct HoldoutSplit {
  std::vector<Sample> train;
  std::vector<Sample> held_out;
};

/// Stratified split holding out round(fraction * n_c) samples of each class;
/// both parts keep row-major order.
HoldoutSplit holdout_split(std::span<const Sample> samples, double fraction, std::uint64_t seed);

/// CSV: epoch,train_loss,val_oa,lr,seconds
void write_report_csv(const TrainReport& report, std::ostream& out);

void write_train_options(KeyValues& kv, const TrainOptions& options);
TrainOptions read_train_options(const KeyValues& kv, TrainOptions base = {});

}  // namespace cropdoc
