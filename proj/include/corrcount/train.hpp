#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "corrcount/model.hpp"
#include "corrcount/synth.hpp"

namespace corrcount {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 4;
  double lr = 2e-5;
  double lr_decay_factor = 0.25;  // multiplied in every lr_decay_every epochs
  int lr_decay_every = 80;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 4e-11;
  std::uint64_t seed = 0;  // per-epoch shuffling
  int threads = 0;         // 0 = hardware concurrency; results are identical for any value

  std::string to_json_text() const;
  static TrainConfig from_json_text(const std::string& text);
};

struct LossPoint {
  std::int64_t step = 0;
  double loss = 0;
};

struct TrainResult {
  std::vector<LossPoint> curve;  // mean batch loss per optimizer step
  std::int64_t steps = 0;
  double wall_seconds = 0;
};

/// MSE training over the manifest's train split: forward through
/// backbone -> distill/refine xN -> head, backward, Adam. Backbone features,
/// exemplar features, and GT density maps are precomputed once (the backbone
/// is frozen). Per-sample gradients may be computed on worker threads; they
/// are reduced in sample order, so results are bit-identical for any thread
/// count. A non-finite loss restores the last completed epoch's parameters
/// and raises NumericalError with the step index.
TrainResult train(CountingModel& model, const DatasetManifest& data, const TrainConfig& cfg);

struct EvalReport {
  double mae = 0;
  double rmse = 0;
  std::vector<std::pair<double, double>> pairs;  // (predicted, true) per sample
  double wall_seconds = 0;
  std::int64_t images = 0;
};

/// MAE/RMSE over (predicted, true) pairs; exactly order-invariant (error terms
/// are sorted before fixed-tree pairwise summation).
std::pair<double, double> mae_rmse(const std::vector<std::pair<double, double>>& pairs);

/// Seed override from the CORRCOUNT_SEED environment variable, if set.
std::optional<std::uint64_t> seed_override_from_env();

/// Counting metrics over one split. Error terms are sorted before pairwise
/// summation, so the report is exactly order-invariant; RMSE >= MAE is
/// asserted on every report.
EvalReport evaluate(const CountingModel& model, const DatasetManifest& data, const std::string& split,
                    int threads = 0);

/// MAE on `eval_split` of the constant predictor that always answers the mean
/// true count of `fit_split`.
double constant_predictor_mae(const DatasetManifest& data, const std::string& fit_split,
                              const std::string& eval_split);

struct AblationCell {
  std::string name;
  int iterations = 0;
  bool exemplar_norm = true, spatial_norm = true, flip = true;
  bool ok = false;
  std::string error;
  double val_mae = 0, val_rmse = 0;
  double train_seconds = 0;
};

struct AblationTable {
  std::vector<AblationCell> cells;
  std::string to_json_text() const;
  std::string to_text() const;
};

/// Trains and evaluates the iteration-count cells (N=1..4, all toggles on)
/// plus the normalization/flip grid at N=4. Cell failures are recorded and
/// the remaining cells proceed.
AblationTable run_ablation(const DatasetManifest& data, const ModelConfig& base_model,
                           const TrainConfig& base_train);

struct SuppressionStats {
  std::int64_t images = 0;
  std::int64_t separated = 0;  // images where distractor mean A_n < target mean A_n
  double fraction = 0;
  double mean_target = 0, mean_distractor = 0;  // averaged over images
};

/// Compares mean A_n (final iteration, averaged over exemplars) over
/// target-object pixels vs distractor-object pixels, per image.
SuppressionStats measure_suppression(const CountingModel& model, const DatasetManifest& data,
                                     const std::string& split);

}  // namespace corrcount
