#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tele/checkpoint.hpp"
#include "tele/config.hpp"
#include "tele/dataset.hpp"
#include "tele/evaluation.hpp"

namespace tele {

/// Normalized view of a dataset: field and OCI statistics and the climatology
/// come from the training split only.
class PreparedData {
 public:
  explicit PreparedData(const Dataset& ds);

  const Dataset& dataset() const { return *ds_; }
  const GridSpec& grid() const { return ds_->grid(); }
  const NormStats& stats() const { return stats_; }
  const Climatology& climatology() const { return clim_; }

  const Buffer& normalized_state(Index t) const;
  /// Normalized, zero-filled C3 × L lag matrix for input time t.
  MatrixRM oci_at(Index t) const;
  MatrixRM zero_oci() const { return MatrixRM::Zero(ds_->n_oci(), ds_->lag_window()); }

 private:
  const Dataset* ds_;
  NormStats stats_;
  Climatology clim_;
  std::vector<Buffer> norm_states_;
  MatrixRM norm_oci_;
};

bool mode_has_temporal(Mode m);
/// lora_oci sees the OCI lag matrix; lora_no_oci gets zeros of the same shape.
bool mode_uses_oci(Mode m);

/// Builds the architecture of `mode` with fresh parameters from `seed` and
/// sets the trainable flags: everything for pretrain and full_finetune,
/// nothing for frozen; adapters, temporal filter and the patch
/// embedding/recovery linears for the LoRA modes.
std::unique_ptr<ForecastModel> build_model(const RunConfig& cfg, Mode mode, std::uint64_t seed);
void configure_trainable(ForecastModel& model, Mode mode);

/// Per-element weights w such that Σ w·(ŷ−y)² is the latitude-weighted MSE
/// averaged with equal weight over the nine variables (levels of an upper
/// variable share that variable's weight).
Buffer loss_weights(const GridSpec& grid);
Tensor weighted_mse(const Tensor& pred, const Buffer& target, const Buffer& weights);

/// Model output for input time t in normalized space, evaluation mode.
Buffer predict_normalized(const ForecastModel& model, const PreparedData& data, Mode mode, Index t);

double validation_loss(const ForecastModel& model, const PreparedData& data, Mode mode,
                       const std::vector<std::pair<Index, Index>>& pairs);
/// Same loss for persistence (prediction = normalized input).
double persistence_loss(const PreparedData& data, const std::vector<std::pair<Index, Index>>& pairs);

/// `n` evenly strided pairs (all of them when n is 0 or exceeds the count).
std::vector<std::pair<Index, Index>> subsample(const std::vector<std::pair<Index, Index>>& pairs, Index n);

struct EpochLog {
  Index epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
  Index best_epoch = 0;
  Index steps = 0;
  std::vector<EpochLog> epochs;
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  Mode mode = Mode::LoraOci;
  TrainConfig config;
  std::uint64_t seed = 0;
  std::string tag;
  std::string config_hash;
  /// Best-validation checkpoint destination; empty keeps it in memory only.
  std::filesystem::path checkpoint_path;
  std::function<void(const std::string&)> log;
};

/// Minimizes weighted_mse over the trainable parameters. One graph per
/// sample; gradients are summed in sample order and averaged per batch.
/// Validation runs before the first epoch (epoch 0) and after every epoch;
/// the model ends holding the best-validation weights. Frozen tensors are
/// compared bitwise after every optimizer step. A non-finite loss or gradient
/// restores the best weights, writes them out and throws TrainingAborted.
TrainResult train_model(ForecastModel& model, const PreparedData& data, const DatasetManifest& train,
                        const DatasetManifest& val, const TrainOptions& opts);

/// Physical-unit forecaster for direct models.
Forecaster direct_forecaster(const ForecastModel& model, const PreparedData& data, Mode mode);
/// Applies a `model_step`-step model ⌈horizon / model_step⌉ times, feeding
/// each output back as input and shifting the OCI window by the elapsed
/// steps. Throws ConfigError when horizon is not a multiple of model_step.
Forecaster rollout_forecaster(const ForecastModel& model, const PreparedData& data, Mode mode,
                              Index model_step, Index horizon);

}  // namespace tele
