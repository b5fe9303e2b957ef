#pragma once

#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <string>
#include <vector>

#include "tele/training.hpp"

namespace tele {

/// Line logger that writes to a file and optionally echoes to a stream.
class RunLog {
 public:
  RunLog(const std::filesystem::path& file, std::ostream* echo);
  void operator()(const std::string& line);

 private:
  std::ofstream file_;
  std::ostream* echo_;
};

struct CommandOptions {
  RunConfig config;
  bool overwrite = false;
  bool force = false;
  std::ostream* echo = nullptr;
};

/// Writes the dataset into `dir`. A non-empty `dir` is an error unless
/// overwrite is set, in which case the previous dataset files are replaced.
void cmd_gen_data(const CommandOptions& opts, const std::filesystem::path& dir);

struct PretrainOutcome {
  std::filesystem::path checkpoint;
  double val_loss = 0.0;
  double persistence_val_loss = 0.0;
  bool beats_persistence() const { return val_loss < persistence_val_loss; }
};

/// Trains the backbone alone on the pretrain.horizon task and writes
/// out_dir/pretrained.ckpt (tag "pretrained-1day").
PretrainOutcome cmd_pretrain(const CommandOptions& opts);

struct AdaptOutcome {
  std::filesystem::path checkpoint;
  TrainResult result;
  ParamAccount params;
};

/// Starts from the pretrained backbone and trains train.mode at data.horizon;
/// writes out_dir/<mode>.ckpt.
AdaptOutcome cmd_adapt(const CommandOptions& opts, const std::filesystem::path& pretrained);

/// Scores the pretrained 1-step model rolled out to data.horizon on the
/// evaluation split; writes out_dir/rollout_metrics.csv.
MetricReport cmd_rollout(const CommandOptions& opts, const std::filesystem::path& pretrained);

struct Panels {
  MatrixRM input, target, prediction, bias;
};

/// One channel of each field as n_lat × n_lon; bias = prediction − target.
Panels make_panels(const GridSpec& grid, Index channel, const Buffer& input, const Buffer& target,
                   const Buffer& prediction);
/// 8-bit binary PGM (P5) scaled linearly from the field's min to max, north
/// at the top.
void write_pgm(const std::filesystem::path& path, const MatrixRM& field);

/// Scores each checkpoint (plus persistence) on eval.split and writes
/// out_dir/metrics.csv and the heatmap panels under out_dir/heatmaps.
MetricReport cmd_evaluate(const CommandOptions& opts, const std::vector<std::filesystem::path>& checkpoints);

struct AblationRow {
  std::string variable;
  double wrmse_oci = 0.0;
  double wrmse_no_oci = 0.0;
  double delta() const { return wrmse_no_oci - wrmse_oci; }
};

/// Trains lora_oci and lora_no_oci from the same pretrained weights and
/// seed, then writes out_dir/ablation.csv with per-variable deltas.
std::vector<AblationRow> cmd_ablate(const CommandOptions& opts, const std::filesystem::path& pretrained);

/// Rebuilds the model a checkpoint was written from. Pretrain checkpoints
/// come back as the frozen backbone.
std::unique_ptr<ForecastModel> model_from_checkpoint(const RunConfig& cfg, const Checkpoint& ckpt, bool force,
                                                     Mode* mode_out = nullptr);

}  // namespace tele
