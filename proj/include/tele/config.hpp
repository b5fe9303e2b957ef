#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tele/backbone.hpp"
#include "tele/lora.hpp"
#include "tele/optim.hpp"
#include "tele/synthetic.hpp"

namespace tele {

enum class Mode { Pretrain, Frozen, LoraOci, LoraNoOci, FullFinetune };

Mode parse_mode(const std::string& s);
std::string to_string(Mode m);

struct TrainConfig {
  Mode mode = Mode::LoraOci;
  AdamConfig adam{0.9, 0.999, 1e-8, 3e-6};
  SchedulerConfig schedule;
  Index batch_size = 1;
  /// Samples drawn (without replacement, reshuffled each epoch) per epoch;
  /// 0 uses the whole training split.
  Index samples_per_epoch = 0;
  /// Evenly strided validation subset; 0 uses the whole split.
  Index val_samples = 0;
};

/// Everything a run needs. Parsed from flat `key = value` text; see
/// RunConfig::keys() for the accepted names.
struct RunConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "runs";
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 1;

  SyntheticConfig data;
  ModelConfig model;
  Index branch_channels = 8;
  LoraConfig lora{4, 2.0, 0.1, LoraConfig::default_targets()};
  TrainConfig train;

  /// The 1-step proxy used to build the pretrained checkpoint.
  Index pretrain_horizon = 2;
  TrainConfig pretrain{Mode::Pretrain, {0.9, 0.999, 1e-8, 3e-6}, {2e-5, 0.5, 15, 30}, 1, 0, 0};

  std::string eval_split = "test";
  /// Input timestamp of the heatmap sample; -1 picks the first pair.
  Index heatmap_timestamp = -1;
  std::vector<std::string> heatmap_variables{"T2M", "Z500"};

  /// Keeps the model, temporal and data grids consistent and validates all
  /// sub-configs.
  void finalize();

  static const std::vector<std::string>& keys();
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Resolved configuration, one `key = value` line per key in keys() order.
  std::string to_text() const;
  /// FNV-1a over the keys that shape parameter tensors (grid, model, OCI
  /// geometry and LoRA layout). Hex string.
  std::string hash() const;
};

class ConfigParseError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// '#' starts a comment; blank lines are skipped; unknown keys and
/// malformed lines throw with the line number.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

}  // namespace tele
