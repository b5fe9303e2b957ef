#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tele/backbone.hpp"

namespace tele {

// TCKPT1 layout: the 6 magic bytes "TCKPT1", a little-endian u64 giving the
// JSON index length, the index itself, then the concatenated TNS1 payloads.
// The index maps each tensor name to dtype, shape, payload offset/length
// (relative to the first payload byte), trainable flag and group, plus Adam
// moments when the tensor has taken optimizer steps.

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Version, Corrupt, MissingKeys, UnexpectedKeys, ShapeMismatch, HashMismatch };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct CheckpointTensor {
  std::string name;
  Shape shape;
  Buffer data;
  bool trainable = true;
  std::string group;
  AdamState adam;
};

struct LoraMeta {
  Index r = 0;
  double alpha = 0.0;
  bool operator==(const LoraMeta&) const = default;
};

struct Checkpoint {
  static constexpr int kVersion = 1;
  int version = kVersion;
  std::string tag;
  std::string mode;
  Index epoch = 0;
  std::string config_hash;
  std::map<std::string, LoraMeta> lora;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of every parameter (values, flags, Adam state) in store order.
Checkpoint capture(ForecastModel& model, std::string tag, std::string mode, Index epoch,
                   std::string config_hash);

enum class RestoreScope {
  /// Names must match exactly; flags, values, Adam state and LoRA alpha are
  /// restored.
  Strict,
  /// Every checkpoint tensor must exist in the model; model tensors the
  /// checkpoint lacks keep their values. Only values are copied.
  Values,
};

void restore(ForecastModel& model, const Checkpoint& ckpt, RestoreScope scope = RestoreScope::Strict);

/// Throws HashMismatch unless `force`; returns false when forced past one.
bool check_hash(const Checkpoint& ckpt, const std::string& expected, bool force);

}  // namespace tele
