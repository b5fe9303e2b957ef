#pragma once

#include <map>
#include <string>
#include <vector>

#include "tele/params.hpp"

namespace tele {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LoraConfig {
  Index r = 32;
  double alpha = 16.0;
  double dropout = 0.1;
  std::vector<std::string> targets = default_targets();

  static std::vector<std::string> default_targets();
};

/// Linear layer h = W0·x + b, optionally carrying a low-rank delta
/// (alpha/r)·B·A·dropout(x). W0 is [d×k], A [r×k], B [d×r].
class LoraLinear {
 public:
  LoraLinear() = default;
  LoraLinear(std::string name, Parameter* weight, Parameter* bias)
      : name_(std::move(name)), weight_(weight), bias_(bias) {}

  const std::string& name() const { return name_; }
  Index out_features() const { return weight_->shape[0]; }
  Index in_features() const { return weight_->shape[1]; }

  bool adapted() const { return a_ != nullptr; }
  bool merged() const { return merged_; }
  Index rank() const { return r_; }
  double alpha() const { return alpha_; }
  double dropout() const { return dropout_; }
  double scaling() const { return alpha_ / static_cast<double>(r_); }

  Parameter* weight() const { return weight_; }
  Parameter* bias() const { return bias_; }
  Parameter* lora_a() const { return a_; }
  Parameter* lora_b() const { return b_; }

  /// x [N×k] → [N×d].
  Tensor forward(ForwardContext& ctx, const Tensor& x) const;

  /// Adds A ~ N(0, 1/r), B = 0 to the store and freezes W0 and the bias.
  void attach(ParameterStore& store, Index r, double alpha, double dropout, RngStream& rng);
  /// Registers an adapter whose A, B already exist in the store.
  void attach_existing(Parameter* a, Parameter* b, double alpha, double dropout);

  /// W ← W0 + (alpha/r)·B·A; the original W0 is kept for unmerge.
  void merge();
  /// Restores W0 bitwise.
  void unmerge();

 private:
  std::string name_;
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
  Parameter* a_ = nullptr;
  Parameter* b_ = nullptr;
  Index r_ = 0;
  double alpha_ = 0.0;
  double dropout_ = 0.0;
  bool merged_ = false;
  Buffer w0_copy_;
};

struct ParamAccount {
  struct Group {
    Index total = 0;
    Index trainable = 0;
  };
  Index total = 0;
  Index trainable = 0;
  std::map<std::string, Group> groups;
};

ParamAccount account(const ParameterStore& store);
/// trainable / total; throws when the store is empty.
double trainable_fraction(const ParamAccount& acc);
/// Per-group trainable share of the whole model.
std::map<std::string, double> group_fractions(const ParamAccount& acc);

/// Glob match where '*' spans any characters, dots included.
bool glob_match(const std::string& pattern, const std::string& name);

/// Wraps every layer whose name matches a target pattern. Each pattern must
/// match at least one layer.
std::vector<LoraLinear*> inject_lora(std::vector<LoraLinear*> layers, ParameterStore& store,
                                     const LoraConfig& cfg, RngStream& rng);

}  // namespace tele
