#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tele/params.hpp"

namespace tele {

/// One inception branch: causal lag convolutions applied in order, gelu
/// between layers. Each layer is (kernel length, output channels).
struct InceptionBranchConfig {
  std::vector<std::pair<Index, Index>> layers;
};

/// 1 + Σ (k_i − 1).
Index receptive_field(const InceptionBranchConfig& branch);

struct TemporalFilterConfig {
  Index n_oci = 16;
  Index lag_window = 22;
  Index embed_dim = 64;
  Index pool_lags = 4;
  std::vector<InceptionBranchConfig> branches = default_branches(8);

  static std::vector<InceptionBranchConfig> default_branches(Index channels);
  Index feature_channels() const;
  Index max_receptive_field() const;
  void validate() const;
};

enum class GateMode { Residual, Multiplicative };

GateMode parse_gate_mode(const std::string& s);
std::string to_string(GateMode mode);

/// Inception extractor over the OCI lag matrix plus the tanh gate projection.
/// Conv kernels start truncated-normal, the gate projection at zero.
class TemporalFilter {
 public:
  TemporalFilter() = default;
  TemporalFilter(const TemporalFilterConfig& cfg, ParameterStore& store, RngStream& rng,
                 const std::string& prefix = "temporal");

  const TemporalFilterConfig& config() const { return cfg_; }

  /// oci [C3×L] → features [F_total×L].
  Tensor features(ForwardContext& ctx, const Tensor& oci) const;
  /// g = tanh(G·pool(features) + g0), shape [C_embed].
  Tensor gate(ForwardContext& ctx, const Tensor& oci) const;

  Parameter* gate_weight() const { return gate_w_; }
  Parameter* gate_bias() const { return gate_b_; }
  std::vector<Parameter*> parameters() const;

 private:
  struct Layer {
    Parameter* kernel = nullptr;
    Parameter* bias = nullptr;
  };
  TemporalFilterConfig cfg_;
  std::vector<std::vector<Layer>> branches_;
  Parameter* gate_w_ = nullptr;
  Parameter* gate_b_ = nullptr;
};

/// Residual: tokens ⊙ (1 + g); multiplicative: tokens ⊙ g. g broadcasts over
/// the token axis.
Tensor apply_gate(const Tensor& tokens, const Tensor& g, GateMode mode);

}  // namespace tele
