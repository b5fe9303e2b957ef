#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tele/grid.hpp"
#include "tele/lora.hpp"
#include "tele/params.hpp"
#include "tele/temporal_filter.hpp"

namespace tele {

struct BackboneConfig {
  GridSpec grid;
  Index embed_dim = 64;
  Index depth = 2;
  Index heads = 4;
  Index window_lat = 2;
  Index window_lon = 4;
  Index patch_lat = 2;
  Index patch_lon = 2;
  Index patch_z = 1;
  Index mlp_ratio = 4;

  Index token_lat() const { return grid.n_lat / patch_lat; }
  Index token_lon() const { return grid.n_lon / patch_lon; }
  /// Surface slab plus one slab per group of patch_z levels.
  Index slabs() const { return 1 + grid.n_level / patch_z; }
  Index tokens() const { return slabs() * token_lat() * token_lon(); }
  Index surface_patch_size() const { return kSurfaceCount * patch_lat * patch_lon; }
  Index upper_patch_size() const { return kUpperCount * patch_z * patch_lat * patch_lon; }
  /// Throws ConfigError on indivisible grids, windows or heads.
  void validate() const;
};

struct TokenProvenance {
  bool surface = true;
  Index slab = 0;
  Index lat_patch = 0;
  Index lon_patch = 0;
};

/// Windows over the token grid. Windows span every slab; `shifted` moves
/// them by half a window, cyclically in longitude and clamped in latitude.
/// Each window row is its own latitude band.
WindowPartition make_partition(const BackboneConfig& cfg, bool shifted);

/// Miniature Earth-specific transformer: patch embedding, pre-norm windowed
/// attention blocks with per-band relative bias, patch recovery.
class Backbone {
 public:
  struct Block {
    Parameter* ln1_gamma = nullptr;
    Parameter* ln1_beta = nullptr;
    Parameter* ln2_gamma = nullptr;
    Parameter* ln2_beta = nullptr;
    Parameter* bias_table = nullptr;
    LoraLinear q, k, v, o, fc1, fc2;
    std::shared_ptr<const WindowPartition> partition;
  };

  Backbone() = default;
  Backbone(const BackboneConfig& cfg, ParameterStore& store, RngStream rng);
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<TokenProvenance>& provenance() const { return provenance_; }

  /// Normalized stacked state [channels·cells] → tokens [N×C] (with position
  /// embedding).
  Tensor patch_embed(ForwardContext& ctx, const Tensor& state) const;
  Tensor block_forward(ForwardContext& ctx, std::size_t b, const Tensor& tokens) const;
  /// Tokens [N×C] → stacked state [channels·cells].
  Tensor patch_recover(ForwardContext& ctx, const Tensor& tokens) const;

  std::vector<LoraLinear*> linears();
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  Parameter* surface_embed_weight() const { return surface_w_; }
  Parameter* surface_embed_bias() const { return surface_b_; }
  Parameter* upper_embed_weight() const { return upper_w_; }
  Parameter* upper_embed_bias() const { return upper_b_; }
  Parameter* surface_recover_weight() const { return surface_rw_; }
  Parameter* surface_recover_bias() const { return surface_rb_; }
  Parameter* upper_recover_weight() const { return upper_rw_; }
  Parameter* upper_recover_bias() const { return upper_rb_; }
  Parameter* position() const { return position_; }

 private:
  BackboneConfig cfg_;
  std::vector<TokenProvenance> provenance_;
  std::shared_ptr<const std::vector<Index>> surface_gather_;
  std::shared_ptr<const std::vector<Index>> upper_gather_;
  std::shared_ptr<const std::vector<Index>> recover_gather_;
  Parameter* surface_w_ = nullptr;
  Parameter* surface_b_ = nullptr;
  Parameter* upper_w_ = nullptr;
  Parameter* upper_b_ = nullptr;
  Parameter* surface_rw_ = nullptr;
  Parameter* surface_rb_ = nullptr;
  Parameter* upper_rw_ = nullptr;
  Parameter* upper_rb_ = nullptr;
  Parameter* position_ = nullptr;
  std::vector<Block> blocks_;
};

struct ModelConfig {
  BackboneConfig backbone;
  TemporalFilterConfig temporal;
  GateMode gate_mode = GateMode::Residual;
};

/// Backbone plus the optional OCI gate and LoRA adapters, owning every
/// parameter. Registration order: backbone, temporal filter, adapters.
class ForecastModel {
 public:
  ForecastModel(const ModelConfig& cfg, std::uint64_t seed, bool with_temporal);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  TemporalFilter* temporal() { return temporal_ ? &*temporal_ : nullptr; }
  const TemporalFilter* temporal() const { return temporal_ ? &*temporal_ : nullptr; }

  std::vector<LoraLinear*> inject_lora(const LoraConfig& cfg);
  std::vector<LoraLinear*> adapted_layers();

  /// state: normalized stacked fields; oci: normalized, zero-filled [C3×L]
  /// lag matrix, required when the model has a temporal filter.
  Tensor forward(ForwardContext& ctx, const Tensor& state, const Tensor& oci = {}) const;
  /// Evaluation-mode convenience wrapper.
  Buffer predict(const Buffer& state, const MatrixRM* oci = nullptr) const;

 private:
  ModelConfig cfg_;
  std::uint64_t seed_;
  ParameterStore store_;
  Backbone backbone_;
  std::optional<TemporalFilter> temporal_;
};

}  // namespace tele
