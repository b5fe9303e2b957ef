#pragma once

#include "tele/backbone.hpp"
#include "tele/config.hpp"

namespace tele::testing {

/// A ≤5k-parameter model: 4×8 grid, one level, 16 tokens of width 8.
inline ModelConfig tiny_model_config() {
  ModelConfig mc;
  mc.backbone.grid = GridSpec{4, 8, 1, {850}};
  mc.backbone.embed_dim = 8;
  mc.backbone.depth = 2;
  mc.backbone.heads = 2;
  mc.backbone.window_lat = 2;
  mc.backbone.window_lon = 2;
  mc.backbone.mlp_ratio = 2;
  mc.temporal.n_oci = 2;
  mc.temporal.lag_window = 14;
  mc.temporal.branches = TemporalFilterConfig::default_branches(2);
  return mc;
}

inline LoraConfig tiny_lora_config() {
  LoraConfig lc;
  lc.r = 2;
  lc.alpha = 1.0;
  lc.dropout = 0.0;
  return lc;
}

/// Overwrites every parameter of `group` (or all when empty) with uniform
/// noise, so zero-initialized paths carry signal.
inline void randomize(ParameterStore& store, RngStream& rng, double scale,
                      const std::string& group = "") {
  for (Parameter* p : store.all()) {
    if (!group.empty() && p->group != group) continue;
    for (Index i = 0; i < p->numel(); ++i) (*p->value)[i] = scale * (2.0 * rng.uniform() - 1.0);
  }
}

inline Buffer random_state(const GridSpec& g, RngStream& rng) {
  Buffer s(channel_count(g) * g.cells());
  for (Index i = 0; i < s.size(); ++i) s[i] = rng.normal();
  return s;
}

inline MatrixRM random_oci(Index rows, Index cols, RngStream& rng) {
  MatrixRM m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

/// Whole-pipeline config on the tiny model: 240 steps, horizon 4, a
/// 2-step pretrain proxy and a few samples per epoch.
inline const char* tiny_run_text() {
  return R"(grid.n_lat = 4
grid.n_lon = 8
grid.levels = 850
data.steps = 240
data.horizon = 4
data.lag_window = 14
data.n_oci = 2
data.active_indices = 2
data.season_length = 12
data.oci_history = 16
data.train_block = 0:140
data.test_block = 140:190
data.val_block = 190:240
model.embed_dim = 8
model.depth = 2
model.heads = 2
model.window_lat = 2
model.window_lon = 2
model.mlp_ratio = 2
model.branch_channels = 2
lora.r = 2
lora.alpha = 1
pretrain.horizon = 2
pretrain.lr = 3e-3
pretrain.epochs = 3
pretrain.samples_per_epoch = 20
pretrain.val_samples = 10
eval.heatmap_variables = T2M,Z850
train.mode = lora_oci
train.lr = 3e-3
train.epochs = 2
train.samples_per_epoch = 10
train.val_samples = 10
eval.heatmap_variables = T2M,Z850
)";
}

inline RunConfig tiny_run_config() {
  RunConfig cfg = parse_config(tiny_run_text());
  cfg.finalize();
  return cfg;
}

}  // namespace tele::testing
