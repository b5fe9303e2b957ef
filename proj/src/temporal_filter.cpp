#include "tele/temporal_filter.hpp"

#include <algorithm>
#include <stdexcept>

namespace tele {

Index receptive_field(const InceptionBranchConfig& branch) {
  if (branch.layers.empty()) throw std::invalid_argument("inception branch without layers");
  Index rf = 1;
  for (const auto& [k, _] : branch.layers) rf += k - 1;
  return rf;
}

std::vector<InceptionBranchConfig> TemporalFilterConfig::default_branches(Index channels) {
  return {{{{1, channels}}},
          {{{3, channels}}},
          {{{4, channels}}},
          {{{7, channels}}},
          {{{7, channels}, {3, channels}, {4, channels}}}};
}

Index TemporalFilterConfig::feature_channels() const {
  Index f = 0;
  for (const auto& b : branches) f += b.layers.back().second;
  return f;
}

Index TemporalFilterConfig::max_receptive_field() const {
  Index rf = 0;
  for (const auto& b : branches) rf = std::max(rf, receptive_field(b));
  return rf;
}

void TemporalFilterConfig::validate() const {
  if (n_oci < 1 || embed_dim < 1 || pool_lags < 1) {
    throw std::invalid_argument("temporal filter sizes must be positive");
  }
  if (branches.empty()) throw std::invalid_argument("temporal filter needs at least one branch");
  for (const auto& b : branches) {
    for (const auto& [k, c] : b.layers) {
      if (k < 1 || c < 1) throw std::invalid_argument("kernel length and channels must be positive");
    }
  }
  if (lag_window < max_receptive_field()) {
    throw std::invalid_argument("lag window " + std::to_string(lag_window) +
                                " shorter than the receptive field " +
                                std::to_string(max_receptive_field()));
  }
}

GateMode parse_gate_mode(const std::string& s) {
  if (s == "residual") return GateMode::Residual;
  if (s == "multiplicative") return GateMode::Multiplicative;
  throw std::invalid_argument("unknown gate mode '" + s + "' (residual|multiplicative)");
}

std::string to_string(GateMode mode) {
  return mode == GateMode::Residual ? "residual" : "multiplicative";
}

TemporalFilter::TemporalFilter(const TemporalFilterConfig& cfg, ParameterStore& store,
                               RngStream& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  for (std::size_t b = 0; b < cfg_.branches.size(); ++b) {
    std::vector<Layer> layers;
    Index in = cfg_.n_oci;
    for (std::size_t l = 0; l < cfg_.branches[b].layers.size(); ++l) {
      const auto [k, out] = cfg_.branches[b].layers[l];
      const std::string base = prefix + ".branch" + std::to_string(b) + ".conv" + std::to_string(l);
      Layer layer;
      layer.kernel = &store.add(base + ".weight", {out, in, k}, truncated_normal(out * in * k, rng),
                                "temporal_filter");
      layer.bias = &store.add(base + ".bias", {out, 1}, Buffer::Zero(out), "temporal_filter");
      layers.push_back(layer);
      in = out;
    }
    branches_.push_back(std::move(layers));
  }
  const Index f = cfg_.feature_channels();
  gate_w_ = &store.add(prefix + ".gate.weight", {cfg_.embed_dim, f},
                       Buffer::Zero(cfg_.embed_dim * f), "temporal_filter");
  gate_b_ = &store.add(prefix + ".gate.bias", {cfg_.embed_dim}, Buffer::Zero(cfg_.embed_dim),
                       "temporal_filter");
}

Tensor TemporalFilter::features(ForwardContext& ctx, const Tensor& oci) const {
  if (oci.rank() != 2 || oci.dim(0) != cfg_.n_oci) {
    throw DimensionError("OCI matrix must be [" + std::to_string(cfg_.n_oci) + "×L], got " +
                         to_string(oci.shape()));
  }
  if (oci.dim(1) < cfg_.max_receptive_field()) {
    throw DimensionError("OCI lag window " + std::to_string(oci.dim(1)) +
                         " shorter than the receptive field " +
                         std::to_string(cfg_.max_receptive_field()));
  }
  std::vector<Tensor> outs;
  for (const auto& layers : branches_) {
    Tensor h = oci;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (l > 0) h = gelu(h);
      h = add(conv_lag(h, ctx.bind(*layers[l].kernel)), ctx.bind(*layers[l].bias));
    }
    outs.push_back(h);
  }
  return concat(outs, 0);
}

Tensor TemporalFilter::gate(ForwardContext& ctx, const Tensor& oci) const {
  Tensor f = features(ctx, oci);
  const Index lags = f.dim(1);
  const Index pool = std::min(cfg_.pool_lags, lags);
  Tensor pooled = mean_axis(slice(f, 1, lags - pool, pool), 1);
  Tensor row = reshape(pooled, {1, f.dim(0)});
  Tensor z = linear(row, ctx.bind(*gate_w_), ctx.bind(*gate_b_));
  return reshape(tanh(z), {cfg_.embed_dim});
}

std::vector<Parameter*> TemporalFilter::parameters() const {
  std::vector<Parameter*> out;
  for (const auto& layers : branches_) {
    for (const auto& l : layers) {
      out.push_back(l.kernel);
      out.push_back(l.bias);
    }
  }
  out.push_back(gate_w_);
  out.push_back(gate_b_);
  return out;
}

Tensor apply_gate(const Tensor& tokens, const Tensor& g, GateMode mode) {
  if (tokens.rank() != 2 || g.rank() != 1 || tokens.dim(1) != g.dim(0)) {
    throw DimensionError("apply_gate: tokens " + to_string(tokens.shape()) + " vs gate " +
                         to_string(g.shape()));
  }
  Tensor row = reshape(g, {1, g.dim(0)});
  if (mode == GateMode::Residual) row = add_scalar(row, 1.0);
  return mul(tokens, row);
}

}  // namespace tele
