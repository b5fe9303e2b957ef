#include "tele/backbone.hpp"

#include <cmath>
#include <numbers>

namespace tele {

namespace {

enum Stream : std::uint64_t { kBackbone = 1, kTemporal, kLora };

}  // namespace

void BackboneConfig::validate() const {
  grid.validate();
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(embed_dim > 0 && depth >= 0 && heads > 0 && mlp_ratio > 0, "backbone sizes must be positive");
  require(patch_lat > 0 && patch_lon > 0 && patch_z > 0, "patch sizes must be positive");
  require(grid.n_lat % patch_lat == 0 && grid.n_lon % patch_lon == 0,
          "grid " + std::to_string(grid.n_lat) + "x" + std::to_string(grid.n_lon) +
              " not divisible by patch " + std::to_string(patch_lat) + "x" + std::to_string(patch_lon));
  require(grid.n_level % patch_z == 0, "levels not divisible by the vertical patch size");
  require(window_lat > 0 && window_lon > 0, "window sizes must be positive");
  require(token_lat() % window_lat == 0 && token_lon() % window_lon == 0,
          "token grid " + std::to_string(token_lat()) + "x" + std::to_string(token_lon()) +
              " not divisible by window " + std::to_string(window_lat) + "x" +
              std::to_string(window_lon));
  require(embed_dim % heads == 0, "embed_dim must be divisible by heads");
}

WindowPartition make_partition(const BackboneConfig& cfg, bool shifted) {
  const Index tl = cfg.token_lat();
  const Index to = cfg.token_lon();
  const Index wl = cfg.window_lat;
  const Index wo = cfg.window_lon;
  const Index slabs = cfg.slabs();
  const Index sl = shifted ? wl / 2 : 0;
  const Index so = shifted ? wo / 2 : 0;

  // Latitude groups: clamped at the poles, so a shift shortens the edge rows.
  std::vector<std::pair<Index, Index>> rows;
  for (Index start = 0; start < tl;) {
    const Index end = std::min(tl, start == 0 && sl > 0 ? wl - sl : start + wl);
    rows.emplace_back(start, end);
    start = end;
  }

  WindowPartition part;
  part.bands = static_cast<Index>(rows.size());
  const Index rl = 2 * wl - 1;
  const Index ro = 2 * wo - 1;
  part.relative_positions = (2 * slabs - 1) * rl * ro;
  for (std::size_t band = 0; band < rows.size(); ++band) {
    const auto [r0, r1] = rows[band];
    for (Index col = 0; col < to / wo; ++col) {
      AttentionWindow w;
      w.band = static_cast<Index>(band);
      std::vector<std::array<Index, 3>> local;
      for (Index s = 0; s < slabs; ++s) {
        for (Index i = r0; i < r1; ++i) {
          for (Index jj = col * wo; jj < (col + 1) * wo; ++jj) {
            const Index j = (jj + so) % to;
            w.tokens.push_back((s * tl + i) * to + j);
            local.push_back({s, i - r0, jj - col * wo});
          }
        }
      }
      const std::size_t n = w.tokens.size();
      w.relative.resize(n * n);
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
          const Index ds = local[a][0] - local[b][0] + slabs - 1;
          const Index di = local[a][1] - local[b][1] + wl - 1;
          const Index dj = local[a][2] - local[b][2] + wo - 1;
          w.relative[a * n + b] = (ds * rl + di) * ro + dj;
        }
      }
      part.windows.push_back(std::move(w));
    }
  }
  return part;
}

Backbone::Backbone(const BackboneConfig& cfg, ParameterStore& store, RngStream rng) : cfg_(cfg) {
  cfg_.validate();
  const GridSpec& g = cfg_.grid;
  const Index e = cfg_.embed_dim;
  const Index tl = cfg_.token_lat();
  const Index to = cfg_.token_lon();
  const Index pl = cfg_.patch_lat;
  const Index po = cfg_.patch_lon;
  const Index pz = cfg_.patch_z;
  const Index cells = g.cells();
  const Index ps = cfg_.surface_patch_size();
  const Index pu = cfg_.upper_patch_size();
  const Index n_surface = tl * to;
  const Index n_upper = (cfg_.slabs() - 1) * tl * to;

  auto sg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n_surface * ps));
  auto ug = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n_upper * pu));
  auto rg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(channel_count(g) * cells));
  for (Index s = 0; s < cfg_.slabs(); ++s) {
    for (Index i = 0; i < tl; ++i) {
      for (Index j = 0; j < to; ++j) {
        provenance_.push_back({s == 0, s, i, j});
        for (Index di = 0; di < pl; ++di) {
          for (Index dj = 0; dj < po; ++dj) {
            const Index cell = (i * pl + di) * g.n_lon + j * po + dj;
            if (s == 0) {
              for (Index c = 0; c < kSurfaceCount; ++c) {
                const Index slot = (i * to + j) * ps + (c * pl + di) * po + dj;
                (*sg)[static_cast<std::size_t>(slot)] = c * cells + cell;
                (*rg)[static_cast<std::size_t>(c * cells + cell)] = slot;
              }
            } else {
              for (Index v = 0; v < kUpperCount; ++v) {
                for (Index dz = 0; dz < pz; ++dz) {
                  const Index ch = upper_channel(g, v, (s - 1) * pz + dz);
                  const Index slot = (((s - 1) * tl + i) * to + j) * pu +
                                     ((v * pz + dz) * pl + di) * po + dj;
                  (*ug)[static_cast<std::size_t>(slot)] = ch * cells + cell;
                  (*rg)[static_cast<std::size_t>(ch * cells + cell)] = n_surface * ps + slot;
                }
              }
            }
          }
        }
      }
    }
  }
  surface_gather_ = sg;
  upper_gather_ = ug;
  recover_gather_ = rg;

  surface_w_ = &store.add("embed.surface.weight", {e, ps}, truncated_normal(e * ps, rng), "embeddings");
  surface_b_ = &store.add("embed.surface.bias", {e}, Buffer::Zero(e), "embeddings");
  upper_w_ = &store.add("embed.upper.weight", {e, pu}, truncated_normal(e * pu, rng), "embeddings");
  upper_b_ = &store.add("embed.upper.bias", {e}, Buffer::Zero(e), "embeddings");

  // Position embedding starts as a smooth slab/lat/lon basis and is learned.
  const Index n = cfg_.tokens();
  Buffer pos(n * e);
  const double pi = std::numbers::pi;
  for (Index t = 0; t < n; ++t) {
    const auto& p = provenance_[static_cast<std::size_t>(t)];
    for (Index d = 0; d < e; ++d) {
      const Index q = d / 4;
      const double fi = static_cast<double>(p.lat_patch) + 0.5;
      const double fj = static_cast<double>(p.lon_patch);
      const double fs = static_cast<double>(p.slab) + 0.5;
      const double kq = static_cast<double>(q + 1);
      const double lon_k = static_cast<double>(q % std::max<Index>(1, to / 2) + 1);
      double value = 0.0;
      switch (d % 4) {
        case 0:
          value = std::cos(pi * kq * fi / static_cast<double>(tl));
          break;
        case 1:
          value = std::sin(2.0 * pi * lon_k * fj / static_cast<double>(to));
          break;
        case 2:
          value = std::cos(2.0 * pi * lon_k * fj / static_cast<double>(to));
          break;
        default:
          value = std::cos(pi * kq * fs / static_cast<double>(cfg_.slabs()));
      }
      pos[t * e + d] = 0.1 * value;
    }
  }
  position_ = &store.add("embed.position", {n, e}, std::move(pos), "position");

  const Index hidden = e * cfg_.mlp_ratio;
  for (Index b = 0; b < cfg_.depth; ++b) {
    const std::string base = "blocks." + std::to_string(b);
    Block blk;
    blk.partition = std::make_shared<const WindowPartition>(make_partition(cfg_, b % 2 == 1));
    blk.ln1_gamma = &store.add(base + ".norm1.gamma", {e}, Buffer::Ones(e), "backbone");
    blk.ln1_beta = &store.add(base + ".norm1.beta", {e}, Buffer::Zero(e), "backbone");
    const Index table = blk.partition->bands * blk.partition->relative_positions * cfg_.heads;
    blk.bias_table =
        &store.add(base + ".attn.bias_table",
                   {blk.partition->bands, blk.partition->relative_positions, cfg_.heads},
                   truncated_normal(table, rng), "backbone");
    auto make_linear = [&](const std::string& name, Index out, Index in) {
      Parameter* w = &store.add(name + ".weight", {out, in}, truncated_normal(out * in, rng), "backbone");
      Parameter* bias = &store.add(name + ".bias", {out}, Buffer::Zero(out), "backbone");
      return LoraLinear(name, w, bias);
    };
    blk.q = make_linear(base + ".attn.q", e, e);
    blk.k = make_linear(base + ".attn.k", e, e);
    blk.v = make_linear(base + ".attn.v", e, e);
    blk.o = make_linear(base + ".attn.o", e, e);
    blk.ln2_gamma = &store.add(base + ".norm2.gamma", {e}, Buffer::Ones(e), "backbone");
    blk.ln2_beta = &store.add(base + ".norm2.beta", {e}, Buffer::Zero(e), "backbone");
    blk.fc1 = make_linear(base + ".mlp.fc1", hidden, e);
    blk.fc2 = make_linear(base + ".mlp.fc2", e, hidden);
    blocks_.push_back(std::move(blk));
  }

  surface_rw_ = &store.add("recover.surface.weight", {ps, e}, truncated_normal(ps * e, rng), "embeddings");
  surface_rb_ = &store.add("recover.surface.bias", {ps}, Buffer::Zero(ps), "embeddings");
  upper_rw_ = &store.add("recover.upper.weight", {pu, e}, truncated_normal(pu * e, rng), "embeddings");
  upper_rb_ = &store.add("recover.upper.bias", {pu}, Buffer::Zero(pu), "embeddings");
}

Tensor Backbone::patch_embed(ForwardContext& ctx, const Tensor& state) const {
  const Index expected = channel_count(cfg_.grid) * cfg_.grid.cells();
  if (state.numel() != expected) {
    throw DimensionError("patch_embed: state " + to_string(state.shape()) + " needs " +
                         std::to_string(expected) + " values");
  }
  const Index tl = cfg_.token_lat();
  const Index to = cfg_.token_lon();
  Tensor sp = gather(state, surface_gather_, {tl * to, cfg_.surface_patch_size()});
  Tensor surface = linear(sp, ctx.bind(*surface_w_), ctx.bind(*surface_b_));
  std::vector<Tensor> parts{surface};
  if (cfg_.slabs() > 1) {
    Tensor up = gather(state, upper_gather_, {(cfg_.slabs() - 1) * tl * to, cfg_.upper_patch_size()});
    parts.push_back(linear(up, ctx.bind(*upper_w_), ctx.bind(*upper_b_)));
  }
  return add(concat(parts, 0), ctx.bind(*position_));
}

Tensor Backbone::block_forward(ForwardContext& ctx, std::size_t b, const Tensor& tokens) const {
  const Block& blk = blocks_.at(b);
  Tensor h = layer_norm(tokens, ctx.bind(*blk.ln1_gamma), ctx.bind(*blk.ln1_beta));
  Tensor q = blk.q.forward(ctx, h);
  Tensor k = blk.k.forward(ctx, h);
  Tensor v = blk.v.forward(ctx, h);
  Tensor a = window_attention_core(q, k, v, ctx.bind(*blk.bias_table), blk.partition, cfg_.heads);
  Tensor x = add(tokens, blk.o.forward(ctx, a));
  Tensor h2 = layer_norm(x, ctx.bind(*blk.ln2_gamma), ctx.bind(*blk.ln2_beta));
  Tensor m = blk.fc2.forward(ctx, gelu(blk.fc1.forward(ctx, h2)));
  return add(x, m);
}

Tensor Backbone::patch_recover(ForwardContext& ctx, const Tensor& tokens) const {
  const Index n_surface = cfg_.token_lat() * cfg_.token_lon();
  if (tokens.rank() != 2 || tokens.dim(0) != cfg_.tokens() || tokens.dim(1) != cfg_.embed_dim) {
    throw DimensionError("patch_recover: tokens " + to_string(tokens.shape()));
  }
  Tensor s = linear(slice(tokens, 0, 0, n_surface), ctx.bind(*surface_rw_), ctx.bind(*surface_rb_));
  std::vector<Tensor> flat{reshape(s, {s.numel()})};
  if (cfg_.slabs() > 1) {
    Tensor u = linear(slice(tokens, 0, n_surface, cfg_.tokens() - n_surface), ctx.bind(*upper_rw_),
                      ctx.bind(*upper_rb_));
    flat.push_back(reshape(u, {u.numel()}));
  }
  Tensor all = flat.size() == 1 ? flat[0] : concat(flat, 0);
  return gather(all, recover_gather_, {static_cast<Index>(recover_gather_->size())});
}

std::vector<LoraLinear*> Backbone::linears() {
  std::vector<LoraLinear*> out;
  for (auto& b : blocks_) {
    for (LoraLinear* l : {&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2}) out.push_back(l);
  }
  return out;
}

ForecastModel::ForecastModel(const ModelConfig& cfg, std::uint64_t seed, bool with_temporal)
    : cfg_(cfg), seed_(seed), backbone_(cfg.backbone, store_, RngStream(seed).split(kBackbone)) {
  if (with_temporal) {
    TemporalFilterConfig tc = cfg_.temporal;
    tc.embed_dim = cfg_.backbone.embed_dim;
    cfg_.temporal = tc;
    RngStream rng = RngStream(seed).split(kTemporal);
    temporal_.emplace(tc, store_, rng);
  }
}

std::vector<LoraLinear*> ForecastModel::inject_lora(const LoraConfig& cfg) {
  RngStream rng = RngStream(seed_).split(kLora);
  return tele::inject_lora(backbone_.linears(), store_, cfg, rng);
}

std::vector<LoraLinear*> ForecastModel::adapted_layers() {
  std::vector<LoraLinear*> out;
  for (LoraLinear* l : backbone_.linears()) {
    if (l->adapted()) out.push_back(l);
  }
  return out;
}

Tensor ForecastModel::forward(ForwardContext& ctx, const Tensor& state, const Tensor& oci) const {
  Tensor tokens = backbone_.patch_embed(ctx, state);
  if (temporal_) {
    if (!oci.defined()) throw DimensionError("model with a temporal filter needs the OCI lag matrix");
    tokens = apply_gate(tokens, temporal_->gate(ctx, oci), cfg_.gate_mode);
  }
  for (std::size_t b = 0; b < backbone_.blocks().size(); ++b) {
    tokens = backbone_.block_forward(ctx, b, tokens);
  }
  return backbone_.patch_recover(ctx, tokens);
}

Buffer ForecastModel::predict(const Buffer& state, const MatrixRM* oci) const {
  Binding bind(false);
  ForwardContext ctx{bind, false, nullptr};
  Tensor s = Tensor::constant({state.size()}, state);
  Tensor o;
  if (oci) o = Tensor::constant({oci->rows(), oci->cols()}, Eigen::Map<const Buffer>(oci->data(), oci->size()));
  return forward(ctx, s, o).data();
}

}  // namespace tele
