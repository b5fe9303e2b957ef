#include <set>

#include <Eigen/QR>

#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "tele/backbone.hpp"

using namespace tele;
using namespace tele::testing;

namespace {

Tensor state_tensor(const Buffer& s) { return Tensor::constant({s.size()}, s); }

Tensor oci_tensor(const MatrixRM& m) {
  return Tensor::constant({m.rows(), m.cols()}, Eigen::Map<const Buffer>(m.data(), m.size()));
}

}  // namespace

TEST_CASE("default token grid and output shapes") {
  ModelConfig mc;
  ForecastModel model(mc, 1, false);
  const auto& cfg = model.backbone().config();
  CHECK(cfg.token_lat() * cfg.token_lon() == 128);
  CHECK(cfg.tokens() == 512);
  std::set<std::tuple<bool, Index, Index, Index>> seen;
  for (const auto& p : model.backbone().provenance()) {
    seen.insert({p.surface, p.slab, p.lat_patch, p.lon_patch});
  }
  CHECK(seen.size() == 512);

  RngStream rng(2);
  Buffer s = random_state(cfg.grid, rng);
  Buffer out = model.predict(s);
  CHECK(out.size() == 19 * 16 * 32);
  // (4,16,32) surface block followed by (5,3,16,32) upper block.
  CHECK(4 * 16 * 32 + 5 * 3 * 16 * 32 == out.size());
}

TEST_CASE("indivisible configurations fail at construction") {
  ModelConfig mc;
  mc.backbone.grid = GridSpec{15, 32, 3, {500, 850, 1000}};
  CHECK_THROWS_AS(ForecastModel(mc, 1, false), ConfigError);
  ModelConfig mw;
  mw.backbone.window_lon = 5;
  CHECK_THROWS_AS(ForecastModel(mw, 1, false), ConfigError);
  ModelConfig mh;
  mh.backbone.heads = 3;
  CHECK_THROWS_AS(ForecastModel(mh, 1, false), ConfigError);
}

TEST_CASE("zero fields with zero embedding bias give the position embedding") {
  ForecastModel model(tiny_model_config(), 3, false);
  Binding bind;
  ForwardContext ctx{bind};
  const auto& g = model.backbone().config().grid;
  Tensor tokens = model.backbone().patch_embed(ctx, Tensor::zeros({channel_count(g) * g.cells()}));
  CHECK(tokens.data() == *model.backbone().position()->value);
}

TEST_CASE("zero tokens with zero recovery bias give zero fields") {
  ForecastModel model(tiny_model_config(), 3, false);
  Binding bind;
  ForwardContext ctx{bind};
  const auto& cfg = model.backbone().config();
  Tensor out = model.backbone().patch_recover(ctx, Tensor::zeros({cfg.tokens(), cfg.embed_dim}));
  CHECK(out.data().isZero(0.0));
}

TEST_CASE("recover after embed with pseudo-inverse weights is the identity") {
  ModelConfig mc;
  mc.backbone.grid = GridSpec{2, 2, 1, {850}};
  mc.backbone.embed_dim = 24;
  mc.backbone.heads = 2;
  mc.backbone.window_lat = 1;
  mc.backbone.window_lon = 1;
  mc.backbone.depth = 0;
  ForecastModel model(mc, 4, false);
  Backbone& bb = model.backbone();
  bb.position()->value->setZero();
  for (auto [w, rw] : {std::pair{bb.surface_embed_weight(), bb.surface_recover_weight()},
                       std::pair{bb.upper_embed_weight(), bb.upper_recover_weight()}}) {
    Eigen::Map<const MatrixRM> W(w->value->data(), w->shape[0], w->shape[1]);
    MatrixRM pinv = W.completeOrthogonalDecomposition().pseudoInverse();
    *rw->value = Eigen::Map<const Buffer>(pinv.data(), pinv.size());
  }
  RngStream rng(5);
  Buffer s = random_state(mc.backbone.grid, rng);
  CHECK((model.predict(s) - s).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("partition covers every token once per block") {
  BackboneConfig cfg;
  for (bool shifted : {false, true}) {
    WindowPartition p = make_partition(cfg, shifted);
    std::vector<int> hits(static_cast<std::size_t>(cfg.tokens()), 0);
    for (const auto& w : p.windows) {
      for (Index t : w.tokens) ++hits[static_cast<std::size_t>(t)];
      for (Index r : w.relative) {
        CHECK(r >= 0);
        CHECK(r < p.relative_positions);
      }
      CHECK(w.band < p.bands);
    }
    for (int h : hits) CHECK(h == 1);
    CHECK(p.relative_positions == 7 * 3 * 7);
    CHECK(p.bands == (shifted ? 5 : 4));
  }
  WindowPartition p = make_partition(cfg, false);
  CHECK(p.windows.size() == 16);
  CHECK(p.windows[0].tokens.size() == 32);
}

TEST_CASE("single window with uniform bias and identical tokens returns the value") {
  const Index n = 4, c = 6, heads = 2;
  auto part = std::make_shared<WindowPartition>();
  part->bands = 1;
  part->relative_positions = 1;
  AttentionWindow w;
  w.tokens = {0, 1, 2, 3};
  w.relative.assign(16, 0);
  part->windows.push_back(w);
  RngStream rng(6);
  Buffer row = random_buffer(c, rng);
  Buffer same(n * c);
  for (Index i = 0; i < n; ++i) same.segment(i * c, c) = row;
  Buffer vrow = random_buffer(c, rng);
  Buffer v(n * c);
  for (Index i = 0; i < n; ++i) v.segment(i * c, c) = vrow;
  Tensor out = window_attention_core(Tensor::constant({n, c}, same), Tensor::constant({n, c}, same),
                                     Tensor::constant({n, c}, v),
                                     Tensor::constant({1, 1, heads}, Buffer::Constant(heads, 0.3)), part,
                                     heads);
  CHECK((out.data() - v).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("saturated diagonal bias routes every token to itself") {
  BackboneConfig cfg = tiny_model_config().backbone;
  auto part = std::make_shared<const WindowPartition>(make_partition(cfg, false));
  const Index heads = 2;
  Buffer table = Buffer::Zero(part->bands * part->relative_positions * heads);
  // Zero offset on every axis: (slabs-1, wl-1, wo-1).
  const Index rl = 2 * cfg.window_lat - 1, ro = 2 * cfg.window_lon - 1;
  const Index diag = ((cfg.slabs() - 1) * rl + cfg.window_lat - 1) * ro + cfg.window_lon - 1;
  for (Index b = 0; b < part->bands; ++b) {
    for (Index h = 0; h < heads; ++h) table[(b * part->relative_positions + diag) * heads + h] = 1e4;
  }
  RngStream rng(7);
  const Index n = cfg.tokens(), c = 8;
  Buffer v = random_buffer(n * c, rng);
  Tensor out = window_attention_core(Tensor::constant({n, c}, random_buffer(n * c, rng)),
                                     Tensor::constant({n, c}, random_buffer(n * c, rng)),
                                     Tensor::constant({n, c}, v),
                                     Tensor::constant({part->bands, part->relative_positions, heads}, table),
                                     part, heads);
  CHECK((out.data() - v).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("window locality and same-band permutation in an unshifted block") {
  ForecastModel model(tiny_model_config(), 8, false);
  const auto& cfg = model.backbone().config();
  const auto& part = *model.backbone().blocks()[0].partition;
  RngStream rng(9);
  const Index n = cfg.tokens(), c = cfg.embed_dim;
  Buffer x = random_buffer(n * c, rng);
  auto run = [&](const Buffer& in) {
    Binding b;
    ForwardContext ctx{b};
    return model.backbone().block_forward(ctx, 0, Tensor::constant({n, c}, in)).data();
  };
  const Buffer y = run(x);
  const auto& w0 = part.windows[0];
  const auto& w1 = part.windows[1];
  REQUIRE(w0.band == w1.band);

  // Perturbing a token of window 1 leaves window 0 untouched.
  Buffer xp = x;
  xp.segment(w1.tokens[0] * c, c).array() += 1.0;
  const Buffer yp = run(xp);
  for (Index t : w0.tokens) CHECK((yp.segment(t * c, c) - y.segment(t * c, c)).cwiseAbs().maxCoeff() == 0.0);
  double moved = 0.0;
  for (Index t : w1.tokens) moved += (yp.segment(t * c, c) - y.segment(t * c, c)).cwiseAbs().sum();
  CHECK(moved > 0.0);

  // Swap the contents of windows 0 and 1 (same band): outputs swap.
  Buffer xs = x;
  for (std::size_t i = 0; i < w0.tokens.size(); ++i) {
    xs.segment(w0.tokens[i] * c, c) = x.segment(w1.tokens[i] * c, c);
    xs.segment(w1.tokens[i] * c, c) = x.segment(w0.tokens[i] * c, c);
  }
  const Buffer ys = run(xs);
  for (std::size_t i = 0; i < w0.tokens.size(); ++i) {
    CHECK((ys.segment(w0.tokens[i] * c, c) - y.segment(w1.tokens[i] * c, c)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("rolling one window along longitude rolls unshifted block outputs") {
  ForecastModel model(tiny_model_config(), 10, false);
  const auto& cfg = model.backbone().config();
  const Index n = cfg.tokens(), c = cfg.embed_dim, tl = cfg.token_lat(), to = cfg.token_lon();
  RngStream rng(11);
  Buffer x = random_buffer(n * c, rng);
  auto roll = [&](const Buffer& in) {
    Buffer out(in.size());
    for (Index s = 0; s < cfg.slabs(); ++s) {
      for (Index i = 0; i < tl; ++i) {
        for (Index j = 0; j < to; ++j) {
          const Index src = (s * tl + i) * to + j;
          const Index dst = (s * tl + i) * to + (j + cfg.window_lon) % to;
          out.segment(dst * c, c) = in.segment(src * c, c);
        }
      }
    }
    return out;
  };
  auto run = [&](const Buffer& in) {
    Binding b;
    ForwardContext ctx{b};
    return model.backbone().block_forward(ctx, 0, Tensor::constant({n, c}, in)).data();
  };
  CHECK((run(roll(x)) - roll(run(x))).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("embedding gradient check") {
  ForecastModel model(tiny_model_config(), 12, false);
  RngStream rng(13);
  const auto& g = model.backbone().config().grid;
  Buffer s = random_state(g, rng);
  auto loss = [&](Binding& b) {
    ForwardContext ctx{b};
    return weighted_readout(model.backbone().patch_embed(ctx, state_tensor(s)));
  };
  std::vector<Parameter*> params{model.backbone().surface_embed_weight(),
                                 model.backbone().surface_embed_bias(),
                                 model.backbone().upper_embed_weight(),
                                 model.backbone().upper_embed_bias(), model.backbone().position()};
  CHECK(param_grad_check(loss, params).max_rel_error < 1e-6);
}

TEST_CASE("identity at init: adapted model equals the frozen backbone exactly") {
  ModelConfig mc;
  ForecastModel frozen(mc, 21, false);
  ForecastModel adapted(mc, 21, true);
  LoraConfig lc;
  lc.r = 4;
  lc.alpha = 2;
  adapted.inject_lora(lc);
  RngStream rng(22);
  const auto& g = mc.backbone.grid;
  for (int i = 0; i < 5; ++i) {
    Buffer s = random_state(g, rng);
    MatrixRM oci = random_oci(16, 22, rng);
    CHECK(adapted.predict(s, &oci) == frozen.predict(s));
  }
}

TEST_CASE("finite outputs for random inputs") {
  ForecastModel model(tiny_model_config(), 30, true);
  RngStream rng(31);
  randomize(model.params(), rng, 0.3, "temporal_filter");
  for (int seed = 0; seed < 100; ++seed) {
    RngStream r(static_cast<std::uint64_t>(seed));
    Buffer s = random_state(model.backbone().config().grid, r);
    MatrixRM oci = random_oci(2, 14, r);
    CHECK(model.predict(s, &oci).allFinite());
  }
}

TEST_CASE("end-to-end gradient check on a tiny model") {
  ForecastModel model(tiny_model_config(), 40, true);
  model.inject_lora(tiny_lora_config());
  RngStream rng(41);
  randomize(model.params(), rng, 0.3, "lora");
  randomize(model.params(), rng, 0.3, "temporal_filter");
  const Index total = account(model.params()).total;
  CHECK(total <= 5000);
  model.params().set_trainable(true);
  Buffer s = random_state(model.backbone().config().grid, rng);
  MatrixRM oci = random_oci(2, 14, rng);
  auto loss = [&](Binding& b) {
    ForwardContext ctx{b};
    return weighted_readout(model.forward(ctx, state_tensor(s), oci_tensor(oci)));
  };
  auto res = param_grad_check(loss, model.params().all(), 1e-5, 1e-6);
  CHECK(res.checked == total);
  CHECK(res.max_rel_error < 1e-4);
}
