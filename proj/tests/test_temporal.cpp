#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "tele/temporal_filter.hpp"

using namespace tele;
using namespace tele::testing;

namespace {

Tensor oci_tensor(const MatrixRM& m) {
  return Tensor::constant({m.rows(), m.cols()}, Eigen::Map<const Buffer>(m.data(), m.size()));
}

}  // namespace

TEST_CASE("receptive field arithmetic") {
  CHECK(receptive_field({{{7, 8}, {3, 8}, {4, 8}}}) == 12);
  CHECK(receptive_field({{{1, 8}}}) == 1);
  CHECK(receptive_field({{{7, 8}}}) == 7);
  TemporalFilterConfig cfg;
  CHECK(cfg.feature_channels() == 40);
  CHECK(cfg.max_receptive_field() == 12);
}

TEST_CASE("zero OCI with zero biases gives zero features") {
  ParameterStore store;
  RngStream rng(1);
  TemporalFilter tf(TemporalFilterConfig{}, store, rng);
  Binding bind;
  ForwardContext ctx{bind};
  Tensor f = tf.features(ctx, Tensor::zeros({16, 22}));
  CHECK(f.shape() == Shape{40, 22});
  CHECK(f.data().isZero(0.0));
}

TEST_CASE("identity kernel branch reproduces the input") {
  TemporalFilterConfig cfg;
  cfg.n_oci = 3;
  cfg.lag_window = 5;
  cfg.branches = {{{{1, 3}}}};
  ParameterStore store;
  RngStream rng(2);
  TemporalFilter tf(cfg, store, rng);
  Parameter& k = store.at("temporal.branch0.conv0.weight");
  k.value->setZero();
  for (Index c = 0; c < 3; ++c) (*k.value)[c * 3 + c] = 1.0;
  RngStream data(3);
  MatrixRM oci = random_oci(3, 5, data);
  Binding bind;
  ForwardContext ctx{bind};
  CHECK(tf.features(ctx, oci_tensor(oci)).data() == Eigen::Map<const Buffer>(oci.data(), oci.size()));
}

TEST_CASE("short lag window is rejected") {
  TemporalFilterConfig cfg;
  cfg.lag_window = 11;
  ParameterStore store;
  RngStream rng(4);
  CHECK_THROWS(TemporalFilter(cfg, store, rng));
  cfg.lag_window = 22;
  TemporalFilter tf(cfg, store, rng);
  Binding bind;
  ForwardContext ctx{bind};
  CHECK_THROWS_AS(tf.features(ctx, Tensor::zeros({16, 11})), DimensionError);
}

TEST_CASE("features and gate pass the gradient oracle") {
  TemporalFilterConfig cfg;
  cfg.n_oci = 2;
  cfg.lag_window = 22;
  cfg.embed_dim = 5;
  cfg.branches = TemporalFilterConfig::default_branches(3);
  ParameterStore store;
  RngStream rng(5);
  TemporalFilter tf(cfg, store, rng);
  randomize(store, rng, 0.5);
  RngStream data(6);
  MatrixRM oci = random_oci(2, 22, data);

  auto features = [&](Binding& b) {
    ForwardContext ctx{b};
    return weighted_readout(tf.features(ctx, oci_tensor(oci)));
  };
  auto res = param_grad_check(features, store.all());
  CHECK(res.max_rel_error < 1e-6);

  auto gate = [&](Binding& b) {
    ForwardContext ctx{b};
    return weighted_readout(tf.gate(ctx, oci_tensor(oci)));
  };
  CHECK(param_grad_check(gate, store.all()).max_rel_error < 1e-6);

  // With respect to the OCI input itself.
  auto wrt_input = [&](const std::vector<Tensor>& in) {
    Binding b;
    ForwardContext ctx{b};
    return weighted_readout(tf.gate(ctx, in[0]));
  };
  CHECK(grad_check(wrt_input, {{{2, 22}, Eigen::Map<const Buffer>(oci.data(), oci.size())}})
            .max_rel_error < 1e-6);
}

TEST_CASE("gate is zero at init and bounded afterwards") {
  ParameterStore store;
  RngStream rng(7);
  TemporalFilter tf(TemporalFilterConfig{}, store, rng);
  RngStream data(8);
  Binding bind;
  ForwardContext ctx{bind};
  MatrixRM oci = random_oci(16, 22, data);
  CHECK(tf.gate(ctx, oci_tensor(oci)).data().isZero(0.0));

  randomize(store, rng, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    MatrixRM big = 10.0 * random_oci(16, 22, data);
    Binding b;
    ForwardContext c{b};
    Tensor g = tf.gate(c, oci_tensor(big));
    CHECK(g.shape() == Shape{64});
    // tanh rounds to exactly 1 in double once saturated.
    CHECK(g.data().cwiseAbs().maxCoeff() <= 1.0);
  }

  // Unsaturated regime: strictly inside (-1, 1).
  randomize(store, rng, 0.05);
  for (int trial = 0; trial < 20; ++trial) {
    Binding b;
    ForwardContext c{b};
    CHECK(tf.gate(c, oci_tensor(random_oci(16, 22, data))).data().cwiseAbs().maxCoeff() < 1.0);
  }
}

TEST_CASE("causal probe: recent lags matter, lags beyond the receptive field do not") {
  const Index L = 22;
  TemporalFilterConfig cfg;
  cfg.branches = {{{{7, 4}, {3, 4}, {4, 4}}}};
  ParameterStore store;
  RngStream rng(9);
  TemporalFilter tf(cfg, store, rng);
  randomize(store, rng, 0.5);
  RngStream data(10);
  MatrixRM base = random_oci(16, L, data);
  auto run = [&](const MatrixRM& m) {
    Binding b;
    ForwardContext c{b};
    return std::make_pair(tf.features(c, oci_tensor(m)).data(), tf.gate(c, oci_tensor(m)).data());
  };
  const auto [f0, g0] = run(base);

  MatrixRM recent = base;
  recent(3, L - 1) += 1.0;
  CHECK((run(recent).second - g0).cwiseAbs().maxCoeff() > 0.0);

  // Per output position t: inputs t-11 .. t reach it, t-12 does not.
  const Index t = 17;
  MatrixRM inside = base;
  inside(5, t - 11) += 1.0;
  MatrixRM outside = base;
  outside(5, t - 12) += 1.0;
  auto column = [&](const Buffer& f) {
    Buffer col(4);
    for (Index o = 0; o < 4; ++o) col[o] = f[o * L + t];
    return col;
  };
  CHECK((column(run(inside).first) - column(f0)).cwiseAbs().maxCoeff() > 0.0);
  CHECK((column(run(outside).first) - column(f0)).cwiseAbs().maxCoeff() == 0.0);

  // Gate pools the last 4 positions, so lags older than L-4-11 are invisible.
  MatrixRM old = base;
  old.col(L - 16).array() += 5.0;
  CHECK((run(old).second - g0).cwiseAbs().maxCoeff() == 0.0);
  MatrixRM edge = base;
  edge.col(L - 15).array() += 5.0;
  CHECK((run(edge).second - g0).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("single-layer branches are homogeneous in their kernels") {
  TemporalFilterConfig cfg;
  cfg.branches = {{{{3, 4}}}, {{{7, 2}}}};
  ParameterStore store;
  RngStream rng(11);
  TemporalFilter tf(cfg, store, rng);
  RngStream data(12);
  MatrixRM oci = random_oci(16, 22, data);
  Binding b1;
  ForwardContext c1{b1};
  Buffer f1 = tf.features(c1, oci_tensor(oci)).data();
  for (Parameter* p : store.all()) {
    if (p->name.ends_with(".weight") && p->name.find("conv") != std::string::npos) *p->value *= 2.5;
  }
  Binding b2;
  ForwardContext c2{b2};
  Buffer f2 = tf.features(c2, oci_tensor(oci)).data();
  CHECK((f2 - 2.5 * f1).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("apply_gate modes") {
  Tensor tokens = Tensor::constant({3, 4}, Buffer::Ones(12));
  Tensor zero = Tensor::zeros({4});
  RngStream rng(13);
  Tensor x = Tensor::constant({3, 4}, random_buffer(12, rng));
  CHECK(apply_gate(x, zero, GateMode::Residual).data() == x.data());
  CHECK(apply_gate(x, zero, GateMode::Multiplicative).data().isZero(0.0));
  Tensor half = Tensor::constant({4}, Buffer::Constant(4, 0.5));
  CHECK(apply_gate(tokens, half, GateMode::Residual).data() == Buffer::Constant(12, 1.5));
  CHECK_THROWS_AS(apply_gate(tokens, Tensor::zeros({5}), GateMode::Residual), DimensionError);
  CHECK(parse_gate_mode("multiplicative") == GateMode::Multiplicative);
  CHECK_THROWS(parse_gate_mode("sigmoid"));
}
