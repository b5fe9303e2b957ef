#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "tele/lora.hpp"

using namespace tele;
using namespace tele::testing;

namespace {

struct Layer {
  ParameterStore store;
  LoraLinear lin;

  Layer(Index d, Index k, RngStream& rng) {
    Parameter* w = &store.add("fc.weight", {d, k}, random_buffer(d * k, rng), "backbone");
    Parameter* b = &store.add("fc.bias", {d}, random_buffer(d, rng), "backbone");
    lin = LoraLinear("fc", w, b);
  }

  Buffer eval(const Buffer& x, Index rows) const {
    Binding bind;
    ForwardContext ctx{bind};
    return lin.forward(ctx, Tensor::constant({rows, lin.in_features()}, x)).data();
  }
};

Buffer plain(const Parameter& w, const Parameter& b, const Buffer& x, Index rows) {
  Eigen::Map<const MatrixRM> W(w.value->data(), w.shape[0], w.shape[1]);
  Eigen::Map<const MatrixRM> X(x.data(), rows, w.shape[1]);
  MatrixRM h = (X * W.transpose()).rowwise() + b.value->transpose();
  return Eigen::Map<const Buffer>(h.data(), h.size());
}

}  // namespace

TEST_CASE("fresh adapter leaves the base output untouched") {
  RngStream rng(1);
  Layer l(6, 5, rng);
  Buffer x = random_buffer(15, rng);
  Buffer before = l.eval(x, 3);
  l.lin.attach(l.store, 2, 1.0, 0.1, rng);
  CHECK(l.eval(x, 3) == before);
  CHECK(l.eval(x, 3) == plain(*l.lin.weight(), *l.lin.bias(), x, 3));
  CHECK(l.lin.lora_b()->value->isZero(0.0));
  CHECK_FALSE(l.lin.weight()->trainable);
  CHECK_FALSE(l.lin.bias()->trainable);
  CHECK(l.lin.lora_a()->trainable);
}

TEST_CASE("hand-evaluated rank-1 example") {
  ParameterStore store;
  Parameter* w = &store.add("w", {2, 2}, Buffer::Zero(4), "backbone");
  *w->value << 1, 0, 0, 1;
  Parameter* b = &store.add("b", {2}, Buffer::Zero(2), "backbone");
  Parameter* a = &store.add("a", {1, 2}, Buffer::Zero(2), "lora");
  *a->value << 0, 1;
  Parameter* bb = &store.add("bb", {2, 1}, Buffer::Zero(2), "lora");
  *bb->value << 1, 0;
  LoraLinear lin("w", w, b);
  lin.attach_existing(a, bb, 1.0, 0.1);
  Binding bind;
  ForwardContext ctx{bind};
  Buffer x(2);
  x << 3, 5;
  Buffer h = lin.forward(ctx, Tensor::constant({1, 2}, x)).data();
  CHECK(h[0] == 8.0);
  CHECK(h[1] == 5.0);

  // Doubling alpha doubles the delta.
  LoraLinear twice("w", w, b);
  twice.attach_existing(a, bb, 2.0, 0.1);
  Binding b2;
  ForwardContext c2{b2};
  Buffer h2 = twice.forward(c2, Tensor::constant({1, 2}, x)).data();
  CHECK(h2[0] - 3.0 == 2.0 * (h[0] - 3.0));
  CHECK(h2[1] == 5.0);
}

TEST_CASE("rank bounds and dimension checks") {
  RngStream rng(2);
  Layer l(4, 4, rng);
  CHECK_THROWS_AS(l.lin.attach(l.store, 4, 1.0, 0.0, rng), ConfigError);
  CHECK_THROWS_AS(l.lin.attach(l.store, 0, 1.0, 0.0, rng), ConfigError);
  l.lin.attach(l.store, 3, 1.0, 0.0, rng);
  Binding bind;
  ForwardContext ctx{bind};
  CHECK_THROWS_AS(l.lin.forward(ctx, Tensor::zeros({2, 5})), DimensionError);
}

TEST_CASE("A is drawn with variance 1/r") {
  RngStream rng(3);
  Layer l(64, 64, rng);
  l.lin.attach(l.store, 16, 8.0, 0.0, rng);
  const Buffer& a = *l.lin.lora_a()->value;
  const double var = a.squaredNorm() / static_cast<double>(a.size());
  CHECK(var == doctest::Approx(1.0 / 16.0).epsilon(0.1));
}

TEST_CASE("merge and unmerge") {
  RngStream rng(4);
  Layer l(7, 6, rng);
  l.lin.attach(l.store, 3, 4.0, 0.2, rng);
  const Buffer w0 = *l.lin.weight()->value;

  // B = 0: merging is exact.
  l.lin.merge();
  CHECK(*l.lin.weight()->value == w0);
  l.lin.unmerge();

  *l.lin.lora_b()->value = random_buffer(21, rng);
  Buffer x = random_buffer(100 * 6, rng);
  Buffer adapted = l.eval(x, 100);
  l.lin.merge();
  CHECK(l.lin.merged());
  CHECK_THROWS_AS(l.lin.merge(), std::logic_error);
  Buffer merged = l.eval(x, 100);
  CHECK((merged - adapted).cwiseAbs().maxCoeff() < 1e-10);
  l.lin.unmerge();
  CHECK_THROWS_AS(l.lin.unmerge(), std::logic_error);
  CHECK(std::memcmp(l.lin.weight()->value->data(), w0.data(), sizeof(double) * 42) == 0);
  CHECK(l.eval(x, 100) == adapted);
}

TEST_CASE("dropout applies only on the delta path and only in training") {
  RngStream rng(5);
  Layer l(5, 5, rng);
  l.lin.attach(l.store, 2, 2.0, 0.5, rng);
  *l.lin.lora_b()->value = random_buffer(10, rng);
  Buffer x = random_buffer(20, rng);
  CHECK(l.eval(x, 4) == l.eval(x, 4));

  Binding bind;
  RngStream drop(6);
  ForwardContext train{bind, true, &drop};
  Buffer h = l.lin.forward(train, Tensor::constant({4, 5}, x)).data();
  CHECK(h != l.eval(x, 4));
  // With B = 0 the delta path vanishes even in training.
  l.lin.lora_b()->value->setZero();
  Binding b2;
  ForwardContext train2{b2, true, &drop};
  CHECK(l.lin.forward(train2, Tensor::constant({4, 5}, x)).data() ==
        plain(*l.lin.weight(), *l.lin.bias(), x, 4));
}

TEST_CASE("gradient flow reaches A and B but not W0") {
  RngStream rng(7);
  Layer l(6, 6, rng);
  l.lin.attach(l.store, 2, 1.0, 0.0, rng);
  *l.lin.lora_b()->value = random_buffer(12, rng);
  Buffer x = random_buffer(18, rng);
  auto loss = [&](Binding& b) {
    ForwardContext ctx{b};
    return weighted_readout(l.lin.forward(ctx, Tensor::constant({3, 6}, x)));
  };
  Binding bind(true);
  backward(loss(bind), bind.leaves());
  CHECK(bind.grad_of(*l.lin.lora_a()).cwiseAbs().minCoeff() > 0.0);
  CHECK(bind.grad_of(*l.lin.lora_b()).cwiseAbs().minCoeff() > 0.0);
  CHECK_FALSE(bind(*l.lin.weight()).requires_grad());
  CHECK_FALSE(bind(*l.lin.weight()).has_grad());
  CHECK(param_grad_check(loss, {l.lin.lora_a(), l.lin.lora_b()}).max_rel_error < 1e-6);
}

TEST_CASE("injection on the toy backbone") {
  ModelConfig mc;
  mc.backbone.mlp_ratio = 1;
  ForecastModel model(mc, 1, false);
  LoraConfig lc;
  lc.r = 8;
  lc.alpha = 4;
  const Index before = account(model.params()).total;
  auto wrapped = model.inject_lora(lc);
  CHECK(wrapped.size() == 12);
  const ParamAccount acc = account(model.params());
  CHECK(acc.groups.at("lora").total == 12 * 8 * (64 + 64));
  CHECK(acc.groups.at("lora").total == 12288);
  CHECK(acc.total == before + 12288);
  CHECK(acc.trainable + (acc.total - acc.trainable) == acc.total);

  LoraConfig bad;
  bad.targets = {"blocks.*.attn.q", "decoder.*"};
  ForecastModel other(mc, 1, false);
  try {
    other.inject_lora(bad);
    FAIL("expected a configuration error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("decoder.*") != std::string::npos);
  }
}

TEST_CASE("glob patterns") {
  CHECK(glob_match("blocks.*.attn.q", "blocks.0.attn.q"));
  CHECK(glob_match("blocks.*.attn.q", "blocks.12.attn.q"));
  CHECK_FALSE(glob_match("blocks.*.attn.q", "blocks.0.attn.qq"));
  CHECK(glob_match("*", "anything"));
  CHECK(glob_match("blocks.1.*", "blocks.1.mlp.fc2"));
  CHECK_FALSE(glob_match("blocks.1.*", "blocks.0.mlp.fc2"));
}

TEST_CASE("trainable fraction arithmetic") {
  ParamAccount frozen;
  frozen.total = 1000;
  CHECK(trainable_fraction(frozen) == 0.0);
  CHECK_THROWS(trainable_fraction(ParamAccount{}));

  // One 4096×4096 frozen matrix with a rank-32 adapter.
  ParamAccount big;
  const Index lora = 32 * (4096 + 4096);
  big.total = 4096 * 4096 + lora;
  big.trainable = lora;
  big.groups["lora"] = {lora, lora};
  big.groups["backbone"] = {4096 * 4096, 0};
  CHECK(lora == 262144);
  CHECK(big.total == 17039360);
  CHECK(trainable_fraction(big) == doctest::Approx(0.01538).epsilon(1e-3));
  CHECK(group_fractions(big).at("lora") == trainable_fraction(big));

  // Reference-scale figures: 700k updated of 64M.
  CHECK(std::abs(700e3 / 64e6 * 100.0 - 1.1) < 0.1);
}
