#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "fixtures.hpp"
#include "tele/training.hpp"

using namespace tele;

namespace {

struct TinyWorld {
  RunConfig cfg = testing::tiny_run_config();
  Dataset ds = to_dataset(generate_synthetic(cfg.data, cfg.data_seed));
  PreparedData data{ds};
};

const TinyWorld& world() {
  static const TinyWorld w;
  return w;
}

TrainOptions options(Mode mode, const TrainConfig& tc, std::uint64_t seed) {
  TrainOptions o;
  o.mode = mode;
  o.config = tc;
  o.seed = seed;
  o.tag = "test";
  return o;
}

std::vector<Buffer> values_of(const ForecastModel& m) {
  std::vector<Buffer> out;
  for (const Parameter* p : m.params().all()) out.push_back(*p->value);
  return out;
}

}  // namespace

TEST_CASE("loss weights average the nine variables with latitude weights") {
  const GridSpec g{4, 8, 2, {500, 850}};
  const Buffer w = loss_weights(g);
  CHECK(w.size() == channel_count(g) * g.cells());
  CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-12));
  // A constant unit error scores exactly 1.
  Binding bind(false);
  const Tensor pred = Tensor::constant({w.size()}, Buffer::Constant(w.size(), 2.0));
  CHECK(weighted_mse(pred, Buffer::Constant(w.size(), 1.0), w).item() == doctest::Approx(1.0).epsilon(1e-12));
  // The two levels of an upper-air variable share one variable's weight.
  const Index cells = g.cells();
  const Index z500 = upper_channel(g, 0, 0), z850 = upper_channel(g, 0, 1);
  CHECK(w.segment(z500 * cells, cells).sum() + w.segment(z850 * cells, cells).sum() ==
        doctest::Approx(w.segment(0, cells).sum()).epsilon(1e-12));
}

TEST_CASE("trainable fractions by mode") {
  RunConfig cfg;
  cfg.finalize();
  const auto oci = account(build_model(cfg, Mode::LoraOci, 0)->params());
  CHECK(trainable_fraction(oci) > 0.0);
  CHECK(trainable_fraction(oci) < 0.15);
  const auto full = account(build_model(cfg, Mode::FullFinetune, 0)->params());
  CHECK(trainable_fraction(full) == 1.0);
  const auto frozen = account(build_model(cfg, Mode::Frozen, 0)->params());
  CHECK(frozen.trainable == 0);
  CHECK(frozen.total == full.total);
}

TEST_CASE("epoch 0 of an adapted model equals the frozen pretrained model") {
  const TinyWorld& w = world();
  auto pre = build_model(w.cfg, Mode::Frozen, 4);
  const Checkpoint ck = capture(*pre, "p", "pretrain", 0, w.cfg.hash());
  const auto pairs = subsample(w.ds.manifest("val").pairs, 8);
  const double frozen = validation_loss(*pre, w.data, Mode::Frozen, pairs);
  for (Mode mode : {Mode::LoraOci, Mode::LoraNoOci}) {
    auto m = build_model(w.cfg, mode, 9);
    restore(*m, ck, RestoreScope::Values);
    CHECK(validation_loss(*m, w.data, mode, pairs) == frozen);
  }
}

TEST_CASE("frozen parameters do not move over 200 LoRA steps") {
  const TinyWorld& w = world();
  auto m = build_model(w.cfg, Mode::LoraOci, 2);
  std::vector<Buffer> before;
  std::vector<const Parameter*> frozen;
  for (const Parameter* p : m->params().all()) {
    if (!p->trainable) {
      frozen.push_back(p);
      before.push_back(*p->value);
    }
  }
  REQUIRE_FALSE(frozen.empty());
  TrainConfig tc = w.cfg.train;
  tc.schedule.total_epochs = 2;
  tc.samples_per_epoch = 100;
  tc.val_samples = 2;
  const TrainResult r = train_model(*m, w.data, w.ds.manifest("train"), w.ds.manifest("val"),
                                    options(Mode::LoraOci, tc, 2));
  CHECK(r.steps == 200);
  double drift = 0.0;
  for (std::size_t i = 0; i < frozen.size(); ++i) {
    drift = std::max(drift, (*frozen[i]->value - before[i]).cwiseAbs().maxCoeff());
  }
  CHECK(drift == 0.0);
}

TEST_CASE("pretraining loss decreases over the first epochs") {
  const TinyWorld& w = world();
  auto m = build_model(w.cfg, Mode::Pretrain, 1);
  TrainConfig tc = w.cfg.pretrain;
  tc.schedule.total_epochs = 5;
  tc.samples_per_epoch = 40;
  const auto train = with_horizon(w.ds.manifest("train"), 2);
  const auto val = with_horizon(w.ds.manifest("val"), 2);
  const TrainResult r = train_model(*m, w.data, train, val, options(Mode::Pretrain, tc, 1));
  REQUIRE(r.epochs.size() == 5);
  CHECK(r.epochs.back().train_loss < r.epochs.front().train_loss);
  CHECK(r.best_val_loss < r.initial_val_loss);
  // The model ends on its best weights.
  CHECK(validation_loss(*m, w.data, Mode::Pretrain, subsample(val.pairs, tc.val_samples)) == r.best_val_loss);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const TinyWorld& w = world();
  TrainConfig tc = w.cfg.train;
  tc.schedule.total_epochs = 2;
  std::vector<std::vector<Buffer>> finals;
  std::vector<double> losses;
  for (int rep = 0; rep < 2; ++rep) {
    auto m = build_model(w.cfg, Mode::LoraOci, 21);
    RngStream rng(5);
    testing::randomize(m->params(), rng, 0.1, "lora");
    const TrainResult r = train_model(*m, w.data, w.ds.manifest("train"), w.ds.manifest("val"),
                                      options(Mode::LoraOci, tc, 21));
    finals.push_back(values_of(*m));
    losses.push_back(r.epochs.back().train_loss);
  }
  CHECK(losses[0] == losses[1]);
  for (std::size_t i = 0; i < finals[0].size(); ++i) {
    CHECK(std::memcmp(finals[0][i].data(), finals[1][i].data(), sizeof(double) * finals[0][i].size()) == 0);
  }
}

TEST_CASE("divergence aborts and leaves the best weights in place") {
  const TinyWorld& w = world();
  auto m = build_model(w.cfg, Mode::Pretrain, 3);
  const auto start = values_of(*m);
  TrainConfig tc = w.cfg.pretrain;
  tc.schedule.base_lr = 1e300;
  tc.samples_per_epoch = 5;
  const std::filesystem::path out = std::filesystem::temp_directory_path() / "tele_test_abort.ckpt";
  std::filesystem::remove(out);
  TrainOptions o = options(Mode::Pretrain, tc, 3);
  o.checkpoint_path = out;
  CHECK_THROWS_AS(train_model(*m, w.data, w.ds.manifest("train"), w.ds.manifest("val"), o), TrainingAborted);
  const auto after = values_of(*m);
  for (std::size_t i = 0; i < start.size(); ++i) CHECK((after[i].array() == start[i].array()).all());
  CHECK(std::filesystem::exists(out));
}

TEST_CASE("rollout: one iteration is the direct model, bad horizons throw") {
  const TinyWorld& w = world();
  auto m = build_model(w.cfg, Mode::Frozen, 7);
  const Forecaster direct = direct_forecaster(*m, w.data, Mode::Frozen);
  const Forecaster one = rollout_forecaster(*m, w.data, Mode::Frozen, 4, 4);
  const Index t = w.ds.manifest("test").pairs.front().first;
  CHECK((direct(t).array() == one(t).array()).all());
  CHECK_THROWS_AS(rollout_forecaster(*m, w.data, Mode::Frozen, 3, 4), ConfigError);

  // Two iterations equal the direct model applied to its own output.
  const Forecaster two = rollout_forecaster(*m, w.data, Mode::Frozen, 2, 4);
  const Buffer step1 = m->predict(w.data.normalized_state(t));
  const Buffer expect = denormalize_state(m->predict(step1), w.data.stats(), w.data.grid());
  CHECK((two(t).array() == expect.array()).all());
}

TEST_CASE("lora_no_oci sees zeros and lora_oci sees the lag window") {
  const TinyWorld& w = world();
  CHECK(mode_uses_oci(Mode::LoraOci));
  CHECK_FALSE(mode_uses_oci(Mode::LoraNoOci));
  const Index t = w.ds.manifest("train").pairs[3].first;
  const MatrixRM a = w.data.oci_at(t);
  CHECK(a.rows() == w.ds.n_oci());
  CHECK(a.cols() == w.ds.lag_window());
  CHECK(a.cwiseAbs().maxCoeff() > 0.0);
  CHECK(w.data.zero_oci().cwiseAbs().maxCoeff() == 0.0);
  // Consecutive inputs shift the lag window by one column.
  const MatrixRM b = w.data.oci_at(t + 1);
  CHECK((b.leftCols(a.cols() - 1).array() == a.rightCols(a.cols() - 1).array()).all());
}
