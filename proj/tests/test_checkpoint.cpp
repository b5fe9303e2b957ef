#include <filesystem>

#include "doctest.h"
#include "fixtures.hpp"
#include "tele/checkpoint.hpp"
#include "tele/tns.hpp"
#include "tele/training.hpp"

using namespace tele;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "tele_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

std::unique_ptr<ForecastModel> lora_model(std::uint64_t seed) {
  RunConfig cfg = testing::tiny_run_config();
  auto m = build_model(cfg, Mode::LoraOci, seed);
  RngStream rng(seed + 100);
  testing::randomize(m->params(), rng, 0.2, "lora");
  testing::randomize(m->params(), rng, 0.2, "temporal_filter");
  return m;
}

}  // namespace

TEST_CASE("save, load, save is byte identical") {
  auto m = lora_model(3);
  const Checkpoint ck = capture(*m, "adapted", "lora_oci", 4, "00000000deadbeef");
  const fs::path a = scratch("a.ckpt"), b = scratch("b.ckpt");
  save_checkpoint(a, ck);
  save_checkpoint(b, load_checkpoint(a));
  CHECK(read_file(a) == read_file(b));
  const Checkpoint back = load_checkpoint(a);
  CHECK(back.tag == "adapted");
  CHECK(back.mode == "lora_oci");
  CHECK(back.epoch == 4);
  CHECK(back.lora.size() == m->adapted_layers().size());
}

TEST_CASE("restored model reproduces forwards bitwise") {
  auto src = lora_model(5);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(capture(*src, "t", "lora_oci", 0, "h")));
  auto dst = lora_model(6);
  restore(*dst, ck, RestoreScope::Strict);
  RngStream rng(77);
  const GridSpec g = src->config().backbone.grid;
  for (int k = 0; k < 10; ++k) {
    const Buffer x = testing::random_state(g, rng);
    const MatrixRM oci = testing::random_oci(2, 14, rng);
    const Buffer ya = src->predict(x, &oci);
    const Buffer yb = dst->predict(x, &oci);
    CHECK(std::memcmp(ya.data(), yb.data(), sizeof(double) * ya.size()) == 0);
  }
}

TEST_CASE("optimizer moments and trainable flags survive the round trip") {
  auto m = lora_model(8);
  for (Parameter* p : m->params().all()) {
    if (!p->trainable) continue;
    Buffer grad = Buffer::Constant(p->numel(), 0.01);
    adam_step(p->adam, *p->value, grad, 1e-3, AdamConfig{}, p->name.c_str());
  }
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(capture(*m, "t", "lora_oci", 1, "h")));
  auto n = lora_model(9);
  configure_trainable(*n, Mode::Frozen);
  restore(*n, ck, RestoreScope::Strict);
  for (const Parameter* p : m->params().all()) {
    const Parameter& q = *n->params().find(p->name);
    CHECK(q.trainable == p->trainable);
    CHECK(q.adam.step == p->adam.step);
    if (p->adam.step > 0) {
      CHECK((q.adam.m.array() == p->adam.m.array()).all());
      CHECK((q.adam.v.array() == p->adam.v.array()).all());
    }
  }
}

TEST_CASE("load failures are distinct and descriptive") {
  using K = CheckpointError::Kind;
  auto m = lora_model(1);
  const Checkpoint ck = capture(*m, "t", "lora_oci", 0, "h");
  auto kind_of = [](auto&& fn) {
    try {
      fn();
    } catch (const CheckpointError& e) {
      return e.kind();
    }
    FAIL("no CheckpointError");
    return K::Io;
  };
  CHECK(kind_of([] { load_checkpoint(scratch("does_not_exist.ckpt")); }) == K::Io);
  CHECK(kind_of([] { decode_checkpoint("NOTACKPT-----------"); }) == K::BadMagic);
  std::string bytes = encode_checkpoint(ck);
  CHECK(kind_of([&] { decode_checkpoint(bytes.substr(0, bytes.size() - 9)); }) == K::Corrupt);

  Checkpoint future = ck;
  future.version = Checkpoint::kVersion + 1;
  CHECK(kind_of([&] { decode_checkpoint(encode_checkpoint(future)); }) == K::Version);

  Checkpoint extra = ck;
  extra.tensors.push_back({"ghost.weight", {2}, Buffer::Zero(2), true, "lora", {}});
  try {
    restore(*m, extra, RestoreScope::Strict);
    FAIL("unexpected tensor accepted");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == K::UnexpectedKeys);
    CHECK(std::string(e.what()).find("ghost.weight") != std::string::npos);
  }

  Checkpoint missing = ck;
  const std::string dropped = missing.tensors.back().name;
  missing.tensors.pop_back();
  try {
    restore(*m, missing, RestoreScope::Strict);
    FAIL("missing tensor accepted");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == K::MissingKeys);
    CHECK(std::string(e.what()).find(dropped) != std::string::npos);
  }

  Checkpoint bad_shape = ck;
  bad_shape.tensors.front().shape.push_back(1);
  CHECK(kind_of([&] { restore(*m, bad_shape, RestoreScope::Strict); }) == K::ShapeMismatch);

  CHECK(kind_of([&] { check_hash(ck, "other", false); }) == K::HashMismatch);
  CHECK_FALSE(check_hash(ck, "other", true));
  CHECK(check_hash(ck, "h", false));
}

TEST_CASE("backbone weights load into an adapted model by value") {
  RunConfig cfg = testing::tiny_run_config();
  auto pre = build_model(cfg, Mode::Pretrain, 11);
  const Checkpoint ck = capture(*pre, "pretrained-1day", "pretrain", 1, cfg.hash());
  auto m = build_model(cfg, Mode::LoraOci, 12);
  CHECK_THROWS_AS(restore(*m, ck, RestoreScope::Strict), CheckpointError);
  restore(*m, ck, RestoreScope::Values);
  for (const Parameter* p : pre->params().all()) {
    CHECK((m->params().find(p->name)->value->array() == p->value->array()).all());
  }
}
