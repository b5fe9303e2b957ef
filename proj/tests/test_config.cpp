#include "doctest.h"
#include "fixtures.hpp"
#include "tele/config.hpp"

using namespace tele;

TEST_CASE("defaults finalize and match the documented toy architecture") {
  RunConfig cfg;
  cfg.finalize();
  CHECK(cfg.data.grid.n_lat == 16);
  CHECK(cfg.data.grid.n_lon == 32);
  CHECK(cfg.model.backbone.grid == cfg.data.grid);
  CHECK(cfg.model.temporal.n_oci == cfg.data.n_oci);
  CHECK(cfg.model.temporal.lag_window == cfg.data.lag_window);
  CHECK(cfg.model.temporal.embed_dim == cfg.model.backbone.embed_dim);
  CHECK(cfg.hash().size() == 16);
}

TEST_CASE("text round trip reproduces every key") {
  RunConfig a = testing::tiny_run_config();
  a.seed = 17;
  a.train.schedule.base_lr = 1.25e-3;
  a.heatmap_variables = {"U850", "Q850"};
  const std::string text = a.to_text();
  RunConfig b = parse_config(text);
  b.finalize();
  CHECK(b.to_text() == text);
  CHECK(b.hash() == a.hash());
  for (const auto& k : RunConfig::keys()) CHECK_MESSAGE(a.get(k) == b.get(k), k);
}

TEST_CASE("parser: comments, blanks and whitespace") {
  RunConfig cfg = parse_config("# header\n\n  seed =  42   # trailing\nlora.r=8\n");
  CHECK(cfg.seed == 42);
  CHECK(cfg.lora.r == 8);
}

TEST_CASE("parser errors carry the line number") {
  try {
    parse_config("seed = 1\nnot.a.key = 3\n");
    FAIL("unknown key accepted");
  } catch (const ConfigParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    CHECK(std::string(e.what()).find("not.a.key") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("seed 1\n"), ConfigParseError);
  CHECK_THROWS_AS(parse_config("seed = banana\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("train.mode = sideways\n"), ConfigError);
}

TEST_CASE("finalize rejects inconsistent settings") {
  RunConfig cfg = testing::tiny_run_config();
  SUBCASE("pretrain is not an adaptation mode") {
    cfg.train.mode = Mode::Pretrain;
    CHECK_THROWS_AS(cfg.finalize(), ConfigError);
  }
  SUBCASE("window must divide the token grid") {
    cfg.model.backbone.window_lat = 3;
    CHECK_THROWS(cfg.finalize());
  }
  SUBCASE("zero epochs") {
    cfg.train.schedule.total_epochs = 0;
    CHECK_THROWS_AS(cfg.finalize(), ConfigError);
  }
  SUBCASE("dropout range") {
    cfg.lora.dropout = 1.0;
    CHECK_THROWS_AS(cfg.finalize(), ConfigError);
  }
}

TEST_CASE("hash tracks architecture only") {
  const RunConfig base = testing::tiny_run_config();
  RunConfig c = base;
  c.seed = 99;
  c.train.schedule.base_lr = 0.5;
  c.data.noise = 0.1;
  c.lora.alpha = 7.0;
  CHECK(c.hash() == base.hash());
  c = base;
  c.set("model.embed_dim", "16");
  CHECK(c.hash() != base.hash());
  c = base;
  c.set("lora.r", "3");
  CHECK(c.hash() != base.hash());
  c = base;
  c.set("data.n_oci", "3");
  CHECK(c.hash() != base.hash());
}

TEST_CASE("mode names round trip") {
  for (Mode m : {Mode::Pretrain, Mode::Frozen, Mode::LoraOci, Mode::LoraNoOci, Mode::FullFinetune}) {
    CHECK(parse_mode(to_string(m)) == m);
  }
  CHECK(to_string(Mode::LoraNoOci) == "lora_no_oci");
}
