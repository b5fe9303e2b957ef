// Command-line front end: gen-data, pretrain, adapt, rollout, evaluate, ablate.

#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "tele/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitError = 1;
constexpr int kExitNoSkill = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  bool overwrite = false;
  bool force = false;
};

tele::CommandOptions resolve(const Globals& g, bool out_is_data) {
  tele::CommandOptions opts;
  tele::RunConfig& cfg = opts.config;
  if (!g.config.empty()) cfg = tele::load_config(g.config, cfg);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw tele::ConfigError("--set expects key=value, got " + kv);
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) (out_is_data ? cfg.data_dir : cfg.out_dir) = g.out;
  cfg.finalize();
  opts.overwrite = g.overwrite;
  opts.force = g.force;
  opts.echo = &std::cout;
  return opts;
}

fs::path pretrained_or_default(const std::string& given, const tele::RunConfig& cfg) {
  return given.empty() ? cfg.out_dir / "pretrained.ckpt" : fs::path(given);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teleconnection-conditioned LoRA adaptation of a windowed-attention forecaster"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "run seed (parameter init, shuffling, dropout)");
  app.add_option("--out", g.out, "output directory (dataset directory for gen-data)");
  app.add_option("--set", g.overrides, "override one config key, key=value (repeatable)");
  app.add_flag("--overwrite", g.overwrite, "replace existing outputs");
  app.add_flag("--force", g.force, "load checkpoints whose config hash differs");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* pre = app.add_subcommand("pretrain", "train the backbone on the 1-step proxy");
  std::string pretrained;
  auto* adapt = app.add_subcommand("adapt", "adapt the pretrained backbone (train.mode)");
  adapt->add_option("--pretrained", pretrained, "pretrained checkpoint (default OUT/pretrained.ckpt)");
  auto* roll = app.add_subcommand("rollout", "score the pretrained model rolled out to data.horizon");
  roll->add_option("--pretrained", pretrained, "pretrained checkpoint (default OUT/pretrained.ckpt)");
  std::vector<std::string> checkpoints;
  auto* eval = app.add_subcommand("evaluate", "score checkpoints against persistence");
  eval->add_option("checkpoints", checkpoints, "checkpoint files")->required()->check(CLI::ExistingFile);
  auto* abl = app.add_subcommand("ablate", "lora_oci versus lora_no_oci from the same weights and seed");
  abl->add_option("--pretrained", pretrained, "pretrained checkpoint (default OUT/pretrained.ckpt)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto opts = resolve(g, true);
      tele::cmd_gen_data(opts, opts.config.data_dir);
    } else if (pre->parsed()) {
      const auto outcome = tele::cmd_pretrain(resolve(g, false));
      if (!outcome.beats_persistence()) return kExitNoSkill;
    } else if (adapt->parsed()) {
      const auto opts = resolve(g, false);
      tele::cmd_adapt(opts, pretrained_or_default(pretrained, opts.config));
    } else if (roll->parsed()) {
      const auto opts = resolve(g, false);
      tele::cmd_rollout(opts, pretrained_or_default(pretrained, opts.config));
    } else if (eval->parsed()) {
      std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
      tele::cmd_evaluate(resolve(g, false), paths);
    } else if (abl->parsed()) {
      const auto opts = resolve(g, false);
      tele::cmd_ablate(opts, pretrained_or_default(pretrained, opts.config));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return 0;
}
