#include "tele/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <iostream>

#include "tele/synthetic.hpp"
#include "tele/tns.hpp"

namespace fs = std::filesystem;

namespace tele {

RunLog::RunLog(const fs::path& file, std::ostream* echo) : file_(file, std::ios::app), echo_(echo) {
  if (!file_) throw std::runtime_error("cannot open log " + file.string());
}

void RunLog::operator()(const std::string& line) {
  file_ << line << '\n';
  file_.flush();
  if (echo_) *echo_ << line << std::endl;
}

namespace {

std::string fmt(const char* pattern, double a, double b = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b);
  return buf;
}

void prepare_out(const CommandOptions& opts) {
  fs::create_directories(opts.config.out_dir);
  write_file(opts.config.out_dir / "config.resolved", opts.config.to_text());
}

void guard_output(const CommandOptions& opts, const fs::path& path) {
  if (fs::exists(path) && !opts.overwrite) {
    throw std::runtime_error(path.string() + " already exists (pass --overwrite to replace it)");
  }
}

Dataset load_dataset(const RunConfig& cfg) {
  Dataset ds = Dataset::load(cfg.data_dir);
  if (!(ds.grid() == cfg.data.grid) || ds.lag_window() != cfg.data.lag_window || ds.n_oci() != cfg.data.n_oci) {
    throw ConfigError("dataset in " + cfg.data_dir.string() + " does not match the configured grid / OCI geometry");
  }
  return ds;
}

std::function<const Buffer&(Index)> states_of(const Dataset& ds) {
  return [&ds](Index t) -> const Buffer& { return ds.state(t); };
}

std::unique_ptr<ForecastModel> adapted_from(const RunConfig& cfg, Mode mode, const Checkpoint& pretrained) {
  auto model = build_model(cfg, mode, cfg.seed);
  restore(*model, pretrained, RestoreScope::Values);
  configure_trainable(*model, mode);
  return model;
}

}  // namespace

void cmd_gen_data(const CommandOptions& opts, const fs::path& dir) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!opts.overwrite) throw std::runtime_error(dir.string() + " is not empty (pass --overwrite to replace it)");
    fs::remove_all(dir / "fields");
  }
  fs::create_directories(dir);
  const RunConfig& cfg = opts.config;
  SyntheticDataset ds = generate_synthetic(cfg.data, cfg.data_seed);
  write_dataset(ds, dir);
  write_file(dir / "config.resolved", cfg.to_text());
  if (opts.echo) {
    *opts.echo << "dataset: " << cfg.data.steps << " steps, grid " << cfg.data.grid.n_lat << "x" << cfg.data.grid.n_lon
               << "x" << cfg.data.grid.n_level << " levels, " << channel_count(cfg.data.grid) << " channels, "
               << cfg.data.n_oci << " OCI rows of length " << ds.oci_raw.cols() << ", horizon "
               << cfg.data.horizon << " steps\n"
               << "pairs: train " << ds.pairs.train.size() << ", val " << ds.pairs.val.size() << ", test "
               << ds.pairs.test.size() << "\nactive indices:";
    for (Index k : ds.truth.active) *opts.echo << ' ' << k;
    *opts.echo << "\nwritten to " << dir.string() << std::endl;
  }
}

PretrainOutcome cmd_pretrain(const CommandOptions& opts) {
  const RunConfig& cfg = opts.config;
  prepare_out(opts);
  PretrainOutcome out;
  out.checkpoint = cfg.out_dir / "pretrained.ckpt";
  guard_output(opts, out.checkpoint);
  RunLog log(cfg.out_dir / "pretrain.log", opts.echo);
  Dataset ds = load_dataset(cfg);
  PreparedData data(ds);
  const DatasetManifest train = with_horizon(ds.manifest("train"), cfg.pretrain_horizon);
  const DatasetManifest val = with_horizon(ds.manifest("val"), cfg.pretrain_horizon);
  auto model = build_model(cfg, Mode::Pretrain, cfg.seed);
  log("pretrain: horizon " + std::to_string(cfg.pretrain_horizon) + " steps, " +
      std::to_string(account(model->params()).total) + " parameters, config hash " + cfg.hash());
  TrainOptions to;
  to.mode = Mode::Pretrain;
  to.config = cfg.pretrain;
  to.seed = cfg.seed;
  to.tag = "pretrained-1day";
  to.config_hash = cfg.hash();
  to.checkpoint_path = out.checkpoint;
  to.log = [&log](const std::string& s) { log(s); };
  TrainResult res = train_model(*model, data, train, val, to);
  const auto pairs = subsample(val.pairs, cfg.pretrain.val_samples);
  out.val_loss = res.best_val_loss;
  out.persistence_val_loss = persistence_loss(data, pairs);
  log(fmt("validation loss %.9g, persistence %.9g", out.val_loss, out.persistence_val_loss));
  if (!out.beats_persistence()) log("WARNING: pretrained model does not beat persistence; pretraining is misconfigured");
  return out;
}

AdaptOutcome cmd_adapt(const CommandOptions& opts, const fs::path& pretrained) {
  const RunConfig& cfg = opts.config;
  const Mode mode = cfg.train.mode;
  if (mode == Mode::Frozen || mode == Mode::Pretrain) {
    throw ConfigError("adapt needs train.mode lora_oci, lora_no_oci or full_finetune");
  }
  prepare_out(opts);
  AdaptOutcome out;
  out.checkpoint = cfg.out_dir / (to_string(mode) + ".ckpt");
  guard_output(opts, out.checkpoint);
  RunLog log(cfg.out_dir / (to_string(mode) + ".log"), opts.echo);
  const Checkpoint base = load_checkpoint(pretrained);
  if (!check_hash(base, cfg.hash(), opts.force)) log("WARNING: config hash mismatch ignored (--force)");
  Dataset ds = load_dataset(cfg);
  PreparedData data(ds);
  auto model = adapted_from(cfg, mode, base);
  out.params = account(model->params());
  log("adapt: mode " + to_string(mode) + ", horizon " + std::to_string(cfg.data.horizon) + " steps, trainable " +
      std::to_string(out.params.trainable) + " of " + std::to_string(out.params.total) +
      fmt(" (%.3f%%)", 100.0 * trainable_fraction(out.params)));
  TrainOptions to;
  to.mode = mode;
  to.config = cfg.train;
  to.seed = cfg.seed;
  to.tag = "adapted";
  to.config_hash = cfg.hash();
  to.checkpoint_path = out.checkpoint;
  to.log = [&log](const std::string& s) { log(s); };
  out.result = train_model(*model, data, ds.manifest("train"), ds.manifest("val"), to);
  return out;
}

std::unique_ptr<ForecastModel> model_from_checkpoint(const RunConfig& cfg, const Checkpoint& ckpt, bool force,
                                                     Mode* mode_out) {
  check_hash(ckpt, cfg.hash(), force);
  Mode mode = parse_mode(ckpt.mode);
  if (mode == Mode::Pretrain) mode = Mode::Frozen;
  auto model = build_model(cfg, mode, cfg.seed);
  restore(*model, ckpt, RestoreScope::Strict);
  if (mode_out) *mode_out = mode;
  return model;
}

MetricReport cmd_rollout(const CommandOptions& opts, const fs::path& pretrained) {
  const RunConfig& cfg = opts.config;
  prepare_out(opts);
  const fs::path csv = cfg.out_dir / "rollout_metrics.csv";
  guard_output(opts, csv);
  RunLog log(cfg.out_dir / "rollout.log", opts.echo);
  Dataset ds = load_dataset(cfg);
  PreparedData data(ds);
  const Checkpoint ck = load_checkpoint(pretrained);
  Mode mode = Mode::Frozen;
  auto model = model_from_checkpoint(cfg, ck, opts.force, &mode);
  const DatasetManifest& m = ds.manifest(cfg.eval_split);
  const Index iterations = cfg.data.horizon / std::max<Index>(1, cfg.pretrain_horizon);
  MetricReport rep = evaluate(
      {{"ar_rollout", rollout_forecaster(*model, data, mode, cfg.pretrain_horizon, cfg.data.horizon)}}, m,
      states_of(ds), data.climatology());
  rep.config_hash = cfg.hash();
  rep.write_csv(csv);

  // Error growth: the same model at its own step versus the full rollout.
  const DatasetManifest one = with_horizon(m, cfg.pretrain_horizon);
  MetricReport direct = evaluate({{"ar_rollout", direct_forecaster(*model, data, mode)}}, one, states_of(ds),
                                 data.climatology());
  log("rollout: " + std::to_string(iterations) + " iterations of a " + std::to_string(cfg.pretrain_horizon) +
      "-step model to " + std::to_string(cfg.data.horizon) + " steps on " + cfg.eval_split);
  for (const auto& r : rep.rows) {
    if (r.model != "ar_rollout") continue;
    log(r.variable + fmt(": wrmse 1-step %.6g, rollout %.6g", direct.row("ar_rollout", r.variable).wrmse, r.wrmse));
  }
  return rep;
}

Panels make_panels(const GridSpec& grid, Index channel, const Buffer& input, const Buffer& target,
                   const Buffer& prediction) {
  const Index cells = grid.cells();
  auto field = [&](const Buffer& b) -> MatrixRM {
    return Eigen::Map<const MatrixRM>(b.data() + channel * cells, grid.n_lat, grid.n_lon);
  };
  Panels p{field(input), field(target), field(prediction), {}};
  p.bias = p.prediction - p.target;
  return p;
}

void write_pgm(const fs::path& path, const MatrixRM& field) {
  const double lo = field.minCoeff();
  const double hi = field.maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  std::string bytes = "P5\n" + std::to_string(field.cols()) + " " + std::to_string(field.rows()) + "\n255\n";
  // Row 0 is the southernmost latitude; images put north at the top.
  for (Index i = field.rows() - 1; i >= 0; --i) {
    for (Index j = 0; j < field.cols(); ++j) {
      const double v = std::round(255.0 * (field(i, j) - lo) / span);
      bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(v, 0.0, 255.0))));
    }
  }
  write_file(path, bytes);
}

MetricReport cmd_evaluate(const CommandOptions& opts, const std::vector<fs::path>& checkpoints) {
  const RunConfig& cfg = opts.config;
  prepare_out(opts);
  const fs::path csv = cfg.out_dir / "metrics.csv";
  guard_output(opts, csv);
  RunLog log(cfg.out_dir / "evaluate.log", opts.echo);
  Dataset ds = load_dataset(cfg);
  PreparedData data(ds);
  const DatasetManifest& m = ds.manifest(cfg.eval_split);

  std::vector<std::unique_ptr<ForecastModel>> models;
  std::vector<Mode> modes;
  std::vector<NamedForecaster> forecasters;
  for (const auto& path : checkpoints) {
    const Checkpoint ck = load_checkpoint(path);
    Mode mode = Mode::Frozen;
    models.push_back(model_from_checkpoint(cfg, ck, opts.force, &mode));
    modes.push_back(mode);
    std::string name = to_string(mode);
    for (const auto& f : forecasters) {
      if (f.name == name) name += "_" + std::to_string(forecasters.size());
    }
    forecasters.push_back({name, direct_forecaster(*models.back(), data, mode)});
    log("model " + name + " from " + path.string() + " (epoch " + std::to_string(ck.epoch) + ")");
  }
  MetricReport rep = evaluate(forecasters, m, states_of(ds), data.climatology());
  rep.config_hash = cfg.hash();
  rep.write_csv(csv);
  for (const auto& r : rep.rows) {
    log(r.model + " " + r.variable + fmt(" wrmse %.6g", r.wrmse) +
        (r.acc_defined ? fmt(" wacc %.6f", r.wacc) : std::string(" wacc undefined")));
  }

  const Index t = cfg.heatmap_timestamp >= 0 ? cfg.heatmap_timestamp : m.pairs.front().first;
  const Index target_t = t + m.horizon_steps;
  if (!ds.has_state(t) || !ds.has_state(target_t)) {
    throw ConfigError("heatmap timestamp " + std::to_string(t) + " has no input/target pair in the dataset");
  }
  const fs::path dir = cfg.out_dir / "heatmaps";
  fs::create_directories(dir);
  const auto labels = channel_labels(ds.grid());
  for (std::size_t k = 0; k < forecasters.size(); ++k) {
    const Buffer pred = forecasters[k].predict(t);
    for (const auto& var : cfg.heatmap_variables) {
      const auto it = std::find(labels.begin(), labels.end(), var);
      if (it == labels.end()) throw ConfigError("unknown heatmap variable " + var);
      const Panels p = make_panels(ds.grid(), it - labels.begin(), ds.state(t), ds.state(target_t), pred);
      const std::pair<const char*, const MatrixRM*> panels[] = {
          {"input", &p.input}, {"target", &p.target}, {"prediction", &p.prediction}, {"bias", &p.bias}};
      for (const auto& [panel, field] : panels) {
        const std::string stem = forecasters[k].name + "_" + var + "_" + panel;
        write_pgm(dir / (stem + ".pgm"), *field);
        log("heatmap " + stem + fmt(" min %.6g max %.6g", field->minCoeff(), field->maxCoeff()));
      }
    }
  }
  return rep;
}

std::vector<AblationRow> cmd_ablate(const CommandOptions& opts, const fs::path& pretrained) {
  const RunConfig& cfg = opts.config;
  prepare_out(opts);
  const fs::path csv = cfg.out_dir / "ablation.csv";
  guard_output(opts, csv);
  RunLog log(cfg.out_dir / "ablate.log", opts.echo);
  const Checkpoint base = load_checkpoint(pretrained);
  if (!check_hash(base, cfg.hash(), opts.force)) log("WARNING: config hash mismatch ignored (--force)");
  Dataset ds = load_dataset(cfg);
  PreparedData data(ds);

  std::vector<std::unique_ptr<ForecastModel>> models;
  std::vector<NamedForecaster> forecasters;
  for (Mode mode : {Mode::LoraOci, Mode::LoraNoOci}) {
    auto model = adapted_from(cfg, mode, base);
    TrainOptions to;
    to.mode = mode;
    to.config = cfg.train;
    to.seed = cfg.seed;
    to.tag = "adapted";
    to.config_hash = cfg.hash();
    to.checkpoint_path = cfg.out_dir / ("ablate_" + to_string(mode) + ".ckpt");
    to.log = [&log, mode](const std::string& s) { log(to_string(mode) + ": " + s); };
    train_model(*model, data, ds.manifest("train"), ds.manifest("val"), to);
    forecasters.push_back({to_string(mode), direct_forecaster(*model, data, mode)});
    models.push_back(std::move(model));
  }
  MetricReport rep = evaluate(forecasters, ds.manifest(cfg.eval_split), states_of(ds), data.climatology());
  rep.config_hash = cfg.hash();
  rep.write_csv(cfg.out_dir / "ablation_metrics.csv");

  std::vector<AblationRow> rows;
  std::string text = "variable,wrmse_lora_oci,wrmse_lora_no_oci,delta\n";
  for (const auto& label : channel_labels(ds.grid())) {
    AblationRow r{label, rep.row("lora_oci", label).wrmse, rep.row("lora_no_oci", label).wrmse};
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g\n", label.c_str(), r.wrmse_oci, r.wrmse_no_oci, r.delta());
    text += buf;
    log(std::string(buf, std::strlen(buf) - 1));
    rows.push_back(r);
  }
  write_file(csv, text);
  return rows;
}

}  // namespace tele
