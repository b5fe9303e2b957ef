#include "tele/training.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

namespace tele {

PreparedData::PreparedData(const Dataset& ds) : ds_(&ds) {
  const DatasetManifest& train = ds.manifest("train");
  stats_ = compute_norm_stats(ds, train);
  clim_ = compute_climatology(ds, train);
  std::vector<Index> needed;
  for (const char* split : {"train", "val", "test"}) {
    if (!ds.has_split(split)) continue;
    for (Index t : ds.manifest(split).timestamps()) needed.push_back(t);
  }
  Index max_t = 0;
  for (Index t : needed) max_t = std::max(max_t, t);
  norm_states_.resize(static_cast<std::size_t>(max_t + 1));
  for (Index t : needed) {
    auto& slot = norm_states_[static_cast<std::size_t>(t)];
    if (slot.size() == 0) slot = normalize_state(ds.state(t), stats_, grid());
  }
  norm_oci_ = normalize_oci(ds.oci_series(), ds.oci_missing(), stats_.oci_mean, stats_.oci_std);
}

const Buffer& PreparedData::normalized_state(Index t) const {
  if (t < 0 || t >= static_cast<Index>(norm_states_.size()) || norm_states_[static_cast<std::size_t>(t)].size() == 0) {
    throw DataError("no state for timestamp " + std::to_string(t));
  }
  return norm_states_[static_cast<std::size_t>(t)];
}

MatrixRM PreparedData::oci_at(Index t) const {
  const Index L = ds_->lag_window();
  const Index first = t + ds_->oci_history() - L;
  if (first < 0 || first + L > norm_oci_.cols()) {
    throw DataError("OCI window for timestamp " + std::to_string(t) + " lies outside the stored record");
  }
  return norm_oci_.middleCols(first, L);
}

bool mode_has_temporal(Mode m) { return m == Mode::LoraOci || m == Mode::LoraNoOci; }
bool mode_uses_oci(Mode m) { return m == Mode::LoraOci; }

void configure_trainable(ForecastModel& model, Mode mode) {
  switch (mode) {
    case Mode::Pretrain:
    case Mode::FullFinetune:
      model.params().set_trainable(true);
      return;
    case Mode::Frozen:
      model.params().set_trainable(false);
      return;
    case Mode::LoraOci:
    case Mode::LoraNoOci:
      // Adapters, the OCI path and the patch embedding/recovery linears. The
      // additive position table stays with the frozen backbone.
      for (Parameter* p : model.params().all()) {
        p->trainable = p->group == "lora" || p->group == "temporal_filter" || p->group == "embeddings";
      }
      return;
  }
}

std::unique_ptr<ForecastModel> build_model(const RunConfig& cfg, Mode mode, std::uint64_t seed) {
  auto model = std::make_unique<ForecastModel>(cfg.model, seed, mode_has_temporal(mode));
  if (mode_has_temporal(mode)) model->inject_lora(cfg.lora);
  configure_trainable(*model, mode);
  return model;
}

Buffer loss_weights(const GridSpec& grid) {
  const LatWeights<double> lw = lat_weights(grid);
  const Index channels = channel_count(grid);
  const Index cells = grid.cells();
  const double n_vars = static_cast<double>(kSurfaceCount + kUpperCount);
  Buffer w(channels * cells);
  for (Index c = 0; c < channels; ++c) {
    const double levels = c < kSurfaceCount ? 1.0 : static_cast<double>(grid.n_level);
    const double share = 1.0 / (n_vars * levels * static_cast<double>(cells));
    for (Index i = 0; i < grid.n_lat; ++i) {
      w.segment(c * cells + i * grid.n_lon, grid.n_lon).setConstant(share * lw[i]);
    }
  }
  return w;
}

Tensor weighted_mse(const Tensor& pred, const Buffer& target, const Buffer& weights) {
  Tensor d = sub(pred, Tensor::constant(pred.shape(), target));
  return sum(mul(mul(d, d), Tensor::constant(pred.shape(), weights)));
}

namespace {

Tensor as_tensor(const MatrixRM& m) {
  return Tensor::constant({m.rows(), m.cols()}, Eigen::Map<const Buffer>(m.data(), m.size()));
}

MatrixRM oci_for(const PreparedData& data, Mode mode, Index t) {
  return mode_uses_oci(mode) ? data.oci_at(t) : data.zero_oci();
}

}  // namespace

Buffer predict_normalized(const ForecastModel& model, const PreparedData& data, Mode mode, Index t) {
  if (!model.temporal()) return model.predict(data.normalized_state(t));
  const MatrixRM oci = oci_for(data, mode, t);
  return model.predict(data.normalized_state(t), &oci);
}

double validation_loss(const ForecastModel& model, const PreparedData& data, Mode mode,
                       const std::vector<std::pair<Index, Index>>& pairs) {
  const Buffer w = loss_weights(data.grid());
  double total = 0.0;
  for (const auto& [a, b] : pairs) {
    const Buffer d = predict_normalized(model, data, mode, a) - data.normalized_state(b);
    total += (d.cwiseAbs2().cwiseProduct(w)).sum();
  }
  return total / static_cast<double>(pairs.size());
}

double persistence_loss(const PreparedData& data, const std::vector<std::pair<Index, Index>>& pairs) {
  const Buffer w = loss_weights(data.grid());
  double total = 0.0;
  for (const auto& [a, b] : pairs) {
    const Buffer d = data.normalized_state(a) - data.normalized_state(b);
    total += (d.cwiseAbs2().cwiseProduct(w)).sum();
  }
  return total / static_cast<double>(pairs.size());
}

std::vector<std::pair<Index, Index>> subsample(const std::vector<std::pair<Index, Index>>& pairs, Index n) {
  const Index total = static_cast<Index>(pairs.size());
  if (n <= 0 || n >= total) return pairs;
  std::vector<std::pair<Index, Index>> out;
  for (Index i = 0; i < n; ++i) out.push_back(pairs[static_cast<std::size_t>(i * total / n)]);
  return out;
}

namespace {

struct Snapshot {
  std::vector<Buffer> values;

  static Snapshot of(ForecastModel& model) {
    Snapshot s;
    for (const Parameter* p : model.params().all()) s.values.push_back(*p->value);
    return s;
  }
  void apply(ForecastModel& model) const {
    auto params = model.params().all();
    for (std::size_t i = 0; i < params.size(); ++i) *params[i]->value = values[i];
  }
};

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c, d);
  return buf;
}

}  // namespace

TrainResult train_model(ForecastModel& model, const PreparedData& data, const DatasetManifest& train,
                        const DatasetManifest& val, const TrainOptions& opts) {
  if (train.pairs.empty() || val.pairs.empty()) throw ConfigError("training needs non-empty train and val splits");
  auto log = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };
  const TrainConfig& tc = opts.config;
  const Buffer weights = loss_weights(data.grid());
  const auto val_pairs = subsample(val.pairs, tc.val_samples);

  std::vector<Parameter*> trainable, frozen;
  for (Parameter* p : model.params().all()) (p->trainable ? trainable : frozen).push_back(p);
  std::vector<Buffer> frozen_ref;
  for (const Parameter* p : frozen) frozen_ref.push_back(*p->value);
  auto check_frozen = [&]() {
    for (std::size_t i = 0; i < frozen.size(); ++i) {
      if (std::memcmp(frozen[i]->value->data(), frozen_ref[i].data(),
                      sizeof(double) * static_cast<std::size_t>(frozen_ref[i].size())) != 0) {
        throw std::logic_error("frozen tensor " + frozen[i]->name + " changed during training");
      }
    }
  };

  TrainResult res;
  res.initial_val_loss = validation_loss(model, data, opts.mode, val_pairs);
  res.best_val_loss = res.initial_val_loss;
  log(fmt("epoch 0 val_loss %.9g", res.initial_val_loss));
  Snapshot best = Snapshot::of(model);

  auto save_best = [&](Index epoch) {
    if (opts.checkpoint_path.empty()) return;
    Snapshot current = Snapshot::of(model);
    best.apply(model);
    save_checkpoint(opts.checkpoint_path, capture(model, opts.tag, to_string(opts.mode), epoch, opts.config_hash));
    current.apply(model);
  };
  auto abort = [&](const std::string& why) {
    best.apply(model);
    save_best(res.best_epoch);
    throw TrainingAborted(why + "; restored the best weights (epoch " + std::to_string(res.best_epoch) + ")");
  };

  const Index n_train = static_cast<Index>(train.pairs.size());
  const Index per_epoch = tc.samples_per_epoch > 0 ? std::min(tc.samples_per_epoch, n_train) : n_train;
  const RngStream root(opts.seed);
  double prev_lr = -1.0;
  std::vector<Buffer> grads(trainable.size());

  for (Index epoch = 0; epoch < tc.schedule.total_epochs; ++epoch) {
    const double lr = lr_at(epoch, tc.schedule);
    if (prev_lr >= 0.0 && lr != prev_lr) log(fmt("epoch %.0f lr decay %.6g -> %.6g", double(epoch + 1), prev_lr, lr));
    prev_lr = lr;

    std::vector<Index> order(static_cast<std::size_t>(n_train));
    std::iota(order.begin(), order.end(), Index{0});
    RngStream shuffle = root.split(1000 + static_cast<std::uint64_t>(epoch));
    for (Index i = n_train - 1; i > 0; --i) {
      const Index j = static_cast<Index>(shuffle.next_u64() % static_cast<std::uint64_t>(i + 1));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    RngStream drop = root.split(1'000'000 + static_cast<std::uint64_t>(epoch));

    double loss_sum = 0.0;
    for (Index start = 0; start < per_epoch; start += tc.batch_size) {
      const Index count = std::min(tc.batch_size, per_epoch - start);
      for (auto& g : grads) g.resize(0);
      for (Index s = start; s < start + count; ++s) {
        const auto& [t_in, t_out] = train.pairs[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
        Binding bind(true);
        ForwardContext ctx{bind, true, &drop};
        Tensor state = Tensor::constant({data.normalized_state(t_in).size()}, data.normalized_state(t_in));
        Tensor oci;
        if (model.temporal()) oci = as_tensor(oci_for(data, opts.mode, t_in));
        Tensor loss = weighted_mse(model.forward(ctx, state, oci), data.normalized_state(t_out), weights);
        const double value = loss.item();
        if (!std::isfinite(value)) abort("non-finite training loss at epoch " + std::to_string(epoch + 1));
        loss_sum += value;
        backward(loss, bind.leaves());
        for (std::size_t k = 0; k < trainable.size(); ++k) {
          if (grads[k].size() == 0) {
            grads[k] = bind.grad_of(*trainable[k]);
          } else {
            grads[k] += bind.grad_of(*trainable[k]);
          }
        }
      }
      try {
        for (std::size_t k = 0; k < trainable.size(); ++k) {
          grads[k] /= static_cast<double>(count);
          adam_step(trainable[k]->adam, *trainable[k]->value, grads[k], lr, tc.adam, trainable[k]->name.c_str());
        }
      } catch (const NonFiniteGradient& e) {
        abort(e.what());
      }
      ++res.steps;
      check_frozen();
    }

    EpochLog el;
    el.epoch = epoch + 1;
    el.lr = lr;
    el.train_loss = loss_sum / static_cast<double>(per_epoch);
    el.val_loss = validation_loss(model, data, opts.mode, val_pairs);
    res.epochs.push_back(el);
    log(fmt("epoch %.0f lr %.6g train_loss %.9g val_loss %.9g", double(el.epoch), lr, el.train_loss, el.val_loss));
    if (!std::isfinite(el.val_loss)) abort("non-finite validation loss at epoch " + std::to_string(el.epoch));
    if (el.val_loss < res.best_val_loss) {
      res.best_val_loss = el.val_loss;
      res.best_epoch = el.epoch;
      best = Snapshot::of(model);
    }
  }
  best.apply(model);
  if (!opts.checkpoint_path.empty()) {
    save_checkpoint(opts.checkpoint_path, capture(model, opts.tag, to_string(opts.mode), res.best_epoch, opts.config_hash));
  }
  log(fmt("best epoch %.0f val_loss %.9g", double(res.best_epoch), res.best_val_loss));
  return res;
}

Forecaster direct_forecaster(const ForecastModel& model, const PreparedData& data, Mode mode) {
  return [&model, &data, mode](Index t) {
    return denormalize_state(predict_normalized(model, data, mode, t), data.stats(), data.grid());
  };
}

Forecaster rollout_forecaster(const ForecastModel& model, const PreparedData& data, Mode mode, Index model_step,
                              Index horizon) {
  if (model_step < 1 || horizon % model_step != 0) {
    throw ConfigError("rollout horizon " + std::to_string(horizon) + " is not a multiple of the model step " +
                      std::to_string(model_step));
  }
  const Index iterations = horizon / model_step;
  return [&model, &data, mode, model_step, iterations](Index t) {
    Buffer state = data.normalized_state(t);
    for (Index k = 0; k < iterations; ++k) {
      if (model.temporal()) {
        const MatrixRM oci = mode_uses_oci(mode) ? data.oci_at(t + k * model_step) : data.zero_oci();
        state = model.predict(state, &oci);
      } else {
        state = model.predict(state);
      }
    }
    return denormalize_state(state, data.stats(), data.grid());
  };
}

}  // namespace tele
