#include <cmath>
#include <numbers>
#include <string>

#include "tele/optim.hpp"
#include "tele/rng.hpp"

namespace tele {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t RngStream::next_u64() {
  return mix64(key_ ^ mix64(counter_++ * 0xD1B54A32D192ED03ULL));
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

RngStream RngStream::split(std::uint64_t stream) const {
  return RngStream(mix64(seed_ ^ mix64(stream ^ 0x632BE59BD9B4E019ULL)), 0);
}

void adam_step(AdamState& state, Eigen::Ref<Buffer> param, const Buffer& grad, double lr,
               const AdamConfig& cfg, const char* label) {
  if (grad.size() != param.size()) {
    throw DimensionError(std::string("adam_step: gradient size mismatch for ") + label);
  }
  if (!grad.allFinite()) {
    Index bad = 0;
    while (bad < grad.size() && std::isfinite(grad[bad])) ++bad;
    throw NonFiniteGradient(std::string("non-finite gradient in '") + label + "' at element " +
                            std::to_string(bad));
  }
  if (state.m.size() != param.size()) {
    if (state.step != 0) throw DimensionError("adam_step: moment buffers do not match parameter");
    state.m = Buffer::Zero(param.size());
    state.v = Buffer::Zero(param.size());
  }
  state.step += 1;
  if (cfg.weight_decay != 0.0) param *= (1.0 - lr * cfg.weight_decay);
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  param.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

void validate(const SchedulerConfig& cfg) {
  if (!(cfg.gamma > 0.0 && cfg.gamma <= 1.0)) throw std::invalid_argument("gamma must be in (0, 1]");
  if (cfg.milestone_period < 1) throw std::invalid_argument("milestone_period must be >= 1");
  if (cfg.total_epochs < 1) throw std::invalid_argument("total_epochs must be >= 1");
}

double lr_at(Index epoch, const SchedulerConfig& cfg) {
  validate(cfg);
  if (epoch < 0 || epoch >= cfg.total_epochs) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(cfg.total_epochs) + ")");
  }
  const Index decays = epoch / cfg.milestone_period;
  double lr = cfg.base_lr;
  for (Index i = 0; i < decays; ++i) lr *= cfg.gamma;
  return lr;
}

Buffer truncated_normal(Index count, RngStream& rng, double mean, double std,
                        double bound_sigmas) {
  if (!(std > 0.0)) throw std::invalid_argument("truncated_normal: std must be positive");
  Buffer out(count);
  for (Index i = 0; i < count; ++i) {
    double z = rng.normal();
    while (std::abs(z) > bound_sigmas) z = rng.normal();
    out[i] = mean + std * z;
  }
  return out;
}

}  // namespace tele
