#pragma once

#include <stdexcept>

#include "tele/rng.hpp"
#include "tele/tensor.hpp"

namespace tele {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  Index step = 0;
  Buffer m;
  Buffer v;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One Adam update with decoupled weight decay: the parameter is first shrunk
/// by lr·wd, then moved by the bias-corrected moment ratio. Throws
/// NonFiniteGradient (naming `label`) before touching anything if the gradient
/// holds a NaN or inf.
void adam_step(AdamState& state, Eigen::Ref<Buffer> param, const Buffer& grad, double lr,
               const AdamConfig& cfg, const char* label = "");

struct SchedulerConfig {
  double base_lr = 2e-5;
  double gamma = 0.5;
  Index milestone_period = 15;
  Index total_epochs = 30;
};

void validate(const SchedulerConfig& cfg);

/// Multi-step schedule: base_lr · gamma^floor(epoch / milestone_period).
double lr_at(Index epoch, const SchedulerConfig& cfg);

/// Rejection-sampled normal restricted to mean ± bound_sigmas·std.
Buffer truncated_normal(Index count, RngStream& rng, double mean = 0.0, double std = 0.02,
                        double bound_sigmas = 2.0);

}  // namespace tele
