#pragma once

#include <cstdint>
#include <vector>

#include "odeflow/tensor.hpp"

namespace odeflow {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 5e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Parameters whose `trainable` flag is false are skipped entirely, so frozen
/// modules stay bit-identical across steps.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWConfig config);

  void step() { step(config_.lr); }
  void step(double lr);
  void zero_grad();

  std::int64_t steps() const noexcept { return step_; }
  const AdamWConfig& config() const noexcept { return config_; }
  const std::vector<Parameter*>& params() const noexcept { return params_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamWConfig config_;
  std::int64_t step_ = 0;
};

/// Linear warmup followed by cosine decay with `cycles` hard restarts.
///
/// `epoch` may be fractional (per-batch scheduling). Returns 0 at epoch 0 and
/// base_lr at the end of warmup; each restart jumps back to base_lr.
double lr_at(double epoch, int total_epochs, double warmup_frac, int cycles, double base_lr);

}  // namespace odeflow
