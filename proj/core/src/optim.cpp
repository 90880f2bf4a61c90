#include "odeflow/optim.hpp"

#include <cmath>
#include <numbers>

#include "odeflow/error.hpp"

namespace odeflow {

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void AdamW::step(double lr) {
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.shape());
    MatrixMap wm = p.value.matrix();
    MatrixMap gm = p.grad.matrix();
    MatrixMap mm = m_[i].matrix();
    MatrixMap vm = v_[i].matrix();
    auto w = wm.array();
    auto g = gm.array();
    auto m = mm.array();
    auto v = vm.array();
    w -= lr * config_.weight_decay * w;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.square();
    w -= lr * (m / c1) / ((v / c2).sqrt() + config_.eps);
  }
}

double lr_at(double epoch, int total_epochs, double warmup_frac, int cycles, double base_lr) {
  if (total_epochs < 1 || cycles < 1) throw ContractError("lr_at: total_epochs and cycles must be >= 1");
  if (!(epoch >= 0.0) || epoch > static_cast<double>(total_epochs)) {
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(total_epochs) + "]");
  }
  const double total = static_cast<double>(total_epochs);
  const double warmup = warmup_frac * total;
  if (epoch < warmup) return base_lr * epoch / warmup;
  if (total <= warmup) return base_lr;
  const double progress = (epoch - warmup) / (total - warmup);
  if (progress >= 1.0) return 0.0;
  const double phase = std::fmod(static_cast<double>(cycles) * progress, 1.0);
  return base_lr * std::max(0.0, 0.5 * (1.0 + std::cos(std::numbers::pi * phase)));
}

}  // namespace odeflow
