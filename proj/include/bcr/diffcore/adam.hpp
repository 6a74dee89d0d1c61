#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bcr/diffcore/tape.hpp"

namespace bcr::ad {

struct AdamConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  Tensor2<Scalar> m;
  Tensor2<Scalar> v;
};

// One Adam update with bias correction at step t (1-based). Weight decay is
// decoupled: the parameter is first shrunk by (1 - lr*wd).
template <typename Scalar>
void adam_step(Tensor2<Scalar>& param, const Tensor2<Scalar>& grad, AdamState<Scalar>& state,
               const AdamConfig& cfg, std::int64_t t) {
  if (t < 1) throw ArgumentError("adam_step: step must be >= 1");
  if (grad.rows() != param.rows() || grad.cols() != param.cols())
    throw DimensionError("adam_step: grad shape differs from param");
  if (state.m.size() == 0) {
    state.m = Tensor2<Scalar>::Zero(param.rows(), param.cols());
    state.v = Tensor2<Scalar>::Zero(param.rows(), param.cols());
  }
  if (state.m.rows() != param.rows() || state.m.cols() != param.cols() || state.v.rows() != param.rows() ||
      state.v.cols() != param.cols())
    throw DimensionError("adam_step: state shape differs from param");

  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar lr = static_cast<Scalar>(cfg.lr);
  state.m = b1 * state.m + (1 - b1) * grad;
  state.v = b2 * state.v + (1 - b2) * grad.cwiseAbs2();
  const Scalar c1 = 1 - std::pow(b1, static_cast<Scalar>(t));
  const Scalar c2 = 1 - std::pow(b2, static_cast<Scalar>(t));

  if (cfg.weight_decay != 0.0) param *= (1 - lr * static_cast<Scalar>(cfg.weight_decay));
  param.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + static_cast<Scalar>(cfg.eps));
}

// Adam over a fixed list of parameters; reads Parameter::grad.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Parameter<Scalar>*> params, AdamConfig cfg)
      : params_(std::move(params)), states_(params_.size()), cfg_(cfg) {}

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) adam_step(params_[i]->value, params_[i]->grad, states_[i], cfg_, t_);
  }

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Parameter<Scalar>*> params_;
  std::vector<AdamState<Scalar>> states_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

}  // namespace bcr::ad
