#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bcr/diffcore/tape.hpp"

namespace bcr::ad {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-5;
  // 0 checks every coordinate; otherwise a seeded sample of this many per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckFailure {
  std::string param;
  Index row = 0;
  Index col = 0;
  double analytic = 0;
  double numeric = 0;
  double error = 0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::vector<GradCheckFailure> failures;

  bool passed() const { return failures.empty(); }
  double pass_fraction() const {
    return checked == 0 ? 1.0 : 1.0 - static_cast<double>(failures.size()) / static_cast<double>(checked);
  }
};

// Compares `analytic[i]` against central differences of `loss_value` taken by
// perturbing params[i] in place. Error metric: |a - n| / max(1, |a|).
template <typename Scalar>
GradCheckReport compare_gradients(const std::function<Scalar()>& loss_value, std::span<Parameter<Scalar>* const> params,
                                  std::span<const Tensor2<Scalar>> analytic, const GradCheckOptions& opts) {
  if (params.size() != analytic.size()) throw DimensionError("compare_gradients: one analytic gradient per parameter");
  GradCheckReport report;
  std::mt19937_64 rng(opts.seed);
  const Scalar eps = static_cast<Scalar>(opts.eps);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Parameter<Scalar>& param = *params[p];
    const Tensor2<Scalar>& a = analytic[p];
    if (a.rows() != param.value.rows() || a.cols() != param.value.cols())
      throw DimensionError("compare_gradients: analytic shape differs for " + param.name);
    std::vector<Index> coords(static_cast<std::size_t>(param.value.size()));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (opts.max_coords_per_param != 0 && coords.size() > opts.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (Index flat : coords) {
      Scalar& x = param.value.data()[flat];
      const Scalar saved = x;
      x = saved + eps;
      const Scalar up = loss_value();
      x = saved - eps;
      const Scalar down = loss_value();
      x = saved;
      const double numeric = static_cast<double>((up - down) / (2 * eps));
      const double an = static_cast<double>(a.data()[flat]);
      const double err = std::abs(an - numeric) / std::max(1.0, std::abs(an));
      ++report.checked;
      if (!(err <= opts.tol))
        report.failures.push_back({param.name, flat / param.value.cols(), flat % param.value.cols(), an, numeric, err});
    }
  }
  return report;
}

// `build` records the loss on the given tape and returns its 1×1 output. It
// must be deterministic (seed any RNG inside it).
template <typename Scalar>
using LossBuilder = std::function<Var<Scalar>(Tape<Scalar>&)>;

template <typename Scalar>
std::vector<Tensor2<Scalar>> analytic_gradients(const LossBuilder<Scalar>& build,
                                                std::span<Parameter<Scalar>* const> params) {
  for (auto* p : params) p->zero_grad();
  Tape<Scalar> tape;
  for (auto* p : params) tape.parameter(*p);
  tape.backward(build(tape));
  std::vector<Tensor2<Scalar>> grads;
  grads.reserve(params.size());
  for (auto* p : params) grads.push_back(p->grad);
  return grads;
}

template <typename Scalar>
GradCheckReport grad_check(const LossBuilder<Scalar>& build, std::span<Parameter<Scalar>* const> params,
                           const GradCheckOptions& opts = {}) {
  const auto grads = analytic_gradients(build, params);
  const std::function<Scalar()> value = [&build] {
    Tape<Scalar> tape;
    return build(tape).scalar();
  };
  return compare_gradients<Scalar>(value, params, grads, opts);
}

}  // namespace bcr::ad
