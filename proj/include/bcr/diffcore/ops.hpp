#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bcr/diffcore/tape.hpp"

namespace bcr::ad {

namespace detail {

template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (&a.tape() != &b.tape()) throw ArgumentError("operands live on different tapes");
}

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plain (non-tape) kernels shared by the tape primitives and by callers that
// only need inference.

// Softmax over the entries of `scores` listed in `subset`, in subset order.
template <typename Scalar>
Vector<Scalar> softmax_subset(std::span<const Scalar> scores, std::span<const Index> subset) {
  if (subset.empty()) throw ArgumentError("softmax_subset: empty subset");
  Scalar shift = -std::numeric_limits<Scalar>::infinity();
  for (Index i : subset) {
    if (i < 0 || i >= static_cast<Index>(scores.size()))
      throw ArgumentError("softmax_subset: index out of range");
    shift = std::max(shift, scores[i]);
  }
  Vector<Scalar> out(subset.size());
  Scalar total = 0;
  for (std::size_t j = 0; j < subset.size(); ++j) {
    out(j) = std::exp(scores[subset[j]] - shift);
    total += out(j);
  }
  return out / total;
}

template <typename Scalar>
Scalar log_sum_exp(std::span<const Scalar> xs) {
  if (xs.empty()) throw ArgumentError("log_sum_exp: empty input");
  const Scalar shift = *std::max_element(xs.begin(), xs.end());
  Scalar total = 0;
  for (Scalar x : xs) total += std::exp(x - shift);
  return shift + std::log(total);
}

// ---------------------------------------------------------------------------
// Tape primitives.

// x[n×d] · W[d×k]
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& W) {
  detail::require_same_tape(x, W);
  detail::require_shape(x.cols() == W.rows(), "linear: x.cols != W.rows");
  auto& tape = x.tape();
  const std::size_t xi = x.id(), wi = W.id();
  Tensor2<Scalar> out = x.value() * W.value();
  return tape.push(std::move(out), tape.requires_grad(xi) || tape.requires_grad(wi),
                   [xi, wi](Tape<Scalar>& t, std::size_t self) {
                     const auto& g = t.grad(self);
                     if (t.requires_grad(xi)) t.grad_ref(xi).noalias() += g * t.value(wi).transpose();
                     if (t.requires_grad(wi)) t.grad_ref(wi).noalias() += t.value(xi).transpose() * g;
                   });
}

// x[n×d] · W[d×k] + b[1×k] broadcast over rows
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& W, const Var<Scalar>& b) {
  detail::require_same_tape(x, b);
  detail::require_shape(b.rows() == 1 && b.cols() == W.cols(), "linear: bias must be 1×k");
  Var<Scalar> xw = linear(x, W);
  auto& tape = x.tape();
  const std::size_t xwi = xw.id(), bi = b.id();
  Tensor2<Scalar> out = xw.value().rowwise() + b.value().row(0);
  return tape.push(std::move(out), tape.requires_grad(xwi) || tape.requires_grad(bi),
                   [xwi, bi](Tape<Scalar>& t, std::size_t self) {
                     const auto& g = t.grad(self);
                     t.accumulate(xwi, g);
                     if (t.requires_grad(bi)) t.grad_ref(bi) += g.colwise().sum();
                   });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x) {
  auto& tape = x.tape();
  const std::size_t xi = x.id();
  Tensor2<Scalar> out = x.value().array().tanh().matrix();
  return tape.push(std::move(out), tape.requires_grad(xi), [xi](Tape<Scalar>& t, std::size_t self) {
    const auto& y = t.value(self).array();
    t.accumulate(xi, (t.grad(self).array() * (1 - y.square())).matrix());
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  auto& tape = x.tape();
  const std::size_t xi = x.id();
  Tensor2<Scalar> out = (1 / (1 + (-x.value().array()).exp())).matrix();
  return tape.push(std::move(out), tape.requires_grad(xi), [xi](Tape<Scalar>& t, std::size_t self) {
    const auto& y = t.value(self).array();
    t.accumulate(xi, (t.grad(self).array() * y * (1 - y)).matrix());
  });
}

// Elementwise product.
template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
  auto& tape = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  Tensor2<Scalar> out = a.value().cwiseProduct(b.value());
  return tape.push(std::move(out), tape.requires_grad(ai) || tape.requires_grad(bi),
                   [ai, bi](Tape<Scalar>& t, std::size_t self) {
                     const auto& g = t.grad(self);
                     if (t.requires_grad(ai)) t.grad_ref(ai) += g.cwiseProduct(t.value(bi));
                     if (t.requires_grad(bi)) t.grad_ref(bi) += g.cwiseProduct(t.value(ai));
                   });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto& tape = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  Tensor2<Scalar> out = a.value() + b.value();
  return tape.push(std::move(out), tape.requires_grad(ai) || tape.requires_grad(bi),
                   [ai, bi](Tape<Scalar>& t, std::size_t self) {
                     t.accumulate(ai, t.grad(self));
                     t.accumulate(bi, t.grad(self));
                   });
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  auto& tape = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  Tensor2<Scalar> out = a.value() - b.value();
  return tape.push(std::move(out), tape.requires_grad(ai) || tape.requires_grad(bi),
                   [ai, bi](Tape<Scalar>& t, std::size_t self) {
                     t.accumulate(ai, t.grad(self));
                     t.accumulate(bi, -t.grad(self));
                   });
}

template <typename Scalar>
Var<Scalar> operator*(Scalar c, const Var<Scalar>& a) {
  auto& tape = a.tape();
  const std::size_t ai = a.id();
  Tensor2<Scalar> out = c * a.value();
  return tape.push(std::move(out), tape.requires_grad(ai),
                   [ai, c](Tape<Scalar>& t, std::size_t self) { t.accumulate(ai, c * t.grad(self)); });
}

// Sum of all entries, as a 1×1 node.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  auto& tape = a.tape();
  const std::size_t ai = a.id();
  Tensor2<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return tape.push(std::move(out), tape.requires_grad(ai), [ai](Tape<Scalar>& t, std::size_t self) {
    const auto& v = t.value(ai);
    t.accumulate(ai, Tensor2<Scalar>::Constant(v.rows(), v.cols(), t.grad(self)(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return (Scalar(1) / static_cast<Scalar>(a.value().size())) * sum(a);
}

// Rows of x listed in `rows`, in that order.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, std::vector<Index> rows) {
  auto& tape = x.tape();
  const std::size_t xi = x.id();
  Tensor2<Scalar> out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= x.rows()) throw ArgumentError("gather_rows: index out of range");
    out.row(r) = x.value().row(rows[r]);
  }
  return tape.push(std::move(out), tape.requires_grad(xi),
                   [xi, rows = std::move(rows)](Tape<Scalar>& t, std::size_t self) {
                     if (!t.requires_grad(xi)) return;
                     auto& gx = t.grad_ref(xi);
                     const auto& g = t.grad(self);
                     for (std::size_t r = 0; r < rows.size(); ++r) gx.row(rows[r]) += g.row(r);
                   });
}

// Softmax of a score vector (n×1 or 1×n) restricted to `subset`; returns a
// |subset|×1 column. Max-shifted for stability.
template <typename Scalar>
Var<Scalar> softmax_subset(const Var<Scalar>& scores, std::vector<Index> subset) {
  detail::require_shape(scores.rows() == 1 || scores.cols() == 1, "softmax_subset: scores must be a vector");
  auto& tape = scores.tape();
  const std::size_t si = scores.id();
  const auto& sv = scores.value();
  Vector<Scalar> probs =
      softmax_subset<Scalar>(std::span<const Scalar>(sv.data(), static_cast<std::size_t>(sv.size())), subset);
  Tensor2<Scalar> out = probs;
  return tape.push(std::move(out), tape.requires_grad(si),
                   [si, subset = std::move(subset)](Tape<Scalar>& t, std::size_t self) {
                     if (!t.requires_grad(si)) return;
                     const auto& y = t.value(self);
                     const auto& g = t.grad(self);
                     const Scalar dot = y.cwiseProduct(g).sum();
                     Scalar* gs = t.grad_ref(si).data();
                     for (std::size_t j = 0; j < subset.size(); ++j)
                       gs[subset[j]] += y(j, 0) * (g(j, 0) - dot);
                   });
}

// Inverted dropout: training zeroes each entry with probability `rate` and
// scales survivors by 1/(1-rate); inference is the identity.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double rate, std::mt19937_64& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  auto& tape = x.tape();
  const std::size_t xi = x.id();
  std::bernoulli_distribution keep(1.0 - rate);
  const Scalar scale = Scalar(1) / static_cast<Scalar>(1.0 - rate);
  Tensor2<Scalar> mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? scale : Scalar(0);
  Tensor2<Scalar> out = x.value().cwiseProduct(mask);
  return tape.push(std::move(out), tape.requires_grad(xi),
                   [xi, mask = std::move(mask)](Tape<Scalar>& t, std::size_t self) {
                     t.accumulate(xi, t.grad(self).cwiseProduct(mask));
                   });
}

// weightsᵀ · values: weights k×1, values k×m → 1×m.
template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& weights, const Var<Scalar>& values) {
  detail::require_same_tape(weights, values);
  detail::require_shape(weights.cols() == 1 && weights.rows() == values.rows(),
                        "weighted_sum: weights must be k×1 with k = values.rows");
  auto& tape = weights.tape();
  const std::size_t wi = weights.id(), vi = values.id();
  Tensor2<Scalar> out = weights.value().transpose() * values.value();
  return tape.push(std::move(out), tape.requires_grad(wi) || tape.requires_grad(vi),
                   [wi, vi](Tape<Scalar>& t, std::size_t self) {
                     const auto& g = t.grad(self);
                     if (t.requires_grad(wi)) t.grad_ref(wi).noalias() += t.value(vi) * g.transpose();
                     if (t.requires_grad(vi)) t.grad_ref(vi).noalias() += t.value(wi) * g;
                   });
}

// Row-wise log-sum-exp: n×c → n×1.
template <typename Scalar>
Var<Scalar> log_sum_exp_rows(const Var<Scalar>& x) {
  auto& tape = x.tape();
  const std::size_t xi = x.id();
  const auto& xv = x.value();
  Tensor2<Scalar> out(xv.rows(), 1);
  Tensor2<Scalar> soft(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar shift = xv.row(r).maxCoeff();
    soft.row(r) = (xv.row(r).array() - shift).exp().matrix();
    const Scalar total = soft.row(r).sum();
    soft.row(r) /= total;
    out(r, 0) = shift + std::log(total);
  }
  return tape.push(std::move(out), tape.requires_grad(xi),
                   [xi, soft = std::move(soft)](Tape<Scalar>& t, std::size_t self) {
                     if (!t.requires_grad(xi)) return;
                     t.grad_ref(xi) += (soft.array().colwise() * t.grad(self).col(0).array()).matrix();
                   });
}

// out[i] = x[i, cols[i]]: n×c → n×1.
template <typename Scalar>
Var<Scalar> pick(const Var<Scalar>& x, std::vector<Index> cols) {
  detail::require_shape(static_cast<Index>(cols.size()) == x.rows(), "pick: one column per row");
  auto& tape = x.tape();
  const std::size_t xi = x.id();
  Tensor2<Scalar> out(x.rows(), 1);
  for (Index r = 0; r < x.rows(); ++r) {
    if (cols[r] < 0 || cols[r] >= x.cols()) throw ArgumentError("pick: column out of range");
    out(r, 0) = x.value()(r, cols[r]);
  }
  return tape.push(std::move(out), tape.requires_grad(xi),
                   [xi, cols = std::move(cols)](Tape<Scalar>& t, std::size_t self) {
                     if (!t.requires_grad(xi)) return;
                     auto& gx = t.grad_ref(xi);
                     for (std::size_t r = 0; r < cols.size(); ++r) gx(r, cols[r]) += t.grad(self)(r, 0);
                   });
}

// Stacks 1×1 nodes into an n×1 column.
template <typename Scalar>
Var<Scalar> stack(std::span<const Var<Scalar>> items) {
  if (items.empty()) throw ArgumentError("stack: no items");
  auto& tape = items.front().tape();
  std::vector<std::size_t> ids;
  ids.reserve(items.size());
  Tensor2<Scalar> out(static_cast<Index>(items.size()), 1);
  bool rg = false;
  for (std::size_t i = 0; i < items.size(); ++i) {
    detail::require_same_tape(items.front(), items[i]);
    out(i, 0) = items[i].scalar();
    ids.push_back(items[i].id());
    rg = rg || tape.requires_grad(ids.back());
  }
  return tape.push(std::move(out), rg, [ids = std::move(ids)](Tape<Scalar>& t, std::size_t self) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.requires_grad(ids[i])) continue;
      t.grad_ref(ids[i])(0, 0) += t.grad(self)(i, 0);
    }
  });
}

// Attaches an externally computed scalar loss whose gradient with respect to
// `input` is already known. Lets closed-form losses join the tape.
template <typename Scalar>
Var<Scalar> attach_loss(const Var<Scalar>& input, Scalar loss, Tensor2<Scalar> dloss_dinput) {
  detail::require_shape(dloss_dinput.rows() == input.rows() && dloss_dinput.cols() == input.cols(),
                        "attach_loss: gradient shape mismatch");
  auto& tape = input.tape();
  const std::size_t ii = input.id();
  Tensor2<Scalar> out(1, 1);
  out(0, 0) = loss;
  return tape.push(std::move(out), tape.requires_grad(ii),
                   [ii, g_in = std::move(dloss_dinput)](Tape<Scalar>& t, std::size_t self) {
                     t.accumulate(ii, t.grad(self)(0, 0) * g_in);
                   });
}

}  // namespace bcr::ad
