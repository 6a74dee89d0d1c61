#pragma once

// Minimal reverse-mode differentiation core: tape, primitives, Adam and
// finite-difference gradient checking.

#include "bcr/diffcore/adam.hpp"
#include "bcr/diffcore/grad_check.hpp"
#include "bcr/diffcore/ops.hpp"
#include "bcr/diffcore/tape.hpp"

namespace bcr {

using Matrix = ad::Tensor2<double>;
using VectorXd = ad::Vector<double>;

}  // namespace bcr
