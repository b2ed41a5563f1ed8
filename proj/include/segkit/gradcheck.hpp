#pragma once

#include <functional>
#include <string>
#include <vector>

#include "segkit/tensor.hpp"

namespace segkit {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = true;
};

/// Builds a scalar from the given leaf tensors. Must be a pure function of
/// the leaf values: it is re-evaluated many times under perturbation.
using ScalarFn = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

/// Central finite differences against the tape's analytic gradients.
/// An entry passes when |analytic − numeric| / max(|analytic|, |numeric|,
/// floor_scale) < tol; the floor keeps near-zero entries from blowing up the
/// quotient (an absolute criterion of tol·floor_scale applies to them).
GradCheckResult check_gradients(const std::string& name, const ScalarFn& fn,
                                const std::vector<Tensor>& leaves, double h = 1e-4,
                                double tol = 1e-4, double floor_scale = 1e-3);

/// Full sweep over every differentiable op and every loss: `trials` random
/// instances each, extents <= 8. `filter` keeps entries whose name contains
/// any given substring; `inject_broken` appends a deliberately wrong adjoint
/// as a negative control.
std::vector<GradCheckResult> run_gradcheck_suite(uint64_t seed, int trials,
                                                 const std::vector<std::string>& filter = {},
                                                 bool inject_broken = false);

}  // namespace segkit
