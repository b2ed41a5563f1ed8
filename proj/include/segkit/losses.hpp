#pragma once

#include <string>

#include "segkit/tensor.hpp"

namespace segkit {

enum class LossKind { bce, dice, inverted_dice, focal, bce_dice, bce_dice_inv, switching };

LossKind loss_kind_from_string(const std::string& s);
std::string to_string(LossKind k);

struct LossConfig {
  LossKind kind = LossKind::switching;
  double gamma = 1.0;         // focal modulation exponent, >= 0
  double lambda = 0.75;       // switching blend weight, in [0,1]
  double tau = 0.01;          // switching foreground-ratio gate, in [0,1]
  double eps = 1e-6;          // dice smoothing term
  double clamp_delta = 1e-7;  // probability clamp applied before any log
  bool per_sample = false;    // dice family averaged per sample instead of pooled over the batch

  void validate() const;  // throws on out-of-range fields
};

/// Scalar loss plus its per-term breakdown. `branch_taken`: 0 = no gate,
/// 1 = foreground-rich branch (ratio > tau), 2 = scarce-foreground branch,
/// 3 = mixed branches in per-sample mode.
struct LossValue {
  Tensor total;
  double bce = 0.0;            // L_C
  double dice = 0.0;           // L_D
  double inverted_dice = 0.0;  // L_I
  int branch_taken = 0;
};

/// Fraction of mask pixels labeled foreground. Mask must be binary.
double foreground_ratio(const Tensor& mask);

// Individual losses. `p` holds probabilities, `g` a {0,1} mask of the same
// shape; `p` is clamped to [delta, 1-delta] internally. All reduce to a
// scalar: mean over every pixel for bce/focal, pooled sums for the dice pair.
Tensor bce(Tape& tape, const Tensor& p, const Tensor& g, double clamp_delta = 1e-7);
Tensor dice_loss(Tape& tape, const Tensor& p, const Tensor& g, double eps = 1e-6,
                 double clamp_delta = 1e-7);
Tensor inverted_dice_loss(Tape& tape, const Tensor& p, const Tensor& g, double eps = 1e-6,
                          double clamp_delta = 1e-7);
Tensor focal(Tape& tape, const Tensor& p, const Tensor& g, double gamma,
             double clamp_delta = 1e-7);

/// BCE plus a Dice / inverted-Dice blend whose weights swap according to the
/// foreground ratio of the ground-truth mask (the gate never depends on p).
LossValue switching(Tape& tape, const Tensor& p, const Tensor& g, const LossConfig& cfg);

/// Dispatch on cfg.kind; combined kinds use equal weights.
LossValue compute_loss(Tape& tape, const Tensor& p, const Tensor& g, const LossConfig& cfg);

}  // namespace segkit
