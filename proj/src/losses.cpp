#include "segkit/losses.hpp"

#include <map>
#include <stdexcept>

namespace segkit {

LossKind loss_kind_from_string(const std::string& s) {
  static const std::map<std::string, LossKind> table = {
      {"bce", LossKind::bce},
      {"dice", LossKind::dice},
      {"inverted_dice", LossKind::inverted_dice},
      {"focal", LossKind::focal},
      {"bce_dice", LossKind::bce_dice},
      {"bce_dice_inv", LossKind::bce_dice_inv},
      {"switching", LossKind::switching},
  };
  auto it = table.find(s);
  if (it == table.end()) throw std::invalid_argument("unknown loss kind '" + s + "'");
  return it->second;
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::bce: return "bce";
    case LossKind::dice: return "dice";
    case LossKind::inverted_dice: return "inverted_dice";
    case LossKind::focal: return "focal";
    case LossKind::bce_dice: return "bce_dice";
    case LossKind::bce_dice_inv: return "bce_dice_inv";
    case LossKind::switching: return "switching";
  }
  return "?";
}

void LossConfig::validate() const {
  if (gamma < 0.0) throw std::invalid_argument("loss: gamma must be >= 0");
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("loss: lambda must be in [0,1]");
  if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("loss: tau must be in [0,1]");
  if (!(eps > 0.0)) throw std::invalid_argument("loss: eps must be > 0");
  if (!(clamp_delta > 0.0 && clamp_delta < 0.5)) {
    throw std::invalid_argument("loss: clamp_delta must be in (0, 0.5)");
  }
}

namespace {

void require_binary(const Tensor& g) {
  for (double v : g.values()) {
    if (v != 0.0 && v != 1.0) {
      throw std::invalid_argument("mask must be binary {0,1}, found " + std::to_string(v));
    }
  }
}

void require_pair(const Tensor& p, const Tensor& g) {
  if (!p.defined() || !g.defined()) throw std::invalid_argument("loss: undefined tensor");
  if (p.shape() != g.shape()) {
    throw std::invalid_argument("loss: probability/mask shape mismatch " + shape_str(p.shape()) +
                                " vs " + shape_str(g.shape()));
  }
  require_binary(g);
}

Tensor clamped(Tape& tape, const Tensor& p, double delta) {
  return clamp(tape, p, delta, 1.0 - delta);
}

// 1 - (2*sum(pc*g) + eps) / (sum(pc) + sum(g) + eps), over whatever pc/g cover.
Tensor dice_core(Tape& tape, const Tensor& pc, const Tensor& g, double eps) {
  Tensor num = add_scalar(tape, mul_scalar(tape, sum(tape, mul(tape, pc, g)), 2.0), eps);
  Tensor den = add_scalar(tape, add(tape, sum(tape, pc), sum(tape, g)), eps);
  return rsub_scalar(tape, 1.0, div(tape, num, den));
}

Tensor inverted_dice_core(Tape& tape, const Tensor& pc, const Tensor& g, double eps) {
  Tensor ip = rsub_scalar(tape, 1.0, pc);
  Tensor ig = rsub_scalar(tape, 1.0, g);
  return dice_core(tape, ip, ig, eps);
}

// Mean of per-sample applications of `core` when per_sample is set, pooled
// otherwise.
template <typename CoreFn>
Tensor reduce_dice_family(Tape& tape, const Tensor& pc, const Tensor& g, bool per_sample,
                          CoreFn core) {
  int n = pc.ndim() == 4 ? pc.dim(0) : 1;
  if (!per_sample || n == 1) return core(tape, pc, g);
  Tensor acc;
  for (int i = 0; i < n; ++i) {
    Tensor term = core(tape, slice_batch(tape, pc, i), slice_batch(tape, g, i));
    acc = acc.defined() ? add(tape, acc, term) : term;
  }
  return mul_scalar(tape, acc, 1.0 / n);
}

}  // namespace

double foreground_ratio(const Tensor& mask) {
  if (!mask.defined() || mask.numel() == 0) {
    throw std::invalid_argument("foreground_ratio: empty mask");
  }
  require_binary(mask);
  double acc = 0.0;
  for (double v : mask.values()) acc += v;
  return acc / static_cast<double>(mask.numel());
}

Tensor bce(Tape& tape, const Tensor& p, const Tensor& g, double clamp_delta) {
  require_pair(p, g);
  Tensor pc = clamped(tape, p, clamp_delta);
  Tensor pos = mul(tape, g, log(tape, pc));
  Tensor negt = mul(tape, rsub_scalar(tape, 1.0, g), log(tape, rsub_scalar(tape, 1.0, pc)));
  return neg(tape, mean(tape, add(tape, pos, negt)));
}

Tensor dice_loss(Tape& tape, const Tensor& p, const Tensor& g, double eps, double clamp_delta) {
  require_pair(p, g);
  Tensor pc = clamped(tape, p, clamp_delta);
  return dice_core(tape, pc, g, eps);
}

Tensor inverted_dice_loss(Tape& tape, const Tensor& p, const Tensor& g, double eps,
                          double clamp_delta) {
  require_pair(p, g);
  Tensor pc = clamped(tape, p, clamp_delta);
  return inverted_dice_core(tape, pc, g, eps);
}

Tensor focal(Tape& tape, const Tensor& p, const Tensor& g, double gamma, double clamp_delta) {
  require_pair(p, g);
  if (gamma < 0.0) throw std::invalid_argument("focal: gamma must be >= 0");
  Tensor pc = clamped(tape, p, clamp_delta);
  // p_t = p where g = 1, 1-p where g = 0
  Tensor pt = add(tape, mul(tape, pc, g),
                  mul(tape, rsub_scalar(tape, 1.0, pc), rsub_scalar(tape, 1.0, g)));
  if (gamma == 0.0) return neg(tape, mean(tape, log(tape, pt)));
  Tensor mod = pow_scalar(tape, rsub_scalar(tape, 1.0, pt), gamma);
  return neg(tape, mean(tape, mul(tape, mod, log(tape, pt))));
}

LossValue switching(Tape& tape, const Tensor& p, const Tensor& g, const LossConfig& cfg) {
  cfg.validate();
  require_pair(p, g);
  Tensor pc = clamped(tape, p, cfg.clamp_delta);
  Tensor l_c = bce(tape, p, g, cfg.clamp_delta);

  LossValue out;
  int n = p.ndim() == 4 ? p.dim(0) : 1;
  if (cfg.per_sample && n > 1) {
    Tensor acc;
    double dice_acc = 0.0, inv_acc = 0.0;
    int branch_seen = 0;
    for (int i = 0; i < n; ++i) {
      Tensor pi = slice_batch(tape, pc, i);
      Tensor gi = slice_batch(tape, g, i);
      double r = foreground_ratio(gi);
      int branch = r > cfg.tau ? 1 : 2;
      branch_seen = branch_seen == 0 || branch_seen == branch ? branch : 3;
      double w_d = branch == 1 ? cfg.lambda : 1.0 - cfg.lambda;
      double w_i = 1.0 - w_d;
      Tensor l_d = dice_core(tape, pi, gi, cfg.eps);
      Tensor l_i = inverted_dice_core(tape, pi, gi, cfg.eps);
      dice_acc += l_d.item();
      inv_acc += l_i.item();
      Tensor term = add(tape, mul_scalar(tape, l_d, w_d), mul_scalar(tape, l_i, w_i));
      acc = acc.defined() ? add(tape, acc, term) : term;
    }
    out.total = add(tape, l_c, mul_scalar(tape, acc, 1.0 / n));
    out.dice = dice_acc / n;
    out.inverted_dice = inv_acc / n;
    out.branch_taken = branch_seen;
  } else {
    double r = foreground_ratio(g);
    // Boundary r == tau goes to the scarce-foreground branch.
    int branch = r > cfg.tau ? 1 : 2;
    double w_d = branch == 1 ? cfg.lambda : 1.0 - cfg.lambda;
    double w_i = 1.0 - w_d;
    Tensor l_d = dice_core(tape, pc, g, cfg.eps);
    Tensor l_i = inverted_dice_core(tape, pc, g, cfg.eps);
    out.total = add(tape, l_c,
                    add(tape, mul_scalar(tape, l_d, w_d), mul_scalar(tape, l_i, w_i)));
    out.dice = l_d.item();
    out.inverted_dice = l_i.item();
    out.branch_taken = branch;
  }
  out.bce = l_c.item();
  return out;
}

LossValue compute_loss(Tape& tape, const Tensor& p, const Tensor& g, const LossConfig& cfg) {
  cfg.validate();
  LossValue out;
  switch (cfg.kind) {
    case LossKind::bce: {
      out.total = bce(tape, p, g, cfg.clamp_delta);
      out.bce = out.total.item();
      break;
    }
    case LossKind::dice: {
      require_pair(p, g);
      Tensor pc = clamped(tape, p, cfg.clamp_delta);
      out.total = reduce_dice_family(tape, pc, g, cfg.per_sample,
                                     [&](Tape& t, const Tensor& a, const Tensor& b) {
                                       return dice_core(t, a, b, cfg.eps);
                                     });
      out.dice = out.total.item();
      break;
    }
    case LossKind::inverted_dice: {
      require_pair(p, g);
      Tensor pc = clamped(tape, p, cfg.clamp_delta);
      out.total = reduce_dice_family(tape, pc, g, cfg.per_sample,
                                     [&](Tape& t, const Tensor& a, const Tensor& b) {
                                       return inverted_dice_core(t, a, b, cfg.eps);
                                     });
      out.inverted_dice = out.total.item();
      break;
    }
    case LossKind::focal: {
      out.total = focal(tape, p, g, cfg.gamma, cfg.clamp_delta);
      break;
    }
    case LossKind::bce_dice: {
      require_pair(p, g);
      Tensor l_c = bce(tape, p, g, cfg.clamp_delta);
      Tensor pc = clamped(tape, p, cfg.clamp_delta);
      Tensor l_d = reduce_dice_family(tape, pc, g, cfg.per_sample,
                                      [&](Tape& t, const Tensor& a, const Tensor& b) {
                                        return dice_core(t, a, b, cfg.eps);
                                      });
      out.total = add(tape, l_c, l_d);
      out.bce = l_c.item();
      out.dice = l_d.item();
      break;
    }
    case LossKind::bce_dice_inv: {
      require_pair(p, g);
      Tensor l_c = bce(tape, p, g, cfg.clamp_delta);
      Tensor pc = clamped(tape, p, cfg.clamp_delta);
      Tensor l_d = reduce_dice_family(tape, pc, g, cfg.per_sample,
                                      [&](Tape& t, const Tensor& a, const Tensor& b) {
                                        return dice_core(t, a, b, cfg.eps);
                                      });
      Tensor l_i = reduce_dice_family(tape, pc, g, cfg.per_sample,
                                      [&](Tape& t, const Tensor& a, const Tensor& b) {
                                        return inverted_dice_core(t, a, b, cfg.eps);
                                      });
      out.total = add(tape, add(tape, l_c, l_d), l_i);
      out.bce = l_c.item();
      out.dice = l_d.item();
      out.inverted_dice = l_i.item();
      break;
    }
    case LossKind::switching:
      return switching(tape, p, g, cfg);
  }
  return out;
}

}  // namespace segkit
