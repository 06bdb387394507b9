#include "trat/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "trat/losses.hpp"

namespace trat {

Norm parse_norm(const std::string& s) {
  if (s == "linf") return Norm::linf;
  if (s == "l2") return Norm::l2;
  fail(Errc::parse_error, "unknown norm '" + s + "' (expected linf or l2)");
}

AttackLoss parse_attack_loss(const std::string& s) {
  if (s == "cross_entropy") return AttackLoss::cross_entropy;
  if (s == "kl_vs_clean") return AttackLoss::kl_vs_clean;
  if (s == "cw_margin") return AttackLoss::cw_margin;
  fail(Errc::parse_error,
       "unknown attack loss '" + s + "' (expected cross_entropy, kl_vs_clean or cw_margin)");
}

std::string to_string(Norm n) { return n == Norm::linf ? "linf" : "l2"; }

std::string to_string(AttackLoss l) {
  switch (l) {
    case AttackLoss::cross_entropy: return "cross_entropy";
    case AttackLoss::kl_vs_clean: return "kl_vs_clean";
    case AttackLoss::cw_margin: return "cw_margin";
  }
  return "?";
}

Tensor project(const Tensor& delta, Norm norm, double epsilon) {
  if (epsilon < 0.0) fail(Errc::invalid_argument, "epsilon must be nonnegative");
  if (norm == Norm::linf) return clamp(delta, -epsilon, epsilon);
  double n = l2_norm(delta);
  if (n <= epsilon) return delta;
  return scale(delta, epsilon / n);
}

double cw_margin_loss(const Tensor& logits, int y) {
  int n = static_cast<int>(logits.data.size());
  if (n < 2) fail(Errc::invalid_argument, "margin needs at least two classes");
  if (y < 0 || y >= n)
    fail(Errc::invalid_argument, "label " + std::to_string(y) + " outside [0, " + std::to_string(n) + ")");
  double best = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < n; ++j)
    if (j != y) best = std::max(best, logits.data[j]);
  return best - logits.data[y];
}

namespace {

void check_cfg(const AttackConfig& cfg) {
  if (cfg.epsilon < 0.0) fail(Errc::invalid_argument, "epsilon must be nonnegative");
  if (cfg.steps < 1) fail(Errc::invalid_argument, "steps must be positive");
  if (cfg.step_size <= 0.0) fail(Errc::invalid_argument, "step_size must be positive");
  if (cfg.random_start_std < 0.0) fail(Errc::invalid_argument, "random_start_std must be nonnegative");
  if (cfg.clamp_range && cfg.clamp_range->first >= cfg.clamp_range->second)
    fail(Errc::invalid_argument, "clamp range is empty");
}

// Ascent-objective gradient with respect to the input at s + delta. For the
// CW margin the runner-up class is re-selected from the current logits, which
// realizes a subgradient of the max.
Tensor input_grad(const Network& net, const Tensor& s_cur, int y, AttackLoss kind,
                  const Tensor* clean_logits) {
  thread_local Graph g;
  g.reset();
  int input = g.param("input", s_cur);
  ForwardRec rec = net.record(g, input, false);
  int loss = -1;
  switch (kind) {
    case AttackLoss::cross_entropy:
      loss = calibrated_loss_node(g, rec.logits, onehot_node(g, y, net.num_classes()));
      break;
    case AttackLoss::kl_vs_clean:
      loss = calibrated_loss_node(g, g.constant(*clean_logits), rec.logits);
      break;
    case AttackLoss::cw_margin: {
      Tensor cur = g.value(rec.logits);
      int runner = y == 0 ? 1 : 0;
      for (int j = 0; j < static_cast<int>(cur.data.size()); ++j)
        if (j != y && cur.data[j] > cur.data[runner]) runner = j;
      loss = g.sub(g.index(rec.logits, runner), g.index(rec.logits, y));
      break;
    }
  }
  g.backward_values(loss);
  return g.adjoint(input);
}

Tensor sign_of(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  return out;
}

}  // namespace

Tensor pgd(const Network& net, const Tensor& s, int y, const AttackConfig& cfg, Rng& rng) {
  check_cfg(cfg);
  Tensor clean_logits;
  if (cfg.loss_kind == AttackLoss::kl_vs_clean) clean_logits = net.forward_values(s);

  Tensor delta = cfg.random_start_std > 0.0
                     ? sample_gaussian(rng, 0.0, cfg.random_start_std, s.shape)
                     : Tensor::zeros(s.shape);
  delta = project(delta, cfg.norm, cfg.epsilon);

  for (int k = 0; k < cfg.steps; ++k) {
    Tensor grad = input_grad(net, add(s, delta), y, cfg.loss_kind, &clean_logits);
    Tensor step;
    if (cfg.norm == Norm::linf) {
      step = sign_of(grad);
    } else {
      double n = l2_norm(grad);
      step = n > 1e-12 ? scale(grad, 1.0 / n) : Tensor::zeros(grad.shape);
    }
    delta = project(add(delta, scale(step, cfg.step_size)), cfg.norm, cfg.epsilon);
  }

  Tensor out = add(s, delta);
  if (cfg.clamp_range) out = clamp(out, cfg.clamp_range->first, cfg.clamp_range->second);
  return out;
}

Tensor fgsm(const Network& net, const Tensor& s, int y, const AttackConfig& cfg) {
  if (cfg.epsilon == 0.0) {
    Tensor out = s;
    if (cfg.clamp_range) out = clamp(out, cfg.clamp_range->first, cfg.clamp_range->second);
    return out;
  }
  AttackConfig one = cfg;
  one.steps = 1;
  one.step_size = cfg.epsilon;
  one.random_start_std = 0.0;
  Rng unused(0);
  return pgd(net, s, y, one, unused);
}

TransferReport transfer_eval(const Network& surrogate, const Network& target, const Dataset& ds,
                             const AttackConfig& cfg, Rng& rng) {
  check_cfg(cfg);
  if (surrogate.num_classes() != target.num_classes())
    fail(Errc::shape_mismatch, "surrogate and target disagree on class count (" +
                                   std::to_string(surrogate.num_classes()) + " vs " +
                                   std::to_string(target.num_classes()) + ")");
  const Layer& sl = surrogate.layers.front();
  const Layer& tl = target.layers.front();
  bool compatible = sl.kind == tl.kind &&
                    (sl.kind == Layer::Kind::dense ? sl.in == tl.in : sl.ic == tl.ic);
  if (!compatible)
    fail(Errc::shape_mismatch, "surrogate and target disagree on input dimensions");
  if (ds.size() == 0) fail(Errc::invalid_argument, "empty dataset");

  TransferReport rep;
  rep.n = ds.size();
  size_t clean = 0, transfer = 0, white = 0;
  for (size_t i = 0; i < ds.size(); ++i) {
    Rng child = rng.child(i);
    Tensor adv = pgd(surrogate, ds.inputs[i], ds.labels[i], cfg, child);
    if (argmax(target.forward_values(ds.inputs[i])) == ds.labels[i]) ++clean;
    if (argmax(target.forward_values(adv)) == ds.labels[i]) ++transfer;
    if (argmax(surrogate.forward_values(adv)) == ds.labels[i]) ++white;
  }
  rep.clean_acc = static_cast<double>(clean) / rep.n;
  rep.transfer_robust_acc = static_cast<double>(transfer) / rep.n;
  rep.surrogate_robust_acc = static_cast<double>(white) / rep.n;
  return rep;
}

}  // namespace trat
