#ifndef TRAT_ATTACK_HPP
#define TRAT_ATTACK_HPP

#include <optional>
#include <string>
#include <utility>

#include "trat/data.hpp"
#include "trat/net.hpp"
#include "trat/tensor.hpp"

namespace trat {

enum class Norm { linf, l2 };

// Objective the attacker ascends: the calibrated label loss, the calibrated
// divergence against the clean prediction (held fixed), or the CW margin.
enum class AttackLoss { cross_entropy, kl_vs_clean, cw_margin };

struct AttackConfig {
  Norm norm = Norm::linf;
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int steps = 10;
  AttackLoss loss_kind = AttackLoss::cross_entropy;
  double random_start_std = 0.001;
  std::optional<std::pair<double, double>> clamp_range;
};

Norm parse_norm(const std::string& s);
AttackLoss parse_attack_loss(const std::string& s);
std::string to_string(Norm n);
std::string to_string(AttackLoss l);

// Projection onto the epsilon ball: componentwise clamp for l-inf, rescale
// onto the sphere for l2 whenever the norm exceeds epsilon.
Tensor project(const Tensor& delta, Norm norm, double epsilon);

// max over j != y of logit_j, minus logit_y; positive iff misclassified.
double cw_margin_loss(const Tensor& logits, int y);

// Projected gradient ascent from s + random_start_std * N(0, I) (start
// projected into the ball), with sign steps under l-inf and unit-gradient
// steps under l2. The result satisfies ||s' - s||_p <= epsilon; when
// clamp_range is set and s lies inside it, s' is clamped into the range too.
Tensor pgd(const Network& net, const Tensor& s, int y, const AttackConfig& cfg, Rng& rng);

// Single full-budget signed step without random start.
Tensor fgsm(const Network& net, const Tensor& s, int y, const AttackConfig& cfg);

struct TransferReport {
  size_t n = 0;
  double clean_acc = 0.0;          // target accuracy on the unperturbed inputs
  double transfer_robust_acc = 0.0;  // target accuracy on surrogate-crafted examples
  double surrogate_robust_acc = 0.0; // white-box accuracy of the surrogate itself
};

// Black-box protocol: craft adversarial examples against the surrogate, score
// them on the target. Per-sample rng children keep the report deterministic.
TransferReport transfer_eval(const Network& surrogate, const Network& target, const Dataset& ds,
                             const AttackConfig& cfg, Rng& rng);

}  // namespace trat

#endif  // TRAT_ATTACK_HPP
