#ifndef TRAT_TRAIN_HPP
#define TRAT_TRAIN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "trat/attack.hpp"
#include "trat/data.hpp"
#include "trat/losses.hpp"
#include "trat/net.hpp"

namespace trat {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> lr_drop_epochs = {100, 150};
  double lr_drop_factor = 0.1;
  AttackConfig attack;
  TaylorConfig taylor;
  std::uint64_t seed = 0;
  // Empty means the standard late-training schedule from
  // default_checkpoint_epochs.
  std::vector<int> checkpoint_epochs;
  bool augment_images = false;  // 4-pixel pad random crop + horizontal flip
  std::string out_dir;          // empty disables checkpoint/metrics writes
};

struct MetricsRow {
  int epoch = 0;
  std::string split;
  double clean_acc = 0.0;
  double robust_acc = 0.0;
  std::string attack = "none";
  double loss_zeroth = 0.0;
  double loss_first = 0.0;
  double loss_second = 0.0;
  double wall_ms = 0.0;
};

std::string metrics_csv_header();
std::string to_csv(const MetricsRow& row);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// Every epoch in [100, 110] and [150, 160], every fifth epoch elsewhere past
// 110, truncated to the run length; short runs fall back to the final epoch.
std::vector<int> default_checkpoint_epochs(int epochs);

// Base lr with one multiplicative drop per schedule entry <= epoch.
double lr_at(const TrainConfig& cfg, int epoch);

struct SgdState {
  GradMap velocity;  // lazily initialized to zeros on first use
};

// v <- momentum * v + (grad + weight_decay * w); w <- w - lr * v.
void sgd_step(Network& net, const GradMap& grads, SgdState& state, double lr, double momentum,
              double weight_decay);

struct TrainResult {
  Network net;
  std::vector<MetricsRow> metrics;  // one train row per epoch
  std::vector<std::pair<int, std::string>> checkpoints;  // epoch -> file path
};

// Outer minimization: per epoch a seeded shuffle; per minibatch one weight
// noise draw (taken only when the objective's Taylor terms are active), an
// inner attack against the noise-shifted weights, one combined objective
// gradient at the deterministic weights, and an SGD step. Deterministic for a
// fixed (net, dataset, cfg) triple.
TrainResult train(Network net, const Dataset& ds, const TrainConfig& cfg);

struct NamedAttack {
  std::string name;
  AttackConfig cfg;
};

// Clean accuracy plus one robust-accuracy row per attack; an empty attack
// list yields a single clean-only row. Deterministic per seed.
std::vector<MetricsRow> evaluate(const Network& net, const Dataset& ds,
                                 const std::vector<NamedAttack>& attacks, std::uint64_t seed);

}  // namespace trat

#endif  // TRAT_TRAIN_HPP
