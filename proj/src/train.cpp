#include "trat/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace trat {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv_header() {
  return "epoch,split,clean_acc,robust_acc,attack,loss_zeroth,loss_first,loss_second,wall_ms";
}

std::string to_csv(const MetricsRow& row) {
  return std::to_string(row.epoch) + "," + row.split + "," + fmt(row.clean_acc) + "," +
         fmt(row.robust_acc) + "," + row.attack + "," + fmt(row.loss_zeroth) + "," +
         fmt(row.loss_first) + "," + fmt(row.loss_second) + "," + fmt(row.wall_ms);
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out << metrics_csv_header() << "\n";
  for (const MetricsRow& row : rows) out << to_csv(row) << "\n";
  if (!out) fail(Errc::io_error, "write to '" + path + "' failed");
}

std::vector<int> default_checkpoint_epochs(int epochs) {
  if (epochs < 1) fail(Errc::invalid_argument, "epochs must be positive");
  std::vector<int> out;
  for (int e = 1; e <= epochs; ++e) {
    bool dense = (e >= 100 && e <= 110) || (e >= 150 && e <= 160);
    bool sparse = e > 110 && e % 5 == 0;
    if (dense || sparse) out.push_back(e);
  }
  if (out.empty() || out.back() != epochs) out.push_back(epochs);
  return out;
}

double lr_at(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (int drop : cfg.lr_drop_epochs)
    if (epoch >= drop) lr *= cfg.lr_drop_factor;
  return lr;
}

void sgd_step(Network& net, const GradMap& grads, SgdState& state, double lr, double momentum,
              double weight_decay) {
  for (auto& [name, w] : net.params) {
    auto it = grads.find(name);
    if (it == grads.end()) fail(Errc::count_mismatch, "gradient missing parameter '" + name + "'");
    if (!(it->second.shape == w.shape))
      fail(Errc::shape_mismatch, "gradient for '" + name + "' has shape " + it->second.shape.str() +
                                     ", parameter has " + w.shape.str());
    Tensor& v = state.velocity.try_emplace(name, Tensor::zeros(w.shape)).first->second;
    for (size_t i = 0; i < w.data.size(); ++i) {
      v.data[i] = momentum * v.data[i] + (it->second.data[i] + weight_decay * w.data[i]);
      w.data[i] -= lr * v.data[i];
    }
  }
}

namespace {

void check_cfg(const TrainConfig& cfg) {
  if (cfg.epochs < 1) fail(Errc::invalid_argument, "epochs must be positive");
  if (cfg.batch_size < 1) fail(Errc::invalid_argument, "batch_size must be positive");
  if (cfg.lr < 0.0) fail(Errc::invalid_argument, "lr must be nonnegative");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
    fail(Errc::invalid_argument, "momentum must lie in [0, 1)");
  if (cfg.weight_decay < 0.0) fail(Errc::invalid_argument, "weight_decay must be nonnegative");
  for (size_t i = 0; i < cfg.lr_drop_epochs.size(); ++i) {
    int d = cfg.lr_drop_epochs[i];
    if (d < 1 || d > cfg.epochs)
      fail(Errc::invalid_argument, "lr drop epoch " + std::to_string(d) + " outside [1, " +
                                       std::to_string(cfg.epochs) + "]");
    if (i > 0 && cfg.lr_drop_epochs[i - 1] >= d)
      fail(Errc::invalid_argument, "lr drop epochs must be strictly ascending");
  }
  for (int e : cfg.checkpoint_epochs)
    if (e < 1 || e > cfg.epochs)
      fail(Errc::invalid_argument, "checkpoint epoch " + std::to_string(e) + " outside [1, " +
                                       std::to_string(cfg.epochs) + "]");
}

void save_atomic(const Network& net, const std::string& path) {
  std::string tmp = path + ".tmp";
  save(net, tmp);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(Errc::io_error, "cannot move checkpoint into place at '" + path + "': " + ec.message());
}

bool finite(const GradMap& g) {
  for (const auto& [name, t] : g)
    if (!t.all_finite()) return false;
  return true;
}

}  // namespace

TrainResult train(Network net, const Dataset& ds, const TrainConfig& cfg) {
  check_cfg(cfg);
  if (ds.size() == 0) fail(Errc::invalid_argument, "empty training set");
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

  std::vector<int> ckpt_epochs =
      cfg.checkpoint_epochs.empty() ? default_checkpoint_epochs(cfg.epochs) : cfg.checkpoint_epochs;

  TrainResult result;
  SgdState state;
  Rng master(cfg.seed);
  std::string attack_id = "pgd" + std::to_string(cfg.attack.steps);
  bool noisy_attack = cfg.taylor.mode != TaylorMode::zeroth && cfg.taylor.sigma > 0.0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    Rng er = master.child(epoch);
    Rng shuffle_rng = er.child(0);
    Dataset order = shuffled(ds, shuffle_rng);
    if (cfg.augment_images) {
      Rng aug_rng = er.child(1);
      augment(order.inputs, 4, 0.5, aug_rng);
    }

    double lz = 0.0, lf = 0.0, ls = 0.0;
    size_t clean_hits = 0, robust_hits = 0;
    size_t n = order.size();
    int batch_index = 0;
    for (size_t b0 = 0; b0 < n; b0 += cfg.batch_size, ++batch_index) {
      size_t b1 = std::min(n, b0 + cfg.batch_size);
      Batch batch;
      for (size_t i = b0; i < b1; ++i) {
        batch.s.push_back(order.inputs[i]);
        batch.y.push_back(order.labels[i]);
      }

      // One noise sample serves the whole minibatch: the inner maximization
      // runs against the noise-shifted weights, the outer terms against the
      // deterministic ones.
      Rng attack_rng = er.child(2 + 2 * batch_index);
      Rng noise_rng = er.child(3 + 2 * batch_index);
      Network attacked = net;
      if (noisy_attack) attacked = net.perturbed(net.noise_like(noise_rng, cfg.taylor.sigma));
      for (size_t i = 0; i < batch.s.size(); ++i) {
        Rng sample_rng = attack_rng.child(i);
        batch.s_adv.push_back(pgd(attacked, batch.s[i], batch.y[i], cfg.attack, sample_rng));
      }

      double value = 0.0;
      TermBreakdown tb;
      GradMap grads = total_objective_grad(net, batch, cfg.taylor, noise_rng, &value, &tb);
      if (!std::isfinite(value) || !finite(grads))
        fail(Errc::numeric_abort, "non-finite objective at epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(batch_index));
      size_t bs = batch.s.size();
      lz += tb.zeroth * bs;
      lf += tb.first * bs;
      ls += tb.second * bs;
      for (size_t i = 0; i < bs; ++i) {
        if (argmax(net.forward_values(batch.s[i])) == batch.y[i]) ++clean_hits;
        if (argmax(net.forward_values(batch.s_adv[i])) == batch.y[i]) ++robust_hits;
      }

      sgd_step(net, grads, state, lr_at(cfg, epoch), cfg.momentum, cfg.weight_decay);
    }

    MetricsRow row;
    row.epoch = epoch;
    row.split = "train";
    row.clean_acc = static_cast<double>(clean_hits) / n;
    row.robust_acc = static_cast<double>(robust_hits) / n;
    row.attack = attack_id;
    row.loss_zeroth = lz / n;
    row.loss_first = lf / n;
    row.loss_second = ls / n;
    row.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.metrics.push_back(row);

    if (!cfg.out_dir.empty() &&
        std::find(ckpt_epochs.begin(), ckpt_epochs.end(), epoch) != ckpt_epochs.end()) {
      std::string path = cfg.out_dir + "/ckpt-epoch-" + std::to_string(epoch) + ".trat";
      save_atomic(net, path);
      result.checkpoints.emplace_back(epoch, path);
    }
  }

  if (!cfg.out_dir.empty()) {
    save_atomic(net, cfg.out_dir + "/final.trat");
    write_metrics_csv(cfg.out_dir + "/metrics.csv", result.metrics);
  }
  result.net = std::move(net);
  return result;
}

std::vector<MetricsRow> evaluate(const Network& net, const Dataset& ds,
                                 const std::vector<NamedAttack>& attacks, std::uint64_t seed) {
  if (ds.size() == 0) fail(Errc::invalid_argument, "empty dataset");
  size_t clean_hits = 0;
  for (size_t i = 0; i < ds.size(); ++i)
    if (argmax(net.forward_values(ds.inputs[i])) == ds.labels[i]) ++clean_hits;
  double clean = static_cast<double>(clean_hits) / ds.size();

  std::vector<MetricsRow> rows;
  std::string split = ds.split.empty() ? "eval" : ds.split;
  if (attacks.empty()) {
    MetricsRow row;
    row.split = split;
    row.clean_acc = clean;
    row.robust_acc = clean;
    row.attack = "none";
    rows.push_back(row);
    return rows;
  }

  Rng master(seed);
  for (size_t a = 0; a < attacks.size(); ++a) {
    auto t0 = std::chrono::steady_clock::now();
    Rng arng = master.child(a);
    size_t hits = 0;
    for (size_t i = 0; i < ds.size(); ++i) {
      Rng child = arng.child(i);
      Tensor adv = pgd(net, ds.inputs[i], ds.labels[i], attacks[a].cfg, child);
      if (argmax(net.forward_values(adv)) == ds.labels[i]) ++hits;
    }
    MetricsRow row;
    row.split = split;
    row.clean_acc = clean;
    row.robust_acc = static_cast<double>(hits) / ds.size();
    row.attack = attacks[a].name;
    row.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace trat
