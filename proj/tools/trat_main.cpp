#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "trat/attack.hpp"
#include "trat/config.hpp"
#include "trat/data.hpp"
#include "trat/error.hpp"
#include "trat/gradcheck.hpp"
#include "trat/landscape.hpp"
#include "trat/net.hpp"
#include "trat/train.hpp"

namespace {

using namespace trat;

// 0 ok, 1 usage/config, 2 verification failure, 3 numeric abort.
int exit_code_for(Errc code) {
  switch (code) {
    case Errc::numeric_abort:
      return 3;
    case Errc::verification_failure:
      return 2;
    default:
      return 1;
  }
}

// "pgd20,cw20,fgsm" -> attack configs derived from the config's [attack]
// section: the name picks the ascent loss and step count, the section keeps
// norm, budget, step size, random start, and clamp range. "fgsm" is the
// single full-budget signed step without a random start. An empty list means
// clean evaluation only.
std::vector<NamedAttack> parse_attack_names(const std::string& csv, const AttackConfig& base) {
  std::vector<NamedAttack> out;
  size_t at = 0;
  while (at < csv.size()) {
    size_t comma = csv.find(',', at);
    size_t end = comma == std::string::npos ? csv.size() : comma;
    std::string name = csv.substr(at, end - at);
    at = comma == std::string::npos ? csv.size() : comma + 1;
    if (name.empty())
      fail(Errc::invalid_argument, "empty attack name in list '" + csv + "'");

    std::string prefix;
    size_t digits = name.size();
    while (digits > 0 && std::isdigit(static_cast<unsigned char>(name[digits - 1]))) --digits;
    prefix = name.substr(0, digits);
    std::string suffix = name.substr(digits);

    NamedAttack na;
    na.name = name;
    na.cfg = base;
    if (prefix == "pgd") {
      na.cfg.loss_kind = AttackLoss::cross_entropy;
    } else if (prefix == "cw") {
      na.cfg.loss_kind = AttackLoss::cw_margin;
    } else if (prefix == "fgsm" && suffix.empty()) {
      na.cfg.loss_kind = AttackLoss::cross_entropy;
      na.cfg.steps = 1;
      na.cfg.step_size = na.cfg.epsilon;
      na.cfg.random_start_std = 0.0;
    } else {
      fail(Errc::invalid_argument,
           "unknown attack '" + name + "' (expected pgd[N], cw[N], or fgsm)");
    }
    if (!suffix.empty()) {
      int steps = std::atoi(suffix.c_str());
      if (steps < 1) fail(Errc::invalid_argument, "attack '" + name + "' needs >= 1 steps");
      na.cfg.steps = steps;
    }
    out.push_back(std::move(na));
  }
  return out;
}

void print_metrics(const std::vector<MetricsRow>& rows) {
  std::printf("%-8s %-14s %9s %9s %10s\n", "split", "attack", "clean", "robust", "wall_ms");
  for (const MetricsRow& r : rows)
    std::printf("%-8s %-14s %9.4f %9.4f %10.1f\n", r.split.c_str(), r.attack.c_str(),
                r.clean_acc, r.robust_acc, r.wall_ms);
}

void append_metrics(const std::string& path, const std::vector<MetricsRow>& rows) {
  bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for appending");
  if (fresh) out << metrics_csv_header() << "\n";
  for (const MetricsRow& r : rows) out << to_csv(r) << "\n";
  if (!out) fail(Errc::io_error, "short write to '" + path + "'");
}

struct TrainOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
};

int cmd_train(const TrainOpts& o) {
  RunConfig cfg = load_run_config(o.config_path);
  if (o.seed_set) cfg.train.seed = o.seed;
  if (!o.out_dir.empty()) cfg.train.out_dir = o.out_dir;
  if (cfg.train.out_dir.empty())
    fail(Errc::invalid_argument, "no output directory: set [output] dir or pass --out");

  std::filesystem::create_directories(cfg.train.out_dir);
  // Snapshot first so the directory identifies the run even if it aborts.
  write_run_config(cfg, cfg.train.out_dir + "/config.toml");

  RunArtifacts art = execute_run(cfg);
  std::vector<MetricsRow> final_rows = evaluate(art.result.net, art.test_set, {}, cfg.train.seed);
  std::printf("trained %d epochs on %zu samples; final test clean accuracy %.4f\n",
              cfg.train.epochs, art.train_set.size(), final_rows.front().clean_acc);
  std::printf("artifacts in %s: final.trat, metrics.csv, config.toml, %zu checkpoints\n",
              cfg.train.out_dir.c_str(), art.result.checkpoints.size());
  return 0;
}

struct EvalOpts {
  std::string ckpt_path;
  std::string config_path;
  std::string attacks = "pgd20,cw20";
  std::string surrogate_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string append_path;
};

int cmd_eval(const EvalOpts& o) {
  RunConfig cfg = load_run_config(o.config_path);
  std::uint64_t seed = o.seed_set ? o.seed : cfg.train.seed;
  Network net = load(o.ckpt_path);
  auto [train_set, test_set] = load_dataset(cfg.data);
  std::vector<NamedAttack> attacks = parse_attack_names(o.attacks, cfg.train.attack);

  std::vector<MetricsRow> rows = evaluate(net, test_set, attacks, seed);
  print_metrics(rows);

  if (!o.surrogate_path.empty()) {
    Network surrogate = load(o.surrogate_path);
    for (size_t a = 0; a < attacks.size(); ++a) {
      // Stream matches the white-box evaluation above, so a self-transfer
      // (surrogate == target checkpoint) reproduces its numbers exactly.
      Rng arng = Rng(seed).child(a);
      TransferReport rep = transfer_eval(surrogate, net, test_set, attacks[a].cfg, arng);
      std::printf("transfer %-12s target-clean %.4f transfer-robust %.4f surrogate-whitebox %.4f\n",
                  attacks[a].name.c_str(), rep.clean_acc, rep.transfer_robust_acc,
                  rep.surrogate_robust_acc);
      MetricsRow row;
      row.split = "transfer";
      row.attack = attacks[a].name;
      row.clean_acc = rep.clean_acc;
      row.robust_acc = rep.transfer_robust_acc;
      rows.push_back(row);
    }
  }
  if (!o.append_path.empty()) append_metrics(o.append_path, rows);
  return 0;
}

struct LandscapeOpts {
  std::string ckpt_path;
  std::string config_path;
  std::string input = "moons-sample";
  std::string mode = "input";
  int index = 0;
  double range = 0.1;
  int steps = 41;
  double sigma = 0.01;
  int samples = 200;
  std::uint64_t seed = 0;
  std::string out_path;
};

void emit(const std::string& text, const std::string& out_path, const char* what) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + out_path + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) fail(Errc::io_error, "short write to '" + out_path + "'");
  std::printf("wrote %s to %s\n", what, out_path.c_str());
}

int cmd_landscape(const LandscapeOpts& o) {
  Network net = load(o.ckpt_path);
  RunConfig cfg;
  if (!o.config_path.empty()) cfg = load_run_config(o.config_path);

  std::string want;
  if (o.input == "moons-sample")
    want = "moons";
  else if (o.input == "idx")
    want = "idx";
  else
    fail(Errc::invalid_argument, "--input must be 'moons-sample' or 'idx', got '" + o.input + "'");
  if (cfg.data.dataset != want)
    fail(Errc::invalid_argument,
         "--input " + o.input + " needs a config whose [data] dataset is '" + want + "'");

  auto [train_set, test_set] = load_dataset(cfg.data);
  if (o.index < 0 || static_cast<size_t>(o.index) >= test_set.size())
    fail(Errc::invalid_argument, "--index " + std::to_string(o.index) +
                                     " outside the test split [0, " +
                                     std::to_string(test_set.size()) + ")");

  if (o.mode == "input") {
    if (o.range <= 0.0) fail(Errc::invalid_argument, "--range must be positive");
    LandscapeGrid grid = input_surface(net, test_set.inputs[static_cast<size_t>(o.index)],
                                       test_set.labels[static_cast<size_t>(o.index)],
                                       {-o.range, o.range}, {-o.range, o.range}, o.steps, o.seed,
                                       cfg.train.attack.clamp_range);
    emit(grid_to_csv(grid), o.out_path, "landscape grid");
  } else if (o.mode == "weight") {
    SharpnessReport rep = weight_sharpness(net, test_set, o.sigma, o.samples, o.seed);
    emit(sharpness_json(rep), o.out_path, "sharpness report");
  } else {
    fail(Errc::invalid_argument, "--mode must be 'input' or 'weight', got '" + o.mode + "'");
  }
  return 0;
}

struct GradcheckOpts {
  std::string size = "small";
  std::uint64_t seed = 0;
  bool inject_relu_fault = false;
};

int cmd_gradcheck(const GradcheckOpts& o) {
  GradcheckReport report = run_gradcheck(o.size, o.seed, o.inject_relu_fault);
  std::cout << report.text();
  return report.all_passed() ? 0 : 2;
}

struct DatasetOpts {
  std::string config_path;
  std::string split = "test";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_path;
};

int cmd_dataset(const DatasetOpts& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) cfg = load_run_config(o.config_path);
  if (o.seed_set) cfg.data.seed = o.seed;
  if (o.split != "train" && o.split != "test")
    fail(Errc::invalid_argument, "--split must be 'train' or 'test', got '" + o.split + "'");

  auto [train_set, test_set] = load_dataset(cfg.data);
  const Dataset& pick = o.split == "train" ? train_set : test_set;

  std::printf("dataset %s: %zu train / %zu test samples, input %s, %d classes\n",
              cfg.data.dataset.c_str(), train_set.size(), test_set.size(),
              pick.inputs.front().shape.str().c_str(), pick.num_classes);
  std::vector<size_t> counts(static_cast<size_t>(pick.num_classes), 0);
  for (int y : pick.labels) ++counts[static_cast<size_t>(y)];
  std::printf("%s class counts:", o.split.c_str());
  for (size_t c : counts) std::printf(" %zu", c);
  std::printf("\n");

  if (!o.out_path.empty()) {
    if (pick.inputs.front().shape.nd != 1)
      fail(Errc::invalid_argument, "csv export supports vector datasets only");
    int dim = pick.inputs.front().shape.d[0];
    std::string text;
    for (int f = 0; f < dim; ++f) text += "f" + std::to_string(f) + ",";
    text += "label\n";
    char buf[64];
    for (size_t i = 0; i < pick.size(); ++i) {
      for (int f = 0; f < dim; ++f) {
        std::snprintf(buf, sizeof(buf), "%.17g,", pick.inputs[i].data[static_cast<size_t>(f)]);
        text += buf;
      }
      text += std::to_string(pick.labels[i]) + "\n";
    }
    emit(text, o.out_path, (o.split + " split csv").c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Randomized adversarial training via Taylor expansion: train, evaluate, probe"};
  app.require_subcommand(1);

  TrainOpts train_opts;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("config", train_opts.config_path, "Run config path")->required();
  CLI::Option* train_seed =
      train_cmd->add_option("--seed", train_opts.seed, "Override the [train] seed");
  train_cmd->add_option("--out", train_opts.out_dir, "Override the [output] dir");

  EvalOpts eval_opts;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint under attacks");
  eval_cmd->add_option("checkpoint", eval_opts.ckpt_path, "Checkpoint path")->required();
  eval_cmd->add_option("config", eval_opts.config_path, "Run config path")->required();
  eval_cmd->add_option("--attacks", eval_opts.attacks,
                       "Comma list of pgd[N], cw[N], fgsm; empty for clean only");
  eval_cmd->add_option("--surrogate", eval_opts.surrogate_path,
                       "Craft black-box examples against this checkpoint");
  CLI::Option* eval_seed =
      eval_cmd->add_option("--seed", eval_opts.seed, "Attack seed (default: [train] seed)");
  eval_cmd->add_option("--append", eval_opts.append_path, "Append metric rows to this CSV");

  LandscapeOpts land_opts;
  CLI::App* land_cmd = app.add_subcommand("landscape", "Loss surface grid or weight sharpness");
  land_cmd->add_option("checkpoint", land_opts.ckpt_path, "Checkpoint path")->required();
  land_cmd->add_option("--config", land_opts.config_path, "Run config for the probe data");
  land_cmd->add_option("--input", land_opts.input, "Probe sample source: moons-sample or idx");
  land_cmd->add_option("--mode", land_opts.mode, "input (grid csv) or weight (sharpness json)");
  land_cmd->add_option("--index", land_opts.index, "Test-split sample index for input mode");
  land_cmd->add_option("--range", land_opts.range, "Half-width of both grid axes");
  land_cmd->add_option("--steps", land_opts.steps, "Grid points per axis");
  land_cmd->add_option("--sigma", land_opts.sigma, "Weight-noise std for weight mode");
  land_cmd->add_option("--samples", land_opts.samples, "Noise draws for weight mode");
  land_cmd->add_option("--seed", land_opts.seed, "Direction / noise seed");
  land_cmd->add_option("--out", land_opts.out_path, "Output file (default: stdout)");

  GradcheckOpts gc_opts;
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "Verify derivatives against oracles");
  gc_cmd->add_option("--size", gc_opts.size, "Battery size: small or tiny");
  gc_cmd->add_option("--seed", gc_opts.seed, "Case-generation seed");
  gc_cmd->add_flag("--inject-relu-fault", gc_opts.inject_relu_fault,
                   "Corrupt the relu backward rule (harness sensitivity fixture)")
      ->group("");

  DatasetOpts ds_opts;
  CLI::App* ds_cmd = app.add_subcommand("dataset", "Materialize and summarize a dataset");
  ds_cmd->add_option("--config", ds_opts.config_path, "Run config providing the [data] section");
  ds_cmd->add_option("--split", ds_opts.split, "train or test");
  CLI::Option* ds_seed = ds_cmd->add_option("--seed", ds_opts.seed, "Override the [data] seed");
  ds_cmd->add_option("--out", ds_opts.out_path, "Write the split as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "trat: " << e.what() << "\n";
    return 1;
  }

  train_opts.seed_set = train_seed->count() > 0;
  eval_opts.seed_set = eval_seed->count() > 0;
  ds_opts.seed_set = ds_seed->count() > 0;

  try {
    if (app.got_subcommand(train_cmd)) return cmd_train(train_opts);
    if (app.got_subcommand(eval_cmd)) return cmd_eval(eval_opts);
    if (app.got_subcommand(land_cmd)) return cmd_landscape(land_opts);
    if (app.got_subcommand(gc_cmd)) return cmd_gradcheck(gc_opts);
    if (app.got_subcommand(ds_cmd)) return cmd_dataset(ds_opts);
  } catch (const Error& e) {
    std::cerr << "trat: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "trat: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
