#include "trat/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <vector>

#include "trat/error.hpp"

namespace trat {

namespace {

[[noreturn]] void cfg_fail(int line, int col, const std::string& what) {
  fail(Errc::parse_error,
       "config line " + std::to_string(line) + ", col " + std::to_string(col) + ": " + what);
}

std::string fmt_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string quoted(const std::string& s) { return "\"" + s + "\""; }

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out.empty() ? "\"\"" : out;
}

// Comment starts at the first '#' outside double quotes.
std::string strip_comment(const std::string& raw) {
  bool inq = false;
  for (size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] == '"')
      inq = !inq;
    else if (raw[i] == '#' && !inq)
      return raw.substr(0, i);
  }
  return raw;
}

std::string trim(const std::string& s, size_t* first_col = nullptr) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    if (first_col) *first_col = s.size();
    return "";
  }
  size_t e = s.find_last_not_of(" \t\r");
  if (first_col) *first_col = b;
  return s.substr(b, e - b + 1);
}

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"model", {"arch"}},
      {"data",
       {"dataset", "n", "noise_std", "train_frac", "seed", "train_images", "train_labels",
        "test_images", "test_labels"}},
      {"attack",
       {"norm", "epsilon", "step_size", "steps", "loss", "random_start_std", "clamp_lo",
        "clamp_hi"}},
      {"taylor", {"mode", "estimator", "lambda_inv", "eta", "sigma", "mc_samples", "detach_row_sums"}},
      {"train",
       {"epochs", "batch_size", "lr", "momentum", "weight_decay", "lr_drop_epochs",
        "lr_drop_factor", "seed", "checkpoint_epochs", "augment"}},
      {"output", {"dir"}},
  };
  return keys;
}

struct Value {
  std::string text;
  int line;
  int col;

  double as_double() const {
    char* end = nullptr;
    double v = text.empty() ? 0.0 : std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size())
      cfg_fail(line, col, "expected a number, got '" + text + "'");
    if (!std::isfinite(v)) cfg_fail(line, col, "number out of range: '" + text + "'");
    return v;
  }

  int as_int() const {
    char* end = nullptr;
    long long v = text.empty() ? 0 : std::strtoll(text.c_str(), &end, 10);
    if (text.empty() || end != text.c_str() + text.size())
      cfg_fail(line, col, "expected an integer, got '" + text + "'");
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
      cfg_fail(line, col, "integer out of range: '" + text + "'");
    return static_cast<int>(v);
  }

  std::uint64_t as_u64() const {
    char* end = nullptr;
    if (text.empty() || text[0] == '-' || text[0] == '+')
      cfg_fail(line, col, "expected a nonnegative integer, got '" + text + "'");
    unsigned long long v = std::strtoull(text.c_str(), &end, 10);
    if (end != text.c_str() + text.size())
      cfg_fail(line, col, "expected a nonnegative integer, got '" + text + "'");
    return static_cast<std::uint64_t>(v);
  }

  bool as_bool() const {
    if (text == "true") return true;
    if (text == "false") return false;
    cfg_fail(line, col, "expected true or false, got '" + text + "'");
  }

  std::vector<int> as_int_list() const {
    std::vector<int> out;
    if (text.empty()) return out;
    size_t start = 0;
    while (true) {
      size_t comma = text.find(',', start);
      std::string piece = trim(text.substr(start, comma - start));
      Value item{piece, line, col};
      out.push_back(item.as_int());
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return out;
  }
};

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::string section;
  std::set<std::string> seen;
  bool clamp_lo_set = false, clamp_hi_set = false;
  double clamp_lo = 0.0, clamp_hi = 0.0;
  int clamp_line = 0;

  std::istringstream stream(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(stream, raw)) {
    ++lineno;
    size_t indent = 0;
    std::string body = trim(strip_comment(raw), &indent);
    int col = static_cast<int>(indent) + 1;
    if (body.empty()) continue;

    if (body.front() == '[') {
      if (body.back() != ']' || body.size() < 3)
        cfg_fail(lineno, col, "malformed section header '" + body + "'");
      std::string name = trim(body.substr(1, body.size() - 2));
      if (!known_keys().count(name)) cfg_fail(lineno, col, "unknown section '[" + name + "]'");
      section = name;
      continue;
    }

    size_t eq = body.find('=');
    if (eq == std::string::npos)
      cfg_fail(lineno, col, "expected 'key = value', got '" + body + "'");
    std::string key = trim(body.substr(0, eq));
    if (key.empty()) cfg_fail(lineno, col, "missing key before '='");
    if (section.empty())
      cfg_fail(lineno, col, "key '" + key + "' appears before any section");
    if (!known_keys().at(section).count(key))
      cfg_fail(lineno, col, "unknown key '" + key + "' in [" + section + "]");
    if (!seen.insert(section + "." + key).second)
      cfg_fail(lineno, col, "duplicate key '" + key + "' in [" + section + "]");

    size_t voff = 0;
    std::string vtext = trim(body.substr(eq + 1), &voff);
    int vcol = static_cast<int>(indent + eq + 1 + voff) + 1;
    if (vtext.size() >= 1 && vtext.front() == '"') {
      if (vtext.size() < 2 || vtext.back() != '"')
        cfg_fail(lineno, vcol, "missing closing quote");
      vtext = vtext.substr(1, vtext.size() - 2);
      if (vtext.find('"') != std::string::npos)
        cfg_fail(lineno, vcol, "stray quote inside string");
    }
    Value v{vtext, lineno, vcol};

    // Enum-valued and arch keys are validated here so mistakes carry a
    // location; numeric ranges are checked by the consuming module.
    auto reject = [&](const Error& e) { cfg_fail(lineno, vcol, e.what()); };
    if (section == "model") {
      try {
        parse_arch(resolve_arch_preset(v.text));
        cfg.arch = v.text;
      } catch (const Error& e) {
        reject(e);
      }
    } else if (section == "data") {
      if (key == "dataset") {
        if (v.text != "moons" && v.text != "idx")
          cfg_fail(lineno, vcol, "dataset must be 'moons' or 'idx'");
        cfg.data.dataset = v.text;
      } else if (key == "n")
        cfg.data.n = v.as_int();
      else if (key == "noise_std")
        cfg.data.noise_std = v.as_double();
      else if (key == "train_frac")
        cfg.data.train_frac = v.as_double();
      else if (key == "seed")
        cfg.data.seed = v.as_u64();
      else if (key == "train_images")
        cfg.data.train_images = v.text;
      else if (key == "train_labels")
        cfg.data.train_labels = v.text;
      else if (key == "test_images")
        cfg.data.test_images = v.text;
      else
        cfg.data.test_labels = v.text;
    } else if (section == "attack") {
      AttackConfig& a = cfg.train.attack;
      if (key == "norm") {
        try {
          a.norm = parse_norm(v.text);
        } catch (const Error& e) {
          reject(e);
        }
      } else if (key == "loss") {
        try {
          a.loss_kind = parse_attack_loss(v.text);
        } catch (const Error& e) {
          reject(e);
        }
      } else if (key == "epsilon")
        a.epsilon = v.as_double();
      else if (key == "step_size")
        a.step_size = v.as_double();
      else if (key == "steps")
        a.steps = v.as_int();
      else if (key == "random_start_std")
        a.random_start_std = v.as_double();
      else if (key == "clamp_lo") {
        clamp_lo = v.as_double();
        clamp_lo_set = true;
        clamp_line = lineno;
      } else {
        clamp_hi = v.as_double();
        clamp_hi_set = true;
        clamp_line = lineno;
      }
    } else if (section == "taylor") {
      TaylorConfig& t = cfg.train.taylor;
      if (key == "mode") {
        try {
          t.mode = parse_mode(v.text);
        } catch (const Error& e) {
          reject(e);
        }
      } else if (key == "estimator") {
        try {
          t.estimator = parse_estimator(v.text);
        } catch (const Error& e) {
          reject(e);
        }
      } else if (key == "lambda_inv")
        t.lambda_inv = v.as_double();
      else if (key == "eta")
        t.eta = v.as_double();
      else if (key == "sigma")
        t.sigma = v.as_double();
      else if (key == "mc_samples")
        t.mc_samples = v.as_int();
      else
        t.detach_row_sums = v.as_bool();
    } else if (section == "train") {
      TrainConfig& t = cfg.train;
      if (key == "epochs")
        t.epochs = v.as_int();
      else if (key == "batch_size")
        t.batch_size = v.as_int();
      else if (key == "lr")
        t.lr = v.as_double();
      else if (key == "momentum")
        t.momentum = v.as_double();
      else if (key == "weight_decay")
        t.weight_decay = v.as_double();
      else if (key == "lr_drop_epochs")
        t.lr_drop_epochs = v.as_int_list();
      else if (key == "lr_drop_factor")
        t.lr_drop_factor = v.as_double();
      else if (key == "seed")
        t.seed = v.as_u64();
      else if (key == "checkpoint_epochs")
        t.checkpoint_epochs = v.as_int_list();
      else
        t.augment_images = v.as_bool();
    } else {  // output
      cfg.train.out_dir = v.text;
    }
  }

  if (clamp_lo_set != clamp_hi_set)
    fail(Errc::parse_error, "config line " + std::to_string(clamp_line) +
                                ": clamp_lo and clamp_hi must be given together");
  if (clamp_lo_set) cfg.train.attack.clamp_range = {clamp_lo, clamp_hi};
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open config '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

std::string run_config_toml(const RunConfig& cfg) {
  std::ostringstream out;
  out << "[model]\n";
  out << "arch = " << quoted(cfg.arch) << "\n\n";

  out << "[data]\n";
  out << "dataset = " << quoted(cfg.data.dataset) << "\n";
  if (cfg.data.dataset == "idx") {
    out << "train_images = " << quoted(cfg.data.train_images) << "\n";
    out << "train_labels = " << quoted(cfg.data.train_labels) << "\n";
    out << "test_images = " << quoted(cfg.data.test_images) << "\n";
    out << "test_labels = " << quoted(cfg.data.test_labels) << "\n";
  } else {
    out << "n = " << cfg.data.n << "\n";
    out << "noise_std = " << fmt_double(cfg.data.noise_std) << "\n";
    out << "train_frac = " << fmt_double(cfg.data.train_frac) << "\n";
    out << "seed = " << cfg.data.seed << "\n";
  }
  out << "\n";

  const AttackConfig& a = cfg.train.attack;
  out << "[attack]\n";
  out << "norm = " << quoted(to_string(a.norm)) << "\n";
  out << "epsilon = " << fmt_double(a.epsilon) << "\n";
  out << "step_size = " << fmt_double(a.step_size) << "\n";
  out << "steps = " << a.steps << "\n";
  out << "loss = " << quoted(to_string(a.loss_kind)) << "\n";
  out << "random_start_std = " << fmt_double(a.random_start_std) << "\n";
  if (a.clamp_range) {
    out << "clamp_lo = " << fmt_double(a.clamp_range->first) << "\n";
    out << "clamp_hi = " << fmt_double(a.clamp_range->second) << "\n";
  }
  out << "\n";

  const TaylorConfig& t = cfg.train.taylor;
  out << "[taylor]\n";
  out << "mode = " << quoted(to_string(t.mode)) << "\n";
  out << "estimator = " << quoted(to_string(t.estimator)) << "\n";
  out << "lambda_inv = " << fmt_double(t.lambda_inv) << "\n";
  out << "eta = " << fmt_double(t.eta) << "\n";
  out << "sigma = " << fmt_double(t.sigma) << "\n";
  out << "mc_samples = " << t.mc_samples << "\n";
  out << "detach_row_sums = " << (t.detach_row_sums ? "true" : "false") << "\n\n";

  const TrainConfig& tr = cfg.train;
  out << "[train]\n";
  out << "epochs = " << tr.epochs << "\n";
  out << "batch_size = " << tr.batch_size << "\n";
  out << "lr = " << fmt_double(tr.lr) << "\n";
  out << "momentum = " << fmt_double(tr.momentum) << "\n";
  out << "weight_decay = " << fmt_double(tr.weight_decay) << "\n";
  out << "lr_drop_epochs = " << join_ints(tr.lr_drop_epochs) << "\n";
  out << "lr_drop_factor = " << fmt_double(tr.lr_drop_factor) << "\n";
  out << "seed = " << tr.seed << "\n";
  out << "checkpoint_epochs = "
      << join_ints(tr.checkpoint_epochs.empty() ? default_checkpoint_epochs(tr.epochs)
                                                : tr.checkpoint_epochs)
      << "\n";
  out << "augment = " << (tr.augment_images ? "true" : "false") << "\n\n";

  out << "[output]\n";
  out << "dir = " << quoted(tr.out_dir) << "\n";
  return out.str();
}

void write_run_config(const RunConfig& cfg, const std::string& path) {
  std::string text = run_config_toml(cfg);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) fail(Errc::io_error, "short write to '" + path + "'");
}

std::pair<Dataset, Dataset> load_dataset(const DataConfig& cfg) {
  if (cfg.dataset == "moons") {
    if (!cfg.train_images.empty() || !cfg.train_labels.empty() || !cfg.test_images.empty() ||
        !cfg.test_labels.empty())
      fail(Errc::invalid_argument, "dataset 'moons' does not take idx paths");
    Dataset all = two_moons(cfg.n, cfg.noise_std, cfg.seed);
    return split_train_test(all, cfg.train_frac, Rng(cfg.seed).child(1).seed());
  }
  if (cfg.dataset == "idx") {
    if (cfg.train_images.empty() || cfg.train_labels.empty() || cfg.test_images.empty() ||
        cfg.test_labels.empty())
      fail(Errc::invalid_argument, "dataset 'idx' needs train and test image/label paths");
    Dataset train = idx_load(cfg.train_images, cfg.train_labels);
    Dataset test = idx_load(cfg.test_images, cfg.test_labels);
    train.split = "train";
    test.split = "test";
    return {train, test};
  }
  fail(Errc::invalid_argument, "unknown dataset '" + cfg.dataset + "'");
}

RunArtifacts execute_run(const RunConfig& cfg) {
  RunArtifacts art;
  std::tie(art.train_set, art.test_set) = load_dataset(cfg.data);
  Rng init_rng(cfg.train.seed);
  art.result = train(Network::init(cfg.arch, init_rng), art.train_set, cfg.train);
  return art;
}

}  // namespace trat
