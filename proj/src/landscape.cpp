#include "trat/landscape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "trat/error.hpp"
#include "trat/graph.hpp"
#include "trat/losses.hpp"

namespace trat {

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08x", v);
  return buf;
}

Tensor onehot_tensor(int y, int num_classes) {
  if (y < 0 || y >= num_classes) fail(Errc::invalid_argument, "label out of range");
  Tensor t = Tensor::zeros(Shape::vec(num_classes));
  t.data[static_cast<size_t>(y)] = 1.0;
  return t;
}

double label_loss(const Network& net, const Tensor& s, int y) {
  return calibrated_loss(net.forward_values(s), onehot_tensor(y, net.num_classes()));
}

// Gradient of the label loss w.r.t. the input at the clean point.
Tensor input_gradient(const Network& net, const Tensor& s, int y) {
  Graph g;
  int input = g.param("input", s);
  ForwardRec rec = net.record(g, input, false);
  int loss = calibrated_loss_node(g, rec.logits, onehot_node(g, y, net.num_classes()));
  return backward(g, loss).at("input");
}

std::vector<double> axis(std::pair<double, double> range, int steps) {
  auto [lo, hi] = range;
  if (!(std::isfinite(lo) && std::isfinite(hi)) || lo > hi)
    fail(Errc::invalid_argument, "axis range must be finite with lo <= hi");
  std::vector<double> v(static_cast<size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    double t = static_cast<double>(i) / (steps - 1);
    v[static_cast<size_t>(i)] = lo * (1.0 - t) + hi * t;  // center is exactly 0 when hi == -lo
  }
  return v;
}

}  // namespace

LandscapeGrid input_surface(const Network& net, const Tensor& s, int y,
                            std::pair<double, double> x_range, std::pair<double, double> y_range,
                            int steps, std::uint64_t seed,
                            std::optional<std::pair<double, double>> clamp_range) {
  if (steps < 2) fail(Errc::invalid_argument, "steps must be at least 2");
  if (clamp_range && !(clamp_range->first < clamp_range->second))
    fail(Errc::invalid_argument, "clamp range must satisfy lo < hi");

  LandscapeGrid grid;
  grid.seed = seed;
  grid.net_checksum = checksum(net);
  grid.xs = axis(x_range, steps);
  grid.ys = axis(y_range, steps);

  Tensor gi = input_gradient(net, s, y);  // also validates the network/input pairing
  grid.dir1 = Tensor(s.shape);
  for (size_t i = 0; i < gi.data.size(); ++i)
    grid.dir1.data[i] = gi.data[i] > 0.0 ? 1.0 : (gi.data[i] < 0.0 ? -1.0 : 0.0);
  Rng rng(seed);
  grid.dir2 = sample_rademacher(rng, s.shape);
  grid.dir1_norm = l2_norm(grid.dir1);
  grid.dir2_norm = l2_norm(grid.dir2);

  grid.loss.resize(grid.xs.size() * grid.ys.size());
  for (size_t i = 0; i < grid.xs.size(); ++i) {
    for (size_t j = 0; j < grid.ys.size(); ++j) {
      Tensor p = add(add(s, scale(grid.dir1, grid.xs[i])), scale(grid.dir2, grid.ys[j]));
      if (clamp_range) p = clamp(p, clamp_range->first, clamp_range->second);
      double v = label_loss(net, p, y);
      if (!std::isfinite(v))
        fail(Errc::numeric_abort, "non-finite loss at grid cell (" + std::to_string(i) + ", " +
                                      std::to_string(j) + ")");
      grid.loss[i * grid.ys.size() + j] = v;
    }
  }
  return grid;
}

std::string grid_to_csv(const LandscapeGrid& grid) {
  size_t nx = grid.xs.size(), ny = grid.ys.size();
  if (nx == 0 || ny == 0 || grid.loss.size() != nx * ny)
    fail(Errc::invalid_argument, "grid dimensions do not match its loss matrix");
  std::string out = "# meta seed=" + std::to_string(grid.seed) +
                    " checkpoint=" + hex32(grid.net_checksum) +
                    " dir1_norm=" + fmt17(grid.dir1_norm) +
                    " dir2_norm=" + fmt17(grid.dir2_norm) + " nx=" + std::to_string(nx) +
                    " ny=" + std::to_string(ny) + "\n";
  out += "x,y,loss\n";
  for (size_t i = 0; i < nx; ++i)
    for (size_t j = 0; j < ny; ++j)
      out += fmt17(grid.xs[i]) + "," + fmt17(grid.ys[j]) + "," + fmt17(grid.loss[i * ny + j]) +
             "\n";
  return out;
}

namespace {

[[noreturn]] void bad_line(int line, const std::string& what) {
  fail(Errc::parse_error, "line " + std::to_string(line) + ": " + what);
}

double parse_double(const std::string& tok, int line) {
  char* end = nullptr;
  double v = tok.empty() ? 0.0 : std::strtod(tok.c_str(), &end);
  if (tok.empty() || end != tok.c_str() + tok.size()) bad_line(line, "bad number '" + tok + "'");
  if (!std::isfinite(v)) bad_line(line, "non-finite value '" + tok + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& tok, int line) {
  char* end = nullptr;
  if (tok.empty() || tok[0] == '-' || tok[0] == '+') bad_line(line, "bad count '" + tok + "'");
  unsigned long long v = std::strtoull(tok.c_str(), &end, 10);
  if (end != tok.c_str() + tok.size()) bad_line(line, "bad count '" + tok + "'");
  return static_cast<std::uint64_t>(v);
}

std::uint32_t parse_hex32(const std::string& tok, int line) {
  char* end = nullptr;
  if (tok.empty() || tok.size() > 8) bad_line(line, "bad checksum '" + tok + "'");
  unsigned long v = std::strtoul(tok.c_str(), &end, 16);
  if (end != tok.c_str() + tok.size()) bad_line(line, "bad checksum '" + tok + "'");
  return static_cast<std::uint32_t>(v);
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  size_t start = 0;
  while (start < text.size()) {
    size_t nl = text.find('\n', start);
    if (nl == std::string::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

}  // namespace

LandscapeGrid grid_from_csv(const std::string& text) {
  std::vector<std::string> lines = split_lines(text);
  if (lines.size() < 2) fail(Errc::parse_error, "grid CSV needs a meta line and a header");
  if (lines[0].rfind("# meta ", 0) != 0) bad_line(1, "expected '# meta ...'");

  LandscapeGrid grid;
  std::uint64_t nx = 0, ny = 0;
  const char* keys[6] = {"seed", "checkpoint", "dir1_norm", "dir2_norm", "nx", "ny"};
  bool seen[6] = {};
  std::istringstream ms(lines[0].substr(7));
  std::string tok;
  while (ms >> tok) {
    size_t eq = tok.find('=');
    if (eq == std::string::npos) bad_line(1, "expected key=value, got '" + tok + "'");
    std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    int idx = -1;
    for (int k = 0; k < 6; ++k)
      if (key == keys[k]) idx = k;
    if (idx < 0) bad_line(1, "unknown meta key '" + key + "'");
    if (seen[idx]) bad_line(1, "duplicate meta key '" + key + "'");
    seen[idx] = true;
    switch (idx) {
      case 0: grid.seed = parse_u64(val, 1); break;
      case 1: grid.net_checksum = parse_hex32(val, 1); break;
      case 2: grid.dir1_norm = parse_double(val, 1); break;
      case 3: grid.dir2_norm = parse_double(val, 1); break;
      case 4: nx = parse_u64(val, 1); break;
      case 5: ny = parse_u64(val, 1); break;
    }
  }
  for (int k = 0; k < 6; ++k)
    if (!seen[k]) bad_line(1, std::string("missing meta key '") + keys[k] + "'");
  if (nx == 0 || ny == 0 || nx > 1000000 || ny > 1000000)
    bad_line(1, "axis sizes out of range");
  if (lines[1] != "x,y,loss") bad_line(2, "expected header 'x,y,loss'");
  if (lines.size() != 2 + nx * ny)
    fail(Errc::parse_error, "expected " + std::to_string(nx * ny) + " data rows, found " +
                                std::to_string(lines.size() - 2));

  grid.xs.assign(nx, 0.0);
  grid.ys.assign(ny, 0.0);
  grid.loss.assign(nx * ny, 0.0);
  for (size_t k = 0; k < nx * ny; ++k) {
    int line = static_cast<int>(k) + 3;
    const std::string& row = lines[k + 2];
    size_t c1 = row.find(',');
    size_t c2 = c1 == std::string::npos ? std::string::npos : row.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos ||
        row.find(',', c2 + 1) != std::string::npos)
      bad_line(line, "expected 'x,y,loss'");
    double x = parse_double(row.substr(0, c1), line);
    double yv = parse_double(row.substr(c1 + 1, c2 - c1 - 1), line);
    size_t i = k / ny, j = k % ny;
    if (j == 0)
      grid.xs[i] = x;
    else if (x != grid.xs[i])
      bad_line(line, "x value breaks row-major cell order");
    if (i == 0)
      grid.ys[j] = yv;
    else if (yv != grid.ys[j])
      bad_line(line, "y value breaks row-major cell order");
    grid.loss[k] = parse_double(row.substr(c2 + 1), line);
  }
  return grid;
}

void write_grid_csv(const LandscapeGrid& grid, const std::string& path) {
  std::string text = grid_to_csv(grid);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) fail(Errc::io_error, "short write to '" + path + "'");
}

LandscapeGrid read_grid_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return grid_from_csv(text);
}

SharpnessReport sharpness_of(const std::function<double(const Network&)>& loss, const Network& net,
                             double sigma, int n_samples, std::uint64_t seed) {
  if (!loss) fail(Errc::invalid_argument, "loss functional is empty");
  if (sigma < 0.0) fail(Errc::invalid_argument, "sigma must be nonnegative");
  if (n_samples < 1) fail(Errc::invalid_argument, "n_samples must be at least 1");
  SharpnessReport rep;
  rep.sigma = sigma;
  rep.n_samples = n_samples;
  rep.seed = seed;
  rep.base_loss = loss(net);
  if (!std::isfinite(rep.base_loss)) fail(Errc::numeric_abort, "non-finite base loss");
  Rng master(seed);
  double total = 0.0;
  double mx = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < n_samples; ++k) {
    Rng rk = master.child(static_cast<std::uint64_t>(k));
    GradMap u = net.noise_like(rk, sigma);
    double inc = loss(net.perturbed(u)) - rep.base_loss;
    if (!std::isfinite(inc))
      fail(Errc::numeric_abort, "non-finite probe loss at draw " + std::to_string(k));
    total += inc;
    mx = std::max(mx, inc);
  }
  rep.max_increase = mx;
  // A mean of reals never exceeds their max; keep that true under summation rounding.
  rep.mean_increase = std::min(total / n_samples, mx);
  return rep;
}

SharpnessReport weight_sharpness(const Network& net, const Dataset& ds, double sigma,
                                 int n_samples, std::uint64_t seed) {
  if (ds.size() == 0) fail(Errc::invalid_argument, "dataset is empty");
  auto mean_loss = [&ds](const Network& n) {
    double total = 0.0;
    for (size_t i = 0; i < ds.size(); ++i)
      total += calibrated_loss(n.forward_values(ds.inputs[i]),
                               onehot_tensor(ds.labels[i], ds.num_classes));
    return total / static_cast<double>(ds.size());
  };
  return sharpness_of(mean_loss, net, sigma, n_samples, seed);
}

std::string sharpness_json(const SharpnessReport& report) {
  nlohmann::json j;
  j["base_loss"] = report.base_loss;
  j["mean_increase"] = report.mean_increase;
  j["max_increase"] = report.max_increase;
  j["sigma"] = report.sigma;
  j["n_samples"] = report.n_samples;
  j["seed"] = report.seed;
  return j.dump(2) + "\n";
}

}  // namespace trat
