#ifndef TRAT_LANDSCAPE_HPP
#define TRAT_LANDSCAPE_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trat/data.hpp"
#include "trat/net.hpp"
#include "trat/tensor.hpp"

namespace trat {

// Sampled loss surface around one input. Cell (i, j) holds the label loss at
// s + xs[i]*dir1 + ys[j]*dir2, where dir1 is the elementwise sign of the input
// gradient at the clean point (computed once, not per cell) and dir2 is a
// Rademacher vector drawn from `seed`. Cells are evaluated independently in
// row-major order.
struct LandscapeGrid {
  std::vector<double> xs;
  std::vector<double> ys;
  std::vector<double> loss;  // row-major: loss[i * ys.size() + j]
  Tensor dir1;               // directions are dropped by the CSV parser,
  Tensor dir2;               // their norms below survive the round trip
  double dir1_norm = 0.0;
  double dir2_norm = 0.0;
  std::uint64_t seed = 0;
  std::uint32_t net_checksum = 0;

  double at(size_t i, size_t j) const { return loss[i * ys.size() + j]; }
};

// Axes run uniformly over the closed ranges with `steps` points each (steps
// >= 2); a symmetric range with an odd step count lands exactly on zero at
// the center, so that cell reproduces the clean loss bit for bit. When
// clamp_range is set every perturbed input is clamped into it first.
LandscapeGrid input_surface(const Network& net, const Tensor& s, int y,
                            std::pair<double, double> x_range, std::pair<double, double> y_range,
                            int steps, std::uint64_t seed,
                            std::optional<std::pair<double, double>> clamp_range = std::nullopt);

// CSV layout: a `# meta` line (seed, net checksum, direction norms, axis
// sizes), an `x,y,loss` header, then one row per cell in row-major order.
// Values carry 17 significant digits, so text -> grid -> text is
// byte-identical and grid -> text -> grid preserves every double exactly.
std::string grid_to_csv(const LandscapeGrid& grid);
LandscapeGrid grid_from_csv(const std::string& text);
void write_grid_csv(const LandscapeGrid& grid, const std::string& path);
LandscapeGrid read_grid_csv(const std::string& path);

struct SharpnessReport {
  double base_loss = 0.0;
  double mean_increase = 0.0;
  double max_increase = 0.0;
  double sigma = 0.0;
  int n_samples = 0;
  std::uint64_t seed = 0;
};

// Statistics of loss(w + u_k) - loss(w) over weight noise u_k ~ N(0, sigma^2 I),
// draw k taken from Rng(seed).child(k) so runs with different n_samples share
// their common prefix. sigma = 0 degenerates to exactly zero increases.
SharpnessReport sharpness_of(const std::function<double(const Network&)>& loss, const Network& net,
                             double sigma, int n_samples, std::uint64_t seed);

// sharpness_of with the mean calibrated label loss over `ds`.
SharpnessReport weight_sharpness(const Network& net, const Dataset& ds, double sigma,
                                 int n_samples, std::uint64_t seed);

std::string sharpness_json(const SharpnessReport& report);

}  // namespace trat

#endif  // TRAT_LANDSCAPE_HPP
