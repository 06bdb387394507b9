#ifndef TRAT_TENSOR_HPP
#define TRAT_TENSOR_HPP

#include <array>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "trat/error.hpp"

namespace trat {

// Dense shapes up to rank 4. Rank 0 is a scalar with one element.
struct Shape {
  std::array<int, 4> d{1, 1, 1, 1};
  int nd = 0;

  Shape() = default;
  Shape(std::initializer_list<int> dims);
  static Shape scalar() { return Shape{}; }
  static Shape vec(int n) { return Shape{n}; }
  static Shape mat(int r, int c) { return Shape{r, c}; }

  std::int64_t numel() const;
  bool operator==(const Shape&) const = default;
  std::string str() const;  // e.g. "[3x4]", "[]" for scalars
};

// Row-major dense tensor of doubles. Values are treated as immutable once a
// tensor has been handed to another component; helpers below return fresh
// tensors instead of mutating inputs.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), data(static_cast<size_t>(s.numel()), 0.0) {}
  Tensor(Shape s, std::vector<double> values);

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor full(Shape s, double v);
  static Tensor scalar(double v);
  static Tensor vec(std::initializer_list<double> values);
  static Tensor mat(int rows, int cols, std::initializer_list<double> values);

  std::int64_t numel() const { return shape.numel(); }
  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }
  double& at2(int r, int c) { return data[static_cast<size_t>(r) * shape.d[1] + c]; }
  double at2(int r, int c) const { return data[static_cast<size_t>(r) * shape.d[1] + c]; }
  double scalar_value() const;
  bool all_finite() const;
};

// ---- elementwise kernels (equal shapes; scalar broadcasting is the caller's
// job via Tensor::full or the scale/shift forms) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor shift(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // error on nonpositive entries
Tensor clamp(const Tensor& a, double lo, double hi);

// ---- reductions / linear algebra ----
double sum(const Tensor& a);
double dot(const Tensor& a, const Tensor& b);
double max_value(const Tensor& a);
int argmax(const Tensor& a);  // first index attaining the maximum
double linf_norm(const Tensor& a);
double l2_norm(const Tensor& a);

// matmul accepts [m x k]*[k x n] -> [m x n] and [m x k]*[k] -> [m].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor outer(const Tensor& a, const Tensor& b);

// ---- convolution kernels (channels-first [C,H,W], kernels [OC,C,kh,kw];
// cross-correlation, zero padding) ----
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
// Adjoint of conv2d w.r.t. its input; in_h/in_w give the original spatial size.
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, int stride, int pad, int in_h, int in_w);
// Adjoint of conv2d w.r.t. its kernel.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, int stride, int pad, int kh, int kw);

// ---- deterministic random generation ----
//
// The generator is a splitmix64 stream: state advances by the golden-ratio
// increment and each output is the two-round mix of the new state. All
// derived draws (uniform, gaussian, rademacher) are defined in terms of that
// stream only, so a (seed, call index) pair produces the same values on any
// platform. Gaussians use Box-Muller and consume exactly two uniform draws
// each; nothing is cached between calls.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform01();                       // [0, 1) with 53-bit resolution
  double uniform(double lo, double hi);     // error if lo > hi
  double gaussian(double mean, double std); // error if std < 0
  double rademacher();                      // +1 or -1, p = 0.5 each
  // Index in [0, n). Derived from uniform01; documented and deterministic.
  std::uint64_t below(std::uint64_t n);

  // Deterministic seed derivation for parallel or per-epoch streams:
  // child_seed = mix(parent_seed ^ golden * (index + 1)).
  Rng child(std::uint64_t index) const;
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t state_ = 0;
};

Tensor sample_gaussian(Rng& rng, double mean, double std, Shape shape);
Tensor sample_rademacher(Rng& rng, Shape shape);
Tensor sample_uniform(Rng& rng, double lo, double hi, Shape shape);

}  // namespace trat

#endif  // TRAT_TENSOR_HPP
