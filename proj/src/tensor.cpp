#include "trat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace trat {

Shape::Shape(std::initializer_list<int> dims) {
  if (dims.size() > 4) fail(Errc::invalid_argument, "shape rank > 4");
  for (int v : dims) {
    if (v <= 0) fail(Errc::invalid_argument, "shape dimension must be positive, got " + std::to_string(v));
    d[nd++] = v;
  }
}

std::int64_t Shape::numel() const {
  std::int64_t n = 1;
  for (int i = 0; i < nd; ++i) n *= d[i];
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (int i = 0; i < nd; ++i) {
    if (i) os << 'x';
    os << d[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(s), data(std::move(values)) {
  if (static_cast<std::int64_t>(data.size()) != s.numel())
    fail(Errc::count_mismatch, "tensor " + s.str() + " expects " + std::to_string(s.numel()) +
                                   " values, got " + std::to_string(data.size()));
}

Tensor Tensor::full(Shape s, double v) {
  Tensor t(s);
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t{Shape::scalar()};
  t.data[0] = v;
  return t;
}

Tensor Tensor::vec(std::initializer_list<double> values) {
  return Tensor(Shape::vec(static_cast<int>(values.size())), std::vector<double>(values));
}

Tensor Tensor::mat(int rows, int cols, std::initializer_list<double> values) {
  return Tensor(Shape::mat(rows, cols), std::vector<double>(values));
}

double Tensor::scalar_value() const {
  if (numel() != 1) fail(Errc::shape_mismatch, "scalar_value on tensor " + shape.str());
  return data[0];
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.shape == b.shape))
    fail(Errc::shape_mismatch,
         std::string(op) + ": shapes " + a.shape.str() + " and " + b.shape.str() + " differ");
}

template <class F>
static Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor out(a.shape);
  for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
  return out;
}

template <class F>
static Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape);
  for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return zip(a, b, "add", [](double x, double y) { return x + y; }); }
Tensor sub(const Tensor& a, const Tensor& b) { return zip(a, b, "sub", [](double x, double y) { return x - y; }); }
Tensor mul(const Tensor& a, const Tensor& b) { return zip(a, b, "mul", [](double x, double y) { return x * y; }); }
Tensor div(const Tensor& a, const Tensor& b) { return zip(a, b, "div", [](double x, double y) { return x / y; }); }
Tensor scale(const Tensor& a, double c) { return map(a, [c](double x) { return x * c; }); }
Tensor shift(const Tensor& a, double c) { return map(a, [c](double x) { return x + c; }); }
Tensor relu(const Tensor& a) { return map(a, [](double x) { return x > 0.0 ? x : 0.0; }); }
Tensor tanh(const Tensor& a) { return map(a, [](double x) { return std::tanh(x); }); }
Tensor exp(const Tensor& a) { return map(a, [](double x) { return std::exp(x); }); }

Tensor log(const Tensor& a) {
  Tensor out(a.shape);
  for (size_t i = 0; i < a.data.size(); ++i) {
    if (a.data[i] <= 0.0)
      fail(Errc::numeric_abort, "log of nonpositive value " + std::to_string(a.data[i]));
    out.data[i] = std::log(a.data[i]);
  }
  return out;
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) fail(Errc::invalid_argument, "clamp: lo > hi");
  return map(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); });
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data) s += v;
  return s;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

double max_value(const Tensor& a) {
  if (a.data.empty()) fail(Errc::invalid_argument, "max_value of empty tensor");
  double m = a.data[0];
  for (double v : a.data) m = std::max(m, v);
  return m;
}

int argmax(const Tensor& a) {
  if (a.data.empty()) fail(Errc::invalid_argument, "argmax of empty tensor");
  int best = 0;
  for (int i = 1; i < static_cast<int>(a.data.size()); ++i)
    if (a.data[i] > a.data[best]) best = i;
  return best;
}

double linf_norm(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data) m = std::max(m, std::abs(v));
  return m;
}

double l2_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return std::sqrt(s);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape.nd != 2) fail(Errc::shape_mismatch, "matmul: left operand " + a.shape.str() + " is not a matrix");
  int m = a.shape.d[0], k = a.shape.d[1];
  if (b.shape.nd == 1) {
    if (b.shape.d[0] != k)
      fail(Errc::shape_mismatch, "matmul: " + a.shape.str() + " * " + b.shape.str() + " inner dimensions differ");
    Tensor out(Shape::vec(m));
    for (int i = 0; i < m; ++i) {
      double s = 0.0;
      for (int j = 0; j < k; ++j) s += a.data[static_cast<size_t>(i) * k + j] * b.data[j];
      out.data[i] = s;
    }
    return out;
  }
  if (b.shape.nd != 2)
    fail(Errc::shape_mismatch, "matmul: right operand " + b.shape.str() + " is not a matrix or vector");
  if (b.shape.d[0] != k)
    fail(Errc::shape_mismatch, "matmul: " + a.shape.str() + " * " + b.shape.str() + " inner dimensions differ");
  int n = b.shape.d[1];
  Tensor out(Shape::mat(m, n));
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      double av = a.data[static_cast<size_t>(i) * k + p];
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += av * b.data[static_cast<size_t>(p) * n + j];
    }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.shape.nd != 2) fail(Errc::shape_mismatch, "transpose of non-matrix " + a.shape.str());
  int r = a.shape.d[0], c = a.shape.d[1];
  Tensor out(Shape::mat(c, r));
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data[static_cast<size_t>(j) * r + i] = a.data[static_cast<size_t>(i) * c + j];
  return out;
}

Tensor outer(const Tensor& a, const Tensor& b) {
  if (a.shape.nd != 1 || b.shape.nd != 1)
    fail(Errc::shape_mismatch, "outer: expected vectors, got " + a.shape.str() + " and " + b.shape.str());
  int m = a.shape.d[0], n = b.shape.d[0];
  Tensor out(Shape::mat(m, n));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] = a.data[i] * b.data[j];
  return out;
}

static void check_conv_args(const Tensor& w, int stride, int pad) {
  if (w.shape.nd != 4) fail(Errc::shape_mismatch, "conv2d: kernel " + w.shape.str() + " must have rank 4");
  if (stride <= 0) fail(Errc::invalid_argument, "conv2d: stride must be positive");
  if (pad < 0) fail(Errc::invalid_argument, "conv2d: padding must be nonnegative");
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  check_conv_args(w, stride, pad);
  if (x.shape.nd != 3) fail(Errc::shape_mismatch, "conv2d: input " + x.shape.str() + " must have rank 3");
  int ic = x.shape.d[0], ih = x.shape.d[1], iw = x.shape.d[2];
  int oc = w.shape.d[0], kc = w.shape.d[1], kh = w.shape.d[2], kw = w.shape.d[3];
  if (kc != ic)
    fail(Errc::shape_mismatch, "conv2d: input " + x.shape.str() + " and kernel " + w.shape.str() + " channel counts differ");
  int oh = (ih + 2 * pad - kh) / stride + 1;
  int ow = (iw + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0)
    fail(Errc::shape_mismatch, "conv2d: kernel " + w.shape.str() + " does not fit input " + x.shape.str());
  Tensor out(Shape{oc, oh, ow});
  for (int o = 0; o < oc; ++o)
    for (int y = 0; y < oh; ++y)
      for (int xo = 0; xo < ow; ++xo) {
        double s = 0.0;
        for (int c = 0; c < ic; ++c)
          for (int u = 0; u < kh; ++u)
            for (int v = 0; v < kw; ++v) {
              int yy = y * stride + u - pad;
              int xx = xo * stride + v - pad;
              if (yy < 0 || yy >= ih || xx < 0 || xx >= iw) continue;
              s += x.data[(static_cast<size_t>(c) * ih + yy) * iw + xx] *
                   w.data[((static_cast<size_t>(o) * ic + c) * kh + u) * kw + v];
            }
        out.data[(static_cast<size_t>(o) * oh + y) * ow + xo] = s;
      }
  return out;
}

Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, int stride, int pad, int in_h, int in_w) {
  check_conv_args(w, stride, pad);
  if (g.shape.nd != 3) fail(Errc::shape_mismatch, "conv2d_input_grad: gradient " + g.shape.str() + " must have rank 3");
  int oc = w.shape.d[0], ic = w.shape.d[1], kh = w.shape.d[2], kw = w.shape.d[3];
  if (g.shape.d[0] != oc)
    fail(Errc::shape_mismatch, "conv2d_input_grad: gradient " + g.shape.str() + " and kernel " + w.shape.str() + " channel counts differ");
  int oh = g.shape.d[1], ow = g.shape.d[2];
  Tensor out(Shape{ic, in_h, in_w});
  for (int o = 0; o < oc; ++o)
    for (int y = 0; y < oh; ++y)
      for (int xo = 0; xo < ow; ++xo) {
        double gv = g.data[(static_cast<size_t>(o) * oh + y) * ow + xo];
        if (gv == 0.0) continue;
        for (int c = 0; c < ic; ++c)
          for (int u = 0; u < kh; ++u)
            for (int v = 0; v < kw; ++v) {
              int yy = y * stride + u - pad;
              int xx = xo * stride + v - pad;
              if (yy < 0 || yy >= in_h || xx < 0 || xx >= in_w) continue;
              out.data[(static_cast<size_t>(c) * in_h + yy) * in_w + xx] +=
                  gv * w.data[((static_cast<size_t>(o) * ic + c) * kh + u) * kw + v];
            }
      }
  return out;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, int stride, int pad, int kh, int kw) {
  if (x.shape.nd != 3 || g.shape.nd != 3)
    fail(Errc::shape_mismatch, "conv2d_weight_grad: expected rank-3 input and gradient");
  if (stride <= 0) fail(Errc::invalid_argument, "conv2d_weight_grad: stride must be positive");
  if (pad < 0) fail(Errc::invalid_argument, "conv2d_weight_grad: padding must be nonnegative");
  int ic = x.shape.d[0], ih = x.shape.d[1], iw = x.shape.d[2];
  int oc = g.shape.d[0], oh = g.shape.d[1], ow = g.shape.d[2];
  Tensor out(Shape{oc, ic, kh, kw});
  for (int o = 0; o < oc; ++o)
    for (int y = 0; y < oh; ++y)
      for (int xo = 0; xo < ow; ++xo) {
        double gv = g.data[(static_cast<size_t>(o) * oh + y) * ow + xo];
        if (gv == 0.0) continue;
        for (int c = 0; c < ic; ++c)
          for (int u = 0; u < kh; ++u)
            for (int v = 0; v < kw; ++v) {
              int yy = y * stride + u - pad;
              int xx = xo * stride + v - pad;
              if (yy < 0 || yy >= ih || xx < 0 || xx >= iw) continue;
              out.data[((static_cast<size_t>(o) * ic + c) * kh + u) * kw + v] +=
                  gv * x.data[(static_cast<size_t>(c) * ih + yy) * iw + xx];
            }
      }
  return out;
}

// splitmix64: Steele, Lea, Flood (2014). Public-domain mixing constants.
static std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

Rng::Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

std::uint64_t Rng::next_u64() {
  state_ += kGolden;
  return mix64(state_);
}

double Rng::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  if (lo > hi) fail(Errc::invalid_argument, "uniform: lo > hi");
  return lo + (hi - lo) * uniform01();
}

double Rng::gaussian(double mean, double std) {
  if (std < 0.0) fail(Errc::invalid_argument, "gaussian: std must be nonnegative");
  // Box-Muller on two fresh uniforms; u1 is nudged away from zero so the log
  // is finite. No spare value is kept, so call counts stay predictable.
  double u1 = uniform01();
  double u2 = uniform01();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  double r = std::sqrt(-2.0 * std::log(u1));
  return mean + std * r * std::cos(2.0 * M_PI * u2);
}

double Rng::rademacher() { return (next_u64() >> 63) ? 1.0 : -1.0; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) fail(Errc::invalid_argument, "below: n must be positive");
  auto k = static_cast<std::uint64_t>(uniform01() * static_cast<double>(n));
  return k < n ? k : n - 1;
}

Rng Rng::child(std::uint64_t index) const {
  return Rng(mix64(seed_ ^ (kGolden * (index + 1))));
}

Tensor sample_gaussian(Rng& rng, double mean, double std, Shape shape) {
  Tensor t(shape);
  for (auto& v : t.data) v = rng.gaussian(mean, std);
  return t;
}

Tensor sample_rademacher(Rng& rng, Shape shape) {
  Tensor t(shape);
  for (auto& v : t.data) v = rng.rademacher();
  return t;
}

Tensor sample_uniform(Rng& rng, double lo, double hi, Shape shape) {
  Tensor t(shape);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace trat
