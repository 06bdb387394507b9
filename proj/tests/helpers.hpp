#ifndef TRAT_TESTS_HELPERS_HPP
#define TRAT_TESTS_HELPERS_HPP

#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "trat/data.hpp"
#include "trat/graph.hpp"
#include "trat/losses.hpp"
#include "trat/net.hpp"
#include "trat/tensor.hpp"

namespace th {

// Normwise relative error: max|a-b| / max(max|a|, max|b|, floor).
inline double rel_err(const trat::Tensor& a, const trat::Tensor& b, double floor_ = 1e-12) {
  double diff = 0.0, mag = floor_;
  for (size_t i = 0; i < a.data.size(); ++i) {
    diff = std::max(diff, std::abs(a.data[i] - b.data[i]));
    mag = std::max({mag, std::abs(a.data[i]), std::abs(b.data[i])});
  }
  return diff / mag;
}

inline double rel_err(double a, double b, double floor_ = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_});
}

using ScalarFn = std::function<double(const std::vector<trat::Tensor>&)>;
using VectorFn = std::function<trat::Tensor(const std::vector<trat::Tensor>&)>;

// Central-difference gradient, one perturbed evaluation pair per entry.
inline std::vector<trat::Tensor> fd_grad(const ScalarFn& f, std::vector<trat::Tensor> w, double h = 1e-5) {
  std::vector<trat::Tensor> g;
  for (auto& t : w) g.emplace_back(t.shape);
  for (size_t p = 0; p < w.size(); ++p)
    for (size_t i = 0; i < w[p].data.size(); ++i) {
      double keep = w[p].data[i];
      w[p].data[i] = keep + h;
      double fp = f(w);
      w[p].data[i] = keep - h;
      double fm = f(w);
      w[p].data[i] = keep;
      g[p].data[i] = (fp - fm) / (2.0 * h);
    }
  return g;
}

// Central-difference directional derivative of a vector-valued function.
inline trat::Tensor fd_dir(const VectorFn& f, const std::vector<trat::Tensor>& w,
                           const std::vector<trat::Tensor>& u, double h = 1e-5) {
  std::vector<trat::Tensor> wp = w, wm = w;
  for (size_t p = 0; p < w.size(); ++p)
    for (size_t i = 0; i < w[p].data.size(); ++i) {
      wp[p].data[i] += h * u[p].data[i];
      wm[p].data[i] -= h * u[p].data[i];
    }
  trat::Tensor fp = f(wp), fm = f(wm);
  trat::Tensor out(fp.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = (fp.data[i] - fm.data[i]) / (2.0 * h);
  return out;
}

// Second central difference along u: d^2/dt^2 f(w + t u) at t = 0.
inline trat::Tensor fd_dir2(const VectorFn& f, const std::vector<trat::Tensor>& w,
                            const std::vector<trat::Tensor>& u, double h = 1e-3) {
  std::vector<trat::Tensor> wp = w, wm = w;
  for (size_t p = 0; p < w.size(); ++p)
    for (size_t i = 0; i < w[p].data.size(); ++i) {
      wp[p].data[i] += h * u[p].data[i];
      wm[p].data[i] -= h * u[p].data[i];
    }
  trat::Tensor fp = f(wp), f0 = f(w), fm = f(wm);
  trat::Tensor out(fp.shape);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = (fp.data[i] - 2.0 * f0.data[i] + fm.data[i]) / (h * h);
  return out;
}

// Two-layer tanh MLP fixture: params {W1, b1, W2, b2}, a fixed input and a
// fixed linear readout weight for scalar losses. The plain-arithmetic paths
// below deliberately avoid Graph so finite-difference oracles are independent
// of the code under test.
struct Mlp {
  std::vector<trat::Tensor> w;
  trat::Tensor x;
  trat::Tensor readout;

  static Mlp random(trat::Rng& rng, int in, int hid, int out) {
    Mlp m;
    m.w.push_back(trat::sample_gaussian(rng, 0.0, 0.7, trat::Shape::mat(hid, in)));
    m.w.push_back(trat::sample_gaussian(rng, 0.0, 0.3, trat::Shape::vec(hid)));
    m.w.push_back(trat::sample_gaussian(rng, 0.0, 0.7, trat::Shape::mat(out, hid)));
    m.w.push_back(trat::sample_gaussian(rng, 0.0, 0.3, trat::Shape::vec(out)));
    m.x = trat::sample_gaussian(rng, 0.0, 1.0, trat::Shape::vec(in));
    m.readout = trat::sample_gaussian(rng, 0.0, 1.0, trat::Shape::vec(out));
    return m;
  }

  trat::Tensor logits(const std::vector<trat::Tensor>& w) const {
    trat::Tensor h = trat::tanh(trat::add(trat::matmul(w[0], x), w[1]));
    return trat::add(trat::matmul(w[2], h), w[3]);
  }

  double loss(const std::vector<trat::Tensor>& w) const {
    trat::Tensor o = logits(w);
    double s = 0.0;
    for (size_t i = 0; i < o.data.size(); ++i) {
      double d = o.data[i] - readout.data[i];
      s += d * d + std::tanh(o.data[i]);
    }
    return s;
  }

  // Graph twin of logits(); registers W1, b1, W2, b2 as parameters.
  int build_logits(trat::Graph& g) const {
    int W1 = g.param("W1", w[0]);
    int b1 = g.param("b1", w[1]);
    int W2 = g.param("W2", w[2]);
    int b2 = g.param("b2", w[3]);
    int xn = g.constant(x);
    int h = g.tanh(g.add(g.matmul(W1, xn), b1));
    return g.add(g.matmul(W2, h), b2);
  }

  // Graph twin of loss().
  int build_loss(trat::Graph& g) const {
    int o = build_logits(g);
    int d = g.sub(o, g.constant(readout));
    return g.add(g.sum(g.mul(d, d)), g.sum(g.tanh(o)));
  }

  trat::GradMap as_dir(const std::vector<trat::Tensor>& u) const {
    return {{"W1", u[0]}, {"b1", u[1]}, {"W2", u[2]}, {"b2", u[3]}};
  }

  std::vector<trat::Tensor> random_dir(trat::Rng& rng) const {
    std::vector<trat::Tensor> u;
    for (const auto& t : w) u.push_back(trat::sample_gaussian(rng, 0.0, 1.0, t.shape));
    return u;
  }
};

// Minimal full-batch gradient descent on the calibrated label loss; enough to
// produce genuinely "trained" fixtures for statistical attack checks without
// involving the trainer under test.
inline void fit_crossentropy(trat::Network& net, const trat::Dataset& ds, int steps, double lr) {
  for (int step = 0; step < steps; ++step) {
    trat::Graph g;
    std::map<std::string, int> pn;
    for (const auto& [name, value] : net.params) pn[name] = g.param(name, value);
    int total = -1;
    for (size_t i = 0; i < ds.size(); ++i) {
      trat::ForwardRec rec = net.record_with(g, g.constant(ds.inputs[i]), pn);
      int li = trat::calibrated_loss_node(g, rec.logits,
                                          trat::onehot_node(g, ds.labels[i], ds.num_classes));
      total = total < 0 ? li : g.add(total, li);
    }
    trat::GradMap grad = trat::backward(g, g.scale(total, 1.0 / ds.size()));
    for (auto& [name, value] : net.params)
      value = trat::sub(value, trat::scale(grad.at(name), lr));
  }
}

inline double accuracy(const trat::Network& net, const trat::Dataset& ds) {
  size_t hits = 0;
  for (size_t i = 0; i < ds.size(); ++i)
    if (trat::argmax(net.forward_values(ds.inputs[i])) == ds.labels[i]) ++hits;
  return static_cast<double>(hits) / ds.size();
}

}  // namespace th

#endif  // TRAT_TESTS_HELPERS_HPP
