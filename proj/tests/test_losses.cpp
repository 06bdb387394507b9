#include "trat/losses.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "trat/net.hpp"

using namespace trat;

namespace {

// Plain-double oracles, independent of the graph implementation.
std::vector<double> soft(const std::vector<double>& v) {
  double m = v[0];
  for (double x : v) m = std::max(m, x);
  double z = 0.0;
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) z += (out[i] = std::exp(v[i] - m));
  for (double& x : out) x /= z;
  return out;
}

double cal(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pa = soft(a), pb = soft(b);
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc -= pa[i] * std::log(pb[i]);
  return acc;
}

double entropy(const std::vector<double>& logits) {
  std::vector<double> p = soft(logits);
  double h = 0.0;
  for (double x : p) h -= x * std::log(x);
  return h;
}

std::vector<double> vec(const Tensor& t) { return t.data; }

Tensor& mutable_param(Network& net, const std::string& name) {
  for (auto& [n, v] : net.params)
    if (n == name) return v;
  FAIL("no parameter ", name);
  return net.params[0].second;
}

Network tiny_net(Rng& rng, const std::string& arch = "dense(2,3),tanh,dense(3,2)") {
  return Network::init(arch, rng);
}

// dense(2,2) network with W = I, b = 0.
Network identity_net() {
  Rng rng(3);
  Network net = Network::init("dense(2,2)", rng);
  mutable_param(net, "L0.W") = Tensor::mat(2, 2, {1.0, 0.0, 0.0, 1.0});
  mutable_param(net, "L0.b") = Tensor::zeros(Shape::vec(2));
  return net;
}

GradMap scaled(const GradMap& u, double t) {
  GradMap out = u;
  for (auto& [name, v] : out) v = scale(v, t);
  return out;
}

double fl_rel(double a, double b) {
  return std::abs(a - b) / std::max({1e-6, std::abs(a), std::abs(b)});
}

}  // namespace

TEST_CASE("calibrated loss matches hand-evaluated values") {
  CHECK(calibrated_loss(Tensor::vec({0.0, 0.0}), Tensor::vec({0.0, 0.0})) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));
  double expect = -(0.5 * std::log(0.75) + 0.5 * std::log(0.25));
  CHECK(calibrated_loss(Tensor::vec({0.0, 0.0}), Tensor::vec({std::log(3.0), 0.0})) ==
        doctest::Approx(expect).epsilon(1e-12));
  CHECK(expect == doctest::Approx(0.836988).epsilon(1e-6));

  // Max-shift keeps huge logits finite, and softmax shift-invariance means
  // adding a constant to either argument changes nothing.
  double big = calibrated_loss(Tensor::vec({1000.0, 1000.0}), Tensor::vec({1000.0, 999.0}));
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(cal({0.0, 0.0}, {1.0, 0.0})).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(calibrated_loss(Tensor::vec({0.0, 0.0}), Tensor::vec({0.0, 0.0, 0.0})),
                       doctest::Contains("differ"), Error);
}

TEST_CASE("calibrated loss dominates the entropy of its first argument") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + static_cast<int>(rng.below(4));
    Tensor a = sample_gaussian(rng, 0.0, 2.0, Shape::vec(n));
    Tensor b = sample_gaussian(rng, 0.0, 2.0, Shape::vec(n));
    double l = calibrated_loss(a, b);
    CHECK(l >= entropy(vec(a)) - 1e-12);
    // Equality iff the softmaxes agree: b = a + c achieves it.
    Tensor shifted = shift(a, rng.uniform(-3.0, 3.0));
    CHECK(std::abs(calibrated_loss(a, shifted) - entropy(vec(a))) <= 1e-12);
  }
}

TEST_CASE("trades zeroth composes the clean and pair losses") {
  Rng rng(21);
  Network net = tiny_net(rng);
  Tensor s = Tensor::vec({0.4, -0.9});
  Tensor s_adv = Tensor::vec({0.55, -0.8});
  std::vector<double> ls = vec(net.forward_values(s));
  std::vector<double> la = vec(net.forward_values(s_adv));

  double expect = cal(ls, {1.0, 0.0}) + 6.0 * cal(ls, la);
  CHECK(trades_zeroth(net, s, s_adv, 0, 6.0) == doctest::Approx(expect).epsilon(1e-12));

  // s' = s: the pair term is the entropy of the clean prediction.
  CHECK(trades_zeroth(net, s, s, 1, 2.5) ==
        doctest::Approx(cal(ls, {0.0, 1.0}) + 2.5 * entropy(ls)).epsilon(1e-12));

  // lambda_inv = 0 leaves the plain calibrated label loss.
  CHECK(trades_zeroth(net, s, s_adv, 1, 0.0) ==
        doctest::Approx(cal(ls, {0.0, 1.0})).epsilon(1e-12));
}

TEST_CASE("first-order Monte-Carlo term averages seeded directional losses") {
  Rng rng(31);
  Network net = tiny_net(rng);
  Tensor s = Tensor::vec({0.3, 0.7});
  Tensor s_adv = Tensor::vec({0.1, 0.9});

  TaylorConfig cfg;
  cfg.eta = 0.3;
  cfg.sigma = 0.05;
  cfg.mc_samples = 3;
  cfg.estimator = Estimator::monte_carlo;

  Rng draw(101), clone(101);
  double expect = 0.0;
  for (int k = 0; k < cfg.mc_samples; ++k) {
    GradMap u = net.noise_like(clone, cfg.sigma);
    Graph g1;
    Tensor js = jvp(g1, net.record(g1, g1.constant(s), true).logits, u);
    Graph g2;
    Tensor ja = jvp(g2, net.record(g2, g2.constant(s_adv), true).logits, u);
    expect += cal(vec(js), vec(ja));
  }
  expect *= cfg.eta / cfg.mc_samples;
  CHECK(first_term_mc(net, s, s_adv, cfg, draw) == doctest::Approx(expect).epsilon(1e-10));

  // Identical inputs: both directional arguments coincide, so each draw
  // contributes the entropy of its own softmax.
  Rng draw2(101), clone2(101);
  double expect_same = 0.0;
  for (int k = 0; k < cfg.mc_samples; ++k) {
    GradMap u = net.noise_like(clone2, cfg.sigma);
    Graph g1;
    Tensor js = jvp(g1, net.record(g1, g1.constant(s), true).logits, u);
    expect_same += entropy(vec(js));
  }
  expect_same *= cfg.eta / cfg.mc_samples;
  double got = first_term_mc(net, s, s, cfg, draw2);
  CHECK(got == doctest::Approx(expect_same).epsilon(1e-10));
  CHECK(got >= 0.0);
}

TEST_CASE("first-order Monte-Carlo term degenerates to a constant at zero noise") {
  Rng rng(41);
  Network net = tiny_net(rng);
  TaylorConfig cfg;
  cfg.eta = 0.3;
  cfg.sigma = 0.0;
  cfg.estimator = Estimator::monte_carlo;
  Rng draw(5);
  CHECK(first_term_mc(net, Tensor::vec({0.2, -0.4}), Tensor::vec({0.3, -0.5}), cfg, draw) ==
        cfg.eta * std::log(2.0));
}

TEST_CASE("second-order Monte-Carlo term vanishes to a constant on affine networks") {
  Rng rng(51);
  Network net = Network::init("dense(2,2)", rng);
  TaylorConfig cfg;
  cfg.eta = 0.2;
  cfg.sigma = 0.05;
  cfg.estimator = Estimator::monte_carlo;
  Rng draw(5);
  CHECK(second_term_mc(net, Tensor::vec({0.4, 0.1}), Tensor::vec({0.5, 0.2}), cfg, draw) ==
        0.5 * cfg.eta * std::log(2.0));
}

TEST_CASE("second-order Monte-Carlo term matches finite-difference curvature") {
  Rng rng(61);
  Network net = tiny_net(rng);
  Tensor s = Tensor::vec({0.6, -0.2});
  Tensor s_adv = Tensor::vec({0.5, -0.1});

  TaylorConfig cfg;
  cfg.eta = 0.2;
  cfg.sigma = 0.1;
  cfg.mc_samples = 2;
  cfg.estimator = Estimator::monte_carlo;

  Rng draw(77), clone(77);
  double h = 1e-3;
  double expect = 0.0;
  for (int k = 0; k < cfg.mc_samples; ++k) {
    GradMap u = net.noise_like(clone, cfg.sigma);
    auto curvature = [&](const Tensor& input) {
      Tensor plus = net.perturbed(scaled(u, h)).forward_values(input);
      Tensor mid = net.forward_values(input);
      Tensor minus = net.perturbed(scaled(u, -h)).forward_values(input);
      std::vector<double> out(mid.data.size());
      for (size_t i = 0; i < out.size(); ++i)
        out[i] = (plus.data[i] - 2.0 * mid.data[i] + minus.data[i]) / (h * h);
      return out;
    };
    expect += cal(curvature(s), curvature(s_adv));
  }
  expect *= 0.5 * cfg.eta / cfg.mc_samples;
  CHECK(second_term_mc(net, s, s_adv, cfg, draw) == doctest::Approx(expect).epsilon(1e-4));
}

TEST_CASE("gradient row sums match the analytic softmax identity") {
  Network net = identity_net();
  Tensor z = gradrow_sum_vector(net, Tensor::vec({1.0, 0.0}));
  // p = softmax(1, 0); each z_j = p_j (1 - p_j) * sum(s).
  double p1 = 1.0 / (1.0 + std::exp(-1.0));
  double expect = p1 * (1.0 - p1);
  REQUIRE(z.shape == Shape::vec(2));
  CHECK(z.data[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(z.data[1] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(expect == doctest::Approx(0.19661).epsilon(1e-4));

  Tensor z0 = gradrow_sum_vector(net, Tensor::vec({0.0, 0.0}));
  CHECK(z0.data[0] == 0.0);
  CHECK(z0.data[1] == 0.0);
}

TEST_CASE("gradient row sums match finite differences on the final layer") {
  Rng rng(71);
  Network net = tiny_net(rng);
  Tensor s = Tensor::vec({0.8, -0.6});
  Tensor z = gradrow_sum_vector(net, s);
  REQUIRE(z.shape == Shape::vec(2));

  std::string wname = net.final_weight_name();
  const Tensor& w = net.param(wname);
  double h = 1e-6;
  for (int j = 0; j < w.shape.d[0]; ++j) {
    double fd = 0.0;
    for (int i = 0; i < w.shape.d[1]; ++i) {
      Network np = net, nm = net;
      mutable_param(np, wname).at2(j, i) += h;
      mutable_param(nm, wname).at2(j, i) -= h;
      fd += (soft(vec(np.forward_values(s)))[j] - soft(vec(nm.forward_values(s)))[j]) / (2.0 * h);
    }
    CHECK(th::rel_err(z.data[j], fd) < 1e-5);
  }
}

TEST_CASE("hessian row sums vanish for an affine readout") {
  // Stub where the "probabilities" are the raw affine outputs: the row sums
  // are then input constants and their second derivative map is identically
  // absent.
  Graph g;
  int w = g.param("W", Tensor::mat(2, 2, {0.7, -0.2, 0.4, 0.9}));
  int p = g.matmul(w, g.constant(Tensor::vec({0.3, -1.1})));
  for (int j = 0; j < 2; ++j) {
    std::vector<int> adj = g.backward_nodes(g.index(p, j));
    REQUIRE(adj[w] >= 0);
    int zj = g.sum(g.row(adj[w], j));
    CHECK(g.scalar_value(zj) == doctest::Approx(0.3 - 1.1).epsilon(1e-14));
    std::vector<int> adj2 = g.backward_nodes(zj);
    CHECK(adj2[w] == -1);
  }
}

TEST_CASE("hessian row sums agree with finite differences of the row-sum map") {
  Rng rng(81);
  Network net = Network::init("dense(2,2)", rng);
  mutable_param(net, "L0.W") = Tensor::mat(2, 2, {0.8, -0.3, 0.2, 0.5});
  mutable_param(net, "L0.b") = Tensor::vec({0.1, -0.2});
  Tensor s = Tensor::vec({0.9, 0.4});

  Tensor z2 = hessrow_sum_vector(net, s);
  REQUIRE(z2.shape == Shape::vec(2));

  double h = 1e-5;
  for (int l = 0; l < 2; ++l) {
    double fd = 0.0;
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k) {
        Network np = net, nm = net;
        mutable_param(np, "L0.W").at2(j, k) += h;
        mutable_param(nm, "L0.W").at2(j, k) -= h;
        fd += (gradrow_sum_vector(np, s).data[l] - gradrow_sum_vector(nm, s).data[l]) / (2.0 * h);
      }
    CHECK(fl_rel(z2.data[l], fd) < 1e-3);
    // The sum over a full softmax-Jacobian row telescopes to zero, so the
    // second-order row sums are an exact analytic zero.
    CHECK(std::abs(z2.data[l]) < 1e-12);
  }

  Rng rng4(82);
  Network wide = Network::init("dense(3,4)", rng4);
  CHECK(hessrow_sum_vector(wide, Tensor::vec({0.1, 0.2, 0.3})).shape == Shape::vec(4));
}

TEST_CASE("first-order row-sum surrogate weights the paired losses") {
  TaylorConfig cfg;
  cfg.eta = 0.3;
  cfg.estimator = Estimator::row_sum;

  Network net = identity_net();
  Tensor s = Tensor::vec({1.0, 0.0});
  Tensor flipped = Tensor::vec({0.0, 1.0});

  // Identical inputs zero out the difference vectors, leaving eta * ln N.
  double same = first_term_row_sum(net, s, s, cfg);
  CHECK(same == doctest::Approx(cfg.eta * std::log(2.0)).epsilon(1e-12));
  // The mirrored input has the same row sums by symmetry, so the value ties.
  CHECK(first_term_row_sum(net, s, flipped, cfg) == doctest::Approx(same).epsilon(1e-12));

  TaylorConfig off = cfg;
  off.eta = 0.0;
  CHECK(first_term_row_sum(net, s, flipped, off) == 0.0);

  // Composition against finite-difference row sums and plain arithmetic.
  Rng rng(91);
  Network deep = tiny_net(rng);
  Tensor a = Tensor::vec({0.7, -0.4});
  Tensor b = Tensor::vec({0.6, -0.3});
  auto fd_rows = [&](const Tensor& input) {
    std::string wname = deep.final_weight_name();
    const Tensor& w = deep.param(wname);
    double h = 1e-6;
    std::vector<double> out(w.shape.d[0], 0.0);
    for (int j = 0; j < w.shape.d[0]; ++j)
      for (int i = 0; i < w.shape.d[1]; ++i) {
        Network np = deep, nm = deep;
        mutable_param(np, wname).at2(j, i) += h;
        mutable_param(nm, wname).at2(j, i) -= h;
        out[j] += (soft(vec(np.forward_values(input)))[j] - soft(vec(nm.forward_values(input)))[j]) /
                  (2.0 * h);
      }
    return out;
  };
  std::vector<double> zs = fd_rows(a), za = fd_rows(b);
  std::vector<double> d_sa(2), d_as(2);
  for (int i = 0; i < 2; ++i) {
    d_sa[i] = zs[i] - za[i];
    d_as[i] = za[i] - zs[i];
  }
  std::vector<double> ls = vec(deep.forward_values(a)), la = vec(deep.forward_values(b));
  double expect = cfg.eta * 0.5 * (cal(la, d_sa) + cal(ls, d_as));
  CHECK(th::rel_err(first_term_row_sum(deep, a, b, cfg), expect) < 1e-5);
}

TEST_CASE("second-order row-sum surrogate mirrors the first at half weight") {
  TaylorConfig cfg;
  cfg.eta = 0.2;
  cfg.estimator = Estimator::row_sum;

  Network net = identity_net();
  Tensor s = Tensor::vec({1.0, 0.0});
  CHECK(second_term_row_sum(net, s, s, cfg) ==
        doctest::Approx(0.5 * cfg.eta * std::log(2.0)).epsilon(1e-12));

  TaylorConfig off = cfg;
  off.eta = 0.0;
  CHECK(second_term_row_sum(net, s, Tensor::vec({0.0, 1.0}), off) == 0.0);

  // Because the row sums of the softmax Jacobian telescope, the second-order
  // vectors are analytic zeros and the surrogate sits at its ln N floor for
  // any input pair.
  Rng rng(95);
  Network deep = tiny_net(rng);
  Tensor a = Tensor::vec({0.7, -0.4});
  Tensor b = Tensor::vec({0.2, 0.9});
  double got = second_term_row_sum(deep, a, b, cfg);
  CHECK(got == doctest::Approx(0.5 * cfg.eta * std::log(2.0)).epsilon(1e-9));

  std::vector<double> z2a = vec(hessrow_sum_vector(deep, a)), z2b = vec(hessrow_sum_vector(deep, b));
  std::vector<double> d_ab(2), d_ba(2);
  for (int i = 0; i < 2; ++i) {
    d_ab[i] = z2a[i] - z2b[i];
    d_ba[i] = z2b[i] - z2a[i];
  }
  std::vector<double> ls = vec(deep.forward_values(a)), la = vec(deep.forward_values(b));
  double expect = 0.5 * cfg.eta * 0.5 * (cal(la, d_ab) + cal(ls, d_ba));
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("total objective reduces exactly to the zeroth objective") {
  Rng rng(111);
  Network net = tiny_net(rng);
  Batch batch;
  batch.s = {Tensor::vec({0.2, 0.8}), Tensor::vec({-0.5, 0.1})};
  batch.s_adv = {Tensor::vec({0.25, 0.78}), Tensor::vec({-0.48, 0.14})};
  batch.y = {0, 1};

  TaylorConfig zeroth;
  zeroth.mode = TaylorMode::zeroth;
  zeroth.eta = 0.2;
  TaylorConfig eta_off;
  eta_off.mode = TaylorMode::zeroth_first_second;
  eta_off.eta = 0.0;

  for (Estimator est : {Estimator::row_sum, Estimator::monte_carlo}) {
    zeroth.estimator = eta_off.estimator = est;
    Rng r1(9), r2(9);
    double v1 = 0.0, v2 = 0.0;
    TermBreakdown t1, t2;
    GradMap g1 = total_objective_grad(net, batch, zeroth, r1, &v1, &t1);
    GradMap g2 = total_objective_grad(net, batch, eta_off, r2, &v2, &t2);
    CHECK(v1 == v2);
    for (const auto& [name, grad] : g1)
      for (size_t i = 0; i < grad.data.size(); ++i) CHECK(grad.data[i] == g2.at(name).data[i]);
    CHECK(t1.first == 0.0);
    CHECK(t1.second == 0.0);
    CHECK(t1.zeroth == v1);

    // Value agrees with the per-sample zeroth losses.
    double expect = 0.5 * (trades_zeroth(net, batch.s[0], batch.s_adv[0], 0, zeroth.lambda_inv) +
                           trades_zeroth(net, batch.s[1], batch.s_adv[1], 1, zeroth.lambda_inv));
    CHECK(v1 == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("total objective composes its terms for both estimators") {
  Rng rng(121);
  Network net = tiny_net(rng);
  Batch batch;
  batch.s = {Tensor::vec({0.3, -0.2}), Tensor::vec({0.9, 0.4})};
  batch.s_adv = {Tensor::vec({0.35, -0.24}), Tensor::vec({0.86, 0.45})};
  batch.y = {1, 0};

  TaylorConfig cfg;
  cfg.mode = TaylorMode::zeroth_first_second;
  cfg.eta = 0.25;
  cfg.estimator = Estimator::row_sum;

  SUBCASE("row-sum estimator") {
    Rng r(1);
    TermBreakdown tb;
    double total = total_objective(net, batch, cfg, r, &tb);
    double expect = 0.0;
    for (size_t i = 0; i < batch.size(); ++i)
      expect += trades_zeroth(net, batch.s[i], batch.s_adv[i], batch.y[i], cfg.lambda_inv) +
                first_term_row_sum(net, batch.s[i], batch.s_adv[i], cfg) +
                second_term_row_sum(net, batch.s[i], batch.s_adv[i], cfg);
    expect /= static_cast<double>(batch.size());
    CHECK(total == doctest::Approx(expect).epsilon(1e-12));
    CHECK(tb.zeroth + tb.first + tb.second == doctest::Approx(total).epsilon(1e-14));
    CHECK(tb.first > 0.0);
    CHECK(tb.second > 0.0);
  }

  SUBCASE("monte-carlo estimator") {
    cfg.estimator = Estimator::monte_carlo;
    cfg.sigma = 0.1;
    cfg.mc_samples = 2;
    Rng r(33), clone(33);
    TermBreakdown tb;
    double total = total_objective(net, batch, cfg, r, &tb);

    double zeroth = 0.0, first = 0.0, second = 0.0;
    for (size_t i = 0; i < batch.size(); ++i)
      zeroth += trades_zeroth(net, batch.s[i], batch.s_adv[i], batch.y[i], cfg.lambda_inv);
    zeroth /= static_cast<double>(batch.size());
    for (int k = 0; k < cfg.mc_samples; ++k) {
      GradMap u = net.noise_like(clone, cfg.sigma);
      for (size_t i = 0; i < batch.size(); ++i) {
        Graph gs, ga;
        int os = net.record(gs, gs.constant(batch.s[i]), true).logits;
        int oa = net.record(ga, ga.constant(batch.s_adv[i]), true).logits;
        first += cal(vec(jvp(gs, os, u)), vec(jvp(ga, oa, u)));
        second += cal(vec(hvp_quadratic(gs, os, u)), vec(hvp_quadratic(ga, oa, u)));
      }
    }
    int draws = cfg.mc_samples * static_cast<int>(batch.size());
    first *= cfg.eta / draws;
    second *= 0.5 * cfg.eta / draws;
    CHECK(total == doctest::Approx(zeroth + first + second).epsilon(1e-10));
    CHECK(tb.first == doctest::Approx(first).epsilon(1e-10));
    CHECK(tb.second == doctest::Approx(second).epsilon(1e-10));
  }
}

TEST_CASE("total objective gradient matches finite differences in every configuration") {
  Rng rng(131);
  Network net = tiny_net(rng);
  Batch batch;
  batch.s = {Tensor::vec({0.4, -0.7}), Tensor::vec({-0.2, 0.3})};
  batch.s_adv = {Tensor::vec({0.45, -0.66}), Tensor::vec({-0.16, 0.33})};
  batch.y = {0, 1};

  for (Estimator est : {Estimator::row_sum, Estimator::monte_carlo})
    for (TaylorMode mode :
         {TaylorMode::zeroth, TaylorMode::zeroth_first, TaylorMode::zeroth_first_second}) {
      TaylorConfig cfg;
      cfg.mode = mode;
      cfg.estimator = est;
      cfg.eta = 0.25;
      cfg.sigma = 0.1;
      CAPTURE(to_string(mode));
      CAPTURE(to_string(est));

      Rng r(55);
      GradMap grad = total_objective_grad(net, batch, cfg, r);
      double h = 1e-5;
      for (const auto& [name, gv] : grad) {
        for (size_t i = 0; i < gv.data.size(); ++i) {
          Network np = net, nm = net;
          mutable_param(np, name).data[i] += h;
          mutable_param(nm, name).data[i] -= h;
          Rng rp(55), rm(55);
          double fd =
              (total_objective(np, batch, cfg, rp) - total_objective(nm, batch, cfg, rm)) / (2.0 * h);
          CHECK(th::rel_err(gv.data[i], fd) < 1e-4);
        }
      }
    }
}

TEST_CASE("taylor config rejects invalid settings") {
  Rng rng(141);
  Network net = tiny_net(rng);
  Batch batch;
  batch.s = {Tensor::vec({0.1, 0.2})};
  batch.s_adv = {Tensor::vec({0.1, 0.2})};
  batch.y = {0};
  Rng r(1);

  TaylorConfig cfg;
  cfg.sigma = -0.1;
  CHECK_THROWS_WITH_AS(total_objective(net, batch, cfg, r), doctest::Contains("sigma"), Error);
  cfg = TaylorConfig{};
  cfg.eta = -1.0;
  CHECK_THROWS_WITH_AS(total_objective(net, batch, cfg, r), doctest::Contains("eta"), Error);
  cfg = TaylorConfig{};
  cfg.lambda_inv = 0.0;
  CHECK_THROWS_WITH_AS(total_objective(net, batch, cfg, r), doctest::Contains("lambda_inv"), Error);
  cfg = TaylorConfig{};
  cfg.mc_samples = 0;
  CHECK_THROWS_WITH_AS(total_objective(net, batch, cfg, r), doctest::Contains("mc_samples"), Error);

  cfg = TaylorConfig{};
  Batch empty;
  CHECK_THROWS_AS(total_objective(net, empty, cfg, r), Error);
  Batch ragged = batch;
  ragged.y = {0, 1};
  CHECK_THROWS_AS(total_objective(net, ragged, cfg, r), Error);
}

TEST_CASE("mode and estimator names round-trip") {
  for (TaylorMode m :
       {TaylorMode::zeroth, TaylorMode::zeroth_first, TaylorMode::zeroth_first_second})
    CHECK(parse_mode(to_string(m)) == m);
  for (Estimator e : {Estimator::row_sum, Estimator::monte_carlo})
    CHECK(parse_estimator(to_string(e)) == e);
  CHECK_THROWS_WITH_AS(parse_mode("third"), doctest::Contains("unknown mode"), Error);
  CHECK_THROWS_WITH_AS(parse_estimator("exact"), doctest::Contains("unknown estimator"), Error);
}

TEST_CASE("generalized KL divergence of sums is bounded by the sum of divergences") {
  auto gkl = [](const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t j = 0; j < a.size(); ++j) acc += a[j] * std::log(a[j] / b[j]) - a[j] + b[j];
    return acc;
  };
  Rng rng(151);
  for (int trial = 0; trial < 1000; ++trial) {
    int m = 2 + static_cast<int>(rng.below(3));
    std::vector<double> xs(4, 0.0), ys(4, 0.0);
    double rhs = 0.0;
    for (int i = 0; i < m; ++i) {
      std::vector<double> x(4), y(4);
      for (int j = 0; j < 4; ++j) {
        x[j] = rng.uniform(0.01, 2.0);
        y[j] = rng.uniform(0.01, 2.0);
        xs[j] += x[j];
        ys[j] += y[j];
      }
      rhs += gkl(x, y);
    }
    CHECK(gkl(xs, ys) <= rhs + 1e-12);
  }
}
