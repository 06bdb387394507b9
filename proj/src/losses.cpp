#include "trat/losses.hpp"

#include <algorithm>
#include <cmath>

namespace trat {

TaylorMode parse_mode(const std::string& s) {
  if (s == "zeroth") return TaylorMode::zeroth;
  if (s == "zeroth+first") return TaylorMode::zeroth_first;
  if (s == "zeroth+first+second") return TaylorMode::zeroth_first_second;
  fail(Errc::parse_error, "unknown mode '" + s + "' (expected zeroth, zeroth+first or zeroth+first+second)");
}

Estimator parse_estimator(const std::string& s) {
  if (s == "row_sum") return Estimator::row_sum;
  if (s == "monte_carlo") return Estimator::monte_carlo;
  fail(Errc::parse_error, "unknown estimator '" + s + "' (expected row_sum or monte_carlo)");
}

std::string to_string(TaylorMode m) {
  switch (m) {
    case TaylorMode::zeroth: return "zeroth";
    case TaylorMode::zeroth_first: return "zeroth+first";
    case TaylorMode::zeroth_first_second: return "zeroth+first+second";
  }
  return "?";
}

std::string to_string(Estimator e) {
  return e == Estimator::row_sum ? "row_sum" : "monte_carlo";
}

int softmax_node(Graph& g, int logits) {
  if (g.shape(logits).nd != 1)
    fail(Errc::shape_mismatch, "softmax expects a vector, got " + g.shape(logits).str());
  double m = max_value(g.value(logits));
  int sh = g.shift(logits, -m);
  int e = g.exp(sh);
  int z = g.sum(e);
  return g.div(e, g.fill(z, g.shape(logits)));
}

int log_softmax_node(Graph& g, int logits) {
  if (g.shape(logits).nd != 1)
    fail(Errc::shape_mismatch, "log_softmax expects a vector, got " + g.shape(logits).str());
  double m = max_value(g.value(logits));
  int sh = g.shift(logits, -m);
  int z = g.sum(g.exp(sh));
  return g.sub(sh, g.fill(g.log(z), g.shape(logits)));
}

int calibrated_loss_node(Graph& g, int a, int b) {
  if (!(g.shape(a) == g.shape(b)))
    fail(Errc::shape_mismatch,
         "calibrated loss arguments " + g.shape(a).str() + " and " + g.shape(b).str() + " differ");
  int p = softmax_node(g, a);
  int lsb = log_softmax_node(g, b);
  return g.scale(g.sum(g.mul(p, lsb)), -1.0);
}

int onehot_node(Graph& g, int y, int num_classes) {
  if (y < 0 || y >= num_classes)
    fail(Errc::invalid_argument,
         "label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
  Tensor t(Shape::vec(num_classes));
  t.data[y] = 1.0;
  return g.constant(t);
}

int trades_zeroth_node(Graph& g, int logits_s, int logits_adv, int y, int num_classes,
                       double lambda_inv) {
  int clean = calibrated_loss_node(g, logits_s, onehot_node(g, y, num_classes));
  int pair = calibrated_loss_node(g, logits_s, logits_adv);
  return g.add(clean, g.scale(pair, lambda_inv));
}

namespace {

// Sparse scalar-to-vector assembly; -1 entries stand for exact zeros.
int stack_scalars(Graph& g, const std::vector<int>& scalars) {
  int n = static_cast<int>(scalars.size());
  int acc = -1;
  for (int j = 0; j < n; ++j) {
    if (scalars[j] < 0) continue;
    int e = g.embed(scalars[j], j, Shape::vec(n));
    acc = acc < 0 ? e : g.add(acc, e);
  }
  return acc >= 0 ? acc : g.constant(Tensor::zeros(Shape::vec(n)));
}

void check_final_w(Graph& g, int logits, int final_w) {
  int n = g.shape(logits).d[0];
  if (g.shape(final_w).nd != 2 || g.shape(final_w).d[0] != n)
    fail(Errc::shape_mismatch, "final layer weight " + g.shape(final_w).str() +
                                   " does not have one row per output of " + g.shape(logits).str());
}

// Scalar nodes z_j = sum_i d p_j / d W_(j,i), one per output component.
std::vector<int> gradrow_scalars(Graph& g, int logits, int final_w) {
  check_final_w(g, logits, final_w);
  int n = g.shape(logits).d[0];
  int p = softmax_node(g, logits);
  std::vector<int> zs(n, -1);
  for (int j = 0; j < n; ++j) {
    std::vector<int> adj = g.backward_nodes(g.index(p, j));
    int aw = adj[final_w];
    if (aw >= 0) zs[j] = g.sum(g.row(aw, j));
  }
  return zs;
}

}  // namespace

int gradrow_sum_vector_node(Graph& g, int logits, int final_w) {
  return stack_scalars(g, gradrow_scalars(g, logits, final_w));
}

int hessrow_sum_vector_node(Graph& g, int logits, int final_w) {
  std::vector<int> zs = gradrow_scalars(g, logits, final_w);
  std::vector<int> z2s(zs.size(), -1);
  for (size_t l = 0; l < zs.size(); ++l) {
    if (zs[l] < 0) continue;
    std::vector<int> adj = g.backward_nodes(zs[l]);
    int aw = adj[final_w];
    if (aw >= 0) z2s[l] = g.sum(aw);
  }
  return stack_scalars(g, z2s);
}

namespace {

int surrogate_pair(Graph& g, int logits_s, int logits_adv, int z_s, int z_adv, double weight,
                   bool detach) {
  int d_sa = g.sub(z_s, z_adv);
  int d_as = g.sub(z_adv, z_s);
  if (detach) {
    d_sa = g.detach(d_sa);
    d_as = g.detach(d_as);
  }
  int l1 = calibrated_loss_node(g, logits_adv, d_sa);
  int l2 = calibrated_loss_node(g, logits_s, d_as);
  return g.scale(g.add(l1, l2), 0.5 * weight);
}

}  // namespace

int first_term_row_sum_node(Graph& g, int logits_s, int logits_adv, int final_w,
                            const TaylorConfig& cfg) {
  int z_s = gradrow_sum_vector_node(g, logits_s, final_w);
  int z_adv = gradrow_sum_vector_node(g, logits_adv, final_w);
  return surrogate_pair(g, logits_s, logits_adv, z_s, z_adv, cfg.eta, cfg.detach_row_sums);
}

int second_term_row_sum_node(Graph& g, int logits_s, int logits_adv, int final_w,
                             const TaylorConfig& cfg) {
  int z2_s = hessrow_sum_vector_node(g, logits_s, final_w);
  int z2_adv = hessrow_sum_vector_node(g, logits_adv, final_w);
  return surrogate_pair(g, logits_s, logits_adv, z2_s, z2_adv, 0.5 * cfg.eta, cfg.detach_row_sums);
}

namespace {

void check_cfg(const TaylorConfig& cfg) {
  if (cfg.sigma < 0.0) fail(Errc::invalid_argument, "sigma must be nonnegative");
  if (cfg.eta < 0.0) fail(Errc::invalid_argument, "eta must be nonnegative");
  if (cfg.lambda_inv <= 0.0) fail(Errc::invalid_argument, "lambda_inv must be positive");
  if (cfg.mc_samples < 1) fail(Errc::invalid_argument, "mc_samples must be positive");
}

int fold_mean(Graph& g, const std::vector<int>& nodes, double scale) {
  int acc = nodes[0];
  for (size_t i = 1; i < nodes.size(); ++i) acc = g.add(acc, nodes[i]);
  return g.scale(acc, scale);
}

int tangent_or_zero(Graph& g, const std::vector<int>& tn, int node) {
  if (tn[node] >= 0) return tn[node];
  return g.constant(Tensor::zeros(g.shape(node)));
}

}  // namespace

int total_objective_node(Graph& g, const Network& net, const Batch& batch, const TaylorConfig& cfg,
                         Rng& rng, TermBreakdown* terms) {
  check_cfg(cfg);
  if (batch.size() == 0) fail(Errc::invalid_argument, "empty batch");
  if (batch.s_adv.size() != batch.size() || batch.y.size() != batch.size())
    fail(Errc::count_mismatch, "batch fields have mismatched lengths");
  size_t n = batch.size();
  int num_classes = net.num_classes();

  std::map<std::string, int> pn;
  for (const auto& [name, value] : net.params) pn[name] = g.param(name, value);

  std::vector<int> logits_s(n), logits_adv(n), zeroth(n);
  int final_w = -1;
  for (size_t i = 0; i < n; ++i) {
    ForwardRec rs = net.record_with(g, g.constant(batch.s[i]), pn);
    ForwardRec ra = net.record_with(g, g.constant(batch.s_adv[i]), pn);
    logits_s[i] = rs.logits;
    logits_adv[i] = ra.logits;
    final_w = rs.final_w;
    zeroth[i] = trades_zeroth_node(g, rs.logits, ra.logits, batch.y[i], num_classes, cfg.lambda_inv);
  }
  int total = fold_mean(g, zeroth, 1.0 / static_cast<double>(n));
  if (terms) {
    terms->zeroth = g.scalar_value(total);
    terms->first = 0.0;
    terms->second = 0.0;
  }

  bool first_on = cfg.mode != TaylorMode::zeroth && cfg.eta > 0.0;
  bool second_on = cfg.mode == TaylorMode::zeroth_first_second && cfg.eta > 0.0;
  if (!first_on) return total;

  int first_mean = -1, second_mean = -1;
  if (cfg.estimator == Estimator::row_sum) {
    std::vector<int> firsts(n);
    for (size_t i = 0; i < n; ++i)
      firsts[i] = first_term_row_sum_node(g, logits_s[i], logits_adv[i], final_w, cfg);
    first_mean = fold_mean(g, firsts, 1.0 / static_cast<double>(n));
    if (second_on) {
      std::vector<int> seconds(n);
      for (size_t i = 0; i < n; ++i)
        seconds[i] = second_term_row_sum_node(g, logits_s[i], logits_adv[i], final_w, cfg);
      second_mean = fold_mean(g, seconds, 1.0 / static_cast<double>(n));
    }
  } else {
    // One noise draw serves the whole minibatch: a single pair of forward-mode
    // sweeps yields directional terms for every sample at once.
    std::vector<int> firsts, seconds;
    for (int k = 0; k < cfg.mc_samples; ++k) {
      GradMap u = net.noise_like(rng, cfg.sigma);
      std::map<int, int> seeds;
      for (const auto& [name, id] : pn) seeds[id] = g.constant(u.at(name));
      std::vector<int> t1 = g.tangent_nodes(seeds);
      std::vector<int> t2;
      if (second_on) t2 = g.tangent_nodes(seeds);
      for (size_t i = 0; i < n; ++i) {
        int a1 = tangent_or_zero(g, t1, logits_s[i]);
        int b1 = tangent_or_zero(g, t1, logits_adv[i]);
        firsts.push_back(calibrated_loss_node(g, a1, b1));
        if (second_on) {
          int a2 = t1[logits_s[i]] >= 0 ? tangent_or_zero(g, t2, t1[logits_s[i]])
                                        : g.constant(Tensor::zeros(g.shape(logits_s[i])));
          int b2 = t1[logits_adv[i]] >= 0 ? tangent_or_zero(g, t2, t1[logits_adv[i]])
                                          : g.constant(Tensor::zeros(g.shape(logits_adv[i])));
          seconds.push_back(calibrated_loss_node(g, a2, b2));
        }
      }
    }
    first_mean = fold_mean(g, firsts, cfg.eta / static_cast<double>(firsts.size()));
    if (second_on)
      second_mean = fold_mean(g, seconds, 0.5 * cfg.eta / static_cast<double>(seconds.size()));
  }

  if (terms && first_mean >= 0) terms->first = g.scalar_value(first_mean);
  if (terms && second_mean >= 0) terms->second = g.scalar_value(second_mean);
  total = g.add(total, first_mean);
  if (second_on) total = g.add(total, second_mean);
  return total;
}

namespace {

// Batch graphs are large and rebuilt every minibatch; reusing one arena per
// thread keeps the allocator out of the training loop.
Graph& scratch_graph() {
  thread_local Graph g;
  g.reset();
  return g;
}

}  // namespace

double total_objective(const Network& net, const Batch& batch, const TaylorConfig& cfg, Rng& rng,
                       TermBreakdown* terms) {
  Graph& g = scratch_graph();
  return g.scalar_value(total_objective_node(g, net, batch, cfg, rng, terms));
}

GradMap total_objective_grad(const Network& net, const Batch& batch, const TaylorConfig& cfg,
                             Rng& rng, double* value, TermBreakdown* terms) {
  Graph& g = scratch_graph();
  int total = total_objective_node(g, net, batch, cfg, rng, terms);
  if (value) *value = g.scalar_value(total);
  return backward(g, total, net.param_names());
}

double calibrated_loss(const Tensor& a, const Tensor& b) {
  Graph g;
  return g.scalar_value(calibrated_loss_node(g, g.constant(a), g.constant(b)));
}

double trades_zeroth(const Network& net, const Tensor& s, const Tensor& s_adv, int y,
                     double lambda_inv) {
  Graph g;
  ForwardRec rs = net.record(g, g.constant(s), true);
  ForwardRec ra = net.record_with(g, g.constant(s_adv), rs.param_nodes);
  return g.scalar_value(trades_zeroth_node(g, rs.logits, ra.logits, y, net.num_classes(), lambda_inv));
}

Tensor gradrow_sum_vector(const Network& net, const Tensor& s) {
  Graph g;
  ForwardRec rec = net.record(g, g.constant(s), true);
  return g.value(gradrow_sum_vector_node(g, rec.logits, rec.final_w));
}

Tensor hessrow_sum_vector(const Network& net, const Tensor& s) {
  Graph g;
  ForwardRec rec = net.record(g, g.constant(s), true);
  return g.value(hessrow_sum_vector_node(g, rec.logits, rec.final_w));
}

double first_term_row_sum(const Network& net, const Tensor& s, const Tensor& s_adv,
                          const TaylorConfig& cfg) {
  check_cfg(cfg);
  Graph g;
  ForwardRec rs = net.record(g, g.constant(s), true);
  ForwardRec ra = net.record_with(g, g.constant(s_adv), rs.param_nodes);
  return g.scalar_value(first_term_row_sum_node(g, rs.logits, ra.logits, rs.final_w, cfg));
}

double second_term_row_sum(const Network& net, const Tensor& s, const Tensor& s_adv,
                           const TaylorConfig& cfg) {
  check_cfg(cfg);
  Graph g;
  ForwardRec rs = net.record(g, g.constant(s), true);
  ForwardRec ra = net.record_with(g, g.constant(s_adv), rs.param_nodes);
  return g.scalar_value(second_term_row_sum_node(g, rs.logits, ra.logits, rs.final_w, cfg));
}

namespace {

double mc_term(const Network& net, const Tensor& s, const Tensor& s_adv, const TaylorConfig& cfg,
               Rng& rng, bool second) {
  check_cfg(cfg);
  Graph g;
  ForwardRec rs = net.record(g, g.constant(s), true);
  ForwardRec ra = net.record_with(g, g.constant(s_adv), rs.param_nodes);
  double acc = 0.0;
  for (int k = 0; k < cfg.mc_samples; ++k) {
    GradMap u = net.noise_like(rng, cfg.sigma);
    int a = second ? hvp_quadratic_node(g, rs.logits, u) : jvp_node(g, rs.logits, u);
    int b = second ? hvp_quadratic_node(g, ra.logits, u) : jvp_node(g, ra.logits, u);
    acc += g.scalar_value(calibrated_loss_node(g, a, b));
  }
  double weight = second ? 0.5 * cfg.eta : cfg.eta;
  return weight * acc / cfg.mc_samples;
}

}  // namespace

double first_term_mc(const Network& net, const Tensor& s, const Tensor& s_adv,
                     const TaylorConfig& cfg, Rng& rng) {
  return mc_term(net, s, s_adv, cfg, rng, false);
}

double second_term_mc(const Network& net, const Tensor& s, const Tensor& s_adv,
                      const TaylorConfig& cfg, Rng& rng) {
  return mc_term(net, s, s_adv, cfg, rng, true);
}

}  // namespace trat
