#ifndef TRAT_LOSSES_HPP
#define TRAT_LOSSES_HPP

#include <string>
#include <vector>

#include "trat/graph.hpp"
#include "trat/net.hpp"
#include "trat/tensor.hpp"

namespace trat {

enum class TaylorMode { zeroth, zeroth_first, zeroth_first_second };

// Estimators for the first/second expansion terms: `row_sum` is the
// deterministic surrogate built from row-sums of final-layer derivatives,
// `monte_carlo` averages the exact directional terms over sampled weight
// noise directions.
enum class Estimator { row_sum, monte_carlo };

struct TaylorConfig {
  double lambda_inv = 6.0;  // weight of the clean-vs-adversarial zeroth term
  double eta = 0.2;         // first-term weight; the second term uses eta/2
  double sigma = 0.01;      // weight-noise standard deviation
  int mc_samples = 1;
  TaylorMode mode = TaylorMode::zeroth_first_second;
  Estimator estimator = Estimator::row_sum;
  // Experiment switch: freeze the row-sum vectors before they enter the loss
  // so gradients shape only the logits side.
  bool detach_row_sums = false;
};

TaylorMode parse_mode(const std::string& s);
Estimator parse_estimator(const std::string& s);
std::string to_string(TaylorMode m);
std::string to_string(Estimator e);

struct Batch {
  std::vector<Tensor> s;
  std::vector<Tensor> s_adv;
  std::vector<int> y;

  size_t size() const { return s.size(); }
};

// Weighted per-batch contributions; total = zeroth + first + second.
struct TermBreakdown {
  double zeroth = 0.0;
  double first = 0.0;
  double second = 0.0;
};

// ---- graph-level builders ----
//
// All builders append to an existing graph and return node ids, so every
// value can participate in further differentiation.

// Softmax with a detached max shift; exact for derivatives since softmax is
// shift-invariant.
int softmax_node(Graph& g, int logits);
int log_softmax_node(Graph& g, int logits);

// L(a, b) = -sum_j softmax(a)_j * log softmax(b)_j, differentiable in both.
int calibrated_loss_node(Graph& g, int a, int b);

int onehot_node(Graph& g, int y, int num_classes);

// L(logits_s, onehot(y)) + lambda_inv * L(logits_s, logits_adv).
int trades_zeroth_node(Graph& g, int logits_s, int logits_adv, int y, int num_classes,
                       double lambda_inv);

// z_j = sum_i d softmax(logits)_j / d W_(j,i) over the final-layer matrix,
// assembled from a recorded backward pass per output component.
int gradrow_sum_vector_node(Graph& g, int logits, int final_w);

// z2_l = sum_{j,k} d z_l / d W_(j,k): gradient of each row-sum entry, summed
// over the whole final-layer matrix (recorded backward applied twice).
int hessrow_sum_vector_node(Graph& g, int logits, int final_w);

// eta * [ L(logits_adv, z(s)-z(s')) + L(logits_s, z(s')-z(s)) ] / 2.
int first_term_row_sum_node(Graph& g, int logits_s, int logits_adv, int final_w,
                            const TaylorConfig& cfg);
// (eta/2) * [ L(logits_adv, z2(s)-z2(s')) + L(logits_s, z2(s')-z2(s)) ] / 2.
int second_term_row_sum_node(Graph& g, int logits_s, int logits_adv, int final_w,
                             const TaylorConfig& cfg);

// ---- tensor-level conveniences (scratch graph built internally) ----
double calibrated_loss(const Tensor& a, const Tensor& b);
double trades_zeroth(const Network& net, const Tensor& s, const Tensor& s_adv, int y,
                     double lambda_inv);
Tensor gradrow_sum_vector(const Network& net, const Tensor& s);
Tensor hessrow_sum_vector(const Network& net, const Tensor& s);
double first_term_row_sum(const Network& net, const Tensor& s, const Tensor& s_adv,
                          const TaylorConfig& cfg);
double second_term_row_sum(const Network& net, const Tensor& s, const Tensor& s_adv,
                           const TaylorConfig& cfg);
// Monte-Carlo terms draw mc_samples directions u ~ N(0, sigma^2 I) over every
// parameter from the supplied stream.
double first_term_mc(const Network& net, const Tensor& s, const Tensor& s_adv,
                     const TaylorConfig& cfg, Rng& rng);
double second_term_mc(const Network& net, const Tensor& s, const Tensor& s_adv,
                      const TaylorConfig& cfg, Rng& rng);

// Batch-mean objective: zeroth term plus the Taylor terms selected by
// cfg.mode/cfg.estimator. Inactive terms are not built at all, so with
// mode = zeroth (or eta = 0) the value and gradient coincide bit-for-bit with
// the plain zeroth objective. The rng feeds Monte-Carlo noise draws only.
int total_objective_node(Graph& g, const Network& net, const Batch& batch,
                         const TaylorConfig& cfg, Rng& rng, TermBreakdown* terms = nullptr);
double total_objective(const Network& net, const Batch& batch, const TaylorConfig& cfg, Rng& rng,
                       TermBreakdown* terms = nullptr);
// One combined build-and-differentiate pass; this is what the trainer calls.
GradMap total_objective_grad(const Network& net, const Batch& batch, const TaylorConfig& cfg,
                             Rng& rng, double* value = nullptr, TermBreakdown* terms = nullptr);

}  // namespace trat

#endif  // TRAT_LOSSES_HPP
