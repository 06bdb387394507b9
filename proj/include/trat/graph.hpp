#ifndef TRAT_GRAPH_HPP
#define TRAT_GRAPH_HPP

#include <map>
#include <span>
#include <string>
#include <vector>

#include "trat/tensor.hpp"

namespace trat {

// Gradient keyed by parameter name; shapes mirror the parameters.
using GradMap = std::map<std::string, Tensor>;

enum class Op : std::uint8_t {
  kConst,      // leaf, no gradient
  kParam,      // leaf, differentiation target
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,      // c * a
  kShift,      // a + c
  kRelu,
  kHeaviside,  // 1 where a > 0 else 0; derivative treated as 0 everywhere
  kTanh,
  kExp,
  kLog,
  kMatMul,     // [m x k]*[k x n] or [m x k]*[k]
  kTranspose,
  kOuter,      // [m],[n] -> [m x n]
  kSum,        // all entries -> scalar
  kFill,       // scalar -> constant-filled tensor of the node's shape
  kIndex,      // flat entry i0 -> scalar
  kEmbed,      // scalar -> tensor of node's shape, entry i0 set, rest 0
  kRow,        // row i0 of a matrix -> vector
  kEmbedRow,   // vector -> matrix of node's shape with row i0 set, rest 0
  kReshape,
  kDetach,     // value passthrough, gradient barrier
  kConv,       // conv2d(x, w, stride=i0, pad=i1)
  kConvInGrad, // adjoint of kConv w.r.t. x; output spatial size from node shape
  kConvWGrad,  // adjoint of kConv w.r.t. w; kernel size from node shape
};

struct Node {
  Op op = Op::kConst;
  int a = -1;
  int b = -1;
  double c = 0.0;
  int i0 = 0;
  int i1 = 0;
  Shape shape;
  std::int64_t off = 0;  // offset into the value arena
  bool diff = false;     // depends on at least one kParam leaf
};

// Append-only computation tape with eager evaluation. Each operation checks
// shapes, appends a node, and computes its value immediately, so node ids are
// topologically ordered by construction. Derivatives come in three forms:
//
//  * backward_values: numeric reverse-mode over the existing nodes (fast path
//    for attacks and the final training gradient);
//  * backward_nodes: reverse-mode that emits the adjoints as new nodes, so a
//    gradient entry can itself be differentiated again;
//  * tangent_nodes: forward-mode as a graph-to-graph transformation; applying
//    it twice with the same seeds yields exact second-order quadratic forms.
//
// Emitted derivative nodes use only the primitive ops above, which keeps every
// mode composable with every other.
class Graph {
 public:
  int constant(const Tensor& v);
  int const_scalar(double v);
  int param(const std::string& name, const Tensor& v);

  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int div(int a, int b);
  int scale(int a, double c);
  int shift(int a, double c);
  int relu(int a);
  int heaviside(int a);
  int tanh(int a);
  int exp(int a);
  int log(int a);
  int matmul(int a, int b);
  int transpose(int a);
  int outer(int a, int b);
  int sum(int a);
  int fill(int s, Shape shape);
  int index(int v, int i);
  int embed(int s, int i, Shape shape);
  int row(int m, int i);
  int embed_row(int v, int i, int rows);
  int reshape(int a, Shape shape);
  int detach(int a);
  int conv(int x, int w, int stride, int pad);
  int conv_input_grad(int g, int w, int stride, int pad, int in_h, int in_w);
  int conv_weight_grad(int x, int g, int stride, int pad, int kh, int kw);

  size_t size() const { return nodes_.size(); }
  // True when a differentiable path connects the leaf to the output.
  bool depends_on(int output, int leaf) const;
  const Shape& shape(int id) const { return node(id).shape; }
  Tensor value(int id) const;
  double scalar_value(int id) const;
  const std::vector<std::pair<std::string, int>>& params() const { return params_; }
  int param_id(const std::string& name) const;

  // Clears nodes and values but keeps allocated capacity for reuse.
  void reset();

  // Numeric reverse mode from a scalar node; adjoints retrievable until the
  // graph is modified or reset.
  void backward_values(int output);
  Tensor adjoint(int id) const;

  // Recorded reverse mode: returns one adjoint node id per existing node
  // (-1 where the adjoint is identically zero or the node cannot reach the
  // output through differentiable edges).
  std::vector<int> backward_nodes(int output);

  // Forward mode: seeds maps leaf id -> tangent node id. Returns one tangent
  // node id per node existing at call time (-1 for symbolic zero).
  std::vector<int> tangent_nodes(const std::map<int, int>& seeds);

  // Test hook: deliberately corrupts the relu backward rule so verification
  // harnesses can demonstrate that they catch a wrong derivative.
  void set_fault_relu_backward(bool on) { fault_relu_backward_ = on; }

 private:
  const Node& node(int id) const;
  int push(Op op, int a, int b, double c, int i0, int i1, Shape shape, bool diff);
  void eval(int id);
  std::span<double> vals(int id);
  std::span<const double> vals(int id) const;
  std::vector<char> reachable_from(int output) const;

  std::vector<Node> nodes_;
  std::vector<double> buf_;
  std::vector<double> adj_;
  std::vector<std::pair<std::string, int>> params_;
  bool fault_relu_backward_ = false;
};

// Gradient of a scalar node with respect to the named parameters.
GradMap backward(Graph& g, int output, const std::vector<std::string>& names);
GradMap backward(Graph& g, int output);  // all registered parameters

// Directional derivative d/dt f(w + t u) at t = 0, one value per component of
// the (possibly vector-valued) output node. direction must cover exactly the
// registered parameters.
Tensor jvp(Graph& g, int output, const GradMap& direction);
int jvp_node(Graph& g, int output, const GradMap& direction);

// Quadratic form d^2/dt^2 f(w + t u) at t = 0, exact (forward mode applied
// twice), one value per output component.
Tensor hvp_quadratic(Graph& g, int output, const GradMap& direction);
int hvp_quadratic_node(Graph& g, int output, const GradMap& direction);

// Gradient of a scalar that was assembled from recorded-backward nodes; errors
// if h has no differentiable path to any requested parameter.
GradMap grad_of_scalar_grad(Graph& g, int h, const std::vector<std::string>& names);

}  // namespace trat

#endif  // TRAT_GRAPH_HPP
