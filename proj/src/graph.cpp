#include "trat/graph.hpp"

#include <algorithm>
#include <cmath>

namespace trat {

const Node& Graph::node(int id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    fail(Errc::invalid_argument, "node id " + std::to_string(id) + " out of range");
  return nodes_[id];
}

std::span<double> Graph::vals(int id) {
  const Node& n = nodes_[id];
  return {buf_.data() + n.off, static_cast<size_t>(n.shape.numel())};
}

std::span<const double> Graph::vals(int id) const {
  const Node& n = nodes_[id];
  return {buf_.data() + n.off, static_cast<size_t>(n.shape.numel())};
}

int Graph::push(Op op, int a, int b, double c, int i0, int i1, Shape shape, bool diff) {
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.c = c;
  n.i0 = i0;
  n.i1 = i1;
  n.shape = shape;
  n.off = static_cast<std::int64_t>(buf_.size());
  n.diff = diff;
  nodes_.push_back(n);
  buf_.resize(buf_.size() + static_cast<size_t>(shape.numel()), 0.0);
  int id = static_cast<int>(nodes_.size()) - 1;
  eval(id);
  return id;
}

int Graph::constant(const Tensor& v) {
  int id = push(Op::kConst, -1, -1, 0.0, 0, 0, v.shape, false);
  std::copy(v.data.begin(), v.data.end(), vals(id).begin());
  return id;
}

int Graph::const_scalar(double v) { return constant(Tensor::scalar(v)); }

int Graph::param(const std::string& name, const Tensor& v) {
  for (const auto& [n, _] : params_)
    if (n == name) fail(Errc::invalid_argument, "duplicate parameter name '" + name + "'");
  int id = push(Op::kParam, -1, -1, 0.0, 0, 0, v.shape, true);
  std::copy(v.data.begin(), v.data.end(), vals(id).begin());
  params_.emplace_back(name, id);
  return id;
}

int Graph::param_id(const std::string& name) const {
  for (const auto& [n, id] : params_)
    if (n == name) return id;
  fail(Errc::invalid_argument, "unknown parameter '" + name + "'");
}

static void require_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b))
    fail(Errc::shape_mismatch, std::string(op) + ": shapes " + a.str() + " and " + b.str() + " differ");
}

int Graph::add(int a, int b) {
  require_same(node(a).shape, node(b).shape, "add");
  return push(Op::kAdd, a, b, 0.0, 0, 0, node(a).shape, node(a).diff || node(b).diff);
}

int Graph::sub(int a, int b) {
  require_same(node(a).shape, node(b).shape, "sub");
  return push(Op::kSub, a, b, 0.0, 0, 0, node(a).shape, node(a).diff || node(b).diff);
}

int Graph::mul(int a, int b) {
  require_same(node(a).shape, node(b).shape, "mul");
  return push(Op::kMul, a, b, 0.0, 0, 0, node(a).shape, node(a).diff || node(b).diff);
}

int Graph::div(int a, int b) {
  require_same(node(a).shape, node(b).shape, "div");
  return push(Op::kDiv, a, b, 0.0, 0, 0, node(a).shape, node(a).diff || node(b).diff);
}

int Graph::scale(int a, double c) { return push(Op::kScale, a, -1, c, 0, 0, node(a).shape, node(a).diff); }
int Graph::shift(int a, double c) { return push(Op::kShift, a, -1, c, 0, 0, node(a).shape, node(a).diff); }
int Graph::relu(int a) { return push(Op::kRelu, a, -1, 0.0, 0, 0, node(a).shape, node(a).diff); }
int Graph::heaviside(int a) { return push(Op::kHeaviside, a, -1, 0.0, 0, 0, node(a).shape, false); }
int Graph::tanh(int a) { return push(Op::kTanh, a, -1, 0.0, 0, 0, node(a).shape, node(a).diff); }
int Graph::exp(int a) { return push(Op::kExp, a, -1, 0.0, 0, 0, node(a).shape, node(a).diff); }
int Graph::log(int a) { return push(Op::kLog, a, -1, 0.0, 0, 0, node(a).shape, node(a).diff); }

int Graph::matmul(int a, int b) {
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  if (sa.nd != 2) fail(Errc::shape_mismatch, "matmul: left operand " + sa.str() + " is not a matrix");
  Shape out;
  if (sb.nd == 1) {
    if (sb.d[0] != sa.d[1])
      fail(Errc::shape_mismatch, "matmul: " + sa.str() + " * " + sb.str() + " inner dimensions differ");
    out = Shape::vec(sa.d[0]);
  } else if (sb.nd == 2) {
    if (sb.d[0] != sa.d[1])
      fail(Errc::shape_mismatch, "matmul: " + sa.str() + " * " + sb.str() + " inner dimensions differ");
    out = Shape::mat(sa.d[0], sb.d[1]);
  } else {
    fail(Errc::shape_mismatch, "matmul: right operand " + sb.str() + " is not a matrix or vector");
  }
  return push(Op::kMatMul, a, b, 0.0, 0, 0, out, node(a).diff || node(b).diff);
}

int Graph::transpose(int a) {
  const Shape& s = node(a).shape;
  if (s.nd != 2) fail(Errc::shape_mismatch, "transpose of non-matrix " + s.str());
  return push(Op::kTranspose, a, -1, 0.0, 0, 0, Shape::mat(s.d[1], s.d[0]), node(a).diff);
}

int Graph::outer(int a, int b) {
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  if (sa.nd != 1 || sb.nd != 1)
    fail(Errc::shape_mismatch, "outer: expected vectors, got " + sa.str() + " and " + sb.str());
  return push(Op::kOuter, a, b, 0.0, 0, 0, Shape::mat(sa.d[0], sb.d[0]), node(a).diff || node(b).diff);
}

int Graph::sum(int a) { return push(Op::kSum, a, -1, 0.0, 0, 0, Shape::scalar(), node(a).diff); }

int Graph::fill(int s, Shape shape) {
  if (node(s).shape.numel() != 1) fail(Errc::shape_mismatch, "fill expects a scalar source");
  return push(Op::kFill, s, -1, 0.0, 0, 0, shape, node(s).diff);
}

int Graph::index(int v, int i) {
  if (i < 0 || i >= node(v).shape.numel())
    fail(Errc::invalid_argument, "index " + std::to_string(i) + " out of range for " + node(v).shape.str());
  return push(Op::kIndex, v, -1, 0.0, i, 0, Shape::scalar(), node(v).diff);
}

int Graph::embed(int s, int i, Shape shape) {
  if (node(s).shape.numel() != 1) fail(Errc::shape_mismatch, "embed expects a scalar source");
  if (i < 0 || i >= shape.numel())
    fail(Errc::invalid_argument, "embed index " + std::to_string(i) + " out of range for " + shape.str());
  return push(Op::kEmbed, s, -1, 0.0, i, 0, shape, node(s).diff);
}

int Graph::row(int m, int i) {
  const Shape& s = node(m).shape;
  if (s.nd != 2) fail(Errc::shape_mismatch, "row of non-matrix " + s.str());
  if (i < 0 || i >= s.d[0]) fail(Errc::invalid_argument, "row " + std::to_string(i) + " out of range for " + s.str());
  return push(Op::kRow, m, -1, 0.0, i, 0, Shape::vec(s.d[1]), node(m).diff);
}

int Graph::embed_row(int v, int i, int rows) {
  const Shape& s = node(v).shape;
  if (s.nd != 1) fail(Errc::shape_mismatch, "embed_row expects a vector source, got " + s.str());
  if (i < 0 || i >= rows) fail(Errc::invalid_argument, "embed_row row " + std::to_string(i) + " out of range");
  return push(Op::kEmbedRow, v, -1, 0.0, i, 0, Shape::mat(rows, s.d[0]), node(v).diff);
}

int Graph::reshape(int a, Shape shape) {
  if (shape.numel() != node(a).shape.numel())
    fail(Errc::shape_mismatch, "reshape " + node(a).shape.str() + " -> " + shape.str() + " changes element count");
  return push(Op::kReshape, a, -1, 0.0, 0, 0, shape, node(a).diff);
}

int Graph::detach(int a) { return push(Op::kDetach, a, -1, 0.0, 0, 0, node(a).shape, false); }

int Graph::conv(int x, int w, int stride, int pad) {
  const Shape& sx = node(x).shape;
  const Shape& sw = node(w).shape;
  if (sx.nd != 3) fail(Errc::shape_mismatch, "conv: input " + sx.str() + " must have rank 3");
  if (sw.nd != 4) fail(Errc::shape_mismatch, "conv: kernel " + sw.str() + " must have rank 4");
  if (sw.d[1] != sx.d[0])
    fail(Errc::shape_mismatch, "conv: input " + sx.str() + " and kernel " + sw.str() + " channel counts differ");
  if (stride <= 0) fail(Errc::invalid_argument, "conv: stride must be positive");
  if (pad < 0) fail(Errc::invalid_argument, "conv: padding must be nonnegative");
  int oh = (sx.d[1] + 2 * pad - sw.d[2]) / stride + 1;
  int ow = (sx.d[2] + 2 * pad - sw.d[3]) / stride + 1;
  if (oh <= 0 || ow <= 0) fail(Errc::shape_mismatch, "conv: kernel " + sw.str() + " does not fit input " + sx.str());
  return push(Op::kConv, x, w, 0.0, stride, pad, Shape{sw.d[0], oh, ow}, node(x).diff || node(w).diff);
}

int Graph::conv_input_grad(int g, int w, int stride, int pad, int in_h, int in_w) {
  const Shape& sg = node(g).shape;
  const Shape& sw = node(w).shape;
  if (sg.nd != 3 || sw.nd != 4 || sg.d[0] != sw.d[0])
    fail(Errc::shape_mismatch, "conv_input_grad: mismatched " + sg.str() + " and " + sw.str());
  return push(Op::kConvInGrad, g, w, 0.0, stride, pad, Shape{sw.d[1], in_h, in_w},
              node(g).diff || node(w).diff);
}

int Graph::conv_weight_grad(int x, int g, int stride, int pad, int kh, int kw) {
  const Shape& sx = node(x).shape;
  const Shape& sg = node(g).shape;
  if (sx.nd != 3 || sg.nd != 3)
    fail(Errc::shape_mismatch, "conv_weight_grad: mismatched " + sx.str() + " and " + sg.str());
  return push(Op::kConvWGrad, x, g, 0.0, stride, pad, Shape{sg.d[0], sx.d[0], kh, kw},
              node(x).diff || node(g).diff);
}

void Graph::eval(int id) {
  const Node n = nodes_[id];
  auto out = vals(id);
  switch (n.op) {
    case Op::kConst:
    case Op::kParam:
      break;
    case Op::kAdd: {
      auto a = vals(n.a), b = vals(n.b);
      for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
      break;
    }
    case Op::kSub: {
      auto a = vals(n.a), b = vals(n.b);
      for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
      break;
    }
    case Op::kMul: {
      auto a = vals(n.a), b = vals(n.b);
      for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
      break;
    }
    case Op::kDiv: {
      auto a = vals(n.a), b = vals(n.b);
      for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
      break;
    }
    case Op::kScale: {
      auto a = vals(n.a);
      for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * n.c;
      break;
    }
    case Op::kShift: {
      auto a = vals(n.a);
      for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] + n.c;
      break;
    }
    case Op::kRelu: {
      auto a = vals(n.a);
      for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
      break;
    }
    case Op::kHeaviside: {
      auto a = vals(n.a);
      for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? 1.0 : 0.0;
      break;
    }
    case Op::kTanh: {
      auto a = vals(n.a);
      for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
      break;
    }
    case Op::kExp: {
      auto a = vals(n.a);
      for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
      break;
    }
    case Op::kLog: {
      auto a = vals(n.a);
      for (size_t i = 0; i < out.size(); ++i) {
        if (a[i] <= 0.0) fail(Errc::numeric_abort, "log of nonpositive value " + std::to_string(a[i]));
        out[i] = std::log(a[i]);
      }
      break;
    }
    case Op::kMatMul: {
      auto a = vals(n.a), b = vals(n.b);
      const Shape& sa = nodes_[n.a].shape;
      const Shape& sb = nodes_[n.b].shape;
      int m = sa.d[0], k = sa.d[1];
      if (sb.nd == 1) {
        for (int i = 0; i < m; ++i) {
          double s = 0.0;
          for (int p = 0; p < k; ++p) s += a[static_cast<size_t>(i) * k + p] * b[p];
          out[i] = s;
        }
      } else {
        int cols = sb.d[1];
        std::fill(out.begin(), out.end(), 0.0);
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double av = a[static_cast<size_t>(i) * k + p];
            if (av == 0.0) continue;
            for (int j = 0; j < cols; ++j)
              out[static_cast<size_t>(i) * cols + j] += av * b[static_cast<size_t>(p) * cols + j];
          }
      }
      break;
    }
    case Op::kTranspose: {
      auto a = vals(n.a);
      int r = nodes_[n.a].shape.d[0], c = nodes_[n.a].shape.d[1];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = a[static_cast<size_t>(i) * c + j];
      break;
    }
    case Op::kOuter: {
      auto a = vals(n.a), b = vals(n.b);
      for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < b.size(); ++j) out[i * b.size() + j] = a[i] * b[j];
      break;
    }
    case Op::kSum: {
      auto a = vals(n.a);
      double s = 0.0;
      for (double v : a) s += v;
      out[0] = s;
      break;
    }
    case Op::kFill: {
      double v = vals(n.a)[0];
      std::fill(out.begin(), out.end(), v);
      break;
    }
    case Op::kIndex:
      out[0] = vals(n.a)[n.i0];
      break;
    case Op::kEmbed: {
      std::fill(out.begin(), out.end(), 0.0);
      out[n.i0] = vals(n.a)[0];
      break;
    }
    case Op::kRow: {
      auto a = vals(n.a);
      int c = nodes_[n.a].shape.d[1];
      for (int j = 0; j < c; ++j) out[j] = a[static_cast<size_t>(n.i0) * c + j];
      break;
    }
    case Op::kEmbedRow: {
      auto a = vals(n.a);
      std::fill(out.begin(), out.end(), 0.0);
      int c = n.shape.d[1];
      for (int j = 0; j < c; ++j) out[static_cast<size_t>(n.i0) * c + j] = a[j];
      break;
    }
    case Op::kReshape:
    case Op::kDetach: {
      auto a = vals(n.a);
      std::copy(a.begin(), a.end(), out.begin());
      break;
    }
    case Op::kConv: {
      Tensor r = conv2d(value(n.a), value(n.b), n.i0, n.i1);
      std::copy(r.data.begin(), r.data.end(), out.begin());
      break;
    }
    case Op::kConvInGrad: {
      Tensor r = conv2d_input_grad(value(n.a), value(n.b), n.i0, n.i1, n.shape.d[1], n.shape.d[2]);
      std::copy(r.data.begin(), r.data.end(), out.begin());
      break;
    }
    case Op::kConvWGrad: {
      Tensor r = conv2d_weight_grad(value(n.a), value(n.b), n.i0, n.i1, n.shape.d[2], n.shape.d[3]);
      std::copy(r.data.begin(), r.data.end(), out.begin());
      break;
    }
  }
}

Tensor Graph::value(int id) const {
  const Node& n = node(id);
  auto v = vals(id);
  Tensor t(n.shape);
  std::copy(v.begin(), v.end(), t.data.begin());
  return t;
}

double Graph::scalar_value(int id) const {
  if (node(id).shape.numel() != 1) fail(Errc::shape_mismatch, "scalar_value on node of shape " + node(id).shape.str());
  return vals(id)[0];
}

void Graph::reset() {
  nodes_.clear();
  buf_.clear();
  adj_.clear();
  params_.clear();
}

bool Graph::depends_on(int output, int leaf) const {
  node(output);
  node(leaf);
  return reachable_from(output)[leaf] != 0;
}

std::vector<char> Graph::reachable_from(int output) const {
  std::vector<char> reach(nodes_.size(), 0);
  if (!nodes_[output].diff) return reach;
  std::vector<int> stack{output};
  reach[output] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    const Node& n = nodes_[id];
    for (int in : {n.a, n.b}) {
      if (in < 0 || reach[in] || !nodes_[in].diff) continue;
      // Gradient does not pass through a detach barrier or a heaviside mask,
      // and those nodes are flagged non-diff, so this test already skips them.
      reach[in] = 1;
      stack.push_back(in);
    }
  }
  return reach;
}

void Graph::backward_values(int output) {
  const Node& out = node(output);
  if (out.shape.numel() != 1)
    fail(Errc::shape_mismatch, "backward expects a scalar output, got " + out.shape.str());
  adj_.assign(buf_.size(), 0.0);
  std::vector<char> reach = reachable_from(output);
  adj_[out.off] = 1.0;
  for (int id = output; id >= 0; --id) {
    if (!reach[id]) continue;
    const Node& n = nodes_[id];
    auto go = std::span<const double>{adj_.data() + n.off, static_cast<size_t>(n.shape.numel())};
    auto ga = [&](int in) {
      const Node& m = nodes_[in];
      return std::span<double>{adj_.data() + m.off, static_cast<size_t>(m.shape.numel())};
    };
    bool da = n.a >= 0 && nodes_[n.a].diff;
    bool db = n.b >= 0 && nodes_[n.b].diff;
    switch (n.op) {
      case Op::kConst:
      case Op::kParam:
      case Op::kHeaviside:
      case Op::kDetach:
        break;
      case Op::kAdd: {
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i]; }
        if (db) { auto g = ga(n.b); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i]; }
        break;
      }
      case Op::kSub: {
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i]; }
        if (db) { auto g = ga(n.b); for (size_t i = 0; i < go.size(); ++i) g[i] -= go[i]; }
        break;
      }
      case Op::kMul: {
        auto va = vals(n.a), vb = vals(n.b);
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] * vb[i]; }
        if (db) { auto g = ga(n.b); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] * va[i]; }
        break;
      }
      case Op::kDiv: {
        auto vb = vals(n.b), vo = vals(id);
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] / vb[i]; }
        if (db) { auto g = ga(n.b); for (size_t i = 0; i < go.size(); ++i) g[i] -= go[i] * vo[i] / vb[i]; }
        break;
      }
      case Op::kScale: {
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] * n.c; }
        break;
      }
      case Op::kShift:
      case Op::kReshape: {
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i]; }
        break;
      }
      case Op::kRelu: {
        auto va = vals(n.a);
        double sgn = fault_relu_backward_ ? -1.0 : 1.0;
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < go.size(); ++i) g[i] += va[i] > 0.0 ? sgn * go[i] : 0.0; }
        break;
      }
      case Op::kTanh: {
        auto vo = vals(id);
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] * (1.0 - vo[i] * vo[i]); }
        break;
      }
      case Op::kExp: {
        auto vo = vals(id);
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] * vo[i]; }
        break;
      }
      case Op::kLog: {
        auto va = vals(n.a);
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < go.size(); ++i) g[i] += go[i] / va[i]; }
        break;
      }
      case Op::kMatMul: {
        auto va = vals(n.a), vb = vals(n.b);
        const Shape& sa = nodes_[n.a].shape;
        const Shape& sb = nodes_[n.b].shape;
        int m = sa.d[0], k = sa.d[1];
        if (sb.nd == 1) {
          if (da) {
            auto g = ga(n.a);
            for (int i = 0; i < m; ++i)
              for (int p = 0; p < k; ++p) g[static_cast<size_t>(i) * k + p] += go[i] * vb[p];
          }
          if (db) {
            auto g = ga(n.b);
            for (int i = 0; i < m; ++i)
              for (int p = 0; p < k; ++p) g[p] += va[static_cast<size_t>(i) * k + p] * go[i];
          }
        } else {
          int cols = sb.d[1];
          if (da) {
            auto g = ga(n.a);
            for (int i = 0; i < m; ++i)
              for (int p = 0; p < k; ++p) {
                double s = 0.0;
                for (int j = 0; j < cols; ++j)
                  s += go[static_cast<size_t>(i) * cols + j] * vb[static_cast<size_t>(p) * cols + j];
                g[static_cast<size_t>(i) * k + p] += s;
              }
          }
          if (db) {
            auto g = ga(n.b);
            for (int i = 0; i < m; ++i)
              for (int p = 0; p < k; ++p) {
                double av = va[static_cast<size_t>(i) * k + p];
                if (av == 0.0) continue;
                for (int j = 0; j < cols; ++j)
                  g[static_cast<size_t>(p) * cols + j] += av * go[static_cast<size_t>(i) * cols + j];
              }
          }
        }
        break;
      }
      case Op::kTranspose: {
        if (da) {
          auto g = ga(n.a);
          int r = nodes_[n.a].shape.d[0], c = nodes_[n.a].shape.d[1];
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g[static_cast<size_t>(i) * c + j] += go[static_cast<size_t>(j) * r + i];
        }
        break;
      }
      case Op::kOuter: {
        auto va = vals(n.a), vb = vals(n.b);
        if (da) {
          auto g = ga(n.a);
          for (size_t i = 0; i < va.size(); ++i)
            for (size_t j = 0; j < vb.size(); ++j) g[i] += go[i * vb.size() + j] * vb[j];
        }
        if (db) {
          auto g = ga(n.b);
          for (size_t i = 0; i < va.size(); ++i)
            for (size_t j = 0; j < vb.size(); ++j) g[j] += go[i * vb.size() + j] * va[i];
        }
        break;
      }
      case Op::kSum: {
        if (da) { auto g = ga(n.a); for (size_t i = 0; i < g.size(); ++i) g[i] += go[0]; }
        break;
      }
      case Op::kFill: {
        if (da) {
          auto g = ga(n.a);
          double s = 0.0;
          for (double v : go) s += v;
          g[0] += s;
        }
        break;
      }
      case Op::kIndex: {
        if (da) ga(n.a)[n.i0] += go[0];
        break;
      }
      case Op::kEmbed: {
        if (da) ga(n.a)[0] += go[n.i0];
        break;
      }
      case Op::kRow: {
        if (da) {
          auto g = ga(n.a);
          int c = nodes_[n.a].shape.d[1];
          for (int j = 0; j < c; ++j) g[static_cast<size_t>(n.i0) * c + j] += go[j];
        }
        break;
      }
      case Op::kEmbedRow: {
        if (da) {
          auto g = ga(n.a);
          int c = n.shape.d[1];
          for (int j = 0; j < c; ++j) g[j] += go[static_cast<size_t>(n.i0) * c + j];
        }
        break;
      }
      case Op::kConv: {
        Tensor gt(n.shape);
        std::copy(go.begin(), go.end(), gt.data.begin());
        if (da) {
          const Shape& sx = nodes_[n.a].shape;
          Tensor gx = conv2d_input_grad(gt, value(n.b), n.i0, n.i1, sx.d[1], sx.d[2]);
          auto g = ga(n.a);
          for (size_t i = 0; i < g.size(); ++i) g[i] += gx.data[i];
        }
        if (db) {
          const Shape& sw = nodes_[n.b].shape;
          Tensor gw = conv2d_weight_grad(value(n.a), gt, n.i0, n.i1, sw.d[2], sw.d[3]);
          auto g = ga(n.b);
          for (size_t i = 0; i < g.size(); ++i) g[i] += gw.data[i];
        }
        break;
      }
      case Op::kConvInGrad: {
        Tensor gt(n.shape);
        std::copy(go.begin(), go.end(), gt.data.begin());
        if (da) {
          Tensor gg = conv2d(gt, value(n.b), n.i0, n.i1);
          auto g = ga(n.a);
          for (size_t i = 0; i < g.size(); ++i) g[i] += gg.data[i];
        }
        if (db) {
          const Shape& sw = nodes_[n.b].shape;
          Tensor gw = conv2d_weight_grad(gt, value(n.a), n.i0, n.i1, sw.d[2], sw.d[3]);
          auto g = ga(n.b);
          for (size_t i = 0; i < g.size(); ++i) g[i] += gw.data[i];
        }
        break;
      }
      case Op::kConvWGrad: {
        Tensor gt(n.shape);
        std::copy(go.begin(), go.end(), gt.data.begin());
        if (da) {
          const Shape& sx = nodes_[n.a].shape;
          Tensor gx = conv2d_input_grad(value(n.b), gt, n.i0, n.i1, sx.d[1], sx.d[2]);
          auto g = ga(n.a);
          for (size_t i = 0; i < g.size(); ++i) g[i] += gx.data[i];
        }
        if (db) {
          Tensor gg = conv2d(value(n.a), gt, n.i0, n.i1);
          auto g = ga(n.b);
          for (size_t i = 0; i < g.size(); ++i) g[i] += gg.data[i];
        }
        break;
      }
    }
  }
}

Tensor Graph::adjoint(int id) const {
  const Node& n = node(id);
  if (adj_.size() < buf_.size()) fail(Errc::invalid_argument, "adjoint requested before backward pass");
  Tensor t(n.shape);
  std::copy(adj_.begin() + n.off, adj_.begin() + n.off + n.shape.numel(), t.data.begin());
  return t;
}

std::vector<int> Graph::backward_nodes(int output) {
  const Node& out = node(output);
  if (out.shape.numel() != 1)
    fail(Errc::shape_mismatch, "backward expects a scalar output, got " + out.shape.str());
  size_t n0 = nodes_.size();
  std::vector<char> reach = reachable_from(output);
  std::vector<int> adjn(n0, -1);
  if (!reach[output]) return adjn;
  adjn[output] = const_scalar(1.0);
  auto accum = [&](int tgt, int contrib) {
    if (tgt < 0 || !nodes_[tgt].diff || !reach[tgt]) return;
    adjn[tgt] = adjn[tgt] < 0 ? contrib : add(adjn[tgt], contrib);
  };
  for (int id = output; id >= 0; --id) {
    if (!reach[id] || adjn[id] < 0) continue;
    const Node n = nodes_[id];
    int go = adjn[id];
    switch (n.op) {
      case Op::kConst:
      case Op::kParam:
      case Op::kHeaviside:
      case Op::kDetach:
        break;
      case Op::kAdd:
        accum(n.a, go);
        accum(n.b, go);
        break;
      case Op::kSub:
        accum(n.a, go);
        accum(n.b, scale(go, -1.0));
        break;
      case Op::kMul:
        accum(n.a, mul(go, n.b));
        accum(n.b, mul(go, n.a));
        break;
      case Op::kDiv:
        accum(n.a, div(go, n.b));
        accum(n.b, scale(div(mul(go, id), n.b), -1.0));
        break;
      case Op::kScale:
        accum(n.a, scale(go, n.c));
        break;
      case Op::kShift:
        accum(n.a, go);
        break;
      case Op::kRelu: {
        int contrib = mul(go, heaviside(n.a));
        if (fault_relu_backward_) contrib = scale(contrib, -1.0);
        accum(n.a, contrib);
        break;
      }
      case Op::kTanh:
        accum(n.a, mul(go, shift(scale(mul(id, id), -1.0), 1.0)));
        break;
      case Op::kExp:
        accum(n.a, mul(go, id));
        break;
      case Op::kLog:
        accum(n.a, div(go, n.a));
        break;
      case Op::kMatMul:
        if (nodes_[n.b].shape.nd == 1) {
          accum(n.a, outer(go, n.b));
          accum(n.b, matmul(transpose(n.a), go));
        } else {
          accum(n.a, matmul(go, transpose(n.b)));
          accum(n.b, matmul(transpose(n.a), go));
        }
        break;
      case Op::kTranspose:
        accum(n.a, transpose(go));
        break;
      case Op::kOuter:
        accum(n.a, matmul(go, n.b));
        accum(n.b, matmul(transpose(go), n.a));
        break;
      case Op::kSum:
        accum(n.a, fill(go, nodes_[n.a].shape));
        break;
      case Op::kFill:
        accum(n.a, sum(go));
        break;
      case Op::kIndex:
        accum(n.a, embed(go, n.i0, nodes_[n.a].shape));
        break;
      case Op::kEmbed:
        accum(n.a, index(go, n.i0));
        break;
      case Op::kRow:
        accum(n.a, embed_row(go, n.i0, nodes_[n.a].shape.d[0]));
        break;
      case Op::kEmbedRow:
        accum(n.a, row(go, n.i0));
        break;
      case Op::kReshape:
        accum(n.a, reshape(go, nodes_[n.a].shape));
        break;
      case Op::kConv: {
        const Shape& sx = nodes_[n.a].shape;
        const Shape& sw = nodes_[n.b].shape;
        accum(n.a, conv_input_grad(go, n.b, n.i0, n.i1, sx.d[1], sx.d[2]));
        accum(n.b, conv_weight_grad(n.a, go, n.i0, n.i1, sw.d[2], sw.d[3]));
        break;
      }
      case Op::kConvInGrad: {
        const Shape& sw = nodes_[n.b].shape;
        accum(n.a, conv(go, n.b, n.i0, n.i1));
        accum(n.b, conv_weight_grad(go, n.a, n.i0, n.i1, sw.d[2], sw.d[3]));
        break;
      }
      case Op::kConvWGrad: {
        const Shape& sx = nodes_[n.a].shape;
        accum(n.a, conv_input_grad(n.b, go, n.i0, n.i1, sx.d[1], sx.d[2]));
        accum(n.b, conv(n.a, go, n.i0, n.i1));
        break;
      }
    }
  }
  return adjn;
}

std::vector<int> Graph::tangent_nodes(const std::map<int, int>& seeds) {
  size_t n0 = nodes_.size();
  for (const auto& [leaf, seed] : seeds) {
    const Node& n = node(leaf);
    if (n.op != Op::kConst && n.op != Op::kParam)
      fail(Errc::invalid_argument, "tangent seed on non-leaf node " + std::to_string(leaf));
    require_same(n.shape, node(seed).shape, "tangent seed");
  }
  std::vector<int> tn(n0, -1);
  // Sum of up to two product-rule contributions, either of which may be a
  // symbolic zero (-1).
  auto join = [&](int x, int y) {
    if (x < 0) return y;
    if (y < 0) return x;
    return add(x, y);
  };
  for (size_t id = 0; id < n0; ++id) {
    const Node n = nodes_[id];
    int ia = static_cast<int>(id);
    int ta = n.a >= 0 ? tn[n.a] : -1;
    int tb = n.b >= 0 ? tn[n.b] : -1;
    switch (n.op) {
      case Op::kConst:
      case Op::kParam: {
        auto it = seeds.find(ia);
        tn[id] = it == seeds.end() ? -1 : it->second;
        break;
      }
      case Op::kAdd:
        tn[id] = join(ta, tb);
        break;
      case Op::kSub:
        if (ta >= 0 && tb >= 0) tn[id] = sub(ta, tb);
        else if (ta >= 0) tn[id] = ta;
        else if (tb >= 0) tn[id] = scale(tb, -1.0);
        break;
      case Op::kMul:
        tn[id] = join(ta >= 0 ? mul(ta, n.b) : -1, tb >= 0 ? mul(n.a, tb) : -1);
        break;
      case Op::kDiv: {
        if (ta < 0 && tb < 0) break;
        int num;
        if (tb < 0) num = ta;
        else if (ta < 0) num = scale(mul(ia, tb), -1.0);
        else num = sub(ta, mul(ia, tb));
        tn[id] = div(num, n.b);
        break;
      }
      case Op::kScale:
        if (ta >= 0) tn[id] = scale(ta, n.c);
        break;
      case Op::kShift:
        tn[id] = ta;
        break;
      case Op::kRelu:
        if (ta >= 0) tn[id] = mul(heaviside(n.a), ta);
        break;
      case Op::kHeaviside:
      case Op::kDetach:
        break;
      case Op::kTanh:
        if (ta >= 0) tn[id] = mul(shift(scale(mul(ia, ia), -1.0), 1.0), ta);
        break;
      case Op::kExp:
        if (ta >= 0) tn[id] = mul(ia, ta);
        break;
      case Op::kLog:
        if (ta >= 0) tn[id] = div(ta, n.a);
        break;
      case Op::kMatMul:
        tn[id] = join(ta >= 0 ? matmul(ta, n.b) : -1, tb >= 0 ? matmul(n.a, tb) : -1);
        break;
      case Op::kTranspose:
        if (ta >= 0) tn[id] = transpose(ta);
        break;
      case Op::kOuter:
        tn[id] = join(ta >= 0 ? outer(ta, n.b) : -1, tb >= 0 ? outer(n.a, tb) : -1);
        break;
      case Op::kSum:
        if (ta >= 0) tn[id] = sum(ta);
        break;
      case Op::kFill:
        if (ta >= 0) tn[id] = fill(ta, n.shape);
        break;
      case Op::kIndex:
        if (ta >= 0) tn[id] = index(ta, n.i0);
        break;
      case Op::kEmbed:
        if (ta >= 0) tn[id] = embed(ta, n.i0, n.shape);
        break;
      case Op::kRow:
        if (ta >= 0) tn[id] = row(ta, n.i0);
        break;
      case Op::kEmbedRow:
        if (ta >= 0) tn[id] = embed_row(ta, n.i0, n.shape.d[0]);
        break;
      case Op::kReshape:
        if (ta >= 0) tn[id] = reshape(ta, n.shape);
        break;
      case Op::kConv:
        tn[id] = join(ta >= 0 ? conv(ta, n.b, n.i0, n.i1) : -1, tb >= 0 ? conv(n.a, tb, n.i0, n.i1) : -1);
        break;
      case Op::kConvInGrad:
        tn[id] = join(ta >= 0 ? conv_input_grad(ta, n.b, n.i0, n.i1, n.shape.d[1], n.shape.d[2]) : -1,
                      tb >= 0 ? conv_input_grad(n.a, tb, n.i0, n.i1, n.shape.d[1], n.shape.d[2]) : -1);
        break;
      case Op::kConvWGrad:
        tn[id] = join(ta >= 0 ? conv_weight_grad(ta, n.b, n.i0, n.i1, n.shape.d[2], n.shape.d[3]) : -1,
                      tb >= 0 ? conv_weight_grad(n.a, tb, n.i0, n.i1, n.shape.d[2], n.shape.d[3]) : -1);
        break;
    }
  }
  return tn;
}

GradMap backward(Graph& g, int output, const std::vector<std::string>& names) {
  g.backward_values(output);
  GradMap out;
  for (const auto& name : names) out[name] = g.adjoint(g.param_id(name));
  return out;
}

GradMap backward(Graph& g, int output) {
  std::vector<std::string> names;
  for (const auto& [name, _] : g.params()) names.push_back(name);
  return backward(g, output, names);
}

static std::map<int, int> direction_seeds(Graph& g, const GradMap& direction) {
  for (const auto& [name, t] : direction) {
    int id = g.param_id(name);
    if (!(g.shape(id) == t.shape))
      fail(Errc::shape_mismatch, "direction for '" + name + "' has shape " + t.shape.str() +
                                     ", parameter has " + g.shape(id).str());
  }
  std::map<int, int> seeds;
  for (const auto& [name, id] : g.params()) {
    auto it = direction.find(name);
    if (it == direction.end())
      fail(Errc::invalid_argument, "direction missing parameter '" + name + "'");
    seeds[id] = g.constant(it->second);
  }
  return seeds;
}

int jvp_node(Graph& g, int output, const GradMap& direction) {
  std::map<int, int> seeds = direction_seeds(g, direction);
  std::vector<int> tn = g.tangent_nodes(seeds);
  int t = tn[output];
  if (t >= 0) return t;
  return g.fill(g.const_scalar(0.0), g.shape(output));
}

Tensor jvp(Graph& g, int output, const GradMap& direction) { return g.value(jvp_node(g, output, direction)); }

int hvp_quadratic_node(Graph& g, int output, const GradMap& direction) {
  std::map<int, int> seeds = direction_seeds(g, direction);
  std::vector<int> t1 = g.tangent_nodes(seeds);
  if (t1[output] < 0) return g.fill(g.const_scalar(0.0), g.shape(output));
  std::vector<int> t2 = g.tangent_nodes(seeds);
  int t = t2[t1[output]];
  if (t >= 0) return t;
  return g.fill(g.const_scalar(0.0), g.shape(output));
}

Tensor hvp_quadratic(Graph& g, int output, const GradMap& direction) {
  return g.value(hvp_quadratic_node(g, output, direction));
}

GradMap grad_of_scalar_grad(Graph& g, int h, const std::vector<std::string>& names) {
  bool connected = false;
  g.backward_values(h);  // also validates that h is scalar
  GradMap out;
  for (const auto& name : names) out[name] = g.adjoint(g.param_id(name));
  for (const auto& [name, id] : g.params())
    if (std::find(names.begin(), names.end(), name) != names.end() && g.depends_on(h, id)) connected = true;
  if (!connected)
    fail(Errc::not_differentiable, "scalar has no differentiable path to the requested parameters");
  return out;
}

}  // namespace trat
