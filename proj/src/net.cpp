#include "trat/net.hpp"

#include <zlib.h>

#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace trat {

namespace {

struct ArchCursor {
  const std::string& s;
  size_t pos = 0;

  [[noreturn]] void error(const std::string& what) const {
    fail(Errc::parse_error,
         "architecture descriptor, column " + std::to_string(pos + 1) + ": " + what);
  }
  bool done() const { return pos >= s.size(); }
  char peek() const { return s[pos]; }
  void expect(char c) {
    if (done() || s[pos] != c) error(std::string("expected '") + c + "'");
    ++pos;
  }
  std::string ident() {
    size_t start = pos;
    while (!done() && (std::isalpha(static_cast<unsigned char>(s[pos])) || s[pos] == '_')) ++pos;
    if (pos == start) error("expected a layer name");
    return s.substr(start, pos - start);
  }
  int number() {
    size_t start = pos;
    while (!done() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos == start) error("expected a number");
    return std::stoi(s.substr(start, pos - start));
  }
};

}  // namespace

std::vector<Layer> parse_arch(const std::string& descriptor) {
  if (descriptor.empty()) fail(Errc::parse_error, "architecture descriptor, column 1: empty descriptor");
  ArchCursor c{descriptor};
  std::vector<Layer> layers;
  bool flattened = false;
  while (true) {
    size_t item_col = c.pos + 1;
    std::string name = c.ident();
    Layer l;
    if (name == "dense") {
      l.kind = Layer::Kind::dense;
      c.expect('(');
      l.in = c.number();
      c.expect(',');
      l.out = c.number();
      c.expect(')');
      if (l.in <= 0 || l.out <= 0)
        fail(Errc::parse_error, "architecture descriptor, column " + std::to_string(item_col) +
                                    ": dense extents must be positive");
    } else if (name == "conv") {
      l.kind = Layer::Kind::conv;
      c.expect('(');
      l.ic = c.number();
      c.expect(',');
      l.oc = c.number();
      c.expect(',');
      l.k = c.number();
      c.expect(',');
      l.s = c.number();
      c.expect(',');
      l.p = c.number();
      c.expect(')');
      if (l.ic <= 0 || l.oc <= 0 || l.k <= 0 || l.s <= 0 || l.p < 0)
        fail(Errc::parse_error, "architecture descriptor, column " + std::to_string(item_col) +
                                    ": bad conv parameters");
      if (flattened)
        fail(Errc::parse_error, "architecture descriptor, column " + std::to_string(item_col) +
                                    ": conv after flatten");
    } else if (name == "relu") {
      l.kind = Layer::Kind::relu;
    } else if (name == "tanh") {
      l.kind = Layer::Kind::tanh;
    } else if (name == "flatten") {
      l.kind = Layer::Kind::flatten;
      flattened = true;
    } else {
      fail(Errc::parse_error, "architecture descriptor, column " + std::to_string(item_col) +
                                  ": unknown layer '" + name + "'");
    }
    layers.push_back(l);
    if (c.done()) break;
    c.expect(',');
  }
  // Static composition checks over what the descriptor pins down.
  int prev_out = -1;  // dense output width or conv channel count
  bool prev_was_conv = false;
  for (const Layer& l : layers) {
    if (l.kind == Layer::Kind::dense) {
      if (prev_out >= 0 && !prev_was_conv && l.in != prev_out)
        fail(Errc::parse_error, "architecture descriptor: dense(" + std::to_string(l.in) +
                                    ",...) does not compose with preceding width " +
                                    std::to_string(prev_out));
      prev_out = l.out;
      prev_was_conv = false;
    } else if (l.kind == Layer::Kind::conv) {
      if (prev_out >= 0 && prev_was_conv && l.ic != prev_out)
        fail(Errc::parse_error, "architecture descriptor: conv expects " + std::to_string(l.ic) +
                                    " channels after a layer producing " + std::to_string(prev_out));
      prev_out = l.oc;
      prev_was_conv = true;
    } else if (l.kind == Layer::Kind::flatten) {
      prev_out = -1;  // flattened width depends on the input spatial size
    }
  }
  if (layers.back().kind != Layer::Kind::dense)
    fail(Errc::parse_error, "architecture descriptor: final layer must be dense");
  return layers;
}

std::string resolve_arch_preset(const std::string& name_or_descriptor) {
  if (name_or_descriptor == "mlp-moons") return "dense(2,64),tanh,dense(64,64),tanh,dense(64,2)";
  // Sized for 28x28 single-channel inputs: 26x26 after the first conv,
  // 12x12x16 = 2304 after the strided one.
  if (name_or_descriptor == "cnn-tiny")
    return "conv(1,8,3,1,0),relu,conv(8,16,3,2,0),relu,flatten,dense(2304,10)";
  return name_or_descriptor;
}

Network Network::init(const std::string& descriptor, Rng& rng) {
  Network net;
  net.arch = resolve_arch_preset(descriptor);
  net.layers = parse_arch(net.arch);
  for (size_t i = 0; i < net.layers.size(); ++i) {
    Layer& l = net.layers[i];
    std::string prefix = "L" + std::to_string(i);
    if (l.kind == Layer::Kind::dense) {
      l.pidx = static_cast<int>(net.params.size());
      double std = std::sqrt(2.0 / l.in);
      net.params.emplace_back(prefix + ".W", sample_gaussian(rng, 0.0, std, Shape::mat(l.out, l.in)));
      net.params.emplace_back(prefix + ".b", Tensor::zeros(Shape::vec(l.out)));
    } else if (l.kind == Layer::Kind::conv) {
      l.pidx = static_cast<int>(net.params.size());
      double std = std::sqrt(2.0 / (l.ic * l.k * l.k));
      net.params.emplace_back(prefix + ".W",
                              sample_gaussian(rng, 0.0, std, Shape{l.oc, l.ic, l.k, l.k}));
      net.params.emplace_back(prefix + ".b", Tensor::zeros(Shape::vec(l.oc)));
    }
  }
  return net;
}

int Network::num_classes() const { return layers.back().out; }

std::string Network::final_weight_name() const {
  return params[layers.back().pidx].first;
}

const Tensor& Network::param(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  fail(Errc::invalid_argument, "network has no parameter '" + name + "'");
}

std::vector<std::string> Network::param_names() const {
  std::vector<std::string> names;
  for (const auto& [n, _] : params) names.push_back(n);
  return names;
}

ForwardRec Network::record(Graph& g, int input, bool train_weights) const {
  std::map<std::string, int> nodes;
  for (const auto& [name, value] : params)
    nodes[name] = train_weights ? g.param(name, value) : g.constant(value);
  return record_with(g, input, nodes);
}

ForwardRec Network::record_with(Graph& g, int input, const std::map<std::string, int>& param_nodes) const {
  ForwardRec rec;
  rec.param_nodes = param_nodes;
  auto weight_node = [&](int pidx) {
    const auto& name = params[pidx].first;
    auto it = param_nodes.find(name);
    if (it == param_nodes.end()) fail(Errc::invalid_argument, "no node supplied for parameter '" + name + "'");
    return it->second;
  };
  int x = input;
  for (const Layer& l : layers) {
    switch (l.kind) {
      case Layer::Kind::dense: {
        if (g.shape(x).nd != 1 || g.shape(x).d[0] != l.in)
          fail(Errc::shape_mismatch, "dense(" + std::to_string(l.in) + "," + std::to_string(l.out) +
                                         ") applied to " + g.shape(x).str());
        int W = weight_node(l.pidx);
        int b = weight_node(l.pidx + 1);
        rec.final_w = W;
        x = g.add(g.matmul(W, x), b);
        break;
      }
      case Layer::Kind::conv: {
        int W = weight_node(l.pidx);
        int b = weight_node(l.pidx + 1);
        x = g.conv(x, W, l.s, l.p);
        const Shape& so = g.shape(x);
        // Per-channel bias broadcast over the spatial grid.
        int ones = g.constant(Tensor::full(Shape::vec(so.d[1] * so.d[2]), 1.0));
        x = g.add(x, g.reshape(g.outer(b, ones), so));
        break;
      }
      case Layer::Kind::relu:
        x = g.relu(x);
        break;
      case Layer::Kind::tanh:
        x = g.tanh(x);
        break;
      case Layer::Kind::flatten:
        x = g.reshape(x, Shape::vec(static_cast<int>(g.shape(x).numel())));
        break;
    }
  }
  rec.logits = x;
  return rec;
}

int Network::forward(Graph& g, const Tensor& s, bool train_weights) const {
  return record(g, g.constant(s), train_weights).logits;
}

Tensor Network::forward_values(const Tensor& s) const {
  Tensor x = s;
  for (const Layer& l : layers) {
    switch (l.kind) {
      case Layer::Kind::dense: {
        if (x.shape.nd != 1 || x.shape.d[0] != l.in)
          fail(Errc::shape_mismatch, "dense(" + std::to_string(l.in) + "," + std::to_string(l.out) +
                                         ") applied to " + x.shape.str());
        x = add(matmul(params[l.pidx].second, x), params[l.pidx + 1].second);
        break;
      }
      case Layer::Kind::conv: {
        x = conv2d(x, params[l.pidx].second, l.s, l.p);
        const Tensor& b = params[l.pidx + 1].second;
        for (int c = 0; c < x.shape.d[0]; ++c) {
          size_t plane = static_cast<size_t>(x.shape.d[1]) * x.shape.d[2];
          for (size_t i = 0; i < plane; ++i) x.data[c * plane + i] += b.data[c];
        }
        break;
      }
      case Layer::Kind::relu:
        x = relu(x);
        break;
      case Layer::Kind::tanh:
        x = tanh(x);
        break;
      case Layer::Kind::flatten:
        x = Tensor(Shape::vec(static_cast<int>(x.numel())), std::move(x.data));
        break;
    }
  }
  return x;
}

Network Network::perturbed(const GradMap& delta) const {
  if (delta.size() != params.size())
    fail(Errc::count_mismatch, "perturbation covers " + std::to_string(delta.size()) +
                                   " parameters, network has " + std::to_string(params.size()));
  Network out = *this;
  for (auto& [name, value] : out.params) {
    auto it = delta.find(name);
    if (it == delta.end()) fail(Errc::invalid_argument, "perturbation missing parameter '" + name + "'");
    value = add(value, it->second);
  }
  return out;
}

GradMap Network::noise_like(Rng& rng, double std) const {
  GradMap out;
  for (const auto& [name, value] : params) out[name] = sample_gaussian(rng, 0.0, std, value.shape);
  return out;
}

namespace {

constexpr char kMagic[4] = {'T', 'R', 'A', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) fail(Errc::truncated, "checkpoint truncated at byte " + std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

}  // namespace

std::string serialize(const Network& net) {
  std::string payload;
  payload.append(kMagic, 4);
  put_u32(payload, kVersion);
  put_string(payload, net.arch);
  put_u32(payload, static_cast<std::uint32_t>(net.params.size()));
  for (const auto& [name, t] : net.params) {
    put_string(payload, name);
    put_u32(payload, static_cast<std::uint32_t>(t.shape.nd));
    for (int i = 0; i < t.shape.nd; ++i) put_u32(payload, static_cast<std::uint32_t>(t.shape.d[i]));
    for (double v : t.data) put_f64(payload, v);
  }
  return payload;
}

std::uint32_t checksum(const Network& net) {
  std::string payload = serialize(net);
  return static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
}

void save(const Network& net, const std::string& path) {
  std::string payload = serialize(net);
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
  put_u32(payload, crc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) fail(Errc::io_error, "short write to '" + path + "'");
}

Network load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12) fail(Errc::truncated, "checkpoint shorter than its fixed header");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) fail(Errc::bad_magic, "'" + path + "' is not a checkpoint file");
  ByteReader r{buf, 4};
  std::uint32_t version = r.u32();
  if (version != kVersion)
    fail(Errc::bad_version, "checkpoint version " + std::to_string(version) + ", expected " +
                                std::to_string(kVersion));
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[buf.size() - 4 + i])) << (8 * i);
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
  if (crc != stored_crc) fail(Errc::bad_crc, "checkpoint CRC mismatch in '" + path + "'");

  Network net;
  net.arch = r.str();
  net.layers = parse_arch(net.arch);
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    std::uint32_t nd = r.u32();
    if (nd > 4) fail(Errc::parse_error, "checkpoint parameter '" + name + "' has rank " + std::to_string(nd));
    Shape shape;
    shape.nd = static_cast<int>(nd);
    for (std::uint32_t d = 0; d < nd; ++d) shape.d[d] = static_cast<int>(r.u32());
    Tensor t(shape);
    for (auto& v : t.data) v = r.f64();
    net.params.emplace_back(name, std::move(t));
  }
  if (r.pos != buf.size() - 4)
    fail(Errc::parse_error, "checkpoint has trailing bytes after its parameter table");

  // The stored parameter set must agree with what the descriptor implies.
  Rng probe(0);
  Network skeleton = Network::init(net.arch, probe);
  if (skeleton.params.size() != net.params.size())
    fail(Errc::count_mismatch, "checkpoint stores " + std::to_string(net.params.size()) +
                                   " parameters, descriptor implies " +
                                   std::to_string(skeleton.params.size()));
  for (size_t i = 0; i < net.params.size(); ++i) {
    if (net.params[i].first != skeleton.params[i].first)
      fail(Errc::parse_error, "checkpoint parameter '" + net.params[i].first +
                                  "' does not match descriptor order");
    if (!(net.params[i].second.shape == skeleton.params[i].second.shape))
      fail(Errc::shape_mismatch, "checkpoint parameter '" + net.params[i].first + "' has shape " +
                                     net.params[i].second.shape.str() + ", descriptor implies " +
                                     skeleton.params[i].second.shape.str());
  }
  for (size_t i = 0; i < net.layers.size(); ++i) net.layers[i].pidx = skeleton.layers[i].pidx;
  return net;
}

}  // namespace trat
